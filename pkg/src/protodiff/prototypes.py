"""Training-free class prototypes: generated exemplars, real shots, and their blend."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffusion import Denoiser, ImageSample, sample
from .embedding import FrozenEncoder, encode, require_conditions
from .numerics import FrozenError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class PrototypeRecord:
    class_id: int
    session_created: int
    gen_proto: np.ndarray | None
    real_proto: np.ndarray | None
    fused_proto: np.ndarray
    n_generated: int
    n_real: int
    alpha: float


@dataclass(frozen=True)
class PrototypeConfig:
    n_generated: int = 64
    alpha: float = 0.5
    base_fusion: bool = True
    use_real: bool = True
    T_sample: int = 50
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_generated < 0:
            raise ValueError("n_generated must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n_generated == 0 and not self.use_real:
            raise ValueError("at least one of the generative and real paths is required")


def ordered_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean accumulated left to right, for bitwise reproducibility."""
    if len(vectors) == 0:
        raise ValueError("mean of an empty list")
    acc = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        acc = acc + v
    return acc / len(vectors)


def exemplar_seed(master_seed: int, class_id: int, index: int) -> np.random.SeedSequence:
    """Independent RNG stream per (class, exemplar) so parallel == serial."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(class_id), int(index)))


def generative_prototype(
    denoiser: Denoiser,
    encoder: FrozenEncoder,
    condition: np.ndarray,
    n: int,
    sched: NoiseSchedule,
    *,
    class_id: int,
    seed: int = 0,
    T_sample: int = 50,
    threads: int = 1,
) -> tuple[np.ndarray, list[ImageSample]]:
    """Sample ``n`` exemplars for one condition, encode them and average."""
    if n < 1:
        raise ValueError("generative prototype needs n >= 1 exemplars")
    if not (denoiser.frozen and encoder.frozen):
        raise FrozenError("prototype generation requires frozen models")

    def one(i):
        return sample(denoiser, condition, sched, T_sample, exemplar_seed(seed, class_id, i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            exemplars = list(pool.map(one, range(n)))
    else:
        exemplars = [one(i) for i in range(n)]
    feats = [encode(encoder, ex) for ex in exemplars]
    return ordered_mean(feats), exemplars


def real_prototype(encoder: FrozenEncoder, shots) -> np.ndarray:
    if len(shots) == 0:
        raise ValueError("real prototype needs at least one shot")
    return ordered_mean([encode(encoder, s) for s in shots])


def fuse(gen: np.ndarray | None, real: np.ndarray | None, alpha: float) -> np.ndarray:
    """``(1 - alpha) * gen + alpha * real``; a missing path yields the other one."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if gen is None and real is None:
        raise ValueError("nothing to fuse")
    if real is None:
        return np.array(gen, dtype=np.float64)
    if gen is None:
        return np.array(real, dtype=np.float64)
    if np.shape(gen) != np.shape(real):
        raise ValueError(f"prototype shapes differ: {np.shape(gen)} vs {np.shape(real)}")
    return (1.0 - alpha) * gen + alpha * real


def _make_record(class_id, session, gen, real, n_gen, n_real, alpha) -> PrototypeRecord:
    if real is None:
        alpha = 0.0
    elif gen is None:
        alpha = 1.0
    fused = fuse(gen, real, alpha)
    for arr in (gen, real, fused):
        if arr is not None:
            arr.flags.writeable = False
    return PrototypeRecord(int(class_id), int(session), gen, real, fused,
                           int(n_gen), int(n_real), float(alpha))


def build_session_prototypes(
    session: int,
    class_ids: Sequence[int],
    real_samples: Mapping[int, np.ndarray],
    conditions: Mapping[int, np.ndarray],
    denoiser: Denoiser | None,
    encoder: FrozenEncoder,
    sched: NoiseSchedule | None,
    config: PrototypeConfig,
    prior: Mapping[int, PrototypeRecord] | None = None,
    gen_cache: dict | None = None,
) -> dict[int, PrototypeRecord]:
    """Add records for ``class_ids``; existing records are carried over as-is.

    ``real_samples[c]`` holds the clean samples feeding the real path: the K
    shots for a novel class, every training sample for a base class. In the
    base session (``session == 0``) ``config.base_fusion`` decides whether
    base classes blend in the generative path at all.

    ``gen_cache`` memoises generative prototypes keyed by class and sampler
    settings; they do not depend on ``alpha``.
    """
    store = dict(prior or {})
    overlap = sorted(set(class_ids) & set(store))
    if overlap:
        raise ValueError(f"classes {overlap} already have prototypes")
    use_gen = config.n_generated > 0 and (session > 0 or config.base_fusion)
    if use_gen:
        require_conditions(conditions, class_ids)
    for cid in class_ids:
        gen = real = None
        n_real = 0
        if config.use_real:
            shots = real_samples.get(cid)
            if shots is None or len(shots) == 0:
                raise ValueError(f"no real samples for class {cid}")
            real = real_prototype(encoder, shots)
            n_real = len(shots)
        if use_gen:
            key = (cid, config.n_generated, config.seed, config.T_sample)
            if gen_cache is not None and key in gen_cache:
                gen = gen_cache[key]
            else:
                gen, _ = generative_prototype(
                    denoiser, encoder, conditions[cid], config.n_generated, sched,
                    class_id=cid, seed=config.seed, T_sample=config.T_sample,
                    threads=config.threads,
                )
                if gen_cache is not None:
                    gen_cache[key] = gen
            gen = np.array(gen, copy=True)
        store[cid] = _make_record(cid, session, gen, real,
                                  config.n_generated if use_gen else 0, n_real,
                                  config.alpha)
    return store


PROTOTYPE_HEADER = ["class_id", "session_created", "alpha", "n_gen", "n_real"]


def save_prototypes(path, store: Mapping[int, PrototypeRecord]) -> None:
    """CSV: metadata columns, then gen/real/fused vectors (empty cells if absent)."""
    records = [store[c] for c in sorted(store)]
    d = len(records[0].fused_proto) if records else 0
    header = list(PROTOTYPE_HEADER)
    for name in ("gen", "real", "fused"):
        header += [f"{name}{i}" for i in range(d)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [r.class_id, r.session_created, repr(r.alpha), r.n_generated, r.n_real]
            for vec in (r.gen_proto, r.real_proto, r.fused_proto):
                row += [""] * d if vec is None else [repr(float(x)) for x in vec]
            w.writerow(row)


def load_prototypes(path) -> dict[int, PrototypeRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:5] != PROTOTYPE_HEADER:
            raise ValueError(f"{path}: unexpected prototype header")
        d = (len(header) - 5) // 3
        store = {}
        for row in reader:
            vecs = []
            for k in range(3):
                cells = row[5 + k * d: 5 + (k + 1) * d]
                vecs.append(None if cells[0] == "" else np.array([float(c) for c in cells]))
            cid = int(row[0])
            store[cid] = PrototypeRecord(cid, int(row[1]), vecs[0], vecs[1], vecs[2],
                                         int(row[3]), int(row[4]), float(row[2]))
    return store


def record_bytes(rec: PrototypeRecord) -> bytes:
    """Canonical byte image of a record, used for immutability checks."""
    parts = [np.array([rec.class_id, rec.session_created, rec.n_generated, rec.n_real],
                      dtype="<i8").tobytes(),
             np.array([rec.alpha], dtype="<f8").tobytes()]
    for vec in (rec.gen_proto, rec.real_proto, rec.fused_proto):
        parts.append(b"-" if vec is None else np.asarray(vec, dtype="<f8").tobytes())
    return b"|".join(parts)
