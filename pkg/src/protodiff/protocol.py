"""Synthetic data, the base session, incremental sessions and full runs."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics
from .classifier import SessionReport, aggregate_run, evaluate_session
from .config import RunConfig, stage_seeds, write_config
from .diffusion import Denoiser, save_denoiser, train_base
from .embedding import (
    FrozenEncoder,
    encode,
    load_conditions,
    require_conditions,
    train_encoder,
    write_conditions,
)
from .numerics import checksum, save_net
from .prototypes import (
    PrototypeConfig,
    PrototypeRecord,
    build_session_prototypes,
    record_bytes,
    save_prototypes,
)
from .schedule import NoiseSchedule, build_cosine_schedule

log = logging.getLogger(__name__)


class ContractViolation(RuntimeError):
    """A training-free or immutability invariant was broken."""


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    d_v: int = 64
    d_c: int = 8
    sigma: float = 0.65
    signal_scale: float = 3.0
    attrs_per_class: int = 2
    train_per_class: int = 200


@dataclass(frozen=True)
class ProtocolSpec:
    num_base_classes: int = 10
    sessions: tuple = ((2, 5),) * 4
    eval_per_class: int = 100

    def __post_init__(self):
        if self.num_base_classes < 1:
            raise ValueError("need at least one base class")
        for ways, shots in self.sessions:
            if ways < 0 or shots < 1:
                raise ValueError(f"invalid session {ways}-way {shots}-shot")

    @property
    def num_classes(self) -> int:
        return self.num_base_classes + sum(w for w, _ in self.sessions)

    def session_classes(self) -> list[list[int]]:
        """Class ids introduced by each session, base session first."""
        out = [list(range(self.num_base_classes))]
        nxt = self.num_base_classes
        for ways, _ in self.sessions:
            out.append(list(range(nxt, nxt + ways)))
            nxt += ways
        return out


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    conditions: dict[int, np.ndarray]
    class_means: dict[int, np.ndarray] | None = None

    def class_samples(self, split: str, class_id: int) -> np.ndarray:
        x, y = (self.train_x, self.train_y) if split == "train" else (self.eval_x, self.eval_y)
        return x[y == class_id]


def attribute_basis(d_v: int, d_c: int, rng: np.random.Generator) -> np.ndarray:
    """``d_c`` orthonormal pattern vectors as columns of a ``(d_v, d_c)`` matrix."""
    if d_c > d_v:
        raise ValueError(f"d_c ({d_c}) > d_v ({d_v}): basis cannot be orthogonal")
    q, r = np.linalg.qr(rng.standard_normal((d_v, d_c)))
    return q * np.sign(np.diag(r))


def mixture_weights(num_base: int, num_total: int, d_c: int, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Sparse non-negative attribute weights, one row per class.

    Supports are distinct whenever there are enough combinations, and the base
    classes jointly use every attribute that any novel class uses.
    """
    combos = list(itertools.combinations(range(d_c), k))
    for _ in range(1000):
        if len(combos) >= num_total:
            picks = rng.permutation(len(combos))[:num_total]
        else:
            picks = rng.integers(0, len(combos), size=num_total)
        supports = [combos[i] for i in picks]
        base_attrs = set().union(*supports[:num_base])
        if all(set(s) <= base_attrs for s in supports[num_base:]):
            break
    else:
        raise ValueError("could not draw novel classes composed of base attributes")
    w = np.zeros((num_total, d_c))
    for c, sup in enumerate(supports):
        w[c, list(sup)] = rng.uniform(0.5, 1.0, size=k)
    return w


def generate_dataset(spec: SyntheticSpec, protocol: ProtocolSpec, seed: int) -> Dataset:
    """Gaussian classes whose means mix orthonormal attribute patterns.

    The mixing weights double as the class condition vectors.
    """
    if spec.d_c > spec.d_v:
        raise ValueError(f"d_c ({spec.d_c}) > d_v ({spec.d_v}): basis cannot be orthogonal")
    rng = np.random.default_rng(seed)
    basis = attribute_basis(spec.d_v, spec.d_c, rng)
    n_cls = protocol.num_classes
    w = mixture_weights(protocol.num_base_classes, n_cls, spec.d_c, spec.attrs_per_class, rng)
    means = spec.signal_scale * w @ basis.T
    tx, ty, ex, ey = [], [], [], []
    for c in range(n_cls):
        tx.append(means[c] + spec.sigma * rng.standard_normal((spec.train_per_class, spec.d_v)))
        ty.append(np.full(spec.train_per_class, c))
        ex.append(means[c] + spec.sigma * rng.standard_normal((protocol.eval_per_class, spec.d_v)))
        ey.append(np.full(protocol.eval_per_class, c))
    return Dataset(
        np.concatenate(tx), np.concatenate(ty),
        np.concatenate(ex), np.concatenate(ey),
        {c: w[c] for c in range(n_cls)},
        {c: means[c] for c in range(n_cls)},
    )


def write_samples(path, x: np.ndarray, y: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id"] + [f"v{i}" for i in range(x.shape[1])])
        for label, row in zip(y, x):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_samples(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "class_id":
            raise ValueError(f"{path}: header must start with 'class_id'")
        ys, xs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns")
            ys.append(int(row[0]))
            xs.append([float(v) for v in row[1:]])
    return np.array(xs, dtype=np.float64).reshape(len(xs), len(header) - 1), np.array(ys)


def write_dataset(ds: Dataset, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"train": d / "train.csv", "eval": d / "eval.csv", "conditions": d / "conditions.csv"}
    write_samples(paths["train"], ds.train_x, ds.train_y)
    write_samples(paths["eval"], ds.eval_x, ds.eval_y)
    write_conditions(paths["conditions"], ds.conditions)
    return paths


def load_dataset(train_path, eval_path, conditions_path) -> Dataset:
    tx, ty = read_samples(train_path)
    ex, ey = read_samples(eval_path)
    return Dataset(tx, ty, ex, ey, load_conditions(conditions_path))


def specs_from_config(config: RunConfig) -> tuple[SyntheticSpec, ProtocolSpec]:
    return (
        SyntheticSpec(config.d_v, config.d_c, config.sigma, config.signal_scale,
                      config.attrs_per_class, config.train_per_class),
        ProtocolSpec(config.base_classes, tuple(config.sessions), config.eval_per_class),
    )


def dataset_for_config(config: RunConfig) -> Dataset:
    if config.source == "file":
        ds = load_dataset(config.train_path, config.eval_path, config.conditions_path)
        if ds.train_x.shape[1] != config.d_v:
            raise ValueError(f"data width {ds.train_x.shape[1]} != d_v {config.d_v}")
        return ds
    spec, proto = specs_from_config(config)
    return generate_dataset(spec, proto, stage_seeds(config.seed)["data"])


def draw_shots(ds: Dataset, protocol: ProtocolSpec, seed: int) -> dict[int, np.ndarray]:
    """K training samples per novel class, drawn once without replacement."""
    rng = np.random.default_rng(seed)
    shots = {}
    for classes, (_, k) in zip(protocol.session_classes()[1:], protocol.sessions):
        for c in classes:
            pool = ds.class_samples("train", c)
            if len(pool) < k:
                raise ValueError(f"class {c} has {len(pool)} training samples, need {k}")
            shots[c] = pool[np.sort(rng.choice(len(pool), size=k, replace=False))]
    return shots


@dataclass
class Models:
    encoder: FrozenEncoder
    denoiser: Denoiser
    schedule: NoiseSchedule
    encoder_train_acc: float
    loss_curve: list[float]

    def checksums(self) -> dict[str, str]:
        return {"encoder": self.encoder.checksum(), "denoiser": self.denoiser.checksum()}


@dataclass
class SessionState:
    """Everything carried from one session to the next."""

    models: Models
    dataset: Dataset
    protocol: ProtocolSpec
    proto_config: PrototypeConfig
    store: dict[int, PrototypeRecord] = field(default_factory=dict)
    reports: list[SessionReport] = field(default_factory=list)
    seen: list[int] = field(default_factory=list)
    frozen_checksums: dict[str, str] = field(default_factory=dict)
    optimizer_steps_at_freeze: int = 0
    record_snapshot: dict[int, bytes] = field(default_factory=dict)
    gen_cache: dict = field(default_factory=dict)

    @property
    def base_classes(self) -> list[int]:
        return list(range(self.protocol.num_base_classes))


def train_models(ds: Dataset, config: RunConfig) -> Models:
    """Encoder first (fixes feature semantics), then the denoiser; both frozen."""
    seeds = stage_seeds(config.seed)
    base = ds.train_y < config.base_classes
    x, y = ds.train_x[base], ds.train_y[base]
    require_conditions(ds.conditions, range(config.base_classes))
    encoder, acc = train_encoder(
        x, y, config.base_classes, feature_dim=config.d, hidden=config.encoder_hidden,
        epochs=config.encoder_epochs, batch_size=config.batch,
        learning_rate=config.encoder_lr, weight_decay=config.weight_decay,
        seed=seeds["encoder"],
    )
    sched = build_cosine_schedule(config.T, config.s)
    rng = np.random.default_rng(seeds["denoiser"])
    denoiser = Denoiser.init(config.d_v, config.d_c, config.denoiser_hidden, rng, sched,
                             config.time_width, config.cond_width)
    curve = train_base(
        denoiser, x, y, ds.conditions, sched,
        epochs=config.epochs, steps_per_epoch=config.steps_per_epoch,
        batch_size=config.batch, learning_rate=config.lr,
        weight_decay=config.weight_decay, seed=rng,
    )
    return Models(encoder, denoiser, sched, acc, curve)


def prototype_config(config: RunConfig, **changes) -> PrototypeConfig:
    kw = dict(n_generated=config.N, alpha=config.alpha, base_fusion=config.base_fusion,
              T_sample=config.T_sample, seed=stage_seeds(config.seed)["prototypes"],
              threads=config.threads)
    kw.update(changes)
    return PrototypeConfig(**kw)


def _eval_features(state: SessionState) -> tuple[np.ndarray, np.ndarray]:
    mask = np.isin(state.dataset.eval_y, state.seen)
    return (encode(state.models.encoder, state.dataset.eval_x[mask]),
            state.dataset.eval_y[mask])


def start_sessions(models: Models, ds: Dataset, protocol: ProtocolSpec,
                   proto_config: PrototypeConfig, gen_cache: dict | None = None
                   ) -> tuple[SessionState, SessionReport]:
    """Base prototypes (session 0) and the session-0 report for frozen models."""
    if not (models.encoder.frozen and models.denoiser.frozen):
        raise ContractViolation("models must be frozen before prototypes are built")
    state = SessionState(models, ds, protocol, proto_config,
                         gen_cache=gen_cache if gen_cache is not None else {})
    base = state.base_classes
    real = {c: ds.class_samples("train", c) for c in base}
    state.store = build_session_prototypes(
        0, base, real, ds.conditions, models.denoiser, models.encoder,
        models.schedule, proto_config, gen_cache=state.gen_cache)
    state.seen = list(base)
    state.frozen_checksums = models.checksums()
    state.optimizer_steps_at_freeze = numerics.optimizer_step_count()
    state.record_snapshot = {c: record_bytes(r) for c, r in state.store.items()}
    feats, labels = _eval_features(state)
    report = evaluate_session(0, state.store, feats, labels, base)
    state.reports.append(report)
    return state, report


def run_base_session(ds: Dataset, config: RunConfig, proto_config: PrototypeConfig | None = None):
    models = train_models(ds, config)
    _, protocol = specs_from_config(config)
    state, report = start_sessions(models, ds, protocol,
                                   proto_config or prototype_config(config))
    return state, report


def check_contract(state: SessionState) -> None:
    if state.models.checksums() != state.frozen_checksums:
        raise ContractViolation("model parameters changed after the base session")
    if numerics.optimizer_step_count() != state.optimizer_steps_at_freeze:
        raise ContractViolation("optimizer steps were taken after the base session")
    for cid, snap in state.record_snapshot.items():
        if record_bytes(state.store[cid]) != snap:
            raise ContractViolation(f"prototype of class {cid} changed after creation")


def run_incremental_session(state: SessionState, session: int, class_ids: Sequence[int],
                            shots: Mapping[int, np.ndarray]) -> SessionReport:
    """Add prototypes for ``class_ids`` from frozen models and evaluate all seen classes."""
    check_contract(state)
    models = state.models
    if state.proto_config.use_real:
        missing = [c for c in class_ids if c not in shots or len(shots[c]) == 0]
        if missing:
            raise ValueError(f"missing few-shot samples for classes {missing}")
    state.store = build_session_prototypes(
        session, class_ids, shots, state.dataset.conditions, models.denoiser,
        models.encoder, models.schedule, state.proto_config, prior=state.store,
        gen_cache=state.gen_cache)
    for c in class_ids:
        state.record_snapshot[c] = record_bytes(state.store[c])
    state.seen = state.seen + list(class_ids)
    feats, labels = _eval_features(state)
    report = evaluate_session(session, state.store, feats, labels, state.base_classes)
    check_contract(state)
    state.reports.append(report)
    return report


def run_sessions(models: Models, ds: Dataset, protocol: ProtocolSpec,
                 shots: Mapping[int, np.ndarray], proto_config: PrototypeConfig,
                 gen_cache: dict | None = None) -> SessionState:
    state, _ = start_sessions(models, ds, protocol, proto_config, gen_cache)
    for i, classes in enumerate(protocol.session_classes()[1:], start=1):
        try:
            run_incremental_session(state, i, classes, shots)
        except ContractViolation:
            raise
        except Exception as e:
            raise StageError(f"session {i} failed: {e}") from e
    return state


def fused_checksum(store: Mapping[int, PrototypeRecord]) -> str:
    return checksum([store[c].fused_proto for c in sorted(store)])


def variant_summary(state: SessionState) -> dict:
    """Metrics-only summary of one run variant (no config, no timestamps)."""
    agg = aggregate_run(state.reports)
    return {
        "sessions": [r.to_dict() for r in state.reports],
        "session_total_acc": agg["sessions"],
        "avg": agg["avg"],
        "last": agg["last"],
        "new_acc": [r.new_acc for r in state.reports],
        "fused_prototypes_sha256": fused_checksum(state.store),
    }


BASELINES = {"real_only": {"n_generated": 0}, "gen_only": {"use_real": False}}


@dataclass
class RunResult:
    config: RunConfig
    models: Models
    state: SessionState
    summary: dict
    baselines: dict[str, SessionState]
    out_dir: Path | None = None


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_summary(config: RunConfig, state: SessionState,
                  baselines: Mapping[str, SessionState], models: Models) -> dict:
    summary = variant_summary(state)
    summary["alpha"] = state.proto_config.alpha
    summary["baselines"] = {k: variant_summary(s) for k, s in baselines.items()}
    summary["last_session_improvement"] = {
        k: aggregate_run(state.reports, s.reports)["last_session_improvement"]
        for k, s in baselines.items()
    }
    summary["checksums"] = models.checksums()
    summary["optimizer_steps_after_base"] = (
        numerics.optimizer_step_count() - state.optimizer_steps_at_freeze)
    summary["encoder_train_acc"] = models.encoder_train_acc
    summary["loss_curve"] = models.loss_curve
    summary["seeds"] = {"master": config.seed, **stage_seeds(config.seed)}
    summary["config"] = config.to_dict()
    summary["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    return summary


def strip_volatile(summary: Mapping) -> dict:
    return {k: v for k, v in summary.items() if k != "created_at"}


def write_run(out: Path, config: RunConfig, ds: Dataset, shots, models: Models,
              state: SessionState, summary: dict,
              baselines: Mapping[str, SessionState]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config", config)
    data_dir = out / "data"
    write_dataset(ds, data_dir)
    if shots:
        cids = sorted(shots)
        write_samples(data_dir / "shots.csv",
                      np.concatenate([shots[c] for c in cids]),
                      np.concatenate([np.full(len(shots[c]), c) for c in cids]))
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_net(models.encoder.net, ck / "encoder.bin")
    save_denoiser(models.denoiser, ck / "denoiser.bin")
    save_prototypes(out / "prototypes.csv", state.store)
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    seeds = summary["seeds"]
    for r in state.reports:
        _dump_json(rep_dir / f"session_{r.session}.json",
                   {**r.to_dict(), "config": config.to_dict(), "seeds": seeds})
    for name, bstate in baselines.items():
        bdir = out / "baselines" / name
        bdir.mkdir(parents=True, exist_ok=True)
        _dump_json(bdir / "summary.json", variant_summary(bstate))
    _dump_json(out / "summary.json", summary)


def run_full_protocol(config: RunConfig, out_dir=None, *, models: Models | None = None,
                      dataset: Dataset | None = None, gen_cache: dict | None = None) -> RunResult:
    """Base session, every incremental session, and the two built-in baselines."""
    stage = "data"
    try:
        ds = dataset if dataset is not None else dataset_for_config(config)
        _, protocol = specs_from_config(config)
        stage = "shots"
        shots = draw_shots(ds, protocol, stage_seeds(config.seed)["shots"])
        stage = "base training"
        if models is None:
            models = train_models(ds, config)
        stage = "sessions"
        # generated prototypes do not depend on alpha or on the real path
        cache = gen_cache if gen_cache is not None else {}
        state = run_sessions(models, ds, protocol, shots, prototype_config(config), cache)
        stage = "baselines"
        baselines = {
            name: run_sessions(models, ds, protocol, shots,
                               prototype_config(config, **kw), cache)
            for name, kw in BASELINES.items()
        }
    except ContractViolation:
        raise
    except Exception as e:
        raise StageError(f"stage '{stage}' failed (seed {config.seed}): {e}") from e
    summary = build_summary(config, state, baselines, models)
    if summary["optimizer_steps_after_base"] != 0:
        raise ContractViolation("optimizer steps were taken after the base session")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        write_run(out, config, ds, shots, models, state, summary, baselines)
    return RunResult(config, models, state, summary, baselines, out)


def ablate_alpha(config: RunConfig, alphas: Sequence[float], out_dir=None) -> list[dict]:
    """One full protocol per alpha, sharing frozen models, data and shots."""
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
    ds = dataset_for_config(config)
    models = train_models(ds, config)
    cache: dict = {}
    rows = []
    for a in alphas:
        cfg = config.replace(alpha=float(a))
        sub = Path(out_dir) / f"alpha_{a:g}" if out_dir is not None else None
        res = run_full_protocol(cfg, sub, models=models, dataset=ds, gen_cache=cache)
        rows.append({"alpha": float(a), "avg": res.summary["avg"],
                     "last": res.summary["last"],
                     "new_acc": res.summary["new_acc"],
                     "summary": res.summary})
    return rows
