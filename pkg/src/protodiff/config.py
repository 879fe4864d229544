"""Run configuration: an INI file with fixed sections and validated keys."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


def _parse_sessions(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        ways, _, shots = item.partition("x")
        if not shots:
            raise ConfigError(f"session entry {item!r} must look like WAYSxSHOTS")
        out.append((int(ways), int(shots)))
    return tuple(out)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "on", "true", "yes"):
        return True
    if t in ("0", "off", "false", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{w}x{k}" for w, k in value)
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    # [schedule]
    T: int = field(default=1000, metadata={"section": "schedule"})
    s: float = field(default=0.008, metadata={"section": "schedule"})
    T_sample: int = field(default=50, metadata={"section": "schedule"})
    # [dims]
    d_v: int = field(default=64, metadata={"section": "dims"})
    d: int = field(default=16, metadata={"section": "dims"})
    d_c: int = field(default=8, metadata={"section": "dims"})
    time_width: int = field(default=16, metadata={"section": "dims"})
    cond_width: int = field(default=16, metadata={"section": "dims"})
    denoiser_hidden: tuple = field(default=(128, 128), metadata={"section": "dims"})
    encoder_hidden: tuple = field(default=(64,), metadata={"section": "dims"})
    # [training]
    epochs: int = field(default=30, metadata={"section": "training"})
    steps_per_epoch: int = field(default=1000, metadata={"section": "training"})
    batch: int = field(default=64, metadata={"section": "training"})
    lr: float = field(default=1e-4, metadata={"section": "training"})
    weight_decay: float = field(default=5e-4, metadata={"section": "training"})
    encoder_epochs: int = field(default=20, metadata={"section": "training"})
    encoder_lr: float = field(default=1e-3, metadata={"section": "training"})
    # [prototypes]
    N: int = field(default=64, metadata={"section": "prototypes"})
    alpha: float = field(default=0.5, metadata={"section": "prototypes"})
    base_fusion: bool = field(default=True, metadata={"section": "prototypes"})
    # [protocol]
    base_classes: int = field(default=10, metadata={"section": "protocol"})
    sessions: tuple = field(default=((2, 5),) * 4, metadata={"section": "protocol"})
    train_per_class: int = field(default=200, metadata={"section": "protocol"})
    eval_per_class: int = field(default=100, metadata={"section": "protocol"})
    # [data]
    source: str = field(default="synthetic", metadata={"section": "data"})
    sigma: float = field(default=0.65, metadata={"section": "data"})
    signal_scale: float = field(default=3.0, metadata={"section": "data"})
    attrs_per_class: int = field(default=2, metadata={"section": "data"})
    train_path: str = field(default="", metadata={"section": "data"})
    eval_path: str = field(default="", metadata={"section": "data"})
    conditions_path: str = field(default="", metadata={"section": "data"})
    # [run]
    seed: int = field(default=0, metadata={"section": "run"})
    out: str = field(default="runs/default", metadata={"section": "run"})
    threads: int = field(default=1, metadata={"section": "run"})

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def num_classes(self) -> int:
        return self.base_classes + sum(w for w, _ in self.sessions)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for f in dataclasses.fields(self):
            sec = f.metadata["section"]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, _fmt(getattr(self, f.name)))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        out: dict = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out.setdefault(f.metadata["section"], {})[f.name] = v
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
SECTIONS = sorted({f.metadata["section"] for f in _FIELDS.values()})


def _convert(name: str, raw: str):
    default = _FIELDS[name].default
    try:
        if name == "sessions":
            return _parse_sessions(raw)
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _parse_int_list(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(c: RunConfig) -> None:
    _check(c.T >= 1, "T must be >= 1")
    _check(0.0 < c.s < 1.0, "s must lie in (0, 1)")
    _check(1 <= c.T_sample <= c.T, "T_sample must satisfy 1 <= T_sample <= T")
    for name in ("d_v", "d", "d_c", "time_width", "cond_width", "batch",
                 "base_classes", "train_per_class", "eval_per_class", "threads",
                 "attrs_per_class"):
        _check(getattr(c, name) >= 1, f"{name} must be >= 1")
    _check(c.d_c <= c.d_v, f"d_c ({c.d_c}) must not exceed d_v ({c.d_v}): "
           "the attribute basis must be orthogonal in sample space")
    _check(c.attrs_per_class <= c.d_c, "attrs_per_class must not exceed d_c")
    _check(c.base_classes >= 2, "base_classes must be >= 2")
    _check(all(h >= 1 for h in c.denoiser_hidden), "denoiser_hidden sizes must be >= 1")
    _check(all(h >= 1 for h in c.encoder_hidden), "encoder_hidden sizes must be >= 1")
    for name in ("epochs", "steps_per_epoch", "encoder_epochs", "N"):
        _check(getattr(c, name) >= 0, f"{name} must be >= 0")
    _check(c.lr > 0 and c.encoder_lr > 0, "learning rates must be positive")
    _check(c.weight_decay >= 0, "weight_decay must be non-negative")
    _check(0.0 <= c.alpha <= 1.0, "alpha must lie in [0, 1]")
    for ways, shots in c.sessions:
        _check(ways >= 0, "session ways must be >= 0")
        _check(shots >= 1, "session shots must be >= 1")
    _check(c.train_per_class >= max([k for _, k in c.sessions], default=1),
           "train_per_class must cover the largest shot count")
    _check(c.sigma >= 0, "sigma must be non-negative")
    _check(c.signal_scale > 0, "signal_scale must be positive")
    _check(c.source in ("synthetic", "file"), "source must be 'synthetic' or 'file'")
    if c.source == "file":
        _check(bool(c.train_path and c.eval_path and c.conditions_path),
               "source=file needs train_path, eval_path and conditions_path")
    _check(0 <= c.seed < 2**64, "seed must be an unsigned 64-bit integer")


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the INI file at ``path`` (if any), then ``overrides``."""
    values: dict = {}
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in cp.items(sec):
                f = _FIELDS.get(key)
                if f is None or f.metadata["section"] != sec:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                values[key] = _convert(key, raw)
    for key, val in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def stage_seed(master: int, stage: str) -> int:
    """Deterministic 63-bit seed for a named pipeline stage."""
    key = tuple(stage.encode())
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


STAGES = ("data", "shots", "encoder", "denoiser", "prototypes")


def stage_seeds(master: int) -> dict[str, int]:
    return {s: stage_seed(master, s) for s in STAGES}


def write_config(path, config: RunConfig) -> None:
    Path(path).write_text(config.to_ini())
