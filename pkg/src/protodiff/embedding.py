"""Frozen feature encoder and per-class condition vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffusion import ImageSample, MissingConditionError, as_rng
from .numerics import (
    DenseNet,
    FrozenError,
    OptimizerState,
    adam_step,
    backward,
    checksum,
    forward,
)


@dataclass
class FrozenEncoder:
    net: DenseNet

    @property
    def frozen(self) -> bool:
        return self.net.frozen

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @property
    def out_dim(self) -> int:
        return self.net.out_dim

    def freeze(self) -> None:
        self.net.freeze()

    def checksum(self) -> str:
        return checksum(self.net.parameters())


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    grad = p
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def train_encoder(
    x: np.ndarray,
    y: np.ndarray,
    num_base_classes: int,
    *,
    feature_dim: int = 16,
    hidden: Sequence[int] = (64,),
    epochs: int = 20,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
    weight_decay: float = 5e-4,
    seed=0,
) -> tuple[FrozenEncoder, float]:
    """Train encoder + throwaway linear head with cross-entropy, then freeze.

    Returns the frozen encoder and its final training accuracy (the head is
    discarded).
    """
    if num_base_classes < 2:
        raise ValueError("encoder training needs at least 2 base classes")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() >= num_base_classes:
        raise ValueError("encoder training data must contain base classes only")
    rng = as_rng(seed)
    enc = DenseNet.init([x.shape[1], *hidden, feature_dim], rng)
    head = DenseNet.init([feature_dim, num_base_classes], rng)
    params = enc.parameters() + head.parameters()
    state = OptimizerState.for_params(
        params, learning_rate=learning_rate, weight_decay=weight_decay
    )
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            feats = forward(enc, x[idx])
            _, dlogits = _softmax_xent(forward(head, feats), y[idx])
            g_head = backward(head, feats, dlogits)
            g_enc = backward(enc, x[idx], g_head.input)
            adam_step(params, g_enc.parameters() + g_head.parameters(), state)
    train_acc = float(np.mean(np.argmax(forward(head, forward(enc, x)), axis=1) == y))
    enc.freeze()
    return FrozenEncoder(enc), train_acc


def encode(enc: FrozenEncoder, v) -> np.ndarray:
    """Features of clean samples: one ``ImageSample``, a vector, or a batch."""
    if not enc.frozen:
        raise FrozenError("encoder must be frozen before it is used for features")
    if isinstance(v, ImageSample):
        if v.timestep != 0:
            raise ValueError(
                f"refusing to encode a sample still at timestep {v.timestep}"
            )
        v = v.values
    return forward(enc.net, v)


def load_conditions(path) -> dict[int, np.ndarray]:
    """Read ``class_id,v0,v1,...`` rows into ``{class_id: vector}``."""
    path = Path(path)
    table: dict[int, np.ndarray] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "class_id":
            raise ValueError(f"{path}: header must start with 'class_id'")
        width = len(header) - 1
        if width < 1:
            raise ValueError(f"{path}: no vector columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != width:
                raise ValueError(
                    f"{path}:{lineno}: expected {width} values, got {len(row) - 1}"
                )
            cid = int(row[0])
            if cid in table:
                raise ValueError(f"{path}:{lineno}: duplicate class_id {cid}")
            vec = np.array([float(s) for s in row[1:]])
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            table[cid] = vec
    return table


def write_conditions(path, table: Mapping[int, np.ndarray]) -> None:
    rows = sorted(table.items())
    width = len(rows[0][1]) if rows else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id"] + [f"v{i}" for i in range(width)])
        for cid, vec in rows:
            w.writerow([cid] + [repr(float(v)) for v in vec])


def require_conditions(table: Mapping[int, np.ndarray], class_ids: Iterable[int]) -> None:
    for cid in class_ids:
        if int(cid) not in table:
            raise MissingConditionError(f"class {cid} has no condition vector")
