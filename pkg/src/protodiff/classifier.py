"""Nearest-prototype prediction by cosine similarity, and session metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .prototypes import PrototypeRecord


class DegenerateVectorError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    predicted: int
    scores: dict[int, float]


@dataclass
class SessionReport:
    session: int
    total_acc: float
    base_acc: float | None
    new_acc: float | None
    n_queries: int
    n_base_queries: int
    n_new_queries: int
    per_class: dict[int, float] = field(default_factory=dict)
    correct: int = 0
    base_correct: int = 0
    new_correct: int = 0

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "total_acc": self.total_acc,
            "base_acc": self.base_acc,
            "new_acc": self.new_acc,
            "n_queries": self.n_queries,
            "n_base_queries": self.n_base_queries,
            "n_new_queries": self.n_new_queries,
            "correct": self.correct,
            "base_correct": self.base_correct,
            "new_correct": self.new_correct,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SessionReport":
        return cls(
            session=int(d["session"]),
            total_acc=float(d["total_acc"]),
            base_acc=d["base_acc"],
            new_acc=d["new_acc"],
            n_queries=int(d["n_queries"]),
            n_base_queries=int(d["n_base_queries"]),
            n_new_queries=int(d["n_new_queries"]),
            per_class={int(k): float(v) for k, v in d["per_class"].items()},
            correct=int(d["correct"]),
            base_correct=int(d["base_correct"]),
            new_correct=int(d["new_correct"]),
        )


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt(np.sum(m * m, axis=1))
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateVectorError(f"zero-norm or non-finite {what}")
    return m / norms[:, None]


def prototype_matrix(prototypes) -> tuple[np.ndarray, np.ndarray]:
    """Sorted class ids and the matching rows of fused prototypes."""
    if isinstance(prototypes, Mapping):
        prototypes = list(prototypes.values())
    recs = sorted(prototypes, key=lambda r: r.class_id)
    if not recs:
        raise ValueError("no prototypes to classify against")
    ids = np.array([r.class_id for r in recs])
    return ids, np.stack([r.fused_proto for r in recs])


def cosine_scores(queries: np.ndarray, protos: np.ndarray) -> np.ndarray:
    q = _unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)), "query")
    p = _unit_rows(np.atleast_2d(np.asarray(protos, dtype=np.float64)), "prototype")
    # elementwise product + row sum: identical prototypes give identical scores
    return np.sum(q[:, None, :] * p[None, :, :], axis=2)


def predict(queries: np.ndarray, prototypes) -> np.ndarray:
    """Predicted class id for each query row; exact ties go to the lowest id."""
    ids, mat = prototype_matrix(prototypes)
    scores = cosine_scores(queries, mat)
    # ids are sorted ascending and argmax returns the first maximum
    return ids[np.argmax(scores, axis=1)]


def classify(x_q: np.ndarray, prototypes) -> Prediction:
    ids, mat = prototype_matrix(prototypes)
    scores = cosine_scores(x_q, mat)[0]
    best = int(ids[int(np.argmax(scores))])
    return Prediction(best, {int(c): float(s) for c, s in zip(ids, scores)})


def evaluate_session(
    session: int,
    prototypes: Mapping[int, PrototypeRecord],
    features: np.ndarray,
    labels: np.ndarray,
    base_classes: Sequence[int],
) -> SessionReport:
    """Top-1 accuracy (percent) over all seen classes, split into base and new."""
    labels = np.asarray(labels)
    unseen = sorted(set(labels.tolist()) - set(prototypes))
    if unseen:
        raise ValueError(f"evaluation set contains unseen classes {unseen}")
    preds = predict(features, prototypes)
    hit = preds == labels
    is_base = np.isin(labels, np.asarray(list(base_classes)))

    def pct(mask):
        n = int(mask.sum())
        return (100.0 * int(hit[mask].sum()) / n) if n else None

    per_class = {int(c): pct(labels == c) for c in np.unique(labels)}
    n_new = int((~is_base).sum())
    return SessionReport(
        session=session,
        total_acc=pct(np.ones_like(hit)),
        base_acc=pct(is_base),
        new_acc=pct(~is_base),
        n_queries=len(labels),
        n_base_queries=int(is_base.sum()),
        n_new_queries=n_new,
        per_class=per_class,
        correct=int(hit.sum()),
        base_correct=int(hit[is_base].sum()),
        new_correct=int(hit[~is_base].sum()),
    )


def aggregate_run(session_accs: Sequence[float], baseline: Sequence[float] | None = None) -> dict:
    """Average of per-session total accuracies, plus last-session gain over a baseline.

    Accepts raw accuracies or ``SessionReport`` objects.
    """
    accs = [r.total_acc if isinstance(r, SessionReport) else float(r) for r in session_accs]
    if not accs:
        raise ValueError("need at least one session")
    out = {"sessions": accs, "avg": sum(accs) / len(accs), "last": accs[-1]}
    if baseline is not None:
        base = [r.total_acc if isinstance(r, SessionReport) else float(r) for r in baseline]
        if len(base) != len(accs):
            raise ValueError(
                f"baseline has {len(base)} sessions, run has {len(accs)}"
            )
        out["last_session_improvement"] = accs[-1] - base[-1]
    return out
