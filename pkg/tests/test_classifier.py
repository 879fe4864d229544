import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protodiff.classifier import (
    DegenerateVectorError,
    SessionReport,
    aggregate_run,
    classify,
    evaluate_session,
    predict,
)
from protodiff.prototypes import PrototypeRecord

ICARL = [61.31, 46.32, 42.94, 37.63, 30.49, 24.00, 20.89, 18.80, 17.20]


def rec(cid, vec):
    v = np.asarray(vec, dtype=np.float64)
    return PrototypeRecord(cid, 0, None, v, v, 0, 1, 1.0)


def brute_force(query, protos):
    best, best_score = None, -math.inf
    for cid in sorted(protos):
        p = protos[cid]
        dot = sum(a * b for a, b in zip(query, p))
        score = dot / (math.sqrt(sum(a * a for a in query)) * math.sqrt(sum(b * b for b in p)))
        if score > best_score:
            best, best_score = cid, score
    return best


def test_self_similarity():
    protos = [rec(0, [1.0, 2.0, 3.0]), rec(1, [3.0, -1.0, 0.0])]
    pred = classify(np.array([3.0, -1.0, 0.0]), protos)
    assert pred.predicted == 1
    assert pred.scores[1] == pytest.approx(1.0, abs=1e-15)
    assert all(-1 <= s <= 1 + 1e-15 for s in pred.scores.values())


def test_geometry():
    assert classify(np.array([0.9, 0.1]), [rec(0, [1, 0]), rec(1, [0, 1])]).predicted == 0


def test_bruteforce_oracle_with_ties(rng):
    protos = {c: rng.standard_normal(8) for c in range(20)}
    # engineered exact ties: duplicated directions under larger ids
    protos[17] = protos[3].copy()
    protos[19] = protos[3].copy()
    protos[12] = protos[5].copy()
    records = [rec(c, v) for c, v in protos.items()]
    queries = rng.standard_normal((100, 8))
    queries[:10] = protos[3] + 0.01 * rng.standard_normal((10, 8))
    queries[10:15] = protos[5]
    preds = predict(queries, records)
    for q, p in zip(queries, preds):
        assert p == brute_force(q, protos)
    assert set(preds[:10]) <= {3} and set(preds[10:15]) == {5}


def test_zero_vectors_rejected():
    with pytest.raises(DegenerateVectorError):
        classify(np.zeros(2), [rec(0, [1, 0])])
    with pytest.raises(DegenerateVectorError):
        classify(np.ones(2), [rec(0, [0, 0]), rec(1, [1, 0])])


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_scale_and_permutation_invariance(seed, qs, ps):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((6, 5))
    q = rng.standard_normal(5)
    scores = vecs @ q / np.linalg.norm(vecs, axis=1) / np.linalg.norm(q)
    top2 = np.sort(scores)[-2:]
    if top2[1] - top2[0] < 1e-9:
        return
    base = classify(q, [rec(c, v) for c, v in enumerate(vecs)]).predicted
    scaled = [rec(c, v * (ps if c % 2 else 1.0)) for c, v in enumerate(vecs)]
    assert classify(q * qs, scaled).predicted == base
    perm = rng.permutation(6)
    assert classify(q, [rec(int(c), vecs[c]) for c in perm]).predicted == base


class TestEvaluate:
    def _setup(self):
        protos = {0: rec(0, [1, 0, 0]), 1: rec(1, [0, 1, 0]), 2: rec(2, [0, 0, 1])}
        return protos

    def test_all_correct(self):
        feats = np.array([[1, 0.1, 0], [0, 1, 0.2], [0.1, 0, 1]])
        r = evaluate_session(1, self._setup(), feats, np.array([0, 1, 2]), [0, 1])
        assert (r.total_acc, r.base_acc, r.new_acc) == (100.0, 100.0, 100.0)

    def test_base_only(self):
        protos = {0: rec(0, [1, 0]), 1: rec(1, [0, 1])}
        feats = np.array([[1.0, 0.2], [1.0, 0.1], [0.1, 1.0]])
        r = evaluate_session(0, protos, feats, np.array([0, 1, 1]), [0, 1])
        assert r.new_acc is None and r.total_acc == r.base_acc
        assert r.total_acc == pytest.approx(200 / 3)

    def test_seven_of_ten(self):
        protos = self._setup()
        labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
        feats = np.eye(3)[[0, 0, 0, 1, 1, 2, 2, 2, 0, 1]]  # 3 + 2 + 2 correct
        r = evaluate_session(1, protos, feats, labels, [0, 1])
        assert r.total_acc == 70.0
        assert r.correct == r.base_correct + r.new_correct == 7
        assert r.base_acc == pytest.approx(500 / 6) and r.new_acc == 50.0
        assert r.per_class == {0: 100.0, 1: pytest.approx(200 / 3), 2: 50.0}

    def test_unseen_label_rejected(self):
        with pytest.raises(ValueError, match="unseen"):
            evaluate_session(1, self._setup(), np.eye(3)[:1], np.array([7]), [0])

    def test_report_round_trip(self):
        feats = np.array([[1, 0.1, 0], [0, 1, 0.2], [0.1, 0, 1]])
        r = evaluate_session(1, self._setup(), feats, np.array([0, 1, 2]), [0, 1])
        assert SessionReport.from_dict(r.to_dict()) == r


class TestAggregate:
    def test_icarl_row(self):
        assert abs(aggregate_run(ICARL)["avg"] - 33.29) <= 0.01

    def test_single_session(self):
        assert aggregate_run([55.5])["avg"] == 55.5

    def test_two_sessions(self):
        assert aggregate_run([80.0, 60.0])["avg"] == 70.0

    def test_improvement_and_mismatch(self):
        out = aggregate_run([90.0, 60.13], baseline=[61.31, 17.20])
        assert out["last_session_improvement"] == pytest.approx(42.93)
        with pytest.raises(ValueError):
            aggregate_run([1.0, 2.0], baseline=[1.0])
        with pytest.raises(ValueError):
            aggregate_run([])
