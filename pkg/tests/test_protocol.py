import numpy as np
import pytest

from protodiff import numerics
from protodiff.config import stage_seeds
from protodiff.embedding import load_conditions
from protodiff.numerics import load_net
from protodiff.diffusion import load_denoiser
from protodiff.prototypes import load_prototypes, record_bytes
from protodiff.protocol import (
    ContractViolation,
    ProtocolSpec,
    SyntheticSpec,
    draw_shots,
    generate_dataset,
    load_dataset,
    prototype_config,
    run_full_protocol,
    run_sessions,
    specs_from_config,
    strip_volatile,
    train_models,
    variant_summary,
    write_dataset,
)


class TestSyntheticData:
    def test_zero_noise_samples_equal_means(self):
        ds = generate_dataset(SyntheticSpec(d_v=10, d_c=4, sigma=0.0, train_per_class=3),
                              ProtocolSpec(3, ((1, 1),), 2), seed=0)
        for c in range(4):
            assert np.all(ds.class_samples("train", c) == ds.class_means[c])

    def test_single_attribute_means_are_orthogonal(self):
        ds = generate_dataset(
            SyntheticSpec(d_v=12, d_c=6, sigma=0.0, attrs_per_class=1, train_per_class=2),
            ProtocolSpec(6, (), 2), seed=3)
        m = np.stack([ds.class_means[c] for c in range(6)])
        gram = m @ m.T
        np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0, atol=1e-12)

    def test_monte_carlo_class_means(self):
        spec = SyntheticSpec(d_v=6, d_c=3, sigma=0.5, train_per_class=20000)
        ds = generate_dataset(spec, ProtocolSpec(3, (), 1), seed=1)
        se = spec.sigma / np.sqrt(spec.train_per_class)
        for c in range(3):
            err = ds.class_samples("train", c).mean(0) - ds.class_means[c]
            assert np.max(np.abs(err)) < 4.5 * se

    def test_novel_classes_reuse_base_attributes(self):
        ds = generate_dataset(SyntheticSpec(d_v=16, d_c=8, train_per_class=1),
                              ProtocolSpec(10, ((2, 1),) * 4, 1), seed=5)
        base = set().union(*(np.flatnonzero(ds.conditions[c]) for c in range(10)))
        for c in range(10, 18):
            assert set(np.flatnonzero(ds.conditions[c])) <= base

    def test_d_c_above_d_v_rejected(self):
        with pytest.raises(ValueError, match="d_c"):
            generate_dataset(SyntheticSpec(d_v=4, d_c=5), ProtocolSpec(2, ()), seed=0)

    def test_deterministic(self):
        args = (SyntheticSpec(d_v=8, d_c=3, train_per_class=4), ProtocolSpec(3, ((1, 2),), 3))
        a, b = generate_dataset(*args, seed=7), generate_dataset(*args, seed=7)
        assert a.train_x.tobytes() == b.train_x.tobytes()
        assert generate_dataset(*args, seed=8).train_x.tobytes() != a.train_x.tobytes()

    def test_files_round_trip(self, tmp_path):
        ds = generate_dataset(SyntheticSpec(d_v=5, d_c=3, train_per_class=4),
                              ProtocolSpec(3, ((1, 2),), 3), seed=2)
        paths = write_dataset(ds, tmp_path)
        back = load_dataset(paths["train"], paths["eval"], paths["conditions"])
        assert back.train_x.tobytes() == ds.train_x.tobytes()
        assert np.array_equal(back.eval_y, ds.eval_y)
        assert load_conditions(paths["conditions"]).keys() == ds.conditions.keys()

    def test_shots_are_distinct_training_samples(self, tiny_config):
        spec, protocol = specs_from_config(tiny_config)
        ds = generate_dataset(spec, protocol, 0)
        shots = draw_shots(ds, protocol, 1)
        assert sorted(shots) == [4, 5, 6]
        assert [len(shots[c]) for c in (4, 5, 6)] == [2, 2, 3]
        for c, s in shots.items():
            pool = {row.tobytes() for row in ds.class_samples("train", c)}
            assert all(row.tobytes() in pool for row in s)
            assert len({row.tobytes() for row in s}) == len(s)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    from protodiff.config import load_config
    from conftest import TINY

    cfg = load_config(**TINY)
    out = tmp_path_factory.mktemp("run")
    return cfg, run_full_protocol(cfg, out)


class TestFullProtocol:
    def test_reports_and_layout(self, tiny_run):
        cfg, res = tiny_run
        out = res.out_dir
        s = res.summary
        assert len(s["sessions"]) == len(cfg.sessions) + 1
        assert s["sessions"][0]["new_acc"] is None
        assert s["avg"] == pytest.approx(sum(s["session_total_acc"]) / len(s["sessions"]))
        for name in ("config", "prototypes.csv", "summary.json", "checkpoints/encoder.bin",
                     "checkpoints/denoiser.bin", "data/train.csv", "data/shots.csv",
                     "baselines/real_only/summary.json", "baselines/gen_only/summary.json"):
            assert (out / name).exists(), name
        assert len(list((out / "reports").glob("session_*.json"))) == len(cfg.sessions) + 1

    def test_artifacts_reload(self, tiny_run):
        _, res = tiny_run
        out = res.out_dir
        assert load_net(out / "checkpoints/encoder.bin").parameters()[0].tobytes() == \
            res.models.encoder.net.parameters()[0].tobytes()
        den, _ = load_denoiser(out / "checkpoints/denoiser.bin")
        assert den.checksum() == res.models.denoiser.checksum()
        store = load_prototypes(out / "prototypes.csv")
        assert {c: record_bytes(r) for c, r in store.items()} == \
            {c: record_bytes(r) for c, r in res.state.store.items()}

    def test_no_training_after_base(self, tiny_run):
        _, res = tiny_run
        assert res.summary["optimizer_steps_after_base"] == 0
        assert res.summary["checksums"] == res.state.frozen_checksums

    def test_empty_session_reevaluates(self, tiny_run):
        _, res = tiny_run
        r1, r2 = res.state.reports[1], res.state.reports[2]
        assert (r1.total_acc, r1.base_acc, r1.new_acc) == (r2.total_acc, r2.base_acc, r2.new_acc)

    def test_old_records_untouched(self, tiny_run):
        _, res = tiny_run
        assert all(res.state.store[c].session_created == 0 for c in range(4))
        assert res.state.store[6].session_created == 3

    def test_alpha_endpoints_match_baselines(self, tiny_run):
        cfg, res = tiny_run
        for alpha, name in ((0.0, "gen_only"), (1.0, "real_only")):
            other = run_full_protocol(cfg.replace(alpha=alpha), models=res.models,
                                      dataset=res.state.dataset)
            fused = variant_summary(other.state)
            assert fused == res.summary["baselines"][name]

    def test_rerun_is_identical(self, tiny_run, tmp_path):
        cfg, res = tiny_run
        again = run_full_protocol(cfg, tmp_path)
        assert strip_volatile(again.summary) == strip_volatile(res.summary)
        for name in ("checkpoints/encoder.bin", "checkpoints/denoiser.bin", "prototypes.csv"):
            assert (tmp_path / name).read_bytes() == (res.out_dir / name).read_bytes()

    def test_seed_changes_outputs(self, tiny_config, tiny_run):
        _, res = tiny_run
        other = run_full_protocol(tiny_config.replace(seed=1))
        assert other.summary["checksums"] != res.summary["checksums"]


class TestContract:
    def _state(self, tiny_config):
        spec, protocol = specs_from_config(tiny_config)
        ds = generate_dataset(spec, protocol, stage_seeds(tiny_config.seed)["data"])
        models = train_models(ds, tiny_config)
        return models, ds, protocol

    def test_training_between_sessions_is_detected(self, tiny_config):
        models, ds, protocol = self._state(tiny_config)
        state = run_sessions(models, ds, protocol, draw_shots(ds, protocol, 0),
                             prototype_config(tiny_config))

        # a stray optimizer step anywhere in the process breaks the contract
        p = [np.zeros(2)]
        numerics.adam_step(p, [np.ones(2)], numerics.OptimizerState.for_params(p))
        from protodiff.protocol import check_contract
        with pytest.raises(ContractViolation, match="optimizer"):
            check_contract(state)

    def test_mutated_record_is_detected(self, tiny_config):
        from dataclasses import replace
        from protodiff.protocol import check_contract, start_sessions

        models, ds, protocol = self._state(tiny_config)
        state, _ = start_sessions(models, ds, protocol, prototype_config(tiny_config))
        rec = state.store[0]
        state.store[0] = replace(rec, fused_proto=rec.fused_proto + 1.0)
        with pytest.raises(ContractViolation, match="class 0"):
            check_contract(state)
