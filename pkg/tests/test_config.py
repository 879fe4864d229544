import numpy as np
import pytest

from protodiff.config import (
    ConfigError,
    RunConfig,
    load_config,
    stage_seed,
    stage_seeds,
    write_config,
)


def test_defaults_are_valid():
    c = RunConfig()
    assert (c.T, c.T_sample, c.lr, c.weight_decay, c.epochs) == (1000, 50, 1e-4, 5e-4, 30)
    assert c.num_classes == c.base_classes + sum(w for w, _ in c.sessions)


def test_ini_round_trip(tmp_path):
    c = load_config(seed=17, sessions=((3, 1), (0, 2)), denoiser_hidden=(5, 6), alpha=0.25,
                    base_fusion=False)
    write_config(tmp_path / "config", c)
    assert load_config(tmp_path / "config") == c


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[prototypes]\nalpha = 0.75\nN = 8\n[run]\nseed = 4\n")
    c = load_config(p, seed=9, out=None)
    assert (c.alpha, c.N, c.seed) == (0.75, 8, 9)


@pytest.mark.parametrize("text, match", [
    ("[dims]\nd_c = 100\n", "d_c"),
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[dims]\nfoo = 1\n", "unknown key"),
    ("[schedule]\nT_sample = 2000\n", "T_sample"),
    ("[prototypes]\nalpha = 1.5\n", "alpha"),
    ("[protocol]\nsessions = 2-5\n", "WAYSxSHOTS"),
    ("[schedule]\nT = ten\n", "T"),
    ("[prototypes]\nbase_fusion = maybe\n", "boolean"),
    ("[training]\nlr = 1e-4\n[dims]\nlr = 3\n", "unknown key"),
])
def test_invalid_configs(tmp_path, text, match):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_file_source_needs_paths():
    with pytest.raises(ConfigError):
        load_config(source="file")


def test_stage_seeds_are_stable_and_distinct():
    a, b = stage_seeds(0), stage_seeds(0)
    assert a == b
    assert len(set(a.values())) == len(a)
    assert stage_seed(0, "data") != stage_seed(1, "data")
    assert all(0 <= v < 2**63 for v in a.values())
    np.random.default_rng(stage_seed(2**64 - 1, "shots"))
