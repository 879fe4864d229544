import numpy as np
import pytest

from protodiff.embedding import FrozenEncoder
from protodiff.numerics import DenseNet


def identity_encoder(d_v, d):
    """Frozen linear encoder that keeps the first ``d`` coordinates."""
    w = np.zeros((d_v, d))
    w[:d, :d] = np.eye(d)
    enc = FrozenEncoder(DenseNet([d_v, d], [w], [np.zeros(d)]))
    enc.freeze()
    return enc


class ConstantTargetDenoiser:
    """Noise estimate that steers every DDIM step onto a fixed clean sample."""

    frozen = True

    def __init__(self, target, sched):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched
        self.d_v = len(self.target)

    def condition(self, p):
        return p

    def predict_eps(self, v_t, t, c):
        ab = self.sched.alpha_bars[t]
        return (v_t - np.sqrt(ab) * self.target) / np.sqrt(1 - ab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = dict(
    T=50, T_sample=5, d_v=8, d=4, d_c=4, time_width=4, cond_width=4,
    denoiser_hidden=(16,), encoder_hidden=(8,), epochs=2, steps_per_epoch=20,
    batch=16, encoder_epochs=2, N=4, base_classes=4, sessions=((2, 2), (0, 2), (1, 3)),
    train_per_class=20, eval_per_class=10,
)


@pytest.fixture
def tiny_config():
    from protodiff.config import load_config

    return load_config(**TINY)


def tiny_ini(**changes) -> str:
    from protodiff.config import load_config

    return load_config(**{**TINY, **changes}).to_ini()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
