"""Conditional noise-prediction model, forward noising and DDIM sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import (
    DenseNet,
    FrozenError,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    adam_step,
    backward,
    checksum,
    forward,
    read_net,
    write_net,
)
from .schedule import NoiseSchedule, build_cosine_schedule, subsample_timesteps

DENOISER_MAGIC = b"PDDEN\x00\x00\x01"
DENOISER_VERSION = 1


class MissingConditionError(KeyError):
    pass


@dataclass(frozen=True)
class ImageSample:
    """A flattened sample tagged with how many diffusion steps of noise it carries."""

    values: np.ndarray
    timestep: int = 0


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t f_k), cos(t f_k)]`` with geometric f_k."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class Denoiser:
    """eps_theta(v_t, t, phi(p)) built around an MLP over [v_t, time embedding, phi(p)].

    The MLP output ``F`` enters as
    ``eps_theta = sqrt(1 - abar_t) * v_t + sqrt(abar_t) * F``, so the clean
    sample implied by the noise estimate, ``sqrt(abar_t) v_t - sqrt(1 - abar_t) F``,
    stays bounded when abar_t is close to zero at the start of sampling.

    ``phi`` is a single affine layer from condition space to ``cond_width``;
    it is trained jointly and frozen together with the MLP.
    """

    phi: DenseNet
    net: DenseNet
    time_width: int
    schedule: NoiseSchedule

    @classmethod
    def init(cls, d_v: int, d_c: int, hidden: Sequence[int], rng, schedule: NoiseSchedule,
             time_width: int = 16, cond_width: int = 16) -> "Denoiser":
        rng = as_rng(rng)
        phi = DenseNet.init([d_c, cond_width], rng)
        net = DenseNet.init([d_v + time_width + cond_width, *hidden, d_v], rng)
        return cls(phi, net, time_width, schedule)

    @property
    def d_v(self) -> int:
        return self.net.out_dim

    @property
    def d_c(self) -> int:
        return self.phi.in_dim

    @property
    def frozen(self) -> bool:
        return self.phi.frozen and self.net.frozen

    def parameters(self) -> list[np.ndarray]:
        return self.phi.parameters() + self.net.parameters()

    def freeze(self) -> None:
        self.phi.freeze()
        self.net.freeze()

    def checksum(self) -> str:
        return checksum(self.parameters())

    def condition(self, p) -> np.ndarray:
        return forward(self.phi, p)

    def _inputs(self, v_t, t, c) -> tuple[np.ndarray, np.ndarray]:
        v_t = np.atleast_2d(v_t)
        n = v_t.shape[0]
        if v_t.shape[1] != self.d_v:
            raise ShapeError(f"sample width {v_t.shape[1]} != d_v {self.d_v}")
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.atleast_2d(c), (n, self.phi.out_dim))
        return np.concatenate([v_t, time_embedding(t, self.time_width), c], axis=1), t

    def _mix(self, t) -> tuple[np.ndarray, np.ndarray]:
        ab = self.schedule.alpha_bars[t][:, None]
        return np.sqrt(1.0 - ab), np.sqrt(ab)

    def predict_eps(self, v_t, t, c) -> np.ndarray:
        """Noise estimate given an already-projected condition ``c = phi(p)``."""
        x, tb = self._inputs(v_t, t, c)
        skip, scale = self._mix(tb)
        out = skip * x[:, :self.d_v] + scale * forward(self.net, x)
        return out[0] if np.ndim(v_t) == 1 else out

    def __call__(self, v_t, t, p) -> np.ndarray:
        return self.predict_eps(v_t, t, self.condition(p))


def forward_noise(v0, t: int, eps, sched: NoiseSchedule) -> ImageSample:
    """Closed-form q(v_t | v_0) draw: sqrt(abar_t) v0 + sqrt(1 - abar_t) eps."""
    if isinstance(v0, ImageSample):
        if v0.timestep != 0:
            raise ValueError("forward_noise expects a clean sample (timestep 0)")
        v0 = v0.values
    eps = eps.values if isinstance(eps, ImageSample) else eps
    if not 0 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    v0 = np.asarray(v0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if v0.shape != eps.shape:
        raise ShapeError(f"v0 {v0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bars[t]
    return ImageSample(np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * eps, int(t))


def diffusion_loss(denoiser: Denoiser, v0, p, t, eps, sched: NoiseSchedule):
    """Noise-prediction loss and its gradient for every denoiser parameter.

    Accepts one example or a batch (rows of ``v0``, ``p``, ``eps`` and entries
    of ``t``). The loss is ``||eps - eps_theta(v_t, t, phi(p))||^2`` averaged
    over the batch. Returns ``(loss, grads)`` with ``grads`` aligned to
    ``denoiser.parameters()``.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t))
    n = v0.shape[0]
    if eps.shape != v0.shape or p.shape[0] != n or t.shape != (n,):
        raise ShapeError("batch sizes of v0, p, t and eps disagree")
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"training timesteps must lie in [1, {sched.T}]")
    ab = sched.alpha_bars[t][:, None]
    v_t = np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * eps

    c = forward(denoiser.phi, p)
    x, _ = denoiser._inputs(v_t, t, c)
    skip, scale = denoiser._mix(t)
    pred = skip * v_t + scale * forward(denoiser.net, x)
    resid = eps - pred
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise NonFiniteError("diffusion loss is not finite")

    g_net = backward(denoiser.net, x, -2.0 * scale * resid / n)
    cond_grad = g_net.input[:, -denoiser.phi.out_dim:]
    g_phi = backward(denoiser.phi, p, cond_grad)
    return loss, g_phi.parameters() + g_net.parameters()


def ddim_step(v_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule) -> ImageSample:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    Predicts v0 from the noise estimate and re-noises it to level
    ``t_prev`` using the same estimate.
    """
    if isinstance(v_t, ImageSample):
        v_t = v_t.values
    if not sched.T >= t > t_prev >= 0:
        raise ValueError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    v0_hat = (v_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return ImageSample(np.sqrt(ab_prev) * v0_hat + np.sqrt(1.0 - ab_prev) * eps_hat, t_prev)


def ddim_trajectory(T: int, T_sample: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs visited by the sampler, ending at t_prev = 0."""
    ts = subsample_timesteps(T, T_sample)
    return list(zip(ts, ts[1:] + [0]))


def sample(denoiser: Denoiser, p, sched: NoiseSchedule, T_sample: int = 50,
           seed=0) -> ImageSample:
    """Draw one clean sample for condition ``p`` with the deterministic sampler.

    The only randomness is the initial ``v_T ~ N(0, I)`` drawn from ``seed``
    (an int, ``SeedSequence`` or ``Generator``).
    """
    rng = as_rng(seed)
    c = denoiser.condition(np.asarray(p, dtype=np.float64))
    v = ImageSample(rng.standard_normal(denoiser.d_v), sched.T)
    for t, t_prev in ddim_trajectory(sched.T, T_sample):
        eps_hat = denoiser.predict_eps(v.values, t, c)
        v = ddim_step(v, t, t_prev, eps_hat, sched)
        if not np.all(np.isfinite(v.values)):
            raise NonFiniteError(f"non-finite sample at step t={t} -> {t_prev}")
    return v


def train_base(
    denoiser: Denoiser,
    v0: np.ndarray,
    labels: np.ndarray,
    conditions: Mapping[int, np.ndarray],
    sched: NoiseSchedule,
    *,
    epochs: int = 30,
    steps_per_epoch: int = 1000,
    batch_size: int = 64,
    learning_rate: float = 1e-4,
    weight_decay: float = 5e-4,
    seed=0,
) -> list[float]:
    """Fit the denoiser on base-session data, then freeze it.

    Each step draws a minibatch with replacement, ``t ~ U{1..T}`` and fresh
    Gaussian noise. Returns the mean loss of every epoch.
    """
    if denoiser.frozen:
        raise FrozenError("denoiser is already frozen")
    labels = np.asarray(labels)
    missing = sorted(set(int(c) for c in np.unique(labels)) - set(conditions))
    if missing:
        raise MissingConditionError(f"no condition vector for classes {missing}")
    v0 = np.asarray(v0, dtype=np.float64)
    cond_matrix = np.stack([np.asarray(conditions[int(c)], dtype=np.float64) for c in labels])

    rng = as_rng(seed)
    params = denoiser.parameters()
    state = OptimizerState.for_params(
        params, learning_rate=learning_rate, weight_decay=weight_decay
    )
    curve = []
    for _ in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(v0), size=batch_size)
            t = rng.integers(1, sched.T + 1, size=batch_size)
            eps = rng.standard_normal((batch_size, denoiser.d_v))
            loss, grads = diffusion_loss(denoiser, v0[idx], cond_matrix[idx], t, eps, sched)
            adam_step(params, grads, state)
            total += loss
        curve.append(total / steps_per_epoch)
    denoiser.freeze()
    return curve


def save_denoiser(denoiser: Denoiser, path) -> None:
    sched = denoiser.schedule
    with open(path, "wb") as fh:
        fh.write(DENOISER_MAGIC)
        fh.write(struct.pack("<IId", DENOISER_VERSION, sched.T, sched.s))
        fh.write(struct.pack("<III", denoiser.d_v, denoiser.d_c, denoiser.time_width))
        write_net(denoiser.phi, fh)
        write_net(denoiser.net, fh)


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule]:
    with open(path, "rb") as fh:
        if fh.read(len(DENOISER_MAGIC)) != DENOISER_MAGIC:
            raise ValueError(f"{path}: not a denoiser checkpoint")
        version, T, s = struct.unpack("<IId", fh.read(16))
        if version != DENOISER_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        d_v, d_c, time_width = struct.unpack("<III", fh.read(12))
        phi = read_net(fh)
        net = read_net(fh)
    sched = build_cosine_schedule(T, s)
    den = Denoiser(phi, net, time_width, sched)
    if den.d_v != d_v or den.d_c != d_c:
        raise ValueError(f"{path}: header dims disagree with stored networks")
    return den, sched
