"""Noise schedules, the x0-predicting denoiser contract and guided inpainting.

The sampler keeps observed pixels fixed by replacing them in every
x0-prediction before re-noising (range/null-space split with the identity
pseudo-inverse of a diagonal mask), so the final image reproduces the
observation exactly on the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DataError
from .geometry import EMPTY, DepthMap, Intrinsics
from .optim import Adam


@dataclass(frozen=True, eq=False)
class BetaSchedule:
    """``alpha_bar[t]`` for ``t = 0..T`` with ``alpha_bar[0] == 1``; ``betas[t-1]`` is beta_t."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "BetaSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty sequence in (0, 1)")
        return cls(b, np.concatenate([[1.0], np.cumprod(1.0 - b)]))


def constant_schedule(beta: float, T: int) -> BetaSchedule:
    return BetaSchedule.from_betas(np.full(T, beta))


def sigmoid_schedule(T: int = 1000, start: float = -3.0, end: float = 3.0, tau: float = 1.0,
                     clip: float = 1e-6) -> BetaSchedule:
    """Sigmoid-shaped cumulative signal level, normalised to 1 at ``t=0`` and 0 at ``t=T``."""
    if T < 1 or not start < end or tau <= 0:
        raise ValueError(f"invalid sigmoid schedule T={T}, start={start}, end={end}, tau={tau}")

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    t = np.arange(T + 1) / T
    v_start, v_end = sig(start / tau), sig(end / tau)
    ab = (v_end - sig((start + (end - start) * t) / tau)) / (v_end - v_start)
    ab = np.clip(ab, clip, 1.0 - clip)
    ab[0] = 1.0
    betas = 1.0 - ab[1:] / ab[:-1]
    return BetaSchedule(betas, ab)


@dataclass(frozen=True, eq=False)
class LatentImage:
    """Normalised depth ``(depth - offset) / scale``; ``valid`` marks pixels that carry a value."""

    values: np.ndarray
    scale: float = 1.0
    offset: float = 0.0
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("latent values must be a finite 2-D grid")
        if self.scale <= 0:
            raise ValueError("normalisation scale must be positive")
        object.__setattr__(self, "values", v)
        if self.valid is not None:
            object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


def normalize_depth(depth: DepthMap, scale: float, offset: float) -> LatentImage:
    if scale <= 0:
        raise ValueError("scale must be positive")
    valid = depth.valid
    values = np.where(valid, (depth.values - offset) / scale, 0.0)
    return LatentImage(values, scale, offset, valid)


def denormalize(latent: LatentImage, intrinsics: Intrinsics) -> DepthMap:
    """Back to metric depth. Pixels outside ``valid`` or at non-positive depth become empty."""
    d = latent.values * latent.scale + latent.offset
    keep = d > 0
    if latent.valid is not None:
        keep &= latent.valid
    return DepthMap(np.where(keep, d, EMPTY), intrinsics)


def range_normalization(depths: Sequence[DepthMap]) -> tuple[float, float]:
    """``(scale, offset)`` mapping the observed depth range onto [-1, 1]."""
    vals = [d.values[d.valid] for d in depths if d.valid.any()]
    if not vals:
        raise DataError("no non-empty depth to normalise")
    allv = np.concatenate(vals)
    lo, hi = float(allv.min()), float(allv.max())
    scale = (hi - lo) / 2 if hi > lo else 1.0
    return scale, (hi + lo) / 2


def q_sample(x0: np.ndarray, t: int, schedule: BetaSchedule, noise: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def forward_noise(x0: LatentImage, t: int, schedule: BetaSchedule, noise) -> LatentImage:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    noise = np.asarray(noise.values if isinstance(noise, LatentImage) else noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise {noise.shape} does not match image {x0.shape}")
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    if t == 0:
        return x0
    return LatentImage(q_sample(x0.values, t, schedule, noise), x0.scale, x0.offset, x0.valid)


@dataclass(frozen=True, eq=False)
class InpaintCondition:
    observed: LatentImage
    mask: np.ndarray
    intrinsics_vector: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != self.observed.shape:
            raise ValueError("mask and observation differ in shape")
        if self.observed.valid is not None and not np.array_equal(m, self.observed.valid):
            raise ValueError("mask must be true exactly where the observation is non-empty")
        k = np.asarray(self.intrinsics_vector, dtype=np.float64).reshape(4)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "intrinsics_vector", k)

    @classmethod
    def from_depth(cls, depth: DepthMap, scale: float, offset: float) -> "InpaintCondition":
        latent = normalize_depth(depth, scale, offset)
        return cls(latent, depth.valid, depth.intrinsics.vector())

    @property
    def shape(self):
        return self.mask.shape


class Denoiser(Protocol):
    def __call__(self, x_t: np.ndarray, t: int, k: np.ndarray) -> np.ndarray:
        """Predict the clean image from ``x_t`` at step ``t`` under intrinsics ``k``."""


class OracleDenoiser:
    """Always answers with a stored clean image."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0.values if isinstance(x0, LatentImage) else x0, dtype=np.float64)

    def __call__(self, x_t, t, k):
        return self.x0.copy()


def guided_step_target(x0t, cond: InpaintCondition) -> np.ndarray:
    """``o_hat + (I - M) x0t``: observed pixels from the condition, the rest from ``x0t``."""
    x = np.asarray(x0t.values if isinstance(x0t, LatentImage) else x0t, dtype=np.float64)
    if x.shape != cond.shape:
        raise ValueError(f"prediction {x.shape} does not match condition {cond.shape}")
    return np.where(cond.mask, cond.observed.values, x)


def reverse_timesteps(T: int, reverse_steps: int) -> list[int]:
    if reverse_steps < 1 or T % reverse_steps:
        raise ValueError(f"reverse_steps={reverse_steps} must divide T={T}")
    stride = T // reverse_steps
    return list(range(T, 0, -stride))


def guided_sample(denoiser: Denoiser, cond: InpaintCondition, schedule: BetaSchedule,
                  reverse_steps: Optional[int] = None, seed=0) -> LatentImage:
    """Deterministic strided reverse process with mask replacement at every step.

    Starts from standard-normal noise drawn from ``seed``. The final step lands
    on ``alpha_bar = 1`` and returns the replaced prediction itself, so masked
    pixels equal the observation bitwise.
    """
    T = schedule.T
    reverse_steps = T if reverse_steps is None else reverse_steps
    steps = reverse_timesteps(T, reverse_steps)
    stride = T // reverse_steps
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(cond.shape)
    k = cond.intrinsics_vector
    ab = schedule.alpha_bar
    x0_hat = None
    for t in steps:
        pred = np.asarray(denoiser(x, t, k), dtype=np.float64)
        if pred.shape != cond.shape:
            raise DataError(f"denoiser returned {pred.shape}, expected {cond.shape}")
        x0_hat = guided_step_target(pred, cond)
        s = t - stride
        if s == 0:
            break
        eps = (x - np.sqrt(ab[t]) * x0_hat) / np.sqrt(1.0 - ab[t])
        x = np.sqrt(ab[s]) * x0_hat + np.sqrt(1.0 - ab[s]) * eps
    obs = cond.observed
    return LatentImage(x0_hat, obs.scale, obs.offset)


# --- toy denoiser -----------------------------------------------------------------


def mlp_forward(params: dict, Z: np.ndarray):
    A = np.tanh(Z @ params["W1"].T + params["b1"])
    return A @ params["W2"].T + params["b2"], A


def mlp_loss_and_grad(params: dict, Z: np.ndarray, target: np.ndarray, weight: np.ndarray):
    """Weighted mean squared error of the two-layer predictor and its gradients."""
    Y, A = mlp_forward(params, Z)
    diff = Y - target
    denom = weight.sum()
    loss = float(np.sum(weight * diff**2) / denom)
    dY = 2.0 * weight * diff / denom
    dA = dY @ params["W2"]
    dH = dA * (1.0 - A**2)
    grads = {
        "W2": dY.T @ A,
        "b2": dY.sum(axis=0),
        "W1": dH.T @ Z,
        "b1": dH.sum(axis=0),
    }
    return loss, grads


@dataclass
class ToyDenoiserConfig:
    hidden: int = 64
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


@dataclass(eq=False)
class ToyDenoiser:
    """Two affine layers with tanh; input is ``[vec(x_t), t/T, k/k_scale]``."""

    params: dict
    shape: tuple[int, int]
    T: int
    k_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    scale: float = 1.0
    offset: float = 0.0
    loss_history: list = field(default_factory=list)

    def inputs(self, x_t: np.ndarray, t, k) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64).reshape(-1, self.shape[0] * self.shape[1])
        n = x.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.T, (n, 1))
        kk = np.broadcast_to(np.asarray(k, dtype=np.float64).reshape(-1, 4) / self.k_scale, (n, 4))
        return np.concatenate([x, tt, kk], axis=1)

    def __call__(self, x_t, t, k):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != tuple(self.shape):
            raise DataError(f"denoiser built for {tuple(self.shape)}, got {x_t.shape}")
        Y, _ = mlp_forward(self.params, self.inputs(x_t, t, k))
        return Y.reshape(self.shape)


def init_mlp(n_in: int, hidden: int, n_out: int, rng) -> dict:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(hidden, n_in)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_out, hidden)),
        "b2": np.zeros(n_out),
    }


def train_toy_denoiser(dataset: Sequence[LatentImage], schedule: BetaSchedule,
                       config: Optional[ToyDenoiserConfig] = None, intrinsics=None) -> ToyDenoiser:
    """Fit the toy x0-predictor by minibatch Adam on random ``(t, eps)`` draws.

    ``intrinsics`` is one ``[fx, fy, cx, cy]`` vector for all images or one per
    image. Pixels outside an image's ``valid`` mask carry no loss.
    """
    config = config or ToyDenoiserConfig()
    if len(dataset) == 0:
        raise DataError("cannot train a denoiser on an empty dataset")
    shape = dataset[0].shape
    if any(img.shape != shape for img in dataset):
        raise DataError("all training images must share one shape")
    n = len(dataset)
    X0 = np.stack([img.values.reshape(-1) for img in dataset])
    Wt = np.stack([(np.ones(shape, bool) if img.valid is None else img.valid).reshape(-1) for img in dataset])
    Wt = Wt.astype(np.float64)
    if intrinsics is None:
        Kv = np.zeros((n, 4))
    else:
        Kv = np.broadcast_to(np.asarray(intrinsics, dtype=np.float64).reshape(-1, 4), (n, 4)).copy()
    k_scale = np.max(np.abs(Kv), axis=0)
    k_scale[k_scale == 0] = 1.0

    rng = np.random.default_rng(config.seed)
    hw = shape[0] * shape[1]
    params = init_mlp(hw + 5, config.hidden, hw, rng)
    model = ToyDenoiser(params, shape, schedule.T, k_scale, dataset[0].scale, dataset[0].offset)
    opt = Adam(params, lr=config.lr)
    T = schedule.T
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(1, T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, hw))
        ab = schedule.alpha_bar[t][:, None]
        x0 = X0[idx]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        Z = model.inputs(x_t, t, Kv[idx])
        loss, grads = mlp_loss_and_grad(params, Z, x0, Wt[idx])
        opt.step(params, grads)
        model.loss_history.append(loss)
    return model
