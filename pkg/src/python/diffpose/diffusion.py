"""Forward noising, the x0 reparameterization and ancestral sampling.

Pose states are arrays whose last axis is the flat pose vector; any leading
axes are batch axes. Timesteps are 1-based and may be a scalar or one integer
per batch row.
"""
from typing import List, Protocol, Sequence

import numpy as np

from diffpose.arrays import FloatArray, make_rng
from diffpose.errors import DimensionMismatch
from diffpose.schedule import NoiseSchedule, Timestep, check_timestep, posterior_variance


class EpsModel(Protocol):
    """A bound noise-prediction network ``eps_hat = f(x_t, t, z)``."""

    pose_dim: int
    cond_dim: int

    def __call__(self, x_t: FloatArray, t: Timestep, z: FloatArray) -> FloatArray:
        ...


def _column(values: FloatArray, t: Timestep, like: FloatArray) -> FloatArray:
    """Table entries for ``t`` shaped to broadcast against ``like`` over its last axis."""
    v = values[np.asarray(t) - 1]
    return np.reshape(v, np.shape(v) + (1,) * (np.ndim(like) - np.ndim(v)))


def _same_shape(a: FloatArray, b: FloatArray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionMismatch(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def forward_step(x_prev: FloatArray, t: Timestep, eps: FloatArray, s: NoiseSchedule) -> FloatArray:
    """One step of the noising chain: ``sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``."""
    check_timestep(s, t)
    _same_shape(x_prev, eps, "forward_step")
    beta = _column(s.betas, t, x_prev)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def forward_sample(x0: FloatArray, t: Timestep, eps: FloatArray, s: NoiseSchedule) -> FloatArray:
    """Closed-form noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    check_timestep(s, t)
    _same_shape(x0, eps, "forward_sample")
    ab = _column(s.alpha_bars, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: FloatArray, t: Timestep, eps_hat: FloatArray, s: NoiseSchedule) -> FloatArray:
    """Invert ``forward_sample`` given a noise estimate."""
    check_timestep(s, t)
    _same_shape(x_t, eps_hat, "predict_x0")
    ab = _column(s.alpha_bars, t, x_t)
    return x_t / np.sqrt(ab) - np.sqrt(1.0 / ab - 1.0) * eps_hat


def predict_x0_coefficient(t: Timestep, s: NoiseSchedule) -> FloatArray:
    """``d predict_x0 / d eps_hat``, i.e. ``-sqrt(1 / ab_t - 1)``."""
    ab = s.alpha_bars[check_timestep(s, t)]
    return -np.sqrt(1.0 / ab - 1.0)


def posterior_mean(x_t: FloatArray, x0: FloatArray, t: Timestep, s: NoiseSchedule) -> FloatArray:
    """Mean of ``q(x_{t-1} | x_t, x0)``."""
    check_timestep(s, t)
    beta = _column(s.betas, t, x_t)
    alpha = _column(s.alphas, t, x_t)
    ab = _column(s.alpha_bars, t, x_t)
    ab_prev = _column(s.alpha_bars_prev, t, x_t)
    return (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab)


def reverse_step(
    x_t: FloatArray,
    t: Timestep,
    eps_hat: FloatArray,
    z_noise: FloatArray,
    s: NoiseSchedule,
) -> FloatArray:
    """One ancestral step ``mu + sqrt(Sigma_t) z``; the noise is dropped at ``t = 1``."""
    check_timestep(s, t)
    _same_shape(x_t, eps_hat, "reverse_step")
    _same_shape(x_t, z_noise, "reverse_step")
    beta = _column(s.betas, t, x_t)
    alpha = _column(s.alphas, t, x_t)
    ab = _column(s.alpha_bars, t, x_t)
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    var = np.reshape(posterior_variance(s, t), np.shape(beta))
    first = np.reshape(np.asarray(t), np.shape(beta)) == 1
    return mean + np.where(first, 0.0, np.sqrt(var) * z_noise)


def sample_many(
    model: EpsModel,
    z: FloatArray,
    s: NoiseSchedule,
    rngs: Sequence[np.random.Generator],
) -> FloatArray:
    """Ancestral sampling of one pose per row of ``z`` (shape ``(N, C)``).

    Row ``i`` draws its starting noise and every injected noise vector from
    ``rngs[i]`` alone, so a row's result depends only on its own generator and
    conditioning, while the network is evaluated once per step for all rows.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.cond_dim:
        raise DimensionMismatch(
            f"conditioning must have shape (N, {model.cond_dim}), got {z.shape}"
        )
    if len(rngs) != z.shape[0]:
        raise DimensionMismatch(f"{len(rngs)} generators for {z.shape[0]} conditioning rows")
    D = model.pose_dim
    if not rngs:
        return np.zeros((0, D))
    x = np.stack([rng.standard_normal(D) for rng in rngs])
    for t in range(s.T, 0, -1):
        ts = np.full(len(rngs), t, dtype=np.int64)
        eps_hat = model(x, ts, z)
        if eps_hat.shape != x.shape:
            raise DimensionMismatch(f"denoiser returned shape {eps_hat.shape}, expected {x.shape}")
        if t > 1:
            noise = np.stack([rng.standard_normal(D) for rng in rngs])
        else:
            noise = np.zeros_like(x)
        x = reverse_step(x, ts, eps_hat, noise, s)
    return x


def sample(model: EpsModel, z: FloatArray, s: NoiseSchedule, seed: int) -> FloatArray:
    """Draw one pose ``theta_hat_0`` for a single conditioning vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.cond_dim,):
        raise DimensionMismatch(f"conditioning must have shape ({model.cond_dim},), got {z.shape}")
    out: FloatArray = sample_many(model, z[None, :], s, [make_rng(seed)])[0]
    return out


def hypothesis_rngs(seed: int, index: int, n: int) -> List[np.random.Generator]:
    """Generators for hypotheses ``0..n-1`` of dataset row ``index``."""
    return [make_rng(seed, index, h) for h in range(n)]

