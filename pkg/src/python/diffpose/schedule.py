from typing import Iterator, NamedTuple, Union

import numpy as np

from diffpose.arrays import FloatArray, IntArray
from diffpose.errors import InvalidSchedule, OutOfRange

# Standard DDPM configuration.
DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
# Desk-scale training: a tenth of the steps, endpoints scaled by DEFAULT_T / DESK_T
# so that alpha_bar at T is still close to zero.
DESK_T = 100
DESK_BETA_START = 1e-3
DESK_BETA_END = 0.2

Timestep = Union[int, IntArray]


class NoiseSchedule(NamedTuple):
    """Precomputed noise tables, indexed by 1-based timestep ``t`` at ``[t - 1]``.

    ``alpha_bars_prev[t - 1]`` holds the cumulative product up to ``t - 1`` with
    the convention that it is exactly 1 at ``t = 1``.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: FloatArray
    alphas: FloatArray
    alpha_bars: FloatArray
    alpha_bars_prev: FloatArray


class ScheduleRow(NamedTuple):
    t: int
    beta: float
    alpha: float
    alpha_bar: float
    posterior_variance: float
    snr: float


def linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidSchedule(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    return NoiseSchedule(
        T=int(T),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
    )


def check_timestep(s: NoiseSchedule, t: Timestep) -> IntArray:
    """Validate 1-based timesteps and return them as 0-based table indices."""
    ts = np.asarray(t)
    if not np.issubdtype(ts.dtype, np.integer):
        raise OutOfRange(f"timesteps must be integers, got dtype {ts.dtype}")
    if ts.size and (ts.min() < 1 or ts.max() > s.T):
        raise OutOfRange(f"timestep out of range 1..{s.T}: {ts.min()}..{ts.max()}")
    return ts.astype(np.int64) - 1


def snr(s: NoiseSchedule, t: Timestep) -> FloatArray:
    """Signal-to-noise ratio ``alpha_bar_t / (1 - alpha_bar_t)``."""
    ab = s.alpha_bars[check_timestep(s, t)]
    return ab / (1.0 - ab)


def posterior_variance(s: NoiseSchedule, t: Timestep) -> FloatArray:
    i = check_timestep(s, t)
    return s.betas[i] * (1.0 - s.alpha_bars_prev[i]) / (1.0 - s.alpha_bars[i])


def schedule_table(s: NoiseSchedule) -> Iterator[ScheduleRow]:
    ts = np.arange(1, s.T + 1)
    variances = posterior_variance(s, ts)
    snrs = snr(s, ts)
    for i, t in enumerate(ts):
        yield ScheduleRow(
            t=int(t),
            beta=float(s.betas[i]),
            alpha=float(s.alphas[i]),
            alpha_bar=float(s.alpha_bars[i]),
            posterior_variance=float(variances[i]),
            snr=float(snrs[i]),
        )
