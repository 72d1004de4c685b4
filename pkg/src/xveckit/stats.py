"""Per-dimension utterance statistics up to fourth order, and the pooling op.

moments() is the two-pass reference used everywhere targets are needed;
moments_streaming() is a one-pass recurrence for long inputs and must
agree with the reference to high precision. stats_pool() is the
differentiable mean+stddev pooling layer of the network and records on
the autodiff tape.

Conventions: population (1/T) normalization throughout, no Bessel
correction; skewness and kurtosis are standardized moments of order 3
and 4, kurtosis is NOT excess (a Gaussian scores 3). Dimensions whose
standard deviation falls below DEGENERATE_SIGMA report zero skewness
and kurtosis instead of exploding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, _accumulate, _wants_grad
from .errors import ConfigurationError, DataError, PoolingError

__all__ = [
    "DEGENERATE_SIGMA",
    "POOL_EPS",
    "HosVector",
    "moments",
    "moments_streaming",
    "hos_vector",
    "stats_pool",
]

# Below this standard deviation a dimension is treated as constant.
DEGENERATE_SIGMA = 1e-6

# Variance floor inside the pooling square root; keeps the gradient
# finite when a channel is constant over the pooled frames.
POOL_EPS = 1e-8


@dataclass
class HosVector:
    """Per-dimension mean, stddev, skewness, and kurtosis of an utterance."""

    mu: np.ndarray
    sigma: np.ndarray
    skew: np.ndarray
    kurt: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.mu.shape[0]

    def concat(self, order: int = 4) -> np.ndarray:
        """Concatenated layout [mu, sigma, skew, kurt][:order], length order * D."""
        if order not in (1, 2, 3, 4):
            raise ConfigurationError(f"moment order must be in 1..4, got {order}")
        parts = (self.mu, self.sigma, self.skew, self.kurt)[:order]
        return np.concatenate(parts)


def _check_frames(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"frames must be [T, D], got shape {x.shape}")
    if x.shape[0] < 1:
        raise DataError("empty utterance: no frames to summarize")
    return x


def moments(frames) -> HosVector:
    """Two-pass reference statistics of a [T, D] frame matrix."""
    x = _check_frames(frames)
    mu = x.mean(axis=0)
    centered = x - mu
    var = (centered * centered).mean(axis=0)
    sigma = np.sqrt(var)
    ok = sigma >= DEGENERATE_SIGMA
    z = centered / np.where(ok, sigma, 1.0)
    skew = np.where(ok, (z ** 3).mean(axis=0), 0.0)
    kurt = np.where(ok, (z ** 4).mean(axis=0), 0.0)
    return HosVector(mu=mu, sigma=sigma, skew=skew, kurt=kurt)


def moments_streaming(frames) -> HosVector:
    """One-pass central-moment recurrence, vectorized over dimensions.

    Maintains running sums M1..M4 and folds in one frame at a time, so
    arbitrarily long inputs never need a second pass over the data.
    """
    x = _check_frames(frames)
    d = x.shape[1]
    m1 = np.zeros(d)
    m2 = np.zeros(d)
    m3 = np.zeros(d)
    m4 = np.zeros(d)
    n = 0
    for row in x:
        n += 1
        delta = row - m1
        delta_n = delta / n
        delta_n2 = delta_n * delta_n
        term1 = delta * delta_n * (n - 1)
        m1 += delta_n
        m4 += term1 * delta_n2 * (n * n - 3 * n + 3) + 6.0 * delta_n2 * m2 - 4.0 * delta_n * m3
        m3 += term1 * delta_n * (n - 2) - 3.0 * delta_n * m2
        m2 += term1
    mu = m1
    var = m2 / n
    sigma = np.sqrt(var)
    ok = sigma >= DEGENERATE_SIGMA
    safe_m2 = np.where(ok, m2, 1.0)
    skew = np.where(ok, np.sqrt(float(n)) * m3 / safe_m2 ** 1.5, 0.0)
    kurt = np.where(ok, n * m4 / (safe_m2 * safe_m2), 0.0)
    return HosVector(mu=mu, sigma=sigma, skew=skew, kurt=kurt)


def hos_vector(frames, order: int = 4) -> np.ndarray:
    """Reconstruction target: the first `order` statistics, concatenated."""
    return moments(frames).concat(order)


def stats_pool(frames: Tensor, tape: Tape | None = None) -> Tensor:
    """Pool frame activations to [mean, stddev] per channel.

    Accepts [T', F] or batched [N, T', F] and returns [2F] or [N, 2F].
    The stddev is sqrt(population variance + POOL_EPS).
    """
    batched = frames.data.ndim == 3
    if not batched and frames.data.ndim != 2:
        raise ConfigurationError(f"stats_pool input must be 2-d or 3-d, got shape {frames.data.shape}")
    x = frames.data if batched else frames.data[None]
    n, t, f = x.shape
    if t < 2:
        raise PoolingError(f"stats_pool needs at least 2 frames, got {t}")
    mu = x.mean(axis=1)
    centered = x - mu[:, None, :]
    var = (centered * centered).mean(axis=1)
    std = np.sqrt(var + POOL_EPS)
    y = np.concatenate([mu, std], axis=1)
    out = Tensor(y if batched else y[0])

    if tape is not None:
        def bwd(g: np.ndarray) -> None:
            if not _wants_grad(frames):
                return
            gb = g if batched else g[None]
            g_mu = gb[:, :f]
            g_std = gb[:, f:]
            gx = g_mu[:, None, :] / t + g_std[:, None, :] * centered / (t * std[:, None, :])
            _accumulate(frames, gx if batched else gx[0])
        tape.record(out, bwd)
    return out
