"""Likelihood models and their bridges to the integer range coder.

Training evaluates continuous likelihoods of noise-quantized values; at
coding time the same models are frozen into 16-bit integer CDF tables
whose construction is bit-for-bit reproducible from the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from . import autodiff as ad
from .errors import ContractError, DomainError
from .nn import ParameterStore
from .ply_io import round_half_away
from .rangecoder import TOTAL

LIKELIHOOD_FLOOR = 1e-9


def quantize(values, mode, rng=None):
    """Training proxy (additive uniform noise) or hard rounding.

    ``noise`` adds i.i.d. uniform [-0.5, 0.5) per element and needs an rng;
    ``round`` rounds half away from zero to integers.
    """
    if mode == "noise":
        if rng is None:
            raise DomainError("noise mode requires an rng")
        if isinstance(values, ad.Tensor):
            noise = rng.uniform(-0.5, 0.5, size=values.data.shape)
            return values + ad.constant(noise)
        return np.asarray(values, dtype=np.float64) + rng.uniform(-0.5, 0.5, size=np.shape(values))
    if mode == "round":
        arr = values.data if isinstance(values, ad.Tensor) else values
        return round_half_away(arr)
    raise DomainError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------------------
# Gaussian conditional
# ---------------------------------------------------------------------------


@dataclass
class GaussianParams:
    """Per-element mean and scale; scales are clamped from below."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_min: float = 0.04

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), self.sigma_min)


def gaussian_likelihood_t(values, mu, sigma):
    """Differentiable integer-bin Gaussian mass around each value.

    P = Phi((v - mu + 0.5) / sigma) - Phi((v - mu - 0.5) / sigma), floored
    at the likelihood clamp so the rate term never sees zero.
    """
    values = ad.as_tensor(values)
    mu = ad.as_tensor(mu)
    sigma = ad.as_tensor(sigma)
    centered = values - mu
    upper = ad.normal_cdf((centered + 0.5) / sigma)
    lower = ad.normal_cdf((centered - 0.5) / sigma)
    return ad.maximum(upper - lower, LIKELIHOOD_FLOOR)


def gaussian_likelihood(values, params: GaussianParams):
    """Numpy evaluation against clamped GaussianParams."""
    upper = _special.ndtr((np.asarray(values) - params.mu + 0.5) / params.sigma)
    lower = _special.ndtr((np.asarray(values) - params.mu - 0.5) / params.sigma)
    return np.maximum(upper - lower, LIKELIHOOD_FLOOR)


# ---------------------------------------------------------------------------
# factorized prior
# ---------------------------------------------------------------------------


class FactorizedPrior:
    """Per-channel learned cumulative distribution (monotone 1-d network).

    Each channel owns a stack of strictly monotone layers: an affine map
    with softplus-positive weights followed by an x + tanh(a) * tanh(x)
    gate, with a final sigmoid. Integer-bin probabilities come from CDF
    differences at half-integer points.
    """

    def __init__(self, store: ParameterStore, name, channels, hidden=(3, 3),
                 init_scale=10.0, tail_mass=LIKELIHOOD_FLOOR):
        self.channels = channels
        self.tail_mass = tail_mass
        self.dims = (1,) + tuple(hidden) + (1,)
        self.layers = []
        n_mats = len(self.dims) - 1
        init = float(np.log(np.expm1(init_scale ** (-1.0 / n_mats))))
        for ch in range(channels):
            per_layer = []
            for j in range(n_mats):
                d_in, d_out = self.dims[j], self.dims[j + 1]
                w = store.create(f"{name}.ch{ch:02d}.l{j}.weight", (d_in, d_out), fill=init)
                b = store.create(f"{name}.ch{ch:02d}.l{j}.bias", (d_out,))
                a = None
                if j < n_mats - 1:
                    a = store.create(f"{name}.ch{ch:02d}.l{j}.gate", (d_out,))
                per_layer.append((w, b, a))
            self.layers.append(per_layer)
        # spread the bias of the first layer so channels start distinct
        self._param_names = [
            p.name for per in self.layers for wba in per for p in wba if p is not None
        ]

    def init_biases(self, rng):
        for per in self.layers:
            for w, b, a in per:
                b.data = rng.uniform(-0.5, 0.5, size=b.data.shape)

    def cdf_t(self, values, channel):
        """Differentiable CDF of scalar values (N,) for one channel."""
        x = ad.as_tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1)) \
            if not isinstance(values, ad.Tensor) else values
        per = self.layers[channel]
        for j, (w, b, a) in enumerate(per):
            x = ad.matmul(x, ad.softplus(w)) + b
            if a is not None:
                x = x + ad.tanh(a) * ad.tanh(x)
        return ad.sigmoid(x)

    def likelihood_t(self, values, channel):
        """Differentiable integer-bin probability c(v+0.5) - c(v-0.5)."""
        v = values if isinstance(values, ad.Tensor) else ad.constant(
            np.asarray(values, dtype=np.float64)
        )
        if v.data.ndim == 1:
            v = ad.reshape(v, (-1, 1))
        upper = self.cdf_t(v + 0.5, channel)
        lower = self.cdf_t(v - 0.5, channel)
        return ad.maximum(upper - lower, self.tail_mass)

    def cdf(self, values, channel):
        return self.cdf_t(np.asarray(values, dtype=np.float64), channel).data.reshape(-1)

    def likelihood(self, values, channel):
        return self.likelihood_t(np.asarray(values, dtype=np.float64), channel).data.reshape(-1)


def factorized_likelihood(values, prior: FactorizedPrior, channel):
    return prior.likelihood(values, channel)


# ---------------------------------------------------------------------------
# integer CDF tables
# ---------------------------------------------------------------------------


def integerize_pmf(pmf):
    """16-bit frequency table: total exactly 2^16, every symbol >= 1.

    Rounds to the nearest count and repairs the total by largest remainder
    (deficit) or by shaving the largest bins (surplus), with index
    tie-breaks, so the result is deterministic and the KL against the true
    PMF stays at rounding-noise level.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = len(pmf)
    if n == 0 or n > TOTAL // 2:
        raise DomainError("alphabet size unsupported")
    total = pmf.sum()
    if not np.isfinite(total) or total <= 0:
        raise DomainError("degenerate PMF")
    scaled = pmf / total * TOTAL
    freqs = np.maximum(1, np.round(scaled).astype(np.int64))
    diff = TOTAL - int(freqs.sum())
    if diff > 0:
        remainders = scaled - np.round(scaled)
        order = np.lexsort((np.arange(n), -remainders))
        base, extra = divmod(diff, n)
        freqs += base
        freqs[order[:extra]] += 1
    while diff < 0:
        reducible = np.nonzero(freqs > 1)[0]
        order = reducible[np.lexsort((reducible, -freqs[reducible]))]
        take = order[: min(len(order), -diff)]
        freqs[take] -= 1
        diff += len(take)
    return freqs


def cumulative_from_freqs(freqs):
    cum = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return cum


def gaussian_bin_pmf(offset, sigma, radius):
    """PMF over integer bins [-radius, radius] of N(offset, sigma^2) plus a
    trailing escape bin that carries the remaining tail mass."""
    grid = np.arange(-radius, radius + 1, dtype=np.float64)
    upper = _special.ndtr((grid - offset + 0.5) / sigma)
    lower = _special.ndtr((grid - offset - 0.5) / sigma)
    pmf = upper - lower
    tail = max(0.0, 1.0 - float(pmf.sum()))
    return np.append(pmf, tail)


@dataclass
class GaussianCodingTable:
    """Precomputed rows over (mean-offset bucket, sigma level).

    Symbols are residuals t = v - clamp(round(mu)), always representable
    within [-radius, radius]. Each row covers a core interval sized to its
    sigma level (bins worth at least half a coder count) plus an escape
    symbol; escaped residuals are re-coded against a uniform fallback row
    over the full interval. Tight cores keep the per-row KL at rounding
    noise for every sigma.
    """

    radius: int
    mu_buckets: int
    sigma_levels: np.ndarray
    core_radius: np.ndarray  # (levels,)
    rows: list  # rows[level][bucket] -> cumulative array, core + escape
    fallback: np.ndarray  # uniform cumulative over 2*radius + 1 symbols

    def row(self, bucket, level):
        return self.rows[level][bucket]


def sigma_level_grid(sigma_min=0.04, sigma_max=64.0, levels=64):
    return np.exp(np.linspace(np.log(sigma_min), np.log(sigma_max), levels))


_TABLE_CACHE = {}


def build_gaussian_table(radius, sigma_min=0.04, sigma_max=64.0, levels=64,
                         mu_buckets=64) -> GaussianCodingTable:
    # tables are immutable and fully determined by their arguments
    key = (int(radius), float(sigma_min), float(sigma_max), int(levels),
           int(mu_buckets))
    cached = _TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    table = _build_gaussian_table(*key)
    if len(_TABLE_CACHE) > 32:
        _TABLE_CACHE.clear()
    _TABLE_CACHE[key] = table
    return table


def _build_gaussian_table(radius, sigma_min, sigma_max, levels,
                          mu_buckets) -> GaussianCodingTable:
    grid = sigma_level_grid(sigma_min, sigma_max, levels)
    radius = int(max(radius, 1))
    core = np.minimum.reduce([
        np.maximum(np.ceil(5.5 * grid + 1.0).astype(np.int64), 1),
        np.full(levels, radius, dtype=np.int64),
    ])
    # shrink each core to the bins worth at least half a coder count
    rows = []
    core_radius = np.empty(levels, dtype=np.int64)
    for l, sigma in enumerate(grid):
        r = int(core[l])
        pmf = gaussian_bin_pmf(0.0, sigma, r)[:-1]
        significant = np.nonzero(pmf >= 0.5 / TOTAL)[0]
        if len(significant):
            spread = np.abs(significant - r).max()
            r = int(max(1, min(r, spread + 1)))
        else:
            r = 1
        core_radius[l] = r
        per_bucket = []
        for b in range(mu_buckets):
            offset = (b + 0.5) / mu_buckets - 0.5
            pmf = gaussian_bin_pmf(offset, sigma, r)
            per_bucket.append(cumulative_from_freqs(integerize_pmf(pmf)))
        rows.append(per_bucket)
    fallback = cumulative_from_freqs(integerize_pmf(np.ones(2 * radius + 1)))
    return GaussianCodingTable(radius, mu_buckets, grid, core_radius, rows, fallback)


def encode_gaussian_residuals(residuals, buckets, levels, table) -> bytes:
    """Range-code residual symbols against their (bucket, level) rows.

    Residuals outside a row's core are sent as the escape symbol followed
    by a uniform fallback code over the full residual interval.
    """
    from .rangecoder import RangeEncoder

    enc = RangeEncoder()
    fallback = table.fallback
    radius = table.radius
    for t, b, l in zip(residuals, buckets, levels):
        r = int(table.core_radius[l])
        cum = table.rows[l][b]
        t = int(t)
        if -r <= t <= r:
            s = t + r
            enc.encode(int(cum[s]), int(cum[s + 1]))
        else:
            if not -radius <= t <= radius:
                raise DomainError(f"residual {t} outside the coding interval")
            esc = 2 * r + 1
            enc.encode(int(cum[esc]), int(cum[esc + 1]))
            s = t + radius
            enc.encode(int(fallback[s]), int(fallback[s + 1]))
    return enc.finish()


def decode_gaussian_residuals(data, buckets, levels, table, count):
    """Inverse of :func:`encode_gaussian_residuals`."""
    from .rangecoder import RangeDecoder

    dec = RangeDecoder(data)
    fallback = table.fallback
    radius = table.radius
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        b, l = int(buckets[i]), int(levels[i])
        r = int(table.core_radius[l])
        cum = table.rows[l][b]
        value = dec.decode_value()
        s = int(np.searchsorted(cum, value, side="right")) - 1
        dec.consume(int(cum[s]), int(cum[s + 1]))
        if s == 2 * r + 1:  # escape: re-read against the uniform fallback
            value = dec.decode_value()
            s = int(np.searchsorted(fallback, value, side="right")) - 1
            dec.consume(int(fallback[s]), int(fallback[s + 1]))
            out[i] = s - radius
        else:
            out[i] = s - r
    return out


def gaussian_table_bits(residuals, buckets, levels, table):
    """- sum log2 P_table over residual symbols (escape path included)."""
    total = 0.0
    radius = table.radius
    for t, b, l in zip(residuals, buckets, levels):
        r = int(table.core_radius[l])
        cum = table.rows[l][b]
        t = int(t)
        if -r <= t <= r:
            total -= np.log2((cum[t + r + 1] - cum[t + r]) / TOTAL)
        else:
            esc = 2 * r + 1
            total -= np.log2((cum[esc + 1] - cum[esc]) / TOTAL)
            s = t + radius
            total -= np.log2((table.fallback[s + 1] - table.fallback[s]) / TOTAL)
    return float(total)


def gaussian_row_assignment(mu, sigma, table: GaussianCodingTable, lo, hi):
    """Per-element (anchor, bucket, level) for coding symbols t = v - anchor.

    ``lo``/``hi`` bound the integer values per element, so anchors are
    clamped into the same interval and |t| <= hi - lo <= radius.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    anchor = np.clip(round_half_away(mu), lo, hi).astype(np.int64)
    frac = np.clip(mu - anchor, -0.5, np.nextafter(0.5, 0.0))
    bucket = np.clip(((frac + 0.5) * table.mu_buckets).astype(np.int64), 0,
                     table.mu_buckets - 1)
    log_grid = np.log(table.sigma_levels)
    mids = (log_grid[:-1] + log_grid[1:]) / 2.0
    level = np.searchsorted(mids, np.log(np.maximum(sigma, 1e-12)))
    return anchor, bucket, level.astype(np.int64)


def build_factorized_rows(prior: FactorizedPrior, bounds):
    """Integer CDF row per channel over the header support [lo, hi].

    Tail mass outside the support folds into the edge bins.
    """
    rows = []
    for ch, (lo, hi) in enumerate(bounds):
        if hi < lo:
            raise ContractError("invalid support bounds")
        grid = np.arange(lo, hi + 1, dtype=np.float64)
        upper = prior.cdf(grid + 0.5, ch)
        lower = prior.cdf(grid - 0.5, ch)
        pmf = upper - lower
        pmf[0] += lower[0]
        pmf[-1] += 1.0 - upper[-1]
        rows.append(cumulative_from_freqs(integerize_pmf(pmf)))
    return rows


def table_bits(freqs_or_cum, symbols):
    """- sum log2 P_table over coded symbols, from a cumulative row."""
    cum = np.asarray(freqs_or_cum)
    freqs = np.diff(cum) if cum.ndim == 1 else None
    if freqs is None:
        raise ContractError("expected a cumulative row")
    p = freqs[np.asarray(symbols, dtype=np.int64)] / TOTAL
    return float(-np.sum(np.log2(p)))


def kl_bits(p, q):
    """KL(p || q) in bits for strictly positive q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))
