"""Plaintext distributions, DP mechanisms, local partial-noise samplers and
utility metrics.

This module is the oracle layer: every circuit path is tested against the
exact pmf/cdf evaluations and samplers here.  The discrete Gaussian sampler
uses the same rejection scheme as the circuits (propose from discrete
Laplace with scale t(sigma), accept with exp(-(|x|-sigma^2/t)^2/(2 sigma^2)))
so acceptance-rate properties carry over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

FAMILIES = (
    "bernoulli", "uniform", "discrete-uniform", "laplace", "gaussian",
    "dlaplace", "dgaussian", "nb", "gamma", "tdlaplace", "tdgaussian",
)


def sigma_to_t(sigma):
    """Proposal scale for the discrete-Gaussian rejection sampler."""
    if sigma >= 1:
        return sigma * sigma / round(sigma)
    return sigma * sigma * math.ceil(1 / sigma)


@dataclass(frozen=True)
class DistSpec:
    """A distribution family with parameters.

    params by family:
      bernoulli: p; uniform / discrete-uniform: a, b; laplace: t;
      gaussian: sigma2; dlaplace: t; dgaussian: sigma2; nb: r, p;
      gamma: k, b; tdlaplace: t, N; tdgaussian: sigma2, N.
    """

    family: str
    params: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")

    # -- support helpers -------------------------------------------------

    def _dlap_weights(self, lo, hi):
        t = self.params[0]
        xs = np.arange(lo, hi + 1)
        return xs, np.exp(-np.abs(xs) / t)

    def _dgau_weights(self, lo, hi):
        s2 = self.params[0]
        xs = np.arange(lo, hi + 1)
        return xs, np.exp(-xs.astype(float) ** 2 / (2 * s2))

    def support(self):
        """Integer support for discrete families (truncated at ~1e-18 tails)."""
        fam = self.family
        if fam == "bernoulli":
            return np.array([0, 1])
        if fam == "discrete-uniform":
            a, b = self.params
            return np.arange(a, b + 1)
        if fam == "dlaplace":
            t = self.params[0]
            h = int(math.ceil(42 * t)) + 2
            return np.arange(-h, h + 1)
        if fam == "tdlaplace":
            N = self.params[1]
            return np.arange(-(N - 1), N)
        if fam == "dgaussian":
            s = math.sqrt(self.params[0])
            h = int(math.ceil(10 * s)) + 2
            return np.arange(-h, h + 1)
        if fam == "tdgaussian":
            N = self.params[1]
            return np.arange(-(N - 1), N)
        if fam == "nb":
            r, p = self.params
            mean = r * p / (1 - p)
            h = int(mean + 30 * math.sqrt(max(r * p, 1.0) / (1 - p) ** 2)) + 60
            return np.arange(0, h + 1)
        raise ConfigError(f"{fam} has no integer support")

    def pmf(self, x):
        xs = self.support()
        w = self._weights(xs)
        total = w.sum()
        x = np.asarray(x)
        out = np.zeros(x.shape, dtype=float)
        inside = (x >= xs[0]) & (x <= xs[-1])
        out[inside] = w[(x[inside] - xs[0]).astype(int)] / total
        return out if out.shape else float(out)

    def _weights(self, xs):
        fam = self.family
        if fam == "bernoulli":
            p = self.params[0]
            return np.array([1 - p, p], dtype=float)
        if fam == "discrete-uniform":
            return np.ones(len(xs))
        if fam in ("dlaplace", "tdlaplace"):
            t = self.params[0]
            return np.exp(-np.abs(xs) / t)
        if fam in ("dgaussian", "tdgaussian"):
            s2 = self.params[0]
            return np.exp(-xs.astype(float) ** 2 / (2 * s2))
        if fam == "nb":
            r, p = self.params
            lg = np.vectorize(math.lgamma)
            logw = (lg(r + xs) - math.lgamma(r) - lg(xs + 1.0)
                    + xs * math.log(p) + r * math.log1p(-p))
            return np.exp(logw)
        raise ConfigError(f"{fam} is not discrete")

    def cdf(self, x):
        fam = self.family
        if fam == "uniform":
            a, b = self.params
            return np.clip((np.asarray(x, dtype=float) - a) / (b - a), 0, 1)
        if fam == "laplace":
            t = self.params[0]
            x = np.asarray(x, dtype=float)
            return np.where(x < 0, 0.5 * np.exp(x / t), 1 - 0.5 * np.exp(-x / t))
        if fam == "gaussian":
            s = math.sqrt(self.params[0])
            from math import erf
            x = np.asarray(x, dtype=float)
            return 0.5 * (1 + np.vectorize(erf)(x / (s * math.sqrt(2))))
        xs = self.support()
        w = self._weights(xs)
        c = np.cumsum(w) / w.sum()
        x = np.asarray(x)
        idx = np.searchsorted(xs, x, side="right") - 1
        out = np.where(idx < 0, 0.0, c[np.clip(idx, 0, len(xs) - 1)])
        return out if out.shape else float(out)

    def variance(self):
        fam, p = self.family, self.params
        if fam == "bernoulli":
            return p[0] * (1 - p[0])
        if fam == "laplace":
            return 2 * p[0] ** 2
        if fam == "gaussian":
            return p[0]
        if fam == "dlaplace":
            q = math.exp(-1 / p[0])
            return 2 * q / (1 - q) ** 2
        if fam == "gamma":
            return p[0] * p[1] ** 2
        if fam == "nb":
            r, q = p
            return r * q / (1 - q) ** 2
        xs = self.support()
        w = self._weights(xs)
        w = w / w.sum()
        mean = float(np.dot(xs, w))
        return float(np.dot((xs - mean) ** 2, w))

    # -- sampling --------------------------------------------------------

    def sample(self, rng, size=None):
        fam, p = self.family, self.params
        if fam == "bernoulli":
            return (rng.random(size) < p[0]).astype(np.int64)
        if fam == "uniform":
            return rng.uniform(p[0], p[1], size)
        if fam == "discrete-uniform":
            return rng.integers(p[0], p[1] + 1, size)
        if fam == "laplace":
            return rng.laplace(0.0, p[0], size)
        if fam == "gaussian":
            return rng.normal(0.0, math.sqrt(p[0]), size)
        if fam == "gamma":
            return rng.gamma(p[0], p[1], size)
        if fam == "nb":
            r, q = p
            return rng.negative_binomial(r, 1 - q, size)
        if fam == "dlaplace":
            return sample_dlaplace(rng, p[0], size)
        if fam == "tdlaplace":
            return sample_tdlaplace(rng, p[0], p[1], size)
        if fam == "dgaussian":
            return sample_dgaussian(rng, p[0], size=size)
        if fam == "tdgaussian":
            s2, N = p
            return sample_dgaussian(rng, s2, N=N, size=size)
        raise ConfigError(fam)


def sample_dlaplace(rng, t, size=None):
    """Exact discrete Laplace: zero indicator + sign + shifted geometric."""
    n = int(np.prod(size)) if size is not None else 1
    q = math.exp(-1.0 / t)
    f0 = (1 - q) / (1 + q)
    z = rng.random(n) < f0
    sign = 1 - 2 * rng.integers(0, 2, n)
    mag = rng.geometric(1 - q, n)  # support 1, 2, ... with pmf ~ q^(k-1)
    out = np.where(z, 0, sign * mag)
    return out.reshape(size) if size is not None else int(out[0])


def sample_tdlaplace(rng, t, N, size=None):
    """Discrete Laplace conditioned on |x| <= N-1 (resample the tail)."""
    n = int(np.prod(size)) if size is not None else 1
    out = sample_dlaplace(rng, t, (n,))
    bad = np.abs(out) >= N
    while bad.any():
        out[bad] = sample_dlaplace(rng, t, (int(bad.sum()),))
        bad = np.abs(out) >= N
    return out.reshape(size) if size is not None else int(out[0])


class RejectionStats:
    """Trial/acceptance counters for the discrete-Gaussian sampler."""

    def __init__(self):
        self.trials = 0
        self.accepted = 0

    @property
    def rate(self):
        return self.accepted / self.trials if self.trials else float("nan")


def sample_dgaussian(rng, sigma2, N=None, size=None, stats=None):
    """Discrete Gaussian via rejection from (truncated) discrete Laplace.

    Proposes X ~ dLap(t(sigma)) and accepts with probability
    exp(-(|X| - sigma^2/t)^2 / (2 sigma^2)); with N given the proposal and
    the output are truncated to (-N, N).
    """
    sigma = math.sqrt(sigma2)
    t = sigma_to_t(sigma)
    n = int(np.prod(size)) if size is not None else 1
    out = np.empty(n, dtype=np.int64)
    filled = 0
    c = sigma2 / t
    while filled < n:
        m = max(2 * (n - filled), 64)
        if N is None:
            x = sample_dlaplace(rng, t, (m,))
        else:
            x = sample_tdlaplace(rng, t, N, (m,))
        acc = rng.random(m) < np.exp(-((np.abs(x) - c) ** 2) / (2 * sigma2))
        if stats is not None:
            stats.trials += m
            stats.accepted += int(acc.sum())
        take = x[acc][: n - filled]
        out[filled:filled + len(take)] = take
        filled += len(take)
    return out.reshape(size) if size is not None else int(out[0])


# ----------------------------------------------------------------------
# central-model mechanisms


def cdp_mechanism(values, mech, epsilon, delta=None, Delta=1.0, rng=None):
    """Add calibrated iid noise to a clear query-result vector."""
    rng = rng or np.random.default_rng()
    values = np.asarray(values, dtype=float)
    if mech == "laplace":
        return values + rng.laplace(0.0, Delta / epsilon, values.shape)
    if mech == "d-laplace":
        return values + sample_dlaplace(rng, Delta / epsilon, values.shape)
    if mech in ("gaussian", "d-gaussian"):
        from .params import gaussian_sigma
        sigma = gaussian_sigma(epsilon, delta, Delta)
        if mech == "gaussian":
            return values + rng.normal(0.0, sigma, values.shape)
        return values + sample_dgaussian(rng, sigma * sigma, size=values.shape)
    raise ConfigError(f"unknown mechanism {mech!r}")


# ----------------------------------------------------------------------
# distributed noise generation: local partial sampling (one party's draw)


@dataclass(frozen=True)
class PartialNoiseSpec:
    """One row of the local-sampling table: how a party draws its partial
    noise and how the m partials aggregate to the target."""

    row: str           # gamma-pair | gaussian-quad | laplace-beta | nb-pair | gaussian
    epsilon: float
    Delta: float = 1.0
    sigma2: float = None  # for the gaussian row
    collusion_fraction: float = 0.0


def dng_partial(spec, m, rng):
    """Draw ONE party's partial noise (array per component)."""
    b = spec.Delta / spec.epsilon
    infl = 1.0 / (1.0 - spec.collusion_fraction) if spec.collusion_fraction else 1.0
    if spec.row == "gamma-pair":
        return rng.gamma(1.0 / m, b, 2)
    if spec.row == "gaussian-quad":
        return rng.normal(0.0, math.sqrt(spec.Delta / (2 * m * spec.epsilon)), 4)
    if spec.row == "laplace-beta":
        return rng.laplace(0.0, b, 1)
    if spec.row == "nb-pair":
        q = math.exp(-spec.Delta / spec.epsilon)
        return rng.negative_binomial(1.0 / m, 1 - q, 2)
    if spec.row == "gaussian":
        return rng.normal(0.0, math.sqrt(infl * spec.sigma2 / m), 1)
    raise ConfigError(f"unknown partial row {spec.row!r}")


def dng_aggregate(spec, partials, m, rng=None):
    """Combine an (m, k) array of partials into one target-noise draw.

    gamma-pair:     sum(Y1) - sum(Y2)                    -> Laplace(b)
    gaussian-quad:  N1^2 - N2^2 + N3^2 - N4^2 (N_j sums) -> Laplace(b)
    laplace-beta:   sqrt(Beta(1, m-1)) * sum(L_i)        -> Laplace(b)
    nb-pair:        sum(Y1) - sum(Y2)                    -> discrete Laplace
    gaussian:       sum(Y_i)                             -> Gaussian(sigma2)
    """
    partials = np.asarray(partials)
    if partials.shape[0] != m:
        raise ShapeError("partials must have one row per party")
    if spec.row in ("gamma-pair", "nb-pair"):
        return partials[:, 0].sum() - partials[:, 1].sum()
    if spec.row == "gaussian-quad":
        N = partials.sum(axis=0)
        return N[0] ** 2 - N[1] ** 2 + N[2] ** 2 - N[3] ** 2
    if spec.row == "laplace-beta":
        beta = 1.0 if m == 1 else (rng or np.random.default_rng()).beta(1, m - 1)
        return math.sqrt(beta) * partials[:, 0].sum()
    if spec.row == "gaussian":
        return partials[:, 0].sum()
    raise ConfigError(spec.row)


def collusion_adjust(sigma2, alpha):
    """Per-party variance inflation against an alpha fraction of colluders."""
    if not 0 <= alpha < 1:
        raise ConfigError(f"collusion fraction must be in [0, 1), got {alpha}")
    return sigma2 / (1.0 - alpha)


# ----------------------------------------------------------------------
# utility metrics


@dataclass
class UtilityReport:
    mse: float
    mae: float
    re_percent: float
    zero_keys_skipped: int = 0


def utility(true_counts, noisy):
    true_counts = np.asarray(true_counts, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if true_counts.shape != noisy.shape:
        raise ShapeError("length mismatch between true and noisy vectors")
    err = noisy - true_counts
    mse = float(np.mean(err ** 2))
    mae = float(np.mean(np.abs(err)))
    nz = true_counts != 0
    re = float(np.mean(np.abs(err[nz] / true_counts[nz])) * 100.0) if nz.any() else 0.0
    return UtilityReport(mse=mse, mae=mae, re_percent=re,
                         zero_keys_skipped=int((~nz).sum()))


# ----------------------------------------------------------------------
# datasets

KOSARAK_KEYS = 41270
KOSARAK_CLICKS = 8_019_015


def convert_transactions(lines):
    """Click-log transactions (space-separated item ids per line) -> counts
    vector ordered by item id."""
    from collections import Counter
    counter = Counter()
    for line in lines:
        counter.update(int(tok) for tok in line.split())
    if not counter:
        raise DomainError("empty transaction log")
    keys = sorted(counter)
    return np.array([counter[k] for k in keys], dtype=np.int64)


def load_counts(path):
    """Counts file: one integer count per line."""
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


def synthetic_zipf_counts(n_keys=KOSARAK_KEYS, total=KOSARAK_CLICKS, s=1.5):
    """Deterministic Zipf(s) count vector matching the real dataset's shape."""
    ranks = np.arange(1, n_keys + 1, dtype=float)
    w = ranks ** -s
    return np.round(total * w / w.sum()).astype(np.int64)
