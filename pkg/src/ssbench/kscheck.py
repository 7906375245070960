"""In-circuit one-sample Kolmogorov-Smirnov check over aggregated noise.

The check scans a public rank table (target CDF scaled by the sample count,
so all comparisons stay integer), sorts the per-sample ranks obliviously and
compares the sup-deviation from the identity ranks against a precomputed
threshold.  A reconstructed 1 flags the batch as not drawn from the target.

Two critical-value constants are exposed: "paper" c(a) = sqrt(-ln(a/4)) and
the textbook two-sample constant "standard" c(a) = sqrt(-ln(a/2)/2).  With
the standard constant the honest flag rate matches the significance level
once the target's point masses are small relative to 1/sqrt(n) (fine-grained
regimes, eps <= 0.01 for the Laplace targets used here); coarser targets
inflate the statistic by ~n*max pmf, which is inherent to comparing every
tied rank against the inclusive CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gadgets as gd
from .engine import Engine, SecretWord
from .errors import ConfigError, DomainError

CONSTANTS = ("paper", "standard")


def critical_constant(alpha, which="paper"):
    if which == "paper":
        return math.sqrt(-math.log(alpha / 4))
    if which == "standard":
        return math.sqrt(-math.log(alpha / 2) / 2)
    raise ConfigError(f"unknown constant {which!r}")


@dataclass
class CheckTable:
    """Scaled CDF table of length 2N-1 plus the integer decision threshold."""

    F: np.ndarray          # F[j-1] = round(F_target(j - N) * n), j = 1..2N-1
    threshold: int
    n: int
    N: int
    alpha: float
    constant: str

    @property
    def length(self):
        return len(self.F)


def build_table(dist, n, N, alpha=0.05, constant="paper"):
    """Precompute the rank table and threshold for a target distribution.

    `dist` is a DistSpec whose cdf covers (-N, N); entries are exact CDF
    values scaled by n and rounded to integers.
    """
    if N < 2:
        raise ConfigError("N must be at least 2")
    xs = np.arange(1 - N, N)
    F = np.round(dist.cdf(xs) * n).astype(np.int64)
    L = 2 * N - 1
    c = critical_constant(alpha, constant)
    thr = int(math.ceil(c * n * math.sqrt((n + L) / (n * L))))
    return CheckTable(F=F, threshold=thr, n=n, N=N, alpha=alpha, constant=constant)


def ks_oracle(samples, dist, alpha=0.05, N=None, constant="paper", table=None):
    """Plaintext mirror of the circuit check.

    Returns (reject, statistic, threshold); `reject` means the batch is
    flagged as NOT drawn from `dist`.
    """
    samples = np.asarray(samples)
    if samples.size == 0:
        raise DomainError("empty sample batch")
    if table is None:
        if N is None:
            N = int(np.abs(samples).max()) + 1
        table = build_table(dist, len(samples), N, alpha, constant)
    obs = table.F[samples + table.N - 1]
    obs = np.sort(obs)
    ranks = np.arange(1, len(samples) + 1)
    D = int(np.max(np.abs(ranks - obs)))
    return D >= table.threshold, D, table.threshold


def check(words, table):
    """The in-circuit check: returns the secret reject bit.

    `words` is a SecretWord batch of n samples, all in (-N, N).  Per sample
    the table is scanned with EQ/MUX to fetch its scaled rank; ranks are
    sorted obliviously; D = max |i - rank_(i)| is compared to the threshold.
    """
    eng = words.engine
    n = words.shape[-1]
    if n != table.n:
        raise ConfigError("table was built for a different batch size")
    wobs = max(2, int(table.n).bit_length() + 1)
    # Scan the table: exactly one EQ fires per sample (samples lie in
    # (-N, N)), so the per-entry MUX collapses to masked XORs against the
    # public rank bits; the AND cost is the Theta(n*N) equality tree.
    L = 2 * table.N - 1
    chunk = max(1, min(L, (1 << 21) // max(n, 1)))
    planes = [eng.const_bit(0, (n,)) for _ in range(wobs)]
    for j0 in range(0, L, chunk):
        js = np.arange(j0, min(j0 + chunk, L))
        consts = (js + 1 - table.N)[:, None]          # values j - N
        e = gd.eq_const(words, consts)                # (chunk, n)
        fvals = table.F[js][:, None]
        for k in range(wobs):
            mask = ((fvals >> k) & 1).astype(np.uint8)
            planes[k] = eng.xor(planes[k], eng.xor_reduce(eng.and_const(e, mask), axis=0))
    obs = SecretWord(eng, planes)
    obs, _ = gd.oblivious_sort(obs)
    wd = wobs + 1
    ranks = np.arange(1, n + 1)
    diff = gd.sub(gd.const_word(eng, ranks, wd, (n,)), gd.sign_extend(obs, wd))
    cur = gd.abs_(diff)
    # binary max-fold over the batch axis (same ANDs as a chain, fewer calls)
    m = n
    while m > 1:
        half = m // 2
        lo = SecretWord(eng, [eng.take(b, np.arange(half), axis=0) for b in cur.bits])
        hi = SecretWord(eng, [eng.take(b, np.arange(half, 2 * half), axis=0)
                              for b in cur.bits])
        bigger = eng.not_(gd.le(hi, lo))
        merged = gd.mux_word(bigger, hi, lo)
        if m % 2:
            last = SecretWord(eng, [eng.take(b, np.array([m - 1]), axis=0)
                                    for b in cur.bits])
            merged = SecretWord(eng, [
                eng.stack_bits(eng.unstack_bits(a) + eng.unstack_bits(b))
                for a, b in zip(merged.bits, last.bits)])
        cur = merged
        m = merged.shape[-1]
    top = SecretWord(eng, [eng.take(b, 0, axis=0) for b in cur.bits])
    return gd.ge_const(top, table.threshold)
