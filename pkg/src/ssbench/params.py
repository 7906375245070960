"""Statistical-distance budget allocation for the sampling protocols.

The total tolerated sampling distance 2^-lambda is split equally over a
protocol's non-zero distance terms (truncation, bias representation,
rejection failure, stack underfill) and each term's formula is inverted for
the smallest circuit parameter that fits its share.  All 2^-lambda-scale
comparisons run in mpmath log-space at >= lambda + 80 bits; the equal-split
allocations themselves are exact rationals.

Inversions are integer searches on the monotone formulas, never closed-form
logarithms, so the chosen integers sit exactly at the boundary the verifier
re-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath
import numpy as np

from .dp import sigma_to_t
from .errors import BudgetError, ConfigError

PROTOCOLS = (
    "odo-laplace", "ostack-laplace", "ostack-laplace-star", "dng-laplace",
    "trans-laplace", "odo-gaussian", "ostack-gaussian", "dng-gaussian",
)

LAPLACE_PROTOCOLS = ("odo-laplace", "ostack-laplace", "ostack-laplace-star",
                     "dng-laplace", "trans-laplace")
GAUSSIAN_PROTOCOLS = ("odo-gaussian", "ostack-gaussian", "dng-gaussian")

# non-zero statistical-distance terms per protocol
TERMS = {
    "odo-laplace": ("t", "b"),
    "ostack-laplace": ("t", "b", "p"),
    "ostack-laplace-star": ("t", "b", "p"),
    "dng-laplace": ("t",),
    "trans-laplace": ("t", "b"),
    "odo-gaussian": ("t", "b", "r"),
    "ostack-gaussian": ("t", "b", "r", "p"),
    "dng-gaussian": ("t",),
}

KAPPA_CAP = 96
L_CAP = 4096
G_CANDIDATES = tuple(1 << k for k in range(3, 11))  # 8 .. 1024


def gaussian_sigma(epsilon, delta, Delta=1.0):
    """Classic Gaussian-mechanism calibration sigma = Delta sqrt(2 ln(1.25/delta))/eps."""
    if not 0 < epsilon < 1:
        raise ConfigError(f"classic Gaussian bound needs epsilon in (0,1), got {epsilon}")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must be in (0,1), got {delta}")
    return Delta * math.sqrt(2 * math.log(1.25 / delta)) / epsilon


def snap_epsilon(epsilon):
    """Largest 2^-i * ln2 <= epsilon (the periodic-bias grid)."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    i = 0
    ln2 = math.log(2)
    while ln2 / (1 << i) > epsilon:
        i += 1
        if i > 200:
            raise ConfigError("epsilon too small to snap")
    return ln2 / (1 << i), i


@dataclass
class ProtocolParams:
    """Fully derived parameter set for one protocol instance."""

    protocol: str
    lam: int
    epsilon: float
    delta: float
    Delta: float
    n: int
    m: int
    kappa: int
    N: int
    t: float
    l: int
    budgets: dict                 # term -> exact Fraction share of 2^-lambda
    sigma: float = None
    n_prime: int = None
    g: int = None
    u: int = None
    reject_coin_count: int = None
    p_star: float = None
    p_star_eff: float = None
    snapped_epsilon: float = None
    snap_exponent: int = None
    collusion_fraction: float = 0.0

    @property
    def terms(self):
        return TERMS[self.protocol]

    @property
    def working_epsilon(self):
        return self.snapped_epsilon if self.snapped_epsilon is not None else self.epsilon

    def csv_fields(self):
        out = {
            "protocol": self.protocol, "lambda": self.lam, "epsilon": self.epsilon,
            "delta": self.delta, "Delta": self.Delta, "n": self.n, "m": self.m,
            "kappa": self.kappa, "N": self.N, "l": self.l, "t": self.t,
            "sigma": self.sigma, "n_prime": self.n_prime, "g": self.g, "u": self.u,
            "reject_coin_count": self.reject_coin_count,
            "snapped_epsilon": self.snapped_epsilon,
        }
        for term, frac in self.budgets.items():
            out[f"log2_delta_{term}_budget"] = float(
                math.log2(frac.numerator) - math.log2(frac.denominator))
        return out


# ----------------------------------------------------------------------
# log-space term formulas (natural log of each Table row)


def _log_dt_laplace(n, eps, Delta, N):
    return (mpmath.ln(2 * n) - mpmath.mpf(eps) * (N - 1) / Delta
            - mpmath.ln(mpmath.e ** (mpmath.mpf(eps) / Delta) + 1))


def _log_dt_gaussian(n, sigma, N):
    return mpmath.ln(2 * n) - mpmath.mpf(N) ** 2 / (2 * mpmath.mpf(sigma) ** 2)


def _log_db_bitwise(n, kappa, l):
    return mpmath.ln(n * (kappa + 1)) - l * mpmath.ln(2)


def _log_db_trans(n, l):
    return mpmath.ln(n) - l * mpmath.ln(2)


def _log_db_gaussian(n, kappa, reject_coins, p_star, l):
    return (mpmath.ln(mpmath.mpf(n) / p_star * (2 * kappa + reject_coins + 2))
            - l * mpmath.ln(2))


def _log_dr(n, n_prime, p_eff):
    gap = mpmath.mpf(n_prime) * p_eff - n
    if gap <= 0:
        return mpmath.mpf(0)  # log(1): certain failure bound
    return -2 * gap ** 2 / n_prime


def _log_dp(M, u, g):
    slack = mpmath.mpf(u) / 2 - (g - 1)
    if slack <= 0:
        return mpmath.ln(M)
    return mpmath.ln(M) - 2 * slack ** 2 / u


def p_star_exact(sigma, N):
    """Acceptance constant from the exact truncated pmf ratio."""
    t = sigma_to_t(sigma)
    xs = np.arange(-(N - 1), N, dtype=float)
    J = np.exp(-(xs ** 2) / (2 * sigma * sigma)).sum()
    I = np.exp(-np.abs(xs) / t).sum()
    return float(J / I * math.exp(-sigma * sigma / (2 * t * t)))


def reject_coin_count(kappa, sigma):
    """Bit length of the squared deviation fed to the acceptance coin."""
    mag_max = 1 << kappa
    if sigma >= 1:
        c = round(sigma)
        umax = max((mag_max - c) ** 2, c * c)
    else:
        q = math.ceil(1 / sigma)
        umax = (q * mag_max - 1) ** 2
    return max(1, umax.bit_length())


# ----------------------------------------------------------------------


def _search_min_int(pred, lo, hi, what):
    """Smallest integer in [lo, hi] satisfying monotone pred, else ConfigError."""
    if not pred(hi):
        raise ConfigError(f"no feasible {what} up to {hi}")
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _solve_push_budget(log_budget_p, M, g):
    """Smallest even u with M * exp(-2(u/2-(g-1))^2/u) within budget."""
    half = _search_min_int(lambda vv: _log_dp(M, 2 * vv, g) <= log_budget_p,
                           g, 1 << 40, "u")
    return 2 * half


def tail_run(params):
    """(g_tail, u_tail) for the right-sized final stack run, or None.

    The last run of a coin stream only needs the remaining coins; its push
    budget is solved against the same per-run share of delta_p, so the Table
    allocation is unchanged while the iteration count drops.
    """
    p = params
    if p.g is None:
        return None
    coins_needed = p.n_prime if p.protocol == "ostack-gaussian" else p.n
    runs = -(-coins_needed // p.g)
    g_tail = coins_needed - (runs - 1) * p.g
    if g_tail == p.g:
        return None
    streams = (p.kappa + p.reject_coin_count if p.protocol == "ostack-gaussian"
               else p.kappa)
    M = streams * runs
    budget = p.budgets["p"]
    with mpmath.workprec(p.lam + 80):
        log_budget = mpmath.ln(budget.numerator) - mpmath.ln(budget.denominator)
        u_tail = _solve_push_budget(log_budget, M, g_tail)
    return g_tail, u_tail


def allocate(protocol, lam, epsilon, delta=1e-5, Delta=1.0, n=1, m=3,
             collusion_fraction=0.0):
    """Derive all circuit parameters for one protocol instance."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if lam < 1 or epsilon <= 0 or n < 1:
        raise ConfigError("need lambda >= 1, epsilon > 0, n >= 1")
    if m < 2:
        raise ConfigError("need at least 2 computing parties")
    terms = TERMS[protocol]
    k = len(terms)
    budgets = {term: Fraction(1, k * (1 << lam)) for term in terms}
    log_budget = {term: -mpmath.mpf(lam) * mpmath.ln(2) - mpmath.ln(k) for term in terms}

    with mpmath.workprec(lam + 80):
        snapped = snap_i = None
        sigma = None
        if protocol == "ostack-laplace-star":
            snapped, snap_i = snap_epsilon(epsilon)
            eps_w = snapped
        else:
            eps_w = epsilon

        if protocol in GAUSSIAN_PROTOCOLS:
            sigma = gaussian_sigma(epsilon, delta, Delta)
            t = sigma_to_t(sigma)
            floor_pow = max(2 * round(sigma) if sigma >= 1 else 2, 2)
            kappa = _search_min_int(
                lambda kk: (1 << kk) >= floor_pow and
                _log_dt_gaussian(n, sigma, (1 << kk) + 1) <= log_budget["t"],
                1, KAPPA_CAP, "kappa")
        else:
            t = Delta / eps_w
            kappa = _search_min_int(
                lambda kk: _log_dt_laplace(n, eps_w, Delta, (1 << kk) + 1) <= log_budget["t"],
                1, KAPPA_CAP, "kappa")
        N = (1 << kappa) + 1

        l = None
        rc = None
        p_star = None
        if protocol in ("odo-laplace", "ostack-laplace", "ostack-laplace-star"):
            l = _search_min_int(lambda ll: _log_db_bitwise(n, kappa, ll) <= log_budget["b"],
                                1, L_CAP, "l")
        elif protocol == "trans-laplace":
            l = _search_min_int(lambda ll: _log_db_trans(n, ll) <= log_budget["b"],
                                1, L_CAP, "l")
        elif protocol in ("odo-gaussian", "ostack-gaussian"):
            rc = reject_coin_count(kappa, sigma)
            p_star = p_star_exact(sigma, N)
            l = _search_min_int(
                lambda ll: _log_db_gaussian(n, kappa, rc, p_star, ll) <= log_budget["b"],
                1, L_CAP, "l")

        n_prime = None
        p_eff = None
        if protocol in ("odo-gaussian", "ostack-gaussian"):
            p_eff = float(mpmath.mpf(p_star) - (2 * kappa + rc + 2) * mpmath.mpf(2) ** (-l))
            if p_eff <= 0:
                raise ConfigError("bias slack exceeds the acceptance rate")
            lo = int(n / p_eff) + 1
            n_prime = _search_min_int(
                lambda nn: _log_dr(n, nn, mpmath.mpf(p_eff)) <= log_budget["r"],
                lo, max(64 * lo, 1024), "n_prime")

        g = u = None
        if protocol in ("ostack-laplace", "ostack-laplace-star", "ostack-gaussian"):
            coins_needed = n_prime if protocol == "ostack-gaussian" else n
            streams = kappa + rc if protocol == "ostack-gaussian" else kappa
            best = None
            for cand in G_CANDIDATES:
                runs = -(-coins_needed // cand)
                M = streams * runs
                try:
                    uu = _solve_push_budget(log_budget["p"], M, cand)
                except ConfigError:
                    continue
                # a right-sized final run lowers the true iteration count
                tail = coins_needed - (runs - 1) * cand
                u_tail = _solve_push_budget(log_budget["p"], M, tail) if tail < cand else uu
                total_iters = (runs - 1) * uu + u_tail
                if best is None or total_iters < best[0]:
                    best = (total_iters, cand, uu)
            if best is None:
                raise ConfigError("no feasible (g, u) pair")
            _, g, u = best

    return ProtocolParams(
        protocol=protocol, lam=lam, epsilon=epsilon, delta=delta, Delta=Delta,
        n=n, m=m, kappa=kappa, N=N, t=float(t), l=l if l is not None else 0,
        budgets=budgets, sigma=sigma, n_prime=n_prime, g=g, u=u,
        reject_coin_count=rc, p_star=p_star, p_star_eff=p_eff,
        snapped_epsilon=snapped, snap_exponent=snap_i,
        collusion_fraction=collusion_fraction,
    )


@dataclass
class BudgetReport:
    ok: bool
    log2_terms: dict
    log2_delta_lambda: float
    log2_bound: float


def verify_budget(params):
    """Re-evaluate every non-zero term at the chosen integers.

    Raises BudgetError naming the first violated term; returns the achieved
    total distance report otherwise.
    """
    p = params
    with mpmath.workprec(p.lam + 80):
        ln2 = mpmath.ln(2)
        logs = {}
        for term in p.terms:
            if term == "t":
                if p.protocol in GAUSSIAN_PROTOCOLS:
                    logs["t"] = _log_dt_gaussian(p.n, p.sigma, p.N)
                else:
                    logs["t"] = _log_dt_laplace(p.n, p.working_epsilon, p.Delta, p.N)
            elif term == "b":
                if p.protocol == "trans-laplace":
                    logs["b"] = _log_db_trans(p.n, p.l)
                elif p.protocol in GAUSSIAN_PROTOCOLS:
                    logs["b"] = _log_db_gaussian(p.n, p.kappa, p.reject_coin_count,
                                                 p.p_star, p.l)
                else:
                    logs["b"] = _log_db_bitwise(p.n, p.kappa, p.l)
            elif term == "r":
                logs["r"] = _log_dr(p.n, p.n_prime, mpmath.mpf(p.p_star_eff))
            elif term == "p":
                coins_needed = p.n_prime if p.protocol == "ostack-gaussian" else p.n
                streams = (p.kappa + p.reject_coin_count
                           if p.protocol == "ostack-gaussian" else p.kappa)
                M = streams * -(-coins_needed // p.g)
                logs["p"] = _log_dp(M, p.u, p.g)
        for term, lg in logs.items():
            budget = p.budgets[term]
            log_budget = mpmath.ln(budget.numerator) - mpmath.ln(budget.denominator)
            if lg > log_budget + mpmath.mpf(2) ** (-40):
                raise BudgetError(term, f"delta_{term} exceeds its allocation: "
                                        f"log2 {float(lg / ln2):.3f} > "
                                        f"{float(log_budget / ln2):.3f}")
        total = mpmath.mpf(0)
        for lg in logs.values():
            total += mpmath.e ** lg
        factor = 2 * (mpmath.e ** mpmath.mpf(p.epsilon) + 1)
        achieved = factor * total
        bound = factor * mpmath.mpf(2) ** (-p.lam)
        if achieved > bound * (1 + mpmath.mpf(2) ** (-40)):
            raise BudgetError("lambda", "achieved delta_lambda exceeds the bound")
        return BudgetReport(
            ok=True,
            log2_terms={k: float(v / ln2) for k, v in logs.items()},
            log2_delta_lambda=float(mpmath.log(achieved, 2)) if achieved > 0 else -math.inf,
            log2_bound=float(mpmath.log(bound, 2)),
        )
