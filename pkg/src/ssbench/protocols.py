"""The eight end-to-end noise-sampling protocols.

Each protocol maps a derived ProtocolParams to n secret-shared integer
samples in (-N, N) plus the ledger of exact costs.  The discrete-Laplace
family assembles samples from a zero-indicator coin, a uniform sign bit and
a bitwise geometric magnitude (bit i biased 1/(1+e^(2^i/t))); the Gaussian
family rejection-samples those Laplace variates with a bitwise-sampled
acceptance coin and compacts the survivors obliviously.  The distributed
generation protocols let each party input one clipped kappa-bit partial per
sample and aggregate with adders, optionally followed by the in-circuit
distribution check.

Coin sources: "odo" scans full expansions; "ostack" runs the stack-based
lazy scan ostack_sample; "periodic" is the snapped-epsilon variant whose
bias-bit source costs no AND gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import dp, gadgets as gd, kscheck
from .coins import BiasSpec, _popcount, odo_coin_bits, ostack_sample
from .engine import Engine, SecretBit, SecretWord
from .errors import AbortRejection, CheckRejected, ConfigError
from .params import (GAUSSIAN_PROTOCOLS, PROTOCOLS, ProtocolParams, allocate,
                     tail_run)

CHECK_ALPHA = 0.05


@dataclass
class SampleBatch:
    """Reconstructed samples plus the run's exact cost snapshot."""

    samples: np.ndarray
    protocol: str
    params: ProtocolParams
    ledger: dict
    modeled_bytes: float
    check_flag: bool = None
    retries: int = 0


# ----------------------------------------------------------------------
# bias derivation


def zero_coin_bias(t, N, l):
    """f(0) of the truncated discrete Laplace on (-N, N): 1 / Z_N."""
    with mpmath.workprec(l + 64):
        q = mpmath.e ** (-1 / mpmath.mpf(t))
        Z = 1 + 2 * (q - q ** N) / (1 - q)
        return BiasSpec.from_value(1 / Z, l)


def geometric_biases(t, kappa, l):
    """Per-bit biases 1/(1 + e^(2^i / t)) of the geometric magnitude."""
    out = []
    with mpmath.workprec(l + 64):
        for i in range(kappa):
            out.append(BiasSpec.from_value(1 / (1 + mpmath.e ** (2 ** i / mpmath.mpf(t))), l))
    return out


def rejection_rate_and_u(params):
    """(r, c) of the acceptance probability exp(-(|x|-c_off)^2 / r) rewritten
    with an integer deviation: sigma >= 1 uses d = |x| - round(sigma),
    r = 2 sigma^2; sigma < 1 uses d = q|x| - 1, r = 2 sigma^2 q^2."""
    sigma = params.sigma
    if sigma >= 1:
        return 2 * sigma * sigma, round(sigma), 1
    q = math.ceil(1 / sigma)
    return 2 * sigma * sigma * q * q, 1, q


def exp_biases(params, l):
    """Biases B(e^(-2^i / r)) for the acceptance-coin bit positions."""
    r, _, _ = rejection_rate_and_u(params)
    out = []
    with mpmath.workprec(l + 64):
        for i in range(params.reject_coin_count):
            out.append(BiasSpec.from_value(mpmath.e ** (-(mpmath.mpf(2) ** i) / r), l))
    return out


def _bias_matrix(biases, l):
    """Public expansion matrix (l, S, 1) for batched multi-stream scanning."""
    arr = np.array([b.bits for b in biases], dtype=np.uint8)  # (S, l)
    return np.moveaxis(arr, 1, 0)[:, :, None]


# ----------------------------------------------------------------------
# coin supply


def coin_matrix(engine, biases, n_coins, source, params):
    """Coins for each bias stream: stacked SecretBit (S, n_coins).

    odo: one batched expansion scan over all streams and coins.
    ostack / periodic: per-stream lazy-scan runs of capacity g plus a
    right-sized tail run; the first n_coins of each stream are used.
    """
    S = len(biases)
    l = biases[0].l
    if source == "odo":
        bits = _bias_matrix(biases, l)  # (l, S, 1)
        return odo_coin_bits(engine, bits, (S, n_coins))
    g, u = params.g, params.u
    full_runs = n_coins // g
    tail = tail_run(params)
    exp = np.array([b.bits for b in biases], dtype=np.uint8)[:, None, :]  # (S,1,l)
    pieces = []
    if full_runs:
        coins, _ = ostack_sample(engine, g, u, exp, shape=(S, full_runs),
                                 periodic=(source == "periodic"))
        # (g, S, runs) -> (S, runs*g)
        arr = np.moveaxis(coins.shares, 1, -1)   # (m, S, runs, g)
        arr = arr.reshape(arr.shape[:2] + (-1,))
        pieces.append(arr)
    if tail is not None and full_runs * g < n_coins:
        g_tail, u_tail = tail
        coins_t, _ = ostack_sample(engine, g_tail, u_tail, exp[:, 0, :],
                                   shape=(S,), periodic=(source == "periodic"))
        arr = np.moveaxis(coins_t.shares, 1, -1)  # (m, S, g_tail)
        pieces.append(arr)
    flat = np.concatenate(pieces, axis=-1) if len(pieces) > 1 else pieces[0]
    return SecretBit(engine, flat[..., :n_coins])


# ----------------------------------------------------------------------
# discrete Laplace assembly


def laplace_words(engine, params, source, n_samples):
    """n truncated discrete-Laplace samples as signed (kappa+2)-bit words."""
    p = params
    l = p.l
    biases = geometric_biases(p.t, p.kappa, l)
    zero_bias = zero_coin_bias(p.t, p.N, l)
    # zero-indicator coin is always expansion-scanned; the stack runs cover
    # exactly the kappa geometric streams the delta_p accounting counts
    zcoin = odo_coin_bits(engine, np.array(zero_bias.bits, dtype=np.uint8)[:, None],
                          (n_samples,))
    sign = engine.urbit((n_samples,))
    geom = coin_matrix(engine, biases, n_samples, source, p)
    gbits = engine.unstack_bits(geom)           # kappa bits, each (n,)
    gword = SecretWord(engine, gbits + [engine.const_bit(0, (n_samples,))])
    mag = gd.add_const(gword, 1)                # magnitude in [1, 2^kappa]
    ext = gd.zero_extend(mag, p.kappa + 2)
    signed = gd.mux_word(sign, gd.neg(ext), ext)
    zero_word = gd.const_word(engine, 0, p.kappa + 2, (n_samples,))
    word = gd.mux_word(zcoin, zero_word, signed)
    absx = gd.mux_word(zcoin, gd.const_word(engine, 0, mag.width, (n_samples,)), mag)
    return word, absx


def bern_exp(engine, u_word, biases, source, params, n):
    """Acceptance coin B(e^(-u/r)): AND the per-set-bit coins of u."""
    coins = coin_matrix(engine, biases, n, source, params)
    cbits = engine.unstack_bits(coins)
    factors = []
    for i, ub in enumerate(u_word.bits[:len(cbits)]):
        # u_i ? coin_i : 1  ==  not(u_i & not coin_i)
        factors.append(engine.not_(engine.and_(ub, engine.not_(cbits[i]))))
    acc = factors[0]
    for f in factors[1:]:
        acc = engine.and_(acc, f)
    return acc


def _mul_small_const(word, q, out_width):
    """word * small public q via shift-adds."""
    eng = word.engine
    acc = None
    for s in range(q.bit_length()):
        if (q >> s) & 1:
            shifted = SecretWord(eng, [eng.const_bit(0, word.shape)] * s +
                                 word.bits[:out_width - s])
            shifted = gd.zero_extend(shifted, out_width)
            acc = shifted if acc is None else gd.add(acc, shifted)
    return acc if acc is not None else gd.const_word(eng, 0, out_width, word.shape)


def gaussian_words(engine, params, source):
    """Rejection-sample n' Laplace trials into n discrete-Gaussian words."""
    p = params
    n_pr = p.n_prime
    word, absx = laplace_words(engine, p, source, n_pr)
    r, c_off, q = rejection_rate_and_u(p)
    if q == 1:
        wd = max(absx.width, int(c_off).bit_length() + 1) + 1
        d = gd.sub(gd.zero_extend(absx, wd), gd.const_word(engine, c_off, wd, (n_pr,)))
    else:
        wn = absx.width + q.bit_length() + 1
        scaled = _mul_small_const(absx, q, wn)
        d = gd.add_const(scaled, -1)
    u_word = gd.square(gd.abs_(d), out_width=p.reject_coin_count)
    accept = bern_exp(engine, u_word, exp_biases(p, p.l), source, p, n_pr)
    # oblivious compaction: stable-ish 1-bit-key sort, accepted first
    key = SecretWord(engine, [engine.not_(accept), engine.const_bit(0, (n_pr,))])
    _, compacted = gd.oblivious_sort(key, word)
    taken = SecretWord(engine, [engine.take(b, np.arange(p.n), axis=0)
                                for b in compacted.bits])
    cnt = _popcount(engine, engine.unstack_bits(accept))
    enough = gd.ge_const(cnt, p.n)
    if not np.all(engine.reconstruct_bit(enough)):
        raise AbortRejection("fewer than n trials accepted")
    return taken


# ----------------------------------------------------------------------
# distributed noise generation


def _dng_partials(engine, params, target):
    """Per-party local partials, clipped into the kappa-bit input range."""
    p = params
    clip = (1 << (p.kappa - 1)) - 1
    partials = []
    for party in range(p.m):
        rng = engine.party_generator(party)
        if target == "dlaplace":
            qq = math.exp(-p.Delta / p.epsilon)
            y1 = rng.negative_binomial(1.0 / p.m, 1 - qq, p.n)
            y2 = rng.negative_binomial(1.0 / p.m, 1 - qq, p.n)
            vals = y1.astype(np.int64) - y2.astype(np.int64)
        else:
            s2 = p.sigma ** 2 / ((1.0 - p.collusion_fraction) * p.m) \
                if p.collusion_fraction else p.sigma ** 2 / p.m
            vals = dp.sample_dgaussian(rng, s2, size=(p.n,))
        partials.append(np.clip(vals, -clip, clip))
    return partials


def dng_words(engine, params, target):
    p = params
    width = p.kappa + max(1, (p.m - 1).bit_length()) + 1
    acc = None
    for party, vals in enumerate(_dng_partials(engine, params, target)):
        w = engine.input_secret_word(party, vals, p.kappa)
        w = gd.sign_extend(w, width)
        acc = w if acc is None else gd.add(acc, w)
    return gd.clamp(acc, 1 << p.kappa)


def dng_check(engine, params, words, target, alpha=CHECK_ALPHA, constant="paper"):
    p = params
    if target == "dlaplace":
        dist = dp.DistSpec("tdlaplace", (p.t, p.N))
    else:
        dist = dp.DistSpec("tdgaussian", (p.sigma ** 2, p.N))
    table = kscheck.build_table(dist, p.n, p.N, alpha, constant)
    flag = kscheck.check(words, table)
    return bool(engine.reconstruct_bit(flag))


# ----------------------------------------------------------------------
# uniform transformation


def trans_laplace_words(engine, params):
    """Inverse-CDF sampling: magnitude round(-t ln u) from a fixed-point u."""
    p = params
    l = p.l
    n = p.n
    ubits = [engine.urbit((n,)) for _ in range(l)]
    uword = SecretWord(engine, ubits + [engine.const_bit(0, (n,)),
                                        engine.const_bit(0, (n,))])
    uword = gd.add_const(uword, 1)          # u = (k+1)/2^l in (0, 1]
    lnu = gd.fix_ln(gd.FixedPoint(uword, l))
    # scale constant t quantized at l fraction bits; product has 2l fraction
    t_fixed = round(p.t * (1 << l))
    out_w = lnu.word.width + t_fixed.bit_length() + 2
    mag_fp = _mul_small_const(gd.neg(lnu.word), t_fixed, out_w)
    frac = 2 * l
    rounded = gd.add_const(mag_fp, 1 << (frac - 1))  # round half away from zero
    mag = SecretWord(engine, rounded.bits[frac:frac + p.kappa + 2])
    mag = gd.clamp(mag, 1 << p.kappa)
    sign = engine.urbit((n,))
    return gd.mux_word(sign, gd.neg(mag), mag)


# ----------------------------------------------------------------------
# dispatch


def run_protocol(protocol, params, seed=0, clear=False, with_check=True,
                 raise_on_check=False, check_constant="paper"):
    """Execute one protocol end to end; returns a SampleBatch."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    p = params
    engine = Engine(p.m, seed=seed, clear=clear)
    flag = None
    if protocol == "odo-laplace":
        words, _ = laplace_words(engine, p, "odo", p.n)
    elif protocol == "ostack-laplace":
        words, _ = laplace_words(engine, p, "ostack", p.n)
    elif protocol == "ostack-laplace-star":
        words, _ = laplace_words(engine, p, "periodic", p.n)
    elif protocol == "trans-laplace":
        words = trans_laplace_words(engine, p)
    elif protocol == "odo-gaussian":
        words = gaussian_words(engine, p, "odo")
    elif protocol == "ostack-gaussian":
        words = gaussian_words(engine, p, "ostack")
    elif protocol == "dng-laplace":
        words = dng_words(engine, p, "dlaplace")
        if with_check:
            flag = dng_check(engine, p, words, "dlaplace", constant=check_constant)
    else:
        words = dng_words(engine, p, "dgaussian")
        if with_check:
            flag = dng_check(engine, p, words, "dgaussian", constant=check_constant)
    samples = engine.reconstruct_word(words)
    if flag and raise_on_check:
        raise CheckRejected("distribution check flagged the aggregated noise")
    return SampleBatch(
        samples=np.asarray(samples), protocol=protocol, params=p,
        ledger=engine.ledger.snapshot(),
        modeled_bytes=engine.ledger.modeled_bytes(), check_flag=flag,
    )
