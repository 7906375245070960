"""Simulated m-party semi-honest boolean MPC over XOR secret sharing.

One :class:`Engine` owns the full execution context for a protocol run: the
per-party random tapes, the trusted dealer's triple stream, the sharing
randomness, and a :class:`CostLedger` with exact gate counters.  Secret bits
are stored share-wise in uint8 arrays of shape ``(m, *batch)`` so that a
single gate call evaluates arbitrarily many independent gate instances; the
ledger counts scalar instances, which keeps every counter a pure function of
the circuit shape and hence independent of inputs and seed.

A second mode (``clear=True``) evaluates the same circuits directly on
plaintext bits while consuming the party tapes in exactly the same order and
maintaining identical counters.  Running a circuit under both modes with the
same seed is the oracle-equivalence check used throughout the test suite:
reconstruction of the secure run must match the clear run bit for bit.

Multiplication uses dealer-supplied Beaver triples (one per AND); XOR, NOT
and multiplication by public constants are local and free of AND gates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, ShapeError, TapeError

_TAPE_PARTY = 0
_TAPE_DEALER = 1
_TAPE_SHARING = 2
_TAPE_LOCAL = 3

_POOL_BITS = 1 << 16


def default_byte_model(and_gates, input_random_bits, parties):
    """Modeled communication: 2m bits per AND plus the party-input bits."""
    return (2 * parties * and_gates + parties * input_random_bits) / 8.0


@dataclass
class CostLedger:
    """Exact cost counters for one protocol run."""

    parties: int
    and_gates: int = 0
    xor_gates: int = 0
    and_depth: int = 0
    input_random_bits: int = 0
    triples_consumed: int = 0

    def snapshot(self):
        return {
            "parties": self.parties,
            "and_gates": self.and_gates,
            "xor_gates": self.xor_gates,
            "and_depth": self.and_depth,
            "input_random_bits": self.input_random_bits,
            "triples_consumed": self.triples_consumed,
        }

    def modeled_bytes(self, model=default_byte_model):
        return model(self.and_gates, self.input_random_bits, self.parties)


class RandomTape:
    """A stream of uniform bits, either seeded (infinite) or replayed (finite).

    Replay mode raises :class:`TapeError` on exhaustion; it exists so tests
    can enumerate tape spaces exhaustively.
    """

    def __init__(self, seed=None, bits=None):
        if bits is not None:
            self._fixed = np.asarray(bits, dtype=np.uint8)
            self._pos = 0
            self._gen = None
        else:
            self._gen = np.random.Generator(np.random.PCG64(seed))
            self._fixed = None
            self._pool = np.empty(0, dtype=np.uint8)
            self._pool_pos = 0

    def take(self, count):
        """Return the next `count` bits as a flat uint8 array."""
        if self._fixed is not None:
            if self._pos + count > self._fixed.size:
                raise TapeError(
                    f"replay tape exhausted: need {count}, have "
                    f"{self._fixed.size - self._pos}"
                )
            out = self._fixed[self._pos:self._pos + count]
            self._pos += count
            return out
        if count > self._pool.size - self._pool_pos:
            need = max(count, _POOL_BITS)
            fresh = np.unpackbits(self._gen.integers(0, 256, (need + 7) // 8, dtype=np.uint8))
            leftover = self._pool[self._pool_pos:]
            self._pool = np.concatenate([leftover, fresh])
            self._pool_pos = 0
        out = self._pool[self._pool_pos:self._pool_pos + count]
        self._pool_pos += count
        return out


class SecretBit:
    """An XOR-shared bit (or batch of bits) bound to one engine."""

    __slots__ = ("engine", "shares", "depth")

    def __init__(self, engine, shares, depth=0):
        self.engine = engine
        self.shares = shares
        self.depth = depth

    @property
    def shape(self):
        return self.shares.shape[1:]

    def __invert__(self):
        return self.engine.not_(self)

    def __xor__(self, other):
        return self.engine.xor(self, other)

    def __and__(self, other):
        return self.engine.and_(self, other)


class SecretWord:
    """A little-endian two's-complement vector of secret bits of one width."""

    __slots__ = ("engine", "bits")

    def __init__(self, engine, bits):
        self.engine = engine
        self.bits = list(bits)

    @property
    def width(self):
        return len(self.bits)

    @property
    def shape(self):
        return self.bits[0].shape if self.bits else ()

    def stacked(self):
        """Shares stacked along a leading width axis, shape (m, w, *batch)."""
        return np.stack([b.shares for b in self.bits], axis=1)


def _expand(shares, batch_shape):
    """Align a share array's batch part to `batch_shape` (numpy broadcast,
    with missing axes inserted after the leading share axis)."""
    cur = shares.shape[1:]
    if cur == batch_shape:
        return shares
    pad = (1,) * (len(batch_shape) - len(cur))
    return np.broadcast_to(shares.reshape(shares.shape[:1] + pad + cur),
                           shares.shape[:1] + batch_shape)


class Engine:
    """m-party boolean circuit simulator with exact accounting.

    All gates accept batched operands; batch shapes broadcast like numpy.
    ``clear=True`` switches to direct plaintext evaluation with identical
    tape consumption and counters.
    """

    def __init__(self, parties, seed=0, clear=False, party_tapes=None,
                 sharing_tape=None, dealer_tape=None):
        if parties < 2:
            raise ConfigError(f"need at least 2 parties, got {parties}")
        self.m = parties
        self.seed = seed
        self.clear = clear
        self.ledger = CostLedger(parties=parties)
        self._store = 1 if clear else parties
        if party_tapes is None:
            party_tapes = [
                RandomTape(np.random.SeedSequence([seed, _TAPE_PARTY, i]))
                for i in range(parties)
            ]
        elif len(party_tapes) != parties:
            raise ConfigError("party_tapes length must equal parties")
        self.party_tapes = party_tapes
        self.sharing_tape = sharing_tape or RandomTape(
            np.random.SeedSequence([seed, _TAPE_SHARING]))
        self.dealer_tape = dealer_tape or RandomTape(
            np.random.SeedSequence([seed, _TAPE_DEALER]))
        self._local_gens = {}

    # ------------------------------------------------------------------
    # randomness sources

    def party_generator(self, party):
        """Per-party numpy Generator for local value-level sampling (DNG)."""
        if party not in self._local_gens:
            self._local_gens[party] = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([self.seed, _TAPE_LOCAL, party])))
        return self._local_gens[party]

    def _tape_bits(self, tape, shape):
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return tape.take(n).reshape(shape)

    # ------------------------------------------------------------------
    # sharing and reconstruction

    def const_bit(self, value, shape=()):
        """Public constant embedded as a degenerate sharing (party 0 holds it)."""
        arr = np.broadcast_to(np.asarray(value, dtype=np.uint8), shape)
        shares = np.zeros((self._store,) + arr.shape, dtype=np.uint8)
        shares[0] = arr
        return SecretBit(self, shares)

    def share_bit(self, value):
        """Share a clear bit (or array of bits). No gate counters change."""
        arr = np.asarray(value, dtype=np.uint8)
        if self.clear:
            return SecretBit(self, arr[np.newaxis, ...].copy())
        shares = np.empty((self.m,) + arr.shape, dtype=np.uint8)
        acc = np.zeros(arr.shape, dtype=np.uint8)
        for i in range(self.m - 1):
            shares[i] = self._tape_bits(self.sharing_tape, arr.shape)
            acc ^= shares[i]
        shares[self.m - 1] = acc ^ arr
        return SecretBit(self, shares)

    def share_word(self, value, width):
        """Share clear signed integers as two's-complement words."""
        vals = np.asarray(value)
        lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
        if np.any(vals < lo) or np.any(vals > hi):
            raise RangeError(f"value out of range for width {width}")
        bits = [(vals >> i) & 1 for i in range(width)]
        return SecretWord(self, [self.share_bit(b) for b in bits])

    def reconstruct_bit(self, bit):
        self._check(bit)
        out = bit.shares[0].copy()
        for i in range(1, bit.shares.shape[0]):
            out ^= bit.shares[i]
        return out

    def reconstruct_word(self, word):
        """Reconstruct to signed integers (python ints when width > 62)."""
        w = word.width
        planes = [self.reconstruct_bit(b) for b in word.bits]
        if w <= 62:
            out = np.zeros(np.broadcast_shapes(*[p.shape for p in planes]), dtype=np.int64)
            for i, p in enumerate(planes):
                out = out + (p.astype(np.int64) << i)
            out = out - ((planes[-1].astype(np.int64)) << w)
            return out
        flat = np.broadcast_arrays(*planes)
        out = np.zeros(flat[0].shape, dtype=object)
        for i, p in enumerate(flat):
            out = out + (p.astype(object) * (1 << i))
        out = out - flat[-1].astype(object) * (1 << w)
        return out

    # ------------------------------------------------------------------
    # inputs

    def urbit(self, shape=()):
        """XOR-shared uniform bit: one tape bit from every party.

        The party contributions are the shares themselves, so the output is
        uniform as long as a single party's tape is uniform.
        """
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        contribs = [self._tape_bits(t, shape) for t in self.party_tapes]
        self.ledger.input_random_bits += self.m * n
        if self.clear:
            acc = contribs[0].copy()
            for c in contribs[1:]:
                acc ^= c
            return SecretBit(self, acc[np.newaxis, ...])
        return SecretBit(self, np.stack(contribs, axis=0))

    def input_secret_word(self, party, value, width):
        """A party-private signed word; counts width bits of party randomness."""
        if not 0 <= party < self.m:
            raise ConfigError(f"party index {party} out of range")
        vals = np.asarray(value)
        lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
        if np.any(vals < lo) or np.any(vals > hi):
            raise RangeError(f"input does not fit width {width}")
        n = int(np.prod(vals.shape, dtype=np.int64)) if vals.shape else 1
        word = self.share_word(vals, width)
        self.ledger.input_random_bits += width * n
        return word

    # ------------------------------------------------------------------
    # gates

    def _check(self, *bits):
        for b in bits:
            if b.engine is not self:
                raise ShapeError("operands belong to different engines/ledgers")

    def xor(self, a, b):
        self._check(a, b)
        tgt = np.broadcast_shapes(a.shape, b.shape)
        shares = _expand(a.shares, tgt) ^ _expand(b.shares, tgt)
        self.ledger.xor_gates += int(np.prod(tgt, dtype=np.int64)) if tgt else 1
        return SecretBit(self, shares, max(a.depth, b.depth))

    def xor_const(self, a, const):
        """XOR with a public bit pattern: flips party 0's share, free."""
        self._check(a)
        arr = np.asarray(const, dtype=np.uint8)
        tgt = np.broadcast_shapes(a.shape, arr.shape)
        shares = _expand(a.shares, tgt).copy()
        shares[0] ^= arr
        return SecretBit(self, shares, a.depth)

    def not_(self, a):
        return self.xor_const(a, 1)

    def and_const(self, a, const):
        """Multiply by a public bit pattern: zeroes shares locally, free."""
        self._check(a)
        arr = np.asarray(const, dtype=np.uint8)
        tgt = np.broadcast_shapes(a.shape, arr.shape)
        return SecretBit(self, _expand(a.shares, tgt) & arr, a.depth)

    def and_(self, a, b):
        """Beaver-triple AND; one triple and one AND gate per instance."""
        self._check(a, b)
        tgt = np.broadcast_shapes(a.shape, b.shape)
        count = int(np.prod(tgt, dtype=np.int64)) if tgt else 1
        depth = max(a.depth, b.depth) + 1
        self.ledger.and_gates += count
        self.ledger.triples_consumed += count
        self.ledger.and_depth = max(self.ledger.and_depth, depth)
        if self.clear:
            return SecretBit(self, _expand(a.shares, tgt) & _expand(b.shares, tgt), depth)
        m = self.m
        ash = _expand(a.shares, tgt)
        bsh = _expand(b.shares, tgt)
        raw = self.dealer_tape.take((3 * m - 1) * count).reshape(3 * m - 1, count)
        ta = raw[0:m].reshape((m,) + tgt)
        tb = raw[m:2 * m].reshape((m,) + tgt)
        tc = np.empty((m,) + tgt, dtype=np.uint8)
        tc[:m - 1] = raw[2 * m:3 * m - 1].reshape((m - 1,) + tgt)
        a_pl = np.bitwise_xor.reduce(ta, axis=0)
        b_pl = np.bitwise_xor.reduce(tb, axis=0)
        c_pl = a_pl & b_pl
        tc[m - 1] = np.bitwise_xor.reduce(tc[:m - 1], axis=0) ^ c_pl
        d = np.bitwise_xor.reduce(ash ^ ta, axis=0)
        e = np.bitwise_xor.reduce(bsh ^ tb, axis=0)
        z = tc ^ (d & tb) ^ (e & ta)
        z[0] ^= d & e
        return SecretBit(self, z, depth)

    def mux(self, c, a, b):
        """c ? a : b on bits, costing one AND per instance."""
        d = self.xor(a, b)
        return self.xor(b, self.and_(c, d))

    def mux_const(self, c, const_a, b):
        """c ? public : b — still one AND per instance."""
        d = self.xor_const(b, const_a)
        return self.xor(b, self.and_(c, d))

    def xor_reduce(self, bit, axis):
        """XOR-fold one batch axis (share-wise, no AND gates)."""
        self._check(bit)
        shares = np.bitwise_xor.reduce(bit.shares, axis=axis + 1)
        n = int(np.prod(shares.shape[1:], dtype=np.int64)) if shares.shape[1:] else 1
        self.ledger.xor_gates += n * max(bit.shares.shape[axis + 1] - 1, 0)
        return SecretBit(self, shares, bit.depth)

    # ------------------------------------------------------------------
    # batched helpers

    def stack_bits(self, bits, axis=0):
        """Stack equally-shaped secret bits along a new batch axis."""
        self._check(*bits)
        shares = np.stack([b.shares for b in bits], axis=axis + 1)
        return SecretBit(self, shares, max(b.depth for b in bits))

    def unstack_bits(self, bit, axis=0):
        n = bit.shares.shape[axis + 1]
        return [SecretBit(self, np.take(bit.shares, i, axis=axis + 1), bit.depth)
                for i in range(n)]

    def take(self, bit, index, axis=0):
        """Select along a batch axis with a public index (free)."""
        return SecretBit(self, np.take(bit.shares, index, axis=axis + 1), bit.depth)
