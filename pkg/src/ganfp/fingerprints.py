"""Bit-string fingerprints: sampling, matching, and the statistics that
make attribution defensible.

A fingerprint is a fixed-length vector of fair-coin bits.  Matching is
counted in agreeing bit positions; the chance level of any observed match
count is an exact upper-tail binomial probability.  Capacity planning
("how many distinct fingerprints can this bit length carry at a given
decoding accuracy") uses the same combinatorics plus a brute-force
max-pairwise-overlap scan over a large sampled bag.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "Fingerprint", "FingerprintSpace", "CapacityEstimate",
    "matching_bits", "hamming_distance", "matches", "default_threshold",
    "null_p_value", "null_p_value_exact", "capacity_estimate",
    "bottom_line_requirement", "fingerprint_digest",
    "pack_bit_matrix", "matching_bits_matrix",
]

STANDARD_LENGTHS = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class Fingerprint:
    """Immutable bit vector; bit i is ``(value >> i) & 1``."""

    value: int
    d_c: int

    def __post_init__(self):
        if self.d_c < 1:
            raise ValueError(f"fingerprint length must be >= 1, got {self.d_c}")
        if self.value < 0 or self.value >> self.d_c:
            raise ValueError("fingerprint value out of range for bit length")

    @classmethod
    def from_bits(cls, bits) -> "Fingerprint":
        bits = np.asarray(bits).reshape(-1)
        if bits.size == 0:
            raise ValueError("empty bit vector")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("bits must be 0 or 1")
        value = 0
        for i, b in enumerate(bits.tolist()):
            if b:
                value |= 1 << i
        return cls(value, int(bits.size))

    def bits(self) -> np.ndarray:
        """Unpacked bits, index 0 first, dtype uint8."""
        return np.array([(self.value >> i) & 1 for i in range(self.d_c)],
                        dtype=np.uint8)

    def packed_bytes(self) -> bytes:
        return self.value.to_bytes((self.d_c + 7) // 8, "little")

    def packed_words(self) -> np.ndarray:
        n_words = (self.d_c + 63) // 64
        return np.frombuffer(self.value.to_bytes(n_words * 8, "little"),
                             dtype=np.uint64).copy()

    def complement(self) -> "Fingerprint":
        mask = (1 << self.d_c) - 1
        return Fingerprint(self.value ^ mask, self.d_c)

    def to_text(self) -> str:
        """Lowercase-hex text form, most significant nibble first, e.g. "fp128:00ab..."."""
        digits = (self.d_c + 3) // 4
        return f"fp{self.d_c}:{self.value:0{digits}x}"

    @classmethod
    def from_text(cls, text: str) -> "Fingerprint":
        if not text.startswith("fp"):
            raise ValueError(f"fingerprint text must start with 'fp': {text!r}")
        head, sep, hexpart = text.partition(":")
        if not sep:
            raise ValueError(f"fingerprint text missing ':': {text!r}")
        try:
            d_c = int(head[2:])
        except ValueError:
            raise ValueError(f"bad fingerprint length in {text!r}") from None
        digits = (d_c + 3) // 4
        if len(hexpart) != digits:
            raise ValueError(f"fingerprint hex must be {digits} digits for d_c={d_c}, "
                             f"got {len(hexpart)}")
        return cls(int(hexpart, 16), d_c)

    def __str__(self) -> str:
        return self.to_text()


@dataclass(frozen=True)
class FingerprintSpace:
    """The set of all bit vectors of one length d_c (default 128)."""

    d_c: int = 128

    def __post_init__(self):
        if self.d_c < 1:
            raise ValueError(f"d_c must be >= 1, got {self.d_c}")

    def sample(self, rng: np.random.Generator) -> Fingerprint:
        """One fingerprint with i.i.d. fair-coin bits."""
        return Fingerprint.from_bits(self.sample_bits(rng, 1)[0])

    def sample_bits(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, d_c) matrix of fair-coin bits, dtype uint8."""
        return rng.integers(0, 2, size=(n, self.d_c), dtype=np.uint8)

    def threshold(self) -> int:
        return default_threshold(self.d_c)


def default_threshold(d_c: int) -> int:
    """Match-count acceptance threshold: 95% of the bit length.

    Exact integer arithmetic, truncated: 121 at d_c=128.
    """
    return (19 * d_c) // 20


def _check_same_length(a: Fingerprint, b: Fingerprint) -> None:
    if a.d_c != b.d_c:
        raise ValueError(f"fingerprint length mismatch: {a.d_c} vs {b.d_c}")


def hamming_distance(a: Fingerprint, b: Fingerprint) -> int:
    _check_same_length(a, b)
    return (a.value ^ b.value).bit_count()


def matching_bits(a: Fingerprint, b: Fingerprint) -> int:
    """Number of agreeing bit positions, d_c - HammingDistance."""
    return a.d_c - hamming_distance(a, b)


def matches(a: Fingerprint, b: Fingerprint, threshold: int | None = None) -> bool:
    """True iff the two fingerprints agree in at least ``threshold`` bits."""
    _check_same_length(a, b)
    if threshold is None:
        threshold = default_threshold(a.d_c)
    if not 0 <= threshold <= a.d_c:
        raise ValueError(f"threshold {threshold} out of range [0, {a.d_c}]")
    return matching_bits(a, b) >= threshold


# ---------------------------------------------------------------------------
# null-hypothesis statistics


def null_p_value_exact(k: int, d_c: int) -> Fraction:
    """Exact upper-tail binomial probability sum_{i=k}^{d_c} C(d_c,i) / 2^d_c.

    Big-integer rational arithmetic; the oracle for the float path.
    """
    if not 0 <= k <= d_c:
        raise ValueError(f"matching-bit count {k} out of range [0, {d_c}]")
    total = sum(math.comb(d_c, i) for i in range(k, d_c + 1))
    return Fraction(total, 1 << d_c)


def null_p_value(k: int, d_c: int) -> float:
    """Probability of observing >= k matching bits between independent
    fair-coin fingerprints of length d_c (tail sum inclusive at k)."""
    if not 0 <= k <= d_c:
        raise ValueError(f"matching-bit count {k} out of range [0, {d_c}]")
    if k == 0:
        return 1.0
    if d_c <= 64:
        return float(null_p_value_exact(k, d_c))
    # each term in log space via log-gamma (C(512,256)*0.5^512 would
    # underflow as a product), then an exactly-rounded sum; identical
    # per-term floats across calls keep the tail non-increasing in k
    ln2 = math.log(2.0)
    lgn = math.lgamma(d_c + 1)
    tail = math.fsum(
        math.exp(lgn - math.lgamma(i + 1) - math.lgamma(d_c - i + 1) - d_c * ln2)
        for i in range(k, d_c + 1))
    return min(1.0, tail)


@dataclass(frozen=True)
class CapacityEstimate:
    """Identifiable-fingerprint capacity 2^(d_c * accuracy)."""

    magnitude: int        # floor of the decimal exponent
    exponent_bits: float  # exact exponent, in bits

    def __str__(self) -> str:
        return f"2^{self.exponent_bits:g} ~ 10^{self.magnitude}"


def capacity_estimate(d_c: int, bit_accuracy: float) -> CapacityEstimate:
    if not 0.0 <= bit_accuracy <= 1.0:
        raise ValueError(f"bit accuracy must be in [0, 1], got {bit_accuracy}")
    exponent = d_c * bit_accuracy
    return CapacityEstimate(math.floor(exponent * math.log10(2.0)), exponent)


# ---------------------------------------------------------------------------
# packed popcount machinery


def pack_bit_matrix(bits: np.ndarray) -> np.ndarray:
    """(n, d_c) bit matrix -> (n, ceil(d_c/64)) little-endian uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    n, d_c = bits.shape
    n_words = (d_c + 63) // 64
    packed = np.packbits(bits, axis=1, bitorder="little")
    buf = np.zeros((n, n_words * 8), dtype=np.uint8)
    buf[:, :packed.shape[1]] = packed
    return buf.view(np.uint64)


def matching_bits_matrix(a_words: np.ndarray, b_words: np.ndarray, d_c: int) -> np.ndarray:
    """Pairwise matching-bit counts between two packed fingerprint sets.

    a_words: (m, w); b_words: (n, w); returns (m, n) int64.
    """
    xored = a_words[:, None, :] ^ b_words[None, :, :]
    return d_c - np.bitwise_count(xored).sum(axis=2, dtype=np.int64)


def _sample_packed(rng: np.random.Generator, n: int, d_c: int) -> np.ndarray:
    n_words = (d_c + 63) // 64
    words = rng.integers(0, 1 << 64, size=(n, n_words), dtype=np.uint64)
    rem = d_c % 64
    if rem:
        words[:, -1] &= np.uint64((1 << rem) - 1)
    return words


def bottom_line_requirement(d_c: int, bag_size: int, rng: np.random.Generator,
                            quantile: float | None = None,
                            threads: int = 1) -> float:
    """Maximal fractional bit overlap over all pairs in a sampled bag.

    This is the decoding-accuracy floor below which two issued
    fingerprints could be confused.  Brute-force scan with packed 64-bit
    words; bag sizes around 1e6 take minutes and are intended for one-off
    studies.  ``quantile`` switches the statistic from the max to the
    given overlap quantile (rarely wanted; the max is the default and the
    conservative choice).

    Sampling draws whole words in row order, so bags from the same seed
    are prefix-stable: growing the bag keeps earlier samples unchanged.
    """
    if bag_size < 2:
        raise ValueError(f"bag_size must be >= 2, got {bag_size}")
    if quantile is not None and not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {quantile}")
    bag = _sample_packed(rng, bag_size, d_c)

    def scan(rows: range) -> np.ndarray:
        hist = np.zeros(d_c + 1, dtype=np.int64)
        for i in rows:
            rest = bag[i + 1:]
            if rest.size == 0:
                continue
            dist = np.bitwise_count(bag[i] ^ rest).sum(axis=1, dtype=np.int64)
            if quantile is None:
                hist[int(dist.min())] += 1
            else:
                hist += np.bincount(dist, minlength=d_c + 1)
        return hist

    if threads <= 1:
        hist = scan(range(bag_size - 1))
    else:
        # round-robin row assignment balances the triangular workload;
        # histogram summation is order-independent, so the reduction is
        # deterministic regardless of completion order
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(scan, [range(t, bag_size - 1, threads)
                                    for t in range(threads)])
            hist = np.sum(list(parts), axis=0)

    if quantile is None:
        min_dist = int(np.nonzero(hist)[0][0])
        return (d_c - min_dist) / d_c
    # overlap CDF walks hamming distances from d_c down to 0
    total = int(hist.sum())
    accum = 0
    for dist in range(d_c, -1, -1):
        accum += int(hist[dist])
        if accum >= quantile * total:
            return (d_c - dist) / d_c
    return 1.0


def fingerprint_digest(fp: Fingerprint) -> bytes:
    """16-byte identifier: truncated SHA-256 of the packed bits."""
    return hashlib.sha256(fp.packed_bytes()).digest()[:16]
