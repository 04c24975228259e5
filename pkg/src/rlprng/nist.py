"""A small NIST SP 800-22 style battery and the averaged score used as reward.

Eight tests are implemented, the ones that are meaningful for sequences of a
few dozen to a few thousand bits. Every test returns a `TestOutcome`; the
battery runs the tests eligible for the sequence length and averages their
scores, where a failed test contributes zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from .bitseq import BitSequence

ALPHA = 0.01

MONOBIT = "monobit"
BLOCK_FREQUENCY = "block_frequency"
RUNS = "runs"
LONGEST_RUN = "longest_run"
DFT_SPECTRAL = "dft_spectral"
SERIAL = "serial"
APPROXIMATE_ENTROPY = "approximate_entropy"
CUMULATIVE_SUMS = "cumulative_sums"

TEST_IDS = (
    MONOBIT,
    BLOCK_FREQUENCY,
    RUNS,
    LONGEST_RUN,
    DFT_SPECTRAL,
    SERIAL,
    APPROXIMATE_ENTROPY,
    CUMULATIVE_SUMS,
)


class IneligibleError(ValueError):
    """The sequence is too short for the requested test; it must be skipped."""


# --------------------------------------------------------------------------
# special functions

_EPS = 1e-15
_FPMIN = 1e-300


def _igam_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _igamc_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def igamc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("igamc requires a > 0")
    if x < 0:
        raise ValueError("igamc requires x >= 0")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _igam_series(a, x))
    return _igamc_contfrac(a, x)


def erfc(x: float) -> float:
    return math.erfc(x)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# --------------------------------------------------------------------------
# outcomes


@dataclass(frozen=True)
class TestOutcome:
    test_id: str
    p_values: Tuple[float, ...]
    passed: bool
    score: float

    __test__ = False  # not a pytest class

    @classmethod
    def from_p_values(cls, test_id: str, p_values: Sequence[float], alpha: float = ALPHA):
        ps = tuple(min(1.0, max(0.0, float(p))) for p in p_values)
        if not ps:
            raise ValueError("a test that ran must report at least one P-value")
        passed = all(p >= alpha for p in ps)
        score = float(np.mean(ps)) if passed else 0.0
        return cls(test_id, ps, passed, score)


@dataclass(frozen=True)
class BatteryReport:
    outcomes: Tuple[TestOutcome, ...] = field(default_factory=tuple)

    @property
    def eligible_count(self) -> int:
        return len(self.outcomes)

    @property
    def avg_score(self) -> float:
        if not self.outcomes:
            return 0.0
        return float(np.mean([o.score for o in self.outcomes]))

    def format(self) -> str:
        lines = []
        for o in self.outcomes:
            ps = " ".join(f"{p:.6f}" for p in o.p_values)
            lines.append(f"{o.test_id:<20s} {ps}  {'pass' if o.passed else 'fail'}  {o.score:.6f}")
        lines.append(f"avg_nist {self.avg_score:.6f}")
        return "\n".join(lines)


def _as_bits(seq: Union[BitSequence, np.ndarray, Sequence[int]]) -> np.ndarray:
    if isinstance(seq, BitSequence):
        return seq.bits
    return BitSequence(seq).bits


def _require(n: int, min_n: int, test_id: str) -> None:
    if n < min_n:
        raise IneligibleError(f"{test_id} needs at least {min_n} bits, got {n}")


# --------------------------------------------------------------------------
# tests


def monobit_test(seq) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    _require(n, 1, MONOBIT)
    s = abs(2 * int(bits.sum()) - n) / math.sqrt(n)
    return TestOutcome.from_p_values(MONOBIT, [erfc(s / math.sqrt(2.0))])


def block_frequency_test(seq, M: int) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    if M < 1:
        raise ValueError("block size must be >= 1")
    _require(n, M, BLOCK_FREQUENCY)
    N = n // M
    pi = bits[: N * M].reshape(N, M).mean(axis=1)
    chi2 = 4.0 * M * float(np.sum((pi - 0.5) ** 2))
    return TestOutcome.from_p_values(BLOCK_FREQUENCY, [igamc(N / 2.0, chi2 / 2.0)])


def runs_test(seq) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    _require(n, 2, RUNS)
    pi = bits.sum() / n
    if abs(pi - 0.5) >= 2.0 / math.sqrt(n):
        return TestOutcome.from_p_values(RUNS, [0.0])
    v_obs = 1 + int(np.count_nonzero(bits[1:] != bits[:-1]))
    num = abs(v_obs - 2.0 * n * pi * (1.0 - pi))
    den = 2.0 * math.sqrt(2.0 * n) * pi * (1.0 - pi)
    return TestOutcome.from_p_values(RUNS, [erfc(num / den)])


# (min n, block size M, category lower edges, category probabilities)
_LONGEST_RUN_TABLE = (
    (750_000, 10_000, (10, 11, 12, 13, 14, 15, 16),
     (0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727)),
    (6272, 128, (4, 5, 6, 7, 8, 9), (0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124)),
    (128, 8, (1, 2, 3, 4), (0.2148, 0.3672, 0.2305, 0.1875)),
)


def _longest_ones(block: np.ndarray) -> int:
    # longest run of ones in the block, from run-length boundaries
    padded = np.concatenate([[0], block, [0]])
    edges = np.flatnonzero(np.diff(padded))
    if edges.size == 0:
        return 0
    return int((edges[1::2] - edges[::2]).max())


def longest_run_test(seq) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    _require(n, 128, LONGEST_RUN)
    for min_n, M, edges, probs in _LONGEST_RUN_TABLE:
        if n >= min_n:
            break
    N = n // M
    blocks = bits[: N * M].reshape(N, M)
    longest = np.array([_longest_ones(b) for b in blocks])
    K = len(edges) - 1
    cats = np.clip(longest, edges[0], edges[-1]) - edges[0]
    counts = np.bincount(cats, minlength=K + 1)
    expected = N * np.asarray(probs)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    return TestOutcome.from_p_values(LONGEST_RUN, [igamc(K / 2.0, chi2 / 2.0)])


def dft_spectral_test(seq) -> TestOutcome:
    bits = _as_bits(seq)
    _require(bits.size, 64, DFT_SPECTRAL)
    if bits.size % 2:
        bits = bits[:-1]
    n = bits.size
    x = 2.0 * bits - 1.0
    moduli = np.abs(np.fft.fft(x))[: n // 2]
    threshold = math.sqrt(math.log(1.0 / 0.05) * n)
    n0 = 0.95 * n / 2.0
    n1 = float(np.count_nonzero(moduli < threshold))
    d = (n1 - n0) / math.sqrt(n * 0.95 * 0.05 / 4.0)
    return TestOutcome.from_p_values(DFT_SPECTRAL, [erfc(abs(d) / math.sqrt(2.0))])


def _pattern_counts(bits: np.ndarray, m: int) -> np.ndarray:
    """Overlapping m-bit pattern counts with cyclic wrap-around."""
    n = bits.size
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    ext = np.concatenate([bits, bits[: m - 1]]).astype(np.int64)
    codes = np.zeros(n, dtype=np.int64)
    for j in range(m):
        codes = (codes << 1) | ext[j : j + n]
    return np.bincount(codes, minlength=1 << m)


def _psi2(bits: np.ndarray, m: int) -> float:
    if m <= 0:
        return 0.0
    n = bits.size
    counts = _pattern_counts(bits, m).astype(np.float64)
    return float((2.0**m / n) * np.sum(counts**2) - n)


def serial_test(seq, m: int) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    if m < 2:
        raise ValueError("serial test needs m >= 2")
    _require(n, 1 << (m + 3), SERIAL)
    p_m, p_m1, p_m2 = _psi2(bits, m), _psi2(bits, m - 1), _psi2(bits, m - 2)
    d1 = max(0.0, p_m - p_m1)
    d2 = max(0.0, p_m - 2.0 * p_m1 + p_m2)
    return TestOutcome.from_p_values(
        SERIAL, [igamc(2.0 ** (m - 2), d1 / 2.0), igamc(2.0 ** (m - 3), d2 / 2.0)]
    )


def _phi(bits: np.ndarray, m: int) -> float:
    if m <= 0:
        return 0.0
    c = _pattern_counts(bits, m) / bits.size
    c = c[c > 0]
    return float(np.sum(c * np.log(c)))


def approximate_entropy_test(seq, m: int) -> TestOutcome:
    bits = _as_bits(seq)
    n = bits.size
    if m < 1:
        raise ValueError("approximate entropy needs m >= 1")
    _require(n, 1 << (m + 3), APPROXIMATE_ENTROPY)
    ap_en = _phi(bits, m) - _phi(bits, m + 1)
    chi2 = max(0.0, 2.0 * n * (math.log(2.0) - ap_en))
    return TestOutcome.from_p_values(APPROXIMATE_ENTROPY, [igamc(2.0 ** (m - 1), chi2 / 2.0)])


def _cusum_p(z: int, n: int) -> float:
    sq = math.sqrt(n)
    total = 1.0
    for k in range(math.floor((-n / z + 1) / 4), math.floor((n / z - 1) / 4) + 1):
        total -= normal_cdf((4 * k + 1) * z / sq) - normal_cdf((4 * k - 1) * z / sq)
    for k in range(math.floor((-n / z - 3) / 4), math.floor((n / z - 1) / 4) + 1):
        total += normal_cdf((4 * k + 3) * z / sq) - normal_cdf((4 * k + 1) * z / sq)
    return total


def cumulative_sums_test(seq) -> TestOutcome:
    """Forward and backward cumulative-sum excursion P-values."""
    bits = _as_bits(seq)
    n = bits.size
    _require(n, 1, CUMULATIVE_SUMS)
    x = 2 * bits.astype(np.int64) - 1
    z_fwd = int(np.abs(np.cumsum(x)).max())
    z_bwd = int(np.abs(np.cumsum(x[::-1])).max())
    return TestOutcome.from_p_values(CUMULATIVE_SUMS, [_cusum_p(z_fwd, n), _cusum_p(z_bwd, n)])


# --------------------------------------------------------------------------
# eligibility and the battery


@dataclass(frozen=True)
class EligibilityRule:
    test_id: str
    min_length: int
    run: Callable[[np.ndarray], TestOutcome]


def block_frequency_size(n: int) -> int:
    return 8 if n < 200 else 20


def serial_pattern_length(n: int) -> int:
    return min(3, int(math.floor(math.log2(n))) - 3)


ELIGIBILITY: Tuple[EligibilityRule, ...] = (
    EligibilityRule(MONOBIT, 1, monobit_test),
    EligibilityRule(BLOCK_FREQUENCY, 16, lambda b: block_frequency_test(b, block_frequency_size(b.size))),
    EligibilityRule(RUNS, 16, runs_test),
    EligibilityRule(LONGEST_RUN, 128, longest_run_test),
    EligibilityRule(DFT_SPECTRAL, 64, dft_spectral_test),
    EligibilityRule(SERIAL, 32, lambda b: serial_test(b, serial_pattern_length(b.size))),
    EligibilityRule(APPROXIMATE_ENTROPY, 32, lambda b: approximate_entropy_test(b, 2)),
    EligibilityRule(CUMULATIVE_SUMS, 16, cumulative_sums_test),
)

_RULES: Dict[str, EligibilityRule] = {r.test_id: r for r in ELIGIBILITY}


def eligible_tests(n: int) -> List[str]:
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    return [r.test_id for r in ELIGIBILITY if n >= r.min_length]


def run_battery(seq) -> BatteryReport:
    bits = _as_bits(seq)
    if bits.size == 0:
        return BatteryReport()
    return BatteryReport(tuple(_RULES[t].run(bits) for t in eligible_tests(bits.size)))


def avg_nist(seq) -> float:
    """Mean per-test score over the eligible tests, zero when none is eligible."""
    return run_battery(seq).avg_score
