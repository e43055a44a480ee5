"""Closed-form outage probability for coordinated multi-cell downlink links.

A user jointly served by a set of base stations over Rayleigh-faded channels
sees an SINR whose numerator is a sum of independent exponential variables
(one per serving station, mean equal to that station's average received
power) and whose denominator is the same kind of sum over the interfering
stations plus thermal noise.  The outage probability

    P_out(g) = 1 - sum_n [ exp(-g*noise/P_n)
                           * prod_{j != n} P_n/(P_n - P_j)
                           * prod_k       P_n/(P_k*g + P_n) ]

(n, j over serving powers, k over interferer powers) follows from the
partial-fraction expansion of the hypoexponential / generalized chi-square
distribution and requires pairwise-distinct powers.  This module evaluates
it with an explicit numerical-conditioning policy:

* powers closer than a minimum relative gap are deterministically nudged
  apart (or an error is raised when perturbation is disabled),
* every alternating-sign term is evaluated in log-magnitude/sign form and
  the terms are combined with compensated summation,
* when cancellation exceeds a configurable ratio the closed form is
  abandoned for a seeded Monte-Carlo estimate and the result is flagged.

All functions are pure; results depend only on their arguments, so
concurrent use is safe.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from . import montecarlo

__all__ = [
    "DegeneratePowersError",
    "SeparationPolicy",
    "DEFAULT_POLICY",
    "PowerSet",
    "OutageQuery",
    "ConditioningReport",
    "min_relative_gap",
    "apply_separation",
    "gen_chi2_ccdf",
    "outage_probability",
    "outage_probability_report",
    "outage_probability_curve",
    "siso_outage",
    "capacity_cdf",
    "capacity_cdf_report",
]

_LN2 = math.log(2.0)

PowersLike = Union["PowerSet", Iterable[float]]


class DegeneratePowersError(ValueError):
    """Powers too close for the partial-fraction form while perturbation is off."""


@dataclass(frozen=True)
class SeparationPolicy:
    """Conditioning policy for near-equal received powers.

    min_relative_gap: smallest tolerated |Pi - Pj| / max(Pi, Pj) over pairs.
    perturb: nudge offending powers apart instead of raising.
    cancellation_limit: largest tolerated (max |term|) / |sum| in the
        alternating partial-fraction sum before falling back to Monte-Carlo.
    fallback_samples: sample count used by the Monte-Carlo fallback.
    """

    min_relative_gap: float = 1e-6
    perturb: bool = True
    cancellation_limit: float = 1e12
    fallback_samples: int = 1_000_000


DEFAULT_POLICY = SeparationPolicy()


@dataclass(frozen=True)
class PowerSet:
    """Ordered collection of average received powers, linear scale, all > 0."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        for v in vals:
            if not math.isfinite(v) or v <= 0.0:
                raise ValueError(f"powers must be finite and > 0, got {v!r}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, values: PowersLike) -> "PowerSet":
        if isinstance(values, PowerSet):
            return values
        return cls(tuple(values))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class OutageQuery:
    """One closed-form evaluation: serving set, interferers, noise, threshold.

    Joint pairwise distinctness of serving and interferer powers is not
    demanded at construction; the separation policy enforces it when the
    query is evaluated.
    """

    serving: PowerSet
    interferers: PowerSet
    noise_power: float = 0.0
    threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "serving", PowerSet.of(self.serving))
        object.__setattr__(self, "interferers", PowerSet.of(self.interferers))
        if len(self.serving) == 0:
            raise ValueError("serving set must be non-empty")
        if not (math.isfinite(self.noise_power) and self.noise_power >= 0.0):
            raise ValueError(f"noise_power must be finite and >= 0, got {self.noise_power!r}")
        if not (math.isfinite(self.threshold) and self.threshold >= 0.0):
            raise ValueError(f"threshold must be finite and >= 0, got {self.threshold!r}")


@dataclass(frozen=True)
class ConditioningReport:
    """How the conditioning policy intervened in one evaluation."""

    min_relative_gap: float
    perturbed: bool
    fell_back_to_oracle: bool


def min_relative_gap(values: Sequence[float]) -> float:
    """Smallest pairwise |Pi - Pj| / max(Pi, Pj); inf when fewer than 2 values."""
    v = np.sort(np.asarray(list(values), dtype=float))[::-1]
    if v.size < 2:
        return math.inf
    return float(((v[:-1] - v[1:]) / v[:-1]).min())


def apply_separation(values: Sequence[float], policy: SeparationPolicy = DEFAULT_POLICY):
    """Enforce the minimum pairwise relative gap on a list of powers.

    Walks the values in descending order and pushes each offender below its
    predecessor by multiplicative factors (1 - k*min_relative_gap),
    k = 1, 2, ...  Deterministic; preserves the input ordering.  Returns
    (adjusted values, perturbed flag).  Raises DegeneratePowersError when a
    pair violates the gap and perturbation is disabled.
    """
    vals = [float(v) for v in values]
    if len(vals) < 2:
        return vals, False
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))
    perturbed = False
    prev = vals[order[0]]
    for pos in order[1:]:
        cur = vals[pos]
        k = 1
        while prev - cur < policy.min_relative_gap * prev:
            if not policy.perturb:
                raise DegeneratePowersError(
                    f"powers {prev!r} and {cur!r} violate the minimum relative "
                    f"gap {policy.min_relative_gap:g} and perturbation is disabled"
                )
            cur *= 1.0 - k * policy.min_relative_gap
            k += 1
            perturbed = True
        vals[pos] = cur
        prev = cur
    return vals, perturbed


def _prepare(serving: PowersLike, interferers: PowersLike, policy: SeparationPolicy):
    """Validate and jointly separate serving + interferer powers."""
    s = PowerSet.of(serving)
    i = PowerSet.of(interferers)
    if len(s) == 0:
        raise ValueError("serving set must be non-empty")
    joint, perturbed = apply_separation(list(s.values) + list(i.values), policy)
    return joint[: len(s)], joint[len(s):], perturbed


def _fallback_seed(serving, interferers, noise_power, thresholds) -> int:
    """Deterministic 64-bit seed from the (adjusted) query contents."""
    h = hashlib.blake2b(digest_size=8)
    for block in (serving, interferers, thresholds):
        h.update(struct.pack("<q", len(block)))
        h.update(np.ascontiguousarray(block, dtype="<f8").tobytes())
    h.update(struct.pack("<d", float(noise_power)))
    return int.from_bytes(h.digest(), "little")


def _compensated_sum(signed: np.ndarray) -> np.ndarray:
    """Neumaier compensated summation along axis 0 of a (terms, points) array."""
    total = np.zeros(signed.shape[1])
    comp = np.zeros(signed.shape[1])
    for row in signed:
        t = total + row
        comp += np.where(np.abs(total) >= np.abs(row), (total - t) + row, (row - t) + total)
        total = t
    return total + comp

# Largest (thresholds x interferers) temporary, in elements.
_BLOCK_ELEMS = 4_000_000


def _signed_success(serving, interferers, noise_power, thresholds):
    """Success probability sum_n term_n per threshold, in log-magnitude/sign form.

    Returns (success, ratio) arrays where ratio = (max |term|) / |sum| is the
    cancellation indicator (inf when the compensated sum is exactly zero).
    """
    s = np.asarray(serving, dtype=float)
    i = np.asarray(interferers, dtype=float)
    t = np.asarray(thresholds, dtype=float)
    n = s.size

    diff = s[:, None] - s[None, :]
    signs = np.where((diff < 0).sum(axis=1) % 2 == 1, -1.0, 1.0)
    np.fill_diagonal(diff, 1.0)
    static = (n - 1) * np.log(s) - np.log(np.abs(diff)).sum(axis=1)

    success = np.empty(t.size)
    ratio = np.empty(t.size)
    block = max(1, _BLOCK_ELEMS // max(1, i.size))
    for lo in range(0, t.size, block):
        tb = t[lo: lo + block]
        logmag = static[:, None] - np.outer(1.0 / s, tb) * noise_power
        if i.size:
            cross = np.outer(tb, i)
            for k in range(n):
                logmag[k] += i.size * np.log(s[k]) - np.log(cross + s[k]).sum(axis=1)
        peak = logmag.max(axis=0)
        sums = _compensated_sum(signs[:, None] * np.exp(logmag - peak[None, :]))
        mag = np.abs(sums)
        with np.errstate(divide="ignore"):
            ratio[lo: lo + block] = np.where(mag > 0, 1.0 / mag, np.inf)
            logabs = np.where(mag > 0, np.log(np.where(mag > 0, mag, 1.0)), -np.inf)
        success[lo: lo + block] = np.sign(sums) * np.exp(peak + logabs)
    return success, ratio


def outage_probability_curve(
    serving: PowersLike,
    interferers: PowersLike,
    noise_power: float,
    thresholds,
    policy: SeparationPolicy | None = None,
):
    """Outage probability at each SINR threshold, with a conditioning report.

    Vectorized Theorem-style closed form; thresholds must be finite and >= 0.
    Points whose cancellation ratio exceeds the policy limit are replaced by
    one shared Monte-Carlo estimate (seed derived from the query) and the
    report carries fell_back_to_oracle=True.
    """
    policy = policy or DEFAULT_POLICY
    s_vals, i_vals, perturbed = _prepare(serving, interferers, policy)
    thr = np.atleast_1d(np.asarray(thresholds, dtype=float))
    if thr.size and (not np.all(np.isfinite(thr)) or thr.min() < 0.0):
        raise ValueError("thresholds must be finite and >= 0")
    gap = min_relative_gap(s_vals + i_vals)

    if not i_vals and noise_power == 0.0:
        # no interference and no noise: every finite threshold is met
        return np.zeros(thr.shape), ConditioningReport(gap, perturbed, False)

    success, cancel = _signed_success(s_vals, i_vals, noise_power, thr)
    pout = np.clip(1.0 - success, 0.0, 1.0)
    pout[thr == 0.0] = 0.0

    bad = (thr > 0.0) & (~np.isfinite(success) | (cancel > policy.cancellation_limit))
    fell_back = bool(bad.any())
    if fell_back:
        seed = _fallback_seed(s_vals, i_vals, noise_power, thr)
        sinr = montecarlo.sample_sinr(s_vals, i_vals, noise_power, seed, policy.fallback_samples)
        sinr.sort()
        idx = np.searchsorted(sinr, thr[bad], side="right")
        pout[bad] = idx / policy.fallback_samples
    return pout, ConditioningReport(gap, perturbed, fell_back)


def outage_probability_report(q: OutageQuery, policy: SeparationPolicy | None = None):
    """Closed-form outage probability plus its ConditioningReport."""
    vals, report = outage_probability_curve(
        q.serving, q.interferers, q.noise_power, [q.threshold], policy
    )
    return float(vals[0]), report


def outage_probability(q: OutageQuery, policy: SeparationPolicy | None = None) -> float:
    """Probability that the SINR of the coordinated link falls below q.threshold."""
    return outage_probability_report(q, policy)[0]


def gen_chi2_ccdf(powers: PowersLike, x: float, policy: SeparationPolicy | None = None) -> float:
    """P(sum of independent exponentials with means `powers` exceeds x).

    Complementary CDF of the hypoexponential (generalized chi-square)
    distribution:  sum_n exp(-x/P_n) / prod_{j != n} (1 - P_j/P_n),
    clamped to [0, 1].  At x = 0 this exercises the partial-fraction
    normalization identity sum_n prod_{j != n} P_n/(P_n - P_j) = 1.
    """
    policy = policy or DEFAULT_POLICY
    ps = PowerSet.of(powers)
    if len(ps) == 0:
        raise ValueError("powers must be non-empty")
    if not (math.isfinite(x) and x >= 0.0):
        raise ValueError(f"x must be finite and >= 0, got {x!r}")
    vals, _ = apply_separation(list(ps.values), policy)
    if len(vals) == 1:
        return math.exp(-x / vals[0])
    # the CCDF terms coincide with the outage success terms at unit noise,
    # threshold x and no interferers
    success, cancel = _signed_success(vals, (), 1.0, np.array([x]))
    if not np.isfinite(success[0]) or cancel[0] > policy.cancellation_limit:
        seed = _fallback_seed(vals, (), 1.0, np.array([x]))
        sums = montecarlo.sample_sinr(vals, (), 1.0, seed, policy.fallback_samples)
        return float(np.mean(sums > x))
    return float(np.clip(success[0], 0.0, 1.0))


def siso_outage(
    serving_power: float,
    interferers: PowersLike,
    noise_power: float = 0.0,
    threshold: float = 0.0,
    policy: SeparationPolicy | None = None,
) -> float:
    """Single-serving-station outage, evaluated as the plain product form.

        1 - exp(-g*noise/P1) * prod_k P1/(P1 + g*P_k)

    Matches outage_probability with a singleton serving set to <= 1e-12.
    """
    policy = policy or DEFAULT_POLICY
    p1 = float(serving_power)
    if not (math.isfinite(p1) and p1 > 0.0):
        raise ValueError(f"serving_power must be finite and > 0, got {serving_power!r}")
    if not (math.isfinite(noise_power) and noise_power >= 0.0):
        raise ValueError(f"noise_power must be finite and >= 0, got {noise_power!r}")
    if not (math.isfinite(threshold) and threshold >= 0.0):
        raise ValueError(f"threshold must be finite and >= 0, got {threshold!r}")
    [p1], i_vals, _ = _prepare([p1], interferers, policy)
    if threshold == 0.0:
        return 0.0
    prod = math.exp(-threshold * noise_power / p1)
    for pk in i_vals:
        prod *= p1 / (p1 + threshold * pk)
    return min(max(1.0 - prod, 0.0), 1.0)


def capacity_cdf_report(
    serving: PowersLike,
    interferers: PowersLike,
    noise_power: float,
    rate_grid,
    policy: SeparationPolicy | None = None,
):
    """CDF of the link capacity log2(1 + SINR) on a non-decreasing rate grid.

    Each rate R maps to the SINR threshold 2**R - 1; returns the outage
    probabilities (a non-decreasing sequence) and the conditioning report.
    """
    rates = np.atleast_1d(np.asarray(rate_grid, dtype=float))
    if rates.size and (not np.all(np.isfinite(rates)) or rates.min() < 0.0):
        raise ValueError("rates must be finite and >= 0")
    if np.any(np.diff(rates) < 0.0):
        raise ValueError("rate_grid must be non-decreasing")
    thresholds = np.exp2(rates) - 1.0
    return outage_probability_curve(serving, interferers, noise_power, thresholds, policy)


def capacity_cdf(
    serving: PowersLike,
    interferers: PowersLike,
    noise_power: float,
    rate_grid,
    policy: SeparationPolicy | None = None,
) -> np.ndarray:
    """capacity_cdf_report without the report."""
    return capacity_cdf_report(serving, interferers, noise_power, rate_grid, policy)[0]
