"""The statistics driving each factor: T (group means), V = (s, q), residuals.

Sums are taken over ascending-sorted addends before numpy's pairwise
summation. That keeps cancellation in check and, more importantly, makes the
computed statistics bit-identical under any permutation of groups or of
observations within a group, which the report determinism contract relies on.
"""

from __future__ import annotations

import numpy as np

from .model import GroupedDataset, HyperStat, SufficientStat, FEASIBILITY_TOL


def canonical_sum(values: np.ndarray) -> float:
    """Sum in ascending order; permutation-invariant to the last bit."""
    return float(np.sum(np.sort(np.asarray(values, dtype=float))))


def canonical_sum_rows(rows: np.ndarray) -> np.ndarray:
    """Row-wise canonical_sum for an (m, k) array."""
    return np.sum(np.sort(rows, axis=1), axis=1)


def compute_T(data: GroupedDataset) -> SufficientStat:
    """Group means, in group order."""
    means = canonical_sum_rows(data.values) / data.n
    return SufficientStat(means)


def compute_V(T: SufficientStat) -> HyperStat:
    """V = (sum of means, sum of squared means), clamped to feasibility.

    q >= s^2/I holds mathematically (Cauchy-Schwarz); rounding can push q
    marginally below the boundary, in which case it is clamped up. The clamp
    never moves q by more than FEASIBILITY_TOL * max(1, q).
    """
    means = T.means
    s = canonical_sum(means)
    q = canonical_sum(means * means)
    floor = s * s / T.I
    if q < floor and floor - q <= FEASIBILITY_TOL * max(1.0, abs(q)):
        q = floor
    return HyperStat(s, q)


def compute_residuals(data: GroupedDataset, T: SufficientStat) -> np.ndarray:
    """r_ij = x_ij - mean_i; rows sum to ~0 by construction."""
    return data.values - T.means[:, None]
