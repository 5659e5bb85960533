"""Domain types for data, models, priors, statistics, and check results.

Everything here is immutable after construction (arrays are marked read-only),
so instances are safe to share across concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    InfeasibleV,
    InvalidParameter,
    NonFiniteValue,
    TooFewGroups,
    UnbalancedData,
)

# Relative tolerance for the q >= s^2/I feasibility boundary. q - s^2/I is
# prone to quadratic cancellation, so values within the band are clamped to
# the boundary; larger violations are hard errors.
FEASIBILITY_TOL = 1e-9

# Discrepancy spaces.
T_SPACE = "T"
RESIDUAL_SPACE = "residual"
V_SPACE = "V"

# Protocol stages and their stream bases: stage k draws replicate j from
# stream_id = 2^60 * k + j, so stages and replicates never share a stream.
STAGES = ("model", "pi2", "pi1", "pi2_star")
STAGE_STREAM_BASE = {name: index << 60 for index, name in enumerate(STAGES)}

# Stage statuses.
STATUS_RUN = "run"
STATUS_SKIPPED_IMPROPER = "skipped_improper"
STATUS_SKIPPED_NO_RESIDUALS = "skipped_no_residuals"
STATUS_GATED = "gated_not_run"
STATUS_ERROR = "error"

# Stage decisions.
NO_EVIDENCE = "no_evidence"
EVIDENCE_OF_CONFLICT = "evidence_of_conflict"
SKIPPED = "skipped"
NOT_RUN = "not_run"


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """Balanced I x n observations, one row per group."""

    group_ids: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidParameter("values must be a 2-d array (groups x observations)")
        if len(self.group_ids) != values.shape[0]:
            raise InvalidParameter("one group id per row required")
        if len(set(self.group_ids)) != len(self.group_ids):
            raise InvalidParameter("group ids must be distinct")
        if values.shape[0] < 2:
            raise TooFewGroups(f"need at least 2 groups, got {values.shape[0]}")
        if values.shape[1] < 1:
            raise InvalidParameter("each group needs at least one observation")
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue("dataset contains NaN or infinite values")
        object.__setattr__(self, "group_ids", tuple(str(g) for g in self.group_ids))
        object.__setattr__(self, "values", _readonly(values))

    @property
    def I(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def flatten(self) -> list:
        """Back to (group label, value) pairs, groups in stored order."""
        return [(g, float(v)) for g, row in zip(self.group_ids, self.values)
                for v in row]


def validate_dataset(raw: Sequence[Tuple[str, float]]) -> GroupedDataset:
    """Group labelled observations into a validated GroupedDataset.

    Groups appear in first-appearance order; labels are opaque strings.

    Raises UnbalancedData, NonFiniteValue, or TooFewGroups.
    """
    order: list = []
    groups: dict = {}
    for label, value in raw:
        label = str(label)
        if label not in groups:
            groups[label] = []
            order.append(label)
        groups[label].append(float(value))
    if len(order) < 2:
        raise TooFewGroups(f"need at least 2 groups, got {len(order)}")
    sizes = {label: len(groups[label]) for label in order}
    if len(set(sizes.values())) != 1:
        detail = ", ".join(f"{label}:{size}" for label, size in sizes.items())
        raise UnbalancedData(f"group sizes differ ({detail}); "
                             "unbalanced designs are not supported")
    values = np.array([groups[label] for label in order], dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("dataset contains NaN or infinite values")
    return GroupedDataset(tuple(order), values)


@dataclass(frozen=True)
class SamplingModel:
    """Known-variance normal sampling model: x_ij ~ N(theta_i, sigma2)."""

    sigma2: float
    n: int
    I: int

    def __post_init__(self):
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidParameter(f"sigma2 must be finite and > 0, got {self.sigma2}")
        if self.n < 1:
            raise InvalidParameter(f"n must be >= 1, got {self.n}")
        if self.I < 2:
            raise InvalidParameter(f"I must be >= 2, got {self.I}")

    @property
    def mean_variance(self) -> float:
        """Variance sigma2/n of one group mean."""
        return self.sigma2 / self.n


@dataclass(frozen=True, eq=False)
class SufficientStat:
    """Vector of group means."""

    means: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim != 1 or means.size < 2:
            raise InvalidParameter("means must be a vector of length >= 2")
        if not np.all(np.isfinite(means)):
            raise NonFiniteValue("group means contain NaN or infinite values")
        object.__setattr__(self, "means", _readonly(means))

    @property
    def I(self) -> int:
        return self.means.size


@dataclass(frozen=True)
class HyperStat:
    """(s, q) = (sum of group means, sum of squared group means)."""

    s: float
    q: float

    def __post_init__(self):
        if not (math.isfinite(self.s) and math.isfinite(self.q)):
            raise NonFiniteValue("hyper statistic must be finite")


def constraint_radius2(v: HyperStat, I: int, tol: float = FEASIBILITY_TOL) -> float:
    """Squared radius q - s^2/I of the constraint sphere, clamped at 0.

    Violations within tol*max(1, q) (relative feasibility tolerance) are
    clamped to the boundary; anything larger raises InfeasibleV.
    """
    if I < 2:
        raise InvalidParameter(f"I must be >= 2, got {I}")
    rho2 = v.q - v.s * v.s / I
    if rho2 < 0.0:
        if -rho2 <= tol * max(1.0, abs(v.q)):
            return 0.0
        raise InfeasibleV(
            f"q = {v.q} < s^2/I = {v.s * v.s / I} beyond tolerance; "
            "no vector of group means has these statistics")
    return rho2


@dataclass(frozen=True)
class HyperPrior:
    """Prior on the hyperparameter (mu, tau2).

    Either improper flat, or the proper product mu ~ N(m0, s0sq) with
    tau2 ~ inverse-gamma(a0, b0), independent.
    """

    kind: str
    m0: Optional[float] = None
    s0sq: Optional[float] = None
    a0: Optional[float] = None
    b0: Optional[float] = None

    def __post_init__(self):
        if self.kind == "improper_flat":
            if any(p is not None for p in (self.m0, self.s0sq, self.a0, self.b0)):
                raise InvalidParameter("improper_flat prior takes no parameters")
        elif self.kind == "normal_inv_gamma":
            for name in ("m0", "s0sq", "a0", "b0"):
                value = getattr(self, name)
                if value is None or not math.isfinite(value):
                    raise InvalidParameter(f"proper prior requires finite {name}")
            if self.s0sq <= 0 or self.a0 <= 0 or self.b0 <= 0:
                raise InvalidParameter("s0sq, a0, b0 must be > 0")
        else:
            raise InvalidParameter(f"unknown hyperprior kind {self.kind!r}")

    @classmethod
    def improper_flat(cls) -> "HyperPrior":
        return cls("improper_flat")

    @classmethod
    def normal_inv_gamma(cls, m0: float, s0sq: float, a0: float, b0: float) -> "HyperPrior":
        return cls("normal_inv_gamma", float(m0), float(s0sq), float(a0), float(b0))

    @property
    def is_proper(self) -> bool:
        return self.kind == "normal_inv_gamma"


@dataclass(frozen=True)
class SecondLevel:
    """Second-level law: theta | (mu, tau2) ~ N_I(mu*1, tau2*Id). Fixed form."""

    def sample_theta(self, mu: float, tau2: float, I: int, rng) -> np.ndarray:
        from .rng import as_generator  # local import avoids a cycle at import time
        if tau2 < 0:
            raise InvalidParameter(f"tau2 must be >= 0, got {tau2}")
        gen = as_generator(rng)
        return mu + math.sqrt(tau2) * gen.standard_normal(I)


@dataclass(frozen=True)
class Discrepancy:
    """Named real-valued statistic h with the space it acts on.

    T-space funcs reduce the last axis of an (..., I) array; residual-space
    funcs take (..., I, n) plus sigma2 and reduce the last two axes; the
    V-space func maps (observed (s, q) row, reference (N, 2) rows) to
    (observed value, reference values) jointly.

    T-space discrepancies used for the pi2 check must be permutation
    invariant and must not be functions of (s, q) alone.
    """

    name: str
    space: str
    func: Callable = field(compare=False)
    vectorized: bool = False

    def __post_init__(self):
        if self.space not in (T_SPACE, RESIDUAL_SPACE, V_SPACE):
            raise InvalidParameter(f"unknown discrepancy space {self.space!r}")


@dataclass(frozen=True)
class PValueResult:
    """Monte Carlo p-value with its sampling pedigree."""

    p: float
    n_draws: int
    seed: int
    mc_stderr: float
    discrepancy_name: str
    observed_h: float

    def __post_init__(self):
        if self.n_draws < 1:
            raise InvalidParameter("n_draws must be >= 1")
        lo = 1.0 / (self.n_draws + 1)
        if not (lo <= self.p <= 1.0):
            raise InvalidParameter(
                f"p = {self.p} outside [{lo}, 1] for n_draws = {self.n_draws}")
        if self.mc_stderr < 0:
            raise InvalidParameter("mc_stderr must be >= 0")


@dataclass(frozen=True)
class StageRecord:
    """Outcome of one protocol stage."""

    stage: str
    status: str
    result: Optional[PValueResult]
    alpha: float
    decision: str
    message: Optional[str] = None


@dataclass(frozen=True)
class CheckReport:
    """Staged p-values, decisions, and gating outcomes of the full protocol."""

    I: int
    n: int
    stages: Tuple[StageRecord, ...]
    inference_ready: bool

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        names = [s.stage for s in self.stages]
        if names != ["model", "pi2", "pi1"]:
            raise InvalidParameter(f"stage order must be model, pi2, pi1; got {names}")
        blocked = False
        for record in self.stages:
            if blocked and record.status not in (STATUS_GATED,):
                raise InvalidParameter(
                    f"stage {record.stage} must be gated after a failed stage")
            if record.decision == EVIDENCE_OF_CONFLICT or record.status == STATUS_ERROR:
                blocked = True
        ready = all(r.decision in (NO_EVIDENCE, SKIPPED) for r in self.stages)
        if self.inference_ready != ready:
            raise InvalidParameter("inference_ready inconsistent with stage decisions")
