"""Staged conflict checks: the Monte Carlo p-value engine, the per-factor
checks, and the gated protocol.

Reference draws for stage k, replicate j come from stream_id
2^60*k + j, so every p-value is bit-identical regardless of worker count or
scheduling. Replicate chunks are assembled in index order and exceedances are
counted as integers, keeping aggregation order-insensitive.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDiscrepancy,
    DegenerateDiscrepancyWarning,
    EmptyDraws,
    ImproperPriorNotSamplable,
    InvalidParameter,
    NoResidualInformation,
    NonFiniteValue,
    PriorcheckError,
    UnknownDiscrepancy,
)
from .model import (
    CheckReport,
    Discrepancy,
    EVIDENCE_OF_CONFLICT,
    FEASIBILITY_TOL,
    GroupedDataset,
    HyperPrior,
    HyperStat,
    NO_EVIDENCE,
    NOT_RUN,
    PValueResult,
    RESIDUAL_SPACE,
    SKIPPED,
    STAGE_STREAM_BASE,
    STATUS_ERROR,
    STATUS_GATED,
    STATUS_RUN,
    STATUS_SKIPPED_IMPROPER,
    STATUS_SKIPPED_NO_RESIDUALS,
    SamplingModel,
    StageRecord,
    T_SPACE,
    V_SPACE,
    constraint_radius2,
)
from .rng import RngStream
from .sampler import (
    helmert_basis,
    sample_residual_matrix_many,
    sample_T_from_prior_many,
    sample_T_given_V_many,
    sample_V_from_prior_many,
)
from .sufficiency import compute_residuals, compute_T, compute_V

# Relative width of the tie band in the >= comparison. Degenerate reference
# laws (two-point or single-point constraint sets) reproduce the observed
# statistic only up to rounding; without the band those checks would report
# 1/(N+1) instead of 1.
TIE_TOL = 1e-12

DEFAULT_DISCREPANCIES = {"model": "chisq_total", "pi2": "skew",
                         "pi1": "mahalanobis_mv"}


# --- built-in discrepancy statistics ---
# T-space functions reduce the last axis; coordinates are sorted first so
# that symmetric statistics are bit-exact under group relabeling.

def t_range(y: np.ndarray) -> np.ndarray:
    """max - min of the mean vector."""
    return np.max(y, axis=-1) - np.min(y, axis=-1)


def t_skew(y: np.ndarray) -> np.ndarray:
    """Standardized third central moment; 0 for a constant vector."""
    y = np.sort(y, axis=-1)
    I = y.shape[-1]
    center = np.sum(y, axis=-1, keepdims=True) / I
    d = y - center
    m2 = np.sum(d * d, axis=-1) / I
    m3 = np.sum(d * d * d, axis=-1) / I
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m2 > 0.0, m3 / np.power(m2, 1.5), 0.0)


def t_maxabs_dev(y: np.ndarray) -> np.ndarray:
    """Largest absolute deviation from the coordinate mean."""
    y = np.sort(y, axis=-1)
    center = np.sum(y, axis=-1, keepdims=True) / y.shape[-1]
    return np.max(np.abs(y - center), axis=-1)


def resid_chisq_total(r: np.ndarray, sigma2: float) -> np.ndarray:
    """Sum of squared residuals over sigma2 (chi-square scaled)."""
    sq = np.sort(np.reshape(r * r, r.shape[:-2] + (-1,)), axis=-1)
    return np.sum(sq, axis=-1) / sigma2


def resid_max_std(r: np.ndarray, sigma2: float) -> np.ndarray:
    """Largest absolute standardized residual."""
    flat = np.reshape(r, r.shape[:-2] + (-1,))
    return np.max(np.abs(flat), axis=-1) / math.sqrt(sigma2)


def v_mahalanobis(observed: np.ndarray, draws: np.ndarray, I: int):
    """Squared Mahalanobis distance of V in a variance-stabilized coordinate.

    V is mapped to w = (s/I, log((q - s^2/I + 1e-12)/(I-1))); location and
    covariance are estimated from the reference draws, and the distance is
    evaluated for the draws and the observed point against those estimates.
    """
    rows = np.vstack([np.asarray(observed, dtype=float)[None, :], draws])
    s = rows[:, 0]
    q = rows[:, 1]
    rho2 = np.maximum(q - s * s / I, 0.0)
    w = np.column_stack([s / I, np.log((rho2 + 1e-12) / (I - 1))])
    ref = w[1:]
    center = ref.mean(axis=0)
    cov = np.cov(ref, rowvar=False, ddof=1)
    try:
        cinv = np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        cinv = np.linalg.pinv(cov)
    d = w - center
    vals = np.einsum("ij,jk,ik->i", d, cinv, d)
    return float(vals[0]), vals[1:]


class DiscrepancyRegistry:
    """Named discrepancies keyed by the space they act on."""

    _PROBE_DIMS = (3, 5, 8)

    def __init__(self):
        self._by_name = {}

    def register(self, disc: Discrepancy) -> Discrepancy:
        if disc.name in self._by_name:
            raise InvalidParameter(f"discrepancy {disc.name!r} already registered")
        if disc.space == T_SPACE:
            self._probe_permutation_invariance(disc)
        self._by_name[disc.name] = disc
        return disc

    def get(self, name: str, space: str = None) -> Discrepancy:
        try:
            disc = self._by_name[name]
        except KeyError:
            raise UnknownDiscrepancy(
                f"no discrepancy named {name!r}; known: {sorted(self._by_name)}"
            ) from None
        if space is not None and disc.space != space:
            raise InvalidParameter(
                f"discrepancy {name!r} acts on {disc.space}-space, need {space}-space")
        return disc

    def names(self, space: str = None) -> list:
        return sorted(n for n, d in self._by_name.items()
                      if space is None or d.space == space)

    def _probe_permutation_invariance(self, disc: Discrepancy) -> None:
        # Sanity probe, not a proof: symmetric statistics must agree on a few
        # seeded vectors and their permutations.
        gen = np.random.default_rng(20210817)
        for dim in self._PROBE_DIMS:
            y = gen.standard_normal(dim) * 3.0
            try:
                base = float(np.asarray(disc.func(y)))
            except Exception:
                continue  # statistic not defined at this dimension
            for _ in range(3):
                perm = gen.permutation(dim)
                value = float(np.asarray(disc.func(y[perm])))
                if not math.isclose(base, value, rel_tol=1e-9, abs_tol=1e-12):
                    raise InvalidParameter(
                        f"T-space discrepancy {disc.name!r} is not permutation-"
                        f"invariant (dim {dim}: {base} vs {value})")


REGISTRY = DiscrepancyRegistry()
REGISTRY.register(Discrepancy("range", T_SPACE, t_range, vectorized=True))
REGISTRY.register(Discrepancy("skew", T_SPACE, t_skew, vectorized=True))
REGISTRY.register(Discrepancy("maxabs_dev", T_SPACE, t_maxabs_dev, vectorized=True))
REGISTRY.register(Discrepancy("chisq_total", RESIDUAL_SPACE, resid_chisq_total,
                              vectorized=True))
REGISTRY.register(Discrepancy("max_std_resid", RESIDUAL_SPACE, resid_max_std,
                              vectorized=True))
REGISTRY.register(Discrepancy("mahalanobis_mv", V_SPACE, v_mahalanobis,
                              vectorized=True))


def mc_pvalue(observed_h: float, reference_draws, *, seed: int = 0,
              discrepancy_name: str = "") -> PValueResult:
    """Monte Carlo p-value (1 + #{draws >= observed}) / (N + 1).

    The add-one correction keeps p in [1/(N+1), 1] and valid as a p-value;
    the comparison uses a TIE_TOL relative band so that point-mass reference
    laws register their ties. Warns DegenerateDiscrepancyWarning when the
    draws have zero sample variance.
    """
    draws = np.asarray(reference_draws, dtype=float).ravel()
    if draws.size == 0:
        raise EmptyDraws("mc_pvalue needs at least one reference draw")
    if not np.all(np.isfinite(draws)):
        raise NonFiniteValue("reference draws contain NaN or infinite values")
    observed_h = float(observed_h)
    if not math.isfinite(observed_h):
        raise NonFiniteValue(f"observed statistic is not finite: {observed_h}")
    N = draws.size
    tol = TIE_TOL * max(1.0, abs(observed_h))
    exceed = int(np.count_nonzero(draws >= observed_h - tol))
    p = (1.0 + exceed) / (N + 1.0)
    stderr = math.sqrt(p * (1.0 - p) / N)
    if float(np.var(draws)) == 0.0:
        warnings.warn(
            f"discrepancy {discrepancy_name or '<unnamed>'!r} is constant over "
            "the reference draws; the check carries no information",
            DegenerateDiscrepancyWarning, stacklevel=2)
    return PValueResult(p, N, seed, stderr, discrepancy_name, observed_h)


# --- replicate chunk runners (top level so worker processes can unpickle) ---

def _eval_t_rows(disc: Discrepancy, rows: np.ndarray) -> np.ndarray:
    if disc.vectorized:
        return np.asarray(disc.func(rows), dtype=float)
    return np.array([float(disc.func(rows[i])) for i in range(rows.shape[0])])


def _eval_residual_rows(disc: Discrepancy, mats: np.ndarray, sigma2: float) -> np.ndarray:
    if disc.vectorized:
        return np.asarray(disc.func(mats, sigma2), dtype=float)
    return np.array([float(disc.func(mats[i], sigma2)) for i in range(mats.shape[0])])


def _chunk_model(payload, start, stop):
    rng = RngStream(payload["seed"], payload["base"] + start)
    mats = sample_residual_matrix_many(payload["model"], rng, stop - start)
    return _eval_residual_rows(payload["disc"], mats, payload["model"].sigma2)


def _chunk_pi2(payload, start, stop):
    rng = RngStream(payload["seed"], payload["base"] + start)
    rows = sample_T_given_V_many(payload["v"], payload["I"], helmert_basis(payload["I"]),
                                 rng, stop - start)
    return _eval_t_rows(payload["disc"], rows)


def _chunk_pi1(payload, start, stop):
    rng = RngStream(payload["seed"], payload["base"] + start)
    return sample_V_from_prior_many(payload["prior"], payload["model"], rng, stop - start)


def _chunk_pi2_star(payload, start, stop):
    rng = RngStream(payload["seed"], payload["base"] + start)
    rows = sample_T_from_prior_many(payload["prior"], payload["model"], rng, stop - start)
    return _eval_t_rows(payload["disc"], rows)


_CHUNK_RUNNERS = {"model": _chunk_model, "pi2": _chunk_pi2,
                  "pi1": _chunk_pi1, "pi2_star": _chunk_pi2_star}


def _run_chunk(args):
    kind, payload, start, stop = args
    return _CHUNK_RUNNERS[kind](payload, start, stop)


def _reference_values(kind: str, payload: dict, n_draws: int, workers: int) -> np.ndarray:
    if n_draws < 1:
        raise EmptyDraws("n_draws must be >= 1")
    if workers <= 1 or n_draws == 1:
        return _CHUNK_RUNNERS[kind](payload, 0, n_draws)
    step = (n_draws + workers - 1) // workers
    bounds = [(a, min(a + step, n_draws)) for a in range(0, n_draws, step)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(kind, payload, a, b) for a, b in bounds]))
    return np.concatenate(parts, axis=0)


# --- stage checks ---

@dataclass(frozen=True)
class Skipped:
    """Marker returned when a check does not apply."""

    status: str
    reason: str


def _require_space(disc: Discrepancy, space: str) -> None:
    if disc.space != space:
        raise InvalidParameter(
            f"discrepancy {disc.name!r} acts on {disc.space}-space, need {space}-space")


def _require_consistent(data: GroupedDataset, model: SamplingModel) -> None:
    if model.I != data.I or model.n != data.n:
        raise InvalidParameter(
            f"model shape ({model.I}, {model.n}) != data shape ({data.I}, {data.n})")


def check_model(data: GroupedDataset, model: SamplingModel, h: Discrepancy,
                n_draws: int, rng: RngStream, *, workers: int = 1) -> PValueResult:
    """Sampling-model check against the conditional residual law.

    Raises NoResidualInformation when n = 1 (residuals are identically zero).
    """
    _require_space(h, RESIDUAL_SPACE)
    _require_consistent(data, model)
    if model.n == 1:
        raise NoResidualInformation(
            "n = 1: every residual is exactly 0, the model check is uninformative")
    T = compute_T(data)
    observed = float(np.asarray(h.func(compute_residuals(data, T), model.sigma2)))
    payload = {"seed": rng.seed, "base": rng.stream_id, "model": model, "disc": h}
    draws = _reference_values("model", payload, n_draws, workers)
    return mc_pvalue(observed, draws, seed=rng.seed, discrepancy_name=h.name)


def check_pi2(data: GroupedDataset, model: SamplingModel, h: Discrepancy,
              n_draws: int, rng: RngStream, *, workers: int = 1) -> PValueResult:
    """Second-level check against the sphere law of T given V.

    Takes no hyperprior: the reference law conditions on V, which removes the
    first-level prior entirely. Raises DegenerateDiscrepancy when h is
    constant over a positive-dimensional constraint set (h is then a function
    of (s, q) alone and cannot discriminate).
    """
    _require_space(h, T_SPACE)
    _require_consistent(data, model)
    T = compute_T(data)
    v = compute_V(T)
    observed = float(np.asarray(h.func(T.means)))
    payload = {"seed": rng.seed, "base": rng.stream_id, "v": v, "I": data.I, "disc": h}
    draws = _reference_values("pi2", payload, n_draws, workers)
    if float(np.var(draws)) == 0.0:
        point_mass = (data.I == 2 or
                      constraint_radius2(v, data.I) <= FEASIBILITY_TOL * max(1.0, abs(v.q)))
        if not point_mass:
            raise DegenerateDiscrepancy(
                f"discrepancy {h.name!r} is constant on the constraint set; it is "
                "a function of (s, q) alone and cannot detect second-level conflict")
    return mc_pvalue(observed, draws, seed=rng.seed, discrepancy_name=h.name)


def check_pi1(data: GroupedDataset, model: SamplingModel, prior: HyperPrior,
              d: Discrepancy, n_draws: int, rng: RngStream, *, workers: int = 1):
    """First-level check of V against its prior predictive.

    Returns Skipped for the improper flat prior, whose selection is an
    assertion that it never conflicts with the data.
    """
    _require_space(d, V_SPACE)
    _require_consistent(data, model)
    if not prior.is_proper:
        return Skipped(STATUS_SKIPPED_IMPROPER,
                       "improper flat hyperprior: never conflicts with the data")
    v = compute_V(compute_T(data))
    payload = {"seed": rng.seed, "base": rng.stream_id, "prior": prior, "model": model}
    rows = _reference_values("pi1", payload, n_draws, workers)
    observed_d, ref_d = d.func(np.array([v.s, v.q]), rows, data.I)
    return mc_pvalue(observed_d, ref_d, seed=rng.seed, discrepancy_name=d.name)


def check_pi2_star(data: GroupedDataset, model: SamplingModel, prior: HyperPrior,
                   h: Discrepancy, n_draws: int, rng: RngStream,
                   *, workers: int = 1) -> PValueResult:
    """Overall second-level check of T against its marginal prior predictive."""
    _require_space(h, T_SPACE)
    _require_consistent(data, model)
    if not prior.is_proper:
        raise ImproperPriorNotSamplable(
            "the marginal predictive for T requires a proper hyperprior")
    observed = float(np.asarray(h.func(compute_T(data).means)))
    payload = {"seed": rng.seed, "base": rng.stream_id, "prior": prior,
               "model": model, "disc": h}
    draws = _reference_values("pi2_star", payload, n_draws, workers)
    return mc_pvalue(observed, draws, seed=rng.seed, discrepancy_name=h.name)


def check_simple(xbar: float, n: int, sigma2: float, mu0: float, tau0sq: float) -> float:
    """Closed-form conflict check for the one-level conjugate normal model.

    The prior predictive of the sample mean is N(mu0, tau0sq + sigma2/n);
    with h(t) = |t - mu0| standardized, p = 2*(1 - Phi(z)).
    """
    if n < 1:
        raise InvalidParameter(f"n must be >= 1, got {n}")
    if not (sigma2 > 0 and tau0sq > 0):
        raise InvalidParameter("sigma2 and tau0sq must be > 0")
    z = abs(xbar - mu0) / math.sqrt(tau0sq + sigma2 / n)
    return math.erfc(z / math.sqrt(2.0))


# --- the ordered protocol ---

def _decide(p: float, alpha: float) -> str:
    return EVIDENCE_OF_CONFLICT if p <= alpha else NO_EVIDENCE


def run_protocol(data: GroupedDataset, model: SamplingModel, prior: HyperPrior,
                 *, alpha: float = 0.05, n_draws: int = 10000, seed: int = 1,
                 discrepancies: dict = None, workers: int = 1) -> CheckReport:
    """Run model -> pi2 -> pi1 with gating and assemble the report.

    Checking the sampling model comes first; a stage finding conflict (or
    erroring) gates everything after it, while a skipped stage does not.
    Stage k draws from stream_ids 2^60*k + replicate, so the pi2 stage is
    bit-identical across hyperpriors and worker counts. Stage errors are
    folded into the report rather than raised. Parallel execution requires
    picklable discrepancy functions (all built-ins qualify).
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidParameter(f"alpha must be in (0, 1), got {alpha}")
    names = dict(DEFAULT_DISCREPANCIES)
    if discrepancies:
        unknown = set(discrepancies) - set(DEFAULT_DISCREPANCIES)
        if unknown:
            raise InvalidParameter(f"unknown protocol stages: {sorted(unknown)}")
        names.update(discrepancies)
    h_model = REGISTRY.get(names["model"], RESIDUAL_SPACE)
    h_pi2 = REGISTRY.get(names["pi2"], T_SPACE)
    d_pi1 = REGISTRY.get(names["pi1"], V_SPACE)

    records = []
    gate = False

    def run_stage(stage, func):
        nonlocal gate
        if gate:
            records.append(StageRecord(stage, STATUS_GATED, None, alpha, NOT_RUN))
            return
        rng = RngStream(seed, STAGE_STREAM_BASE[stage])
        try:
            outcome = func(rng)
        except PriorcheckError as exc:
            gate = True
            records.append(StageRecord(stage, STATUS_ERROR, None, alpha, NOT_RUN,
                                       message=str(exc)))
            return
        if isinstance(outcome, Skipped):
            records.append(StageRecord(stage, outcome.status, None, alpha, SKIPPED,
                                       message=outcome.reason))
            return
        decision = _decide(outcome.p, alpha)
        if decision == EVIDENCE_OF_CONFLICT:
            gate = True
        records.append(StageRecord(stage, STATUS_RUN, outcome, alpha, decision))

    def model_stage(rng):
        if data.n == 1:
            return Skipped(STATUS_SKIPPED_NO_RESIDUALS,
                           "n = 1: residuals carry no model-check information")
        return check_model(data, model, h_model, n_draws, rng, workers=workers)

    run_stage("model", model_stage)
    run_stage("pi2", lambda rng: check_pi2(data, model, h_pi2, n_draws, rng,
                                           workers=workers))
    run_stage("pi1", lambda rng: check_pi1(data, model, prior, d_pi1, n_draws, rng,
                                           workers=workers))

    ready = all(r.decision in (NO_EVIDENCE, SKIPPED) for r in records)
    return CheckReport(I=data.I, n=data.n, stages=tuple(records),
                       inference_ready=ready)
