"""Random-variate generation for every factor of the staged check.

All samplers are pure functions of their arguments including the stream
address, and each `*_many` variant draws replicate k from substream k of the
given root stream. Batch post-processing uses only row-local operations with a
fixed accumulation order, so results are bit-identical no matter how the
replicate range is chunked across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionTooSmall, ImproperPriorNotSamplable, InvalidParameter
from .model import HyperPrior, HyperStat, SamplingModel, constraint_radius2
from .rng import ReusableStream, RngStream, as_generator
from .sufficiency import canonical_sum_rows, compute_V
from .model import SufficientStat

_ORTHO_TOL = 1e-12
_TINY_NORM = 1e-300


@dataclass(frozen=True, eq=False)
class ComplementBasis:
    """I x (I-1) matrix with orthonormal columns orthogonal to the ones vector."""

    I: int
    A: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.shape != (self.I, self.I - 1):
            raise InvalidParameter(f"basis must be {self.I} x {self.I - 1}")
        gram = A.T @ A
        if np.max(np.abs(gram - np.eye(self.I - 1))) > _ORTHO_TOL:
            raise InvalidParameter("basis columns are not orthonormal")
        if np.max(np.abs(A.sum(axis=0))) > _ORTHO_TOL:
            raise InvalidParameter("basis columns are not orthogonal to ones")
        out = A.copy()
        out.flags.writeable = False
        object.__setattr__(self, "A", out)


@lru_cache(maxsize=None)
def helmert_basis(I: int) -> ComplementBasis:
    """Deterministic Helmert basis of the complement of the ones direction.

    Column k (1-based) has entries 1/sqrt(k(k+1)) in rows 1..k and
    -k/sqrt(k(k+1)) in row k+1, zeros below.
    """
    if I < 2:
        raise DimensionTooSmall(f"need I >= 2, got {I}")
    A = np.zeros((I, I - 1))
    for k in range(1, I):
        scale = 1.0 / math.sqrt(k * (k + 1))
        A[:k, k - 1] = scale
        A[k, k - 1] = -k * scale
    return ComplementBasis(I, A)


def _unit_sphere_block(gen: np.random.Generator, dim: int) -> np.ndarray:
    # Gaussian direction method; resample the (probability ~0) near-zero norm
    # to avoid dividing by zero.
    while True:
        v = gen.standard_normal(dim)
        norm = np.sqrt(np.sum(v * v))
        if norm >= _TINY_NORM:
            return v / norm


def sample_unit_sphere(dim: int, rng) -> np.ndarray:
    """One point uniform on the unit sphere in R^dim."""
    if dim < 1:
        raise InvalidParameter(f"dim must be >= 1, got {dim}")
    return _unit_sphere_block(as_generator(rng), dim)


def sample_unit_sphere_many(dim: int, rng: RngStream, count: int) -> np.ndarray:
    """(count, dim) uniform sphere points; row k from substream k."""
    if dim < 1:
        raise InvalidParameter(f"dim must be >= 1, got {dim}")
    bank = ReusableStream()
    out = np.empty((count, dim))
    for k in range(count):
        out[k] = _unit_sphere_block(bank.rekey(rng.seed, rng.stream_id + k), dim)
    return out


def _affine_rows(U: np.ndarray, center: float, rho: float, A: np.ndarray) -> np.ndarray:
    # y[r] = center + rho * A @ U[r], accumulated column by column so the
    # result for a row never depends on which rows share the batch.
    out = np.full((U.shape[0], A.shape[0]), float(center))
    for j in range(A.shape[1]):
        out += (rho * U[:, j])[:, None] * A[None, :, j]
    return out


def sample_T_given_V(v: HyperStat, I: int, basis: ComplementBasis, rng) -> np.ndarray:
    """One draw from the conditional law of the mean vector given V.

    Uniform on the sphere of squared radius q - s^2/I centered at (s/I)*1
    inside the hyperplane {sum(y) = s}: y = (s/I)*1 + rho * A @ u with u
    uniform on the unit sphere in R^(I-1).
    """
    if basis.I != I:
        raise InvalidParameter(f"basis dimension {basis.I} != I = {I}")
    rho = math.sqrt(constraint_radius2(v, I))
    u = _unit_sphere_block(as_generator(rng), I - 1)
    return _affine_rows(u[None, :], v.s / I, rho, basis.A)[0]


def sample_T_given_V_many(v: HyperStat, I: int, basis: ComplementBasis,
                          rng: RngStream, count: int) -> np.ndarray:
    """(count, I) draws from the conditional law; row k from substream k."""
    if basis.I != I:
        raise InvalidParameter(f"basis dimension {basis.I} != I = {I}")
    rho = math.sqrt(constraint_radius2(v, I))
    U = sample_unit_sphere_many(I - 1, rng, count)
    return _affine_rows(U, v.s / I, rho, basis.A)


def _centered_noise(gen: np.random.Generator, I: int, n: int, sigma: float) -> np.ndarray:
    z = gen.standard_normal((I, n)) * sigma
    return z - z.mean(axis=1, keepdims=True)


def sample_residual_matrix(model: SamplingModel, rng) -> np.ndarray:
    """One I x n draw of within-group residuals (rows sum to 0).

    Matches the conditional law of (x_ij - mean_i) given the group means.
    """
    return _centered_noise(as_generator(rng), model.I, model.n,
                           math.sqrt(model.sigma2))


def sample_residual_matrix_many(model: SamplingModel, rng: RngStream,
                                count: int) -> np.ndarray:
    """(count, I, n) residual draws; replicate k from substream k."""
    bank = ReusableStream()
    sigma = math.sqrt(model.sigma2)
    out = np.empty((count, model.I, model.n))
    for k in range(count):
        out[k] = _centered_noise(bank.rekey(rng.seed, rng.stream_id + k),
                                 model.I, model.n, sigma)
    return out


def sample_hyper(prior: HyperPrior, rng) -> tuple:
    """Draw (mu, tau2) from a proper hyperprior."""
    if not prior.is_proper:
        raise ImproperPriorNotSamplable(
            "the improper flat prior cannot be sampled; its check stage is skipped")
    gen = as_generator(rng)
    mu = prior.m0 + math.sqrt(prior.s0sq) * gen.standard_normal()
    g = gen.gamma(prior.a0, 1.0 / prior.b0)
    while g == 0.0:  # gamma underflow guard, probability ~0
        g = gen.gamma(prior.a0, 1.0 / prior.b0)
    return float(mu), float(1.0 / g)


def _t_marginal_block(gen: np.random.Generator, mu: float, tau2: float,
                      model: SamplingModel) -> np.ndarray:
    scale = math.sqrt(tau2 + model.mean_variance)
    return mu + scale * gen.standard_normal(model.I)


def sample_V_given_hyper(mu: float, tau2: float, model: SamplingModel, rng) -> HyperStat:
    """Draw T ~ N_I(mu*1, (tau2 + sigma2/n) Id) and reduce it to V."""
    if tau2 < 0:
        raise InvalidParameter(f"tau2 must be >= 0, got {tau2}")
    T = _t_marginal_block(as_generator(rng), mu, tau2, model)
    return compute_V(SufficientStat(T))


def sample_T_from_prior_many(prior: HyperPrior, model: SamplingModel,
                             rng: RngStream, count: int) -> np.ndarray:
    """(count, I) draws of T from the marginal prior predictive.

    Replicate k draws (mu, tau2) from the hyperprior and then T, all from
    substream k.
    """
    if not prior.is_proper:
        raise ImproperPriorNotSamplable(
            "the improper flat prior cannot be sampled; its check stage is skipped")
    bank = ReusableStream()
    out = np.empty((count, model.I))
    for k in range(count):
        gen = bank.rekey(rng.seed, rng.stream_id + k)
        mu, tau2 = sample_hyper(prior, gen)
        out[k] = _t_marginal_block(gen, mu, tau2, model)
    return out


def sample_V_from_prior_many(prior: HyperPrior, model: SamplingModel,
                             rng: RngStream, count: int) -> np.ndarray:
    """(count, 2) prior-predictive draws of (s, q); replicate k from substream k."""
    T = sample_T_from_prior_many(prior, model, rng, count)
    return np.column_stack([canonical_sum_rows(T), canonical_sum_rows(T * T)])
