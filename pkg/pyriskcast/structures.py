"""Proximity matrices and sparse precision structures for the spatial and monthly priors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph
from sksparse import cholmod

from .enums import HyperRole, ProximityKind, SpatialStructure
from .exceptions import ConfigError, NumericalError, StructureError

logger = logging.getLogger(__name__)

# Eigenvalues below this fraction of the largest count as zero.
NULL_EIGEN_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class ProximityMatrix:
    """Symmetric 0/1 proximity over regions with zero diagonal."""

    regions: tuple[str, ...]
    w: np.ndarray
    kind: ProximityKind

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=float)
        if w.shape != (len(self.regions), len(self.regions)):
            raise StructureError(f"proximity shape {w.shape} does not match {len(self.regions)} regions")
        if not np.array_equal(w, w.T):
            raise StructureError("proximity matrix must be symmetric")
        if np.any(np.diag(w) != 0):
            raise StructureError("proximity matrix must have a zero diagonal")
        if not np.all((w == 0) | (w == 1)):
            raise StructureError("proximity matrix must be 0/1")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> np.ndarray:
        """Neighbor counts n_i."""
        return self.w.sum(axis=1)

    @property
    def isolated(self) -> tuple[str, ...]:
        return tuple(r for r, k in zip(self.regions, self.n) if k == 0)

    def components(self) -> list[list[str]]:
        n_comp, labels = csgraph.connected_components(sparse.csr_matrix(self.w), directed=False)
        return [[r for r, lab in zip(self.regions, labels) if lab == c] for c in range(n_comp)]

    def require_car_ready(self, *, connected: bool) -> None:
        """Escalate isolated regions (and, for intrinsic priors, disconnection) to errors."""
        if self.isolated:
            raise StructureError(f"isolated regions cannot carry a CAR prior: {', '.join(self.isolated)}")
        if connected:
            components = self.components()
            if len(components) > 1:
                raise StructureError("proximity graph is disconnected", components=components)


def adjacency_from_neighbor_list(
    pairs: Sequence[tuple[str, str]], regions: Sequence[str]
) -> ProximityMatrix:
    regions = tuple(regions)
    index = {r: i for i, r in enumerate(regions)}
    w = np.zeros((len(regions), len(regions)))
    for a, b in pairs:
        if a == b:
            raise StructureError(f"self-pair ({a}, {b}) in neighbor list")
        for r in (a, b):
            if r not in index:
                raise StructureError(f"unknown region {r!r} in neighbor list")
        w[index[a], index[b]] = w[index[b], index[a]] = 1.0
    prox = ProximityMatrix(regions=regions, w=w, kind=ProximityKind.NEIGHBOR)
    if prox.isolated:
        logger.warning("Regions without neighbors: %s", ", ".join(prox.isolated))
    return prox


def distance_threshold_matrix(dist: np.ndarray, regions: Sequence[str] | None = None) -> ProximityMatrix:
    """w_ij = 1 iff dist_ij is strictly below the median off-diagonal distance."""
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise StructureError(f"distance matrix must be square, got {dist.shape}")
    if not np.allclose(dist, dist.T, rtol=0.0, atol=1e-9):
        raise StructureError("distance matrix must be symmetric")
    size = dist.shape[0]
    upper = dist[np.triu_indices(size, k=1)]
    if np.any(upper <= 0) or not np.all(np.isfinite(upper)):
        raise StructureError("off-diagonal distances must be finite and positive")
    median = float(np.median(upper))
    w = (dist < median).astype(float)
    np.fill_diagonal(w, 0.0)
    regions = tuple(regions) if regions is not None else tuple(str(i) for i in range(size))
    prox = ProximityMatrix(regions=regions, w=w, kind=ProximityKind.DISTANCE)
    if prox.isolated:
        logger.warning("Regions with no distance below the %.3g km median: %s", median, ", ".join(prox.isolated))
    return prox


@dataclass(frozen=True, eq=False)
class PrecisionStructure:
    """A prior precision up to the scalar multiplier named by `multiplier_role`.

    `constraints` rows span the null space of `q` (one row per zero eigenvalue).
    `offset` is the diagonal inflation already inside `q` (proper CAR d).
    """

    q: sparse.csr_matrix
    rank_deficiency: int
    constraints: np.ndarray
    multiplier_role: HyperRole
    offset: float = 0.0

    def __post_init__(self) -> None:
        q = sparse.csr_matrix(self.q, dtype=float)
        if q.shape[0] != q.shape[1]:
            raise StructureError(f"precision must be square, got {q.shape}")
        asym = abs(q - q.T).max() if q.nnz else 0.0
        if asym > 1e-14 * max(abs(q).max(), 1.0):
            raise StructureError("precision structure must be symmetric")
        constraints = np.atleast_2d(np.asarray(self.constraints, dtype=float)).reshape(-1, q.shape[0])
        if constraints.shape[0] != self.rank_deficiency:
            raise StructureError(
                f"{constraints.shape[0]} constraints declared for rank deficiency {self.rank_deficiency}"
            )
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "constraints", constraints)

    @property
    def size(self) -> int:
        return self.q.shape[0]

    @property
    def rank(self) -> int:
        return self.size - self.rank_deficiency

    @cached_property
    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues (ascending) and eigenvectors of the dense q."""
        return np.linalg.eigh(self.q.toarray())

    @property
    def spectrum(self) -> np.ndarray:
        return self.eigh[0]

    def log_pdet(self, offset: float | None = None) -> float:
        """Log pseudo-determinant, optionally with the diagonal inflation moved to `offset`."""
        values = self.spectrum
        if offset is not None:
            values = values - self.offset + offset
        return float(np.sum(np.log(values[self.rank_deficiency :])))

    def with_offset(self, offset: float) -> PrecisionStructure:
        if offset == self.offset:
            return self
        q = self.q + (offset - self.offset) * sparse.identity(self.size, format="csr")
        return PrecisionStructure(q, self.rank_deficiency, self.constraints, self.multiplier_role, offset)


def icar_precision(prox: ProximityMatrix) -> PrecisionStructure:
    """q = D - W with a sum-to-zero constraint."""
    prox.require_car_ready(connected=True)
    q = sparse.diags(prox.n) - sparse.csr_matrix(prox.w)
    return PrecisionStructure(
        q=q.tocsr(),
        rank_deficiency=1,
        constraints=np.ones((1, len(prox.regions))),
        multiplier_role=HyperRole.TAU_THETA,
    )


def proper_car_precision(prox: ProximityMatrix, d: float) -> PrecisionStructure:
    """q = (D + dI) - W; positive definite, unconstrained."""
    if not d > 0:
        raise ConfigError(f"proper CAR needs d > 0, got {d}")
    prox.require_car_ready(connected=False)
    q = sparse.diags(prox.n + d) - sparse.csr_matrix(prox.w)
    return PrecisionStructure(
        q=q.tocsr(),
        rank_deficiency=0,
        constraints=np.zeros((0, len(prox.regions))),
        multiplier_role=HyperRole.TAU_THETA,
        offset=float(d),
    )


def iid_precision(n: int, role: HyperRole = HyperRole.TAU_THETA) -> PrecisionStructure:
    return PrecisionStructure(
        q=sparse.identity(n, format="csr"),
        rank_deficiency=0,
        constraints=np.zeros((0, n)),
        multiplier_role=role,
    )


def bym_structure(prox: ProximityMatrix) -> tuple[PrecisionStructure, PrecisionStructure]:
    """Structured ICAR part (tau_theta) and unstructured identity part (tau_v)."""
    return icar_precision(prox), iid_precision(len(prox.regions), HyperRole.TAU_V)


def cyclic_rw1_precision(period: int = 12) -> PrecisionStructure:
    """First-order random walk over a cycle; December adjoins January."""
    if period < 3:
        raise ConfigError(f"cyclic random walk needs period >= 3, got {period}")
    ones = np.ones(period)
    q = sparse.diags([2 * ones, -ones[:-1], -ones[:-1]], [0, 1, -1], format="lil")
    q[0, period - 1] = q[period - 1, 0] = -1.0
    return PrecisionStructure(
        q=q.tocsr(),
        rank_deficiency=1,
        constraints=np.ones((1, period)),
        multiplier_role=HyperRole.SIGMA2_PHI,
    )


def replicate(structure: PrecisionStructure, n: int) -> PrecisionStructure:
    """Block-diagonal structure of `n` identical blocks sharing one multiplier."""
    if n < 1:
        raise ConfigError(f"need at least one replicate, got {n}")
    eye = sparse.identity(n, format="csr")
    return PrecisionStructure(
        q=sparse.kron(eye, structure.q, format="csr"),
        rank_deficiency=n * structure.rank_deficiency,
        constraints=np.kron(np.eye(n), structure.constraints),
        multiplier_role=structure.multiplier_role,
        offset=structure.offset,
    )


@dataclass(frozen=True, eq=False)
class SpatialSpec:
    """A spatial structure bound to its proximity matrix and, for the proper CAR, d."""

    structure: SpatialStructure
    proximity: ProximityMatrix | None = None
    d: float = 1.0

    def __post_init__(self) -> None:
        if self.structure.uses_proximity and self.proximity is None:
            raise ConfigError(f"spatial structure {self.structure.value} needs a proximity matrix")
        if self.structure is SpatialStructure.PROPER_CAR and not self.d > 0:
            raise ConfigError(f"proper CAR needs d > 0, got {self.d}")

    def blocks(self, n_regions: int) -> list[PrecisionStructure]:
        """Per-year prior structures: one, or two for BYM (structured then unstructured)."""
        if self.structure is SpatialStructure.INDEPENDENT:
            return [iid_precision(n_regions)]
        assert self.proximity is not None
        if len(self.proximity.regions) != n_regions:
            raise StructureError(
                f"proximity covers {len(self.proximity.regions)} regions, panel has {n_regions}"
            )
        if self.structure is SpatialStructure.ICAR:
            return [icar_precision(self.proximity)]
        if self.structure is SpatialStructure.PROPER_CAR:
            return [proper_car_precision(self.proximity, self.d)]
        return list(bym_structure(self.proximity))


# --- Constrained Gaussian draws ---


class ConstrainedGaussian:
    """N(0, P^-1) conditioned on C x = 0, held as a sparse Cholesky factor.

    P may be singular along directions that C removes (intrinsic blocks, or a
    monthly and a yearly effect trading a common shift). The factor is taken of
    P + C'C, which equals P on the constraint surface, so kriging-corrected
    solves and draws follow the same conditioned law. CHOLMOD picks a
    fill-reducing ordering.
    """

    def __init__(self, precision: sparse.spmatrix | np.ndarray, constraints: np.ndarray):
        precision = sparse.csc_matrix(precision, dtype=float)
        self.dim = precision.shape[0]
        self.constraints = np.asarray(constraints, dtype=float).reshape(-1, self.dim)
        self.n_constraints = self.constraints.shape[0]
        augmented = precision
        if self.n_constraints:
            c = sparse.csc_matrix(self.constraints)
            augmented = (precision + c.T @ c).tocsc()
        try:
            self._factor = cholmod.cholesky(augmented)
        except cholmod.CholmodNotPositiveDefiniteError:
            raise NumericalError("precision is not positive definite on the constraint surface") from None
        with np.errstate(invalid="ignore", divide="ignore"):
            self.log_det = float(self._factor.logdet())
        if not math.isfinite(self.log_det):
            raise NumericalError("precision is not positive definite on the constraint surface")
        if self.n_constraints:
            self._pinv_ct = self.solve(self.constraints.T)
            schur = self.constraints @ self._pinv_ct
            try:
                self._schur_chol = linalg.cholesky(schur, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("constraint matrix is rank deficient") from None

    def solve(self, b: np.ndarray) -> np.ndarray:
        """(P + C'C)^-1 b."""
        return self._factor.solve_A(np.asarray(b, dtype=float))

    def correct(self, x: np.ndarray) -> np.ndarray:
        """Conditioning-by-kriging correction: x - A^-1 C' (C A^-1 C')^-1 C x with A = P + C'C."""
        if not self.n_constraints:
            return x
        weights = linalg.cho_solve((self._schur_chol, True), self.constraints @ x)
        return x - self._pinv_ct @ weights

    @property
    def log_det_schur(self) -> float:
        if not self.n_constraints:
            return 0.0
        return 2.0 * float(np.sum(np.log(np.diag(self._schur_chol))))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Zero-mean constrained draws, shape (n, dim)."""
        z = rng.standard_normal((self.dim, n))
        draws = self._factor.apply_Pt(self._factor.solve_Lt(z, use_LDLt_decomposition=False))
        return self.correct(draws).T

    def marginal_variance(self, chunk: int = 256) -> np.ndarray:
        """Diagonal of the conditioned covariance, solving a block of unit vectors at a time."""
        out = np.empty(self.dim)
        for j0 in range(0, self.dim, chunk):
            cols = np.arange(j0, min(j0 + chunk, self.dim))
            unit = np.zeros((self.dim, cols.size))
            unit[cols, np.arange(cols.size)] = 1.0
            out[cols] = self.solve(unit)[cols, np.arange(cols.size)]
        if self.n_constraints:
            half = linalg.solve_triangular(self._schur_chol, self._pinv_ct.T, lower=True)
            out -= np.sum(half**2, axis=0)
        return out

    def covariance(self) -> np.ndarray:
        """Dense conditioned covariance; for small problems and tests."""
        cov = self.solve(np.eye(self.dim))
        if self.n_constraints:
            cov = cov - self._pinv_ct @ linalg.cho_solve((self._schur_chol, True), self._pinv_ct.T)
        return cov


def sample_prior(
    structure: PrecisionStructure,
    multiplier: float,
    rng: np.random.Generator,
    size: int = 1,
) -> np.ndarray:
    """Zero-mean draws of shape (size, n) honoring the null-space constraints."""
    return ConstrainedGaussian(multiplier * structure.q, structure.constraints).sample(rng, size)
