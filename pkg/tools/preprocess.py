"""
Preprocessing Module
Centering, length normalization, scatter statistics and LDA / LDA-diag projections.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import linalg

from errors import BadRank, DimensionMismatch, InsufficientClasses, SingularScatter, ZeroVector
from resources.embedding_resource import EmbeddingArchive

logger = logging.getLogger(__name__)

WITHIN_RIDGE = 1e-6


def _as_float_array(value, ndim: int) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("array entries must be finite")
    array.flags.writeable = False
    return array


class Projection(BaseModel):
    """Affine map v -> basis.T @ (v - mean) from d to k dimensions."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    basis: np.ndarray

    @field_validator("mean", mode="before")
    @classmethod
    def _mean(cls, value):
        return _as_float_array(value, 1)

    @field_validator("basis", mode="before")
    @classmethod
    def _basis(cls, value):
        return _as_float_array(value, 2)

    @model_validator(mode="after")
    def _check(self):
        if self.basis.shape[0] != self.mean.size or self.basis.shape[1] < 1:
            raise ValueError(f"basis shape {self.basis.shape} does not fit a "
                             f"{self.mean.size}-dim mean")
        return self

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Projection):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.basis, other.basis)


class ScatterPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    between: np.ndarray
    within: np.ndarray
    mean: np.ndarray
    n_speakers: int = Field(ge=0, default=0)
    n_samples: int = Field(ge=0, default=0)

    @field_validator("between", "within", mode="before")
    @classmethod
    def _square(cls, value):
        matrix = _as_float_array(value, 2)
        if matrix.shape[0] != matrix.shape[1]:
            raise ValueError("scatter matrices must be square")
        return matrix

    @field_validator("mean", mode="before")
    @classmethod
    def _mean(cls, value):
        return _as_float_array(value, 1)

    @model_validator(mode="after")
    def _check(self):
        d = self.mean.size
        if self.between.shape != (d, d) or self.within.shape != (d, d):
            raise ValueError("scatter matrices must be d x d for a d-dim mean")
        for name in ("between", "within"):
            matrix = getattr(self, name)
            scale = max(np.abs(matrix).max(), 1.0)
            if np.abs(matrix - matrix.T).max() > 1e-10 * scale:
                raise ValueError(f"{name} scatter is not symmetric")
        return self

    @property
    def dim(self) -> int:
        return self.mean.size


def length_normalize(vector) -> np.ndarray:
    """Rescale to norm sqrt(d), keeping the direction."""
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ZeroVector("cannot length-normalize a zero vector")
    return np.sqrt(v.size) * v / norm


def length_normalize_archive(archive: EmbeddingArchive) -> EmbeddingArchive:
    norms = np.linalg.norm(archive.vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroVector(f"record '{archive.ids[zero[0]]}' is a zero vector")
    vectors = np.sqrt(archive.dim) * archive.vectors / norms[:, None]
    return archive.with_vectors(vectors)


def center(archive: EmbeddingArchive,
           mean: Optional[np.ndarray] = None) -> Tuple[EmbeddingArchive, np.ndarray]:
    """Subtract ``mean`` (the archive mean when omitted); return it too."""
    if mean is None:
        if len(archive) == 0:
            mean = np.zeros(archive.dim)
        else:
            mean = archive.vectors.mean(axis=0)
    else:
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        if mean.size != archive.dim:
            raise DimensionMismatch(f"mean has dim {mean.size}, archive has dim {archive.dim}")
    return archive.with_vectors(archive.vectors - mean), mean


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def compute_scatter(archive: EmbeddingArchive) -> ScatterPair:
    """Within/between-speaker scatter with 1/N normalization.

    Speakers are visited in sorted order so accumulation is reproducible.
    """
    codes, names = archive.speaker_codes()
    n_speakers = len(names)
    if n_speakers < 2:
        raise InsufficientClasses(f"scatter needs at least 2 speakers, found {n_speakers}")

    X = archive.vectors
    n_total = X.shape[0]
    counts = np.bincount(codes, minlength=n_speakers).astype(np.float64)
    sums = np.zeros((n_speakers, archive.dim))
    np.add.at(sums, codes, X)
    speaker_means = sums / counts[:, None]
    global_mean = X.mean(axis=0)

    resid = X - speaker_means[codes]
    within = resid.T @ resid / n_total
    offsets = speaker_means - global_mean
    between = (offsets * counts[:, None]).T @ offsets / n_total

    return ScatterPair(between=_symmetrize(between), within=_symmetrize(within),
                       mean=global_mean, n_speakers=n_speakers, n_samples=n_total)


def lda_from_scatter(scatter: ScatterPair, k: int, diag_within: bool = False) -> Projection:
    d = scatter.dim
    max_rank = min(d, scatter.n_speakers - 1)
    if not 1 <= k <= max_rank:
        raise BadRank(f"LDA dimension {k} outside [1, {max_rank}] "
                      f"(d={d}, speakers={scatter.n_speakers})")

    within = np.diag(np.diag(scatter.within)) if diag_within else scatter.within
    trace = np.trace(within)
    if not trace > 0.0:
        raise SingularScatter("within-speaker scatter has zero trace")
    within_reg = within + WITHIN_RIDGE * trace / d * np.eye(d)
    try:
        chol = linalg.cholesky(within_reg, lower=True)
    except linalg.LinAlgError:
        raise SingularScatter("regularized within-speaker scatter is not positive definite")

    # whiten: L^-1 B L^-T, then a symmetric eigenproblem
    tmp = linalg.solve_triangular(chol, scatter.between, lower=True)
    whitened = _symmetrize(linalg.solve_triangular(chol, tmp.T, lower=True))
    eigvals, eigvecs = linalg.eigh(whitened)
    order = np.argsort(eigvals, kind="stable")[::-1][:k]
    basis = linalg.solve_triangular(chol.T, eigvecs[:, order], lower=False)

    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    basis = basis * signs

    logger.debug("LDA %d -> %d (diag_within=%s), top eigenvalue %.4g",
                 d, k, diag_within, eigvals[order[0]])
    return Projection(mean=scatter.mean, basis=basis)


def fit_lda(archive: EmbeddingArchive, k: int, diag_within: bool = False) -> Projection:
    return lda_from_scatter(compute_scatter(archive), k, diag_within)


def apply_projection(projection: Projection, archive: EmbeddingArchive) -> EmbeddingArchive:
    if archive.dim != projection.input_dim:
        raise DimensionMismatch(f"projection expects dim {projection.input_dim}, "
                                f"archive has dim {archive.dim}")
    projected = (archive.vectors - projection.mean) @ projection.basis
    return EmbeddingArchive(dim=projection.output_dim, ids=list(archive.ids),
                            speakers=list(archive.speakers), vectors=projected)
