"""
PLDA Module
Two-covariance PLDA: EM training with an optional diagonal within-speaker
covariance (PLDA-diag), log-likelihood-ratio scoring and covariance diagnostics.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import linalg

from errors import DimensionMismatch, InsufficientClasses, SingularCovariance
from resources.embedding_resource import EmbeddingArchive, ScoreSet, Trial, resolve_trials
from tools.preprocess import ScatterPair, compute_scatter

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
INIT_RIDGE = 1e-6
EM_RIDGE = 1e-8


def _sym(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _readonly(value, ndim: int) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("array entries must be finite")
    array.flags.writeable = False
    return array


def _is_pd(matrix: np.ndarray) -> bool:
    try:
        linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def _logdet(factor: Tuple[np.ndarray, bool]) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


class PldaModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mu: np.ndarray
    phi_b: np.ndarray
    phi_w: np.ndarray
    diag_constrained: bool = False

    @field_validator("mu", mode="before")
    @classmethod
    def _mu(cls, value):
        return _readonly(value, 1)

    @field_validator("phi_b", "phi_w", mode="before")
    @classmethod
    def _cov(cls, value):
        return _readonly(value, 2)

    @model_validator(mode="after")
    def _check(self):
        d = self.mu.size
        for name in ("phi_b", "phi_w"):
            matrix = getattr(self, name)
            if matrix.shape != (d, d):
                raise ValueError(f"{name} must be {d} x {d}, got {matrix.shape}")
            scale = max(np.abs(matrix).max(), 1.0)
            if np.abs(matrix - matrix.T).max() > 1e-10 * scale:
                raise ValueError(f"{name} is not symmetric")
        if not _is_pd(self.phi_w):
            raise ValueError("phi_w is not positive definite")
        smallest = float(linalg.eigvalsh(self.phi_b)[0])
        if smallest < -1e-10 * max(abs(float(np.trace(self.phi_b))), 1.0):
            raise ValueError(f"phi_b is not positive semi-definite "
                             f"(smallest eigenvalue {smallest:.3g})")
        if self.diag_constrained and np.any(self.phi_w[~np.eye(d, dtype=bool)] != 0.0):
            raise ValueError("diag-constrained phi_w has non-zero off-diagonals")
        return self

    @property
    def dim(self) -> int:
        return self.mu.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, PldaModel):
            return NotImplemented
        return (self.diag_constrained == other.diag_constrained
                and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.phi_b, other.phi_b)
                and np.array_equal(self.phi_w, other.phi_w))


class EmConfig(BaseModel):
    iterations: int = Field(default=20, ge=1)
    diag_within: bool = False
    seed: int = Field(default=0, ge=0)


class _SpeakerStats:
    """Sufficient statistics of a centered, labeled archive."""

    def __init__(self, archive: EmbeddingArchive, mu: np.ndarray):
        codes, names = archive.speaker_codes()
        self.n_speakers = len(names)
        if self.n_speakers < 2:
            raise InsufficientClasses(
                f"PLDA training needs at least 2 speakers, found {self.n_speakers}")
        centered = archive.vectors - mu
        self.dim = archive.dim
        self.n_samples = centered.shape[0]
        self.counts = np.bincount(codes, minlength=self.n_speakers)
        self.sums = np.zeros((self.n_speakers, self.dim))
        np.add.at(self.sums, codes, centered)
        self.total = centered.T @ centered
        means = self.sums / self.counts[:, None]
        resid = centered - means[codes]
        self.within_total = resid.T @ resid
        self.groups = [(int(n), np.flatnonzero(self.counts == n))
                       for n in np.unique(self.counts)]


def _posteriors(stats: _SpeakerStats, phi_b: np.ndarray,
                phi_w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior means (S x d) and the count-weighted sums of posterior covariances.

    For n utterances with mean offset f/n the posterior of the speaker offset is
    N(B K^-1 f/n, B - B K^-1 B) with K = B + W/n; speakers sharing n share K.
    Also returns sum_s C_s and sum_s n_s C_s.
    """
    means = np.zeros((stats.n_speakers, stats.dim))
    cov_sum = np.zeros((stats.dim, stats.dim))
    weighted_cov_sum = np.zeros((stats.dim, stats.dim))
    for n, members in stats.groups:
        factor = linalg.cho_factor(phi_b + phi_w / n, lower=True)
        gain = linalg.cho_solve(factor, phi_b)
        cov = _sym(phi_b - phi_b @ gain)
        means[members] = (stats.sums[members] / n) @ gain
        cov_sum += members.size * cov
        weighted_cov_sum += members.size * n * cov
    return means, cov_sum, weighted_cov_sum


def _log_likelihood(stats: _SpeakerStats, phi_b: np.ndarray, phi_w: np.ndarray) -> float:
    w_factor = linalg.cho_factor(phi_w, lower=True)
    quad = float(np.trace(linalg.cho_solve(w_factor, stats.within_total)))
    logdet_w = _logdet(w_factor)
    total = stats.n_samples * stats.dim * LOG_2PI
    total += (stats.n_samples - stats.n_speakers) * logdet_w + quad
    for n, members in stats.groups:
        factor = linalg.cho_factor(phi_w + n * phi_b, lower=True)
        sums = stats.sums[members]
        solved = linalg.cho_solve(factor, sums.T)
        total += members.size * _logdet(factor)
        total += float(np.sum(sums.T * solved)) / n
    return -0.5 * total


def log_likelihood(model: PldaModel, archive: EmbeddingArchive) -> float:
    """Marginal log-likelihood of a labeled archive under the model."""
    if archive.dim != model.dim:
        raise DimensionMismatch(f"model dim {model.dim}, archive dim {archive.dim}")
    stats = _SpeakerStats(archive, model.mu)
    return _log_likelihood(stats, model.phi_b, model.phi_w)


def _initial_covariances(archive: EmbeddingArchive, stats: _SpeakerStats,
                         cfg: EmConfig) -> Tuple[np.ndarray, np.ndarray]:
    scatter = compute_scatter(archive)
    d = stats.dim
    eye = np.eye(d)
    phi_b = scatter.between + INIT_RIDGE * np.trace(scatter.between) / d * eye
    phi_w = scatter.within + INIT_RIDGE * np.trace(scatter.within) / d * eye
    if cfg.diag_within:
        phi_w = np.diag(np.diag(phi_w))

    if not _is_pd(phi_w) or not _is_pd(phi_b):
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        scale = 1e-3 * max(np.trace(stats.total) / stats.n_samples / d, 1.0)
        logger.debug("scatter is rank deficient, jittering initial covariances (scale %.3g)",
                     scale)
        noise_b = rng.standard_normal((d, d))
        noise_w = rng.standard_normal((d, d))
        phi_b = _sym(phi_b + scale * (noise_b @ noise_b.T / d + 1e-3 * eye))
        phi_w = _sym(phi_w + scale * (noise_w @ noise_w.T / d + 1e-3 * eye))
        if cfg.diag_within:
            phi_w = np.diag(np.diag(phi_w))
    return phi_b, phi_w


def fit_plda(archive: EmbeddingArchive, cfg: EmConfig = EmConfig()) -> Tuple[PldaModel, List[float]]:
    """Fit mu, Phi_B and Phi_W by EM.

    mu is the data mean and stays fixed. With ``cfg.diag_within`` the
    off-diagonals of Phi_W are zeroed after every M-step. Returns the model
    and the data log-likelihood recorded after each iteration.
    """
    if len(archive) == 0:
        raise InsufficientClasses("PLDA training needs at least 2 speakers, found 0")
    mu = archive.vectors.mean(axis=0)
    stats = _SpeakerStats(archive, mu)
    phi_b, phi_w = _initial_covariances(archive, stats, cfg)
    logger.info("PLDA EM: %d speakers, %d utterances, dim %d, diag_within=%s",
                stats.n_speakers, stats.n_samples, stats.dim, cfg.diag_within)

    history: List[float] = []
    for iteration in range(cfg.iterations):
        means, cov_sum, weighted_cov_sum = _posteriors(stats, phi_b, phi_w)

        phi_b = _sym(cov_sum + means.T @ means) / stats.n_speakers
        cross = stats.sums.T @ means
        phi_w = (stats.total - cross - cross.T
                 + (means * stats.counts[:, None]).T @ means + weighted_cov_sum)
        phi_w = _sym(phi_w) / stats.n_samples
        if cfg.diag_within:
            phi_w = np.diag(np.diag(phi_w))

        if not _is_pd(phi_w):
            ridge = EM_RIDGE * np.trace(phi_w) / stats.dim
            logger.warning("iteration %d: within covariance lost positive definiteness, "
                           "adding ridge %.3g", iteration + 1, ridge)
            phi_w = phi_w + ridge * np.eye(stats.dim)
            if not _is_pd(phi_w):
                raise SingularCovariance(
                    f"within-speaker covariance is singular after iteration {iteration + 1}")

        history.append(_log_likelihood(stats, phi_b, phi_w))
        logger.debug("iteration %d: log-likelihood %.6f", iteration + 1, history[-1])

    if len(history) > 1:
        logger.info("PLDA EM finished after %d iterations, last delta %.3g",
                    len(history), history[-1] - history[-2])
    model = PldaModel(mu=mu, phi_b=phi_b, phi_w=phi_w, diag_constrained=cfg.diag_within)
    return model, history


def _gaussian_logpdf(x: np.ndarray, cov: np.ndarray) -> float:
    factor = linalg.cho_factor(cov, lower=True)
    return -0.5 * (x.size * LOG_2PI + _logdet(factor)
                   + float(x @ linalg.cho_solve(factor, x)))


def score_llr(model: PldaModel, enroll, test) -> float:
    """log p(e, t | same speaker) - log p(e) - log p(t), from the joint density."""
    e = np.asarray(enroll, dtype=np.float64).reshape(-1)
    t = np.asarray(test, dtype=np.float64).reshape(-1)
    if e.size != model.dim or t.size != model.dim:
        raise DimensionMismatch(f"model dim {model.dim}, got vectors of dim {e.size} and {t.size}")
    if e.tobytes() > t.tobytes():
        e, t = t, e
    x = e - model.mu
    y = t - model.mu
    total = model.phi_b + model.phi_w
    joint = np.block([[total, model.phi_b], [model.phi_b, total]])
    return (_gaussian_logpdf(np.concatenate([x, y]), joint)
            - _gaussian_logpdf(x, total) - _gaussian_logpdf(y, total))


class PldaScorer:
    """Precomputed quadratic forms for O(d^2) per-trial LLR scoring.

    score = 1/2 x'Qx + 1/2 y'Qy + x'Py + const with x, y the centered vectors,
    Q = T^-1 - S^-1, P = T^-1 B S^-1, T = B + W and S = T - B T^-1 B.
    """

    def __init__(self, model: PldaModel):
        self.model = model
        d = model.dim
        eye = np.eye(d)
        total = model.phi_b + model.phi_w
        t_factor = linalg.cho_factor(total, lower=True)
        t_inv = _sym(linalg.cho_solve(t_factor, eye))
        schur = _sym(total - model.phi_b @ t_inv @ model.phi_b)
        try:
            s_factor = linalg.cho_factor(schur, lower=True)
        except linalg.LinAlgError:
            raise SingularCovariance("Schur complement of the total covariance is singular")
        s_inv = _sym(linalg.cho_solve(s_factor, eye))
        self.Q = _sym(t_inv - s_inv)
        self.P = _sym(t_inv @ model.phi_b @ s_inv)
        self.const = 0.5 * (_logdet(t_factor) - _logdet(s_factor))

    def score_pairs(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        x = enroll - self.model.mu
        y = test - self.model.mu
        return (0.5 * np.sum((x @ self.Q) * x, axis=1)
                + 0.5 * np.sum((y @ self.Q) * y, axis=1)
                + np.sum((x @ self.P) * y, axis=1) + self.const)


def score_trials(model: PldaModel, archive: EmbeddingArchive, trials: List[Trial],
                 workers: int = 1) -> ScoreSet:
    if archive.dim != model.dim:
        raise DimensionMismatch(f"model dim {model.dim}, archive dim {archive.dim}")
    enroll_idx, test_idx = resolve_trials(archive, trials)
    if not trials:
        return ScoreSet(trials=[], scores=np.zeros(0))
    scorer = PldaScorer(model)
    X = archive.vectors

    def run(chunk: np.ndarray) -> np.ndarray:
        return scorer.score_pairs(X[enroll_idx[chunk]], X[test_idx[chunk]])

    chunks = np.array_split(np.arange(len(trials)), max(1, min(workers, len(trials))))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = np.concatenate(list(pool.map(run, chunks)))
    else:
        scores = np.concatenate([run(chunk) for chunk in chunks])
    return ScoreSet(trials=list(trials), scores=scores)


def diagnose_covariances(source: Union[PldaModel, ScatterPair]) -> pd.DataFrame:
    """Per-dimension between/within variances, largest between first, with log10."""
    if isinstance(source, PldaModel):
        between, within = np.diag(source.phi_b), np.diag(source.phi_w)
    else:
        between, within = np.diag(source.between), np.diag(source.within)
    order = np.argsort(-between, kind="stable")

    def log10(values: np.ndarray) -> np.ndarray:
        out = np.full(values.shape, -np.inf)
        positive = values > 0
        out[positive] = np.log10(values[positive])
        return out

    return pd.DataFrame({
        "rank": np.arange(1, order.size + 1),
        "dim_index": order,
        "between": between[order],
        "within": within[order],
        "log10_between": log10(between[order]),
        "log10_within": log10(within[order]),
    })
