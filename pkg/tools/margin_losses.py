"""
Margin Losses Module
Softmax and large-margin softmax cross-entropy losses with analytic gradients,
plus a toy trainer that shows margin-induced intra-class compactness.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import logsumexp, softmax

from errors import DomainError, EmptyBatch, InsufficientClasses, TrainingDiverged, UnknownPreset, ZeroVector
from resources.embedding_resource import EmbeddingArchive
from tools.preprocess import compute_scatter

logger = logging.getLogger(__name__)

DOMAIN_TOLERANCE = 1e-9
GRAD_CLAMP = 1e-7


class MarginConfig(BaseModel):
    """Scale s and margins (m1, m2, m3) of psi(theta) = cos(m1*theta + m2) - m3."""

    model_config = ConfigDict(frozen=True)

    s: float = Field(default=30.0, gt=0)
    m1: float = Field(default=1.0, ge=1)
    m2: float = Field(default=0.0, ge=0)
    m3: float = Field(default=0.0, ge=0)

    @classmethod
    def for_loss(cls, name: str, s: float = 30.0, m1: float = 2.0,
                 m2: float = 0.2, m3: float = 0.2) -> "MarginConfig":
        """softmax (normalized, no margin), a (A-Softmax), am (AM-Softmax) or aam (AAM-Softmax)."""
        presets = {
            "softmax": dict(m1=1.0, m2=0.0, m3=0.0),
            "a": dict(m1=m1, m2=0.0, m3=0.0),
            "am": dict(m1=1.0, m2=0.0, m3=m3),
            "aam": dict(m1=1.0, m2=m2, m3=0.0),
        }
        if name not in presets:
            raise UnknownPreset(f"unknown loss '{name}', expected one of {sorted(presets)}")
        return cls(s=s, **presets[name])


class ClassifierHead(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    biases: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ValueError("weights must be d x C with C >= 2")
        if self.biases is None:
            self.biases = np.zeros(self.weights.shape[1])
        self.biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        if self.biases.size != self.weights.shape[1]:
            raise ValueError("one bias per class is required")
        return self

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


class Batch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray
    labels: np.ndarray

    @field_validator("inputs", mode="before")
    @classmethod
    def _inputs(cls, value):
        inputs = np.array(value, dtype=np.float64)
        if inputs.ndim != 2:
            raise ValueError("inputs must be an N x d matrix")
        return inputs

    @field_validator("labels", mode="before")
    @classmethod
    def _labels(cls, value):
        labels = np.array(value, dtype=np.int64).reshape(-1)
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative class indices")
        return labels

    @model_validator(mode="after")
    def _check(self):
        if self.labels.size != self.inputs.shape[0]:
            raise ValueError("one label per input row is required")
        return self

    def __len__(self) -> int:
        return self.labels.size


def psi(cos_theta, cfg: MarginConfig):
    """cos(m1*theta + m2) - m3 with theta = arccos(cos_theta)."""
    c = np.asarray(cos_theta, dtype=np.float64)
    if np.any(np.abs(c) > 1.0 + DOMAIN_TOLERANCE):
        raise DomainError(f"cos(theta) outside [-1, 1]: {c[np.abs(c) > 1.0 + DOMAIN_TOLERANCE].ravel()[0]}")
    c = np.clip(c, -1.0, 1.0)
    if cfg.m1 == 1.0:
        sin = np.sqrt(1.0 - c * c)
        out = c * np.cos(cfg.m2) - sin * np.sin(cfg.m2) - cfg.m3
    else:
        out = np.cos(cfg.m1 * np.arccos(c) + cfg.m2) - cfg.m3
    return float(out) if out.ndim == 0 else out


def psi_derivative(cos_theta, cfg: MarginConfig) -> np.ndarray:
    """d psi / d cos(theta), with cos(theta) kept away from +-1."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0 + GRAD_CLAMP, 1.0 - GRAD_CLAMP)
    sin = np.sqrt(1.0 - c * c)
    if cfg.m1 == 1.0:
        return np.cos(cfg.m2) + c * np.sin(cfg.m2) / sin
    return cfg.m1 * np.sin(cfg.m1 * np.arccos(c) + cfg.m2) / sin


def _check_batch(batch: Batch, head: ClassifierHead) -> None:
    if len(batch) == 0:
        raise EmptyBatch("batch has no samples")
    if batch.inputs.shape[1] != head.weights.shape[0]:
        raise ValueError(f"inputs have dim {batch.inputs.shape[1]}, "
                         f"head expects {head.weights.shape[0]}")
    if np.any(batch.labels >= head.n_classes):
        raise ValueError(f"labels must be below {head.n_classes}")


def _normalize(matrix: np.ndarray, axis: int, what: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector(f"zero-norm {what}")
    return matrix / norms, norms


def _through_normalization(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray,
                           axis: int) -> np.ndarray:
    # gradient of u = v/|v|: (g - (g.u)u)/|v|
    radial = np.sum(grad * unit, axis=axis, keepdims=True)
    return (grad - radial * unit) / norms


def softmax_ce_loss(batch: Batch,
                    head: ClassifierHead) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean CE over logits W_j.x_i + b_j; returns loss and gradients for x, W, b."""
    _check_batch(batch, head)
    n = len(batch)
    rows = np.arange(n)
    logits = batch.inputs @ head.weights + head.biases
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, batch.labels]))

    d_logits = softmax(logits, axis=1)
    d_logits[rows, batch.labels] -= 1.0
    d_logits /= n
    return (loss, d_logits @ head.weights.T, batch.inputs.T @ d_logits,
            d_logits.sum(axis=0))


def margin_ce_loss(batch: Batch, head: ClassifierHead,
                   cfg: MarginConfig) -> Tuple[float, np.ndarray, np.ndarray]:
    """Large-margin CE on cosine logits; psi applies to the target class only.

    Gradients are taken with respect to the raw inputs and weight columns.
    """
    _check_batch(batch, head)
    n = len(batch)
    rows = np.arange(n)
    x_unit, x_norms = _normalize(batch.inputs, 1, "input row")
    w_unit, w_norms = _normalize(head.weights, 0, "weight column")

    cosines = x_unit @ w_unit
    target_cos = cosines[rows, batch.labels]
    logits = cfg.s * cosines
    logits[rows, batch.labels] = cfg.s * psi(target_cos, cfg)
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, batch.labels]))

    d_logits = softmax(logits, axis=1)
    d_logits[rows, batch.labels] -= 1.0
    d_cos = cfg.s * d_logits / n
    d_cos[rows, batch.labels] *= psi_derivative(target_cos, cfg)

    d_x_unit = d_cos @ w_unit.T
    d_w_unit = x_unit.T @ d_cos
    return (loss, _through_normalization(d_x_unit, x_unit, x_norms, 1),
            _through_normalization(d_w_unit, w_unit, w_norms, 0))


class ToyModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder: np.ndarray
    head: ClassifierHead

    def encode(self, inputs: np.ndarray) -> np.ndarray:
        return np.asarray(inputs, dtype=np.float64) @ self.encoder


def make_toy_dataset(n_classes: int = 3, n_per_class: int = 50, dim: int = 2,
                     seed: int = 0) -> Batch:
    """Anisotropic Gaussian blobs with centers spread on a circle of radius 4."""
    if dim < 2:
        raise ValueError("toy dataset needs dim >= 2")
    rng = np.random.Generator(np.random.Philox(seed))
    inputs = []
    for label in range(n_classes):
        angle = 2.0 * np.pi * label / n_classes
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        factor = np.eye(dim) * 0.5
        factor[:2, :2] = rot @ np.diag([1.0, 0.4])
        center = np.zeros(dim)
        center[:2] = 4.0 * np.array([np.cos(angle), np.sin(angle)])
        inputs.append(center + rng.standard_normal((n_per_class, dim)) @ factor.T)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return Batch(inputs=np.vstack(inputs), labels=labels)


def batch_from_archive(archive: EmbeddingArchive) -> Batch:
    codes, _ = archive.speaker_codes()
    return Batch(inputs=archive.vectors, labels=codes)


def trace_ratio(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """tr(S_W)/tr(S_B) of the unit-normalized embeddings."""
    unit = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    archive = EmbeddingArchive(dim=unit.shape[1], ids=[str(i) for i in range(len(labels))],
                               speakers=[str(label) for label in labels], vectors=unit)
    scatter = compute_scatter(archive)
    return float(np.trace(scatter.within) / np.trace(scatter.between))


def toy_train(batch: Batch, cfg: Optional[MarginConfig] = None, epochs: int = 200,
              lr: float = 0.01, seed: int = 0) -> Tuple[ToyModel, pd.DataFrame]:
    """Full-batch gradient descent on a linear encoder plus classifier head.

    ``cfg=None`` trains with plain softmax CE (with bias); otherwise the
    large-margin loss selected by ``cfg``. History columns: epoch, loss,
    trace_ratio (measured after that epoch's update).
    """
    n_classes = int(np.unique(batch.labels).size)
    if n_classes < 2:
        raise InsufficientClasses(f"toy training needs at least 2 classes, found {n_classes}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    dim = batch.inputs.shape[1]
    rng = np.random.Generator(np.random.Philox(seed))
    encoder = np.eye(dim) + 0.1 * rng.standard_normal((dim, dim))
    head = ClassifierHead(weights=rng.standard_normal((dim, int(batch.labels.max()) + 1)))

    history: List[dict] = []
    for epoch in range(1, epochs + 1):
        encoded = Batch(inputs=batch.inputs @ encoder, labels=batch.labels)
        if cfg is None:
            loss, d_emb, d_w, d_b = softmax_ce_loss(encoded, head)
            head.biases = head.biases - lr * d_b
        else:
            loss, d_emb, d_w = margin_ce_loss(encoded, head, cfg)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
        encoder = encoder - lr * (batch.inputs.T @ d_emb)
        head.weights = head.weights - lr * d_w
        ratio = trace_ratio(batch.inputs @ encoder, batch.labels)
        if not np.isfinite(ratio):
            raise TrainingDiverged(f"embeddings degenerated at epoch {epoch}")
        history.append({"epoch": epoch, "loss": loss, "trace_ratio": ratio})
        logger.debug("epoch %d: loss %.6f, trace ratio %.6f", epoch, loss, ratio)

    return ToyModel(encoder=encoder, head=head), pd.DataFrame(history,
                                                              columns=["epoch", "loss", "trace_ratio"])
