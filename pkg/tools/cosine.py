"""
Cosine Scoring Module
Cosine similarity between enrollment and test embeddings.
"""

import logging
from typing import List

import numpy as np

from errors import ZeroVector
from resources.embedding_resource import EmbeddingArchive, ScoreSet, Trial, resolve_trials

logger = logging.getLogger(__name__)


def cosine_score(enroll, test) -> float:
    e = np.asarray(enroll, dtype=np.float64).reshape(-1)
    t = np.asarray(test, dtype=np.float64).reshape(-1)
    e_norm = np.linalg.norm(e)
    t_norm = np.linalg.norm(t)
    if e_norm == 0.0 or t_norm == 0.0:
        raise ZeroVector("cosine score of a zero vector")
    return float(np.clip(np.dot(e, t) / (e_norm * t_norm), -1.0, 1.0))


def cosine_score_trials(archive: EmbeddingArchive, trials: List[Trial]) -> ScoreSet:
    """Score every trial; each embedding is normalized once up front."""
    enroll_idx, test_idx = resolve_trials(archive, trials)
    if not trials:
        return ScoreSet(trials=[], scores=np.zeros(0))
    used = np.union1d(enroll_idx, test_idx)
    norms = np.linalg.norm(archive.vectors[used], axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector(f"record '{archive.ids[used[np.argmax(norms == 0.0)]]}' is a zero vector")
    unit = np.zeros_like(archive.vectors)
    unit[used] = archive.vectors[used] / norms[:, None]
    scores = np.einsum("ij,ij->i", unit[enroll_idx], unit[test_idx])
    logger.debug("cosine scored %d trials", len(trials))
    return ScoreSet(trials=list(trials), scores=np.clip(scores, -1.0, 1.0))
