"""
Metrics Module
DET curve, equal error rate and minimum normalized detection cost from labeled scores.
"""

import logging
from typing import Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from errors import DegenerateTrialSet, UnlabeledTrial
from resources.embedding_resource import ScoreSet, TrialLabel

logger = logging.getLogger(__name__)


class DcfParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    p_target: float = Field(default=0.01, gt=0, lt=1)
    c_miss: float = Field(default=1.0, gt=0)
    c_fa: float = Field(default=1.0, gt=0)


class DetCurve(BaseModel):
    """Operating points in increasing threshold order; the last threshold is +inf."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "p_miss": self.p_miss,
                             "p_fa": self.p_fa})


def split_scores(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray]:
    for position, trial in enumerate(scores.trials):
        if trial.label is TrialLabel.UNKNOWN:
            raise UnlabeledTrial(f"trial {position} ({trial.enroll_id} {trial.test_id}) has no label")
    targets, nontargets = scores.split()
    if targets.size == 0 or nontargets.size == 0:
        raise DegenerateTrialSet(f"need both classes, got {targets.size} target and "
                                 f"{nontargets.size} nontarget trials")
    return targets, nontargets


def det_curve(scores: ScoreSet) -> DetCurve:
    """Sweep every distinct score plus +inf; a score equal to the threshold is accepted."""
    targets, nontargets = split_scores(scores)
    thresholds = np.append(np.unique(scores.scores), np.inf)
    sorted_tar = np.sort(targets)
    sorted_non = np.sort(nontargets)
    p_miss = np.searchsorted(sorted_tar, thresholds, side="left") / sorted_tar.size
    p_fa = (sorted_non.size - np.searchsorted(sorted_non, thresholds, side="left")) / sorted_non.size
    return DetCurve(thresholds=thresholds, p_miss=p_miss, p_fa=p_fa)


def eer_from_curve(curve: DetCurve) -> float:
    """Linear interpolation between the two operating points bracketing p_miss == p_fa."""
    gap = curve.p_miss - curve.p_fa
    idx = int(np.argmax(gap >= 0.0))
    if gap[idx] == 0.0 or idx == 0:
        return float(curve.p_miss[idx])
    pm0, pm1 = curve.p_miss[idx - 1], curve.p_miss[idx]
    pf0, pf1 = curve.p_fa[idx - 1], curve.p_fa[idx]
    t = (pf0 - pm0) / ((pm1 - pm0) - (pf1 - pf0))
    return float(pm0 + t * (pm1 - pm0))


def eer(scores: ScoreSet) -> float:
    return eer_from_curve(det_curve(scores))


def min_dcf_from_curve(curve: DetCurve, params: DcfParams = DcfParams()) -> Tuple[float, float]:
    cost = (params.c_miss * params.p_target * curve.p_miss
            + params.c_fa * (1.0 - params.p_target) * curve.p_fa)
    norm = min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    idx = int(np.argmin(cost))
    return float(cost[idx] / norm), float(curve.thresholds[idx])


def min_dcf(scores: ScoreSet, params: DcfParams = DcfParams()) -> Tuple[float, float]:
    """Minimum normalized detection cost and the threshold that attains it."""
    return min_dcf_from_curve(det_curve(scores), params)


def metrics_row(scores: ScoreSet, params: DcfParams = DcfParams()) -> pd.DataFrame:
    curve = det_curve(scores)
    targets, nontargets = scores.split()
    dcf, threshold = min_dcf_from_curve(curve, params)
    row = pd.DataFrame([{
        "eer": eer_from_curve(curve),
        "min_dcf": dcf,
        "dcf_threshold": threshold,
        "n_target": int(targets.size),
        "n_nontarget": int(nontargets.size),
    }])
    logger.info("EER %.4f, minDCF %.4f over %d/%d trials", row.at[0, "eer"], dcf,
                targets.size, nontargets.size)
    return row
