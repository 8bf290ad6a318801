"""
Pipeline Tool Module
Stage-level operations of the back-end pipeline: each stage reads its inputs
from files and writes deterministic outputs, so any stage can be re-run alone.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import ConfigError, UsageError
from resources.embedding_resource import (
    EmbeddingArchive,
    ScoreSet,
    read_archive,
    read_scores,
    read_trials,
    write_archive,
    write_trials,
)
from resources.model_resource import read_plda, read_projection, write_plda, write_projection
from tools.cosine import cosine_score_trials
from tools.margin_losses import MarginConfig, batch_from_archive, make_toy_dataset, toy_train
from tools.metrics import DcfParams, det_curve, metrics_row
from tools.plda import EmConfig, diagnose_covariances, fit_plda, score_trials
from tools.preprocess import (
    Projection,
    apply_projection,
    center,
    compute_scatter,
    fit_lda,
    length_normalize_archive,
)
from tools.synth import SynthSpec, make_trials, preset, sample_dataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STAGES = ("center", "ln", "lda")
BACKENDS = ("cosine", "plda", "plda-diag")


def parse_order(order: str) -> List[str]:
    stages = [stage.strip() for stage in order.split(",") if stage.strip()]
    unknown = [stage for stage in stages if stage not in STAGES]
    if unknown or len(set(stages)) != len(stages):
        raise ConfigError(f"bad stage order '{order}', expected a permutation of {','.join(STAGES)}")
    return stages


def isotropic_spec(d: int, n_speakers: int, utts_per_speaker: int, between_var: float,
                   within_var: float, mean: float = 0.0, seed: int = 0) -> SynthSpec:
    return SynthSpec(d=d, n_speakers=n_speakers, utts_per_speaker=utts_per_speaker,
                     phi_b=between_var * np.eye(d), phi_w=within_var * np.eye(d),
                     mu=np.full(d, mean), seed=seed)


class PipelineTool:
    """Runs the back-end stages over files."""

    def synth(self, spec: SynthSpec, output: PathLike, trials_out: Optional[PathLike] = None,
              n_target: int = 0, n_nontarget: int = 0) -> EmbeddingArchive:
        archive = sample_dataset(spec)
        write_archive(archive, output)
        if trials_out is not None:
            trials = make_trials(archive, n_target, n_nontarget, seed=spec.seed)
            write_trials(trials, trials_out)
            logger.info("wrote %d trials to %s", len(trials), trials_out)
        return archive

    def preprocess(self, input_path: PathLike, output: PathLike, order: str = "center,ln,lda",
                   do_center: bool = False, do_ln: bool = False, lda: Optional[int] = None,
                   lda_diag: Optional[int] = None,
                   projection: Optional[PathLike] = None) -> EmbeddingArchive:
        """Apply the enabled stages in ``order``.

        With ``lda`` or ``lda_diag`` a projection is fitted and, when
        ``projection`` is given, written there; with only ``projection`` the
        stored projection is applied.
        """
        if lda is not None and lda_diag is not None:
            raise UsageError("--lda and --lda-diag are mutually exclusive")
        archive = read_archive(input_path)
        for stage in parse_order(order):
            if stage == "center" and do_center:
                archive, _ = center(archive)
                logger.info("centered %d records", len(archive))
            elif stage == "ln" and do_ln:
                archive = length_normalize_archive(archive)
                logger.info("length-normalized %d records", len(archive))
            elif stage == "lda":
                archive = self._lda_stage(archive, lda, lda_diag, projection)
        write_archive(archive, output)
        return archive

    def _lda_stage(self, archive: EmbeddingArchive, lda: Optional[int],
                   lda_diag: Optional[int], projection: Optional[PathLike]) -> EmbeddingArchive:
        if lda is None and lda_diag is None:
            if projection is None:
                return archive
            fitted: Projection = read_projection(projection)
        else:
            k = lda if lda is not None else lda_diag
            fitted = fit_lda(archive, k, diag_within=lda_diag is not None)
            if projection is not None:
                write_projection(fitted, projection)
        logger.info("projecting %d -> %d dims", fitted.input_dim, fitted.output_dim)
        return apply_projection(fitted, archive)

    def train_plda(self, input_path: PathLike, model_out: PathLike,
                   cfg: EmConfig) -> pd.DataFrame:
        archive = read_archive(input_path)
        model, history = fit_plda(archive, cfg)
        write_plda(model, model_out)
        return pd.DataFrame({"iteration": np.arange(1, len(history) + 1),
                             "log_likelihood": history})

    def score(self, input_path: PathLike, trials_path: PathLike, backend: str = "cosine",
              model: Optional[PathLike] = None, workers: int = 1) -> ScoreSet:
        if backend not in ("cosine", "plda"):
            raise UsageError(f"unknown backend '{backend}', expected cosine or plda")
        if backend == "plda" and model is None:
            raise UsageError("--backend plda requires --model")
        archive = read_archive(input_path)
        trials = read_trials(trials_path)
        if backend == "cosine":
            scores = cosine_score_trials(archive, trials)
        else:
            scores = score_trials(read_plda(model), archive, trials, workers=workers)
        logger.info("scored %d trials with %s", len(scores), backend)
        return scores

    def evaluate(self, scores_path: PathLike, params: DcfParams,
                 det_out: Optional[PathLike] = None) -> pd.DataFrame:
        scores = read_scores(scores_path)
        row = metrics_row(scores, params)
        if det_out is not None:
            det_curve(scores).to_frame().to_csv(det_out, index=False)
        return row

    def diagnose(self, model: Optional[PathLike] = None,
                 labeled_archive: Optional[PathLike] = None) -> pd.DataFrame:
        if (model is None) == (labeled_archive is None):
            raise UsageError("diagnose needs exactly one of --model or --labeled-archive")
        if model is not None:
            return diagnose_covariances(read_plda(model))
        return diagnose_covariances(compute_scatter(read_archive(labeled_archive)))

    def toy_train(self, loss: str, margins: MarginConfig, epochs: int, lr: float, seed: int,
                  archive: Optional[PathLike] = None, n_classes: int = 3,
                  n_per_class: int = 50) -> pd.DataFrame:
        if archive is not None:
            batch = batch_from_archive(read_archive(archive))
        else:
            batch = make_toy_dataset(n_classes, n_per_class, dim=2, seed=seed)
        cfg = None if loss == "ce" else MarginConfig.for_loss(
            loss, s=margins.s, m1=margins.m1, m2=margins.m2, m3=margins.m3)
        _, history = toy_train(batch, cfg, epochs=epochs, lr=lr, seed=seed)
        return history

    def compare_backends(self, preset_name: str, d: int, train_speakers: int = 200,
                         train_utts: int = 10, eval_speakers: int = 500, eval_utts: int = 4,
                         n_target: int = 2500, n_nontarget: int = 2500, seed: int = 0,
                         ln: bool = False, lda: Optional[int] = None, lda_diag: bool = False,
                         iterations: int = 20, params: DcfParams = DcfParams(),
                         backends: Sequence[str] = BACKENDS,
                         train_singletons: int = 0) -> pd.DataFrame:
        """EER and minDCF of each back-end on one seeded preset.

        Training and evaluation speakers are drawn independently. The
        training set holds ``train_speakers`` x ``train_utts`` utterances plus
        ``train_singletons`` speakers seen once, who inform the between-speaker
        covariance but not the within-speaker one. Optional LN and LDA (or
        LDA-diag, with ``lda`` output dims) are fitted on the training set and
        applied to both.
        """
        template = preset(preset_name, d, seed=seed)
        train = sample_dataset(template.model_copy(update={
            "n_speakers": train_speakers, "utts_per_speaker": train_utts,
            "single_speakers": train_singletons, "seed": seed}))
        evaluation = sample_dataset(template.model_copy(update={
            "n_speakers": eval_speakers, "utts_per_speaker": eval_utts, "seed": seed + 1}))
        trials = make_trials(evaluation, n_target, n_nontarget, seed=seed + 2)

        if ln:
            train = length_normalize_archive(train)
            evaluation = length_normalize_archive(evaluation)
        if lda is not None:
            projection = fit_lda(train, lda, diag_within=lda_diag)
            train = apply_projection(projection, train)
            evaluation = apply_projection(projection, evaluation)

        rows = []
        for backend in backends:
            if backend == "cosine":
                scores = cosine_score_trials(evaluation, trials)
            elif backend in ("plda", "plda-diag"):
                cfg = EmConfig(iterations=iterations, diag_within=backend == "plda-diag", seed=seed)
                model, _ = fit_plda(train, cfg)
                scores = score_trials(model, evaluation, trials)
            else:
                raise UsageError(f"unknown backend '{backend}'")
            row = metrics_row(scores, params)
            rows.append({"backend": backend, "eer": row.at[0, "eer"],
                         "min_dcf": row.at[0, "min_dcf"]})
        return pd.DataFrame(rows, columns=["backend", "eer", "min_dcf"])
