"""
Speaker Verification Back-end CLI
Front door for the pipeline stages: synth, preprocess, train-plda, score,
evaluate, diagnose, toy-train and compare.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import BackendError, ConfigError, UsageError
from resources.embedding_resource import format_scores
from tools.margin_losses import MarginConfig
from tools.metrics import DcfParams
from tools.pipeline_tool import PipelineTool, isotropic_spec
from tools.plda import EmConfig
from tools.synth import preset

logger = logging.getLogger("cli")


class PipelineConfig(BaseModel):
    """Every setting a stage can read; config-file keys use these names."""

    model_config = ConfigDict(extra="forbid")

    config: Optional[str] = None
    verbose: bool = False
    quiet: bool = False
    input: Optional[str] = None
    output: Optional[str] = None

    # synth
    preset: Optional[str] = None
    d: int = Field(default=64, ge=1)
    speakers: int = Field(default=200, ge=1)
    utts: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    between_var: float = Field(default=1.0, ge=0)
    within_var: float = Field(default=0.1, ge=0)
    mean: float = 0.0
    trials_out: Optional[str] = None
    n_target: int = Field(default=2500, ge=0)
    n_nontarget: int = Field(default=2500, ge=0)

    # preprocess
    order: str = "center,ln,lda"
    center: bool = False
    ln: bool = False
    lda: Optional[int] = None
    lda_diag: Optional[int] = None
    projection: Optional[str] = None

    # train-plda
    diag: bool = False
    iters: int = Field(default=20, ge=1)
    llh: Optional[str] = None

    # score
    backend: str = "cosine"
    model: Optional[str] = None
    trials: Optional[str] = None
    workers: int = Field(default=1, ge=1)

    # evaluate
    p_target: float = Field(default=0.01, gt=0, lt=1)
    c_miss: float = Field(default=1.0, gt=0)
    c_fa: float = Field(default=1.0, gt=0)
    det_out: Optional[str] = None

    # diagnose
    labeled_archive: Optional[str] = None

    # toy-train
    loss: str = "softmax"
    s: float = Field(default=30.0, gt=0)
    m1: float = Field(default=2.0, ge=1)
    m2: float = Field(default=0.2, ge=0)
    m3: float = Field(default=0.2, ge=0)
    epochs: int = Field(default=200, ge=0)
    lr: float = Field(default=0.01, ge=0)
    archive: Optional[str] = None
    classes: int = Field(default=3, ge=1)
    per_class: int = Field(default=50, ge=1)

    # compare
    train_speakers: int = Field(default=200, ge=1)
    train_utts: int = Field(default=10, ge=1)
    train_singletons: int = Field(default=0, ge=0)
    eval_speakers: int = Field(default=500, ge=1)
    eval_utts: int = Field(default=4, ge=1)


def read_config_file(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}")
    except UnicodeDecodeError:
        raise ConfigError(f"config file {path} is not valid UTF-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in PipelineConfig.model_fields or key == "config":
            raise ConfigError(f"unknown config key '{key}'", line=line_no)
        values[key] = value
    return values


def build_config(given: Dict[str, Any]) -> PipelineConfig:
    """File values first, then the flags given on the command line."""
    merged: Dict[str, Any] = {}
    if given.get("config"):
        merged.update(read_config_file(given["config"]))
    merged.update(given)
    try:
        return PipelineConfig(**merged)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
                             for err in exc.errors())
        raise ConfigError(problems)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default(dest: str) -> Any:
    return PipelineConfig.model_fields[dest].default


def _flag(parser: argparse.ArgumentParser, name: str, help_text: str, **kwargs) -> None:
    dest = name.lstrip("-").replace("-", "_")
    default = _default(dest)
    if kwargs.get("action") != "store_true" and default is not None:
        help_text = f"{help_text} (default: {default})"
    parser.add_argument(name, dest=dest, help=help_text, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    _flag(common, "--config", "key = value file; flags override its values")
    _flag(common, "--verbose", "debug logging", action="store_true")
    _flag(common, "--quiet", "warnings and errors only", action="store_true")

    parser = _Parser(prog="svbackend", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common],
                              argument_default=argparse.SUPPRESS)

    p = command("synth", "sample a labeled archive from the PLDA generative model")
    _flag(p, "--output", "archive to write (.txt for text, EMB1 binary otherwise)")
    _flag(p, "--preset", "covariance preset: conventional or large-margin")
    _flag(p, "--d", "embedding dimension", type=int)
    _flag(p, "--speakers", "number of speakers", type=int)
    _flag(p, "--utts", "utterances per speaker", type=int)
    _flag(p, "--seed", "Philox seed", type=int)
    _flag(p, "--between-var", "isotropic between-speaker variance without a preset", type=float)
    _flag(p, "--within-var", "isotropic within-speaker variance without a preset", type=float)
    _flag(p, "--mean", "value of every component of the global mean", type=float)
    _flag(p, "--trials-out", "also write a seeded trial list here")
    _flag(p, "--n-target", "target trials for --trials-out", type=int)
    _flag(p, "--n-nontarget", "nontarget trials for --trials-out", type=int)

    p = command("preprocess", "center, length-normalize and project an archive")
    _flag(p, "--input", "archive to read")
    _flag(p, "--output", "archive to write")
    _flag(p, "--order", "comma-separated stage order")
    _flag(p, "--center", "subtract the archive mean", action="store_true")
    _flag(p, "--ln", "length-normalize to norm sqrt(d)", action="store_true")
    _flag(p, "--lda", "fit LDA with this output dimension", type=int)
    _flag(p, "--lda-diag", "fit LDA-diag with this output dimension", type=int)
    _flag(p, "--projection", "PRJ1 file: written when fitting, applied otherwise")

    p = command("train-plda", "fit a PLDA model by EM")
    _flag(p, "--input", "labeled archive to train on")
    _flag(p, "--output", "PLDA1 model file to write")
    _flag(p, "--diag", "constrain the within-speaker covariance to a diagonal", action="store_true")
    _flag(p, "--iters", "EM iterations", type=int)
    _flag(p, "--seed", "seed for initialization jitter", type=int)
    _flag(p, "--llh", "CSV for the per-iteration log-likelihood (stdout when absent)")

    p = command("score", "score a trial list")
    _flag(p, "--input", "archive holding the trial embeddings")
    _flag(p, "--trials", "trial list")
    _flag(p, "--backend", "cosine or plda")
    _flag(p, "--model", "PLDA1 model file, required for --backend plda")
    _flag(p, "--workers", "scoring threads", type=int)
    _flag(p, "--output", "score file to write (stdout when absent)")

    p = command("evaluate", "EER and minDCF of a labeled score file")
    _flag(p, "--input", "score file")
    _flag(p, "--p-target", "target prior", type=float)
    _flag(p, "--c-miss", "cost of a miss", type=float)
    _flag(p, "--c-fa", "cost of a false alarm", type=float)
    _flag(p, "--det-out", "CSV dump of the DET operating points")
    _flag(p, "--output", "metrics CSV to write (stdout when absent)")

    p = command("diagnose", "per-dimension between/within variances")
    _flag(p, "--model", "PLDA1 model file")
    _flag(p, "--labeled-archive", "labeled archive; its scatter is diagnosed")
    _flag(p, "--output", "CSV to write (stdout when absent)")

    p = command("toy-train", "train a linear encoder with a softmax-family loss")
    _flag(p, "--loss", "ce, softmax, am, aam or a")
    _flag(p, "--s", "logit scale", type=float)
    _flag(p, "--m1", "multiplicative angular margin (a)", type=float)
    _flag(p, "--m2", "additive angular margin (aam)", type=float)
    _flag(p, "--m3", "additive cosine margin (am)", type=float)
    _flag(p, "--epochs", "full-batch epochs", type=int)
    _flag(p, "--lr", "learning rate", type=float)
    _flag(p, "--seed", "seed for data and initialization", type=int)
    _flag(p, "--archive", "labeled archive to train on instead of Gaussian blobs")
    _flag(p, "--classes", "number of Gaussian blobs", type=int)
    _flag(p, "--per-class", "points per blob", type=int)
    _flag(p, "--output", "history CSV to write (stdout when absent)")

    p = command("compare", "EER/minDCF of cosine, PLDA and PLDA-diag on a preset")
    _flag(p, "--preset", "covariance preset: conventional or large-margin")
    _flag(p, "--d", "embedding dimension", type=int)
    _flag(p, "--train-speakers", "training speakers", type=int)
    _flag(p, "--train-utts", "utterances per training speaker", type=int)
    _flag(p, "--train-singletons", "extra training speakers with one utterance each", type=int)
    _flag(p, "--eval-speakers", "evaluation speakers", type=int)
    _flag(p, "--eval-utts", "utterances per evaluation speaker", type=int)
    _flag(p, "--n-target", "target trials", type=int)
    _flag(p, "--n-nontarget", "nontarget trials", type=int)
    _flag(p, "--ln", "length-normalize before the back-ends", action="store_true")
    _flag(p, "--lda", "LDA output dimension", type=int)
    _flag(p, "--lda-diag", "LDA-diag output dimension", type=int)
    _flag(p, "--iters", "EM iterations", type=int)
    _flag(p, "--seed", "seed", type=int)
    _flag(p, "--output", "CSV to write (stdout when absent)")
    return parser


def _require(cfg: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _emit(text: str, output: Optional[str]) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8")


def run(command: str, cfg: PipelineConfig, tool: PipelineTool) -> None:
    if command == "synth":
        _require(cfg, "output")
        if cfg.preset is not None:
            spec = preset(cfg.preset, cfg.d, seed=cfg.seed, n_speakers=cfg.speakers,
                          utts_per_speaker=cfg.utts)
        else:
            spec = isotropic_spec(cfg.d, cfg.speakers, cfg.utts, cfg.between_var,
                                  cfg.within_var, mean=cfg.mean, seed=cfg.seed)
        tool.synth(spec, cfg.output, cfg.trials_out, cfg.n_target, cfg.n_nontarget)
    elif command == "preprocess":
        _require(cfg, "input", "output")
        tool.preprocess(cfg.input, cfg.output, order=cfg.order, do_center=cfg.center,
                        do_ln=cfg.ln, lda=cfg.lda, lda_diag=cfg.lda_diag,
                        projection=cfg.projection)
    elif command == "train-plda":
        _require(cfg, "input", "output")
        history = tool.train_plda(cfg.input, cfg.output,
                                  EmConfig(iterations=cfg.iters, diag_within=cfg.diag, seed=cfg.seed))
        _emit(history.to_csv(index=False), cfg.llh)
    elif command == "score":
        _require(cfg, "input", "trials")
        scores = tool.score(cfg.input, cfg.trials, backend=cfg.backend, model=cfg.model,
                            workers=cfg.workers)
        _emit(format_scores(scores), cfg.output)
    elif command == "evaluate":
        _require(cfg, "input")
        params = DcfParams(p_target=cfg.p_target, c_miss=cfg.c_miss, c_fa=cfg.c_fa)
        _emit(tool.evaluate(cfg.input, params, cfg.det_out).to_csv(index=False), cfg.output)
    elif command == "diagnose":
        table = tool.diagnose(model=cfg.model, labeled_archive=cfg.labeled_archive)
        _emit(table.to_csv(index=False), cfg.output)
    elif command == "toy-train":
        margins = MarginConfig(s=cfg.s, m1=cfg.m1, m2=cfg.m2, m3=cfg.m3)
        history = tool.toy_train(cfg.loss, margins, cfg.epochs, cfg.lr, cfg.seed,
                                 archive=cfg.archive, n_classes=cfg.classes,
                                 n_per_class=cfg.per_class)
        _emit(history.to_csv(index=False), cfg.output)
    elif command == "compare":
        _require(cfg, "preset")
        if cfg.lda is not None and cfg.lda_diag is not None:
            raise UsageError("--lda and --lda-diag are mutually exclusive")
        k = cfg.lda if cfg.lda is not None else cfg.lda_diag
        table = tool.compare_backends(
            cfg.preset, cfg.d, train_speakers=cfg.train_speakers, train_utts=cfg.train_utts,
            eval_speakers=cfg.eval_speakers, eval_utts=cfg.eval_utts, n_target=cfg.n_target,
            n_nontarget=cfg.n_nontarget, seed=cfg.seed, ln=cfg.ln, lda=k,
            lda_diag=cfg.lda_diag is not None, iterations=cfg.iters,
            train_singletons=cfg.train_singletons)
        _emit(table.to_csv(index=False), cfg.output)


def _configure_logging(cfg: PipelineConfig) -> None:
    level = logging.DEBUG if cfg.verbose else logging.WARNING if cfg.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, force=True,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    tool = PipelineTool()
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        cfg = build_config(args)
        _configure_logging(cfg)
        logger.debug("running %s with %s", command, cfg.model_dump(exclude_defaults=True))
        run(command, cfg, tool)
    except BackendError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"ERROR ConfigError: {exc.errors()[0]['msg']}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"ERROR IOError: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"ERROR InternalError: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
