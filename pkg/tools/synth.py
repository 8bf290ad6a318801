"""
Synthetic Embedding Module
Labeled embedding archives sampled from the two-covariance PLDA model, named
covariance presets and seeded trial lists.

All randomness comes from numpy's Generator(Philox(seed)), a counter-based
generator, so a seed reproduces an archive bit for bit on any machine.
"""

import logging
from typing import List, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import linalg
from scipy.stats import ortho_group

from errors import ConfigError, SingularCovariance, UnknownPreset
from resources.embedding_resource import EmbeddingArchive, Trial, TrialLabel

logger = logging.getLogger(__name__)

PRESETS = ("conventional", "large-margin")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class SynthSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    d: int = Field(ge=1)
    n_speakers: int = Field(ge=1)
    utts_per_speaker: int = Field(ge=1)
    # extra speakers with exactly one utterance each, appended after the others
    single_speakers: int = Field(default=0, ge=0)
    phi_b: np.ndarray
    phi_w: np.ndarray
    mu: np.ndarray
    seed: int = Field(default=0, ge=0)

    @field_validator("phi_b", "phi_w", "mu", mode="before")
    @classmethod
    def _array(cls, value):
        array = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise ValueError("entries must be finite")
        array.flags.writeable = False
        return array

    @model_validator(mode="after")
    def _check(self):
        if self.mu.shape != (self.d,):
            raise ValueError(f"mu must have {self.d} entries")
        for name in ("phi_b", "phi_w"):
            matrix = getattr(self, name)
            if matrix.shape != (self.d, self.d):
                raise ValueError(f"{name} must be {self.d} x {self.d}")
            if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-10 * max(np.abs(matrix).max(), 1.0)):
                raise ValueError(f"{name} is not symmetric")
        return self


def _psd_factor(matrix: np.ndarray, name: str) -> np.ndarray:
    """A factor L with L @ L.T == matrix; semi-definite matrices are allowed."""
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        pass
    eigvals, eigvecs = linalg.eigh(matrix)
    tolerance = 1e-10 * max(np.abs(np.trace(matrix)), 1.0)
    if eigvals.min() < -tolerance:
        raise SingularCovariance(f"{name} is not positive semi-definite "
                                 f"(smallest eigenvalue {eigvals.min():.3g})")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def sample_dataset(spec: SynthSpec) -> EmbeddingArchive:
    """Draw h ~ N(0, Phi_B) per speaker and phi = mu + h + n, n ~ N(0, Phi_W), per utterance."""
    rng = make_rng(spec.seed)
    b_factor = _psd_factor(spec.phi_b, "phi_b")
    w_factor = _psd_factor(spec.phi_w, "phi_w")
    counts = np.array([spec.utts_per_speaker] * spec.n_speakers + [1] * spec.single_speakers)
    n_total = int(counts.sum())

    offsets = rng.standard_normal((counts.size, spec.d)) @ b_factor.T
    noise = rng.standard_normal((n_total, spec.d)) @ w_factor.T
    vectors = spec.mu + np.repeat(offsets, counts, axis=0) + noise

    spk_width = max(4, len(str(counts.size)))
    utt_width = max(2, len(str(spec.utts_per_speaker)))
    speakers, ids = [], []
    for s, count in enumerate(counts):
        name = f"spk{s + 1:0{spk_width}d}"
        for u in range(count):
            speakers.append(name)
            ids.append(f"{name}-utt{u + 1:0{utt_width}d}")
    logger.info("sampled %d speakers x %d utterances and %d single-utterance speakers, "
                "dim %d (seed %d)", spec.n_speakers, spec.utts_per_speaker,
                spec.single_speakers, spec.d, spec.seed)
    return EmbeddingArchive(dim=spec.d, ids=ids, speakers=speakers, vectors=vectors)


def preset(name: str, d: int, seed: int = 0, n_speakers: int = 200,
           utts_per_speaker: int = 10) -> SynthSpec:
    """Covariance shapes of conventional and large-margin embeddings.

    large-margin: Phi_B = diag(geomspace(1.0, 0.5)); Phi_W = diag(geomspace(0.1, 0.04))
    in a seeded order, so between exceeds within in every dimension.
    conventional: Phi_B ramps steeply from 4 to 0.01 and Phi_W from 3 to 0.75, each
    conjugated by its own seeded random rotation.
    """
    if name not in PRESETS:
        raise UnknownPreset(f"unknown preset '{name}', expected one of {list(PRESETS)}")
    if d < 4:
        raise ConfigError(f"presets need d >= 4, got {d}")
    rng = make_rng(seed)
    if name == "large-margin":
        phi_b = np.diag(np.geomspace(1.0, 0.5, d))
        phi_w = np.diag(rng.permutation(np.geomspace(0.1, 0.04, d)))
    else:
        rot_b = ortho_group.rvs(d, random_state=rng)
        rot_w = ortho_group.rvs(d, random_state=rng)
        phi_b = rot_b @ np.diag(np.geomspace(4.0, 0.01, d)) @ rot_b.T
        phi_w = rot_w @ np.diag(np.geomspace(3.0, 0.75, d)) @ rot_w.T
        phi_b = 0.5 * (phi_b + phi_b.T)
        phi_w = 0.5 * (phi_w + phi_w.T)
    return SynthSpec(d=d, n_speakers=n_speakers, utts_per_speaker=utts_per_speaker,
                     phi_b=phi_b, phi_w=phi_w, mu=np.zeros(d), seed=seed)


def make_trials(archive: EmbeddingArchive, n_target: int, n_nontarget: int,
                seed: int = 0) -> List[Trial]:
    """Distinct same-speaker and different-speaker pairs in a seeded, mixed order.

    A pair and its reverse count as the same trial.
    """
    codes, names = archive.speaker_codes()
    counts = np.bincount(codes, minlength=len(names))
    available_target = int(np.sum(counts * (counts - 1) // 2))
    n = len(archive)
    available_nontarget = n * (n - 1) // 2 - available_target
    if n_target > available_target:
        raise ConfigError(f"asked for {n_target} target trials, only {available_target} pairs exist")
    if n_nontarget > available_nontarget:
        raise ConfigError(f"asked for {n_nontarget} nontarget trials, "
                          f"only {available_nontarget} pairs exist")

    rng = make_rng(seed)
    members = [np.flatnonzero(codes == k) for k in range(len(names))]
    pair_weights = (counts * (counts - 1) / 2.0)
    seen: Set[Tuple[int, int]] = set()
    pairs: List[Tuple[int, int, TrialLabel]] = []

    def add(a: int, b: int, label: TrialLabel) -> bool:
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            return False
        seen.add(key)
        pairs.append((a, b, label))
        return True

    if n_target:
        probs = pair_weights / pair_weights.sum()
        made = 0
        while made < n_target:
            rows = members[rng.choice(len(names), p=probs)]
            a, b = rng.choice(rows, size=2, replace=False)
            made += add(int(a), int(b), TrialLabel.TARGET)
    made = 0
    while made < n_nontarget:
        a, b = rng.integers(0, n, size=2)
        if codes[a] != codes[b]:
            made += add(int(a), int(b), TrialLabel.NONTARGET)

    order = rng.permutation(len(pairs))
    return [Trial(enroll_id=archive.ids[pairs[i][0]], test_id=archive.ids[pairs[i][1]],
                  label=pairs[i][2]) for i in order]
