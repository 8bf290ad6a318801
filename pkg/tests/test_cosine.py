"""
Tests for Cosine Scoring Module
"""

import numpy as np
import pytest

from errors import UnknownId, ZeroVector
from resources.embedding_resource import EmbeddingArchive, Trial
from tools.cosine import cosine_score, cosine_score_trials


@pytest.fixture
def archive():
    rng = np.random.default_rng(0)
    ids = [f"utt{i}" for i in range(20)]
    return EmbeddingArchive(dim=6, ids=ids, speakers=[None] * 20,
                            vectors=rng.standard_normal((20, 6)))


class TestCosineScore:

    def test_hand_values(self):
        assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cosine_score([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0, abs=1e-12)
        assert cosine_score([1.0, 0.0], [-1.0, 0.0]) == -1.0

    def test_bounds_and_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            e, t = rng.standard_normal((2, 5))
            score = cosine_score(e, t)
            assert -1.0 <= score <= 1.0
            assert cosine_score(e, t) == cosine_score(t, e)
            a, b = rng.uniform(0.1, 10.0, size=2)
            assert abs(cosine_score(a * e, b * t) - score) < 1e-12
            assert cosine_score(e, -e) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_score([0.0, 0.0], [1.0, 0.0])


class TestCosineScoreTrials:

    def test_matches_pairwise(self, archive):
        trials = [Trial(enroll_id=f"utt{i}", test_id=f"utt{(3 * i + 1) % 20}") for i in range(20)]
        scores = cosine_score_trials(archive, trials)
        assert scores.trials == trials
        for trial, score in scores.entries:
            e = archive.vectors[archive.ids.index(trial.enroll_id)]
            t = archive.vectors[archive.ids.index(trial.test_id)]
            assert abs(score - cosine_score(e, t)) < 1e-12

    def test_empty_trial_list(self, archive):
        scores = cosine_score_trials(archive, [])
        assert len(scores) == 0

    def test_unused_zero_vector_is_ignored(self):
        archive = EmbeddingArchive(dim=2, ids=["a", "b", "z"], speakers=[None] * 3,
                                   vectors=[[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        scores = cosine_score_trials(archive, [Trial(enroll_id="a", test_id="b")])
        assert scores.scores[0] == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_zero_vector_names_record(self):
        archive = EmbeddingArchive(dim=2, ids=["a", "z"], speakers=[None] * 2,
                                   vectors=[[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ZeroVector, match="'z'"):
            cosine_score_trials(archive, [Trial(enroll_id="a", test_id="z")])

    def test_unknown_id(self, archive):
        with pytest.raises(UnknownId):
            cosine_score_trials(archive, [Trial(enroll_id="utt0", test_id="missing")])
