"""
Tests for Pipeline Tool Module
"""

import numpy as np
import pandas as pd
import pytest
from unittest.mock import patch

from errors import ConfigError, UsageError
from resources.embedding_resource import read_archive, read_trials, write_scores
from resources.model_resource import read_plda, read_projection
from tools.margin_losses import MarginConfig
from tools.metrics import DcfParams
from tools.plda import EmConfig, fit_plda
from tools.pipeline_tool import PipelineTool, isotropic_spec, parse_order
from tools.synth import preset


class TestPipelineTool:

    @pytest.fixture
    def tool(self):
        return PipelineTool()

    @pytest.fixture
    def archive_path(self, tool, tmp_path):
        spec = preset("large-margin", 8, seed=3, n_speakers=30, utts_per_speaker=4)
        tool.synth(spec, tmp_path / "train.bin", tmp_path / "trials", n_target=40, n_nontarget=60)
        return tmp_path / "train.bin"

    def test_parse_order(self):
        assert parse_order("lda, center") == ["lda", "center"]
        with pytest.raises(ConfigError):
            parse_order("center,whiten")
        with pytest.raises(ConfigError):
            parse_order("ln,ln")

    def test_synth_writes_archive_and_trials(self, archive_path, tmp_path):
        assert len(read_archive(archive_path)) == 120
        assert len(read_trials(tmp_path / "trials")) == 100

    def test_isotropic_spec(self):
        spec = isotropic_spec(3, 2, 2, between_var=2.0, within_var=0.5, mean=1.0)
        np.testing.assert_array_equal(spec.phi_b, 2.0 * np.eye(3))
        np.testing.assert_array_equal(spec.mu, np.ones(3))

    def test_fitted_projection_is_reusable(self, tool, archive_path, tmp_path):
        fitted = tool.preprocess(archive_path, tmp_path / "a.bin", do_center=True, do_ln=True,
                                 lda=4, projection=tmp_path / "lda.prj")
        assert fitted.dim == 4
        assert read_projection(tmp_path / "lda.prj").output_dim == 4
        applied = tool.preprocess(archive_path, tmp_path / "b.bin", do_center=True, do_ln=True,
                                  projection=tmp_path / "lda.prj")
        assert applied == fitted

    def test_stage_order_matters(self, tool, archive_path, tmp_path):
        first = tool.preprocess(archive_path, tmp_path / "a.txt", order="center,ln,lda",
                                do_center=True, do_ln=True)
        second = tool.preprocess(archive_path, tmp_path / "b.txt", order="ln,center,lda",
                                 do_center=True, do_ln=True)
        np.testing.assert_allclose(np.linalg.norm(first.vectors, axis=1), np.sqrt(8))
        assert not np.allclose(first.vectors, second.vectors)

    def test_lda_flags_exclusive(self, tool, archive_path, tmp_path):
        with pytest.raises(UsageError):
            tool.preprocess(archive_path, tmp_path / "out.bin", lda=2, lda_diag=2)

    def test_train_plda_history(self, tool, archive_path, tmp_path):
        history = tool.train_plda(archive_path, tmp_path / "model.plda",
                                  EmConfig(iterations=5, diag_within=True))
        assert list(history.columns) == ["iteration", "log_likelihood"]
        assert history["iteration"].tolist() == [1, 2, 3, 4, 5]
        assert read_plda(tmp_path / "model.plda").diag_constrained

    def test_score_backends(self, tool, archive_path, tmp_path):
        tool.train_plda(archive_path, tmp_path / "model.plda", EmConfig(iterations=3))
        cosine = tool.score(archive_path, tmp_path / "trials")
        plda = tool.score(archive_path, tmp_path / "trials", backend="plda",
                          model=tmp_path / "model.plda", workers=2)
        assert cosine.trials == plda.trials
        assert np.all(np.abs(cosine.scores) <= 1.0)

    def test_plda_needs_model(self, tool, archive_path, tmp_path):
        with pytest.raises(UsageError):
            tool.score(archive_path, tmp_path / "trials", backend="plda")

    def test_evaluate_writes_det(self, tool, archive_path, tmp_path):
        write_scores(tool.score(archive_path, tmp_path / "trials"), tmp_path / "scores")
        row = tool.evaluate(tmp_path / "scores", DcfParams(), det_out=tmp_path / "det.csv")
        assert row.at[0, "n_target"] == 40
        det = pd.read_csv(tmp_path / "det.csv")
        assert list(det.columns) == ["threshold", "p_miss", "p_fa"]

    def test_diagnose_needs_one_source(self, tool, archive_path, tmp_path):
        with pytest.raises(UsageError):
            tool.diagnose()
        with pytest.raises(UsageError):
            tool.diagnose(model=tmp_path / "model.plda", labeled_archive=archive_path)
        table = tool.diagnose(labeled_archive=archive_path)
        assert len(table) == 8

    def test_toy_train_on_archive(self, tool, archive_path):
        history = tool.toy_train("am", MarginConfig(s=10.0), epochs=3, lr=0.01, seed=0,
                                 archive=archive_path)
        assert len(history) == 3

    def test_compare_fits_each_plda_variant(self, tool):
        with patch("tools.pipeline_tool.fit_plda", wraps=fit_plda) as mock_fit:
            table = tool.compare_backends("large-margin", 8, train_speakers=20, train_utts=3,
                                          eval_speakers=20, eval_utts=3, n_target=40,
                                          n_nontarget=40, iterations=2)
        assert table["backend"].tolist() == ["cosine", "plda", "plda-diag"]
        flags = [call.args[1].diag_within for call in mock_fit.call_args_list]
        assert flags == [False, True]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_large_margin_favours_diagonal_plda(self, tool, seed):
        # seven two-utterance speakers give the within scatter rank 7 in 8 dims
        table = tool.compare_backends("large-margin", 8, train_speakers=7, train_utts=2,
                                      train_singletons=100, iterations=50,
                                      seed=seed).set_index("backend")
        assert np.all(table["eer"] > 0.0)
        assert table.at["plda-diag", "eer"] <= table.at["cosine", "eer"] <= table.at["plda", "eer"]

    @pytest.mark.parametrize("seed", [0, 1, 5])
    def test_conventional_favours_plda(self, tool, seed):
        table = tool.compare_backends("conventional", 16, seed=seed,
                                      backends=("cosine", "plda")).set_index("backend")
        assert np.all(table["eer"] > 0.0)
        assert table.at["plda", "eer"] <= table.at["cosine", "eer"]
