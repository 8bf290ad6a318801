"""
Tests for Embedding Resource Module
"""

import struct

import numpy as np
import pytest

from errors import (
    BadLabel,
    BadNumber,
    CorruptArchive,
    DimensionMismatch,
    DuplicateId,
    MalformedLine,
    MissingLabel,
    NonFinite,
    UnknownId,
    UnsupportedFormat,
)
from resources.embedding_resource import (
    Embedding,
    EmbeddingArchive,
    ScoreSet,
    Trial,
    TrialLabel,
    format_scores,
    read_archive,
    read_archive_binary,
    read_archive_text,
    read_scores,
    read_trials,
    resolve_trials,
    write_archive,
    write_archive_binary,
    write_archive_text,
    write_scores,
    write_trials,
)


def random_archive(rng, n=5, dim=3, labeled=True):
    ids = [f"utt{i}" for i in range(n)]
    speakers = [f"spk{i % 2}" if labeled else None for i in range(n)]
    return EmbeddingArchive(dim=dim, ids=ids, speakers=speakers,
                            vectors=rng.standard_normal((n, dim)))


class TestEmbeddingArchive:

    def test_records_round_trip(self):
        records = [Embedding(id="a", speaker="s1", vector=[1.0, 0.0]),
                   Embedding(id="b", vector=[0.0, 1.0])]
        archive = EmbeddingArchive.from_records(records)
        assert archive.dim == 2
        assert archive.records == records
        assert archive.speakers == ["s1", None]

    def test_vectors_are_read_only(self):
        archive = EmbeddingArchive(dim=2, ids=["a"], speakers=[None], vectors=[[1.0, 2.0]])
        with pytest.raises(ValueError):
            archive.vectors[0, 0] = 5.0

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            EmbeddingArchive(dim=1, ids=["a", "a"], speakers=[None, None], vectors=[[1.0], [2.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            EmbeddingArchive(dim=1, ids=["a"], speakers=[None], vectors=[[np.inf]])

    def test_rejects_empty_speaker(self):
        with pytest.raises(ValueError, match="non-empty"):
            EmbeddingArchive(dim=1, ids=["a"], speakers=[""], vectors=[[1.0]])
        with pytest.raises(ValueError):
            Embedding(id="a", speaker="", vector=[1.0])

    def test_rejects_empty_id(self):
        with pytest.raises(ValueError):
            EmbeddingArchive(dim=1, ids=[""], speakers=[None], vectors=[[1.0]])

    def test_speaker_codes_sorted(self):
        archive = EmbeddingArchive(dim=1, ids=["a", "b", "c"], speakers=["z", "a", "z"],
                                   vectors=[[1.0], [2.0], [3.0]])
        codes, names = archive.speaker_codes()
        assert names == ["a", "z"]
        assert codes.tolist() == [1, 0, 1]

    def test_speaker_codes_missing_label(self):
        archive = EmbeddingArchive(dim=1, ids=["a", "b"], speakers=["s", None],
                                   vectors=[[1.0], [2.0]])
        with pytest.raises(MissingLabel):
            archive.speaker_codes()

    def test_resolve_trials_unknown_id(self):
        archive = EmbeddingArchive(dim=1, ids=["a", "b"], speakers=[None, None],
                                   vectors=[[1.0], [2.0]])
        enroll, test = resolve_trials(archive, [Trial(enroll_id="b", test_id="a")])
        assert enroll.tolist() == [1] and test.tolist() == [0]
        with pytest.raises(UnknownId, match="trial 1"):
            resolve_trials(archive, [Trial(enroll_id="a", test_id="b"),
                                     Trial(enroll_id="a", test_id="zz")])


class TestTextArchive:

    def test_minimal_file(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 0\nb 0 1\n")
        archive = read_archive_text(path)
        assert archive.dim == 2
        assert archive.ids == ["a", "b"]
        assert archive.speakers == [None, None]
        np.testing.assert_array_equal(archive.vectors, [[1.0, 0.0], [0.0, 1.0]])

    def test_dimension_mismatch_reports_line(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 0\nb 0 1 1\n")
        with pytest.raises(DimensionMismatch) as exc:
            read_archive_text(path)
        assert exc.value.line == 2

    def test_nan_component(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 nan\n")
        with pytest.raises(NonFinite) as exc:
            read_archive_text(path)
        assert exc.value.line == 1

    def test_non_numeric_component(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 0\nb 0 x\n")
        with pytest.raises(BadNumber) as exc:
            read_archive_text(path)
        assert exc.value.line == 2

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("a 1 0\na 0 1\n")
        with pytest.raises(DuplicateId):
            read_archive_text(path)

    def test_speaker_column_from_header(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("# id speaker vector\na alice 1 2\n\nb - 3 4\n")
        archive = read_archive_text(path)
        assert archive.speakers == ["alice", None]
        assert archive.dim == 2

    def test_invalid_utf8_reports_line(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_bytes(b"a 1 0\n\xff\xfe 0 1\n")
        with pytest.raises(CorruptArchive) as exc:
            read_archive_text(path)
        assert exc.value.line == 2

    def test_header_without_speaker(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("# id vector\na 1 2\n")
        archive = read_archive_text(path)
        assert archive.speakers == [None]
        assert archive.dim == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("")
        with pytest.raises(CorruptArchive):
            read_archive_text(path)

    def test_write_then_read(self, tmp_path):
        rng = np.random.default_rng(3)
        for labeled in (True, False):
            archive = random_archive(rng, labeled=labeled)
            path = tmp_path / f"emb-{labeled}.txt"
            write_archive_text(archive, path)
            assert read_archive_text(path) == archive

    def test_header_written_only_with_speakers(self, tmp_path):
        path = tmp_path / "emb.txt"
        write_archive_text(EmbeddingArchive(dim=1, ids=["a"], speakers=[None], vectors=[[0.5]]), path)
        assert path.read_text() == "a 0.5\n"
        write_archive_text(EmbeddingArchive(dim=1, ids=["a", "b"], speakers=["s", None],
                                            vectors=[[0.5], [1.0]]), path)
        assert path.read_text() == "# id speaker vector\na s 0.5\nb - 1.0\n"


class TestBinaryArchive:

    def test_one_record_round_trip(self, tmp_path):
        archive = EmbeddingArchive(dim=3, ids=["x"], speakers=["spk"],
                                   vectors=[[0.5, -1.25, 3.0]])
        path = tmp_path / "emb.bin"
        write_archive_binary(archive, path)
        assert read_archive_binary(path) == archive

    def test_layout(self, tmp_path):
        archive = EmbeddingArchive(dim=1, ids=["ab"], speakers=[None], vectors=[[1.0]])
        path = tmp_path / "emb.bin"
        write_archive_binary(archive, path)
        expected = (b"EMB1" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab"
                    + struct.pack("<H", 0) + struct.pack("<f", 1.0))
        assert path.read_bytes() == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"XEMB" + bytes(8))
        with pytest.raises(UnsupportedFormat):
            read_archive_binary(path)

    def test_empty_archive(self, tmp_path):
        archive = EmbeddingArchive(dim=4, ids=[], speakers=[], vectors=np.zeros((0, 4)))
        path = tmp_path / "emb.bin"
        write_archive_binary(archive, path)
        loaded = read_archive_binary(path)
        assert len(loaded) == 0
        assert loaded.records == []
        assert loaded.dim == 4

    def test_truncated_record(self, tmp_path):
        archive = EmbeddingArchive(dim=2, ids=["a"], speakers=["s"], vectors=[[1.0, 2.0]])
        path = tmp_path / "emb.bin"
        write_archive_binary(archive, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CorruptArchive):
            read_archive_binary(path)

    def test_trailing_bytes(self, tmp_path):
        archive = EmbeddingArchive(dim=1, ids=["a"], speakers=[None], vectors=[[1.0]])
        path = tmp_path / "emb.bin"
        write_archive_binary(archive, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptArchive):
            read_archive_binary(path)

    def test_invalid_utf8_id(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"EMB1" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"\xff\xfe"
                         + struct.pack("<H", 0) + struct.pack("<f", 1.0))
        with pytest.raises(CorruptArchive, match="id of record 0"):
            read_archive_binary(path)

    def test_invalid_utf8_speaker(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"EMB1" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a"
                         + struct.pack("<H", 1) + b"\xc3" + struct.pack("<f", 1.0))
        with pytest.raises(CorruptArchive, match="speaker of record 0"):
            read_archive_binary(path)

    def test_empty_id(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"EMB1" + struct.pack("<II", 1, 1) + struct.pack("<H", 0)
                         + struct.pack("<H", 0) + struct.pack("<f", 1.0))
        with pytest.raises(CorruptArchive, match="empty id"):
            read_archive_binary(path)

    def test_random_archives_round_trip_at_float32(self, tmp_path):
        rng = np.random.default_rng(11)
        for trial in range(20):
            archive = random_archive(rng, n=int(rng.integers(1, 8)), dim=int(rng.integers(1, 6)),
                                     labeled=bool(trial % 2))
            quantized = archive.with_vectors(archive.vectors.astype(np.float32))
            path = tmp_path / f"emb{trial}.bin"
            write_archive_binary(archive, path)
            assert read_archive_binary(path) == quantized

    def test_text_and_binary_agree(self, tmp_path):
        rng = np.random.default_rng(5)
        archive = random_archive(rng)
        quantized = archive.with_vectors(archive.vectors.astype(np.float32))
        write_archive(quantized, tmp_path / "emb.txt")
        write_archive(quantized, tmp_path / "emb.bin")
        assert read_archive(tmp_path / "emb.txt") == read_archive(tmp_path / "emb.bin")
        assert (tmp_path / "emb.bin").read_bytes()[:4] == b"EMB1"


class TestTrialsAndScores:

    def test_read_trials(self, tmp_path):
        path = tmp_path / "trials"
        path.write_text("a b target\na c\nb c nontarget\n")
        trials = read_trials(path)
        assert trials == [Trial(enroll_id="a", test_id="b", label=TrialLabel.TARGET),
                          Trial(enroll_id="a", test_id="c", label=TrialLabel.UNKNOWN),
                          Trial(enroll_id="b", test_id="c", label=TrialLabel.NONTARGET)]

    def test_bad_label(self, tmp_path):
        path = tmp_path / "trials"
        path.write_text("a b impostor\n")
        with pytest.raises(BadLabel) as exc:
            read_trials(path)
        assert exc.value.line == 1

    def test_invalid_utf8_trials(self, tmp_path):
        path = tmp_path / "trials"
        path.write_bytes(b"a b target\na \x80 nontarget\n")
        with pytest.raises(MalformedLine) as exc:
            read_trials(path)
        assert exc.value.line == 2

    def test_malformed_trial_line(self, tmp_path):
        path = tmp_path / "trials"
        path.write_text("a b target\na\n")
        with pytest.raises(MalformedLine) as exc:
            read_trials(path)
        assert exc.value.line == 2

    def test_trials_write_read(self, tmp_path):
        trials = [Trial(enroll_id="a", test_id="b", label=TrialLabel.TARGET),
                  Trial(enroll_id="c", test_id="d")]
        write_trials(trials, tmp_path / "trials")
        assert (tmp_path / "trials").read_text() == "a b target\nc d\n"
        assert read_trials(tmp_path / "trials") == trials

    def test_score_format(self):
        scores = ScoreSet(trials=[Trial(enroll_id="a", test_id="b", label=TrialLabel.TARGET),
                                  Trial(enroll_id="a", test_id="c")],
                          scores=[0.5, -1.0 / 3.0])
        assert format_scores(scores) == "a b 0.500000 target\na c -0.333333\n"

    def test_scores_write_read(self, tmp_path):
        scores = ScoreSet(trials=[Trial(enroll_id="a", test_id="b", label=TrialLabel.NONTARGET)],
                          scores=[1.25])
        write_scores(scores, tmp_path / "scores")
        loaded = read_scores(tmp_path / "scores")
        assert loaded == scores
        assert loaded.entries == [(scores.trials[0], 1.25)]

    def test_score_set_split(self):
        scores = ScoreSet(trials=[Trial(enroll_id="a", test_id="b", label=TrialLabel.TARGET),
                                  Trial(enroll_id="a", test_id="c", label=TrialLabel.NONTARGET),
                                  Trial(enroll_id="a", test_id="d")],
                          scores=[1.0, 2.0, 3.0])
        targets, nontargets = scores.split()
        assert targets.tolist() == [1.0]
        assert nontargets.tolist() == [2.0]

    def test_score_set_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ScoreSet(trials=[Trial(enroll_id="a", test_id="b")], scores=[np.nan])
