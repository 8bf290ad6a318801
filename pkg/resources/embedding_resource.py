"""
Embedding Resource Module
Domain types for embeddings, trial lists and score sets, and the text/binary
interchange formats the CLI stages use to hand them to each other.
"""

import logging
import math
import struct
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

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

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ARCHIVE_MAGIC = b"EMB1"
ABSENT_SPEAKER = "-"


class TrialLabel(str, Enum):
    TARGET = "target"
    NONTARGET = "nontarget"
    UNKNOWN = "unknown"


class Embedding(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str = Field(min_length=1)
    speaker: Optional[str] = Field(default=None, min_length=1)
    vector: np.ndarray

    @field_validator("vector", mode="before")
    @classmethod
    def _as_vector(cls, value):
        vector = np.asarray(value, dtype=np.float64)
        if vector.ndim != 1 or vector.size < 1:
            raise ValueError("vector must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(vector)):
            raise ValueError("vector components must be finite")
        return vector

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return (self.id == other.id and self.speaker == other.speaker
                and np.array_equal(self.vector, other.vector))


class EmbeddingArchive(BaseModel):
    """An ordered, immutable collection of same-dimension embeddings.

    Records are stored column-wise: ``ids`` and ``speakers`` are parallel
    lists and ``vectors`` is an ``N x dim`` float64 matrix whose buffer is
    marked read-only.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int
    ids: List[str]
    speakers: List[Optional[str]]
    vectors: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data):
        if isinstance(data, dict) and "vectors" in data:
            vectors = np.array(data["vectors"], dtype=np.float64)
            if vectors.ndim == 1 and vectors.size == 0 and "dim" in data:
                vectors = vectors.reshape(0, int(data["dim"]))
            data = dict(data)
            data.setdefault("dim", vectors.shape[1] if vectors.ndim == 2 else 0)
            if "speakers" not in data:
                data["speakers"] = [None] * len(data.get("ids", []))
            data["vectors"] = vectors
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.vectors.ndim != 2 or self.vectors.shape != (len(self.ids), self.dim):
            raise ValueError(
                f"vectors shape {self.vectors.shape} does not match "
                f"{len(self.ids)} records of dim {self.dim}")
        if len(self.speakers) != len(self.ids):
            raise ValueError("speakers and ids differ in length")
        if not all(self.ids):
            raise ValueError("ids must be non-empty")
        if any(s == "" for s in self.speakers):
            raise ValueError("speaker labels must be non-empty; use None for an absent label")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vector components must be finite")
        self.vectors.flags.writeable = False
        return self

    @classmethod
    def from_records(cls, records: Iterable[Embedding],
                     dim: Optional[int] = None) -> "EmbeddingArchive":
        records = list(records)
        if dim is None:
            if not records:
                raise ValueError("dim is required for an empty archive")
            dim = records[0].vector.size
        vectors = (np.stack([r.vector for r in records]) if records
                   else np.zeros((0, dim)))
        return cls(dim=dim, ids=[r.id for r in records],
                   speakers=[r.speaker for r in records], vectors=vectors)

    @property
    def records(self) -> List[Embedding]:
        return [Embedding(id=i, speaker=s, vector=v)
                for i, s, v in zip(self.ids, self.speakers, self.vectors)]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingArchive):
            return NotImplemented
        return (self.dim == other.dim and self.ids == other.ids
                and self.speakers == other.speakers
                and np.array_equal(self.vectors, other.vectors))

    def id_index(self) -> Dict[str, int]:
        return {utt_id: row for row, utt_id in enumerate(self.ids)}

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingArchive":
        """Same ids and speakers, new vectors (dimension may change)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        return EmbeddingArchive(dim=vectors.shape[1], ids=list(self.ids),
                                speakers=list(self.speakers), vectors=vectors)

    def speaker_codes(self) -> Tuple[np.ndarray, List[str]]:
        """Integer speaker index per record plus the sorted speaker names."""
        for utt_id, speaker in zip(self.ids, self.speakers):
            if speaker is None:
                raise MissingLabel(f"record '{utt_id}' has no speaker label")
        names, codes = np.unique(np.asarray(self.speakers, dtype=object).astype(str),
                                 return_inverse=True)
        return codes.reshape(-1), [str(n) for n in names]


class Trial(BaseModel):
    model_config = ConfigDict(frozen=True)

    enroll_id: str
    test_id: str
    label: TrialLabel = TrialLabel.UNKNOWN


class ScoreSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    trials: List[Trial]
    scores: np.ndarray

    @field_validator("scores", mode="before")
    @classmethod
    def _as_scores(cls, value):
        scores = np.array(value, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        return scores

    @model_validator(mode="after")
    def _check(self):
        if self.scores.size != len(self.trials):
            raise ValueError("one score per trial is required")
        self.scores.flags.writeable = False
        return self

    @property
    def entries(self) -> List[Tuple[Trial, float]]:
        return [(t, float(s)) for t, s in zip(self.trials, self.scores)]

    def __len__(self) -> int:
        return len(self.trials)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return self.trials == other.trials and np.array_equal(self.scores, other.scores)

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """Target and nontarget scores; unknown-label trials are dropped."""
        labels = np.array([t.label.value for t in self.trials], dtype=object)
        return (self.scores[labels == TrialLabel.TARGET.value],
                self.scores[labels == TrialLabel.NONTARGET.value])


def _parse_float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise BadNumber(f"'{token}' is not a number", line=line)
    if not math.isfinite(value):
        raise NonFinite(f"non-finite component '{token}'", line=line)
    return value


def _read_lines(path: PathLike, error=MalformedLine) -> List[str]:
    """Decoded lines of a UTF-8 text file; an undecodable line raises ``error``."""
    lines = []
    for line_no, raw in enumerate(Path(path).read_bytes().splitlines(), start=1):
        try:
            lines.append(raw.decode("utf-8"))
        except UnicodeDecodeError:
            raise error(f"{path}: line is not valid UTF-8", line=line_no)
    return lines


def read_archive_text(path: PathLike) -> EmbeddingArchive:
    """Read ``id [speaker] v1 ... vd`` lines.

    An optional first line starting with ``#`` is a header; the speaker
    column is present iff the header contains the token ``speaker``.
    A speaker written as ``-`` is absent.
    """
    lines = _read_lines(path, CorruptArchive)

    has_speaker = False
    start = 0
    if lines and lines[0].lstrip().startswith("#"):
        has_speaker = "speaker" in lines[0].lstrip("# \t").split()
        start = 1

    n_meta = 2 if has_speaker else 1
    ids: List[str] = []
    speakers: List[Optional[str]] = []
    rows: List[List[float]] = []
    seen = set()
    dim = None
    for line_no, text in enumerate(lines[start:], start=start + 1):
        tokens = text.split()
        if not tokens:
            continue
        if len(tokens) <= n_meta:
            raise MalformedLine("record has no vector components", line=line_no)
        utt_id = tokens[0]
        if utt_id in seen:
            raise DuplicateId(f"id '{utt_id}' appears twice", line=line_no)
        values = [_parse_float(tok, line_no) for tok in tokens[n_meta:]]
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DimensionMismatch(f"expected {dim} components, found {len(values)}",
                                    line=line_no)
        speaker = tokens[1] if has_speaker else None
        seen.add(utt_id)
        ids.append(utt_id)
        speakers.append(None if speaker == ABSENT_SPEAKER else speaker)
        rows.append(values)

    if dim is None:
        raise CorruptArchive(f"{path}: text archive has no records")
    logger.debug("read %d records of dim %d from %s", len(ids), dim, path)
    return EmbeddingArchive(dim=dim, ids=ids, speakers=speakers,
                            vectors=np.array(rows, dtype=np.float64))


def format_archive_text(archive: EmbeddingArchive) -> str:
    labeled = any(s is not None for s in archive.speakers)
    out = ["# id speaker vector"] if labeled else []
    for utt_id, speaker, vector in zip(archive.ids, archive.speakers, archive.vectors):
        if not utt_id or any(ch.isspace() for ch in utt_id):
            raise MalformedLine(f"id '{utt_id}' cannot be written to a text archive")
        fields = [utt_id]
        if labeled:
            fields.append(ABSENT_SPEAKER if speaker is None else speaker)
        fields.extend(repr(float(v)) for v in vector)
        out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def write_archive_text(archive: EmbeddingArchive, path: PathLike) -> None:
    Path(path).write_text(format_archive_text(archive), encoding="utf-8")


def write_archive_binary(archive: EmbeddingArchive, path: PathLike) -> None:
    """Write the ``EMB1`` layout; vectors are stored as little-endian float32."""
    parts = [ARCHIVE_MAGIC, struct.pack("<II", archive.dim, len(archive))]
    vectors = archive.vectors.astype("<f4")
    for utt_id, speaker, vector in zip(archive.ids, archive.speakers, vectors):
        id_bytes = utt_id.encode("utf-8")
        spk_bytes = b"" if speaker is None else speaker.encode("utf-8")
        if len(id_bytes) > 0xFFFF or len(spk_bytes) > 0xFFFF:
            raise MalformedLine(f"id or speaker of '{utt_id}' exceeds 65535 bytes")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack("<H", len(spk_bytes)))
        parts.append(spk_bytes)
        parts.append(vector.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_archive_binary(path: PathLike) -> EmbeddingArchive:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise UnsupportedFormat(f"{path}: missing EMB1 magic")
    if len(data) < 12:
        raise CorruptArchive(f"{path}: truncated header")
    dim, count = struct.unpack_from("<II", data, 4)
    if dim < 1:
        raise CorruptArchive(f"{path}: dimension must be positive")

    def take(offset: int, size: int, record: int) -> int:
        if offset + size > len(data):
            raise CorruptArchive(f"{path}: record {record} is truncated")
        return offset + size

    def decode(start: int, end: int, record: int, field: str) -> str:
        try:
            return data[start:end].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptArchive(f"{path}: {field} of record {record} is not valid UTF-8")

    ids: List[str] = []
    speakers: List[Optional[str]] = []
    vectors = np.empty((count, dim), dtype=np.float64)
    seen = set()
    offset = 12
    for record in range(count):
        end = take(offset, 2, record)
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset = end
        end = take(offset, id_len, record)
        utt_id = decode(offset, end, record, "id")
        if not utt_id:
            raise CorruptArchive(f"{path}: record {record} has an empty id")
        offset = end
        end = take(offset, 2, record)
        (spk_len,) = struct.unpack_from("<H", data, offset)
        offset = end
        end = take(offset, spk_len, record)
        speaker = decode(offset, end, record, "speaker") if spk_len else None
        offset = end
        end = take(offset, 4 * dim, record)
        vectors[record] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset = end
        if utt_id in seen:
            raise DuplicateId(f"{path}: id '{utt_id}' appears twice")
        if not np.all(np.isfinite(vectors[record])):
            raise NonFinite(f"{path}: record '{utt_id}' has non-finite components")
        seen.add(utt_id)
        ids.append(utt_id)
        speakers.append(speaker)
    if offset != len(data):
        raise CorruptArchive(f"{path}: {len(data) - offset} trailing bytes")
    logger.debug("read %d records of dim %d from %s", count, dim, path)
    return EmbeddingArchive(dim=dim, ids=ids, speakers=speakers, vectors=vectors)


def read_archive(path: PathLike) -> EmbeddingArchive:
    """Binary when the file starts with the ``EMB1`` magic, text otherwise."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == ARCHIVE_MAGIC:
        return read_archive_binary(path)
    return read_archive_text(path)


def write_archive(archive: EmbeddingArchive, path: PathLike) -> None:
    """Text for a ``.txt`` suffix, ``EMB1`` binary otherwise."""
    if Path(path).suffix == ".txt":
        write_archive_text(archive, path)
    else:
        write_archive_binary(archive, path)


def _parse_label(token: str, line: int) -> TrialLabel:
    if token == TrialLabel.TARGET.value:
        return TrialLabel.TARGET
    if token == TrialLabel.NONTARGET.value:
        return TrialLabel.NONTARGET
    raise BadLabel(f"label '{token}' is not target/nontarget", line=line)


def read_trials(path: PathLike) -> List[Trial]:
    trials = []
    for line_no, text in enumerate(_read_lines(path), start=1):
        tokens = text.split()
        if not tokens:
            continue
        if len(tokens) not in (2, 3):
            raise MalformedLine("expected 'enroll test [target|nontarget]'", line=line_no)
        label = _parse_label(tokens[2], line_no) if len(tokens) == 3 else TrialLabel.UNKNOWN
        trials.append(Trial(enroll_id=tokens[0], test_id=tokens[1], label=label))
    return trials


def format_trials(trials: Iterable[Trial]) -> str:
    out = []
    for trial in trials:
        fields = [trial.enroll_id, trial.test_id]
        if trial.label is not TrialLabel.UNKNOWN:
            fields.append(trial.label.value)
        out.append(" ".join(fields))
    return "".join(line + "\n" for line in out)


def write_trials(trials: Iterable[Trial], path: PathLike) -> None:
    Path(path).write_text(format_trials(trials), encoding="utf-8")


def format_scores(scores: ScoreSet) -> str:
    """``enroll test score [label]`` per trial, scores at ``%.6f``."""
    out = []
    for trial, score in scores.entries:
        line = f"{trial.enroll_id} {trial.test_id} {score:.6f}"
        if trial.label is not TrialLabel.UNKNOWN:
            line += f" {trial.label.value}"
        out.append(line + "\n")
    return "".join(out)


def write_scores(scores: ScoreSet, path: PathLike) -> None:
    Path(path).write_text(format_scores(scores), encoding="utf-8")


def read_scores(path: PathLike) -> ScoreSet:
    trials = []
    values = []
    for line_no, text in enumerate(_read_lines(path), start=1):
        tokens = text.split()
        if not tokens:
            continue
        if len(tokens) not in (3, 4):
            raise MalformedLine("expected 'enroll test score [label]'", line=line_no)
        label = _parse_label(tokens[3], line_no) if len(tokens) == 4 else TrialLabel.UNKNOWN
        values.append(_parse_float(tokens[2], line_no))
        trials.append(Trial(enroll_id=tokens[0], test_id=tokens[1], label=label))
    return ScoreSet(trials=trials, scores=np.array(values, dtype=np.float64))


def resolve_trials(archive: EmbeddingArchive,
                   trials: List[Trial]) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of every trial's enrollment and test embeddings."""
    index = archive.id_index()
    enroll = np.empty(len(trials), dtype=np.intp)
    test = np.empty(len(trials), dtype=np.intp)
    for position, trial in enumerate(trials):
        for utt_id, target in ((trial.enroll_id, enroll), (trial.test_id, test)):
            if utt_id not in index:
                raise UnknownId(f"trial {position}: id '{utt_id}' is not in the archive")
            target[position] = index[utt_id]
    return enroll, test
