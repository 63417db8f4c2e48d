"""Core grounding types, time/index conversion and the on-disk dataset format.

Layout of a dataset on disk::

    <name>.manifest.json     {"split", "t", "d_v", "annotations"}
    <name>.jsonl             one annotation record per line
    features/<id>.ivgf       16-byte header + row-major little-endian float32

The feature header is ``b"IVGF"``, u32 rows, u32 cols, u32 reserved (zero).
"""
from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"IVGF"
_HEADER = struct.Struct("<4sIII")
_TOKEN_RE = re.compile(r"[a-z0-9']+")


class DatasetFormatError(ValueError):
    """Raised for malformed manifests, annotations or feature files."""

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)


class InvalidIntervalError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter, digit or apostrophe."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TimeInterval:
    start_s: float
    end_s: float
    duration_s: float

    def __post_init__(self):
        if not (0.0 <= self.start_s <= self.end_s <= self.duration_s):
            raise InvalidIntervalError(
                f"need 0 <= start <= end <= duration, got "
                f"({self.start_s}, {self.end_s}, {self.duration_s})"
            )


@dataclass(frozen=True)
class BoundaryIndices:
    i_start: int
    i_end: int
    t: int

    def __post_init__(self):
        if not (0 <= self.i_start <= self.i_end <= self.t - 1):
            raise InvalidIntervalError(
                f"need 0 <= i_start <= i_end <= t-1, got "
                f"({self.i_start}, {self.i_end}, t={self.t})"
            )

    @property
    def length(self) -> int:
        return self.i_end - self.i_start + 1


def _to_index(time_s: float, duration_s: float, t: int) -> int:
    # Python's round() is round-half-to-even.
    return min(max(int(round(t * time_s / duration_s)), 0), t - 1)


def convert_time_to_index(iv: TimeInterval, t: int) -> BoundaryIndices:
    """Map a moment in seconds to inclusive feature indices (round-nearest, clamped)."""
    if t < 2:
        raise InvalidIntervalError(f"feature count must be >= 2, got {t}")
    if iv.duration_s <= 0:
        raise InvalidIntervalError("duration must be positive")
    return BoundaryIndices(
        _to_index(iv.start_s, iv.duration_s, t),
        _to_index(iv.end_s, iv.duration_s, t),
        t,
    )


def convert_index_to_time(b: BoundaryIndices, duration_s: float) -> TimeInterval:
    return TimeInterval(
        duration_s * b.i_start / b.t, duration_s * b.i_end / b.t, duration_s
    )


@dataclass(frozen=True, eq=False)
class VideoFeatureSequence:
    features: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32, copy=True)
        if feats.ndim != 2:
            raise ValueError(f"features must be a T x d_v matrix, got shape {feats.shape}")
        if feats.shape[0] < 2:
            raise ValueError("need at least two feature rows")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def t(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, VideoFeatureSequence):
            return NotImplemented
        return np.array_equal(self.features, other.features)

    __hash__ = None


@dataclass(frozen=True)
class QueryTokens:
    """Query text and its word tokens.

    Integer ids are assigned by a :class:`WordIndex`, which belongs to the
    trained model rather than to the dataset.
    """

    raw_text: str
    tokens: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.tokens:
            object.__setattr__(self, "tokens", tuple(tokenize(self.raw_text)))
        if not self.tokens:
            raise ValueError(f"query {self.raw_text!r} has no tokens")

    def ids(self, index: "WordIndex") -> list[int]:
        return index.encode(self.tokens)


@dataclass(frozen=True)
class GroundingExample:
    id: str
    video: VideoFeatureSequence
    query: QueryTokens
    gold_time: TimeInterval
    gold_idx: BoundaryIndices = None

    def __post_init__(self):
        expected = convert_time_to_index(self.gold_time, self.video.t)
        if self.gold_idx is None:
            object.__setattr__(self, "gold_idx", expected)
        elif self.gold_idx != expected:
            raise DatasetFormatError(
                f"gold indices {self.gold_idx} disagree with gold time ({expected})",
                self.id,
            )


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    t: int
    d_v: int
    examples: tuple[GroundingExample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            if ex.video.t != self.t or ex.video.d_v != self.d_v:
                raise DatasetFormatError(
                    f"features are {ex.video.t}x{ex.video.d_v}, "
                    f"manifest says {self.t}x{self.d_v}",
                    ex.id,
                )

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


class WordIndex:
    """Token -> id map with reserved padding (0) and unknown (1) ids."""

    PAD, UNK = 0, 1

    def __init__(self, words: Iterable[str]):
        self.words = ["<pad>", "<unk>"] + sorted(set(words) - {"<pad>", "<unk>"})
        self._ids = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "WordIndex":
        return cls(tok for ex in manifest for tok in ex.query.tokens)

    def __len__(self):
        return len(self.words)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(tok, self.UNK) for tok in tokens]


# -- binary features ---------------------------------------------------------


def write_features(path: str | os.PathLike, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, rows, cols, 0))
        fh.write(arr.tobytes(order="C"))


def read_features(path: str | os.PathLike, record_id: str | None = None) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read feature file {path}: {exc}", record_id)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("feature file shorter than its header", record_id)
    magic, rows, cols, _ = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetFormatError(f"bad feature magic {magic!r}", record_id)
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise DatasetFormatError(
            f"truncated feature matrix: {len(raw)} bytes, expected {expected}", record_id
        )
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)


# -- manifests ---------------------------------------------------------------


def _manifest_stem(path: Path) -> str:
    name = path.name
    for suffix in (".manifest.json", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def save_dataset(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write ``manifest`` to ``path`` (a ``*.manifest.json`` file).

    Annotations go next to it and features into ``features/`` in the same
    directory.  Returns the manifest path.
    """
    path = Path(path)
    root = path.parent
    stem = _manifest_stem(path)
    feat_dir = root / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    ann_name = f"{stem}.jsonl"
    lines = []
    for ex in manifest:
        rel = f"features/{ex.id}.ivgf"
        write_features(root / rel, ex.video.features)
        record = {
            "id": ex.id,
            "t_start": ex.gold_time.start_s,
            "t_end": ex.gold_time.end_s,
            "duration": ex.gold_time.duration_s,
            "query": ex.query.raw_text,
            "feature_file": rel,
            "feature_rows": ex.video.t,
            "feature_dim": ex.video.d_v,
        }
        lines.append(json.dumps(record, sort_keys=True))
    (root / ann_name).write_text("".join(line + "\n" for line in lines))
    header = {"split": manifest.split, "t": manifest.t, "d_v": manifest.d_v,
              "annotations": ann_name}
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


_RECORD_FIELDS = ("id", "t_start", "t_end", "duration", "query",
                  "feature_file", "feature_rows", "feature_dim")


def _parse_record(line: str, lineno: int, root: Path, t: int, d_v: int) -> GroundingExample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"annotation line {lineno} is not JSON: {exc}")
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"annotation line {lineno} is not an object")
    rid = str(rec.get("id", f"<line {lineno}>"))
    missing = [k for k in _RECORD_FIELDS if k not in rec]
    if missing:
        raise DatasetFormatError(f"missing fields {missing}", rid)
    if rec["feature_rows"] != t or rec["feature_dim"] != d_v:
        raise DatasetFormatError(
            f"dimension mismatch: record declares {rec['feature_rows']}x{rec['feature_dim']}, "
            f"manifest says {t}x{d_v}", rid)
    feats = read_features(root / rec["feature_file"], rid)
    if feats.shape != (t, d_v):
        raise DatasetFormatError(
            f"dimension mismatch: feature file is {feats.shape[0]}x{feats.shape[1]}, "
            f"manifest says {t}x{d_v}", rid)
    try:
        gold = TimeInterval(float(rec["t_start"]), float(rec["t_end"]), float(rec["duration"]))
        return GroundingExample(rid, VideoFeatureSequence(feats), QueryTokens(rec["query"]), gold)
    except DatasetFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(str(exc), rid)


def load_dataset(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest {path}: {exc}")
    for key in ("split", "t", "d_v", "annotations"):
        if key not in header:
            raise DatasetFormatError(f"manifest {path} has no {key!r} field")
    t, d_v = int(header["t"]), int(header["d_v"])
    ann = path.parent / header["annotations"]
    try:
        text = ann.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read annotations {ann}: {exc}")
    examples = [
        _parse_record(line, n, path.parent, t, d_v)
        for n, line in enumerate(text.splitlines(), 1)
        if line.strip()
    ]
    return DatasetManifest(header["split"], t, d_v, tuple(examples))
