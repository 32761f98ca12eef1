"""
Feature files, manifests, target normalization and start-shift augmentation.

AQF1 feature file (little-endian): magic b"AQF1", u32 N, u32 D, then N*D
float32 values row-major; no trailing bytes. Values are widened to float64
on read.
"""
from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .context_attention import STREAM_DIMS
from .errors import ConfigError, DataError, FeatureFileError, ManifestError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"AQF1"
_FEATURE_HEADER = struct.Struct("<4sII")

MANIFEST_COLUMNS = (
    "video_id",
    "dynamic_path",
    "static_path",
    "score_difficulty",
    "score_execution",
    "score_total",
    "split",
)
SPLITS = ("train", "test")
WINDOW_MODES = ("random-shift", "center", "start")


# ---- AQF1 ----

def encode_features(features: np.ndarray) -> bytes:
    matrix = np.asarray(features, dtype=np.float64)
    if matrix.ndim != 2:
        raise FeatureFileError(f"features must be 2-D, got {matrix.ndim} dimensions", code="dimension_mismatch")
    if matrix.shape[0] == 0:
        raise FeatureFileError("empty instance set", code="empty_instance_set")
    narrowed = matrix.astype("<f4")
    if not np.all(np.isfinite(narrowed)):
        raise FeatureFileError("features contain non-finite values after float32 conversion", code="non_finite")
    rows, cols = matrix.shape
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, rows, cols) + narrowed.tobytes()


def decode_features(payload: bytes, source: str = "<bytes>", expected_dim: Optional[int] = None) -> np.ndarray:
    if len(payload) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"{source}: unexpected EOF in header", code="unexpected_eof")
    magic, rows, cols = _FEATURE_HEADER.unpack_from(payload)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{source}: bad magic {magic!r}", code="bad_magic")
    if rows == 0:
        raise FeatureFileError(f"{source}: empty instance set", code="empty_instance_set")
    expected_size = _FEATURE_HEADER.size + rows * cols * 4
    if len(payload) < expected_size:
        raise FeatureFileError(
            f"{source}: unexpected EOF ({len(payload)} of {expected_size} bytes)",
            code="unexpected_eof",
        )
    if len(payload) > expected_size:
        raise FeatureFileError(
            f"{source}: {len(payload) - expected_size} trailing bytes",
            code="trailing_bytes",
        )
    if expected_dim is not None and cols != expected_dim:
        raise FeatureFileError(
            f"{source}: feature width {cols} does not match expected {expected_dim}",
            code="dimension_mismatch",
        )
    values = np.frombuffer(payload, dtype="<f4", offset=_FEATURE_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FeatureFileError(f"{source}: non-finite feature values", code="non_finite")
    return values.reshape(rows, cols)


def write_feature_file(path: Union[str, Path], features: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_features(features))
    return path


def read_feature_file(path: Union[str, Path], stream: Optional[str] = None) -> np.ndarray:
    """Read an AQF1 file; with a stream name, also check the feature width."""
    path = Path(path)
    if stream is not None and stream not in STREAM_DIMS:
        raise ConfigError(f"unknown stream '{stream}'")
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise FeatureFileError(f"feature file not found: {path}", code="not_found") from None
    except OSError as exc:
        raise FeatureFileError(f"feature file is unreadable: {path} ({exc.strerror})", code="unreadable") from None
    expected_dim = STREAM_DIMS[stream] if stream else None
    features = decode_features(payload, source=str(path), expected_dim=expected_dim)
    if stream is None and features.shape[1] not in STREAM_DIMS.values():
        raise FeatureFileError(
            f"{path}: feature width {features.shape[1]} is neither 1024 nor 2048",
            code="dimension_mismatch",
        )
    return features


# ---- manifest ----

@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    dynamic_path: str
    static_path: str
    difficulty: float
    execution: float
    total: float
    split: str = "train"

    def path_for(self, stream: str) -> str:
        return self.dynamic_path if stream == "dynamic" else self.static_path


def _parse_real(value: str, column: str, row_number: int, source: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ManifestError(
            f"{source}: row {row_number}: {column} '{value}' is not a real number",
            code="unparsable_real",
        ) from None
    if not np.isfinite(number):
        raise ManifestError(f"{source}: row {row_number}: {column} is not finite", code="unparsable_real")
    return number


def parse_manifest(text: str, source: str = "<manifest>", base_dir: Optional[Path] = None) -> List[VideoRecord]:
    reader = csv.reader(io.StringIO(text), quoting=csv.QUOTE_NONE, strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{source}: empty manifest", code="bad_header") from None
    header = [column.strip() for column in header]
    missing = [column for column in MANIFEST_COLUMNS if column not in header]
    if missing:
        raise ManifestError(f"{source}: missing column(s) {', '.join(missing)}", code="missing_column")
    if tuple(header) != MANIFEST_COLUMNS:
        raise ManifestError(
            f"{source}: header must be exactly {','.join(MANIFEST_COLUMNS)}",
            code="bad_header",
        )

    records: List[VideoRecord] = []
    seen = set()
    for row_number, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if any('"' in cell for cell in row):
            raise ManifestError(f"{source}: row {row_number}: quoted fields are not supported", code="quoted_field")
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestError(
                f"{source}: row {row_number}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}",
                code="wrong_field_count",
            )
        cells = dict(zip(MANIFEST_COLUMNS, (cell.strip() for cell in row)))
        video_id = cells["video_id"]
        if not video_id:
            raise ManifestError(f"{source}: row {row_number}: empty video_id", code="missing_column")
        if video_id in seen:
            raise ManifestError(f"{source}: duplicate video_id '{video_id}'", code="duplicate_id")
        seen.add(video_id)
        split = cells["split"].lower()
        if split not in SPLITS:
            raise ManifestError(f"{source}: row {row_number}: split '{cells['split']}' is not train/test", code="bad_split")

        dynamic_path, static_path = cells["dynamic_path"], cells["static_path"]
        if base_dir is not None:
            dynamic_path = str(base_dir / dynamic_path)
            static_path = str(base_dir / static_path)
        records.append(
            VideoRecord(
                video_id=video_id,
                dynamic_path=dynamic_path,
                static_path=static_path,
                difficulty=_parse_real(cells["score_difficulty"], "score_difficulty", row_number, source),
                execution=_parse_real(cells["score_execution"], "score_execution", row_number, source),
                total=_parse_real(cells["score_total"], "score_total", row_number, source),
                split=split,
            )
        )
    return records


def read_manifest(path: Union[str, Path]) -> List[VideoRecord]:
    """Parse a manifest CSV; feature paths resolve relative to its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}", code="not_found") from None
    except UnicodeDecodeError:
        raise ManifestError(f"manifest is not UTF-8: {path}", code="bad_encoding") from None
    except OSError as exc:
        raise ConfigError(f"manifest is unreadable: {path} ({exc.strerror})", code="unreadable") from None
    return parse_manifest(text, source=str(path), base_dir=path.parent)


def write_manifest(path: Union[str, Path], records: Iterable[VideoRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(MANIFEST_COLUMNS)]
    for record in records:
        for value in (record.video_id, record.dynamic_path, record.static_path):
            if "," in value or '"' in value:
                raise ManifestError(f"'{value}' cannot be written without quoting", code="quoted_field")
        lines.append(
            ",".join(
                [
                    record.video_id,
                    record.dynamic_path,
                    record.static_path,
                    repr(float(record.difficulty)),
                    repr(float(record.execution)),
                    repr(float(record.total)),
                    record.split,
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_random_split(records: Sequence[VideoRecord], test_count: int, rng: np.random.Generator) -> List[VideoRecord]:
    """Reassign splits so that `test_count` randomly drawn videos form the test split."""
    if not 0 <= test_count < len(records):
        raise ConfigError(f"test count {test_count} must lie in [0, {len(records)})")
    test_indices = set(int(i) for i in rng.permutation(len(records))[:test_count])
    return [
        replace(record, split="test" if index in test_indices else "train")
        for index, record in enumerate(records)
    ]


# ---- targets ----

@dataclass(frozen=True)
class ScoreNormalizer:
    """Min-max map of training-split scores onto [0, 1]."""

    minimum: float
    maximum: float

    def __post_init__(self):
        if not self.maximum > self.minimum:
            raise DataError(
                f"score range is degenerate (min={self.minimum}, max={self.maximum})",
                code="degenerate_scores",
            )

    @classmethod
    def fit(cls, scores: Iterable[float]) -> "ScoreNormalizer":
        values = [float(score) for score in scores]
        if not values:
            raise DataError("cannot fit a score normalizer on an empty split", code="empty_split")
        return cls(minimum=min(values), maximum=max(values))

    @property
    def span(self) -> float:
        return self.maximum - self.minimum

    def normalize(self, score: float) -> float:
        # Test scores may land outside [0, 1].
        return (float(score) - self.minimum) / self.span

    def inverse(self, value: float) -> float:
        return float(value) * self.span + self.minimum


# ---- augmentation ----

@dataclass(frozen=True)
class AugmentPolicy:
    window_dynamic: int = 26
    window_static: int = 80
    mode: str = "random-shift"

    def __post_init__(self):
        if self.window_dynamic < 1 or self.window_static < 1:
            raise ConfigError("augmentation windows must be positive")
        if self.mode not in WINDOW_MODES:
            raise ConfigError(f"window mode must be one of {', '.join(WINDOW_MODES)}")

    def window_for(self, stream: str) -> int:
        return self.window_dynamic if stream == "dynamic" else self.window_static

    def with_mode(self, mode: str) -> "AugmentPolicy":
        return replace(self, mode=mode)


def window_offset(count: int, window: int, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    slack = count - window
    if slack <= 0 or mode == "start":
        return 0
    if mode == "center":
        return slack // 2
    if rng is None:
        raise ConfigError("random-shift windows need a seeded random stream")
    return int(rng.integers(0, slack + 1))


def augment_window(
    features: np.ndarray,
    policy: AugmentPolicy,
    rng: Optional[np.random.Generator] = None,
    stream: str = "dynamic",
) -> np.ndarray:
    """
    Contiguous window of the stream's configured length, rows kept in order.

    Sets shorter than the window are padded by repeating their last row.
    """
    features = np.asarray(features, dtype=np.float64)
    window = policy.window_for(stream)
    count = features.shape[0]
    if count == 0:
        raise FeatureFileError("empty instance set", code="empty_instance_set")
    if count < window:
        logger.warning("Padding %s %s instances to window %s by repeating the last row", count, stream, window)
        padding = np.repeat(features[-1:], window - count, axis=0)
        return np.concatenate([features, padding], axis=0)
    offset = window_offset(count, window, policy.mode, rng)
    return features[offset:offset + window]


# ---- samples ----

@dataclass
class VideoSample:
    """One video's features in memory, ready for training or scoring."""

    video_id: str
    features: Dict[str, np.ndarray]
    score: float
    split: str = "train"
    key_instances: Dict[str, List[int]] = field(default_factory=dict)


def load_samples(records: Sequence[VideoRecord], streams: Sequence[str]) -> List[VideoSample]:
    samples = []
    for record in records:
        features = {stream: read_feature_file(record.path_for(stream), stream=stream) for stream in streams}
        samples.append(VideoSample(video_id=record.video_id, features=features, score=record.total, split=record.split))
    logger.info("Loaded %s videos (%s)", len(samples), ", ".join(streams))
    return samples


def split_samples(samples: Sequence[VideoSample], split: str) -> List[VideoSample]:
    return [sample for sample in samples if sample.split == split]
