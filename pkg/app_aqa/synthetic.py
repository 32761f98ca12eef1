"""
Planted-signal datasets for verifying training end to end.

Every instance is standard-normal noise. In each stream a few "key"
instances are shifted along a fixed unit direction by signal_scale * m,
where m is the video's per-stream magnitude. The ground-truth score is
clip01(sigmoid(a * m_dynamic + b * m_static) + noise).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .context_attention import STREAM_DIMS
from .errors import ConfigError, DataError
from .feature_io import VideoRecord, VideoSample, write_feature_file, write_manifest

logger = logging.getLogger(__name__)

KEY_INDEX_FILENAME = "key_instances.csv"
MANIFEST_FILENAME = "manifest.csv"
FEATURE_DIRNAME = "features"
STREAMS = ("dynamic", "static")


@dataclass
class SyntheticDataset:
    records: List[VideoRecord]
    features: Dict[str, Dict[str, np.ndarray]]
    scores: Dict[str, float]
    key_instances: Dict[Tuple[str, str], List[int]]
    magnitudes: Dict[str, Tuple[float, float]]
    latent: Dict[str, float]
    directions: Dict[str, np.ndarray] = field(default_factory=dict)

    def samples(self) -> List[VideoSample]:
        return [
            VideoSample(
                video_id=record.video_id,
                features=self.features[record.video_id],
                score=record.total,
                split=record.split,
                key_instances={stream: self.key_instances[(record.video_id, stream)] for stream in STREAMS},
            )
            for record in self.records
        ]


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    direction = rng.standard_normal(dim)
    return direction / np.linalg.norm(direction)


def make_synthetic_dataset(
    n_videos: int,
    n_dynamic: int,
    n_static: int,
    key_count: int,
    noise_sigma: float,
    rng: np.random.Generator,
    n_test: int = 0,
    signal_scale: float = 4.0,
    coef_dynamic: float = 2.0,
    coef_static: float = 2.0,
) -> SyntheticDataset:
    if n_videos < 1:
        raise ConfigError(f"n_videos must be positive, got {n_videos}")
    if not 0 <= n_test < n_videos:
        raise ConfigError(f"n_test must lie in [0, {n_videos}), got {n_test}")
    if n_dynamic < 1 or n_static < 1:
        raise ConfigError("instance counts must be positive")
    if not 1 <= key_count <= min(n_dynamic, n_static):
        raise ConfigError(f"key_count must lie in [1, {min(n_dynamic, n_static)}], got {key_count}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be non-negative, got {noise_sigma}")

    counts = {"dynamic": n_dynamic, "static": n_static}
    directions = {stream: _unit_vector(rng, STREAM_DIMS[stream]) for stream in STREAMS}

    records: List[VideoRecord] = []
    features: Dict[str, Dict[str, np.ndarray]] = {}
    scores: Dict[str, float] = {}
    key_instances: Dict[Tuple[str, str], List[int]] = {}
    magnitudes: Dict[str, Tuple[float, float]] = {}
    latent: Dict[str, float] = {}
    width = len(str(n_videos - 1))

    for index in range(n_videos):
        video_id = f"synth_{index:0{width}d}"
        m_dynamic, m_static = (float(value) for value in rng.uniform(-1.0, 1.0, size=2))
        video_features = {}
        for stream, magnitude in (("dynamic", m_dynamic), ("static", m_static)):
            matrix = rng.standard_normal((counts[stream], STREAM_DIMS[stream]))
            keys = sorted(int(i) for i in rng.choice(counts[stream], size=key_count, replace=False))
            matrix[keys] += signal_scale * magnitude * directions[stream]
            # Stored features are float32 on disk; keep memory identical to a reload.
            video_features[stream] = matrix.astype(np.float32).astype(np.float64)
            key_instances[(video_id, stream)] = keys

        signal = coef_dynamic * m_dynamic + coef_static * m_static
        noise = float(rng.normal(0.0, noise_sigma)) if noise_sigma > 0 else 0.0
        score = float(np.clip(1.0 / (1.0 + np.exp(-signal)) + noise, 0.0, 1.0))

        features[video_id] = video_features
        scores[video_id] = score
        magnitudes[video_id] = (m_dynamic, m_static)
        latent[video_id] = signal
        records.append(
            VideoRecord(
                video_id=video_id,
                dynamic_path=f"{FEATURE_DIRNAME}/{video_id}_dynamic.aqf",
                static_path=f"{FEATURE_DIRNAME}/{video_id}_static.aqf",
                difficulty=score / 2.0,
                execution=score / 2.0,
                total=score,
                split="test" if index >= n_videos - n_test else "train",
            )
        )

    return SyntheticDataset(
        records=records,
        features=features,
        scores=scores,
        key_instances=key_instances,
        magnitudes=magnitudes,
        latent=latent,
        directions=directions,
    )


def write_synthetic_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write AQF1 files, the manifest and the key-instance sidecar under `out_dir`."""
    out_dir = Path(out_dir)
    for record in dataset.records:
        for stream in STREAMS:
            write_feature_file(out_dir / record.path_for(stream), dataset.features[record.video_id][stream])
    manifest_path = write_manifest(out_dir / MANIFEST_FILENAME, dataset.records)

    key_path = out_dir / KEY_INDEX_FILENAME
    with key_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["video_id", "stream", "instance_index"])
        for record in dataset.records:
            for stream in STREAMS:
                for instance in dataset.key_instances[(record.video_id, stream)]:
                    writer.writerow([record.video_id, stream, instance])

    logger.info("Wrote %s synthetic videos to %s", len(dataset.records), out_dir)
    return {"manifest": manifest_path, "key_instances": key_path}


def read_key_instances(path: Union[str, Path]) -> Dict[Tuple[str, str], List[int]]:
    path = Path(path)
    keys: Dict[Tuple[str, str], List[int]] = {}
    try:
        with path.open(encoding="utf-8", newline="") as handle:
            for row_number, row in enumerate(csv.DictReader(handle), start=2):
                try:
                    index = int(row["instance_index"])
                    stream = row["stream"]
                    video_id = row["video_id"]
                except (KeyError, TypeError, ValueError):
                    raise DataError(
                        f"{path}: row {row_number}: expected video_id,stream,instance_index with an integer index",
                        code="bad_key_index",
                    ) from None
                if stream not in STREAMS or index < 0:
                    raise DataError(f"{path}: row {row_number}: bad stream or index", code="bad_key_index")
                keys.setdefault((video_id, stream), []).append(index)
    except UnicodeDecodeError:
        raise DataError(f"key-instance index is not UTF-8: {path}", code="bad_encoding") from None
    except OSError as exc:
        raise DataError(f"key-instance index is unreadable: {path} ({exc.strerror})", code="unreadable") from None
    return keys
