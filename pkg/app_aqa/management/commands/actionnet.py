"""
Operator entry point for the action-quality head.

    python manage.py actionnet train --preset synthetic --out-dir runs/demo
    python manage.py actionnet eval --manifest data/manifest.csv --checkpoint runs/demo/checkpoint.anpw
    python manage.py actionnet export-attention --manifest ... --checkpoint ... --video-ids v1,v2
    python manage.py actionnet synth --out-dir data/synth --seed 3
    python manage.py actionnet inspect --streams ts --attention caa
    python manage.py actionnet ablate --preset synthetic --seeds 0,1,2,3,4

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric error.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from app_aqa.action_net import CLAIMED_PARAMETER_COUNT, count_params, forward, init_params, layer_shapes
from app_aqa.checkpoints import load_params
from app_aqa.context_attention import top_instances
from app_aqa.errors import EXIT_CONFIG, ActionNetError, ConfigError, DataError
from app_aqa.feature_io import (
    ScoreNormalizer,
    VideoRecord,
    VideoSample,
    load_samples,
    make_random_split,
    read_manifest,
)
from app_aqa.rank_metrics import mean_rho, spearman
from app_aqa.run_config import CONFIG_KEYS, RunConfig, resolve_run_config, write_config_snapshot
from app_aqa.seeding import derive_rng
from app_aqa.synthetic import (
    KEY_INDEX_FILENAME,
    make_synthetic_dataset,
    read_key_instances,
    write_synthetic_dataset,
)
from app_aqa.trainer import predict_samples, train

logger = logging.getLogger(__name__)

REPORT_FILENAME = "report.csv"
CHECKPOINT_FILENAME = "checkpoint.anpw"
CONFIG_SNAPSHOT_FILENAME = "resolved_config.conf"
PREDICTIONS_FILENAME = "predictions.csv"
ATTENTION_FILENAME = "attention.csv"
ABLATION_FILENAME = "ablation.csv"
ABLATION_SUMMARY_FILENAME = "ablation_summary.csv"

# (label, streams, attention) trained by `ablate`.
ABLATION_VARIANTS = (
    ("DS+CAA", "ds", "caa"),
    ("SS+CAA", "ss", "caa"),
    ("TS+CAA", "ts", "caa"),
    ("TS+SAU", "ts", "sau"),
    ("TS+AVG", "ts", "avg"),
)
SOFT_MARGIN = 0.02

# Flags shared by every subcommand; each maps onto a RunConfig key.
COMMON_FLAGS = (
    ("--manifest", "Manifest CSV; feature paths resolve relative to it."),
    ("--out-dir", "Directory for reports, checkpoints and CSV outputs."),
    ("--seed", "Run seed; every random draw derives from it."),
    ("--preset", "Dataset preset: mit, rg-ball, rg-clubs, rg-hoop, rg-ribbon, synthetic, custom."),
    ("--streams", "ds, ss or ts."),
    ("--attention", "caa, sau or avg."),
    ("--checkpoint", "ANPW checkpoint to read (eval, export-attention, inspect) or warm-start from (train)."),
)
TUNING_FLAGS = (
    "--attention-norm",
    "--kernel-scale",
    "--dropout",
    "--window-dynamic",
    "--window-static",
    "--window-mode",
    "--batch-size",
    "--epochs",
    "--decay-epochs",
    "--decay-rate",
    "--lr-attention",
    "--lr-prediction",
    "--momentum",
    "--weight-decay",
    "--workers",
)
SYNTH_FLAGS = ("--n-videos", "--n-test", "--n-dynamic", "--n-static", "--key-count", "--noise-sigma")


@dataclass
class LoadedData:
    records: List[VideoRecord]
    samples: List[VideoSample]
    key_instances: Dict[Tuple[str, str], List[int]] = field(default_factory=dict)


def _format_rho(value: float) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{value:.6f}"


def _validation_message(detail) -> str:
    if isinstance(detail, dict):
        return "; ".join(f"{key}: {_validation_message(value)}" for key, value in detail.items())
    if isinstance(detail, list):
        return " ".join(_validation_message(item) for item in detail)
    return str(detail)


class Command(BaseCommand):
    help = "Train, evaluate and inspect the context-aware attention score regressor."

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest="action", required=True)
        actions = {
            "train": "Train on the manifest's train split and write report, checkpoint and config snapshot.",
            "eval": "Score one split with a checkpoint and write per-video predictions.",
            "export-attention": "Write per-instance attention weights for selected videos.",
            "synth": "Write a planted-signal dataset: AQF1 files, manifest and key-instance index.",
            "inspect": "Print the per-layer parameter breakdown.",
            "ablate": "Train stream and attention variants over several seeds and random splits.",
        }
        for name, help_text in actions.items():
            subparser = subparsers.add_parser(name, help=help_text)
            subparser.add_argument("--config", help="UTF-8 'key = value' config file; flags override it.")
            for flag, flag_help in COMMON_FLAGS:
                subparser.add_argument(flag, help=flag_help)
            for flag in TUNING_FLAGS + SYNTH_FLAGS:
                subparser.add_argument(flag)
            subparser.add_argument(
                "--adjacency-grad",
                action="store_const",
                const="true",
                default=None,
                help="Back-propagate through the instance graph.",
            )
            subparser.add_argument("--split", help="Split scored by eval or exported by export-attention.")
            subparser.add_argument("--video-ids", help="Comma-separated video ids for export-attention.")
            subparser.add_argument("--seeds", help="Comma-separated seeds for ablate.")

    def handle(self, *args, **options):
        action = options["action"]
        overrides = {key: options.get(key) for key in CONFIG_KEYS}
        try:
            config = resolve_run_config(options.get("config"), overrides)
            handler = getattr(self, f"handle_{action.replace('-', '_')}")
            handler(config)
        except ValidationError as exc:
            raise CommandError(f"invalid configuration: {_validation_message(exc.detail)}", returncode=EXIT_CONFIG)
        except ActionNetError as exc:
            logger.debug("%s failed", action, exc_info=True)
            raise CommandError(str(exc), returncode=exc.exit_code)

    # ---- data ----

    def _load(self, config: RunConfig, streams: Sequence[str], splits: Optional[Sequence[str]] = None) -> LoadedData:
        """Records, samples and key-instance index from the manifest or the in-memory synthetic preset."""
        wanted = set(splits) if splits else None
        if config.manifest:
            manifest_path = Path(config.manifest)
            records = read_manifest(manifest_path)
            selected = [record for record in records if wanted is None or record.split in wanted]
            samples = load_samples(selected, streams)
            key_path = manifest_path.parent / KEY_INDEX_FILENAME
            key_instances = read_key_instances(key_path) if key_path.exists() else {}
            return LoadedData(records=records, samples=samples, key_instances=key_instances)
        if config.preset == "synthetic":
            dataset = self._synthesize(config)
            samples = [sample for sample in dataset.samples() if wanted is None or sample.split in wanted]
            return LoadedData(records=dataset.records, samples=samples, key_instances=dataset.key_instances)
        raise ConfigError("no manifest given; pass --manifest or use --preset synthetic", code="missing_manifest")

    def _synthesize(self, config: RunConfig):
        return make_synthetic_dataset(
            n_videos=config.n_videos,
            n_dynamic=config.n_dynamic,
            n_static=config.n_static,
            key_count=config.key_count,
            noise_sigma=config.noise_sigma,
            rng=derive_rng(config.seed, "synth"),
            n_test=config.n_test,
        )

    def _load_checkpoint(self, config: RunConfig):
        if not config.checkpoint:
            raise ConfigError("this command needs --checkpoint", code="missing_checkpoint")
        return load_params(config.checkpoint, expected=layer_shapes(config.model_config()))

    # ---- subcommands ----

    def handle_train(self, config: RunConfig):
        model_config = config.model_config()
        data = self._load(config, model_config.active_streams)
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_snapshot(config, out_dir / CONFIG_SNAPSHOT_FILENAME)

        initial = self._load_checkpoint(config) if config.checkpoint else None
        result = train(
            data.samples,
            model_config,
            config.schedule(),
            config.augment_policy(),
            seed=config.seed,
            optimizer=config.optimizer(),
            checkpoint_path=out_dir / CHECKPOINT_FILENAME,
            workers=config.workers,
            initial_params=initial,
        )
        report_path = result.report.write_csv(out_dir / REPORT_FILENAME)
        logger.info("Report: %s; checkpoint: %s; total %.1fs", report_path, result.report.checkpoint_path, result.report.wall_time)
        self.stdout.write(f"Final test rho: {_format_rho(result.report.final.test_rho)}")

    def handle_eval(self, config: RunConfig):
        model_config = config.model_config()
        params = self._load_checkpoint(config)
        data = self._load(config, model_config.active_streams, splits=[config.split])
        if not data.samples:
            raise DataError(f"the {config.split} split is empty", code="empty_split")

        train_scores = [record.total for record in data.records if record.split == "train"]
        normalizer = ScoreNormalizer.fit(train_scores) if len(set(train_scores)) > 1 else None
        outputs = predict_samples(params, data.samples, model_config, config.augment_policy())
        predicted = [normalizer.inverse(value) if normalizer else value for value in outputs]
        actual = [sample.score for sample in data.samples]

        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        predictions_path = out_dir / PREDICTIONS_FILENAME
        with predictions_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["video_id", "predicted", "actual"])
            for sample, value in zip(data.samples, predicted):
                writer.writerow([sample.video_id, repr(float(value)), repr(float(sample.score))])
        logger.info("Wrote %s predictions to %s", len(predicted), predictions_path)

        rho = spearman(predicted, actual)
        self.stdout.write(f"{config.split} rho: {_format_rho(rho)}")

    def handle_export_attention(self, config: RunConfig):
        model_config = config.model_config()
        params = self._load_checkpoint(config)
        data = self._load(config, model_config.active_streams)
        by_id = {sample.video_id: sample for sample in data.samples}
        if config.video_ids:
            unknown = [video_id for video_id in config.video_ids if video_id not in by_id]
            if unknown:
                raise ConfigError(f"unknown video id(s): {', '.join(unknown)}", code="unknown_video")
            selected = [by_id[video_id] for video_id in config.video_ids]
        else:
            selected = [sample for sample in data.samples if sample.split == config.split]

        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        attention_path = out_dir / ATTENTION_FILENAME
        key_means, other_means = [], []
        with attention_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["video_id", "stream", "instance_index", "weight"])
            for sample in selected:
                # Full instance sets, no windowing.
                result = forward(sample.features.get("dynamic"), sample.features.get("static"), params, model_config)
                for stream in model_config.active_streams:
                    weights = result.attention[stream].weight_values
                    for index, weight in enumerate(weights):
                        writer.writerow([sample.video_id, stream, index, repr(float(weight))])
                    ranked = top_instances(weights)
                    logger.info("%s/%s: highest %s, lowest %s", sample.video_id, stream, ranked["high"], ranked["low"])

                    keys = data.key_instances.get((sample.video_id, stream))
                    if keys and max(keys) >= len(weights):
                        raise DataError(
                            f"key instance {max(keys)} of {sample.video_id}/{stream} is outside its "
                            f"{len(weights)} instances",
                            code="bad_key_index",
                        )
                    if keys and len(keys) < len(weights):
                        mask = np.zeros(len(weights), dtype=bool)
                        mask[keys] = True
                        key_means.append(float(weights[mask].mean()))
                        other_means.append(float(weights[~mask].mean()))
        if key_means:
            logger.info(
                "Key-instance diagnostic: mean weight %.6f on planted instances vs %.6f elsewhere",
                float(np.mean(key_means)),
                float(np.mean(other_means)),
            )
        logger.info("Wrote attention weights for %s videos to %s", len(selected), attention_path)
        self.stdout.write(f"Attention weights: {attention_path}")

    def handle_synth(self, config: RunConfig):
        dataset = self._synthesize(config)
        paths = write_synthetic_dataset(dataset, config.out_dir)
        self.stdout.write(f"Manifest: {paths['manifest']}")

    def handle_inspect(self, config: RunConfig):
        model_config = config.model_config()
        if config.checkpoint:
            params = self._load_checkpoint(config)
        else:
            params = init_params(model_config, derive_rng(config.seed, "init"))
        counts = count_params(params)
        lines = [f"streams={model_config.streams} attention={model_config.attention}"]
        width = max(len(name) for name in counts.per_layer)
        for name, size in counts.per_layer.items():
            lines.append(f"  {name:<{width}}  {str(params[name].shape):>14}  {size:>10,}")
        for branch, size in counts.per_branch.items():
            lines.append(f"branch {branch}: {size:,}")
        for group, size in counts.per_group.items():
            lines.append(f"group {group}: {size:,}")
        lines.append(
            f"total: {counts.total:,} (claimed {CLAIMED_PARAMETER_COUNT:,}; gap {counts.relative_gap:+.2%})"
        )
        logger.info("Parameter count %s for streams=%s attention=%s", counts.total, model_config.streams, model_config.attention)
        self.stdout.write("\n".join(lines))

    def handle_ablate(self, config: RunConfig):
        data = self._load(config, ("dynamic", "static"))
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_snapshot(config, out_dir / CONFIG_SNAPSHOT_FILENAME)

        rows = []
        rhos: Dict[str, List[float]] = {label: [] for label, _streams, _attention in ABLATION_VARIANTS}
        for seed in config.seeds:
            splits = {record.video_id: record.split for record in make_random_split(data.records, config.n_test, derive_rng(seed, "split"))}
            samples = [replace(sample, split=splits[sample.video_id]) for sample in data.samples]
            for label, streams, attention in ABLATION_VARIANTS:
                model_config = replace(config.model_config(), streams=streams, attention=attention, seed=seed)
                result = train(
                    samples,
                    model_config,
                    config.schedule(),
                    config.augment_policy(),
                    seed=seed,
                    optimizer=config.optimizer(),
                    workers=config.workers,
                )
                test_rho = result.report.final.test_rho
                rhos[label].append(test_rho)
                rows.append([label, streams, attention, seed, "" if math.isnan(test_rho) else repr(test_rho)])
                logger.info("Ablation %s seed %s: test rho %s", label, seed, _format_rho(test_rho))

        with (out_dir / ABLATION_FILENAME).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["variant", "streams", "attention", "seed", "test_rho"])
            writer.writerows(rows)

        means = {label: mean_rho(values) for label, values in rhos.items()}
        with (out_dir / ABLATION_SUMMARY_FILENAME).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["variant", "mean_test_rho"])
            for label, mean in means.items():
                writer.writerow([label, "" if math.isnan(mean) else repr(mean)])
                self.stdout.write(f"{label}: {_format_rho(mean)}")

        for violation in ablation_warnings(means):
            logger.warning(violation)


def ablation_warnings(means: Dict[str, float], margin: float = SOFT_MARGIN) -> List[str]:
    """Soft ordering checks: two streams beat either one, context attention beats averaging."""
    warnings = []
    best_single = max(means["DS+CAA"], means["SS+CAA"])
    if not means["TS+CAA"] >= best_single - margin:
        warnings.append(
            f"TS+CAA mean test rho {_format_rho(means['TS+CAA'])} is below the best single stream "
            f"{_format_rho(best_single)} by more than {margin}"
        )
    if not means["TS+CAA"] >= means["TS+AVG"] - margin:
        warnings.append(
            f"CAA mean test rho {_format_rho(means['TS+CAA'])} is below AVG "
            f"{_format_rho(means['TS+AVG'])} by more than {margin}"
        )
    return warnings
