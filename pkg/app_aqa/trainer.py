"""
Training loop: MSE on normalized scores, minibatch SGD with momentum and
weight decay, per-group learning rates and step decay.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from . import autodiff as ad
from .action_net import (
    ATTENTION_GROUP,
    PREDICTION_GROUP,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
)
from .autodiff import Node
from .checkpoints import save_params
from .errors import ConfigError, DataError, NumericError, ShapeError, UndefinedCorrelationError
from .feature_io import AugmentPolicy, ScoreNormalizer, VideoSample, augment_window
from .rank_metrics import spearman
from .seeding import derive_rng, sample_rngs

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "loss", "train_rho", "test_rho", "lr_attention", "lr_prediction")


def _default(key: str, fallback):
    return getattr(settings, "ACTIONNET_DEFAULTS", {}).get(key, fallback)


# ---- loss ----

def mse_loss(prediction: Node, target: float) -> Node:
    """(prediction - target)^2 for a 1x1 prediction."""
    if prediction.shape != (1, 1):
        raise ShapeError(f"loss expects a 1x1 prediction, got {prediction.shape}")
    residual = ad.sub(prediction, prediction.tape.constant(float(target)))
    return ad.mul(residual, residual)


def batch_loss(predictions: Sequence[float], targets: Sequence[float]) -> float:
    if len(predictions) != len(targets) or not predictions:
        raise NumericError("batch loss needs equally long, non-empty predictions and targets")
    return math.fsum((p - t) ** 2 for p, t in zip(predictions, targets)) / len(predictions)


# ---- optimizer ----

@dataclass
class OptimizerState:
    learning_rates: Dict[str, float]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        params: ModelParams,
        lr_attention: Optional[float] = None,
        lr_prediction: Optional[float] = None,
        momentum: Optional[float] = None,
        weight_decay: Optional[float] = None,
    ) -> "OptimizerState":
        state = cls(
            learning_rates={
                ATTENTION_GROUP: float(_default("lr_attention", 0.01) if lr_attention is None else lr_attention),
                PREDICTION_GROUP: float(_default("lr_prediction", 0.05) if lr_prediction is None else lr_prediction),
            },
            momentum=float(_default("momentum", 0.9) if momentum is None else momentum),
            weight_decay=float(_default("weight_decay", 1e-4) if weight_decay is None else weight_decay),
        )
        state.velocity = {name: np.zeros_like(value) for name, value in params.items()}
        return state


def sgd_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr_scale: float = 1.0,
) -> ModelParams:
    """
    g' = g + wd * theta; v <- mu * v + g'; theta <- theta - lr_group * lr_scale * v.

    Tensors are replaced, never mutated, so snapshots taken before the step
    stay valid.
    """
    for name, value in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for '{name}'")
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"gradient for '{name}' is {grad.shape}, parameter is {value.shape}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(value)
        if velocity.shape != value.shape:
            raise ShapeError(f"velocity for '{name}' is {velocity.shape}, parameter is {value.shape}")

        decayed = grad + state.weight_decay * value
        velocity = state.momentum * velocity + decayed
        state.velocity[name] = velocity
        step = state.learning_rates[params.group(name)] * lr_scale
        params[name] = value - step * velocity
    return params


# ---- schedule ----

@dataclass(frozen=True)
class Schedule:
    total_epochs: int
    decay_epochs: Tuple[int, ...] = ()
    decay_rate: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError(f"total epochs must be positive, got {self.total_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        decay = tuple(int(epoch) for epoch in self.decay_epochs)
        if any(later <= earlier for earlier, later in zip(decay, decay[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing, got {list(decay)}")
        if any(epoch < 0 or epoch >= self.total_epochs for epoch in decay):
            raise ConfigError(f"decay epochs must lie in [0, {self.total_epochs}), got {list(decay)}")
        object.__setattr__(self, "decay_epochs", decay)


def lr_at(schedule: Schedule, epoch: int) -> float:
    """decay_rate ** (number of decay epochs <= epoch)."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ConfigError(f"epoch {epoch} is outside [0, {schedule.total_epochs})")
    passed = sum(1 for decay_epoch in schedule.decay_epochs if decay_epoch <= epoch)
    return schedule.decay_rate ** passed


# ---- report ----

@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_rho: float
    test_rho: float
    lr_attention: float
    lr_prediction: float
    wall_time: float = 0.0


def _format_real(value: float) -> str:
    return "" if value is None or math.isnan(value) else repr(float(value))


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: Optional[Path] = None

    @property
    def final(self) -> Optional[EpochStats]:
        return self.epochs[-1] if self.epochs else None

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for stats in self.epochs:
            writer.writerow(
                [
                    stats.epoch,
                    _format_real(stats.loss),
                    _format_real(stats.train_rho),
                    _format_real(stats.test_rho),
                    _format_real(stats.lr_attention),
                    _format_real(stats.lr_prediction),
                ]
            )
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


@dataclass
class TrainResult:
    report: TrainReport
    params: ModelParams
    normalizer: ScoreNormalizer


# ---- per-sample work ----

def _sample_inputs(
    sample: VideoSample,
    config: ModelConfig,
    policy: AugmentPolicy,
    rng: Optional[np.random.Generator],
) -> Dict[str, np.ndarray]:
    return {
        stream: augment_window(sample.features[stream], policy, rng, stream=stream)
        for stream in config.active_streams
    }


def sample_gradients(
    params: ModelParams,
    sample: VideoSample,
    target: float,
    config: ModelConfig,
    policy: AugmentPolicy,
    seed: int,
    epoch: int,
    index: int,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and parameter gradients of one video, in train mode."""
    window_rng, dropout_rng = sample_rngs(seed, epoch, index)
    inputs = _sample_inputs(sample, config, policy, window_rng)
    result = forward(
        inputs.get("dynamic"),
        inputs.get("static"),
        params,
        config,
        mode="train",
        rng=dropout_rng,
    )
    loss = mse_loss(result.score, target)
    grads = ad.backward(result.tape, loss)
    value = float(loss.value[0, 0])
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss on video '{sample.video_id}'", code="non_finite_loss")
    return value, grads


def predict_samples(
    params: ModelParams,
    samples: Sequence[VideoSample],
    config: ModelConfig,
    policy: AugmentPolicy,
) -> List[float]:
    """Eval-mode scores using start-of-video windows."""
    start_policy = policy.with_mode("start")
    predictions = []
    for sample in samples:
        inputs = _sample_inputs(sample, config, start_policy, None)
        result = forward(inputs.get("dynamic"), inputs.get("static"), params, config, mode="eval")
        predictions.append(result.value)
    return predictions


def _rho_or_nan(predictions: Sequence[float], targets: Sequence[float], label: str, epoch: int) -> float:
    if len(predictions) < 2:
        return float("nan")
    try:
        return spearman(predictions, targets)
    except UndefinedCorrelationError:
        logger.warning("Epoch %s: %s correlation undefined (constant series)", epoch, label)
        return float("nan")


def _merge_gradients(grad_maps: Sequence[Dict[str, np.ndarray]], batch_size: int) -> Dict[str, np.ndarray]:
    merged: Dict[str, np.ndarray] = {}
    for grads in grad_maps:
        for name, grad in grads.items():
            merged[name] = grad.copy() if name not in merged else merged[name] + grad
    return {name: total / batch_size for name, total in merged.items()}


# ---- loop ----

def train(
    samples: Sequence[VideoSample],
    config: ModelConfig,
    schedule: Schedule,
    policy: AugmentPolicy,
    seed: int,
    optimizer: Optional[Dict[str, float]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    workers: Optional[int] = None,
    initial_params: Optional[ModelParams] = None,
) -> TrainResult:
    """
    Train on the samples marked 'train' and track rank correlation on both splits.

    Every random draw derives from `seed`: parameter init, per-epoch shuffles,
    and per-sample window offsets and dropout masks keyed by
    (epoch, sample index), so worker count never changes results.
    """
    train_samples = [sample for sample in samples if sample.split == "train"]
    test_samples = [sample for sample in samples if sample.split == "test"]
    if not train_samples:
        raise DataError("training split is empty", code="empty_split")

    normalizer = ScoreNormalizer.fit(sample.score for sample in train_samples)
    train_targets = [normalizer.normalize(sample.score) for sample in train_samples]
    test_targets = [normalizer.normalize(sample.score) for sample in test_samples]

    params = initial_params.copy() if initial_params is not None else init_params(config, derive_rng(seed, "init"))
    state = OptimizerState.create(params, **(optimizer or {}))
    workers = max(1, int(workers if workers is not None else getattr(settings, "ACTIONNET_WORKERS", 1)))

    report = TrainReport()
    started = time.perf_counter()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(schedule.total_epochs):
            epoch_started = time.perf_counter()
            scale = lr_at(schedule, epoch)
            order = derive_rng(seed, "shuffle", epoch).permutation(len(train_samples))
            losses: List[float] = []

            for batch_start in range(0, len(order), schedule.batch_size):
                # The last batch is kept even when incomplete.
                batch = [int(i) for i in order[batch_start:batch_start + schedule.batch_size]]

                def work(index: int):
                    return sample_gradients(
                        params, train_samples[index], train_targets[index], config, policy, seed, epoch, index
                    )

                results = list(executor.map(work, batch)) if executor else [work(index) for index in batch]
                batch_losses = [loss for loss, _grads in results]
                losses.extend(batch_losses)
                grads = _merge_gradients([grads for _loss, grads in results], len(batch))
                sgd_step(params, grads, state, lr_scale=scale)
                logger.debug("Epoch %s batch %s: loss %.6f", epoch, batch_start // schedule.batch_size, np.mean(batch_losses))

            train_rho = _rho_or_nan(predict_samples(params, train_samples, config, policy), train_targets, "train", epoch)
            test_rho = _rho_or_nan(predict_samples(params, test_samples, config, policy), test_targets, "test", epoch)
            stats = EpochStats(
                epoch=epoch,
                loss=math.fsum(losses) / len(losses),
                train_rho=train_rho,
                test_rho=test_rho,
                lr_attention=state.learning_rates[ATTENTION_GROUP] * scale,
                lr_prediction=state.learning_rates[PREDICTION_GROUP] * scale,
                wall_time=time.perf_counter() - epoch_started,
            )
            report.epochs.append(stats)
            logger.info(
                "Epoch %s/%s: loss=%.6f train_rho=%s test_rho=%s lr=(%g, %g) %.1fs",
                epoch + 1,
                schedule.total_epochs,
                stats.loss,
                _format_real(train_rho) or "n/a",
                _format_real(test_rho) or "n/a",
                stats.lr_attention,
                stats.lr_prediction,
                stats.wall_time,
            )
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    report.wall_time = time.perf_counter() - started
    if checkpoint_path is not None:
        report.checkpoint_path = save_params(params, checkpoint_path)
    return TrainResult(report=report, params=params, normalizer=normalizer)
