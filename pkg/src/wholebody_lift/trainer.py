"""Training loop, cosine schedule, checkpoints and flip test-time augmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import yaml

from wholebody_lift.data import Dataset, batches
from wholebody_lift.features import features_from_normalized, flip_2d, flip_3d
from wholebody_lift.losses import LossWeights, total_loss
from wholebody_lift.metrics import MetricReport, evaluate
from wholebody_lift.model import ModelConfig, PoseLifter, build_model
from wholebody_lift.skeleton import SkeletonTopology

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wholebody-lift-checkpoint/v1"
LOG_FILE = "train_log.jsonl"


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, report: dict, last_good: Path):
        super().__init__(f"non-finite loss at step {step}: {report}; last good checkpoint at {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 200
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_interval: int = 0          # epochs between evaluations; 0 disables
    checkpoint_interval: int = 0    # epochs between periodic checkpoints; 0 = final only
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError(f"min_lr must lie in [0, base_lr], got {self.min_lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def schedule_lr(step: int, num_updates: int, base_lr: float, min_lr: float) -> float:
    """Learning rate for update ``step`` of ``num_updates``.

    The horizon is the index of the last update, so the first update uses
    ``base_lr`` and the last uses ``min_lr``.
    """
    if num_updates == 1:
        return base_lr
    return cosine_lr(step, num_updates - 1, base_lr, min_lr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: PoseLifter, step: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.to_dict(),
        "topology_version": model.topology_version,
        "step": step,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str | Path,
    topo: SkeletonTopology,
    expected_config: Optional[ModelConfig] = None,
) -> PoseLifter:
    """Rebuild a model from ``path``; refuses on format, topology or config mismatch."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    if payload["topology_version"] != topo.version:
        raise CheckpointMismatch(
            f"{path}: trained with topology {payload['topology_version']!r}, current is {topo.version!r}"
        )
    cfg = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointMismatch(f"{path}: model config {cfg} differs from expected {expected_config}")
    model = PoseLifter(cfg, topo)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    log: list[dict]
    model: PoseLifter


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW: weight decay is applied to the parameters directly, outside the moment estimates."""
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.base_lr,
        betas=config.betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def train(
    config: TrainConfig,
    dataset: Dataset,
    topo: SkeletonTopology,
    eval_dataset: Optional[Dataset] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """AdamW training with a per-step cosine schedule.

    Writes ``train_log.jsonl`` (one line per update) and checkpoints into
    ``config.checkpoint_dir``. Deterministic for a given config and seed.
    """
    if not dataset.has_3d:
        raise ConfigError("training requires 3D targets for every sample")
    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_FILE
    log_path.write_text("")

    inputs = dataset.inputs(topo)
    targets = dataset.targets(topo)
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    num_updates = config.epochs * per_epoch
    if max_steps is not None:
        num_updates = min(num_updates, max_steps)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = build_model(config.model, topo)
        optimizer = make_optimizer(model, config)
        records: list[dict] = []
        step = 0
        with log_path.open("a") as log_file:
            for epoch in range(config.epochs):
                if step >= num_updates:
                    break
                model.train()
                for batch in batches(dataset, config.batch_size, config.seed * 100003 + epoch, topo, inputs, targets):
                    if step >= num_updates:
                        break
                    lr = schedule_lr(step, num_updates, config.base_lr, config.min_lr)
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    x = torch.as_tensor(batch.inputs, dtype=torch.float32)
                    y = torch.as_tensor(batch.targets, dtype=torch.float32)
                    out = model(x)
                    report = total_loss(out.joints_3d, out.error, y, topo, config.loss_weights)
                    values = report.as_floats()
                    if not all(math.isfinite(v) for v in values.values()):
                        # parameters still hold the last successful update
                        last_good = save_checkpoint(out_dir / "last_good.pt", model, step)
                        raise NonFiniteLoss(step, values, last_good)
                    optimizer.zero_grad(set_to_none=True)
                    report.total.backward()
                    if config.grad_clip is not None:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                    optimizer.step()
                    rec = {"step": step, "epoch": epoch, "lr": lr, **values}
                    records.append(rec)
                    log_file.write(json.dumps(rec) + "\n")
                    step += 1
                log.info("epoch %d done, step %d, last total %.4f", epoch, step, records[-1]["total"])
                if config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
                    save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.pt", model, step)
                if eval_dataset is not None and config.eval_interval and (epoch + 1) % config.eval_interval == 0:
                    metrics, _ = evaluate_model(model, eval_dataset, topo, tta=True)
                    model.train()
                    log_file.write(json.dumps({"epoch": epoch, "step": step, "eval": metrics.to_dict()}) + "\n")
        final = save_checkpoint(out_dir / "final.pt", model, step)
    model.eval()
    return TrainResult(final, records, model)


# ---------------------------------------------------------------------------
# inference and flip TTA
# ---------------------------------------------------------------------------


PredictFn = Callable[[np.ndarray], np.ndarray]


def flip_inputs(inputs: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Mirror (B, J, 3) model inputs; the distance channel is recomputed."""
    return features_from_normalized(flip_2d(inputs[..., :2], topo), topo)


def predict_with_tta(predict: PredictFn, inputs: np.ndarray, topo: SkeletonTopology, tta: bool) -> np.ndarray:
    """``predict(x)``, or with ``tta`` the mean of it and the un-mirrored prediction of the mirrored input."""
    a = predict(inputs)
    if not tta:
        return a
    b = predict(flip_inputs(inputs, topo))
    return 0.5 * (a + flip_3d(b, topo))


def model_predictor(model: PoseLifter, batch_size: int = 200) -> PredictFn:
    dtype = next(model.parameters()).dtype

    def predict(inputs: np.ndarray) -> np.ndarray:
        model.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(inputs), batch_size):
                x = torch.as_tensor(inputs[start:start + batch_size], dtype=dtype)
                outs.append(model(x).joints_3d.double().numpy())
        return np.concatenate(outs)

    return predict


def evaluate_model(
    model: PoseLifter, dataset: Dataset, topo: SkeletonTopology, tta: bool, batch_size: int = 200
) -> tuple[MetricReport, np.ndarray]:
    preds = predict_with_tta(model_predictor(model, batch_size), dataset.inputs(topo), topo, tta)
    return evaluate(preds, dataset.targets(topo), topo), preds


def evaluate_with_tta(
    checkpoint: str | Path, dataset: Dataset, topo: SkeletonTopology, tta: bool = True, batch_size: int = 200
) -> tuple[MetricReport, np.ndarray]:
    model = load_checkpoint(checkpoint, topo)
    return evaluate_model(model, dataset, topo, tta, batch_size)
