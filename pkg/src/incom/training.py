"""Focal loss, the masked-feature training objective, and the train loop.

With masked feature training enabled, every scene's loss sums the focal loss
of the interaction head's output under all three feature modes (full,
detector-only, VLM-only), sharing a single backbone + context-mining forward.
The optimizer is AdamW with a step-decayed learning rate; backbones never
receive gradients. Runs are bit-deterministic given the seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneSample, category_counts
from .evaluation import EvalReport, evaluate_predictions
from .model import ConfigError, HoiModel, SceneFeatures
from .pairs import ALL_MODES, FeatureMode, PairIndex, score_interactions


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 5.0
    lr_decay_every: int = 10
    batch_size: int = 8
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mft: bool = True
    eval_every: int = 0
    target_map: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive, weight_decay non-negative")
        if self.lr_decay_factor < 1.0 or self.lr_decay_every < 1:
            raise ConfigError("lr decay factor must be >= 1 and interval >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in obj:
            if key not in known:
                raise ConfigError(f"unknown train config key: {key!r}")
        return cls(**obj)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> torch.Tensor:
    """Mean focal loss over all (pair, class) cells of a multi-label logit matrix."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != targets {tuple(targets.shape)}")
    if logits.numel() == 0:
        return logits.sum() * 0.0
    if not bool(((targets == 0) | (targets == 1)).all()):
        raise ValueError("targets must be binary")
    p = torch.sigmoid(logits)
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_not_p
    return (targets * pos + (1.0 - targets) * neg).mean()


def build_targets(
    scene: SceneSample, pairs: list[PairIndex], num_verbs: int, ref: torch.Tensor
) -> torch.Tensor:
    """Multi-label (P, num_verbs) target matrix from the scene's triplets."""
    y = ref.new_zeros((len(pairs), num_verbs))
    row = {pair: i for i, pair in enumerate(pairs)}
    for t in scene.triplets:
        key = PairIndex(t.h, t.o)
        if key in row and t.verb < num_verbs:
            y[row[key], t.verb] = 1.0
    return y


def scene_modes(config: TrainConfig) -> tuple[FeatureMode, ...]:
    return ALL_MODES if config.mft else (FeatureMode.FULL,)


def _encoded_scene_loss(
    model: HoiModel,
    features: SceneFeatures,
    targets: torch.Tensor,
    config: TrainConfig,
) -> torch.Tensor:
    """Sum of per-mode focal losses for one already-encoded scene."""
    if len(features.pairs) == 0:
        return torch.zeros((), dtype=targets.dtype)
    agg = model.mine(features)
    total = None
    for mode in scene_modes(config):
        logits = model.head_logits(features, agg, mode)
        loss = focal_loss(logits, targets, config.focal_gamma, config.focal_alpha)
        total = loss if total is None else total + loss
    return total


def mft_step(model: HoiModel, scenes: list[SceneSample], config: TrainConfig) -> torch.Tensor:
    """Mean over the batch of per-scene mode-summed focal losses (backbones stay frozen)."""
    if not scenes:
        raise ValueError("empty batch")
    ref = next(iter(model.trainable_parameters()))
    losses = []
    for scene in scenes:
        features = model.encode(scene)
        targets = build_targets(scene, features.pairs, model.config.num_verbs, ref)
        losses.append(_encoded_scene_loss(model, features, targets, config))
    return torch.stack(losses).mean()


@dataclass
class TrainResult:
    final_loss: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def _evaluate_encoded(
    model: HoiModel,
    encoded: list[SceneFeatures],
    scenes: list[SceneSample],
    train_counts: dict,
    mode: FeatureMode,
) -> EvalReport:
    preds = []
    with torch.no_grad():
        for features, scene in zip(encoded, scenes):
            logits = model.head_logits(features, model.mine(features), mode)
            preds.extend(score_interactions(logits, features.pairs, features.detections, scene.scene_id))
    return evaluate_predictions(preds, scenes, train_counts, mode=mode.value)


def train(
    model: HoiModel,
    scenes: list[SceneSample],
    config: TrainConfig,
    ckpt_path=None,
    log_path=None,
    resume: bool = False,
    eval_scenes: list[SceneSample] | None = None,
) -> TrainResult:
    """Run the AdamW loop with step-decayed learning rate.

    Backbone features are encoded once and cached; they are frozen, so the
    cache is exact. When `eval_every` is set, the full-mode mAP on
    `eval_scenes` is logged, and training stops early once `target_map` is
    reached. Checkpoints are rewritten every epoch so interrupted runs can
    `resume`.
    """
    if not scenes:
        raise ValueError("training dataset is empty")
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    train_counts = category_counts(scenes)
    extra = {
        "train_config": config.to_dict(),
        "train_counts": {f"{v}:{c}": n for (v, c), n in sorted(train_counts.items())},
    }
    start_epoch = 0
    if resume:
        if ckpt_path is None:
            raise ConfigError("resume requires a checkpoint path")
        manifest = load_checkpoint(ckpt_path, model, optimizer)
        start_epoch = int(manifest["epoch"])
    ref = next(iter(model.trainable_parameters()))
    encoded = [model.encode(scene) for scene in scenes]
    targets = [
        build_targets(scene, feats.pairs, model.config.num_verbs, ref)
        for scene, feats in zip(scenes, encoded)
    ]
    eval_encoded = None
    if eval_scenes is not None and config.eval_every > 0:
        eval_encoded = [model.encode(scene) for scene in eval_scenes]

    history: list[dict] = []
    final_loss = float("nan")
    epochs_run = start_epoch
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.monotonic()
            lr = learning_rate_at(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch, 11])
            ).permutation(len(scenes))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                losses = [
                    _encoded_scene_loss(model, encoded[i], targets[i], config) for i in idx
                ]
                loss = torch.stack(losses).mean()
                if loss.requires_grad:
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                total += float(loss.detach()) * len(idx)
            final_loss = total / len(scenes)
            epochs_run = epoch + 1
            record = {"epoch": epoch, "lr": lr, "loss": final_loss, "mft": config.mft}
            reached_target = False
            if eval_encoded is not None and (epoch + 1) % config.eval_every == 0:
                report = _evaluate_encoded(
                    model, eval_encoded, eval_scenes, train_counts, FeatureMode.FULL
                )
                record["map_full"] = report.map_full
                reached_target = (
                    config.target_map is not None and report.map_full >= config.target_map
                )
            record["wall_time"] = time.monotonic() - t0
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if ckpt_path:
                save_checkpoint(ckpt_path, model, optimizer, epoch=epoch + 1, extra=extra)
            if reached_target:
                break
    finally:
        if log_file:
            log_file.close()
    if ckpt_path and epochs_run == 0:
        save_checkpoint(ckpt_path, model, optimizer, epoch=0, extra=extra)
    return TrainResult(final_loss=final_loss, epochs_run=epochs_run, history=history)
