"""Full model: frozen backbones, context mining, and the interaction head.

The frozen encoders run under no_grad; everything downstream of them is
trainable. One encoded scene can be decoded under several feature modes
without re-running the backbones or the context mining.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
from torch import nn

from .aggregation import ContextAggregator, mine_contexts
from .backbones import BackboneConfig, Detections, QueryStack, SpatialMap, TokenStack, ToyBackbones
from .contexts import ContextRefiner, TensorMasks
from .data import SceneSample
from .evaluation import HoiPrediction
from .geometry import MaskSet, build_mask_set
from .pairs import FeatureMode, InteractionHead, PairIndex, generate_pairs, score_interactions


class ConfigError(ValueError):
    """A config dict contained unknown or inconsistent fields."""


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d_model: int = 32
    d_pair: int = 32
    num_heads: int = 2
    num_decoder_layers: int = 2
    num_verbs: int = 5
    mask_threshold: float = 0.5
    contexts: str = "grc"
    share_refiner_layers: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_decoder_layers < 1:
            raise ConfigError("num_decoder_layers must be >= 1")
        if not 0.0 < self.mask_threshold <= 1.0:
            raise ConfigError("mask_threshold must be in (0, 1]")

    @property
    def num_layers(self) -> int:
        return self.backbone.num_layers

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "backbone"}
        out["backbone"] = {f.name: getattr(self.backbone, f.name) for f in fields(BackboneConfig)}
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        backbone_obj = dict(obj.pop("backbone", {}))
        known_bb = {f.name for f in fields(BackboneConfig)}
        for key in backbone_obj:
            if key not in known_bb:
                raise ConfigError(f"unknown model.backbone config key: {key!r}")
        known = {f.name for f in fields(cls)} - {"backbone"}
        for key in obj:
            if key not in known:
                raise ConfigError(f"unknown model config key: {key!r}")
        return cls(backbone=BackboneConfig(**backbone_obj), **obj)


@dataclass
class SceneFeatures:
    """Everything the frozen stage produces for one scene."""

    scene_id: int
    detections: Detections
    masks: MaskSet
    tensor_masks: TensorMasks
    tokens: TokenStack
    queries: QueryStack
    cnn: SpatialMap
    pairs: list[PairIndex]


class HoiModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        bb = config.backbone
        self.backbones = ToyBackbones(bb)
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.refiner = ContextRefiner(
                d_vlm=bb.d_vlm,
                num_heads=config.num_heads,
                num_layers=bb.num_layers,
                contexts=config.contexts,
                share_layers=config.share_refiner_layers,
            )
            self.aggregator = ContextAggregator(
                d_model=config.d_model,
                d_query=bb.d_query,
                d_vlm=bb.d_vlm,
                num_heads=config.num_heads,
                num_layers=bb.num_layers,
                contexts=config.contexts,
            )
            self.head = InteractionHead(
                d_query=bb.d_query,
                d_model=config.d_model,
                d_pair=config.d_pair,
                d_cnn=bb.d_cnn,
                d_vlm=bb.d_vlm,
                num_heads=config.num_heads,
                num_decoder_layers=config.num_decoder_layers,
                num_verbs=config.num_verbs,
            )

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def encode(self, scene: SceneSample) -> SceneFeatures:
        """Frozen stage: backbones, detections, masks, candidate pairs."""
        detections = self.backbones.detect(scene)
        masks = build_mask_set(detections.boxes, self.config.backbone.grid, self.config.mask_threshold)
        return SceneFeatures(
            scene_id=scene.scene_id,
            detections=detections,
            masks=masks,
            tensor_masks=TensorMasks.from_mask_set(masks),
            tokens=self.backbones.encode_vlm(scene),
            queries=self.backbones.encode_queries(scene, detections),
            cnn=self.backbones.encode_cnn(scene),
            pairs=generate_pairs(detections.is_human),
        )

    def mine(self, features: SceneFeatures) -> torch.Tensor:
        """Trainable context mining; returns the final (K, d_model) aggregate."""
        return mine_contexts(
            self.refiner, self.aggregator, features.tokens, features.queries, features.tensor_masks
        )

    def head_logits(
        self,
        features: SceneFeatures,
        agg_final: torch.Tensor,
        mode: FeatureMode,
        details: dict | None = None,
    ) -> torch.Tensor:
        return self.head(
            features.queries.layers[-1],
            agg_final,
            features.pairs,
            features.cnn.tokens,
            features.tokens.layers[-1],
            mode,
            details=details,
        )

    def forward(self, scene: SceneSample, mode: FeatureMode = FeatureMode.FULL) -> torch.Tensor:
        features = self.encode(scene)
        return self.head_logits(features, self.mine(features), mode)

    @torch.no_grad()
    def predict(self, scene: SceneSample, mode: FeatureMode = FeatureMode.FULL) -> list[HoiPrediction]:
        features = self.encode(scene)
        logits = self.head_logits(features, self.mine(features), mode)
        return score_interactions(logits, features.pairs, features.detections, scene.scene_id)

    @torch.no_grad()
    def predict_dataset(
        self, scenes: list[SceneSample], mode: FeatureMode = FeatureMode.FULL
    ) -> list[HoiPrediction]:
        preds: list[HoiPrediction] = []
        for scene in scenes:
            preds.extend(self.predict(scene, mode))
        return preds
