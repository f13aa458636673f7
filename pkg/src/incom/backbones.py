"""Frozen, seedable stand-ins for the three backbone feature sources.

The scene "image" never exists as pixels. Patch tokens are painted directly:
each token starts from a positional embedding, accumulates the class
embeddings of instances whose boxes cover its patch center, and picks up
Gaussian noise, then passes through frozen random mixing layers. Detector
queries are a frozen affine function of (box, class one-hot, layer one-hot)
plus noise. None of these parameters ever receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Instance, SceneSample
from .geometry import Box, PatchGrid
from .layers import FeedForward, MultiHeadAttention

_VLM_STREAM = 0
_CNN_STREAM = 1
_QUERY_STREAM = 2
_JITTER_STREAM = 3


@dataclass(frozen=True)
class BackboneConfig:
    grid_rows: int = 8
    grid_cols: int = 8
    cnn_rows: int = 8
    cnn_cols: int = 8
    d_vlm: int = 32
    d_query: int = 32
    d_cnn: int = 32
    num_layers: int = 3
    mixing_depth: int | None = None
    num_heads: int = 2
    noise_scale: float = 0.05
    box_jitter: float = 0.0
    num_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("need at least one backbone layer")
        if self.mixing_depth is not None and not 0 <= self.mixing_depth <= self.num_layers:
            raise ValueError("mixing_depth must be in [0, num_layers]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.grid_rows, self.grid_cols)

    @property
    def cnn_grid(self) -> PatchGrid:
        return PatchGrid(self.cnn_rows, self.cnn_cols)

    @property
    def effective_mixing_depth(self) -> int:
        return self.num_layers if self.mixing_depth is None else self.mixing_depth


@dataclass
class TokenStack:
    """Per-layer patch token features over the VLM grid; layers[l] is (N, d_vlm)."""

    grid: PatchGrid
    layers: list[torch.Tensor]


@dataclass
class QueryStack:
    """Per-layer detector query features; layers[l] is (K, d_query), instance order fixed."""

    layers: list[torch.Tensor]


@dataclass
class SpatialMap:
    """Flattened CNN feature map; tokens is (rows * cols, d_cnn)."""

    grid: PatchGrid
    tokens: torch.Tensor


@dataclass
class Detections:
    """Detector output in scene-instance order (perfect-detector regime)."""

    boxes: list[Box]
    class_ids: np.ndarray
    is_human: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)


def _init_linear(linear: nn.Linear, rng: np.random.Generator) -> None:
    fan_in = linear.in_features
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(linear.out_features, fan_in))
    b = rng.normal(0.0, 0.02, size=(linear.out_features,))
    with torch.no_grad():
        linear.weight.copy_(torch.from_numpy(w))
        linear.bias.copy_(torch.from_numpy(b))


class _MixBlock(nn.Module):
    """Frozen random residual attention + FFN used to entangle painted tokens."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.ffn = FeedForward(dim)
        for lin in (self.attn.q_proj, self.attn.k_proj, self.attn.v_proj, self.attn.out_proj,
                    self.ffn.fc1, self.ffn.fc2):
            _init_linear(lin, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(x, x, x)
        return x + self.ffn(x)


class ToyBackbones(nn.Module):
    """The three frozen encoders, fully determined by (seed, config)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        n = config.grid.num_tokens
        n_cnn = config.cnn_grid.num_tokens
        c = config.num_classes
        self.register_buffer(
            "vlm_class_embed", torch.from_numpy(rng.normal(0, 1, (c, config.d_vlm))).float()
        )
        self.register_buffer(
            "vlm_pos_embed", torch.from_numpy(rng.normal(0, 0.3, (n, config.d_vlm))).float()
        )
        self.vlm_mixers = nn.ModuleList(
            _MixBlock(config.d_vlm, config.num_heads, rng)
            for _ in range(config.effective_mixing_depth)
        )
        self.register_buffer(
            "cnn_class_embed", torch.from_numpy(rng.normal(0, 1, (c, config.d_cnn))).float()
        )
        self.register_buffer(
            "cnn_pos_embed", torch.from_numpy(rng.normal(0, 0.3, (n_cnn, config.d_cnn))).float()
        )
        self.cnn_mixer = _MixBlock(config.d_cnn, config.num_heads, rng)
        self.det_proj = nn.Linear(4 + c + config.num_layers, config.d_query)
        _init_linear(self.det_proj, rng)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return self.det_proj.weight.dtype

    def _scene_rng(self, scene_seed: int, stream: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.config.seed, int(scene_seed), stream])
        )

    def _paint(
        self,
        instances: list[Instance],
        grid: PatchGrid,
        class_embed: torch.Tensor,
        pos_embed: torch.Tensor,
        rng: np.random.Generator,
    ) -> torch.Tensor:
        tokens = pos_embed.detach().clone()
        for n_idx in range(grid.num_tokens):
            x0, y0, x1, y1 = grid.patch_bounds(n_idx)
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            # Accumulate in sorted class order so the paint is a function of
            # the instance set, not of the instance list order.
            for cid in sorted(
                inst.class_id for inst in instances if inst.box.contains_point(cx, cy)
            ):
                tokens[n_idx] += class_embed[cid]
        if self.config.noise_scale > 0.0:
            noise = rng.normal(0.0, self.config.noise_scale, size=tuple(tokens.shape))
            tokens = tokens + torch.from_numpy(noise).to(tokens.dtype)
        return tokens

    @torch.no_grad()
    def encode_vlm(self, scene: SceneSample) -> TokenStack:
        """Paint patch tokens from the scene's true instances, then mix for L layers."""
        rng = self._scene_rng(scene.seed, _VLM_STREAM)
        x = self._paint(
            scene.instances, self.config.grid, self.vlm_class_embed, self.vlm_pos_embed, rng
        )
        layers = []
        for l in range(self.config.num_layers):
            if l < len(self.vlm_mixers):
                x = self.vlm_mixers[l](x)
            layers.append(x)
        return TokenStack(grid=self.config.grid, layers=layers)

    @torch.no_grad()
    def encode_cnn(self, scene: SceneSample) -> SpatialMap:
        rng = self._scene_rng(scene.seed, _CNN_STREAM)
        x = self._paint(
            scene.instances, self.config.cnn_grid, self.cnn_class_embed, self.cnn_pos_embed, rng
        )
        return SpatialMap(grid=self.config.cnn_grid, tokens=self.cnn_mixer(x))

    @torch.no_grad()
    def detect(self, scene: SceneSample) -> Detections:
        """Ground-truth instances, optionally box-jittered, as detector output."""
        boxes = [inst.box for inst in scene.instances]
        if self.config.box_jitter > 0.0:
            rng = self._scene_rng(scene.seed, _JITTER_STREAM)
            jittered = []
            for box in boxes:
                d = rng.uniform(-self.config.box_jitter, self.config.box_jitter, size=4)
                x0 = float(np.clip(box.x_min + d[0], 0.0, 1.0))
                y0 = float(np.clip(box.y_min + d[1], 0.0, 1.0))
                x1 = float(np.clip(box.x_max + d[2], 0.0, 1.0))
                y1 = float(np.clip(box.y_max + d[3], 0.0, 1.0))
                if x1 <= x0:
                    x0, x1 = box.x_min, box.x_max
                if y1 <= y0:
                    y0, y1 = box.y_min, box.y_max
                jittered.append(Box(x0, y0, x1, y1))
            boxes = jittered
        return Detections(
            boxes=boxes,
            class_ids=np.array([inst.class_id for inst in scene.instances], dtype=np.int64),
            is_human=np.array([inst.is_human for inst in scene.instances], dtype=bool),
            scores=np.array([inst.score for inst in scene.instances], dtype=np.float64),
        )

    @torch.no_grad()
    def encode_queries(self, scene: SceneSample, detections: Detections) -> QueryStack:
        """Layer-l query = frozen affine of [box, class one-hot, layer one-hot] + noise."""
        cfg = self.config
        k = len(detections)
        rng = self._scene_rng(scene.seed, _QUERY_STREAM)
        feats = np.zeros((k, 4 + cfg.num_classes + cfg.num_layers))
        for i, box in enumerate(detections.boxes):
            feats[i, :4] = box.as_list()
            feats[i, 4 + int(detections.class_ids[i])] = 1.0
        layers = []
        for l in range(cfg.num_layers):
            x = feats.copy()
            x[:, 4 + cfg.num_classes + l] = 1.0
            q = self.det_proj(torch.from_numpy(x).to(self.dtype))
            if cfg.noise_scale > 0.0:
                noise = rng.normal(0.0, cfg.noise_scale, size=(k, cfg.d_query))
                q = q + torch.from_numpy(noise).to(self.dtype)
            layers.append(q)
        return QueryStack(layers=layers)
