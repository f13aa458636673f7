"""Per-instance context extraction from one VLM token layer.

For every layer of the token stack, three masked self-attention streams
produce a global context over the whole grid, an intra-instance context over
each instance's own mask, and an inter-instance context over each instance's
surrounding mask. The three streams are encoded with separate parameters so
they stay semantically distinct; by default each stack layer also has its own
parameters.

The per-instance streams are evaluated for all K instances in one batched
pass and kept full-length together with their masks; `intra_ctx` /
`inter_ctx` expose the per-instance subsequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import MaskSet
from .layers import FeedForward, MultiHeadAttention, masked_self_attention_set

GLOBAL_CTX = "g"
INTRA_CTX = "r"
INTER_CTX = "c"
ALL_CONTEXTS = GLOBAL_CTX + INTRA_CTX + INTER_CTX


def validate_contexts(contexts: str) -> str:
    """Normalize a context-selection string like "grc" (order-insensitive)."""
    chars = set(contexts.lower())
    if not chars or not chars <= set(ALL_CONTEXTS):
        raise ValueError(f"contexts must be a nonempty subset of '{ALL_CONTEXTS}', got {contexts!r}")
    return "".join(c for c in ALL_CONTEXTS if c in chars)


@dataclass
class TensorMasks:
    """MaskSet converted to torch bool tensors, cached per scene."""

    num_tokens: int
    instance: torch.Tensor
    surrounding: torch.Tensor

    @classmethod
    def from_mask_set(cls, masks: MaskSet) -> "TensorMasks":
        return cls(
            num_tokens=masks.grid.num_tokens,
            instance=torch.from_numpy(np.ascontiguousarray(masks.instance)),
            surrounding=torch.from_numpy(np.ascontiguousarray(masks.surrounding)),
        )

    @property
    def num_instances(self) -> int:
        return int(self.instance.shape[0])


@dataclass
class ContextBundle:
    """Refined context sequences for one token-stack layer.

    global_ctx is (N, d). intra_full / inter_full are (K, N, d) with only the
    rows at their mask's set positions meaningful; the masks travel alongside
    so consumers can exclude the rest. Disabled streams are None.
    """

    layer_index: int
    global_ctx: torch.Tensor | None
    intra_full: torch.Tensor | None
    intra_masks: torch.Tensor | None
    inter_full: torch.Tensor | None
    inter_masks: torch.Tensor | None

    @property
    def num_instances(self) -> int:
        for full in (self.intra_full, self.inter_full):
            if full is not None:
                return int(full.shape[0])
        return 0

    @property
    def intra_ctx(self) -> list[torch.Tensor] | None:
        if self.intra_full is None:
            return None
        return [self.intra_full[i][self.intra_masks[i]] for i in range(self.intra_full.shape[0])]

    @property
    def inter_ctx(self) -> list[torch.Tensor] | None:
        if self.inter_full is None:
            return None
        return [self.inter_full[i][self.inter_masks[i]] for i in range(self.inter_full.shape[0])]


class ContextRefiner(nn.Module):
    """Masked-attention context extractor over the L token-stack layers."""

    def __init__(
        self,
        d_vlm: int,
        num_heads: int,
        num_layers: int,
        contexts: str = ALL_CONTEXTS,
        share_layers: bool = False,
    ):
        super().__init__()
        self.contexts = validate_contexts(contexts)
        self.num_layers = num_layers
        self.share_layers = share_layers
        n_param_layers = 1 if share_layers else num_layers
        self.attn = nn.ModuleDict()
        self.ffn = nn.ModuleDict()
        for c in self.contexts:
            self.attn[c] = nn.ModuleList(
                MultiHeadAttention(d_vlm, num_heads) for _ in range(n_param_layers)
            )
            self.ffn[c] = nn.ModuleList(FeedForward(d_vlm) for _ in range(n_param_layers))

    def _blocks(self, context: str, layer_index: int):
        idx = 0 if self.share_layers else layer_index - 1
        return self.attn[context][idx], self.ffn[context][idx]

    def forward(
        self,
        v_layer: torch.Tensor,
        masks: MaskSet | TensorMasks,
        layer_index: int,
    ) -> ContextBundle:
        """Refine one token layer (layer_index is 1-based) into a ContextBundle."""
        if isinstance(masks, MaskSet):
            masks = TensorMasks.from_mask_set(masks)
        n = masks.num_tokens
        if v_layer.shape[0] != n:
            raise ValueError(f"token layer has {v_layer.shape[0]} rows, mask grid has {n}")
        if not 1 <= layer_index <= self.num_layers:
            raise ValueError(f"layer_index {layer_index} outside 1..{self.num_layers}")
        global_ctx = None
        intra_full = intra_masks = None
        inter_full = inter_masks = None
        if GLOBAL_CTX in self.contexts:
            attn, ffn = self._blocks(GLOBAL_CTX, layer_index)
            ones = torch.ones((1, n), dtype=torch.bool, device=v_layer.device)
            global_ctx = ffn(masked_self_attention_set(v_layer, ones, attn)[0])
        if INTRA_CTX in self.contexts:
            attn, ffn = self._blocks(INTRA_CTX, layer_index)
            intra_masks = masks.instance
            intra_full = ffn(masked_self_attention_set(v_layer, intra_masks, attn))
        if INTER_CTX in self.contexts:
            attn, ffn = self._blocks(INTER_CTX, layer_index)
            inter_masks = masks.surrounding
            inter_full = ffn(masked_self_attention_set(v_layer, inter_masks, attn))
        return ContextBundle(
            layer_index=layer_index,
            global_ctx=global_ctx,
            intra_full=intra_full,
            intra_masks=intra_masks,
            inter_full=inter_full,
            inter_masks=inter_masks,
        )
