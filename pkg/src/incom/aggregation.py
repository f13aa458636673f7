"""Progressive fusion of detector queries with the refined context streams.

Aggregated instance features start at zero. At each layer the layer's query
is injected through an FFN on top of the previous aggregate, each instance
cross-attends separately into the enabled context streams, and the branch
outputs are concatenated (global, intra, inter order) and fused back to the
model width. Layers run strictly in stack order.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbones import QueryStack, TokenStack
from .contexts import ALL_CONTEXTS, ContextBundle, ContextRefiner, TensorMasks, validate_contexts
from .geometry import MaskSet
from .layers import FeedForward, MultiHeadAttention, cross_attention, masked_cross_attention_set


class ContextAggregator(nn.Module):
    def __init__(
        self,
        d_model: int,
        d_query: int,
        d_vlm: int,
        num_heads: int,
        num_layers: int,
        contexts: str = ALL_CONTEXTS,
    ):
        super().__init__()
        self.contexts = validate_contexts(contexts)
        self.d_model = d_model
        self.num_layers = num_layers
        self.inject = nn.ModuleList(
            FeedForward(d_query, d_out=d_model) for _ in range(num_layers)
        )
        self.cross = nn.ModuleDict(
            {
                c: nn.ModuleList(
                    MultiHeadAttention(d_model, num_heads, d_kv=d_vlm)
                    for _ in range(num_layers)
                )
                for c in self.contexts
            }
        )
        self.fuse = nn.ModuleList(
            FeedForward(len(self.contexts) * d_model, d_out=d_model)
            for _ in range(num_layers)
        )

    def initial_state(self, num_instances: int, ref: torch.Tensor) -> torch.Tensor:
        """The zero aggregate every instance starts from."""
        return ref.new_zeros((num_instances, self.d_model))

    def step(
        self,
        f_prev: torch.Tensor,
        q_layer: torch.Tensor,
        bundle: ContextBundle,
        layer_index: int,
    ) -> torch.Tensor:
        """One aggregation layer (layer_index is 1-based, must match the bundle)."""
        if bundle.layer_index != layer_index:
            raise ValueError(
                f"bundle is for layer {bundle.layer_index}, step asked for {layer_index}"
            )
        k = f_prev.shape[0]
        if q_layer.shape[0] != k:
            raise ValueError(f"instance count mismatch: {q_layer.shape[0]} queries vs {k} states")
        li = layer_index - 1
        f_hat = f_prev + self.inject[li](q_layer)
        branches = []
        if "g" in self.contexts:
            branches.append(cross_attention(f_hat, bundle.global_ctx, self.cross["g"][li]))
        if "r" in self.contexts:
            if bundle.intra_full is None or bundle.intra_full.shape[0] != k:
                raise ValueError("bundle intra contexts missing or instance count mismatch")
            branches.append(
                masked_cross_attention_set(
                    f_hat, bundle.intra_full, bundle.intra_masks, self.cross["r"][li]
                )
            )
        if "c" in self.contexts:
            if bundle.inter_full is None or bundle.inter_full.shape[0] != k:
                raise ValueError("bundle inter contexts missing or instance count mismatch")
            branches.append(
                masked_cross_attention_set(
                    f_hat, bundle.inter_full, bundle.inter_masks, self.cross["c"][li]
                )
            )
        return self.fuse[li](torch.cat(branches, dim=-1))


def mine_contexts(
    refiner: ContextRefiner,
    aggregator: ContextAggregator,
    tokens: TokenStack,
    queries: QueryStack,
    masks: MaskSet | TensorMasks,
) -> torch.Tensor:
    """Run refinement + aggregation across all layers; returns the final (K, d) aggregate."""
    if len(tokens.layers) != aggregator.num_layers or len(queries.layers) != aggregator.num_layers:
        raise ValueError(
            f"stacks must have exactly {aggregator.num_layers} layers, got "
            f"{len(tokens.layers)} token and {len(queries.layers)} query layers"
        )
    if isinstance(masks, MaskSet):
        masks = TensorMasks.from_mask_set(masks)
    f = aggregator.initial_state(masks.num_instances, tokens.layers[0])
    for l in range(1, aggregator.num_layers + 1):
        bundle = refiner(tokens.layers[l - 1], masks, l)
        f = aggregator.step(f, queries.layers[l - 1], bundle, l)
    return f
