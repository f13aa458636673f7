"""Attention and feed-forward building blocks shared by every trainable stage.

All public entry points operate on unbatched (tokens, dim) tensors; scenes
are small enough that per-scene processing is the unit of work. Masked
self-attention restricts both queries and keys to the masked positions and
returns that subsequence, so positions outside the mask cannot influence the
output at all. The *_set variants evaluate one attention block under K
different masks in a single batched pass (keys are excluded with an additive
-inf mask, which contributes exact zeros after the softmax).
"""

from __future__ import annotations

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    `d_kv` is the raw key/value feature width when it differs from the model
    width (e.g. attending from pair tokens into backbone token maps).
    """

    def __init__(self, d_model: int, num_heads: int, d_kv: int | None = None):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by num_heads={num_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_kv, d_model)
        self.v_proj = nn.Linear(d_kv, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        return_weights: bool = False,
    ):
        if key.shape[0] == 0:
            raise ValueError("attention requires at least one key")
        m = query.shape[0]
        s = key.shape[0]
        q = self.q_proj(query).view(m, self.num_heads, self.d_head).transpose(0, 1)
        k = self.k_proj(key).view(s, self.num_heads, self.d_head).transpose(0, 1)
        v = self.v_proj(value).view(s, self.num_heads, self.d_head).transpose(0, 1)
        logits = q @ k.transpose(-2, -1) / self.d_head**0.5
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(m, self.d_model)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


def _additive_mask(key_masks: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(K, 1, 1, N) tensor that is 0 at kept keys and -inf at excluded ones."""
    neg = torch.zeros(key_masks.shape, dtype=dtype, device=key_masks.device)
    neg.masked_fill_(~key_masks, float("-inf"))
    return neg[:, None, None, :]


def masked_self_attention_set(
    x: torch.Tensor,
    masks: torch.Tensor,
    attn: MultiHeadAttention,
    return_weights: bool = False,
):
    """Self-attention of `x` under each of K key masks in one batched pass.

    Returns (K, N, d_model) full-length outputs; only rows at set positions of
    the corresponding mask are meaningful (other rows attend the same key set
    but are never consumed). Every mask must keep at least one key.
    """
    if masks.dtype != torch.bool:
        masks = masks.to(torch.bool)
    if masks.ndim != 2 or masks.shape[1] != x.shape[0]:
        raise ValueError(f"masks must be (K, {x.shape[0]}), got {tuple(masks.shape)}")
    if not bool(masks.any(dim=1).all()):
        raise ValueError("every mask needs at least one set position; apply fallbacks first")
    n = x.shape[0]
    h, dh = attn.num_heads, attn.d_head
    q = attn.q_proj(x).view(n, h, dh).transpose(0, 1)
    k = attn.k_proj(x).view(n, h, dh).transpose(0, 1)
    v = attn.v_proj(x).view(n, h, dh).transpose(0, 1)
    logits = q @ k.transpose(-2, -1) / dh**0.5
    logits = logits.unsqueeze(0) + _additive_mask(masks, x.dtype)
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).permute(0, 2, 1, 3).reshape(masks.shape[0], n, attn.d_model)
    out = attn.out_proj(out)
    if return_weights:
        return out, weights
    return out


def masked_self_attention(
    x: torch.Tensor,
    mask: torch.Tensor,
    attn: MultiHeadAttention,
) -> torch.Tensor:
    """Self-attention over the subsequence of `x` where `mask` is set.

    Output has mask.sum() rows in position order and is exactly invariant to
    the values of tokens at cleared positions.
    """
    if mask.dtype != torch.bool:
        mask = mask.to(torch.bool)
    if mask.ndim != 1 or mask.shape[0] != x.shape[0]:
        raise ValueError(f"mask length {tuple(mask.shape)} != sequence length {x.shape[0]}")
    if not bool(mask.any()):
        raise ValueError("mask selects no positions; apply fallbacks before attention")
    full = masked_self_attention_set(x, mask.unsqueeze(0), attn)[0]
    return full[mask]


def masked_cross_attention_set(
    queries: torch.Tensor,
    keyvalues: torch.Tensor,
    key_masks: torch.Tensor | None,
    attn: MultiHeadAttention,
) -> torch.Tensor:
    """One query row per batch element attending its own masked key set.

    queries is (K, d_model), keyvalues (K, N, d_kv), key_masks (K, N) bool or
    None for no masking. Returns (K, d_model).
    """
    kk, n = keyvalues.shape[0], keyvalues.shape[1]
    if queries.shape[0] != kk:
        raise ValueError(f"{queries.shape[0]} queries for {kk} key sets")
    h, dh = attn.num_heads, attn.d_head
    q = attn.q_proj(queries).view(kk, h, 1, dh)
    k = attn.k_proj(keyvalues).view(kk, n, h, dh).permute(0, 2, 1, 3)
    v = attn.v_proj(keyvalues).view(kk, n, h, dh).permute(0, 2, 1, 3)
    logits = q @ k.transpose(-2, -1) / dh**0.5
    if key_masks is not None:
        if not bool(key_masks.any(dim=1).all()):
            raise ValueError("every key mask needs at least one set position")
        logits = logits + _additive_mask(key_masks.to(torch.bool), queries.dtype)
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).reshape(kk, attn.d_model)
    return attn.out_proj(out)


def cross_attention(
    query: torch.Tensor,
    keyvalue: torch.Tensor,
    attn: MultiHeadAttention,
    return_weights: bool = False,
):
    """Attend each query row over the full keyvalue sequence."""
    if keyvalue.shape[0] == 0:
        raise ValueError("cross-attention requires a nonempty keyvalue sequence")
    return attn(query, keyvalue, keyvalue, return_weights=return_weights)


class FeedForward(nn.Module):
    """Pre-norm two-layer MLP: LN -> linear -> GELU -> linear. No residual inside."""

    def __init__(self, d_in: int, d_out: int | None = None, d_hidden: int | None = None):
        super().__init__()
        d_out = d_in if d_out is None else d_out
        d_hidden = 4 * d_in if d_hidden is None else d_hidden
        self.norm = nn.LayerNorm(d_in)
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(self.norm(x))))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: residual self-attention then residual FFN."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, num_heads)
        self.ffn = FeedForward(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        x = x + self.attn(h, h, h)
        return x + self.ffn(x)
