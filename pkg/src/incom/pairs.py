"""Human-object pair construction, fusion, and interaction decoding.

The interaction head consumes four feature sources: detector queries and the
CNN map (detector side), aggregated context features and final VLM tokens
(VLM side). A FeatureMode selects which sources are live; a disabled source
contributes exactly nothing, so outputs are bit-identical under arbitrary
substitution of the masked-out features.

Pair tokens carry no positional encoding. Attention stages over the pair set
internally process tokens in a canonical content-derived order and restore
the caller's order afterwards, which makes outputs exactly independent of
detection / pair enumeration order (bit-for-bit, not just up to rounding).
"""

from __future__ import annotations

import enum
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .backbones import Detections
from .evaluation import HoiPrediction
from .layers import FeedForward, MultiHeadAttention, TransformerBlock, cross_attention


class FeatureMode(enum.Enum):
    FULL = "full"
    DETECTOR_ONLY = "d-only"
    VLM_ONLY = "v-only"

    @classmethod
    def from_string(cls, s: str) -> "FeatureMode":
        for mode in cls:
            if mode.value == s:
                return mode
        raise ValueError(f"unknown feature mode {s!r}; expected one of "
                         f"{[m.value for m in cls]}")

    @property
    def use_queries(self) -> bool:
        return self is not FeatureMode.VLM_ONLY

    @property
    def use_aggregate(self) -> bool:
        return self is not FeatureMode.DETECTOR_ONLY

    @property
    def use_cnn(self) -> bool:
        return self is not FeatureMode.VLM_ONLY

    @property
    def use_vlm(self) -> bool:
        return self is not FeatureMode.DETECTOR_ONLY


ALL_MODES = (FeatureMode.FULL, FeatureMode.DETECTOR_ONLY, FeatureMode.VLM_ONLY)


class PairIndex(NamedTuple):
    h: int
    o: int


def generate_pairs(is_human) -> list[PairIndex]:
    """All ordered (human, other) pairs, human index ascending then other ascending."""
    flags = list(is_human)
    pairs = []
    for h, human in enumerate(flags):
        if not human:
            continue
        for o in range(len(flags)):
            if o != h:
                pairs.append(PairIndex(h=h, o=o))
    return pairs


def canonical_order(rows: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Content-lexicographic ordering of rows plus its inverse.

    Tied rows are bit-identical tensors, so any tie order yields the same
    downstream values.
    """
    arr = rows.detach().cpu().numpy()
    order = np.lexsort(arr.T[::-1])
    inv = np.argsort(order)
    return order, inv


class _DecoderLayer(nn.Module):
    """Residual self-attention over pair tokens, then the sum of the enabled
    cross-attention branches through a residual FFN.

    A masked-out branch is skipped entirely, so its contribution is an exact
    zero tensor regardless of what the masked feature source contains.
    """

    def __init__(self, d_pair: int, num_heads: int, d_cnn: int, d_vlm: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_pair, num_heads)
        self.cross_cnn = MultiHeadAttention(d_pair, num_heads, d_kv=d_cnn)
        self.cross_vlm = MultiHeadAttention(d_pair, num_heads, d_kv=d_vlm)
        self.ffn = FeedForward(d_pair)

    def forward(self, z, cnn_tokens, vlm_tokens, mode: FeatureMode, collect=None):
        zhat = z + self.self_attn(z, z, z)
        mixed = torch.zeros_like(zhat)
        if mode.use_cnn:
            out, w = cross_attention(zhat, cnn_tokens, self.cross_cnn, return_weights=True)
            mixed = mixed + out
            if collect is not None:
                collect["cnn"] = w
        if mode.use_vlm:
            out, w = cross_attention(zhat, vlm_tokens, self.cross_vlm, return_weights=True)
            mixed = mixed + out
            if collect is not None:
                collect["vlm"] = w
        return zhat + self.ffn(mixed)


class InteractionHead(nn.Module):
    """Pair generator, shallow pair encoder, interaction decoder, and classifier."""

    def __init__(
        self,
        d_query: int,
        d_model: int,
        d_pair: int,
        d_cnn: int,
        d_vlm: int,
        num_heads: int,
        num_decoder_layers: int,
        num_verbs: int,
    ):
        super().__init__()
        self.d_pair = d_pair
        self.num_verbs = num_verbs
        self.query_fuse = nn.Linear(2 * d_query, d_pair)
        self.query_norm = nn.LayerNorm(d_pair)
        self.agg_fuse = nn.Linear(2 * d_model, d_pair)
        self.agg_norm = nn.LayerNorm(d_pair)
        self.encoder = TransformerBlock(d_pair, num_heads)
        self.decoder = nn.ModuleList(
            _DecoderLayer(d_pair, num_heads, d_cnn, d_vlm) for _ in range(num_decoder_layers)
        )
        self.classifier = nn.Linear(d_pair, num_verbs)

    def fuse_pairs(
        self,
        queries_final: torch.Tensor,
        agg_final: torch.Tensor,
        pairs: list[PairIndex],
        mode: FeatureMode,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw pair tokens and their encoded form, in the given pair order."""
        ref = queries_final if mode.use_queries else agg_final
        if len(pairs) == 0:
            empty = ref.new_zeros((0, self.d_pair))
            return empty, empty
        h_idx = torch.as_tensor([p.h for p in pairs], dtype=torch.long, device=ref.device)
        o_idx = torch.as_tensor([p.o for p in pairs], dtype=torch.long, device=ref.device)
        raw = ref.new_zeros((len(pairs), self.d_pair))
        if mode.use_queries:
            qcat = torch.cat([queries_final[h_idx], queries_final[o_idx]], dim=-1)
            raw = raw + self.query_norm(self.query_fuse(qcat))
        if mode.use_aggregate:
            fcat = torch.cat([agg_final[h_idx], agg_final[o_idx]], dim=-1)
            raw = raw + self.agg_norm(self.agg_fuse(fcat))
        order, inv = canonical_order(raw)
        encoded = self.encoder(raw[order])[inv]
        return raw, encoded

    def decode(
        self,
        encoded_pairs: torch.Tensor,
        cnn_tokens: torch.Tensor,
        vlm_final: torch.Tensor,
        mode: FeatureMode,
        details: dict | None = None,
    ) -> torch.Tensor:
        """Run the decoder stack and classifier; returns (P, num_verbs) logits."""
        if encoded_pairs.shape[0] == 0:
            return encoded_pairs.new_zeros((0, self.num_verbs))
        order, inv = canonical_order(encoded_pairs)
        z = encoded_pairs[order]
        if details is not None:
            details["decoder_states"] = [z[inv]]
            details["cross_attn"] = []
        for layer in self.decoder:
            collect = {} if details is not None else None
            z = layer(z, cnn_tokens, vlm_final, mode, collect=collect)
            if details is not None:
                details["decoder_states"].append(z[inv])
                details["cross_attn"].append(
                    {k: w[:, inv, :] for k, w in collect.items()}
                )
        return self.classifier(z)[inv]

    def forward(
        self,
        queries_final: torch.Tensor,
        agg_final: torch.Tensor,
        pairs: list[PairIndex],
        cnn_tokens: torch.Tensor,
        vlm_final: torch.Tensor,
        mode: FeatureMode,
        details: dict | None = None,
    ) -> torch.Tensor:
        raw, encoded = self.fuse_pairs(queries_final, agg_final, pairs, mode)
        if details is not None:
            details["pair_raw"] = raw
            details["pair_encoded"] = encoded
        return self.decode(encoded, cnn_tokens, vlm_final, mode, details=details)


def score_interactions(
    logits: torch.Tensor,
    pairs: list[PairIndex],
    detections: Detections,
    scene_id: int,
) -> list[HoiPrediction]:
    """Compose verb probabilities with detection scores into HOI predictions."""
    if logits.shape[0] != len(pairs):
        raise ValueError(f"{logits.shape[0]} logit rows for {len(pairs)} pairs")
    probs = torch.sigmoid(logits.detach()).cpu().numpy()
    preds = []
    for p, pair in enumerate(pairs):
        pair_score = float(detections.scores[pair.h] * detections.scores[pair.o])
        for verb in range(logits.shape[1]):
            preds.append(
                HoiPrediction(
                    scene_id=scene_id,
                    human_box=detections.boxes[pair.h],
                    object_box=detections.boxes[pair.o],
                    object_class=int(detections.class_ids[pair.o]),
                    verb=verb,
                    score=float(probs[p, verb]) * pair_score,
                )
            )
    return preds
