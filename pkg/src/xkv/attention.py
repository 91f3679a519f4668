"""Toy frame-wise causal temporal attention layer.

Each frame carries one camera token, R register tokens and N patch tokens
(1 + R + N rows). Projections are seeded Gaussians standing in for
pretrained weights; channel-wise key outliers are injected after the key
projection so the quantizer sees the hot-channel distribution real models
exhibit. Causality is frame-level: every current-frame token attends to
the whole history plus the whole current frame (no intra-frame mask), and
no positional encoding is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, DimensionError, ParameterError
from .numerics import MultiHeadTensor, softmax_rows

# AttentionOutput is a MultiHeadTensor of shape (H, 1 + R + N, d_head).
AttentionOutput = np.ndarray

# Correlation between the seeded key and query projections. Independent
# random projections give attention no notion of content relevance (the
# q.k bilinear form is a zero-mean random quadratic), so attention mass
# spreads diffusely and "query-relevant regions" do not exist. Blending
# w_k toward w_q keeps each marginal Gaussian with std 1/sqrt(d_model)
# while giving matched content a positive logit, which concentrates
# attention the way trained vision transformers do.
QK_ALIGNMENT = 0.9


@dataclass(frozen=True)
class FrameTokens:
    """One frame's token embeddings: camera row 0, registers 1..R, patches after."""

    frame_index: int
    embeddings: np.ndarray  # ((1 + R + N), d_model)
    n_register: int

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise DimensionError(f"embeddings must be 2-D, got shape {emb.shape}")
        if self.n_register < 0 or emb.shape[0] < 1 + self.n_register:
            raise ParameterError(
                f"{emb.shape[0]} rows cannot hold 1 camera + {self.n_register} register tokens"
            )
        object.__setattr__(self, "embeddings", emb)

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_special(self) -> int:
        return 1 + self.n_register

    @property
    def n_patch(self) -> int:
        return self.n_tokens - self.n_special

    def token_kind(self, row: int) -> str:
        if row == 0:
            return "camera"
        return "register" if row <= self.n_register else "patch"


@dataclass(frozen=True)
class LayerWeights:
    """Q/K/V projection matrices plus per-channel key outlier parameters.

    Key channels are multiplied by outlier_channel_scales and shifted by
    outlier_channel_offsets after projection. Seeded weights model hot
    channels as offsets: a channel with a consistently large magnitude is
    what makes per-channel grouping the right key quantization axis (the
    offset is absorbed by that group's zero-point), whereas a merely
    high-variance channel degrades both grouping axes alike. Offsets are
    also invisible to attention itself: a shift that is constant across
    tokens cancels inside the softmax.
    """

    w_q: np.ndarray  # (d_model, heads * d_head)
    w_k: np.ndarray
    w_v: np.ndarray
    heads: int
    d_head: int
    outlier_channel_scales: np.ndarray = field(default=None)  # (heads * d_head,)
    outlier_channel_offsets: np.ndarray = field(default=None)  # (heads * d_head,)

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.ndim != 2:
                raise DimensionError(f"{name} must be 2-D, got shape {w.shape}")
            object.__setattr__(self, name, w)
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise DimensionError("w_q, w_k, w_v must share one shape")
        if self.w_q.shape[1] != self.heads * self.d_head:
            raise DimensionError(
                f"projection width {self.w_q.shape[1]} != heads*d_head {self.heads * self.d_head}"
            )
        scales = self.outlier_channel_scales
        if scales is None:
            scales = np.ones(self.heads * self.d_head)
        scales = np.asarray(scales, dtype=np.float64)
        if scales.shape != (self.heads * self.d_head,):
            raise DimensionError(f"outlier scale vector has shape {scales.shape}")
        if not (scales > 0).all():
            raise ParameterError("outlier channel scales must all be positive")
        object.__setattr__(self, "outlier_channel_scales", scales)
        offsets = self.outlier_channel_offsets
        if offsets is None:
            offsets = np.zeros(self.heads * self.d_head)
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (self.heads * self.d_head,):
            raise DimensionError(f"outlier offset vector has shape {offsets.shape}")
        object.__setattr__(self, "outlier_channel_offsets", offsets)

    @classmethod
    def seeded(cls, d_model: int, heads: int, d_head: int, rng,
               outlier_channels: int = 0, outlier_amp: float = 1.0) -> "LayerWeights":
        """Gaussian projections (std 1/sqrt(d_model)) with optional key outliers.

        w_k is correlated with w_q (see QK_ALIGNMENT) so that attention
        concentrates on content-similar tokens; w_v is independent. Hot
        channels are given a constant offset of +-outlier_amp (seeded
        sign), reproducing the consistent-magnitude channel outliers of
        real key tensors.
        """
        width = heads * d_head
        std = 1.0 / np.sqrt(d_model)
        w_q = rng.standard_normal((d_model, width)) * std
        w_k = (QK_ALIGNMENT * w_q
               + np.sqrt(1.0 - QK_ALIGNMENT ** 2)
               * rng.standard_normal((d_model, width)) * std)
        w_v = rng.standard_normal((d_model, width)) * std
        offsets = np.zeros(width)
        if outlier_channels:
            if outlier_channels > width:
                raise ParameterError(
                    f"{outlier_channels} outlier channels exceed width {width}"
                )
            hot = rng.choice(width, size=outlier_channels, replace=False)
            offsets[hot] = outlier_amp * np.where(rng.random(outlier_channels) < 0.5, -1.0, 1.0)
        return cls(w_q=w_q, w_k=w_k, w_v=w_v, heads=heads, d_head=d_head,
                   outlier_channel_offsets=offsets)


def _split_heads(flat: np.ndarray, heads: int, d_head: int) -> np.ndarray:
    # (T, heads * d_head) -> (heads, T, d_head); channel h*d_head + c is head h, channel c
    t = flat.shape[0]
    return np.ascontiguousarray(flat.reshape(t, heads, d_head).transpose(1, 0, 2))


def project_qkv(frame: FrameTokens, weights: LayerWeights):
    """Project one frame into per-head Q, K, V tensors.

    Returns three (heads, 1 + R + N, d_head) tensors; key channels are
    multiplied by outlier_channel_scales after projection.
    """
    emb = frame.embeddings
    if emb.shape[1] != weights.w_q.shape[0]:
        raise DimensionError(
            f"embedding width {emb.shape[1]} != projection rows {weights.w_q.shape[0]}"
        )
    q = _split_heads(emb @ weights.w_q, weights.heads, weights.d_head)
    k_flat = ((emb @ weights.w_k) * weights.outlier_channel_scales
              + weights.outlier_channel_offsets)
    k = _split_heads(k_flat, weights.heads, weights.d_head)
    v = _split_heads(emb @ weights.w_v, weights.heads, weights.d_head)
    return q, k, v


def temporal_causal_attention(Q_t: MultiHeadTensor, K_full: MultiHeadTensor,
                              V_full: MultiHeadTensor) -> AttentionOutput:
    """softmax(Q K^T / sqrt(d_head)) V per head over all cached + current positions.

    The current frame's tokens must occupy the trailing positions of
    K_full/V_full; frame-level causality means no mask is needed here.
    """
    Q_t = np.asarray(Q_t, dtype=np.float64)
    K_full = np.asarray(K_full, dtype=np.float64)
    V_full = np.asarray(V_full, dtype=np.float64)
    if Q_t.ndim != 3 or K_full.ndim != 3 or V_full.ndim != 3:
        raise DimensionError("Q, K, V must be (head, token, channel) tensors")
    if K_full.shape[1] != V_full.shape[1]:
        raise CorruptionError(
            f"cache corruption: K holds {K_full.shape[1]} tokens, V holds {V_full.shape[1]}"
        )
    if K_full.shape[0] != Q_t.shape[0] or V_full.shape[0] != Q_t.shape[0]:
        raise DimensionError("head count mismatch between Q and K/V")
    if K_full.shape[2] != Q_t.shape[2] or V_full.shape[2] != Q_t.shape[2]:
        raise DimensionError("channel count mismatch between Q and K/V")
    if K_full.shape[1] < Q_t.shape[1]:
        raise DimensionError(
            f"cache holds {K_full.shape[1]} tokens but the current frame has {Q_t.shape[1]}"
        )

    d_head = Q_t.shape[2]
    scale = 1.0 / np.sqrt(d_head)
    out = np.empty_like(Q_t)
    for h in range(Q_t.shape[0]):
        logits = (Q_t[h] @ K_full[h].T) * scale
        out[h] = softmax_rows(logits) @ V_full[h]
    return out
