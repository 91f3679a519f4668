"""Query-guided importance scoring and retention selection.

Token importance is estimated without touching attention internals (so
the host attention can stay a fused kernel): the current frame's queries
are pooled (special tokens kept verbatim, patch queries group-averaged),
head-averaged, and matched against head-averaged middle-segment keys by
raw inner product. No softmax and no 1/sqrt(d) scaling are applied; both
are monotone per query and would not change the top-k ranking.

Scoring reads keys from the cache after dequantization, so at step t it
sees the codes written at step t-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KVCacheLayer, PruneSelection
from .config import StreamConfig
from .errors import BudgetInfeasibleError, DimensionError, ParameterError
from .numerics import MultiHeadTensor, RealMatrix, grouped_mean, top_k_indices


@dataclass(frozen=True)
class PooledQuery:
    """Head-averaged query summary: special rows verbatim, patch rows pooled."""

    matrix: np.ndarray  # (n_special + ceil(N / g), d_head)
    n_special: int


@dataclass(frozen=True)
class ImportanceScores:
    """One score per prunable middle token; offset locates them in the cache."""

    scores: np.ndarray
    offset: int


def build_pooled_query(Q_t: MultiHeadTensor, n_special: int, g: int) -> PooledQuery:
    """Pool the current frame's queries for cheap importance matching."""
    Q_t = np.asarray(Q_t, dtype=np.float64)
    if Q_t.ndim != 3:
        raise DimensionError(f"Q_t must be (head, token, channel), got shape {Q_t.shape}")
    if n_special < 0 or n_special >= Q_t.shape[1]:
        raise ParameterError(
            f"n_special={n_special} leaves no patch tokens out of {Q_t.shape[1]}"
        )
    if g < 1:
        raise ParameterError(f"pooling size must be >= 1, got {g}")
    # Head averaging commutes with grouping, so average heads first.
    head_avg = Q_t.mean(axis=0)
    pooled = np.concatenate([head_avg[:n_special], grouped_mean(head_avg[n_special:], g)])
    return PooledQuery(matrix=pooled, n_special=n_special)


def summarize_prunable_keys(K_cache: MultiHeadTensor, t_first: int,
                            t_current: int) -> RealMatrix:
    """Head-averaged keys of the middle segment only (may be 0 rows).

    Camera, register and patch tokens in middle frames are all treated
    uniformly; nothing in the middle is exempt from scoring.
    """
    K_cache = np.asarray(K_cache, dtype=np.float64)
    if K_cache.ndim != 3:
        raise DimensionError(f"K_cache must be (head, token, channel), got {K_cache.shape}")
    T = K_cache.shape[1]
    if t_first < 0 or t_current < 0 or t_first + t_current > T:
        raise ParameterError(
            f"segments t_first={t_first}, t_current={t_current} exceed {T} tokens"
        )
    return K_cache[:, t_first: T - t_current, :].mean(axis=0)


def score_matrix(pooled: PooledQuery, key_summary: RealMatrix) -> np.ndarray:
    """Inner products of every pooled query with every prunable key."""
    key_summary = np.asarray(key_summary, dtype=np.float64)
    if pooled.matrix.shape[1] != key_summary.shape[1]:
        raise DimensionError(
            f"pooled queries have {pooled.matrix.shape[1]} channels, "
            f"keys have {key_summary.shape[1]}"
        )
    return pooled.matrix @ key_summary.T


def score_tokens(pooled: PooledQuery, key_summary: RealMatrix,
                 offset: int = 0) -> ImportanceScores:
    """Per-token importance: the score matrix averaged over pooled queries."""
    matrix = score_matrix(pooled, key_summary)
    return ImportanceScores(scores=matrix.mean(axis=0), offset=offset)


def select_keep_indices(scores: ImportanceScores, T: int, t_first: int,
                        t_current: int, L_max: int) -> PruneSelection:
    """Top-k middle tokens plus the protected first/current frames, ascending."""
    if L_max < t_first + t_current:
        raise BudgetInfeasibleError(
            f"budget {L_max} cannot hold first ({t_first}) + current ({t_current}) frames"
        )
    if T <= L_max:
        raise ParameterError(f"pruning not triggered: {T} tokens within budget {L_max}")
    n_middle = T - t_first - t_current
    if scores.scores.shape != (n_middle,):
        raise DimensionError(
            f"expected {n_middle} middle scores, got shape {scores.scores.shape}"
        )
    k = L_max - t_first - t_current
    middle = top_k_indices(scores.scores, k) + t_first
    keep = np.concatenate([np.arange(t_first), middle, np.arange(T - t_current, T)])
    return PruneSelection(keep_indices=keep, t_first=t_first,
                          current_start=T - t_current, total_tokens=T)


def prune_step(layer: KVCacheLayer, Q_t: MultiHeadTensor, config: StreamConfig,
               score_sink=None):
    """Restore the layer to the budget after attention, if it is exceeded.

    No-op while the cache fits the budget. Otherwise reads the (possibly
    quantized) cache, scores the middle segment against the pooled current
    queries and gathers the survivors. Returns the applied PruneSelection,
    or None when nothing was pruned. `score_sink`, if given, receives the
    raw score matrix before selection.
    """
    T = layer.total_tokens
    if T <= config.budget:
        return None
    Q_t = np.asarray(Q_t, dtype=np.float64)
    t_first = layer.t_first
    current_start = layer.current_frame_start()
    t_current = T - current_start
    if Q_t.ndim != 3 or Q_t.shape[1] != t_current:
        raise DimensionError(
            f"Q_t shape {Q_t.shape} does not match current frame of {t_current} tokens"
        )
    K, _ = layer.read_full_precision()
    pooled = build_pooled_query(Q_t, n_special=config.n_special, g=config.pool_size)
    keys = summarize_prunable_keys(K, t_first, t_current)
    matrix = score_matrix(pooled, keys)
    if score_sink is not None:
        score_sink(matrix)
    scores = ImportanceScores(scores=matrix.mean(axis=0), offset=t_first)
    sel = select_keep_indices(scores, T, t_first, t_current, config.budget)
    layer.gather(sel)
    return sel
