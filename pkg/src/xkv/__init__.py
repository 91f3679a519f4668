"""Bounded KV-cache engine for frame-wise causal streaming attention.

Query-guided pruning holds the per-layer cache at a fixed token budget;
dimension-adaptive group quantization (per-channel keys, per-token
values) shrinks what remains. The bench harness demonstrates bounded
memory and constant per-frame cost against an unbounded baseline.
"""

from .attention import (
    AttentionOutput,
    FrameTokens,
    LayerWeights,
    project_qkv,
    temporal_causal_attention,
)
from .bench import (
    MODES,
    BenchMetrics,
    StreamResult,
    compare_outputs,
    emit_metrics,
    gen_frames,
    layer_weights,
    read_metrics,
    run_modes,
    run_stream,
)
from .cache import KVCacheLayer, PruneSelection
from .config import StreamConfig, apply_overrides, load_config
from .errors import (
    BudgetInfeasibleError,
    CorruptionError,
    DimensionError,
    EmptyCacheError,
    InvariantViolationError,
    MaskError,
    ParameterError,
    ProtocolError,
    XKVError,
)
from .numerics import grouped_mean, matmul, softmax_rows, top_k_indices
from .pruning import (
    ImportanceScores,
    PooledQuery,
    build_pooled_query,
    prune_step,
    score_matrix,
    score_tokens,
    select_keep_indices,
    summarize_prunable_keys,
)
from .quantization import (
    EPS_SCALE,
    QuantizedBlockSet,
    QuantParams,
    dequantize_group,
    mse_report,
    pack_codes,
    quant_params,
    quantize_group,
    quantize_tensor,
    unpack_codes,
)

__version__ = "0.1.0"
