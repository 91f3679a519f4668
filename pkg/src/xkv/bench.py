"""Synthetic-stream benchmark harness.

Generates seeded AR(1) frame streams with controllable inter-frame
redundancy, drives the attention + cache pipeline end to end in three
modes (unbounded / pruned / pruned_quant), and measures what the bounded
cache claims: token counts, modeled bytes, per-frame wall time, output
deviation against the unbounded baseline, and the cumulative drift that
repeated re-quantization introduces.

Step order per frame and layer: project -> attend over dequantized
history plus the current frame -> append -> prune (compressed modes,
only once over budget) -> re-quantize the retained cache (pruned_quant
only). Layers are independent; they share nothing but the input frame.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import FrameTokens, LayerWeights, project_qkv, temporal_causal_attention
from .cache import KVCacheLayer
from .config import StreamConfig
from .errors import DimensionError, ParameterError
from .pruning import prune_step

MODES = ("unbounded", "pruned", "pruned_quant")

METRIC_COLUMNS = ("frame", "mode", "wall_ns", "cache_tokens", "cache_bytes",
                  "rel_l2", "cosine")


@dataclass
class BenchMetrics:
    """Per-frame measurements of one run; all series have length == frames."""

    mode: str
    wall_ns: list
    cache_tokens: list
    cache_bytes: list
    rel_l2: list
    cosine: list
    drift: list
    peak_bytes: int

    @property
    def frames(self) -> int:
        return len(self.wall_ns)


@dataclass
class StreamResult:
    """One run: metrics plus the artifacts needed to compare or snapshot it."""

    metrics: BenchMetrics
    outputs: list          # per frame: (layers, heads, tokens_per_frame, d_head)
    layers: list           # final KVCacheLayer states
    stream_sha256: str


def gen_frames(config: StreamConfig) -> list:
    """Seeded AR(1) frame stream; correlation between frames is `redundancy`."""
    rng = np.random.default_rng([config.seed, 0])
    shape = (config.tokens_per_frame, config.d_model)
    rho = config.redundancy
    fresh_scale = math.sqrt(1.0 - rho * rho)
    frames = []
    emb = rng.standard_normal(shape)
    frames.append(FrameTokens(1, emb, config.registers))
    for t in range(2, config.frames + 1):
        emb = rho * emb + fresh_scale * rng.standard_normal(shape)
        frames.append(FrameTokens(t, emb, config.registers))
    return frames


def layer_weights(config: StreamConfig) -> list:
    """Independent seeded projection weights for each layer."""
    return [
        LayerWeights.seeded(
            config.d_model, config.heads, config.d_head,
            np.random.default_rng([config.seed, 1, idx]),
            outlier_channels=config.outlier_channels,
            outlier_amp=config.outlier_amp,
        )
        for idx in range(config.layers)
    ]


def stream_digest(frames) -> str:
    """sha256 over the raw frame embeddings, for cross-run comparison logs."""
    digest = hashlib.sha256()
    for frame in frames:
        digest.update(np.ascontiguousarray(frame.embeddings).tobytes())
    return digest.hexdigest()


def _relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a))
    num = float(np.linalg.norm(a - b))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom


def _mean_token_cosine(a: np.ndarray, b: np.ndarray) -> float:
    # token axis is -2; one vector per token across all leading axes
    at = np.moveaxis(a, -2, 0).reshape(a.shape[-2], -1)
    bt = np.moveaxis(b, -2, 0).reshape(b.shape[-2], -1)
    na = np.linalg.norm(at, axis=1)
    nb = np.linalg.norm(bt, axis=1)
    num = (at * bt).sum(axis=1)
    both_zero = (na == 0) & (nb == 0)
    denom = np.where((na == 0) | (nb == 0), 1.0, na * nb)
    cos = np.where(both_zero, 1.0, num / denom)
    return float(cos.mean())


def compare_outputs(baseline, compressed):
    """Per-frame (relative L2, mean per-token cosine) of two output series."""
    if len(baseline) != len(compressed):
        raise DimensionError(
            f"series lengths differ: {len(baseline)} vs {len(compressed)}"
        )
    rel_l2 = np.empty(len(baseline))
    cosine = np.empty(len(baseline))
    for i, (a, b) in enumerate(zip(baseline, compressed)):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionError(f"frame {i}: shape {a.shape} vs {b.shape}")
        rel_l2[i] = _relative_l2(a, b)
        cosine[i] = _mean_token_cosine(a, b)
    return rel_l2, cosine


class _ShadowStore:
    """Full-precision mirror of one layer, following the same retention
    decisions, used to measure compounding re-quantization drift."""

    def __init__(self, heads, d_head):
        self.k = np.zeros((heads, 0, d_head))
        self.v = np.zeros((heads, 0, d_head))

    def append(self, K_t, V_t):
        self.k = np.concatenate([self.k, K_t], axis=1)
        self.v = np.concatenate([self.v, V_t], axis=1)

    def gather(self, keep):
        self.k = self.k[:, keep, :]
        self.v = self.v[:, keep, :]

    def drift_vs(self, layer: KVCacheLayer) -> float:
        K, V = layer.read_full_precision()
        ref = np.concatenate([self.k.ravel(), self.v.ravel()])
        got = np.concatenate([K.ravel(), V.ravel()])
        return _relative_l2(ref, got)


def run_stream(config: StreamConfig, mode: str, *, baseline_outputs=None,
               score_sink=None) -> StreamResult:
    """Drive one full run and collect BenchMetrics.

    `baseline_outputs` (an unbounded run's output series over the same
    config) fills the deviation columns; without it compressed modes
    report NaN there. `score_sink(layer_idx, frame_index, matrix)`
    receives each pruning score matrix as it is computed.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    frames = gen_frames(config)
    weights = layer_weights(config)
    layers = [KVCacheLayer(config.heads, config.d_head, config.budget)
              for _ in range(config.layers)]
    shadows = ([_ShadowStore(config.heads, config.d_head) for _ in range(config.layers)]
               if mode == "pruned_quant" else None)

    outputs = []
    wall_ns, cache_tokens, cache_bytes, drift = [], [], [], []
    for frame in frames:
        per_layer_out = [None] * config.layers
        appended = [None] * config.layers
        selections = [None] * config.layers

        start = time.perf_counter_ns()
        for idx, (w, layer) in enumerate(zip(weights, layers)):
            Q, K, V = project_qkv(frame, w)
            if layer.total_tokens:
                K_hist, V_hist = layer.read_full_precision()
                K_full = np.concatenate([K_hist, K], axis=1)
                V_full = np.concatenate([V_hist, V], axis=1)
            else:
                K_full, V_full = K, V
            per_layer_out[idx] = temporal_causal_attention(Q, K_full, V_full)
            layer.append(K, V, frame.frame_index)
            if mode != "unbounded":
                sink = None
                if score_sink is not None:
                    sink = lambda m, i=idx, t=frame.frame_index: score_sink(i, t, m)
                selections[idx] = prune_step(layer, Q, config, score_sink=sink)
            if mode == "pruned_quant":
                layer.quantize_cache(config.bits, config.group_size)
            appended[idx] = (K, V)
        wall_ns.append(time.perf_counter_ns() - start)

        # instrumentation, outside the timed mechanism
        if shadows is not None:
            frame_drift = []
            for idx, layer in enumerate(layers):
                shadows[idx].append(*appended[idx])
                if selections[idx] is not None:
                    shadows[idx].gather(selections[idx].keep_indices)
                frame_drift.append(shadows[idx].drift_vs(layer))
            drift.append(float(np.mean(frame_drift)))
        else:
            drift.append(0.0)

        outputs.append(np.stack(per_layer_out))
        cache_tokens.append(layers[0].total_tokens)
        cache_bytes.append(sum(layer.memory_bytes() for layer in layers))

    n = len(frames)
    if baseline_outputs is not None:
        rel_l2, cosine = compare_outputs(baseline_outputs, outputs)
        rel_l2, cosine = rel_l2.tolist(), cosine.tolist()
    elif mode == "unbounded":
        rel_l2, cosine = [0.0] * n, [1.0] * n
    else:
        rel_l2, cosine = [float("nan")] * n, [float("nan")] * n

    metrics = BenchMetrics(
        mode=mode, wall_ns=wall_ns, cache_tokens=cache_tokens,
        cache_bytes=cache_bytes, rel_l2=rel_l2, cosine=cosine, drift=drift,
        peak_bytes=max(cache_bytes),
    )
    return StreamResult(metrics=metrics, outputs=outputs, layers=layers,
                        stream_sha256=stream_digest(frames))


def run_modes(config: StreamConfig, modes) -> dict:
    """Run the requested modes on the identical seeded stream.

    An unbounded baseline is always run (even when not requested) so the
    deviation columns of compressed modes are defined.
    """
    modes = list(modes)
    for mode in modes:
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    baseline = run_stream(config, "unbounded")
    results = {}
    for mode in modes:
        if mode == "unbounded":
            results[mode] = baseline
        elif mode not in results:
            results[mode] = run_stream(config, mode,
                                       baseline_outputs=baseline.outputs)
    return results


# -- metric files ---------------------------------------------------------------


def metric_rows(metrics: BenchMetrics) -> list:
    rows = []
    for i in range(metrics.frames):
        rows.append({
            "frame": i + 1,
            "mode": metrics.mode,
            "wall_ns": metrics.wall_ns[i],
            "cache_tokens": metrics.cache_tokens[i],
            "cache_bytes": metrics.cache_bytes[i],
            "rel_l2": metrics.rel_l2[i],
            "cosine": metrics.cosine[i],
        })
    return rows


def _cell(value):
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return value


def emit_metrics(metrics: BenchMetrics, fmt: str, path) -> None:
    """Write one row per frame as CSV or JSON (same fields either way)."""
    if fmt not in ("csv", "json"):
        raise ParameterError(f"format must be 'csv' or 'json', got {fmt!r}")
    rows = metric_rows(metrics)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for row in rows:
                writer.writerow([_cell(row[col]) for col in METRIC_COLUMNS])
    else:
        for row in rows:
            for key in ("rel_l2", "cosine"):
                if isinstance(row[key], float) and math.isnan(row[key]):
                    row[key] = None
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")


def read_metrics(path, fmt: str) -> list:
    """Parse a metrics file back into typed row dicts."""
    if fmt == "csv":
        with open(path, newline="") as fh:
            raw = list(csv.DictReader(fh))
        rows = []
        for rec in raw:
            rows.append({
                "frame": int(rec["frame"]),
                "mode": rec["mode"],
                "wall_ns": int(rec["wall_ns"]),
                "cache_tokens": int(rec["cache_tokens"]),
                "cache_bytes": int(rec["cache_bytes"]),
                "rel_l2": float(rec["rel_l2"]) if rec["rel_l2"] else float("nan"),
                "cosine": float(rec["cosine"]) if rec["cosine"] else float("nan"),
            })
        return rows
    if fmt == "json":
        with open(path) as fh:
            rows = json.load(fh)
        for row in rows:
            for key in ("rel_l2", "cosine"):
                if row[key] is None:
                    row[key] = float("nan")
        return rows
    raise ParameterError(f"format must be 'csv' or 'json', got {fmt!r}")
