"""Per-layer bounded KV store.

Keys and values are held per layer as an optional quantized block set
(written by quantize_cache) plus a full-precision tail of rows appended
since the last quantization. Gathering dequantizes, filters and leaves
the survivors full-precision; the step orchestrator re-quantizes
afterwards, so compounding re-quantization error is a measured property
of the pipeline rather than hidden state.

Byte accounting models deployment storage: 4 bytes per full-precision
value (fp32-equivalent), a float32 scale and an int64 zero-point per
group, 4 bytes per token of frame bookkeeping, and a fixed header. Snapshots use
the same layout behind the magic "XKV1" (little-endian throughout).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptionError,
    DimensionError,
    EmptyCacheError,
    InvariantViolationError,
    ParameterError,
    ProtocolError,
)
from .quantization import QuantizedBlockSet, quantize_tensor

SNAPSHOT_MAGIC = b"XKV1"
REAL_BYTES = 4              # modeled width of one full-precision value
FRAME_MAP_BYTES = 4         # per-token frame index
LAYER_METADATA_BYTES = 32   # magic + 7-field header


@dataclass(frozen=True)
class PruneSelection:
    """Ascending token indices to retain, split into first/middle/current segments.

    The first-frame prefix [0, t_first) and the current-frame suffix
    [current_start, total_tokens) must be present in full; only middle
    tokens are optional. Segments are disjoint by construction: pruning
    triggers only over budget, which implies at least two distinct frames,
    so the current frame can never also be the first frame here.
    """

    keep_indices: np.ndarray
    t_first: int
    current_start: int
    total_tokens: int

    def __post_init__(self):
        keep = np.asarray(self.keep_indices, dtype=np.int64)
        object.__setattr__(self, "keep_indices", keep)
        if keep.ndim != 1:
            raise DimensionError(f"keep_indices must be 1-D, got shape {keep.shape}")
        if not 0 <= self.t_first <= self.current_start <= self.total_tokens:
            raise InvariantViolationError(
                f"inconsistent segment boundaries: t_first={self.t_first}, "
                f"current_start={self.current_start}, total={self.total_tokens}"
            )
        if keep.size:
            if keep[0] < 0 or keep[-1] >= self.total_tokens:
                raise InvariantViolationError("keep index out of range")
            if (np.diff(keep) <= 0).any():
                raise InvariantViolationError("keep_indices must be strictly ascending")
        n_current = self.total_tokens - self.current_start
        if keep.size < self.t_first + n_current:
            raise InvariantViolationError("selection too small to hold protected frames")
        if not np.array_equal(keep[: self.t_first], np.arange(self.t_first)):
            raise InvariantViolationError("selection drops first-frame tokens")
        if n_current and not np.array_equal(
            keep[keep.size - n_current:], np.arange(self.current_start, self.total_tokens)
        ):
            raise InvariantViolationError("selection drops current-frame tokens")

    @property
    def middle_indices(self) -> np.ndarray:
        n_current = self.total_tokens - self.current_start
        return self.keep_indices[self.t_first: self.keep_indices.size - n_current]

    @classmethod
    def keep_all(cls, t_first: int, current_start: int, total_tokens: int) -> "PruneSelection":
        return cls(np.arange(total_tokens), t_first, current_start, total_tokens)


class KVCacheLayer:
    """Bounded KV store for one temporal-attention layer (single writer)."""

    def __init__(self, heads: int, d_head: int, budget: int):
        if heads < 1 or d_head < 1 or budget < 1:
            raise ParameterError("heads, d_head and budget must all be >= 1")
        self.heads = heads
        self.d_head = d_head
        self.budget = budget
        self.t_first = 0
        self.token_frame_map = np.zeros(0, dtype=np.int64)
        self._k_quant: QuantizedBlockSet | None = None
        self._v_quant: QuantizedBlockSet | None = None
        self._k_tail = np.zeros((heads, 0, d_head))
        self._v_tail = np.zeros((heads, 0, d_head))

    @property
    def total_tokens(self) -> int:
        quant = self._k_quant.token_count if self._k_quant is not None else 0
        return quant + self._k_tail.shape[1]

    @property
    def is_quantized(self) -> bool:
        return self._k_quant is not None and self._k_tail.shape[1] == 0

    def current_frame_start(self) -> int:
        """Index of the first token belonging to the newest frame."""
        if self.total_tokens == 0:
            raise EmptyCacheError("cache layer holds no tokens")
        return int(np.searchsorted(self.token_frame_map, self.token_frame_map[-1]))

    def _check_tensor(self, x, name: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.heads or x.shape[2] != self.d_head:
            raise DimensionError(
                f"{name} shape {x.shape} incompatible with "
                f"(heads={self.heads}, *, d_head={self.d_head})"
            )
        return x

    def append(self, K_t, V_t, frame: int) -> None:
        """Add one frame's keys/values; rows stay full-precision until quantize_cache."""
        K_t = self._check_tensor(K_t, "K_t")
        V_t = self._check_tensor(V_t, "V_t")
        if K_t.shape[1] != V_t.shape[1]:
            raise DimensionError(
                f"K_t has {K_t.shape[1]} tokens but V_t has {V_t.shape[1]}"
            )
        n = K_t.shape[1]
        if n == 0:
            raise ParameterError("cannot append an empty frame")
        if self.token_frame_map.size and frame <= self.token_frame_map[-1]:
            raise ProtocolError(
                f"frame {frame} appended after frame {int(self.token_frame_map[-1])}"
            )
        if self.total_tokens == 0:
            self.t_first = n
        self._k_tail = np.concatenate([self._k_tail, K_t], axis=1)
        self._v_tail = np.concatenate([self._v_tail, V_t], axis=1)
        self.token_frame_map = np.concatenate(
            [self.token_frame_map, np.full(n, frame, dtype=np.int64)]
        )

    def read_full_precision(self):
        """Dequantized (K, V) over all retained tokens, in stored order.

        May return read-only views aliasing internal storage (internal
        arrays are only ever rebound, never written in place).
        """
        if self.total_tokens == 0:
            raise EmptyCacheError("cache layer holds no tokens")
        return self._materialize()

    @staticmethod
    def _frozen(arr: np.ndarray) -> np.ndarray:
        view = arr.view()
        view.flags.writeable = False
        return view

    def _materialize(self):
        k_parts, v_parts = [], []
        if self._k_quant is not None:
            k_parts.append(self._k_quant.dequantize())
            v_parts.append(self._v_quant.dequantize())
        if self._k_tail.shape[1]:
            k_parts.append(self._k_tail)
            v_parts.append(self._v_tail)
        if not k_parts:
            empty = np.zeros((self.heads, 0, self.d_head))
            return empty, empty.copy()
        if len(k_parts) == 1:
            return self._frozen(k_parts[0]), self._frozen(v_parts[0])
        return np.concatenate(k_parts, axis=1), np.concatenate(v_parts, axis=1)

    def gather(self, sel: PruneSelection) -> None:
        """Keep exactly the selected token rows, synchronously in K and V."""
        T = self.total_tokens
        if T == 0:
            raise EmptyCacheError("cache layer holds no tokens")
        if sel.total_tokens != T:
            raise InvariantViolationError(
                f"selection built for {sel.total_tokens} tokens, cache holds {T}"
            )
        if sel.t_first != self.t_first:
            raise InvariantViolationError(
                f"selection t_first {sel.t_first} != cache t_first {self.t_first}"
            )
        if sel.current_start != self.current_frame_start():
            raise InvariantViolationError(
                f"selection current_start {sel.current_start} != "
                f"cache current frame start {self.current_frame_start()}"
            )
        K, V = self._materialize()
        keep = sel.keep_indices
        self._k_quant = None
        self._v_quant = None
        self._k_tail = np.ascontiguousarray(K[:, keep, :])
        self._v_tail = np.ascontiguousarray(V[:, keep, :])
        self.token_frame_map = self.token_frame_map[keep]

    def quantize_cache(self, bits: int, group_size: int) -> None:
        """Re-quantize the whole store: keys per-channel, values per-token."""
        if self.total_tokens == 0:
            raise EmptyCacheError("cache layer holds no tokens")
        K, V = self._materialize()
        self._k_quant = quantize_tensor(K, "channel", group_size, bits)
        self._v_quant = quantize_tensor(V, "token", group_size, bits)
        self._k_tail = np.zeros((self.heads, 0, self.d_head))
        self._v_tail = np.zeros((self.heads, 0, self.d_head))

    def memory_bytes(self) -> int:
        """Modeled storage footprint: codes + group params + map + header."""
        total = LAYER_METADATA_BYTES + FRAME_MAP_BYTES * self.total_tokens
        for quant in (self._k_quant, self._v_quant):
            if quant is not None:
                total += quant.storage_bytes
        total += (self._k_tail.size + self._v_tail.size) * REAL_BYTES
        return total

    # -- snapshot serialization ------------------------------------------------

    def snapshot_bytes(self) -> bytes:
        """Self-describing binary snapshot (magic "XKV1", little-endian).

        A fully quantized layer keeps its packed codes; anything else is
        written full-precision (float64). Header fields: heads, d_head,
        bits, group_size, tokens, t_first, budget (bits == 0 marks a
        full-precision snapshot).
        """
        buf = io.BytesIO()
        quantized = self.is_quantized and self.total_tokens > 0
        bits = self._k_quant.bit_width if quantized else 0
        group = self._k_quant.group_size if quantized else 0
        buf.write(SNAPSHOT_MAGIC)
        buf.write(struct.pack(
            "<7I", self.heads, self.d_head, bits, group,
            self.total_tokens, self.t_first, self.budget,
        ))
        buf.write(self.token_frame_map.astype("<u4").tobytes())
        if quantized:
            for quant in (self._k_quant, self._v_quant):
                buf.write(struct.pack("<I", quant.n_groups))
                buf.write(quant.scales.astype("<f4").tobytes())
                buf.write(quant.zero_points.astype("<i8").tobytes())
                buf.write(struct.pack("<I", quant.code_bytes))
                buf.write(quant.codes.tobytes())
        elif self.total_tokens:
            K, V = self._materialize()
            buf.write(K.astype("<f8").tobytes())
            buf.write(V.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_snapshot_bytes(cls, data: bytes) -> "KVCacheLayer":
        buf = io.BytesIO(data)
        magic = buf.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise CorruptionError(f"bad snapshot magic {magic!r}")
        heads, d_head, bits, group, tokens, t_first, budget = struct.unpack(
            "<7I", buf.read(28)
        )
        layer = cls(heads=heads, d_head=d_head, budget=budget)
        layer.t_first = t_first
        layer.token_frame_map = np.frombuffer(
            buf.read(4 * tokens), dtype="<u4"
        ).astype(np.int64)
        if tokens == 0:
            return layer
        shape = (heads, tokens, d_head)
        if bits == 0:
            count = heads * tokens * d_head
            layer._k_tail = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
            layer._v_tail = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
            return layer
        for axis, attr in (("channel", "_k_quant"), ("token", "_v_quant")):
            (n_groups,) = struct.unpack("<I", buf.read(4))
            span = tokens if axis == "channel" else d_head
            n_lines = heads * d_head if axis == "channel" else heads * tokens
            per_line = -(-span // group)
            if n_groups != n_lines * per_line:
                raise CorruptionError(
                    f"snapshot group count {n_groups} != expected {n_lines * per_line}"
                )
            scales = np.frombuffer(buf.read(4 * n_groups), dtype="<f4")
            zeros = np.frombuffer(buf.read(8 * n_groups), dtype="<i8")
            (code_bytes,) = struct.unpack("<I", buf.read(4))
            codes = np.frombuffer(buf.read(code_bytes), dtype=np.uint8)
            setattr(layer, attr, QuantizedBlockSet(
                axis=axis, group_size=group, bit_width=bits, shape=shape,
                scales=scales.reshape(n_lines, per_line).copy(),
                zero_points=zeros.reshape(n_lines, per_line).copy(),
                codes=codes.copy(),
            ))
        return layer

    def save_snapshot(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.snapshot_bytes())

    @classmethod
    def load_snapshot(cls, path) -> "KVCacheLayer":
        with open(path, "rb") as fh:
            return cls.from_snapshot_bytes(fh.read())
