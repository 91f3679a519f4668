"""Asymmetric uniform group quantization with dimension-adaptive axes.

Keys are quantized per-channel (each group spans consecutive tokens within
one head/channel line, so one hot channel cannot inflate the scale of its
neighbours); values are quantized per-token (groups span consecutive
channels within one head/token line). Codes are unsigned b-bit integers
packed little-endian within bytes; every group carries a float32 scale and
an int64 zero-point.

Rounding is half-away-from-zero throughout. A degenerate range
(x_max == x_min) floors the scale at EPS_SCALE instead of special-casing
zero scale; zero-points are stored exactly as int64 because repeated
quantize/dequantize cycles can collapse a group to a constant whose
zero-point is huge (|c| / EPS_SCALE).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, ParameterError

EPS_SCALE = 1e-8


GROUP_AXES = ("channel", "token")


def round_half_away(x):
    """Round to nearest integer, halves away from zero (element-wise)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and bit-width for one group."""

    scale: float
    zero_point: int
    bit_width: int

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise ParameterError(f"bit width must be in [2, 8], got {self.bit_width}")
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")

    @property
    def max_code(self) -> int:
        return (1 << self.bit_width) - 1


def quant_params(x_min: float, x_max: float, b: int) -> QuantParams:
    """Derive scale and zero-point from a group's min/max range.

    scale = (x_max - x_min) / (2^b - 1), floored at EPS_SCALE;
    zero_point = round(-x_min / scale). The zero-point is kept exact
    (unclamped) so constant groups reconstruct to within EPS_SCALE * 2^b;
    for any group whose range spans zero it lands in [0, 2^b - 1] anyway.
    """
    if not 2 <= b <= 8:
        raise ParameterError(f"bit width must be in [2, 8], got {b}")
    if x_min > x_max:
        raise ParameterError(f"x_min {x_min} > x_max {x_max}")
    s = max((x_max - x_min) / ((1 << b) - 1), EPS_SCALE)
    z = float(round_half_away(-x_min / s))
    return QuantParams(scale=s, zero_point=int(z), bit_width=b)


def quantize_group(x, p: QuantParams) -> np.ndarray:
    """Map reals onto the b-bit code grid: clamp(round(x/s) + z, 0, 2^b - 1)."""
    x = np.asarray(x, dtype=np.float64)
    pre = round_half_away(x / p.scale) + p.zero_point
    return np.clip(pre, 0, p.max_code).astype(np.uint8)


def dequantize_group(codes, p: QuantParams) -> np.ndarray:
    """Reconstruct reals from codes: (code - z) * s."""
    codes = np.asarray(codes)
    if codes.size and (codes.astype(np.int64).max() > p.max_code or codes.astype(np.int64).min() < 0):
        raise CorruptionError(f"code outside [0, {p.max_code}] for bit width {p.bit_width}")
    return (codes.astype(np.float64) - p.zero_point) * p.scale


def pack_codes(codes: np.ndarray, b: int) -> np.ndarray:
    """Pack b-bit codes into bytes, little-endian bit order within each byte."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    bits = np.unpackbits(codes[:, None], axis=1, bitorder="little")[:, :b]
    return np.packbits(bits.ravel(), bitorder="little")


def unpack_codes(packed: np.ndarray, b: int, n: int) -> np.ndarray:
    """Inverse of pack_codes: recover n codes from the packed byte stream."""
    packed = np.asarray(packed, dtype=np.uint8)
    bits = np.unpackbits(packed, bitorder="little")[: n * b].reshape(n, b)
    weights = (1 << np.arange(b, dtype=np.uint8)).astype(np.uint8)
    return (bits * weights).sum(axis=1).astype(np.uint8)


@dataclass
class QuantizedBlockSet:
    """Packed codes plus per-group parameters for one H x T x C tensor.

    Grouping runs along the token dimension for axis="channel" (one line
    per head/channel pair) and along the channel dimension for
    axis="token" (one line per head/token pair). Lines are laid out
    head-major; groups are consecutive spans of group_size within a line,
    the last one possibly short. scales/zero_points have shape
    (n_lines, groups_per_line); codes are packed line-major in logical
    order.
    """

    axis: str
    group_size: int
    bit_width: int
    shape: tuple  # (H, T, C)
    scales: np.ndarray  # float32 (n_lines, groups_per_line)
    zero_points: np.ndarray  # int64, same shape as scales
    codes: np.ndarray  # packed uint8 bytes
    clamp_count: int = 0

    SCALE_BYTES = 4
    ZERO_POINT_BYTES = 8

    @property
    def token_count(self) -> int:
        return self.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.scales.size)

    @property
    def code_bytes(self) -> int:
        return int(self.codes.nbytes)

    @property
    def param_bytes(self) -> int:
        return self.n_groups * (self.SCALE_BYTES + self.ZERO_POINT_BYTES)

    @property
    def storage_bytes(self) -> int:
        return self.code_bytes + self.param_bytes

    def dequantize(self) -> np.ndarray:
        """Full-precision reconstruction, shape (H, T, C)."""
        h, t, c = self.shape
        span = t if self.axis == "channel" else c
        n_lines = h * c if self.axis == "channel" else h * t
        codes = unpack_codes(self.codes, self.bit_width, n_lines * span)
        lines = codes.reshape(n_lines, span).astype(np.float64)
        reps = _group_sizes(span, self.group_size)
        s = np.repeat(self.scales.astype(np.float64), reps, axis=1)
        z = np.repeat(self.zero_points.astype(np.float64), reps, axis=1)
        vals = (lines - z) * s
        if self.axis == "channel":
            return vals.reshape(h, c, t).transpose(0, 2, 1)
        return vals.reshape(h, t, c)


def _group_sizes(span: int, g: int) -> np.ndarray:
    starts = np.arange(0, span, g)
    return np.minimum(starts + g, span) - starts


def _as_lines(x: np.ndarray, axis: str) -> np.ndarray:
    h, t, c = x.shape
    if axis == "channel":
        return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(h * c, t)
    return x.reshape(h * t, c)


def quantize_tensor(x, axis: str, G: int, b: int) -> QuantizedBlockSet:
    """Group-quantize a (H, T, C) tensor along the requested axis."""
    if axis not in GROUP_AXES:
        raise ParameterError(f"axis must be one of {GROUP_AXES}, got {axis!r}")
    if G < 1:
        raise ParameterError(f"group size must be >= 1, got {G}")
    if not 2 <= b <= 8:
        raise ParameterError(f"bit width must be in [2, 8], got {b}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ParameterError(f"expected a (head, token, channel) tensor, got shape {x.shape}")

    lines = _as_lines(x, axis)
    span = lines.shape[1]
    max_code = (1 << b) - 1

    if span == 0:
        empty = np.zeros((lines.shape[0], 0))
        return QuantizedBlockSet(
            axis=axis, group_size=G, bit_width=b, shape=x.shape,
            scales=empty.astype(np.float32), zero_points=empty.astype(np.int64),
            codes=np.zeros(0, dtype=np.uint8),
        )

    starts = np.arange(0, span, G)
    gmin = np.minimum.reduceat(lines, starts, axis=1)
    gmax = np.maximum.reduceat(lines, starts, axis=1)
    scales32 = np.maximum((gmax - gmin) / max_code, EPS_SCALE).astype(np.float32)
    scales = scales32.astype(np.float64)
    zf = round_half_away(-gmin / scales)
    zeros = zf.astype(np.int64)

    reps = _group_sizes(span, G)
    s_elem = np.repeat(scales, reps, axis=1)
    z_elem = np.repeat(zf, reps, axis=1)
    pre = round_half_away(lines / s_elem) + z_elem
    clamped = int(np.count_nonzero((pre < 0) | (pre > max_code)))
    codes = np.clip(pre, 0, max_code).astype(np.uint8)

    return QuantizedBlockSet(
        axis=axis, group_size=G, bit_width=b, shape=x.shape,
        scales=scales32, zero_points=zeros,
        codes=pack_codes(codes.ravel(), b), clamp_count=clamped,
    )


def mse_report(K, V, bits, G: int) -> list:
    """Mean squared reconstruction error for K/V under both grouping axes.

    Returns one row dict per (tensor, axis, bit-width) combination, in
    that nesting order, with keys: tensor, axis, bits, group_size, mse.
    """
    rows = []
    for name, tensor in (("K", np.asarray(K, dtype=np.float64)),
                         ("V", np.asarray(V, dtype=np.float64))):
        for axis in ("token", "channel"):
            for b in bits:
                blocks = quantize_tensor(tensor, axis, G, b)
                err = blocks.dequantize() - tensor
                rows.append({
                    "tensor": name,
                    "axis": axis,
                    "bits": int(b),
                    "group_size": int(G),
                    "mse": float(np.mean(err * err)),
                })
    return rows


def write_mse_csv(rows, path) -> None:
    """Emit mse_report rows as CSV with a fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tensor", "axis", "bits", "group_size", "mse"])
        for row in rows:
            writer.writerow([row["tensor"], row["axis"], row["bits"],
                             row["group_size"], repr(row["mse"])])
