"""Command-line front door: bench runs, quantization-error analysis, sparsity dumps.

Exit codes: 0 success, 1 usage (bad flags, bad override keys, bad values),
2 infeasible budget, 3 I/O failure. Config precedence: file values, then
the XKV_SEED environment variable, then repeated --set key=value overrides.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .attention import project_qkv
from .bench import MODES, emit_metrics, gen_frames, layer_weights, run_modes, run_stream
from .config import StreamConfig, apply_overrides, load_config
from .errors import BudgetInfeasibleError, ParameterError, XKVError
from .quantization import mse_report, write_mse_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG_INFEASIBLE = 2
EXIT_IO = 3

log = logging.getLogger("xkv")


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    infeasible configs, so remap usage failures to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="TOML or JSON config file (defaults apply if omitted)")
    parser.add_argument("--out", metavar="PATH", required=True,
                        help="output file path")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override a config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xkv",
                     description="Bounded KV-cache streaming attention benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", parents=[], help="run stream benchmark modes")
    _add_common(bench)
    bench.add_argument("--modes", default=",".join(MODES),
                       help=f"comma-separated subset of {{{','.join(MODES)}}}")
    bench.add_argument("--frames", type=int, metavar="N",
                       help="shorthand for --set frames=N")
    bench.set_defaults(func=cmd_bench)

    quant = sub.add_parser("quant-error",
                           help="per-axis quantization MSE on synthetic K/V")
    _add_common(quant)
    quant.add_argument("--bits", default="2,4",
                       help="comma-separated bit widths (each in [2, 8])")
    quant.set_defaults(func=cmd_quant_error)

    dump = sub.add_parser("sparsity-dump",
                          help="dump one step's pruning score matrix as CSV")
    _add_common(dump)
    dump.add_argument("--layer", type=int, default=0, metavar="N")
    dump.add_argument("--frame", type=int, required=True, metavar="N",
                      help="1-based frame index at which to capture scores")
    dump.set_defaults(func=cmd_sparsity_dump)
    return parser


def _resolve_config(args) -> StreamConfig:
    config = load_config(args.config) if args.config else StreamConfig()
    env_seed = os.environ.get("XKV_SEED")
    if env_seed is not None:
        try:
            config = config.replace(seed=int(env_seed))
        except ValueError:
            raise ParameterError(f"XKV_SEED must be an integer, got {env_seed!r}") from None
    pairs = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ParameterError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key] = value
    if getattr(args, "frames", None) is not None:
        pairs["frames"] = str(args.frames)
    return apply_overrides(config, pairs) if pairs else config


def _mode_path(out: Path, mode: str) -> Path:
    return out.with_name(f"{out.stem}_{mode}{out.suffix}")


def cmd_bench(config: StreamConfig, args) -> int:
    modes = list(dict.fromkeys(m.strip() for m in args.modes.split(",") if m.strip()))
    if not modes:
        raise ParameterError("--modes must name at least one mode")
    for mode in modes:
        if mode not in MODES:
            raise ParameterError(f"unknown mode {mode!r}; choose from {MODES}")
    out = Path(args.out)
    fmt = "json" if out.suffix.lower() == ".json" else "csv"
    results = run_modes(config, modes)
    for mode in modes:
        result = results[mode]
        log.info("mode=%s stream sha256=%s", mode, result.stream_sha256)
        path = _mode_path(out, mode)
        emit_metrics(result.metrics, fmt, path)
        log.info("mode=%s wrote %s", mode, path)
    return EXIT_OK


def cmd_quant_error(config: StreamConfig, args) -> int:
    try:
        bits = [int(b) for b in args.bits.split(",") if b.strip()]
    except ValueError:
        raise ParameterError(f"--bits expects integers, got {args.bits!r}") from None
    if not bits:
        raise ParameterError("--bits must name at least one bit width")
    for b in bits:
        if not 2 <= b <= 8:
            raise ParameterError(f"bit width must be in [2, 8], got {b}")

    # Enough frames that channel-axis lines hold several full groups.
    n_frames = max(1, math.ceil(4 * config.group_size / config.tokens_per_frame))
    sample = config.replace(frames=n_frames)
    weights = layer_weights(sample)[0]
    k_parts, v_parts = [], []
    for frame in gen_frames(sample):
        _, K, V = project_qkv(frame, weights)
        k_parts.append(K)
        v_parts.append(V)
    K = np.concatenate(k_parts, axis=1)
    V = np.concatenate(v_parts, axis=1)
    rows = mse_report(K, V, bits, config.group_size)
    write_mse_csv(rows, args.out)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return EXIT_OK


def cmd_sparsity_dump(config: StreamConfig, args) -> int:
    if not 0 <= args.layer < config.layers:
        raise ParameterError(f"--layer must be in [0, {config.layers}), got {args.layer}")
    if not 1 <= args.frame <= config.frames:
        raise ParameterError(
            f"--frame must be in [1, {config.frames}], got {args.frame}"
        )
    captured = []

    def sink(layer_idx, frame_index, matrix):
        if layer_idx == args.layer and frame_index == args.frame:
            captured.append(matrix)

    run_stream(config.replace(frames=args.frame), "pruned", score_sink=sink)
    with open(args.out, "w") as fh:
        if not captured:
            fh.write("# no prunable segment\n")
        else:
            matrix = captured[0]
            for row in matrix:
                fh.write(",".join(repr(x) for x in row.tolist()) + "\n")
    log.info("wrote %s", args.out)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = _resolve_config(args)
        return args.func(config, args)
    except BudgetInfeasibleError as exc:
        sys.stderr.write(f"xkv: infeasible config: {exc}\n")
        return EXIT_CONFIG_INFEASIBLE
    except OSError as exc:
        sys.stderr.write(f"xkv: I/O error: {exc}\n")
        return EXIT_IO
    except XKVError as exc:
        sys.stderr.write(f"xkv: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
