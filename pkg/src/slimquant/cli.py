"""Command-line entry points.

Subcommands: gen (synthetic fixtures), quantize, eval, inspect, matmul,
bench. Reports are JSON, per-channel series are CSV. The quantization
path is fully deterministic; --seed only drives fixture generation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections import Counter

import numpy as np

from .errors import IoFailure, ShapeMismatch, SlimQuantError
from .kernel import bench, dense_reference, packed_matmul
from .packfmt import pack, packed_size_report, read_packed, unpack
from .pipeline import PipelineConfig, proxy_loss, quantize_layer, reconstruct
from .quant_core import block_mse
from .salience import (
    accumulate_hessian,
    damp_and_invert,
    salience_map,
    salient_mask_3sigma,
)
from .sba import KlConfig, output_kl, stride_subsample
from .sqc import SqcConfig
from .tensor_store import load_calibration, read_tensor, write_tensor


def _default_threads() -> int:
    env = os.environ.get("SLIMQ_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _load_weights(path: str) -> np.ndarray:
    w = read_tensor(path)
    if w.ndim != 2:
        raise ShapeMismatch(f"{path}: weights must be 2-D, got {w.ndim}-D")
    return w


def _write_outputs(outputs: list[tuple[str, bytes | str]]) -> None:
    """Write all outputs, removing everything on the first failure so a
    failed run never leaves partial artifacts behind."""
    written = []
    try:
        for path, payload in outputs:
            mode = "wb" if isinstance(payload, bytes) else "w"
            with open(path, mode) as fh:
                fh.write(payload)
            written.append(path)
    except BaseException as exc:
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass
        if isinstance(exc, OSError):
            raise IoFailure(f"cannot write outputs: {exc}") from exc
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- gen


def cmd_gen_weights(args) -> int:
    rng = np.random.default_rng(args.seed)
    w = rng.standard_normal((args.rows, args.cols)) * args.amplitude
    write_tensor(args.out, w.astype(np.float32))
    print(f"wrote {args.out} ({args.rows}x{args.cols})")
    return 0


def _parse_cluster(text: str) -> tuple[int, int, float]:
    try:
        start, width, scale = text.split(":")
        return int(start), int(width), float(scale)
    except ValueError as exc:
        raise SlimQuantError(f"bad --cluster value {text!r}, want START:WIDTH:SCALE") from exc


def cmd_gen_calib(args) -> int:
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.samples, args.tokens, args.channels))
    if args.outlier_channel is not None:
        x[..., args.outlier_channel] *= args.outlier_scale
    for item in args.cluster or []:
        start, width, scale = _parse_cluster(item)
        x[..., start : start + width] *= scale
    write_tensor(args.out, x.astype(np.float32))
    print(f"wrote {args.out} ({args.samples}x{args.tokens}x{args.channels})")
    return 0


# ----------------------------------------------------------- quantize


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        beta=args.group_size,
        bits=args.bits,
        percdamp=args.percdamp,
        sba_enabled=not args.no_sba,
        sqc_enabled=not args.no_sqc,
        compensation_enabled=not args.no_compensation,
        binarize_1bit=args.binarize_1bit,
        inner_columnwise=args.inner_columnwise,
        threads=args.threads,
        kl_cfg=KlConfig(
            temperature=args.kl_temperature,
            epsilon=args.kl_epsilon,
            max_tokens=args.kl_max_tokens,
        ),
        sqc_cfg=SqcConfig(lambda_gamma=args.gamma_lambda, n_gamma=args.gamma_steps),
    )


def cmd_quantize(args) -> int:
    start = time.perf_counter()
    w = _load_weights(args.weights)
    calib = load_calibration(args.calib)
    cfg = _pipeline_config(args)
    result = quantize_layer(w, calib, cfg)
    n, m = w.shape
    pm = pack(result, n, m, cfg.beta, target_bits=cfg.bits)
    blob = pm.to_bytes()
    size = packed_size_report(pm)

    gamma_hist = Counter(repr(float(g)) for g in result.gammas)
    report = {
        "config": {
            "bits": cfg.bits,
            "group_size": cfg.beta,
            "percdamp": cfg.percdamp,
            "sba": cfg.sba_enabled,
            "sqc": cfg.sqc_enabled,
            "compensation": cfg.compensation_enabled,
            "binarize_1bit": cfg.binarize_1bit,
            "inner_columnwise": cfg.inner_columnwise,
            "gamma_lambda": cfg.sqc_cfg.lambda_gamma,
            "gamma_steps": cfg.sqc_cfg.n_gamma,
            "kl_temperature": cfg.kl_cfg.temperature,
            "kl_epsilon": cfg.kl_cfg.epsilon,
            "kl_max_tokens": cfg.kl_cfg.max_tokens,
            "seed": args.seed,
            "threads": cfg.threads,
        },
        "shape": {"rows": n, "channels": m, "groups": m // cfg.beta},
        "plan": {
            "bits": result.plan.bits.tolist(),
            "p_star": result.plan.p_star,
            "evaluations": result.plan.evaluations,
            "kl_curve": result.plan.kl_curve.tolist(),
        },
        "gammas": {
            "per_group": result.gammas.tolist(),
            "histogram": dict(sorted(gamma_hist.items())),
        },
        "metrics": {
            "proxy_loss": result.proxy_loss,
            "recon_mse": result.recon_mse,
            "recon_kl": result.recon_kl,
            "bits_per_weight": size.bits_per_weight,
            "payload_bits": size.payload_bits,
            "padding_bits": size.padding_bits,
            "metadata_bits": size.metadata_bits,
            "file_bytes": len(blob),
        },
        "timing": {"total_s": time.perf_counter() - start},
    }

    outputs: list[tuple[str, bytes | str]] = [(args.out, blob)]
    report_path = args.report or args.out + ".json"
    outputs.append((report_path, _json(report)))
    if args.emit_curve:
        lines = ["p,kl"]
        lines += [f"{p},{float(kl)!r}" for p, kl in enumerate(result.plan.kl_curve)]
        outputs.append((args.emit_curve, "\n".join(lines) + "\n"))
    _write_outputs(outputs)
    print(f"wrote {args.out} ({size.bits_per_weight:.3f} bits/weight), report {report_path}")
    return 0


# --------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    pm = read_packed(args.model)
    w = _load_weights(args.weights)
    calib = load_calibration(args.calib)
    if w.shape != (pm.n, pm.m):
        raise ShapeMismatch(f"weights {w.shape} do not match packed model {(pm.n, pm.m)}")
    blocks, widths = unpack(pm)
    recon = reconstruct(blocks)
    hs = damp_and_invert(accumulate_hessian(calib), args.percdamp)
    kl_cfg = KlConfig(
        temperature=args.kl_temperature,
        epsilon=args.kl_epsilon,
        max_tokens=args.kl_max_tokens,
    )
    xs = stride_subsample(calib.stacked(), kl_cfg.max_tokens)
    size = packed_size_report(pm)
    hist = Counter(int(b) for b in widths)
    report = {
        "shape": {"rows": pm.n, "channels": pm.m, "groups": pm.k},
        "metrics": {
            "recon_mse": block_mse(w, recon),
            "proxy_loss": proxy_loss(w, recon, hs),
            "recon_kl": output_kl(xs, w, recon, kl_cfg),
            "bits_per_weight": size.bits_per_weight,
        },
        "bit_histogram": {str(b): hist[b] for b in sorted(hist)},
    }
    sys.stdout.write(_json(report))
    return 0


# ------------------------------------------------------------ inspect


def cmd_inspect(args) -> int:
    w = _load_weights(args.weights)
    calib = load_calibration(args.calib)
    hs = damp_and_invert(accumulate_hessian(calib), args.percdamp)
    sal = salience_map(w, hs, args.group_size)
    k = w.shape[1] // args.group_size
    lines = ["kind,index,value"]
    lines += [f"channel_mean,{j},{float(v)!r}" for j, v in enumerate(sal.channel_mean)]
    lines += [f"group_mean,{g},{float(v)!r}" for g, v in enumerate(sal.group_mean)]
    for g in range(k):
        block = sal.delta[:, g * args.group_size : (g + 1) * args.group_size]
        density = float(salient_mask_3sigma(block).mean())
        lines.append(f"mask_density,{g},{density!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_outputs([(args.out, text)])
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------- matmul / bench


def _load_activations(path: str) -> np.ndarray:
    """Read a 2-D activation matrix; 3-D sample batches flatten to rows."""
    x = read_tensor(path)
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    if x.ndim != 2:
        raise ShapeMismatch(f"{path}: input must be 2-D or 3-D, got {x.ndim}-D")
    return x


def cmd_matmul(args) -> int:
    pm = read_packed(args.model)
    x = _load_activations(args.input)
    y = dense_reference(pm, x) if args.dense else packed_matmul(pm, x)
    write_tensor(args.out, y)
    print(f"wrote {args.out} ({y.shape[0]}x{y.shape[1]})")
    return 0


def cmd_bench(args) -> int:
    pm = read_packed(args.model)
    x = _load_activations(args.input)
    sys.stdout.write(_json(bench(pm, x, repeats=args.repeats)))
    return 0


# ------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimquant",
        description="Mixed-precision weight quantization with salience-driven "
        "bit allocation, range calibration and error compensation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic fixture tensors")
    gen_sub = gen.add_subparsers(dest="kind", required=True)
    gw = gen_sub.add_parser("weights", help="random weight matrix")
    gw.add_argument("--rows", type=int, required=True)
    gw.add_argument("--cols", type=int, required=True)
    gw.add_argument("--amplitude", type=float, default=1.0)
    gw.add_argument("--seed", type=int, default=0)
    gw.add_argument("--out", required=True)
    gw.set_defaults(func=cmd_gen_weights)
    gc = gen_sub.add_parser("calib", help="random calibration activations")
    gc.add_argument("--samples", type=int, default=1)
    gc.add_argument("--tokens", type=int, required=True)
    gc.add_argument("--channels", type=int, required=True)
    gc.add_argument("--outlier-channel", type=int, default=None)
    gc.add_argument("--outlier-scale", type=float, default=100.0)
    gc.add_argument(
        "--cluster",
        action="append",
        metavar="START:WIDTH:SCALE",
        help="scale a span of adjacent channels; repeatable",
    )
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", required=True)
    gc.set_defaults(func=cmd_gen_calib)

    q = sub.add_parser("quantize", help="quantize a weight matrix")
    q.add_argument("--weights", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--report", default=None, help="report path, default OUT.json")
    q.add_argument("--bits", type=int, choices=(2, 3), default=2)
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--percdamp", type=float, default=0.01)
    q.add_argument("--no-sba", action="store_true")
    q.add_argument("--no-sqc", action="store_true")
    q.add_argument("--no-compensation", action="store_true")
    q.add_argument("--binarize-1bit", action="store_true")
    q.add_argument("--inner-columnwise", action="store_true")
    q.add_argument("--gamma-lambda", type=float, default=0.1)
    q.add_argument("--gamma-steps", type=int, default=50)
    q.add_argument("--kl-temperature", type=float, default=1.0)
    q.add_argument("--kl-epsilon", type=float, default=1e-8)
    q.add_argument("--kl-max-tokens", type=int, default=4096)
    q.add_argument("--emit-curve", default=None, help="write the (p, KL) search curve as CSV")
    q.add_argument("--seed", type=int, default=0, help="recorded in the report; the run itself is deterministic")
    q.add_argument("--threads", type=int, default=_default_threads())
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="score a packed model against the originals")
    e.add_argument("--model", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--calib", required=True)
    e.add_argument("--percdamp", type=float, default=0.01)
    e.add_argument("--kl-temperature", type=float, default=1.0)
    e.add_argument("--kl-epsilon", type=float, default=1e-8)
    e.add_argument("--kl-max-tokens", type=int, default=4096)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="emit salience series as CSV")
    i.add_argument("--weights", required=True)
    i.add_argument("--calib", required=True)
    i.add_argument("--group-size", type=int, default=128)
    i.add_argument("--percdamp", type=float, default=0.01)
    i.add_argument("--out", default=None, help="CSV path, default stdout")
    i.set_defaults(func=cmd_inspect)

    mm = sub.add_parser("matmul", help="multiply activations through a packed model")
    mm.add_argument("--model", required=True)
    mm.add_argument("--input", required=True)
    mm.add_argument("--out", required=True)
    mm.add_argument("--dense", action="store_true", help="use the dense oracle path")
    mm.set_defaults(func=cmd_matmul)

    b = sub.add_parser("bench", help="time the packed path against the dense path")
    b.add_argument("--model", required=True)
    b.add_argument("--input", required=True)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SlimQuantError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
