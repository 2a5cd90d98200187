"""The ``fractfield`` command.

Every subcommand that writes files also writes a run manifest next to its
primary output (``<output>.manifest``).  ``fractfield rerun --manifest M``
replays the recorded argument vector from the recorded working directory,
which reproduces the outputs bit for bit.

Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .dfrft import frft_3d
from .fca import (
    BRANCHES,
    FcaConfig,
    branch_kernel_names,
    count_branch_params,
    count_flops,
    feature_extractor_shapes,
    init_weights,
)
from .losses import LossConfig
from .metrics import evaluate
from .regopt import RegistrationConfig, register
from .synth import KINDS, synth_pair
from .volume import (
    Volume3D,
    VolumeFormatError,
    _atomic_write,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)
from .warp import load_field, save_field, warp_labels

__all__ = ["main", "build_parser", "slice_dump", "read_manifest", "write_manifest"]

THREADS_ENV = "FRACTFIELD_THREADS"


class UsageError(Exception):
    """Bad flag values that argparse cannot catch on its own."""


# --- argument helpers ------------------------------------------------------

def parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like DxHxW, got '{text}'") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"dims must be three positive integers DxHxW, got '{text}'")
    return dims  # type: ignore[return-value]


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None
    if not all(np.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"values must be finite, got '{text}'")
    return vals


def parse_fraction(text: str) -> Fraction:
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected a number or p/q fraction, got '{text}'") from None
    if not 0 < f <= 1:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1], got {text}")
    return f


def _fmt(x) -> str:
    """Round-trip decimal text for CSV cells."""
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(c) for c in r])
    return buf.getvalue()


def _write_text(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(p, text.encode())


# --- manifest --------------------------------------------------------------

def manifest_path(primary) -> Path:
    return Path(str(primary) + ".manifest")


def write_manifest(path, subcommand: str, argv, config: dict, inputs, outputs,
                   wall_time: float, seed=None) -> None:
    """Plain ``key = value`` lines; values are JSON so they parse back exactly."""
    fields = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "cwd": os.getcwd(),
        "argv": list(argv),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_time": wall_time,
    }
    text = "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in fields.items())
    _write_text(path, text)


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, val = line.partition(" = ")
        if not sep:
            raise VolumeFormatError(f"{path}:{n}: expected 'key = value'")
        try:
            out[key.strip()] = json.loads(val)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"{path}:{n}: bad value for '{key.strip()}' ({exc})") from exc
    if "argv" not in out:
        raise VolumeFormatError(f"{path}: manifest has no argv entry")
    return out


# --- slice dump ------------------------------------------------------------

_AXES = {"z": 0, "y": 1, "x": 2, "0": 0, "1": 1, "2": 2}


def slice_dump(v: Volume3D, axis, index: int, path) -> np.ndarray:
    """Write one slice as an 8-bit binary PGM, min-max scaled; returns the pixels.

    A constant slice maps to 0 everywhere.
    """
    ax = _AXES.get(str(axis).lower())
    if ax is None:
        raise ValueError(f"axis must be one of z, y, x (or 0, 1, 2), got '{axis}'")
    n = v.dims[ax]
    if not 0 <= index < n:
        raise ValueError(f"slice index {index} out of range for axis of length {n}")
    sl = np.take(v.data, index, axis=ax)
    lo, hi = float(sl.min()), float(sl.max())
    if hi > lo:
        pix = np.rint((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros(sl.shape, dtype=np.uint8)
    rows, cols = pix.shape
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(p, f"P5\n{cols} {rows}\n255\n".encode() + pix.tobytes())
    return pix


# --- subcommands -----------------------------------------------------------

def _cmd_frft(args, argv):
    t0 = time.perf_counter()
    v = load_volume(args.input)
    X = frft_3d(v, args.order).data
    mag = np.log1p(np.abs(X)) if args.log else np.abs(X)
    save_volume(Volume3D(mag, v.spacing), args.out_mag)
    outputs = [args.out_mag]
    if args.out_phase:
        save_volume(Volume3D(np.angle(X), v.spacing), args.out_phase)
        outputs.append(args.out_phase)
    write_manifest(manifest_path(args.out_mag), "frft", argv,
                   {"order": args.order, "log": args.log}, [args.input], outputs,
                   time.perf_counter() - t0)


def _cmd_fca_audit(args, argv):
    """Table rows per branch, then one row per feature-extractor tensor from the shape audit."""
    t0 = time.perf_counter()
    rows = []
    for C in args.channels:
        for a in args.alpha:
            strict = (a * C).denominator == 1
            params = count_branch_params(C, a, strict=strict)
            flops = count_flops(C, a, *args.grid, strict=strict) if args.grid else {}
            for name in [b for b, _ in BRANCHES] + ["total"]:
                rows.append(["table", C, a, name, params[name], flops.get(name, ""), "", ""])
            if not strict:
                # fractional channel split: formulas only, no tensors to audit
                continue
            shapes = feature_extractor_shapes(C, FcaConfig(channel_coeff=float(a)))
            ws = init_weights(shapes)
            for name, actual, expected, ok in ws.audit():
                rows.append(["weights", C, a, name, int(np.prod(actual)), "",
                             "x".join(str(d) for d in actual), ok])
            kernel_total = ws.count(branch_kernel_names())
            rows.append(["weights", C, a, "branch_kernels", kernel_total, "", "",
                         kernel_total == params["total"]])
    header = ["section", "channels", "alpha", "name", "params", "flops", "shape", "ok"]
    text = _csv_text(header, rows)
    if args.out:
        _write_text(args.out, text)
        write_manifest(manifest_path(args.out), "fca-audit", argv,
                       {"channels": args.channels, "alpha": [str(a) for a in args.alpha],
                        "grid": list(args.grid) if args.grid else None},
                       [], [args.out], time.perf_counter() - t0)
    else:
        sys.stdout.write(text)


def _cmd_register(args, argv):
    t0 = time.perf_counter()
    if bool(args.moving_labels) != bool(args.out_warped_labels):
        raise UsageError("--moving-labels and --out-warped-labels go together")
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    labels_m = load_labels(args.moving_labels) if args.moving_labels else None
    cfg = RegistrationConfig(
        iterations=args.iters, step_size=args.step, pyramid_levels=args.levels, seed=args.seed,
        loss=LossConfig(window=args.cc_window, lam=args.lam),
    )
    res = register(fixed, moving, cfg)
    save_field(res.field, args.out_field)
    save_volume(res.warped, args.out_warped)
    outputs = [args.out_field, args.out_warped]
    if labels_m is not None:
        save_labels(warp_labels(labels_m, res.field), args.out_warped_labels)
        outputs.append(args.out_warped_labels)
    if args.trace:
        rows = [(r.iteration, r.level, r.total, r.similarity, r.smoothness) for r in res.loss_trace]
        _write_text(args.trace, _csv_text(
            ["iteration", "level", "total", "similarity", "smoothness"], rows))
        outputs.append(args.trace)
    config = {
        "iterations": cfg.iterations, "step_size": cfg.step_size, "beta1": cfg.beta1,
        "beta2": cfg.beta2, "eps_adam": cfg.eps_adam, "pyramid_levels": cfg.pyramid_levels,
        "warmup": cfg.warmup, "window": cfg.loss.window, "lambda": cfg.loss.lam,
        "eps": cfg.loss.eps, "initial_total": res.initial.total,
        "final_total": res.loss_trace[-1].total,
    }
    inputs = [args.fixed, args.moving] + ([args.moving_labels] if labels_m is not None else [])
    write_manifest(manifest_path(args.out_field), "register", argv, config, inputs, outputs,
                   time.perf_counter() - t0, cfg.seed)


def _cmd_synth(args, argv):
    t0 = time.perf_counter()
    mag = args.magnitude
    if args.kind == "translate":
        if len(mag) != 3:
            raise UsageError("translate needs --magnitude as a z,y,x triple")
    elif len(mag) != 1:
        raise UsageError(f"{args.kind} needs a single --magnitude value")
    pair = synth_pair(args.kind, args.dims, mag if len(mag) == 3 else mag[0], seed=args.seed,
                      spacing=args.spacing)
    pre = args.out_prefix
    names = {k: f"{pre}_{k}" for k in ("fixed", "moving", "fixed_labels", "moving_labels", "truth")}
    save_volume(pair.fixed, names["fixed"])
    save_volume(pair.moving, names["moving"])
    save_labels(pair.labels_fixed, names["fixed_labels"])
    save_labels(pair.labels_moving, names["moving_labels"])
    save_field(pair.truth, names["truth"])
    write_manifest(manifest_path(names["fixed"]), "synth", argv,
                   {"kind": args.kind, "dims": list(args.dims), "magnitude": list(mag),
                    "spacing": list(args.spacing)},
                   [], list(names.values()), time.perf_counter() - t0, args.seed)


def _cmd_eval(args, argv):
    t0 = time.perf_counter()
    fixed = load_labels(args.fixed_labels)
    warped = load_labels(args.warped_labels)
    field = load_field(args.field) if args.field else None
    rep = evaluate(fixed, warped, field)
    # one row per label, then a summary row; columns follow the report fields
    header = ["label", "per_label_dsc", "hd95_mm", "overall_dsc", "avg_dsc", "folding_pct",
              "jacobian_std", "note"]
    rows = [(lb, rep.per_label_dsc[lb], rep.hd95_mm[lb], "", "", "", "", "")
            for lb in rep.per_label_dsc]
    note = "; ".join(f"{k}: {v}" for k, v in rep.notes.items())
    rows.append(("all", "", "", rep.overall_dsc, rep.avg_dsc, rep.folding_pct,
                 rep.jacobian_std, note))
    _write_text(args.out, _csv_text(header, rows))
    inputs = [args.fixed_labels, args.warped_labels] + ([args.field] if args.field else [])
    write_manifest(manifest_path(args.out), "eval", argv, {}, inputs, [args.out],
                   time.perf_counter() - t0)


def _cmd_slice_dump(args, argv):
    t0 = time.perf_counter()
    v = load_volume(args.input)
    slice_dump(v, args.axis, args.index, args.out)
    write_manifest(manifest_path(args.out), "slice-dump", argv,
                   {"axis": args.axis, "index": args.index}, [args.input], [args.out],
                   time.perf_counter() - t0)


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def _cmd_rerun(args, argv):
    man = read_manifest(args.manifest)
    rec = man["argv"]
    if rec and rec[0] == "rerun":
        raise UsageError("a manifest cannot replay another rerun")
    cwd = man.get("cwd")
    with _chdir(cwd) if cwd else contextlib.nullcontext():
        status = main(rec)
    if status:
        raise RuntimeError(f"replayed command exited with status {status}")


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fractfield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fractfield {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on worker threads (default: ${THREADS_ENV}, else library default)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("frft", help="3D fractional Fourier transform of a volume")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--order", type=float, required=True)
    s.add_argument("--out-mag", required=True)
    s.add_argument("--out-phase")
    s.add_argument("--log", action="store_true", help="write log(1 + |X|) instead of |X|")
    s.set_defaults(func=_cmd_frft)

    s = sub.add_parser("fca-audit", help="per-branch parameter (and FLOP) accounting as CSV")
    s.add_argument("--channels", type=lambda t: [int(c) for c in t.split(",")], required=True)
    s.add_argument("--alpha", type=lambda t: [parse_fraction(a) for a in t.split(",")],
                   default=[Fraction(1)])
    s.add_argument("--grid", type=parse_dims, help="DxHxW grid for FLOP counts")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=_cmd_fca_audit)

    s = sub.add_parser("register", help="optimize a displacement field")
    s.add_argument("--fixed", required=True)
    s.add_argument("--moving", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--cc-window", type=int, default=9)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--levels", type=int, default=2)
    s.add_argument("--step", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-field", required=True)
    s.add_argument("--out-warped", required=True)
    s.add_argument("--trace")
    s.add_argument("--moving-labels", help="label map to resample with the recovered field")
    s.add_argument("--out-warped-labels")
    s.set_defaults(func=_cmd_register)

    s = sub.add_parser("synth", help="write a synthetic pair with ground truth")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--dims", type=parse_dims, default=(16, 64, 64))
    s.add_argument("--magnitude", type=parse_floats, required=True,
                   help="z,y,x triple for translate; one value for scale and swirl")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--spacing", type=parse_floats, default=(1.0, 1.0, 1.0))
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("eval", help="registration metrics as CSV")
    s.add_argument("--fixed-labels", required=True)
    s.add_argument("--warped-labels", required=True)
    s.add_argument("--field")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("slice-dump", help="write one slice as an 8-bit PGM")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--axis", default="z", choices=sorted(_AXES))
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_slice_dump)

    s = sub.add_parser("rerun", help="replay a command from its manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=_cmd_rerun)
    return p


def _thread_cap(cli_value):
    if cli_value is not None:
        return cli_value
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got '{env}'") from None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        threads = _thread_cap(args.threads)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"fractfield: error: {exc}", file=sys.stderr)
        return 2

    if threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=threads)
    else:
        limiter = contextlib.nullcontext()
    try:
        with limiter:
            args.func(args, argv)
    except UsageError as exc:
        print(f"fractfield {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fractfield {args.command}: missing file: {exc.filename}", file=sys.stderr)
        return 1
    except (VolumeFormatError, ValueError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"fractfield {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
