"""``sinr`` command-line front end.

Every command reads its settings from flags, then from an optional
``--config`` file of ``key = value`` lines, then from built-in defaults.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .codec import (
    CodecConfig, CompressionReport, ContainerError, baseline_bytes, compress_inr, decompress_inr,
    save_checkpoint,
)
from .inr import (
    Activation, ActivationKind, Architecture, NonFiniteError, TrainConfig, default_learning_rate,
    init_network, train, weight_gaussianity,
)
from .signals import (
    ImageSignal, SignalFormatError, _atomic_write, bpp, display_psnr, iou,
    load_signal, psnr, render_inr_image, render_inr_occupancy,
)
from .sparse_coding import BudgetError, CodingError

log = logging.getLogger("sinr")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# Defaults for every option that may also come from a config file.
DEFAULTS = {
    "hidden_layers": 3,
    "width": 128,
    "activation": "sine",
    "omega0": 30.0,
    "sigma": 10.0,
    "pe_levels": 0,
    "epochs": 2000,
    "lr": None,  # per-activation default
    "seed": 0,
    "dtype": "float32",
    "s": "auto",
    "rel_tol": 0.02,
    "k2_factor": "max",
    "bitwidth": 16,
    "master_seed": 0,
    "lossless": False,
    "code_input_layer": False,
    "threshold": 0.5,
}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Argument parsing


def _add_arch(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--hidden-layers", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--activation", choices=["sine", "gaussian", "relu"])
    g.add_argument("--omega0", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--pe-levels", type=int)


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--dtype", choices=["float32", "float64"])


def _add_codec(p, with_s=True):
    g = p.add_argument_group("codec")
    if with_s:
        g.add_argument("--s", help="sparsity per code, or 'auto' to sweep")
    g.add_argument("--rel-tol", type=float)
    g.add_argument("--k2-factor", help="k2 = factor * k1, or 'max' for 65536")
    g.add_argument("--bitwidth", type=int)
    g.add_argument("--master-seed", type=int)
    g.add_argument("--lossless", action="store_const", const=True)
    g.add_argument("--code-input-layer", action="store_const", const=True,
                   help="sparse-code the first layer too instead of storing it raw")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file; flags take precedence")
        return p

    p = command("train", "fit an INR to an image or voxel grid")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="per-epoch loss CSV (default: <output>.loss.csv)")
    _add_arch(p)
    _add_train(p)

    p = command("compress", "checkpoint -> .sinr")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report-csv", help="per-layer report CSV")
    p.add_argument("--reference", help="signal file, used only for the bpp figure")
    _add_codec(p)

    p = command("decompress", ".sinr -> checkpoint")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)

    p = command("eval", "render a model and score it against a reference signal")
    p.add_argument("reference")
    p.add_argument("model", help="checkpoint or .sinr file")
    p.add_argument("-o", "--output", help="metrics CSV (default: stdout)")
    p.add_argument("--threshold", type=float)

    p = command("sweep", "sparsity/error curve of every coded layer")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="sweep CSV (default: stdout)")
    _add_codec(p, with_s=False)

    p = command("diagnose", "weight-distribution moments per layer")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="moments CSV (default: stdout)")

    p = command("pipeline", "train, compress, decompress and evaluate in one go")
    p.add_argument("input")
    p.add_argument("-d", "--workdir", required=True)
    p.add_argument("--threshold", type=float)
    _add_arch(p)
    _add_train(p)
    _add_codec(p)
    return parser


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or key == "lr":
            return float(value)
    except ValueError:
        raise UsageError(f"invalid value for {key}: {value!r}") from None
    return value


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults into one settings dict."""
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    merged = {}
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in file_vals:
            merged[key] = file_vals[key]
        else:
            merged[key] = DEFAULTS[key]
        merged[key] = _coerce(key, merged[key])
    return merged


def arch_from(cfg: dict, signal) -> Architecture:
    if isinstance(signal, ImageSignal):
        a, b = 2, signal.channels
    else:
        a, b = 3, 1
    try:
        kind = ActivationKind[str(cfg["activation"]).upper()]
    except KeyError:
        raise UsageError(f"unknown activation {cfg['activation']!r}") from None
    try:
        act = Activation(kind, cfg["omega0"], cfg["sigma"])
        return Architecture(a, b, cfg["hidden_layers"], cfg["width"], act, cfg["pe_levels"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_config_from(cfg: dict, arch: Architecture) -> TrainConfig:
    lr = cfg["lr"] if cfg["lr"] is not None else default_learning_rate(arch.activation)
    if cfg["dtype"] not in ("float32", "float64"):
        raise UsageError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    try:
        return TrainConfig(epochs=cfg["epochs"], learning_rate=lr, seed=cfg["seed"],
                           dtype=cfg["dtype"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def codec_config_from(cfg: dict, auto_s: bool = False) -> CodecConfig:
    s = cfg["s"]
    if auto_s or str(s).lower() == "auto":
        s = None
    else:
        try:
            s = int(s)
        except ValueError:
            raise UsageError(f"--s must be an integer or 'auto', got {s!r}") from None
        if s < 1:
            raise UsageError("--s must be positive")
    k2f = cfg["k2_factor"]
    if str(k2f).lower() == "max":
        k2f = None
    else:
        try:
            k2f = float(k2f)
        except ValueError:
            raise UsageError(f"--k2-factor must be a number or 'max', got {k2f!r}") from None
        if not k2f > 1:
            raise UsageError("--k2-factor must exceed 1")
    if not 1 <= cfg["bitwidth"] <= 16:
        raise UsageError("--bitwidth must be in [1, 16]")
    if not cfg["rel_tol"] > 0:
        raise UsageError("--rel-tol must be positive")
    if not 0 <= cfg["master_seed"] < 2 ** 64:
        raise UsageError("--master-seed must fit in 64 bits")
    return CodecConfig(s=s, rel_tol=cfg["rel_tol"], k2_factor=k2f, bitwidth=cfg["bitwidth"],
                       master_seed=cfg["master_seed"], lossless=cfg["lossless"],
                       code_input_layer=cfg["code_input_layer"])


# ---------------------------------------------------------------------------
# Helpers


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")


def _read_signal(path: str):
    _require_file(path)
    return load_signal(path)


def _read_model(path: str):
    _require_file(path)
    with open(path, "rb") as fh:
        return decompress_inr(fh.read())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit_csv(path: str | None, header, rows) -> None:
    text = _csv_text(header, rows)
    if path:
        _atomic_write(path, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _fit(signal, arch: Architecture, tcfg: TrainConfig):
    net = init_network(arch, tcfg.seed)
    start = time.perf_counter()

    def progress(epoch, loss, _net):
        if epoch % 100 == 0 or epoch == tcfg.epochs:
            log.info("epoch %d/%d  loss %.4g  (%.0fs)", epoch, tcfg.epochs, loss,
                     time.perf_counter() - start)

    return train(net, signal.coords(), signal.targets(), tcfg, progress)


def _score(signal, net, threshold: float) -> tuple[str, float]:
    if isinstance(signal, ImageSignal):
        if net.arch.input_dim != 2 or net.arch.output_dim != signal.channels:
            raise UsageError("model is not an image INR matching the reference channels")
        img = render_inr_image(net, signal.width, signal.height, signal.channels)
        return "psnr_db", psnr(signal, img)
    if net.arch.input_dim != 3 or net.arch.output_dim != 1:
        raise UsageError("model is not an occupancy INR (3 -> 1)")
    return "iou", iou(signal, render_inr_occupancy(net, signal.dims, threshold))


def _report_rows(report: CompressionReport):
    return [[lr.index, lr.mode, lr.k1, lr.k2, lr.s, lr.n_codes, _fmt(lr.rel_err), int(lr.met),
             lr.stored_scalars] for lr in report.layers]


REPORT_HEADER = ["layer", "mode", "k1", "k2", "s", "n_codes", "rel_err", "met", "stored_scalars"]


def _print_report(report: CompressionReport, pixels: int | None) -> None:
    print(f"bytes: {report.n_bytes}")
    if pixels:
        print(f"bpp: {8 * report.n_bytes / pixels:.6f}")
    print(f"T_s: {report.T_s}  T_sinr: {report.T_sinr}")
    for lr in report.layers:
        note = "" if lr.met else "  (tolerance not met)"
        print(f"  layer {lr.index}: {lr.mode:<10} k1={lr.k1:<6} k2={lr.k2:<6} s={lr.s:<4} "
              f"rel_err={lr.rel_err:.4g}{note}")


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args, cfg) -> int:
    signal = _read_signal(args.input)
    arch = arch_from(cfg, signal)
    tcfg = train_config_from(cfg, arch)
    net, history = _fit(signal, arch, tcfg)
    loss_path = args.loss_csv or f"{args.output}.loss.csv"
    _emit_csv(loss_path, ["epoch", "loss"], [[i, _fmt(h)] for i, h in enumerate(history, 1)])
    _atomic_write(args.output, save_checkpoint(net))
    metric, value = _score(signal, net, cfg["threshold"])
    print(f"{metric}: {display_psnr(value) if metric == 'psnr_db' else value:.4f}")
    return EXIT_OK


def cmd_compress(args, cfg) -> int:
    net = _read_model(args.input)
    ccfg = codec_config_from(cfg)
    data, report = compress_inr(net, ccfg)
    _atomic_write(args.output, data)
    pixels = None
    if args.reference:
        ref = _read_signal(args.reference)
        if isinstance(ref, ImageSignal):
            pixels = ref.width * ref.height
    _print_report(report, pixels)
    if args.report_csv:
        _emit_csv(args.report_csv, REPORT_HEADER, _report_rows(report))
    return EXIT_OK


def cmd_decompress(args, cfg) -> int:
    net = _read_model(args.input)
    _atomic_write(args.output, save_checkpoint(net))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    signal = _read_signal(args.reference)
    net = _read_model(args.model)
    metric, value = _score(signal, net, cfg["threshold"])
    size = os.path.getsize(args.model)
    rows = [[metric, _fmt(float(value))], ["file_bytes", size]]
    if isinstance(signal, ImageSignal):
        rows.append(["bpp", _fmt(bpp(size, signal.width, signal.height))])
    _emit_csv(args.output, ["metric", "value"], rows)
    return EXIT_OK


def _projected_bytes(lr, s: int) -> int:
    """Pre-entropy size of one coded layer record at sparsity ``s``."""
    header, block = 13, 12
    bias = block + 2 * (lr.k1 if lr.mode == "PER_VECTOR" else 0)
    return header + bias + block + 4 * lr.n_codes * s


def cmd_sweep(args, cfg) -> int:
    net = _read_model(args.input)
    ccfg = codec_config_from(cfg, auto_s=True)
    _, report = compress_inr(net, ccfg)
    rows = []
    for lr in report.layers:
        if lr.sweep is None:
            continue
        for s, err in zip(lr.sweep.grid, lr.sweep.curve):
            rows.append([lr.index, lr.mode, s, _fmt(err), _projected_bytes(lr, s),
                         int(s == lr.s)])
    _emit_csv(args.output, ["layer", "mode", "s", "rel_err", "projected_bytes", "chosen"], rows)
    return EXIT_OK


def cmd_diagnose(args, cfg) -> int:
    net = _read_model(args.input)
    rows = [[m.layer, int(m.hidden), m.count, _fmt(m.mean), _fmt(m.std), _fmt(m.skewness),
             _fmt(m.excess_kurtosis), int(m.degenerate)] for m in weight_gaussianity(net)]
    _emit_csv(args.output, ["layer", "hidden", "count", "mean", "std", "skewness",
                            "excess_kurtosis", "degenerate"], rows)
    return EXIT_OK


def _stage(name, fn, *a):
    try:
        return fn(*a)
    except (UsageError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
        raise StageError(name, exc) from exc


def cmd_pipeline(args, cfg) -> int:
    signal = _read_signal(args.input)
    arch = arch_from(cfg, signal)
    tcfg = train_config_from(cfg, arch)
    ccfg = codec_config_from(cfg)
    os.makedirs(args.workdir, exist_ok=True)
    path = lambda name: os.path.join(args.workdir, name)  # noqa: E731

    net, history = _stage("train", _fit, signal, arch, tcfg)
    _emit_csv(path("loss.csv"), ["epoch", "loss"], [[i, _fmt(h)] for i, h in enumerate(history, 1)])
    _atomic_write(path("model.ckpt"), save_checkpoint(net))
    data, report = _stage("compress", compress_inr, net, ccfg)
    _atomic_write(path("model.sinr"), data)
    base = _stage("baseline", baseline_bytes, net, ccfg.bitwidth)
    _atomic_write(path("baseline.bin"), base)
    with open(path("model.sinr"), "rb") as fh:
        decoded = _stage("decompress", decompress_inr, fh.read())
    with open(path("baseline.bin"), "rb") as fh:
        base_net = _stage("decompress", decompress_inr, fh.read())
    metric, before = _stage("eval", _score, signal, net, cfg["threshold"])
    _, after = _stage("eval", _score, signal, decoded, cfg["threshold"])
    _, base_q = _stage("eval", _score, signal, base_net, cfg["threshold"])
    sinr_bytes = os.path.getsize(path("model.sinr"))
    base_bytes = os.path.getsize(path("baseline.bin"))
    rows = [
        ["uncompressed_" + metric, _fmt(float(before))],
        ["baseline_" + metric, _fmt(float(base_q))],
        ["sinr_" + metric, _fmt(float(after))],
        ["baseline_bytes", base_bytes],
        ["sinr_bytes", sinr_bytes],
        ["size_ratio", _fmt(sinr_bytes / base_bytes)],
        ["T_s", report.T_s],
        ["T_sinr", report.T_sinr],
    ]
    if isinstance(signal, ImageSignal):
        px = signal.width * signal.height
        rows += [["baseline_bpp", _fmt(bpp(base_bytes, signal.width, signal.height))],
                 ["sinr_bpp", _fmt(bpp(sinr_bytes, signal.width, signal.height))]]
    else:
        px = None
    rows += [[f"layer{lr.index}_mode", lr.mode] for lr in report.layers]
    rows += [[f"layer{lr.index}_s", lr.s] for lr in report.layers]
    _emit_csv(path("report.csv"), ["metric", "value"], rows)
    _emit_csv(path("layers.csv"), REPORT_HEADER, _report_rows(report))
    _print_report(report, px)
    print(f"baseline bytes: {base_bytes}  sinr bytes: {sinr_bytes}  "
          f"ratio: {sinr_bytes / base_bytes:.3f}")
    print(f"{metric}: uncompressed {display_psnr(before):.4f}  sinr {display_psnr(after):.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"sinr {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"sinr {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ContainerError, SignalFormatError, BudgetError, CodingError, NonFiniteError,
            OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"sinr {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
