"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 failed verification.
"""
from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cost, netgraph, oracle, training, voxio
from .layers import FLAVORS

EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 1, 2, 3
THREADS_ENV = "VOLT3D_THREADS"


class UsageError(Exception):
    pass


class VerifyError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _out(text: str = "") -> None:
    sys.stdout.write(text + ("\n" if not text.endswith("\n") else ""))


def _positive(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}")
    return v


def _nonneg(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s!r}")
    return v


def _dhw(s: str) -> tuple[int, int, int]:
    parts = s.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected d,h,w, got {s!r}")
    return tuple(_positive(p) for p in parts)


def _int_list(s: str) -> tuple[int, ...]:
    if s.strip() == "":
        return ()
    return tuple(_positive(p) for p in s.split(","))


def _thread_limit(requested: int | None):
    n = requested
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = _positive(os.environ[THREADS_ENV])
        except argparse.ArgumentTypeError as e:
            raise UsageError(f"{THREADS_ENV}: {e}") from None
    if n is None:
        n = os.cpu_count() or 1
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - declared dependency
        return nullcontext()
    return threadpool_limits(limits=n)


def _frac(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


# ------------------------------------------------------------------- params

def _arch_kwargs(args) -> dict:
    if args.arch.startswith("vgg"):
        return dict(resolution=args.resolution, width=args.width, hidden=args.hidden,
                    classes=args.classes)
    return {}


def cmd_params(args) -> int:
    spec = netgraph.build_arch(args.arch, args.flavor, **_arch_kwargs(args))
    base = None
    if spec.flavor != "standard":
        base = cost.model_cost(netgraph.with_flavor(spec, "standard"), args.convention)
    report = cost.model_cost(spec, args.convention, baseline=base)
    rows = report.layer_rows()
    for r in rows:
        r["reduced_by"] = ""
    conv = {"layer": "conv_subtotal", "kind": "", "section": "conv", "params": report.conv_params,
            "macs": report.conv_macs, "reduced_by": cost.format_percent(report.conv_reduction())}
    total = {"layer": "total", "kind": "", "section": "", "params": report.total_params,
             "macs": report.total_macs, "reduced_by": cost.format_percent(report.total_reduction())}
    if args.format == "csv":
        _out(cost.to_csv(rows + [conv, total]))
        return 0
    _out(f"{spec.name} flavor={spec.flavor} convention={args.convention}")
    _out(cost.to_markdown(rows))
    _out()
    label = spec.name if spec.flavor == "standard" else f"{spec.name} {spec.flavor}"
    _out(cost.to_markdown([report.summary_row(label)], cost.SUMMARY_HEADERS))
    return 0


# -------------------------------------------------------------------- flops

def cmd_flops(args) -> int:
    k, cin, cout = args.k, args.cin, args.cout
    d, h, w = args.dhw
    std = cost.macs_standard(k, cin, cout, d, h, w)
    dwc = cost.macs_depthwise(k, cin, d, h, w)
    pwc = cost.macs_pointwise(cin, cout, d, h, w)
    dws = cost.macs_depthwise_separable(k, cin, cout, d, h, w)
    pse = cost.macs_pseudo(k, cin, cout, d, h, w)
    r_std = cost.reduction_ratio_dw(k, cout)
    r_pse = cost.ratio_dw_vs_pseudo(k, cin, cout)
    approx = cost.ratio_dw_vs_pseudo_approx(k, cin)
    if args.format == "csv":
        _out(cost.to_csv([
            {"quantity": "standard", "exact": std, "value": std},
            {"quantity": "dw", "exact": dws, "value": dws},
            {"quantity": "pseudo", "exact": pse, "value": pse},
            {"quantity": "dw:std", "exact": _frac(r_std), "value": f"{float(r_std):.6f}"},
            {"quantity": "dw:pseudo", "exact": _frac(r_pse), "value": f"{float(r_pse):.6f}"},
            {"quantity": "dw:pseudo approx", "exact": _frac(approx), "value": f"{float(approx):.6f}"},
        ]))
    else:
        _out(f"{std} / {dws} / {pse}")
        _out(f"standard   {std}")
        _out(f"dw         {dws}  (depthwise {dwc} + pointwise {pwc})")
        _out(f"pseudo     {pse}  (horizontal {k * k * cin * cin * d * h * w}"
             f" + vertical {k * cin * cout * d * h * w})")
        _out(f"dw:std     {_frac(r_std)} = 1/{cout}+1/{k**3} = {float(r_std):.6f}")
        _out(f"dw:pseudo  {_frac(r_pse)} = {float(r_pse):.6f}"
             f"  (approx k/cin = {_frac(approx)} = {float(approx):.6f})")
    if args.verify:
        _verify_flops(args, std, dws, pse)
    return 0


def _verify_flops(args, std, dws, pse) -> None:
    k, cin, cout = args.k, args.cin, args.cout
    g = np.random.default_rng(0)
    x = g.standard_normal((1, cin) + tuple(args.dhw))
    counts = {}
    try:
        c = oracle.MacCounter()
        oracle.naive_conv3d(x, g.standard_normal((cout, cin, k, k, k)), padding="same", counter=c)
        counts["standard"] = c.count
        c = oracle.MacCounter()
        y = oracle.naive_depthwise(x, g.standard_normal((cin, k, k, k)), padding="same", counter=c)
        oracle.naive_pointwise(y, g.standard_normal((cout, cin)), counter=c)
        counts["dw"] = c.count
        c = oracle.MacCounter()
        oracle.naive_pseudo(x, g.standard_normal((cin, cin, k, k)), g.standard_normal((cout, cin, k)),
                            padding="same", counter=c)
        counts["pseudo"] = c.count
    except ValueError as e:
        raise RuntimeError(f"cannot verify with the reference kernels: {e}") from None
    expected = {"standard": std, "dw": dws, "pseudo": pse}
    bad = [f"{n}: formula {expected[n]} != counted {counts[n]}" for n in expected if counts[n] != expected[n]]
    if bad:
        raise VerifyError("; ".join(bad))
    _out("verify     ok (reference kernel multiply counts match)")


# --------------------------------------------------------------------- data

def _dataset_args(p, samples, resolution: int | None, classes):
    p.add_argument("--data", type=Path, help="dataset directory written by gen-data "
                   "(otherwise a dataset is generated from the flags below)")
    p.add_argument("--samples", type=_nonneg, default=samples if isinstance(samples, int) else None,
                   help=f"samples to generate (default {samples})")
    if resolution is not None:
        p.add_argument("--resolution", type=int, default=resolution, choices=voxio.RESOLUTIONS,
                       help=f"voxel grid side (default {resolution})")
    p.add_argument("--classes", type=_positive, default=classes if isinstance(classes, int) else None,
                   help=f"shape classes (default {classes})")
    p.add_argument("--data-seed", type=_nonneg, default=0, help="seed of the generated dataset (default 0)")


def _load_data(args, resolution: int):
    if args.data is not None:
        if not args.data.exists():
            raise FileNotFoundError(f"dataset directory {args.data} does not exist")
        return voxio.read_dataset(args.data)
    samples = voxio.gen_dataset(args.samples, resolution, args.classes, args.data_seed)
    if not samples:
        raise ValueError("dataset is empty")
    return voxio.stack_voxels(samples), voxio.stack_labels(samples), voxio.stack_latents(samples)


def cmd_gen_data(args) -> int:
    samples = voxio.gen_dataset(args.samples, args.resolution, args.classes, args.seed, args.noise)
    d = voxio.write_dataset(samples, args.out)
    _out(f"wrote {len(samples)} samples at {args.resolution}^3 to {d}")
    return 0


# ----------------------------------------------------------------- training

def _config(args) -> training.TrainConfig:
    kw = {}
    if args.preset:
        kw = dict(training.PRESETS[args.preset])
    if args.epochs is not None or args.lr is not None or not args.preset:
        epochs = args.epochs if args.epochs is not None else kw.get("epochs", args.default_epochs)
        lr = args.lr if args.lr is not None else args.default_lr
        kw.update(epochs=epochs, lr_schedule=training.constant_schedule(epochs, lr))
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    kw.setdefault("batch_size", args.default_batch)
    return training.TrainConfig(optimizer=args.optimizer, seed=args.seed, target_metric=args.target, **kw)


def _save_run(network, hist, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    training.save_history(hist, out / "history.csv")
    voxio.save_checkpoint(network.state(), out / "model.vwt")
    (out / "model.txt").write_text(network.spec.to_text())


def _logger(quiet: bool):
    if quiet:
        return None
    return lambda e, lr, loss, m: print(f"epoch {e:4d}  lr {lr:.3g}  loss {loss:.6f}  metric {m:.4f}",
                                        file=sys.stderr, flush=True)


def _last(hist) -> str:
    return f"{hist.metrics[-1]:.4f}" if hist.rows else "n/a"


def cmd_train_cls(args) -> int:
    x, y, _ = _load_data(args, args.resolution)
    n_classes = int(y.max()) + 1 if args.head_classes is None else args.head_classes
    spec = netgraph.build_vgg3d(int(args.arch[3:]), args.flavor, resolution=x.shape[-1],
                                classes=n_classes, width=args.width, hidden=args.hidden)
    net = netgraph.build_network(spec, seed=args.seed)
    hist = training.train_classifier(net, x, y, _config(args), _logger(args.quiet))
    _save_run(net, hist, args.out)
    acc = training.evaluate_classifier(net, x, y).accuracy
    _out(f"epochs {len(hist.rows)}  train accuracy {_last(hist)}  "
         f"inference accuracy {acc:.4f}  -> {args.out}")
    return 0


def cmd_train_rec(args) -> int:
    vox, _, lat = _load_data(args, 32)
    spec = netgraph.build_arch(args.arch, args.flavor)
    if vox.shape[1:] != spec.output_shape:
        raise ValueError(f"decoder output {spec.output_shape} does not match voxel grids {vox.shape[1:]}")
    net = netgraph.build_network(spec, seed=args.seed)
    cfg = _config(args)
    cfg.threshold = args.threshold
    hist = training.train_reconstructor(net, lat, vox, cfg, _logger(args.quiet))
    _save_run(net, hist, args.out)
    res = training.evaluate_reconstructor(net, lat, vox, thresholds=(args.threshold,))
    _out(f"epochs {len(hist.rows)}  train mIoU {_last(hist)}  "
         f"inference mIoU {res.miou:.4f} (t={args.threshold})  -> {args.out}")
    return 0


# --------------------------------------------------------------------- eval

def _load_model(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    sidecar = path.with_suffix(".txt")
    if not sidecar.exists():
        raise FileNotFoundError(f"model description {sidecar} does not exist")
    net = netgraph.build_network(netgraph.parse_model_text(sidecar.read_text()))
    voxio.load_checkpoint(path, net)
    return net


def cmd_eval(args) -> int:
    net = _load_model(args.checkpoint)
    cls = args.task == "cls"
    if args.samples is None:
        args.samples = 30 if cls else 10
    if args.classes is None:
        args.classes = 3 if cls else 10
    if cls:
        x, y, _ = _load_data(args, net.spec.input_shape[-1])
        acc = training.evaluate_classifier(net, x, y).accuracy
        if args.format == "csv":
            _out(cost.to_csv([{"metric": "accuracy", "value": repr(acc)}]))
        else:
            _out(f"accuracy {acc:.4f} ({len(y)} samples)")
        return 0
    vox, labels, lat = _load_data(args, 32)
    res = training.evaluate_reconstructor(net, lat, vox, labels)
    rows = [{"threshold": t, "miou": f"{m:.6f}", "best": "*" if t == res.best_threshold else ""}
            for t, m in res.per_threshold.items()]
    if args.format == "csv":
        _out(cost.to_csv(rows))
    else:
        _out(cost.to_markdown(rows))
        _out(f"best threshold {res.best_threshold}: mIoU {res.miou:.4f}; "
             f"class-mean mIoU {training.class_mean(res.per_class):.4f}")
    return 0


# ------------------------------------------------------------------- parser

def _train_args(p, *, epochs: int, lr: float, batch: int, target_help: str):
    p.add_argument("--flavor", choices=FLAVORS, default="dw", help="convolution flavor (default dw)")
    p.add_argument("--epochs", type=_nonneg, help=f"epochs (default {epochs}, or the preset's)")
    p.add_argument("--lr", type=float, help=f"constant learning rate (default {lr:g}, or the preset schedule)")
    p.add_argument("--batch-size", type=_positive, help=f"batch size (default {batch}, or the preset's)")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam", help="optimizer (default adam)")
    p.add_argument("--preset", choices=sorted(training.PRESETS), help="published schedule preset")
    p.add_argument("--target", type=float, help=target_help)
    p.add_argument("--seed", type=_nonneg, default=0, help="initialization and shuffling seed (default 0)")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory (default ./run)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress on stderr")
    p.set_defaults(default_epochs=epochs, default_lr=lr, default_batch=batch)


def build_parser() -> argparse.ArgumentParser:
    threads_help = f"BLAS worker threads (default ${THREADS_ENV}, else all logical cores)"
    parser = _Parser(prog="volt3d", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=_positive, help=threads_help)
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS, help=threads_help)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("params", parents=[common], help="parameter counts per layer and in total",
                       description="Per-layer parameter and MAC counts with conv subtotal, model total "
                                   "and reductions against the standard-flavor baseline.")
    p.add_argument("--arch", required=True, choices=netgraph.ARCHS, help="architecture")
    p.add_argument("--flavor", required=True, choices=FLAVORS, help="convolution flavor")
    p.add_argument("--convention", choices=cost.CONVENTIONS, default="paper",
                   help="'paper': trainable parameters, decoder only (default); "
                        "'all': adds BN running statistics and the encoder-side fc")
    p.add_argument("--format", choices=("table", "csv"), default="table", help="output format (default table)")
    p.add_argument("--resolution", type=_positive, default=64, help="VGG input side (default 64)")
    p.add_argument("--width", type=float, default=1.0, help="VGG channel multiplier (default 1.0)")
    p.add_argument("--hidden", type=_int_list, default=(4096, 4096),
                   help="VGG hidden fc widths, comma separated (default 4096,4096)")
    p.add_argument("--classes", type=_positive, default=13, help="VGG output classes (default 13)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", parents=[common], help="MAC counts and ratios of one conv layer",
                       description="Multiply counts of the three flavors for one layer with same padding.")
    p.add_argument("--k", type=_positive, required=True, help="kernel side")
    p.add_argument("--cin", type=_positive, required=True, help="input channels")
    p.add_argument("--cout", type=_positive, required=True, help="output channels")
    p.add_argument("--dhw", type=_dhw, required=True, help="output extent as d,h,w")
    p.add_argument("--verify", action="store_true",
                   help="recount with the instrumented reference kernels (small shapes only); exit 3 on mismatch")
    p.add_argument("--format", choices=("table", "csv"), default="table", help="output format (default table)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic voxel dataset",
                       description="Deterministic synthetic shapes with latent vectors.")
    p.add_argument("--samples", type=_nonneg, default=30, help="number of samples (default 30)")
    p.add_argument("--resolution", type=int, choices=voxio.RESOLUTIONS, default=32, help="grid side (default 32)")
    p.add_argument("--classes", type=_positive, default=13, help="shape classes (default 13)")
    p.add_argument("--seed", type=_nonneg, default=0, help="dataset seed (default 0)")
    p.add_argument("--noise", type=float, default=0.01, help="latent noise stddev (default 0.01)")
    p.add_argument("--out", type=Path, default=Path("data"), help="output directory (default ./data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cls", parents=[common], help="train a VGG-style voxel classifier",
                       description="Classifier training; writes history.csv, model.vwt and model.txt.")
    p.add_argument("--arch", choices=("vgg13", "vgg16", "vgg19"), default="vgg13", help="architecture (default vgg13)")
    p.add_argument("--width", type=float, default=0.125, help="channel multiplier (default 0.125)")
    p.add_argument("--hidden", type=_int_list, default=(64, 64), help="hidden fc widths (default 64,64)")
    p.add_argument("--head-classes", type=_positive, help="logit count (default: classes present in the data)")
    _dataset_args(p, samples=30, resolution=8, classes=3)
    _train_args(p, epochs=20, lr=1e-3, batch=8,
                target_help="stop once training accuracy exceeds this (confirmed in inference mode)")
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("train-rec", parents=[common], help="train a reconstruction decoder on latents",
                       description="Decoder training from latent vectors to 32^3 grids; "
                                   "writes history.csv, model.vwt and model.txt.")
    p.add_argument("--arch", choices=("rec6", "resrec6", "rec16", "resrec16"), default="rec6",
                   help="decoder (default rec6)")
    p.add_argument("--threshold", type=float, default=0.3, help="mIoU threshold of the epoch metric (default 0.3)")
    _dataset_args(p, samples=10, resolution=None, classes=10)
    _train_args(p, epochs=20, lr=1e-2, batch=10,
                target_help="stop once training mIoU exceeds this (confirmed in inference mode)")
    p.set_defaults(func=cmd_train_rec)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved model",
                       description="Accuracy for classifiers; mIoU per threshold for decoders, "
                                   "best threshold flagged with '*'.")
    p.add_argument("--task", choices=("cls", "rec"), required=True, help="model task")
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="model.vwt written by train-cls/train-rec (model.txt must sit beside it)")
    p.add_argument("--format", choices=("table", "csv"), default="table", help="output format (default table)")
    _dataset_args(p, samples="30 for cls, 10 for rec", resolution=None, classes="3 for cls, 10 for rec")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"volt3d: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerifyError as e:
        print(f"volt3d: verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except training.TrainingDiverged as e:
        print(f"volt3d: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"volt3d: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
