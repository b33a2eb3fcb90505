"""Command-line entry point: ``gsan {train,eval,analyze,bench,inspect}``.

Exit status: 0 success, 1 runtime failure, 2 configuration or usage error,
3 I/O error.  Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, bench
from .checkpoint import load_checkpoint, read_checkpoint
from .datasets import load_dataset, resolve_data_dir
from .exceptions import ConfigError, GhostSAError
from .ghost import build_network, structural_audit
from .netspec import parse_network_config, parse_network_config_text
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="network config file")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--data-dir", help="dataset directory (default: $GSAN_DATA_DIR)")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path")
    p.add_argument("--format", choices=("tsv", "kv"), default="tsv")


def build_parser():
    parser = argparse.ArgumentParser(prog="gsan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and save its best checkpoint")
    _common(p, config_required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=None,
                   help="base learning rate (default 0.05 for mnist, 0.1 for cifar10)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--adder-eta", type=float, default=0.2)
    p.add_argument("--no-adder-scaling", action="store_true")
    p.add_argument("--augment", action="store_true", help="random crop and flip (cifar10)")
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, help="use only the first N test images")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _common(p)
    p.add_argument("--test-limit", type=int)

    p = sub.add_parser("analyze", help="per-layer cost table and GhostSA ratios")
    _common(p)
    p.add_argument("--gamma", type=int, help="override every stage's gamma")
    p.add_argument("--variant", choices=("ghostsa", "standard"), default="ghostsa")

    p = sub.add_parser("bench", help="kernel latency suite")
    _common(p)
    p.add_argument("--suite", help="suite config file")
    p.add_argument("--report", help="write a key = value report here")
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmups", type=int)

    p = sub.add_parser("inspect", help="dump a checkpoint's spec and tensor census")
    _common(p)
    return parser


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _kv(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def _load_data(args, spec, limit_train=None, limit_test=None):
    train_set, test_set = load_dataset(args.dataset, resolve_data_dir(args.data_dir))
    if train_set.images.shape[1:] != (spec.in_channels, spec.input_size, spec.input_size):
        raise_config(f"dataset {args.dataset} images are {train_set.images.shape[1:]} but the "
                     f"network expects {spec.in_channels}x{spec.input_size}x{spec.input_size}")
    if limit_train:
        train_set = train_set.subset(limit_train)
    if limit_test:
        test_set = test_set.subset(limit_test)
    return train_set, test_set


def raise_config(message):
    raise ConfigError(message)


def cmd_train(args):
    spec = parse_network_config(args.config)
    lr = args.lr if args.lr is not None else (0.1 if args.dataset == "cifar10" else 0.05)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=lr,
                         momentum=args.momentum, weight_decay=args.weight_decay,
                         seed=args.seed, adder_lr_scaling=not args.no_adder_scaling,
                         adder_eta=args.adder_eta, augment=args.augment)
    train_set, test_set = _load_data(args, spec, args.train_limit, args.test_limit)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.gsan"
    model = build_network(spec, seed=args.seed)

    def progress(m):
        print(f"epoch {m.epoch}: train_loss={m.train_loss:.4f} test_top1={m.test_top1:.2f} "
              f"wall_time_s={m.wall_time_s:.1f}", file=sys.stderr)

    result = train(model, train_set, test_set, config, checkpoint_path=ckpt,
                   metrics_path=out / "metrics.tsv", timing_path=out / "timing.tsv",
                   progress=progress)
    print(f"best_top1\t{result.best_top1:.2f}\nbest_epoch\t{result.best_epoch}\ncheckpoint\t{ckpt}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint:
        raise_config("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    _, test_set = _load_data(args, model.spec, None, args.test_limit)
    top1 = evaluate(model, test_set)
    text = f"top1 = {top1:.2f}\n" if args.format == "kv" else f"top1\t{top1:.2f}\n"
    _emit(text, args.out)
    return EXIT_OK


def analyze_text(spec, variant="ghostsa", fmt="tsv"):
    """The ``analyze`` report for ``spec`` as text."""
    report = analysis.analyze_network(spec, variant)
    rows = analysis.module_ratios(spec) if variant == "ghostsa" else []
    fields = ("flops", "params", "param_bits", "mem_accesses")
    if fmt == "kv":
        pairs = []
        for layer in report.layers:
            pairs.append((f"layer.{layer.name}.kind", layer.kind))
            pairs += [(f"layer.{layer.name}.{f}", _fmt(getattr(layer, f))) for f in fields]
        pairs += [(f"total.{f}", _fmt(getattr(report, f))) for f in fields]
        for name, cfg, r in rows:
            pairs += [(f"ratio.{name}.m1", cfg.m1), (f"ratio.{name}.m2", cfg.m2)]
            pairs += [(f"ratio.{name}.{k}", f"{getattr(r, k):.6f}")
                      for k in ("r_s", "r_c", "r_m", "k2gamma", "r_c_closed", "r_m_closed")]
        return _kv(pairs)
    lines = ["layer\tkind\tout_shape\tflops\tparams\tparam_bits\tmem_accesses"]
    for layer in report.layers:
        shape = "x".join(str(d) for d in layer.out_shape)
        lines.append(f"{layer.name}\t{layer.kind}\t{shape}\t" +
                     "\t".join(_fmt(getattr(layer, f)) for f in fields))
    lines.append("total\t\t\t" + "\t".join(_fmt(getattr(report, f)) for f in fields))
    if rows:
        lines.append("")
        lines.append("module\tc_i\tc_o\tgamma\tm1\tm2\tr_s\tr_c\tr_m\tk2gamma")
        for name, cfg, r in rows:
            lines.append(f"{name}\t{cfg.in_channels}\t{cfg.out_channels}\t{cfg.gamma}\t{cfg.m1}\t"
                         f"{cfg.m2}\t{r.r_s:.4f}\t{r.r_c:.4f}\t{r.r_m:.4f}\t{r.k2gamma:.0f}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_analyze(args):
    if args.config:
        spec = parse_network_config(args.config)
    elif args.checkpoint:
        spec = parse_network_config_text(read_checkpoint(args.checkpoint)[0])
    else:
        raise_config("analyze needs --config or --checkpoint")
    if args.gamma is not None:
        spec = spec.with_gamma(args.gamma).validate()
    _emit(analyze_text(spec, args.variant, args.format), args.out)
    return EXIT_OK


def cmd_bench(args):
    suite = bench.load_suite(args.suite) if args.suite else bench.SuiteConfig()
    if args.repeats is not None:
        suite = replace(suite, repeats=args.repeats)
    if args.warmups is not None:
        suite = replace(suite, warmups=args.warmups)
    suite = replace(suite, seed=args.seed)
    bench.check_counts(suite.repeats, suite.warmups)
    records = bench.bench_suite(suite)
    _emit(bench.format_tsv(records), args.out)
    noisy = [r for r in records if r.cv_percent >= bench.CV_TARGET]
    noise = bench.host_noise_cv() if args.report or noisy else None
    if noisy:
        print(f"warning: {len(noisy)} record(s) with cv_percent >= {bench.CV_TARGET:g}; "
              f"host noise floor {noise:.1f}%", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(bench.format_report(records, noise), encoding="utf-8")
    bad = [r for r in records if not r.checksum_ok]
    if bad:
        print(f"checksum mismatch for {[(r.tag, r.geometry.name) for r in bad]}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def inspect_text(path, fmt="tsv"):
    config_text, variant, tensors = read_checkpoint(path)
    model = load_checkpoint(path)
    audit = structural_audit(model)
    census = [
        ("variant", variant),
        ("shift conv filter banks", audit.shift_convs),
        ("adder conv filter banks", audit.adder_convs),
        ("dense multiplying conv filters", audit.dense_convs),
        ("classifier head (dense linear)", audit.dense_linear),
        ("parameters", audit.parameters),
        ("tensors", len(tensors)),
    ]
    if fmt == "kv":
        pairs = [(k.replace(" ", "_").replace("(", "").replace(")", ""), v) for k, v in census]
        pairs += [(f"tensor.{n}", f"{a.dtype.name} {'x'.join(map(str, a.shape))}")
                  for n, a in tensors.items()]
        return _kv(pairs)
    lines = ["# network config", config_text.rstrip(), "", "# census"]
    lines += [f"{k}: {v}" for k, v in census]
    lines += ["", "# tensors", "name\tdtype\tshape"]
    lines += [f"{n}\t{a.dtype.name}\t{'x'.join(map(str, a.shape))}" for n, a in tensors.items()]
    return "\n".join(lines) + "\n"


def cmd_inspect(args):
    if not args.checkpoint:
        raise_config("inspect needs --checkpoint")
    _emit(inspect_text(args.checkpoint, args.format), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        return COMMANDS[args.command](args)
    except GhostSAError as exc:
        if isinstance(exc, ValueError):
            print(f"gsan {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc, OSError):
            print(f"gsan {args.command}: I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"gsan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"gsan {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"gsan {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
