"""Command-line entry point: ``cxrvgg <command> ...``.

Exit codes: 0 success, 2 usage/config/spec error, 3 dataset or input
error (including a run without a summary), 4 numeric failure. Data goes
to stdout; context and a final ``exit_status=<code>`` line go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .arch import count_params, resolve_spec
from .augment import AugmentConfig, load_image, random_transform, save_png
from .data import load_dataset
from .errors import (
    ConfigError,
    CxrError,
    DatasetError,
    DomainError,
    InputError,
    NumericError,
    SpecError,
)
from .metrics import SPLITS, CVSummary, format_interval, round_half_even
from .tensor import Rng
from .trainer import (
    RunConfig,
    cross_validate,
    evaluate_model,
    load_model,
    read_summary,
    save_model,
    synth_dataset,
    train_one_fold,
    write_losses,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cxrvgg")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_hw(text: str):
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"bad size {text!r}; expected HxW") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise UsageError(f"bad size {text!r}; expected HxW")
    return parts[0], parts[1]


def _commas(n: int) -> str:
    return f"{n:,}"


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    ds = synth_dataset(args.out, args.n_per_class, args.size, args.seed)
    counts = {c.dirname: n for c, n in ds.class_counts.items()}
    print(json.dumps({"root": str(args.out), "items": len(ds), "class_counts": counts}, sort_keys=True))
    return EXIT_OK


def _config(args) -> RunConfig:
    overrides = {
        "arch": getattr(args, "arch", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "data_root": getattr(args, "data", None),
        "output_dir": getattr(args, "out", None),
        "image_size": getattr(args, "image_size", None),
    }
    if args.config is not None:
        return RunConfig.load(args.config, **overrides)
    return RunConfig.from_text("", **overrides)


def _run_dir(cfg: RunConfig, name: Optional[str], force: bool) -> Path:
    name = name or time.strftime("%Y%m%d-%H%M%S")
    path = Path(cfg.output_dir) / name
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"run directory {path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(cfg: RunConfig):
    if not cfg.data_root:
        raise ConfigError("no dataset given (data_root in the config or --data)")
    return load_dataset(cfg.data_root)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    run = _run_dir(cfg, args.name, args.force)
    (run / "config.snapshot").write_text(cfg.to_text())
    trained = train_one_fold(ds, cfg, fold=0)
    save_model(run / "checkpoint", trained)
    write_losses(run / "losses.csv", trained.losses)
    print(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    model, stats = load_model(args.checkpoint, cfg)
    result = evaluate_model(model, ds.load_images(cfg.image_size), ds.one_hot(), stats)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    run = _run_dir(cfg, args.name, args.force)
    summary = cross_validate(ds, cfg, run_dir=run, parallel=args.parallel_folds)
    print(run)
    sys.stdout.write(render_table3(summary))
    return EXIT_OK


def cmd_params(args) -> int:
    h, w = _parse_hw(args.input)
    spec = resolve_spec(args.arch, classes=args.classes, p=args.dropout)
    spec = spec.with_input(h, w)
    counts = count_params(spec)
    rows = [("name", "kind", "output", "trainable", "buffers")]
    for c in counts.layers:
        rows.append((c.name, c.kind, "x".join(map(str, c.output_shape)), _commas(c.trainable), _commas(c.buffers)))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    for r in rows:
        print("  ".join(cell.ljust(widths[i]) if i < 3 else cell.rjust(widths[i]) for i, cell in enumerate(r)).rstrip())
    conv = sum(c.trainable for c in counts.layers if c.kind == "Conv2D")
    print(f"conv subtotal: {_commas(conv)}")
    print(f"trainable: {_commas(counts.trainable)}")
    print(f"non-trainable (batch-norm running buffers): {_commas(counts.buffers)}")
    print(f"total: {_commas(counts.total)}")
    if args.compare is not None:
        diff = counts.total - args.compare
        print(f"claimed total: {_commas(args.compare)}")
        print(f"computed total: {_commas(counts.total)}")
        print(f"difference (computed - claimed): {diff:+,}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    if args.config is not None:
        aug = RunConfig.load(args.config).aug
    else:
        aug = AugmentConfig()
    if args.seed is not None:
        aug = aug.with_seed(args.seed)
    if args.image:
        sources = [Path(args.image)]
    elif args.data:
        sources = [Path(p) for p in load_dataset(args.data).paths]
    else:
        raise UsageError("give --image or --data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(aug.seed, "augment-preview")
    for i in range(args.n):
        src = sources[i % len(sources)]
        img = random_transform(load_image(src, args.size), aug, rng.child(i))
        path = out / f"preview_{i:03d}.png"
        save_png(path, img)
        print(path)
    return EXIT_OK


# --------------------------------------------------------------------------
# report rendering

def render_table3(summary: CVSummary) -> str:
    """Two blocks (internal, external) of ``Measure | LHS 95% CI | Value | RHS 95% CI``."""
    titles = {"internal": "Internal / Training Set", "external": "External / Testing Set"}
    width = max(len(r) for r in summary.rows + ["Measure"])
    out = io.StringIO()
    for split in SPLITS:
        out.write(titles[split] + "\n")
        out.write(f"{'Measure':<{width}}  {'LHS 95% CI':>10}  {'Value':>8}  {'RHS 95% CI':>10}\n")
        for row in summary.rows:
            ms = summary.stats[split].get(row)
            cells = ("", "", "") if ms is None else tuple(round_half_even(v) for v in (ms.low, ms.mean, ms.high))
            out.write(f"{row:<{width}}  {cells[0]:>10}  {cells[1]:>8}  {cells[2]:>10}\n")
    return out.getvalue()


TABLE7_COLUMNS = ("Accuracy", "#1 Recall", "#2 Recall")


def table7_rows(named: Sequence[tuple]) -> List[List[str]]:
    """Header plus one row per run: accuracy, COVID-19 recall, No Finding recall per split."""
    header = ["Net"] + [f"{s.capitalize()} {c}" for s in SPLITS for c in TABLE7_COLUMNS]
    rows = [header]
    for i, (name, summary) in enumerate(named, 1):
        metrics = ("Accuracy", f"{summary.class_names[0]} Recall", f"{summary.class_names[1]} Recall")
        cells = [f"({i}) {name}"]
        for split in SPLITS:
            for m in metrics:
                ms = summary.stats[split].get(m)
                cells.append("n/a" if ms is None else format_interval(ms.mean, ms.low, ms.high))
        rows.append(cells)
    return rows


def render_table7(named: Sequence[tuple]) -> str:
    rows = table7_rows(named)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "".join(" | ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip() + "\n" for r in rows)


def plot_csv(named: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "split", "metric", "lhs95", "value", "rhs95"])
    for name, summary in named:
        for split in SPLITS:
            for row in summary.rows:
                ms = summary.stats[split].get(row)
                if ms is not None:
                    w.writerow([name, split, row, repr(ms.low), repr(ms.mean), repr(ms.high)])
    return buf.getvalue()


def cmd_report(args) -> int:
    named = [(Path(d).name, read_summary(d)) for d in args.runs]
    if len(named) == 1:
        sys.stdout.write(render_table3(named[0][1]))
    else:
        sys.stdout.write(render_table7(named))
    if args.plot_csv:
        Path(args.plot_csv).write_text(plot_csv(named))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cxrvgg", description="From-scratch VGG chest X-ray classification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a procedural 3-class dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=30)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def run_flags(q):
        q.add_argument("--config")
        q.add_argument("--arch")
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--image-size", type=int)
        q.add_argument("--data")

    s = sub.add_parser("train", help="train one model on a whole dataset")
    run_flags(s)
    s.add_argument("--out")
    s.add_argument("--name")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    run_flags(s)
    s.add_argument("--out")
    s.add_argument("--name")
    s.add_argument("--force", action="store_true")
    s.add_argument("--parallel-folds", type=int, default=1)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    run_flags(s)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="per-layer parameter counts")
    s.add_argument("arch", help="vgg16, vgg19, mini-vgg or a spec file")
    s.add_argument("--input", default="182x182")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--dropout", type=float, default=0.3)
    s.add_argument("--compare", type=int, help="claimed total to compare against")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("augment-preview", help="write randomly transformed PNGs")
    s.add_argument("--image")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=182)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("report", help="render tables from finished runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--plot-csv", help="also write long-format per-metric CSV here")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    code = EXIT_OK
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        code = args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (DatasetError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (ConfigError, SpecError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except CxrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    print(f"exit_status={code}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
