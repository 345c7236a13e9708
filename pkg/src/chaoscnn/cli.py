"""Command-line front end: ``chaoscnn {train,evaluate,perf,bench-sweep}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from . import perf as P
from .arch import ACTIVATIONS, ArchitectureError, load_spec
from .engine import ConfigError, DivergenceError, TrainConfig, hardware_threads, train, evaluate
from .mnist import DataError, load_mnist
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .report import (RunReport, SweepReport, SweepRow, error_ratio, layer_share_table, speedup,
                     sweep_to_csv, write_report, write_sweep)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATA_ENV = "CHAOS_DATA_DIR"

log = logging.getLogger("chaoscnn")


class UsageError(Exception):
    pass


def thread_list(text: str) -> List[int]:
    try:
        values = [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError:
        raise UsageError(f"threads list '{text}' must be comma-separated integers") from None
    if not values:
        raise UsageError("threads list is empty")
    bad = [v for v in values if v < 1]
    if bad:
        raise UsageError(f"thread counts must be >= 1, got {bad[0]}")
    return values


def _positive(name: str, value: Optional[int]) -> None:
    if value is not None and value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


def _resolve_arch(args):
    try:
        spec = load_spec(args.arch)
    except ArchitectureError as exc:
        raise UsageError(str(exc)) from None
    activation = getattr(args, "activation", None)
    if activation:
        spec = dataclasses.replace(spec, activation=activation)
    return spec


def _resolve_data_dir(args) -> Path:
    directory = args.data or os.environ.get(DATA_ENV)
    if not directory:
        raise UsageError(f"no dataset directory: pass --data or set {DATA_ENV}")
    return Path(directory)


def _train_config(args, threads: int) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, eta0=args.eta, eta_factor=args.eta_factor, threads=threads,
                           seed=args.seed, precision=args.precision,
                           checkpoint_every=getattr(args, "checkpoint_every", 0) or 0,
                           checkpoint_dir=Path(args.out) / "checkpoints")
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _run(spec, data, cfg: TrainConfig, quiet: bool = False):
    """Train and wrap the outcome; returns ``(report, store or None)``."""
    def progress(o):
        if not quiet:
            print(f"epoch {o.epoch + 1:3d}/{cfg.epochs}  eta {o.eta:.3g}  "
                  f"train loss {o.train_loss / max(o.train_images, 1):.4f}  "
                  f"val errors {o.validation.errors}/{o.validation.images}  "
                  f"test errors {o.test.errors}/{o.test.images}  ({o.total_wall:.1f}s)", flush=True)

    start = time.perf_counter()
    diverged, note, outcomes = False, "", []
    try:
        outcomes, store = train(spec, data, cfg, on_epoch=progress)
    except DivergenceError as exc:
        diverged, note, outcomes, store = True, str(exc), exc.outcomes, None
    wall = sum(o.total_wall for o in outcomes) if outcomes else time.perf_counter() - start
    report = RunReport(arch=spec.name, threads=cfg.threads, epochs=cfg.epochs, seed=cfg.seed,
                       precision=cfg.precision, eta0=cfg.eta0, eta_factor=cfg.eta_factor,
                       train_images=len(data.train), test_images=len(data.test),
                       outcomes=tuple(outcomes), wall_seconds=wall, diverged=diverged, note=note)
    return report, store


def cmd_train(args) -> int:
    spec = _resolve_arch(args)
    _positive("limit", args.limit)
    threads = hardware_threads() if args.threads is None else args.threads
    cfg = _train_config(args, threads)
    data_dir = _resolve_data_dir(args)
    data = load_mnist(data_dir, args.limit, validation_split=args.validation_split)
    report, store = _run(spec, data, cfg, args.quiet)
    json_path, csv_path = write_report(report, args.out)
    print(f"report: {json_path}\n        {csv_path}")
    if report.diverged:
        print(f"error: {report.note}", file=sys.stderr)
        return EXIT_DIVERGED
    weights = save_checkpoint(store, Path(args.out) / f"{report.file_stem()}.chw")
    print(f"weights: {weights}")
    for row in layer_share_table(report):
        log.debug("%s %s %.4fs %.1f%%", row.layer_kind, row.direction, row.seconds, row.percent)
    print(f"final test error rate: {100 * report.final_test_error_rate:.2f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = _resolve_arch(args)
    _positive("limit", args.limit)
    _positive("threads", args.threads)
    threads = hardware_threads() if args.threads is None else args.threads
    weights = Path(args.weights)
    if not weights.is_file():
        raise UsageError(f"--weights {weights}: no such file")
    data_dir = _resolve_data_dir(args)
    try:
        store = load_checkpoint(weights, spec)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    data = load_mnist(data_dir, args.limit)
    subset = data.test if args.set == "test" else data.train
    result = evaluate(store, subset.images, subset.labels, threads)
    print(f"{args.set}: {result.errors}/{result.images} misclassified "
          f"({100 * result.error_rate:.2f}%), loss {result.loss:.4f}")
    return EXIT_OK


def _tables(args):
    try:
        model = P.load_params(args.params)
        table = P.load_contention(args.contention)
    except P.PerfModelError as exc:
        raise UsageError(str(exc)) from None
    return model, table


def cmd_perf_predict(args) -> int:
    threads = thread_list(args.threads_list)
    _positive("epochs", args.epochs)
    _positive("images", args.images)
    model, table = _tables(args)
    try:
        rows = P.predict_sweep(args.arch, threads, epochs=args.epochs, images=args.images,
                               test_images=args.test_images, variant=args.variant, model=model, table=table)
    except P.PerfModelError as exc:
        raise UsageError(str(exc)) from None
    lines = ["threads,seconds,minutes,cpi,t_mem_share"]
    lines += [f"{r.threads},{r.seconds:.3f},{r.minutes:.3f},{r.cpi:g},{r.t_mem_share:.4f}" for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.arch}_predict_{args.epochs}ep_{args.variant}.csv"
    path.write_text(text)
    print(f"written: {path}")
    return EXIT_OK


def cmd_perf_measure(args) -> int:
    spec = _resolve_arch(args)
    threads = thread_list(args.threads_list)
    _positive("repetitions", args.repetitions)
    table = P.measure_table(spec, threads, args.repetitions, column=spec.name)
    out = Path(args.output) if args.output else Path(args.out) / f"contention_{spec.name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    P.save_contention(table, out)
    for p, v in table.entries[spec.name].items():
        print(f"{p:6d} threads: {v:.3e} s/image")
    print(f"written: {out}")
    return EXIT_OK


def sweep_predictions(spec_name: str, measured: Sequence[float], threads: Sequence[int], *, images: int,
                      test_images: int, epochs: int, contention: dict, cores: int,
                      model: Optional[P.ModelFile] = None):
    """Model predictions for a local sweep, calibrated on its first entry.

    The shipped FProp/BProp counts are used with Prep = 0 (start-up is
    excluded from measured times) and CPI based on the host's thread count.
    OperationFactor is fitted so the first entry is predicted exactly.
    """
    model = model or P.load_params()
    base = model.params(spec_name, i=images, it=test_images, ep=epochs, p=threads[0],
                        contention=contention[threads[0]]).with_(prep=0.0, cores=cores)
    factor = P.calibrate_operation_factor(base, measured[0])
    out = []
    for p in threads:
        params = base.with_(p=p, contention=contention[p], operation_factor=factor)
        out.append(P.predict_time(spec_name, params))
    return factor, out


def cmd_bench_sweep(args) -> int:
    spec = _resolve_arch(args)
    threads = thread_list(args.threads_list)
    _positive("limit", args.limit)
    cfg0 = _train_config(args, threads[0])
    data_dir = _resolve_data_dir(args)
    model, _ = _tables(args) if args.params else (P.load_params(), None)
    if spec.name not in model.architectures:
        raise UsageError(f"no model constants for architecture '{spec.name}'; add them with --params")
    contention_table = None
    if args.contention:
        try:
            contention_table = P.load_contention(args.contention)
            contention = {p: contention_table.lookup(spec.name, p) for p in threads}
        except P.PerfModelError as exc:
            raise UsageError(str(exc)) from None
    data = load_mnist(data_dir, args.limit)
    if contention_table is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            contention = P.measure_points(spec, threads, args.repetitions)
    reports = []
    for p in threads:
        cfg = dataclasses.replace(cfg0, threads=p)
        report, _ = _run(spec, data, cfg, quiet=True)
        if report.diverged:
            print(f"error: {report.note}", file=sys.stderr)
            return EXIT_DIVERGED
        write_report(report, args.out)
        reports.append(report)
        print(f"{p:4d} threads: {report.wall_seconds:.2f}s  test error {100 * report.final_test_error_rate:.2f}%",
              flush=True)
    measured = [r.wall_seconds for r in reports]
    factor, predicted = sweep_predictions(spec.name, measured, threads, images=len(data.train),
                                          test_images=len(data.test), epochs=cfg0.epochs,
                                          contention=contention, cores=hardware_threads(), model=model)
    base_err = reports[0].final_test_error_rate
    rows = tuple(
        SweepRow(threads=p, measured_seconds=m, speedup=speedup(measured[0], m), predicted_seconds=pr,
                 deviation=P.deviation(m, pr), test_error_rate=r.final_test_error_rate,
                 error_ratio=error_ratio(r.final_test_error_rate, base_err) if base_err > 0 else None)
        for p, m, pr, r in zip(threads, measured, predicted, reports))
    sweep = SweepReport(arch=spec.name, epochs=cfg0.epochs, images=len(data.train),
                        test_images=len(data.test), operation_factor=factor, rows=rows)
    json_path, csv_path = write_sweep(sweep, args.out)
    sys.stdout.write(sweep_to_csv(sweep))
    print(f"average deviation: {100 * sweep.average_deviation:.2f}%")
    print(f"written: {json_path}\n         {csv_path}")
    return EXIT_OK


def _add_train_flags(sp, epochs_default: int) -> None:
    sp.add_argument("--arch", required=True, help="small, medium, large or a config file")
    sp.add_argument("--activation", choices=ACTIVATIONS, help="override the architecture's activation")
    sp.add_argument("--epochs", type=int, default=epochs_default)
    sp.add_argument("--eta", type=float, default=0.001, help="initial learning rate")
    sp.add_argument("--eta-factor", type=float, default=0.9, help="per-epoch learning-rate multiplier")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--data", help=f"MNIST directory (default: ${DATA_ENV})")
    sp.add_argument("--limit", type=int, help="use only the first K training images (test shrinks alike)")
    sp.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sp.add_argument("--out", default="./runs", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chaoscnn", description="CHAOS parallel CNN training and performance model")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a network and write a report")
    _add_train_flags(sp, 70)
    sp.add_argument("--threads", type=int, help="worker threads (default: hardware threads)")
    sp.add_argument("--validation-split", type=int, default=0,
                    help="hold out this many training images for validation (default: validate on train)")
    sp.add_argument("--checkpoint-every", type=int, default=0, help="also save weights every N epochs")
    sp.add_argument("-q", "--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="classify a set with saved weights")
    sp.add_argument("--arch", required=True)
    sp.add_argument("--activation", choices=ACTIVATIONS)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--set", choices=("test", "train"), default="test")
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_evaluate)

    def add_predict(p):
        p.add_argument("--arch", required=True, choices=P.ARCH_NAMES)
        p.add_argument("--threads-list", required=True, help='e.g. "480,960,1920,3840"')
        p.add_argument("--epochs", type=int, default=70)
        p.add_argument("--images", type=int, default=60000)
        p.add_argument("--test-images", type=int, default=10000)
        p.add_argument("--variant", choices=("a", "b"), default="a",
                       help="a: operation counts; b: measured start-up time")
        p.add_argument("--params", help="model parameter JSON (default: shipped)")
        p.add_argument("--contention", help="contention CSV (default: shipped)")
        p.add_argument("--out", default="./runs")
        p.set_defaults(func=cmd_perf_predict)

    def add_measure(p):
        p.add_argument("--arch", required=True)
        p.add_argument("--threads-list", required=True)
        p.add_argument("--repetitions", type=int, default=200)
        p.add_argument("--output", help="CSV path (default: <out>/contention_<arch>.csv)")
        p.add_argument("--out", default="./runs")
        p.set_defaults(func=cmd_perf_measure)

    perf = sub.add_parser("perf", help="performance model")
    perf_sub = perf.add_subparsers(dest="perf_command", required=True)
    add_predict(perf_sub.add_parser("predict", help="predict execution times"))
    add_measure(perf_sub.add_parser("measure", help="measure local memory contention"))
    add_predict(sub.add_parser("perf-predict", help="alias of 'perf predict'"))
    add_measure(sub.add_parser("perf-measure", help="alias of 'perf measure'"))

    sp = sub.add_parser("bench-sweep", help="train at several thread counts and compare with the model")
    _add_train_flags(sp, 1)
    sp.add_argument("--threads-list", required=True, help='e.g. "1,2,4"')
    sp.add_argument("--contention", help="contention CSV with a column for the architecture "
                                         "(default: measure locally)")
    sp.add_argument("--repetitions", type=int, default=50, help="repetitions for local contention probes")
    sp.add_argument("--params", help="model parameter JSON (default: shipped)")
    sp.set_defaults(func=cmd_bench_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
