"""Run reports: per-epoch results, layer time shares, speedups, JSON and CSV.

JSON is the lossless format (``from_json(to_json(r)) == r``). CSV is the
plot-ready one: a single header, then one ``epoch`` row per epoch and one
``layer`` row per (layer kind, direction), distinguished by the ``section``
column.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import EpochOutcome, LayerTiming, PhaseResult

SCHEMA_VERSION = 1
SWEEP_SCHEMA_VERSION = 1

CSV_FIELDS = (
    "section", "epoch", "eta", "train_loss", "train_images",
    "validation_errors", "validation_loss", "validation_images",
    "test_errors", "test_loss", "test_images", "test_error_rate",
    "train_seconds", "validation_seconds", "test_seconds",
    "layer_kind", "direction", "seconds", "percent",
)

PathLike = Union[str, Path]


class ReportError(OSError):
    pass


def host_description() -> Dict[str, object]:
    try:
        threads = len(os.sched_getaffinity(0))
    except AttributeError:
        threads = os.cpu_count() or 1
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "hardware_threads": threads,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass(frozen=True)
class LayerShare:
    layer_kind: str
    direction: str
    seconds: float
    percent: float


@dataclass(frozen=True)
class RunReport:
    arch: str
    threads: int
    epochs: int
    seed: int
    precision: str
    eta0: float
    eta_factor: float
    train_images: int
    test_images: int
    outcomes: Tuple[EpochOutcome, ...]
    wall_seconds: float
    host: Dict[str, object] = field(default_factory=host_description)
    diverged: bool = False
    note: str = ""
    baseline_wall_seconds: Optional[float] = None

    def __post_init__(self):
        if not self.diverged and len(self.outcomes) != self.epochs:
            raise ValueError(f"report holds {len(self.outcomes)} epochs but {self.epochs} were configured")

    @property
    def final(self) -> Optional[EpochOutcome]:
        return self.outcomes[-1] if self.outcomes else None

    @property
    def final_test_error_rate(self) -> float:
        return self.final.test.error_rate if self.final else float("nan")

    @property
    def speedup(self) -> Optional[float]:
        if self.baseline_wall_seconds is None:
            return None
        return speedup(self.baseline_wall_seconds, self.wall_seconds)

    def file_stem(self) -> str:
        return report_stem(self.arch, self.threads, self.epochs, self.seed)


def report_stem(arch: str, threads: int, epochs: int, seed: int) -> str:
    return f"{arch}_{threads}t_{epochs}ep_{seed}"


# -- metrics --------------------------------------------------------------------

def speedup(t_base: float, t: float) -> float:
    """Relative speed of a run taking ``t`` against one taking ``t_base``."""
    if t_base <= 0 or t <= 0:
        raise ValueError("speedup needs two positive times")
    return t_base / t


def error_ratio(parallel_error: float, baseline_error: float) -> float:
    """Ending error of a parallel run divided by the baseline's."""
    if baseline_error <= 0:
        raise ValueError("baseline error must be positive")
    return parallel_error / baseline_error


def layer_share_table(report: Union[RunReport, Sequence[EpochOutcome]]) -> List[LayerShare]:
    """Average seconds per (layer kind, direction) and their share of layer time.

    Seconds are averaged over worker instances and epochs, so the numbers
    describe one worker's epoch.
    """
    outcomes = report.outcomes if isinstance(report, RunReport) else tuple(report)
    totals: Dict[Tuple[str, str], float] = {}
    for o in outcomes:
        for lt in o.layer_times:
            for direction, sec in (("forward", lt.forward_seconds), ("backward", lt.backward_seconds)):
                key = (lt.kind, direction)
                totals[key] = totals.get(key, 0.0) + sec / max(o.workers, 1)
    n = max(len(outcomes), 1)
    grand = sum(totals.values())
    rows = []
    for (kind, direction), sec in totals.items():
        rows.append(LayerShare(kind, direction, sec / n, 100.0 * sec / grand if grand > 0 else 0.0))
    return rows


def convolution_share(rows: Sequence[LayerShare]) -> float:
    return sum(r.percent for r in rows if r.layer_kind == "convolutional")


# -- JSON -----------------------------------------------------------------------

def to_dict(report: RunReport) -> Dict[str, object]:
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(asdict(report))
    doc["layer_table"] = [asdict(r) for r in layer_share_table(report)]
    return doc


def to_json(report: RunReport) -> str:
    return json.dumps(to_dict(report), indent=2, sort_keys=False)


def _outcome_from(d: Dict[str, object]) -> EpochOutcome:
    return EpochOutcome(
        epoch=d["epoch"], eta=d["eta"], train_loss=d["train_loss"], train_images=d["train_images"],
        validation=PhaseResult(**d["validation"]), test=PhaseResult(**d["test"]),
        wall_times=tuple((k, v) for k, v in d["wall_times"]),
        layer_times=tuple(LayerTiming(**lt) for lt in d["layer_times"]),
        workers=d["workers"], worker_images=tuple(d.get("worker_images", ())))


def from_dict(doc: Dict[str, object]) -> RunReport:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema_version {version!r}")
    fields = {k: v for k, v in doc.items() if k not in ("schema_version", "layer_table", "outcomes")}
    return RunReport(outcomes=tuple(_outcome_from(o) for o in doc["outcomes"]), **fields)


def from_json(text: str) -> RunReport:
    return from_dict(json.loads(text))


# -- CSV ------------------------------------------------------------------------

def csv_rows(report: RunReport) -> List[Dict[str, object]]:
    rows = []
    for o in report.outcomes:
        rows.append({
            "section": "epoch", "epoch": o.epoch, "eta": o.eta, "train_loss": o.train_loss,
            "train_images": o.train_images,
            "validation_errors": o.validation.errors, "validation_loss": o.validation.loss,
            "validation_images": o.validation.images,
            "test_errors": o.test.errors, "test_loss": o.test.loss, "test_images": o.test.images,
            "test_error_rate": o.test.error_rate,
            "train_seconds": o.wall("train"), "validation_seconds": o.wall("validation"),
            "test_seconds": o.wall("test"),
        })
    for r in layer_share_table(report):
        rows.append({"section": "layer", "layer_kind": r.layer_kind, "direction": r.direction,
                     "seconds": r.seconds, "percent": r.percent})
    return rows


def to_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, restval="", lineterminator="\n")
    w.writeheader()
    w.writerows(csv_rows(report))
    return buf.getvalue()


def serialize(report: RunReport, fmt: str = "json") -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    raise ValueError(f"unknown format '{fmt}'")


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from None
    return path


def write_report(report: RunReport, out_dir: PathLike) -> Tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv`` into ``out_dir``."""
    out = Path(out_dir)
    stem = report.file_stem()
    return _write(out / f"{stem}.json", to_json(report)), _write(out / f"{stem}.csv", to_csv(report))


def read_report(path: PathLike) -> RunReport:
    try:
        return from_json(Path(path).read_text())
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from None


# -- sweeps ---------------------------------------------------------------------

SWEEP_FIELDS = ("threads", "measured_seconds", "speedup", "predicted_seconds", "deviation",
                "test_error_rate", "error_ratio")


@dataclass(frozen=True)
class SweepRow:
    threads: int
    measured_seconds: float
    speedup: float
    predicted_seconds: float
    deviation: float
    test_error_rate: float
    error_ratio: Optional[float]


@dataclass(frozen=True)
class SweepReport:
    arch: str
    epochs: int
    images: int
    test_images: int
    operation_factor: float
    rows: Tuple[SweepRow, ...]
    host: Dict[str, object] = field(default_factory=host_description)

    @property
    def average_deviation(self) -> float:
        return sum(r.deviation for r in self.rows) / len(self.rows) if self.rows else 0.0


def sweep_to_csv(sweep: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in sweep.rows:
        w.writerow([r.threads, r.measured_seconds, r.speedup, r.predicted_seconds, r.deviation,
                    r.test_error_rate, "" if r.error_ratio is None else r.error_ratio])
    return buf.getvalue()


def sweep_to_json(sweep: SweepReport) -> str:
    doc = {"schema_version": SWEEP_SCHEMA_VERSION, **asdict(sweep), "average_deviation": sweep.average_deviation}
    return json.dumps(doc, indent=2)


def write_sweep(sweep: SweepReport, out_dir: PathLike) -> Tuple[Path, Path]:
    out = Path(out_dir)
    stem = f"{sweep.arch}_sweep_{sweep.epochs}ep"
    return _write(out / f"{stem}.json", sweep_to_json(sweep)), _write(out / f"{stem}.csv", sweep_to_csv(sweep))
