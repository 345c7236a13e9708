"""Analytical execution-time model for CHAOS training, plus a contention probe.

The model predicts the wall time of ``ep`` epochs over ``i`` training and
``it`` test images with ``p`` threads::

    T = T_comp + T_mem
    T_comp = [ seq/s + ((FProp+BProp)/s * i/p * ep      # training
                        + FProp/s * i/p * ep            # validation
                        + FProp/s * it/p * ep) * CPI    # testing
             ] * OperationFactor
    T_mem  = contention(p) * ep * i / p

with ``seq = Prep + 4i + 2it + 10ep`` operations. Variant ``op_counts`` ("a")
uses exactly that. Variant ``measured_times`` ("b") replaces the sequential
operation count by the measured start-up time ``T_Prep`` in seconds, added
outside the OperationFactor scaling.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels as K
from .arch import ArchitectureSpec, derived_counts

ARCH_NAMES = ("small", "medium", "large")
VARIANTS = {"a": "op_counts", "op_counts": "op_counts", "b": "measured_times", "measured_times": "measured_times"}
# thread counts of the shipped table that were measured; larger rows are earlier predictions
SHIPPED_MEASURED_MAX = 240

PathLike = Union[str, Path]


class PerfModelError(ValueError):
    pass


class MissingContentionError(PerfModelError):
    pass


@dataclass(frozen=True)
class ArchConstants:
    """Per-architecture inputs: operation counts and measured per-image times."""

    fprop: float
    bprop: float
    prep: float
    t_fprop: float
    t_bprop: float
    t_prep: float


@dataclass(frozen=True)
class PerfParams:
    i: int
    it: int
    ep: int
    p: int
    fprop: float
    bprop: float
    prep: float
    t_fprop: float = 0.0
    t_bprop: float = 0.0
    t_prep: float = 0.0
    s: float = 1.238e9
    operation_factor: float = 15.0
    cores: int = 61
    contention: Optional[float] = None

    @property
    def cpi(self) -> float:
        return cpi_for(self.p, self.cores)

    # p_i and p_it: train and test work both spread over all p threads
    @property
    def p_i(self) -> int:
        return self.p

    @property
    def p_it(self) -> int:
        return self.p

    def with_(self, **changes) -> "PerfParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class ModelFile:
    s: float
    operation_factor: float
    cores: int
    architectures: Mapping[str, ArchConstants]

    def params(self, arch: str, *, i: int, it: int, ep: int, p: int, contention: Optional[float] = None) -> PerfParams:
        try:
            c = self.architectures[arch]
        except KeyError:
            raise PerfModelError(f"no model constants for architecture '{arch}'") from None
        return PerfParams(i=i, it=it, ep=ep, p=p, fprop=c.fprop, bprop=c.bprop, prep=c.prep,
                          t_fprop=c.t_fprop, t_bprop=c.t_bprop, t_prep=c.t_prep, s=self.s,
                          operation_factor=self.operation_factor, cores=self.cores, contention=contention)


def load_params(path: Optional[PathLike] = None) -> ModelFile:
    """Read a model-parameter JSON file (the shipped defaults when ``path`` is None)."""
    if path is None:
        text = resources.files("chaoscnn.data").joinpath("perf_params.json").read_text()
        source = "shipped perf_params.json"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise PerfModelError(f"{path}: {exc.strerror}") from None
        source = str(path)
    try:
        doc = json.loads(text)
        archs = {name: ArchConstants(**{k: float(v) for k, v in vals.items()})
                 for name, vals in doc["architectures"].items()}
        return ModelFile(s=float(doc.get("s", 1.238e9)), operation_factor=float(doc.get("operation_factor", 15)),
                         cores=int(doc.get("cores", 61)), architectures=archs)
    except (KeyError, TypeError, ValueError) as exc:
        raise PerfModelError(f"{source}: malformed parameter file ({exc})") from None


def cpi_for(p: int, cores: int = 61) -> float:
    """CPI factor from hardware threads per core: 1 up to 2, 1.5 at 3, 2 from 4 on."""
    if p < 1:
        raise PerfModelError(f"thread count must be >= 1, got {p}")
    per_core = math.ceil(p / cores)
    if per_core <= 2:
        return 1.0
    if per_core == 3:
        return 1.5
    return 2.0


# -- contention ---------------------------------------------------------------

@dataclass(frozen=True)
class ContentionTable:
    """Seconds of contention per image, keyed by architecture then thread count.

    Rows at or below ``measured_max`` are measurements and feed the
    extrapolation; rows above it are kept as given (for the shipped table they
    are earlier predictions). ``measured_max=None`` treats every row as measured.
    """

    entries: Mapping[str, Mapping[int, float]]
    measured_max: Optional[int] = None

    def __post_init__(self):
        for arch, col in self.entries.items():
            threads = sorted(col)
            values = [col[t] for t in threads]
            if any(v < 0 for v in values):
                raise PerfModelError(f"contention for '{arch}' has a negative entry")
            if any(b < a for a, b in zip(values, values[1:])):
                raise PerfModelError(f"contention for '{arch}' is not non-decreasing in thread count")

    @property
    def architectures(self) -> Tuple[str, ...]:
        return tuple(self.entries)

    def measured(self, arch: str) -> Dict[int, float]:
        col = self._column(arch)
        if self.measured_max is None:
            return dict(col)
        return {t: v for t, v in col.items() if t <= self.measured_max}

    def _column(self, arch: str) -> Mapping[int, float]:
        try:
            return self.entries[arch]
        except KeyError:
            raise MissingContentionError(f"contention table has no column '{arch}'") from None

    def lookup(self, arch: str, p: int) -> float:
        col = self._column(arch)
        if p in col:
            return float(col[p])
        if p > max(self.measured(arch)):
            return extrapolate_contention(self, p, arch)
        raise MissingContentionError(
            f"no contention entry for {p} threads ({arch}); measured points are {sorted(col)} "
            "and only counts above the largest one are extrapolated")


EXTRAPOLATION_RULES = ("least_squares", "proportional")


def extrapolate_contention(table: Union[ContentionTable, Mapping[int, float]], p: int, arch: Optional[str] = None,
                           rule: str = "least_squares") -> float:
    """Contention at ``p`` threads beyond the largest measured count.

    Measured thread counts return their measured value. The default rule fits
    a least-squares line through all measured points and floors it at the last
    measurement so the table stays non-decreasing. ``rule="proportional"``
    scales the last measurement by ``p / p_last`` instead.
    """
    if rule not in EXTRAPOLATION_RULES:
        raise PerfModelError(f"unknown extrapolation rule '{rule}'")
    if isinstance(table, ContentionTable):
        if arch is None:
            raise PerfModelError("arch is required when passing a ContentionTable")
        points = table.measured(arch)
    else:
        points = dict(table)
    if not points:
        raise MissingContentionError("no measured contention points")
    if p in points:
        return float(points[p])
    last = max(points)
    if p < last:
        raise MissingContentionError(f"{p} threads lies inside the measured range; only p > {last} is extrapolated")
    if rule == "proportional" or len(points) == 1:
        return float(points[last] * p / last)
    threads = np.array(sorted(points), dtype=float)
    values = np.array([points[int(t)] for t in threads], dtype=float)
    slope, intercept = np.polyfit(threads, values, 1)
    return float(max(intercept + slope * p, points[last]))


def load_contention(path: Optional[PathLike] = None, measured_max: Optional[int] = None) -> ContentionTable:
    """Read a ``threads,<arch>,...`` CSV; ``path=None`` loads the shipped table."""
    if path is None:
        text = resources.files("chaoscnn.data").joinpath("contention.csv").read_text()
        source = "shipped contention.csv"
        if measured_max is None:
            measured_max = SHIPPED_MEASURED_MAX
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise PerfModelError(f"{path}: {exc.strerror}") from None
        source = str(path)
    rows = list(csv.reader(line for line in text.splitlines() if line.strip() and not line.startswith("#")))
    if not rows or rows[0][0].strip() != "threads":
        raise PerfModelError(f"{source}: first column must be 'threads'")
    archs = [h.strip() for h in rows[0][1:]]
    entries: Dict[str, Dict[int, float]] = {a: {} for a in archs}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            t = int(row[0])
            for a, cell in zip(archs, row[1:]):
                if cell.strip():
                    entries[a][t] = float(cell)
        except ValueError:
            raise PerfModelError(f"{source}: line {lineno}: not a number") from None
    return ContentionTable(entries=entries, measured_max=measured_max)


def save_contention(table: ContentionTable, path: PathLike) -> Path:
    path = Path(path)
    archs = list(table.architectures)
    threads = sorted({t for a in archs for t in table.entries[a]})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threads", *archs])
        for t in threads:
            w.writerow([t, *[repr(float(table.entries[a][t])) if t in table.entries[a] else "" for a in archs]])
    return path


# -- model ----------------------------------------------------------------------

def t_mem(params: PerfParams, contention: Optional[float] = None) -> float:
    c = params.contention if contention is None else contention
    if c is None:
        raise MissingContentionError(f"no contention value for p={params.p}")
    return c * params.ep * params.i / params.p


def _check_positive(params: PerfParams, variant: str) -> None:
    if params.p < 1:
        raise PerfModelError(f"thread count must be >= 1, got {params.p}")
    for name in ("s", "operation_factor", "fprop", "bprop", "cores"):
        if getattr(params, name) <= 0:
            raise PerfModelError(f"{name} must be positive")
    for name in ("i", "it", "ep", "prep"):
        if getattr(params, name) < 0:
            raise PerfModelError(f"{name} must not be negative")
    if variant == "measured_times" and params.t_prep < 0:
        raise PerfModelError("t_prep must not be negative")


def per_image_block(params: PerfParams) -> float:
    """Training, validation and testing work in seconds before OperationFactor."""
    p = params
    train = (p.fprop + p.bprop) / p.s * (p.i / p.p_i) * p.ep
    validation = p.fprop / p.s * (p.i / p.p_i) * p.ep
    test = p.fprop / p.s * (p.it / p.p_it) * p.ep
    return (train + validation + test) * p.cpi


def t_comp(params: PerfParams, variant: str = "op_counts") -> float:
    variant = _variant(variant)
    p = params
    block = per_image_block(p)
    if variant == "op_counts":
        sequential = (p.prep + 4 * p.i + 2 * p.it + 10 * p.ep) / p.s
        return (sequential + block) * p.operation_factor
    return p.t_prep + block * p.operation_factor


def _variant(variant: str) -> str:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise PerfModelError(f"unknown variant '{variant}'; use a/op_counts or b/measured_times") from None


def predict_time(arch: str, params: PerfParams, variant: str = "op_counts",
                 table: Optional[ContentionTable] = None) -> float:
    """Predicted seconds; contention from ``params.contention`` or ``table``."""
    variant = _variant(variant)
    _check_positive(params, variant)
    contention = params.contention
    if contention is None:
        table = table if table is not None else load_contention()
        contention = table.lookup(arch, params.p)
    return t_comp(params, variant) + t_mem(params, contention)


@dataclass(frozen=True)
class Prediction:
    threads: int
    seconds: float
    cpi: float
    t_mem_seconds: float

    @property
    def minutes(self) -> float:
        return self.seconds / 60.0

    @property
    def t_mem_share(self) -> float:
        return self.t_mem_seconds / self.seconds if self.seconds else 0.0


def predict_sweep(arch: str, threads: Iterable[int], *, epochs: int, images: int, test_images: int,
                  variant: str = "op_counts", model: Optional[ModelFile] = None,
                  table: Optional[ContentionTable] = None) -> List[Prediction]:
    model = model or load_params()
    table = table or load_contention()
    rows = []
    for p in threads:
        if p < 1:
            raise PerfModelError(f"thread count must be >= 1, got {p}")
        c = table.lookup(arch, p)
        params = model.params(arch, i=images, it=test_images, ep=epochs, p=p, contention=c)
        rows.append(Prediction(threads=p, seconds=predict_time(arch, params, variant),
                               cpi=params.cpi, t_mem_seconds=t_mem(params)))
    return rows


def deviation(measured: float, predicted: float) -> float:
    """|m - p| / p."""
    if predicted <= 0:
        raise PerfModelError("predicted time must be positive")
    return abs(measured - predicted) / predicted


def average_deviation(pairs: Iterable[Tuple[float, float]]) -> float:
    values = [deviation(m, p) for m, p in pairs]
    return sum(values) / len(values) if values else 0.0


def calibrate_operation_factor(params: PerfParams, measured_seconds: float, variant: str = "op_counts") -> float:
    """OperationFactor that makes the model hit ``measured_seconds`` exactly."""
    base = params.with_(operation_factor=1.0)
    fixed = t_mem(base, base.contention or 0.0)
    if _variant(variant) == "measured_times":
        fixed += base.t_prep
    scaled = t_comp(base, variant) - (base.t_prep if _variant(variant) == "measured_times" else 0.0)
    if scaled <= 0:
        raise PerfModelError("cannot calibrate: the operation-count part of the model is zero")
    return max(measured_seconds - fixed, 0.0) / scaled


# -- contention probe -----------------------------------------------------------

def _publication_layout(arch: ArchitectureSpec) -> Tuple[np.ndarray, np.ndarray]:
    sizes = np.array([c.weights for c in derived_counts(arch) if c.weights], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return offsets, sizes


def _timed_publication(W, offsets, sizes, g, repetitions, workers) -> float:
    barrier = threading.Barrier(workers + 1)
    eta = W.dtype.type(1e-7)

    def body():
        barrier.wait()
        K.contention_worker(W, offsets, sizes, g, repetitions, eta)

    threads = [threading.Thread(target=body) for _ in range(workers)]
    for t in threads:
        t.start()
    barrier.wait()
    start = time.perf_counter()
    for t in threads:
        t.join()
    return time.perf_counter() - start


def measure_contention(arch: ArchitectureSpec, p: int, repetitions: int = 200, *,
                       hardware: Optional[int] = None, trials: int = 3) -> float:
    """Added seconds per image when ``p`` workers publish concurrently.

    Every worker replays the per-layer atomic publication of ``repetitions``
    synthetic images into one shared array laid out like the architecture's
    weights. The result is the per-image wall time minus the single-worker
    time (best of ``trials``), floored at zero; p = 1 is zero by definition.
    """
    from .engine import hardware_threads

    if p < 1 or repetitions < 1:
        raise PerfModelError("p and repetitions must be >= 1")
    hw = hardware if hardware is not None else hardware_threads()
    if p > hw:
        warnings.warn(f"measuring contention with {p} threads on {hw} hardware threads; "
                      "the value includes time-slicing, not just memory contention", RuntimeWarning, stacklevel=2)
    offsets, sizes = _publication_layout(arch)
    W = np.zeros(int(sizes.sum()), dtype=np.float32)
    g = np.random.default_rng(0).standard_normal(int(sizes.max())).astype(np.float32)
    K.contention_worker(W, offsets, sizes, g, 1, W.dtype.type(1e-7))  # compile and warm caches
    if p == 1:
        return 0.0
    base = min(_timed_publication(W, offsets, sizes, g, repetitions, 1) for _ in range(trials))
    loaded = min(_timed_publication(W, offsets, sizes, g, repetitions, p) for _ in range(trials))
    return max(0.0, (loaded - base) / repetitions)


def measure_points(arch: ArchitectureSpec, threads: Sequence[int], repetitions: int = 200) -> Dict[int, float]:
    """Raw :func:`measure_contention` values for each thread count."""
    return {p: measure_contention(arch, p, repetitions) for p in sorted(set(threads))}


def measure_table(arch: ArchitectureSpec, threads: Sequence[int], repetitions: int = 200,
                  column: Optional[str] = None) -> ContentionTable:
    """Measure a local table over ``threads``.

    Timing noise can make a raw value dip below a smaller thread count's; such
    dips are lifted to the running maximum (with a warning) so the table
    satisfies the non-decreasing invariant.
    """
    raw = measure_points(arch, threads, repetitions)
    values, running = {}, 0.0
    for p, v in raw.items():
        if v < running:
            warnings.warn(f"contention at {p} threads ({v:.3g}s) below a smaller count; using {running:.3g}s",
                          RuntimeWarning, stacklevel=2)
        running = max(running, v)
        values[p] = running
    return ContentionTable(entries={column or arch.name: values})
