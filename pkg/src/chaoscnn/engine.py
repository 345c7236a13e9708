"""CHAOS parallel training: shared weights, private workers, phase barriers.

``p`` :class:`~chaoscnn.nn.NetworkInstance` objects share one
:class:`~chaoscnn.nn.WeightStore`. Each phase starts ``p`` Python threads; every
thread spends the whole phase inside one GIL-free compiled loop that claims
images from an atomic counter, so workers really run in parallel. Gradients are
computed per layer into private scratch and published with element-wise atomic
adds; no lock is ever taken on the weights. Joining all threads is the barrier
between phases and epochs.
"""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels as K
from .arch import ArchitectureSpec
from .nn import NetworkInstance, WeightStore, init_weights, resolve_dtype, save_checkpoint

log = logging.getLogger(__name__)

PHASES = ("train", "validation", "test")


class ConfigError(ValueError):
    """Invalid training configuration, raised before any worker starts."""


class DivergenceError(RuntimeError):
    """A worker produced a non-finite loss; training was aborted."""

    def __init__(self, epoch: int, worker: int, image: int, outcomes=()):
        super().__init__(f"non-finite loss in epoch {epoch} on worker {worker} (image {image})")
        self.epoch = epoch
        self.worker = worker
        self.image = image
        self.outcomes = list(outcomes)


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    eta0: float = 0.001
    eta_factor: float = 0.9
    threads: int = 1
    seed: int = 0
    precision: str = "f32"
    checkpoint_every: int = 0
    checkpoint_dir: Optional[Path] = None

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < float(self.eta_factor) <= 1.0:
            raise ConfigError(f"eta_factor must lie in (0, 1], got {self.eta_factor}")
        if not (math.isfinite(self.eta0) and self.eta0 >= 0):
            raise ConfigError(f"eta0 must be a finite non-negative number, got {self.eta0}")
        if int(self.threads) < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.checkpoint_every and self.checkpoint_dir is None:
            raise ConfigError("checkpoint_every needs a checkpoint_dir")
        try:
            resolve_dtype(self.precision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class PhaseResult:
    images: int
    errors: int
    loss: float

    @property
    def error_rate(self) -> float:
        return self.errors / self.images if self.images else 0.0


@dataclass(frozen=True)
class LayerTiming:
    """Per-layer time summed over all workers of one epoch (every phase)."""

    layer: int
    kind: str
    forward_seconds: float
    backward_seconds: float


@dataclass(frozen=True)
class EpochOutcome:
    epoch: int
    eta: float
    train_loss: float
    train_images: int
    validation: PhaseResult
    test: PhaseResult
    wall_times: Tuple[Tuple[str, float], ...]
    layer_times: Tuple[LayerTiming, ...]
    workers: int
    worker_images: Tuple[int, ...] = ()

    def wall(self, phase: str) -> float:
        return dict(self.wall_times)[phase]

    @property
    def total_wall(self) -> float:
        return sum(t for _, t in self.wall_times)


def eta_schedule(eta0: float, factor: float, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based): eta0 * factor**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return eta0 * factor ** epoch


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """The fixed pseudo-random visiting order of one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n).astype(np.int64)


@dataclass
class PhaseLog:
    """Start/end stamps of every worker in every phase, for barrier checks."""

    entries: List[Tuple[int, str, int, int, int]] = field(default_factory=list)

    def add(self, epoch, phase, worker, start_ns, end_ns):
        self.entries.append((epoch, phase, worker, start_ns, end_ns))

    def span(self, epoch: int, phase: str) -> Tuple[int, int]:
        rows = [(s, e) for ep, ph, _, s, e in self.entries if ep == epoch and ph == phase]
        return min(r[0] for r in rows), max(r[1] for r in rows)


@dataclass(frozen=True)
class ClaimRecord:
    """Who processed which position of the visiting order in one phase."""

    order: np.ndarray
    owner: np.ndarray
    hits: np.ndarray

    def per_worker(self, workers: int) -> np.ndarray:
        return np.bincount(self.owner, minlength=workers)


def _run_workers(target: Callable[[int], None], workers: int, log_fn=None) -> None:
    """Run ``target(w)`` for every worker and return after all have finished."""
    errors: List[BaseException] = []

    def body(w):
        start = time.monotonic_ns()
        try:
            target(w)
        except BaseException as exc:  # surfaced after the barrier
            errors.append(exc)
        if log_fn is not None:
            log_fn(w, start, time.monotonic_ns())

    if workers == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(w,), name=f"chaos-worker-{w}") for w in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]


def _as_dtype(images: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(images, dtype=dtype)


def chaos_backprop(inst: NetworkInstance, eta: float) -> None:
    """Back-propagate the filled output delta, publishing each layer's update.

    For every layer from the output down: propagate delta with the shared
    weights, compute the gradient privately, then atomically add -eta*g.
    """
    K.chaos_backprop(inst.table, inst.store.data, inst.y, inst.delta, inst.argmax, inst.g,
                     inst.store.dtype.type(eta), inst.timing)


def train_phase(workers: Sequence[NetworkInstance], images: np.ndarray, labels: np.ndarray,
                eta: float, order: Optional[np.ndarray] = None, *, log_fn=None):
    """Train once over ``images`` (in ``order``) with all workers.

    Returns ``(loss_sum, ClaimRecord)``; raises :class:`DivergenceError` with
    ``epoch=-1`` when a loss is non-finite (the caller fills in the epoch).
    """
    n = len(labels)
    order = np.arange(n, dtype=np.int64) if order is None else np.ascontiguousarray(order, dtype=np.int64)
    store = workers[0].store
    images = _as_dtype(images, store.dtype)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    counter = np.zeros(1, dtype=np.int64)
    abort = np.zeros(1, dtype=np.int64)
    hits = np.zeros(len(order), dtype=np.int64)
    owner = np.full(len(order), -1, dtype=np.int64)
    stats = np.zeros((len(workers), K.NSTATS), dtype=np.float64)
    eta_t = store.dtype.type(eta)

    def target(w):
        inst = workers[w]
        K.train_worker(inst.table, store.data, inst.x, inst.y, inst.delta, inst.argmax, inst.g,
                       images, labels, order, counter, hits, owner, w, eta_t, abort,
                       inst.timing, stats[w])

    _run_workers(target, len(workers), log_fn)
    bad = np.flatnonzero(stats[:, K.ST_DIVERGED])
    if bad.size:
        w = int(bad[0])
        raise DivergenceError(-1, w, int(stats[w, K.ST_BAD_INDEX]))
    record = ClaimRecord(order=order, owner=owner, hits=hits)
    if not (hits == 1).all():
        raise RuntimeError("image-claim accounting broken: some images were not trained exactly once")
    return float(stats[:, K.ST_LOSS].sum()), record


def evaluate_phase(workers: Sequence[NetworkInstance], images: np.ndarray, labels: np.ndarray,
                   *, log_fn=None) -> PhaseResult:
    """Forward-only pass over a set; per-worker tallies merged after the barrier."""
    n = len(labels)
    store = workers[0].store
    images = _as_dtype(images, store.dtype)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    order = np.arange(n, dtype=np.int64)
    counter = np.zeros(1, dtype=np.int64)
    hits = np.zeros(n, dtype=np.int64)
    stats = np.zeros((len(workers), K.NSTATS), dtype=np.float64)

    def target(w):
        inst = workers[w]
        K.eval_worker(inst.table, store.data, inst.x, inst.y, inst.delta, inst.argmax,
                      images, labels, order, counter, hits, inst.timing, stats[w])

    _run_workers(target, len(workers), log_fn)
    return PhaseResult(images=int(stats[:, K.ST_COUNT].sum()),
                       errors=int(stats[:, K.ST_ERRORS].sum()),
                       loss=float(stats[:, K.ST_LOSS].sum()))


def evaluate(store: WeightStore, images: np.ndarray, labels: np.ndarray, threads: int = 1) -> PhaseResult:
    """Classify a set with fresh workers bound to ``store``."""
    workers = [NetworkInstance(store, seed=w) for w in range(max(1, threads))]
    return evaluate_phase(workers, images, labels)


class ChaosTrainer:
    """One training session: a shared store, ``p`` workers and the epoch loop."""

    def __init__(self, arch: ArchitectureSpec, cfg: TrainConfig, store: Optional[WeightStore] = None):
        self.arch = arch
        self.cfg = cfg
        if store is None:
            store = WeightStore(arch, cfg.precision)
            init_weights(store, cfg.seed)
        elif store.spec.digest() != arch.digest():
            raise ConfigError("initial weights belong to a different architecture")
        self.store = store
        self.workers = [NetworkInstance(store, seed=cfg.seed + w) for w in range(cfg.threads)]
        self.phase_log = PhaseLog()
        self.claims: List[ClaimRecord] = []
        hw = hardware_threads()
        if cfg.threads > hw:
            log.warning("running %d workers on %d hardware threads (oversubscribed)", cfg.threads, hw)

    def _logger(self, epoch: int, phase: str):
        return lambda w, s, e: self.phase_log.add(epoch, phase, w, s, e)

    def _layer_times(self) -> Tuple[LayerTiming, ...]:
        total = sum(inst.timing for inst in self.workers)
        return tuple(
            LayerTiming(layer=i, kind=layer.kind.value,
                        forward_seconds=float(total[i, 0]) * 1e-9,
                        backward_seconds=float(total[i, 1]) * 1e-9)
            for i, layer in enumerate(self.arch.layers) if i > 0)

    def run_epoch(self, epoch: int, data) -> EpochOutcome:
        cfg = self.cfg
        eta = eta_schedule(cfg.eta0, cfg.eta_factor, epoch)
        for inst in self.workers:
            inst.reset_timing()
        walls = []
        t0 = time.perf_counter()
        order = epoch_order(len(data.train), cfg.seed, epoch)
        try:
            loss, record = train_phase(self.workers, data.train.images, data.train.labels, eta, order,
                                       log_fn=self._logger(epoch, "train"))
        except DivergenceError as exc:
            raise DivergenceError(epoch, exc.worker, exc.image) from None
        self.claims.append(record)
        walls.append(("train", time.perf_counter() - t0))
        results = {}
        for phase in ("validation", "test"):
            subset = getattr(data, phase)
            t0 = time.perf_counter()
            results[phase] = evaluate_phase(self.workers, subset.images, subset.labels,
                                            log_fn=self._logger(epoch, phase))
            walls.append((phase, time.perf_counter() - t0))
        return EpochOutcome(
            epoch=epoch, eta=eta, train_loss=loss, train_images=len(data.train),
            validation=results["validation"], test=results["test"],
            wall_times=tuple(walls), layer_times=self._layer_times(), workers=len(self.workers),
            worker_images=tuple(int(c) for c in record.per_worker(len(self.workers))))

    def run(self, data, on_epoch: Optional[Callable[[EpochOutcome], None]] = None) -> List[EpochOutcome]:
        outcomes: List[EpochOutcome] = []
        data = data.astype(self.store.dtype)
        for epoch in range(self.cfg.epochs):
            try:
                outcome = self.run_epoch(epoch, data)
            except DivergenceError as exc:
                exc.outcomes = outcomes
                raise
            outcomes.append(outcome)
            if on_epoch is not None:
                on_epoch(outcome)
            self._maybe_checkpoint(epoch)
        return outcomes

    def _maybe_checkpoint(self, epoch: int) -> None:
        every = self.cfg.checkpoint_every
        if every and (epoch + 1) % every == 0:
            directory = Path(self.cfg.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.store, directory / f"{self.arch.name}_epoch{epoch + 1}.chw")


def train(arch: ArchitectureSpec, data, cfg: TrainConfig, *, store: Optional[WeightStore] = None,
          on_epoch: Optional[Callable[[EpochOutcome], None]] = None):
    """Run CHAOS training; returns ``(outcomes, store)``."""
    if len(data.train) == 0:
        raise ConfigError("training set is empty")
    trainer = ChaosTrainer(arch, cfg, store)
    outcomes = trainer.run(data, on_epoch)
    return outcomes, trainer.store
