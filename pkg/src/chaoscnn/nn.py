"""Network state and layer-level operations.

A :class:`WeightStore` holds every layer's weights and biases in one flat,
64-byte-aligned buffer. A :class:`NetworkInstance` owns the private neuron
buffers of one worker and points at a (possibly shared) store. The numerical
work is done by :mod:`chaoscnn.kernels`; this module gives it a Python face.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from . import kernels as K
from .arch import ArchitectureSpec, LayerKind, derived_counts

ALIGN_BYTES = 64

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_KIND_CODES = {
    LayerKind.INPUT: K.KIND_INPUT,
    LayerKind.CONVOLUTIONAL: K.KIND_CONV,
    LayerKind.MAX_POOLING: K.KIND_POOL,
    LayerKind.FULLY_CONNECTED: K.KIND_FC,
    LayerKind.OUTPUT: K.KIND_OUTPUT,
}
_ACT_CODES = {"sigmoid": K.ACT_SIGMOID, "tanh": K.ACT_TANH, "identity": K.ACT_IDENTITY}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision '{precision}'; expected f32 or f64") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported value type {dtype}")
    return dtype


def aligned_empty(n: int, dtype) -> np.ndarray:
    """1-D array of ``n`` elements whose data pointer is 64-byte aligned."""
    dtype = np.dtype(dtype)
    raw = np.empty(n * dtype.itemsize + ALIGN_BYTES, dtype=np.uint8)
    shift = (-raw.ctypes.data) % ALIGN_BYTES
    return raw[shift:shift + n * dtype.itemsize].view(dtype)


def _round_up(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


@dataclass(frozen=True)
class NetLayout:
    """Offsets of every layer inside the flat neuron and weight buffers."""

    table: np.ndarray
    neuron_total: int
    weight_total: int
    max_layer_weights: int

    @classmethod
    def build(cls, spec: ArchitectureSpec, dtype) -> "NetLayout":
        per_line = ALIGN_BYTES // np.dtype(dtype).itemsize
        counts = derived_counts(spec)
        table = np.zeros((len(spec), K.NCOLS), dtype=np.int64)
        nofs = wofs = 0
        for i, (layer, c) in enumerate(zip(spec.layers, counts)):
            row = table[i]
            row[K.COL_KIND] = _KIND_CODES[layer.kind]
            row[K.COL_MAPS] = layer.maps
            row[K.COL_W] = layer.map_width
            row[K.COL_H] = layer.map_height
            row[K.COL_KW] = layer.kernel_width or 0
            row[K.COL_KH] = layer.kernel_height or 0
            row[K.COL_STRIDE] = (layer.stride or layer.kernel_width or 1) if layer.kind is LayerKind.MAX_POOLING else 1
            row[K.COL_N] = c.neurons
            row[K.COL_NOFS] = nofs
            row[K.COL_WOFS] = wofs
            row[K.COL_NW] = c.weights
            if layer.kind is LayerKind.OUTPUT:
                row[K.COL_ACT] = K.ACT_SOFTMAX
            elif layer.kind in (LayerKind.CONVOLUTIONAL, LayerKind.FULLY_CONNECTED):
                row[K.COL_ACT] = _ACT_CODES[spec.activation]
            else:
                row[K.COL_ACT] = K.ACT_IDENTITY
            nofs += _round_up(c.neurons, per_line)
            wofs += _round_up(c.weights, per_line)
        table.setflags(write=False)
        return cls(table=table, neuron_total=nofs, weight_total=wofs,
                   max_layer_weights=max(c.weights for c in counts))


class WeightStore:
    """All weights and biases of a network in one contiguous buffer.

    ``store.layer(i)`` is the flat region (weights then biases) of layer ``i``;
    ``store.weights(i)`` and ``store.biases(i)`` are shaped views into it.
    """

    def __init__(self, spec: ArchitectureSpec, precision="f32"):
        self.spec = spec
        self.dtype = resolve_dtype(precision)
        self.layout = NetLayout.build(spec, self.dtype)
        self.data = aligned_empty(self.layout.weight_total, self.dtype)
        self.data[:] = 0

    @property
    def precision(self) -> str:
        return "f32" if self.dtype == np.float32 else "f64"

    def layer(self, index: int) -> np.ndarray:
        row = self.layout.table[index]
        start = int(row[K.COL_WOFS])
        return self.data[start:start + int(row[K.COL_NW])]

    def weights(self, index: int) -> np.ndarray:
        layer, prev = self.spec.layers[index], self.spec.layers[index - 1]
        region = self.layer(index)
        if layer.kind is LayerKind.CONVOLUTIONAL:
            shape = (layer.maps, prev.maps, layer.kernel_height, layer.kernel_width)
        elif layer.kind in (LayerKind.FULLY_CONNECTED, LayerKind.OUTPUT):
            shape = (layer.neurons, prev.neurons)
        else:
            return region[:0]
        return region[:int(np.prod(shape))].reshape(shape)

    def biases(self, index: int) -> np.ndarray:
        region = self.layer(index)
        n = self.weights(index).size
        return region[n:]

    def weighted_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.spec.layers) if layer.kind.has_weights]

    def copy(self) -> "WeightStore":
        other = WeightStore(self.spec, self.precision)
        other.data[:] = self.data
        return other

    def astype(self, precision) -> "WeightStore":
        """Copy into a store of another precision (layer by layer: padding differs)."""
        other = WeightStore(self.spec, precision)
        for i in self.weighted_layers():
            other.layer(i)[:] = self.layer(i)
        return other

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(self, path)


class NetworkInstance:
    """Private activation, pre-activation and delta buffers for one worker."""

    def __init__(self, store: WeightStore, seed: int = 0):
        self.store = store
        self.spec = store.spec
        self.seed = seed
        self.layout = store.layout
        dtype = store.dtype
        n = self.layout.neuron_total
        self.x = aligned_empty(n, dtype)
        self.y = aligned_empty(n, dtype)
        self.delta = aligned_empty(n, dtype)
        self.g = aligned_empty(self.layout.max_layer_weights, dtype)
        for buf in (self.x, self.y, self.delta, self.g):
            buf[:] = 0
        self.argmax = np.zeros(n, dtype=np.int64)
        self.timing = np.zeros((len(self.spec), 2), dtype=np.int64)

    @property
    def table(self) -> np.ndarray:
        return self.layout.table

    def _view(self, buf: np.ndarray, index: int) -> np.ndarray:
        row = self.layout.table[index]
        start = int(row[K.COL_NOFS])
        return buf[start:start + int(row[K.COL_N])].reshape(self.spec.layers[index].shape)

    def activations(self, index: int) -> np.ndarray:
        return self._view(self.y, index)

    def preactivations(self, index: int) -> np.ndarray:
        return self._view(self.x, index)

    def deltas(self, index: int) -> np.ndarray:
        return self._view(self.delta, index)

    def argmax_indices(self, index: int) -> np.ndarray:
        """Flat neuron-buffer index of each pooled maximum."""
        return self._view(self.argmax, index)

    def gradient(self, index: int) -> np.ndarray:
        """Scratch gradient of the most recent :func:`backward_layer` call."""
        return self.g[:int(self.layout.table[index, K.COL_NW])]

    def output(self) -> np.ndarray:
        return self.activations(len(self.spec) - 1).ravel()

    def reset_timing(self) -> None:
        self.timing[:] = 0


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.pixels.size != 841:
            raise ValueError(f"a sample holds 29x29 = 841 pixels, got {self.pixels.size}")
        if not 0 <= int(self.label) < 10:
            raise ValueError(f"label {self.label} outside 0-9")


def activation(x, kind: str = "sigmoid"):
    """Elementwise sigmoid or tanh (scalar in, scalar out)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "identity":
        out = x.copy()
    else:
        raise ValueError(f"unknown activation '{kind}'")
    return out[()] if out.ndim == 0 else out


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def set_input(inst: NetworkInstance, pixels) -> None:
    pixels = np.asarray(pixels, dtype=inst.store.dtype).ravel()
    n = int(inst.table[0, K.COL_N])
    if pixels.size != n:
        raise ValueError(f"input layer expects {n} values, got {pixels.size}")
    inst.y[:n] = pixels


def forward_layer(inst: NetworkInstance, index: int) -> None:
    if not 1 <= index < len(inst.spec):
        raise IndexError(f"layer index {index} out of range")
    K.forward_layer(inst.table, index, inst.store.data, inst.x, inst.y, inst.argmax)


def forward(inst: NetworkInstance, pixels=None) -> np.ndarray:
    """Forward-propagate (optionally loading ``pixels`` first); returns class probabilities."""
    if pixels is not None:
        set_input(inst, pixels)
    K.forward_all(inst.table, inst.store.data, inst.x, inst.y, inst.argmax, inst.timing)
    return inst.output()


def loss_and_output_delta(inst: NetworkInstance, label: int) -> float:
    """Cross-entropy ``-log p[label]``; fills the output delta with ``p - onehot``."""
    n_out = inst.spec.num_classes
    if not 0 <= label < n_out:
        raise ValueError(f"label {label} outside 0..{n_out - 1}")
    return float(K.output_loss_and_delta(inst.table, inst.x, inst.y, inst.delta, label))


def backward_layer(inst: NetworkInstance, index: int, weights_for_deltas: Optional[WeightStore] = None) -> None:
    """Propagate layer ``index``'s delta one layer down and fill its gradient scratch."""
    if not 1 <= index < len(inst.spec):
        raise IndexError(f"layer index {index} out of range")
    store = weights_for_deltas if weights_for_deltas is not None else inst.store
    K.backward_layer(inst.table, index, store.data, inst.y, inst.delta, inst.argmax, inst.g)


def predict(inst: NetworkInstance, pixels) -> int:
    return int(np.argmax(forward(inst, pixels)))


def init_weights(store: WeightStore, seed: int) -> None:
    """Weights uniform in +-1/sqrt(fan_in), biases zero; deterministic per seed."""
    rng = np.random.default_rng(seed)
    store.data[:] = 0
    for i in store.weighted_layers():
        w = store.weights(i)
        bound = 1.0 / np.sqrt(store.spec.fan_in(i))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        store.biases(i)[:] = 0


def apply_gradient(weights: np.ndarray, g: np.ndarray, eta: float) -> None:
    """In-place ``weights -= eta * g``."""
    if weights.shape != g.shape:
        raise ValueError(f"shape mismatch: weights {weights.shape} vs gradient {g.shape}")
    weights -= weights.dtype.type(eta) * g.astype(weights.dtype, copy=False)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"CHW1"
_HEADER = struct.Struct("<4s32sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: WeightStore, path: Union[str, Path]) -> Path:
    """Binary little-endian: magic, arch SHA-256, value width, layer count, then arrays."""
    path = Path(path)
    layers = store.weighted_layers()
    le = store.dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, store.spec.digest(), store.dtype.itemsize, len(layers)))
        for i in layers:
            fh.write(np.ascontiguousarray(store.weights(i), dtype=le).tobytes())
            fh.write(np.ascontiguousarray(store.biases(i), dtype=le).tobytes())
    return path


def load_checkpoint(path: Union[str, Path], spec: ArchitectureSpec) -> WeightStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, digest, width, nlayers = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if digest != spec.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    if width not in (4, 8):
        raise CheckpointError(f"{path}: unsupported value width {width}")
    store = WeightStore(spec, "f32" if width == 4 else "f64")
    layers = store.weighted_layers()
    if nlayers != len(layers):
        raise CheckpointError(f"{path}: expected {len(layers)} weighted layers, header says {nlayers}")
    le = store.dtype.newbyteorder("<")
    pos = _HEADER.size
    for i in layers:
        for target in (store.weights(i), store.biases(i)):
            nbytes = target.size * width
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated at layer {i}")
            target[...] = np.frombuffer(raw, dtype=le, count=target.size, offset=pos).reshape(target.shape)
            pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return store
