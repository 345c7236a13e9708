"""Declarative CNN architectures: layer stacks, presets and derived counts.

An architecture is a list of :class:`LayerSpec` rows beginning with an input
layer and ending with an output layer. Convolutions use stride 1 and full
connectivity to every map of the previous layer; max-pooling tiles its input
with non-overlapping windows.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union


class ArchitectureError(ValueError):
    """An architecture violates one of the layer-stack invariants."""


class ConfigParseError(ArchitectureError):
    """A configuration document could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None):
        self.line = line
        self.field_name = field_name
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class LayerKind(str, Enum):
    INPUT = "input"
    CONVOLUTIONAL = "convolutional"
    MAX_POOLING = "maxpooling"
    FULLY_CONNECTED = "fullyconnected"
    OUTPUT = "output"

    @property
    def has_weights(self) -> bool:
        return self in (LayerKind.CONVOLUTIONAL, LayerKind.FULLY_CONNECTED, LayerKind.OUTPUT)

    @property
    def label(self) -> str:
        return _KIND_LABELS[self]


_KIND_LABELS = {
    LayerKind.INPUT: "Input",
    LayerKind.CONVOLUTIONAL: "Convolutional",
    LayerKind.MAX_POOLING: "Max-pooling",
    LayerKind.FULLY_CONNECTED: "Fully connected",
    LayerKind.OUTPUT: "Output",
}

_KIND_ALIASES = {
    "input": LayerKind.INPUT,
    "convolutional": LayerKind.CONVOLUTIONAL,
    "conv": LayerKind.CONVOLUTIONAL,
    "maxpooling": LayerKind.MAX_POOLING,
    "max-pooling": LayerKind.MAX_POOLING,
    "maxpool": LayerKind.MAX_POOLING,
    "pool": LayerKind.MAX_POOLING,
    "fullyconnected": LayerKind.FULLY_CONNECTED,
    "fully-connected": LayerKind.FULLY_CONNECTED,
    "fc": LayerKind.FULLY_CONNECTED,
    "output": LayerKind.OUTPUT,
}

ACTIVATIONS = ("sigmoid", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    maps: int
    map_width: int
    map_height: int
    kernel_width: Optional[int] = None
    kernel_height: Optional[int] = None
    stride: Optional[int] = None

    @property
    def neurons(self) -> int:
        return self.maps * self.map_width * self.map_height

    @property
    def shape(self) -> tuple:
        """Buffer shape as (maps, rows, columns)."""
        return (self.maps, self.map_height, self.map_width)


@dataclass(frozen=True)
class LayerCounts:
    neurons: int
    weights: int


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple
    activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, index: int) -> LayerSpec:
        return self.layers[index]

    @property
    def input_layer(self) -> LayerSpec:
        return self.layers[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].neurons

    def counts(self) -> List[LayerCounts]:
        return derived_counts(self)

    def fan_in(self, index: int) -> int:
        """Number of incoming weights per output neuron (excluding bias)."""
        layer, prev = self.layers[index], self.layers[index - 1]
        if layer.kind is LayerKind.CONVOLUTIONAL:
            return layer.kernel_width * layer.kernel_height * prev.maps
        if layer.kind in (LayerKind.FULLY_CONNECTED, LayerKind.OUTPUT):
            return prev.neurons
        return 0

    def digest(self) -> bytes:
        """SHA-256 of the layer stack and activation (the name is ignored)."""
        body = serialize_spec(self, include_name=False)
        return hashlib.sha256(body.encode("utf-8")).digest()


def _check(cond: bool, index: int, message: str) -> None:
    if not cond:
        raise ArchitectureError(f"layer {index}: {message}")


def validate(spec: ArchitectureSpec) -> None:
    """Raise :class:`ArchitectureError` naming the first violated invariant."""
    layers = spec.layers
    if len(layers) < 3:
        raise ArchitectureError("an architecture needs at least 3 layers (input, hidden/output)")
    if layers[0].kind is not LayerKind.INPUT:
        raise ArchitectureError("first layer must be Input")
    if layers[-1].kind is not LayerKind.OUTPUT:
        raise ArchitectureError("last layer must be Output")
    if spec.activation not in ACTIVATIONS:
        raise ArchitectureError(f"unknown activation '{spec.activation}'; expected one of {ACTIVATIONS}")

    for i, layer in enumerate(layers):
        if not isinstance(layer.kind, LayerKind):
            raise ArchitectureError(f"layer {i}: kind must be a LayerKind, got {layer.kind!r}")
        for attr in ("maps", "map_width", "map_height"):
            _check(int(getattr(layer, attr)) >= 1, i, f"{attr} must be >= 1")
        if 0 < i < len(layers) - 1:
            _check(layer.kind not in (LayerKind.INPUT, LayerKind.OUTPUT), i,
                   f"{layer.kind.label} layer only allowed at the {'start' if layer.kind is LayerKind.INPUT else 'end'}")
        if i == 0:
            continue
        prev = layers[i - 1]
        if layer.kind is LayerKind.CONVOLUTIONAL:
            _check(layer.kernel_width is not None and layer.kernel_height is not None, i,
                   "convolutional layer needs a kernel size")
            _check(layer.kernel_width >= 1 and layer.kernel_height >= 1, i, "kernel dimensions must be >= 1")
            _check(layer.stride in (None, 1), i, "convolution stride is fixed at 1")
            _check(layer.map_width == prev.map_width - layer.kernel_width + 1, i,
                   f"convolution width {layer.map_width} != {prev.map_width} - {layer.kernel_width} + 1")
            _check(layer.map_height == prev.map_height - layer.kernel_height + 1, i,
                   f"convolution height {layer.map_height} != {prev.map_height} - {layer.kernel_height} + 1")
        elif layer.kind is LayerKind.MAX_POOLING:
            _check(layer.kernel_width is not None and layer.kernel_height is not None, i,
                   "max-pooling layer needs a kernel size")
            stride = layer.stride if layer.stride is not None else layer.kernel_width
            _check(stride >= 1, i, "stride must be >= 1")
            _check(layer.kernel_width == stride and layer.kernel_height == stride, i,
                   "pooling kernel must tile the input grid (kernel == stride)")
            _check(layer.maps == prev.maps, i, f"pooling keeps the map count ({layer.maps} != {prev.maps})")
            _check(prev.map_width % stride == 0 and prev.map_height % stride == 0, i,
                   f"stride {stride} does not divide the {prev.map_width}x{prev.map_height} input grid")
            _check(layer.map_width == math.ceil(prev.map_width / stride), i,
                   f"pooling width {layer.map_width} != ceil({prev.map_width} / {stride})")
            _check(layer.map_height == math.ceil(prev.map_height / stride), i,
                   f"pooling height {layer.map_height} != ceil({prev.map_height} / {stride})")
        else:
            _check(layer.kernel_width is None and layer.kernel_height is None and layer.stride is None, i,
                   f"{layer.kind.label} layer takes no kernel or stride")


def derived_counts(spec: ArchitectureSpec) -> List[LayerCounts]:
    """Neuron and weight (incl. bias) counts per layer."""
    validate(spec)
    out = []
    for i, layer in enumerate(spec.layers):
        if layer.kind is LayerKind.CONVOLUTIONAL:
            prev = spec.layers[i - 1]
            weights = layer.maps * (layer.kernel_width * layer.kernel_height * prev.maps + 1)
        elif layer.kind in (LayerKind.FULLY_CONNECTED, LayerKind.OUTPUT):
            weights = layer.neurons * (spec.layers[i - 1].neurons + 1)
        else:
            weights = 0
        out.append(LayerCounts(neurons=layer.neurons, weights=weights))
    return out


# -- config documents -------------------------------------------------------

_PRESET_TEXT = {
    "small": """\
# Small CNN: 7 layers
name = small
activation = sigmoid
input            1  29 29
convolutional    5  26 26  4 4
maxpooling       5  13 13  2 2  2
convolutional   10   9  9  5 5
maxpooling      10   3  3  3 3  3
fullyconnected   1  50  1
output           1  10  1
""",
    "medium": """\
# Medium CNN: 7 layers
name = medium
activation = sigmoid
input            1  29 29
convolutional   20  26 26  4 4
maxpooling      20  13 13  2 2  2
convolutional   40   9  9  5 5
maxpooling      40   3  3  3 3  3
fullyconnected   1 150  1
output           1  10  1
""",
    "large": """\
# Large CNN: 9 layers
# The third pooling layer emits 100 maps of 3x3 (900 neurons), which is what
# the downstream fully connected weight count 150 * (900 + 1) requires.
name = large
activation = sigmoid
input            1  29 29
convolutional   20  26 26  4 4
maxpooling      20  26 26  1 1  1
convolutional   60  22 22  5 5
maxpooling      60  11 11  2 2  2
convolutional  100   6  6  6 6
maxpooling     100   3  3  2 2  2
fullyconnected   1 150  1
output           1  10  1
""",
}

PRESET_NAMES = tuple(_PRESET_TEXT)


def preset_text(name: str) -> str:
    try:
        return _PRESET_TEXT[name]
    except KeyError:
        raise ArchitectureError(f"unknown preset '{name}'; expected one of {PRESET_NAMES}") from None


def preset(name: str) -> ArchitectureSpec:
    """One of the shipped ``small``, ``medium`` or ``large`` architectures."""
    return parse_spec(preset_text(name))


def _parse_int(token: str, line: int, field_name: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ConfigParseError(f"expected an integer, got '{token}'", line, field_name) from None
    return value


_LAYER_FIELDS = ("maps", "map_width", "map_height", "kernel_width", "kernel_height", "stride")


def parse_spec(text: str, default_name: str = "custom") -> ArchitectureSpec:
    """Parse a config document (``key = value`` lines plus one layer per line)."""
    name = default_name
    activation = "sigmoid"
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = (part.strip() for part in line.partition("="))
            if key == "name":
                name = value
            elif key == "activation":
                activation = value.lower()
                if activation not in ACTIVATIONS:
                    raise ConfigParseError(f"unknown activation '{value}'", lineno, "activation")
            else:
                raise ConfigParseError(f"unknown key '{key}'", lineno, key)
            continue
        tokens = line.split()
        kind = _KIND_ALIASES.get(tokens[0].lower())
        if kind is None:
            raise ConfigParseError(f"unknown layer kind '{tokens[0]}'", lineno, "kind")
        values = tokens[1:]
        if not 3 <= len(values) <= 6 or len(values) == 4:
            raise ConfigParseError(
                "expected `kind maps map_w map_h [kernel_w kernel_h [stride]]`", lineno)
        ints = [_parse_int(tok, lineno, fname) for tok, fname in zip(values, _LAYER_FIELDS)]
        kwargs = dict(zip(_LAYER_FIELDS, ints))
        if kind is LayerKind.MAX_POOLING and "stride" not in kwargs and "kernel_width" in kwargs:
            kwargs["stride"] = kwargs["kernel_width"]
        layers.append(LayerSpec(kind=kind, **kwargs))
    if not layers:
        raise ConfigParseError("document defines no layers")
    return ArchitectureSpec(name=name, layers=tuple(layers), activation=activation)


def serialize_spec(spec: ArchitectureSpec, include_name: bool = True) -> str:
    lines = []
    if include_name:
        lines.append(f"name = {spec.name}")
    lines.append(f"activation = {spec.activation}")
    for layer in spec.layers:
        row = [layer.kind.value, layer.maps, layer.map_width, layer.map_height]
        if layer.kernel_width is not None:
            row += [layer.kernel_width, layer.kernel_height]
            if layer.stride is not None:
                row.append(layer.stride)
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def load_spec(source: Union[str, Path]) -> ArchitectureSpec:
    """Resolve a preset name or read a config file."""
    source = str(source)
    if source in _PRESET_TEXT:
        return preset(source)
    path = Path(source)
    if not path.is_file():
        raise ArchitectureError(f"'{source}' is neither a preset {PRESET_NAMES} nor a readable file")
    return parse_spec(path.read_text(encoding="utf-8"), default_name=path.stem)


def layer_table(spec: ArchitectureSpec) -> List[dict]:
    """Rows resembling a printed architecture table."""
    rows = []
    for layer, counts in zip(spec.layers, derived_counts(spec)):
        kernel = f"{layer.kernel_width}x{layer.kernel_height}" if layer.kernel_width else "-"
        rows.append({
            "layer": layer.kind.label,
            "maps": layer.maps,
            "map_size": f"{layer.map_width}x{layer.map_height}",
            "neurons": counts.neurons,
            "kernel": kernel,
            "weights": counts.weights,
        })
    return rows
