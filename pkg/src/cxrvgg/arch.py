"""Declarative network specs, the VGG16/VGG19 builders and runnable models.

A spec is an input shape plus an ordered list of named layers. Specs have a
line-oriented text form::

    input 182x182x3
    2D-Conv_111 Conv2D(3, 64)
    Pool_11 MaxPool(2, 2)
    Flat_11 Flatten
    Layer_11 Dense(4096)
    Norm_11 BatchNorm
    Drop_11 Dropout(0.3)
    Out_1 SoftmaxOutput(3)

Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import SpecError, StateError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    Mode,
    SoftmaxOutput,
    read_checkpoint,
    write_checkpoint,
)
from .tensor import DTYPE, Rng

# kind -> argument converters
KINDS = {
    "Conv2D": (int, int),
    "MaxPool": (int, int),
    "Flatten": (),
    "Dense": (int,),
    "BatchNorm": (),
    "Dropout": (float,),
    "SoftmaxOutput": (int,),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: Tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"{self.name}: unknown layer kind {self.kind!r}")
        conv = KINDS[self.kind]
        if len(self.args) != len(conv):
            raise SpecError(f"{self.name}: {self.kind} takes {len(conv)} argument(s), got {len(self.args)}")
        object.__setattr__(self, "args", tuple(c(a) for c, a in zip(conv, self.args)))
        if not self.name or re.search(r"\s", self.name):
            raise SpecError(f"invalid layer name {self.name!r}")
        if self.kind in ("Conv2D", "MaxPool") and min(self.args) < 1:
            raise SpecError(f"{self.name}: {self.kind} arguments must be >= 1")
        if self.kind == "Conv2D" and self.args[0] % 2 == 0:
            raise SpecError(f"{self.name}: same padding needs an odd kernel size")
        if self.kind in ("Dense", "SoftmaxOutput") and self.args[0] < 1:
            raise SpecError(f"{self.name}: {self.kind} needs at least one unit")
        if self.kind == "SoftmaxOutput" and self.args[0] < 2:
            raise SpecError(f"{self.name}: softmax output needs at least 2 classes")
        if self.kind == "Dropout" and not 0.0 <= self.args[0] < 1.0:
            raise SpecError(f"{self.name}: dropout probability must lie in [0, 1)")

    def text(self) -> str:
        if not self.args:
            return f"{self.name} {self.kind}"
        return f"{self.name} {self.kind}({', '.join(repr(a) for a in self.args)})"


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be (H, W, C) with positive extents, got {self.input_shape}")
        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SpecError(f"duplicate layer names: {', '.join(dupes)}")
        if not self.layers or self.layers[-1].kind != "SoftmaxOutput":
            raise SpecError("the last layer must be a SoftmaxOutput")

    def __eq__(self, other):
        # the display name is not structural
        if not isinstance(other, ArchitectureSpec):
            return NotImplemented
        return self.input_shape == other.input_shape and self.layers == other.layers

    def __hash__(self):
        return hash((self.input_shape, self.layers))

    def with_input(self, height: int, width: int, channels: Optional[int] = None) -> "ArchitectureSpec":
        c = self.input_shape[2] if channels is None else channels
        return ArchitectureSpec((height, width, c), self.layers, self.name)

    def to_text(self) -> str:
        h, w, c = self.input_shape
        lines = [f"# {self.name}", f"input {h}x{w}x{c}"]
        lines += [layer.text() for layer in self.layers]
        return "\n".join(lines) + "\n"


_LINE = re.compile(r"^(\S+)\s+([A-Za-z0-9]+)\s*(?:\((.*)\))?$")


def parse_spec(text: str, name: str = "custom") -> ArchitectureSpec:
    """Parse the text form written by :meth:`ArchitectureSpec.to_text`."""
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("input "):
            dims = line.split(None, 1)[1].lower().replace(" ", "").split("x")
            try:
                input_shape = tuple(int(d) for d in dims)
            except ValueError:
                raise SpecError(f"line {lineno}: bad input shape {line!r}") from None
            continue
        match = _LINE.match(line)
        if not match:
            raise SpecError(f"line {lineno}: cannot parse {raw!r}")
        lname, kind, args = match.groups()
        parts = [a.strip() for a in args.split(",")] if args and args.strip() else []
        try:
            layers.append(LayerSpec(kind, tuple(parts), lname))
        except ValueError as exc:
            raise SpecError(f"line {lineno}: {exc}") from None
    if input_shape is None:
        raise SpecError("spec has no 'input HxWxC' line")
    return ArchitectureSpec(input_shape, tuple(layers), name)


def load_spec(path) -> ArchitectureSpec:
    from pathlib import Path

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from None
    return parse_spec(text, name=path.stem)


# --------------------------------------------------------------------------
# builders

def _flat_tail(classes: int, p: float) -> List[LayerSpec]:
    return [
        LayerSpec("Flatten", (), "Flat_11"),
        LayerSpec("Dense", (4096,), "Layer_11"),
        LayerSpec("Dense", (4096,), "Layer_12"),
        LayerSpec("Dense", (1000,), "Layer_13"),
        LayerSpec("BatchNorm", (), "Norm_11"),
        LayerSpec("Dense", (256,), "Layer_14"),
        LayerSpec("Dropout", (p,), "Drop_11"),
        LayerSpec("SoftmaxOutput", (classes,), "Out_1"),
    ]


def _conv_blocks(blocks: Sequence[Sequence[int]]) -> List[LayerSpec]:
    out = []
    for b, widths in enumerate(blocks, 1):
        for j, width in enumerate(widths, 1):
            out.append(LayerSpec("Conv2D", (3, width), f"2D-Conv_1{b}{j}"))
        out.append(LayerSpec("MaxPool", (2, 2), f"Pool_1{b}"))
    return out


VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
VGG19_BLOCKS = ((64, 64), (128, 128), (256,) * 4, (512,) * 4, (512,) * 4)


def vgg16_spec(classes: int = 3, p: float = 0.3, input_shape=(182, 182, 3)) -> ArchitectureSpec:
    """Thirteen 3x3 convolutions in five pooled blocks, then the flat classifier tail."""
    if classes < 2:
        raise SpecError("need at least 2 classes")
    return ArchitectureSpec(input_shape, tuple(_conv_blocks(VGG16_BLOCKS) + _flat_tail(classes, p)), "vgg16")


def vgg19_spec(classes: int = 3, p: float = 0.3, input_shape=(182, 182, 3)) -> ArchitectureSpec:
    """VGG16 with one extra convolution appended to each of blocks 3, 4 and 5.

    The inserted layers are named ``2D-Conv_134``, ``2D-Conv_144`` and
    ``2D-Conv_154``; every other row matches :func:`vgg16_spec`.
    """
    if classes < 2:
        raise SpecError("need at least 2 classes")
    return ArchitectureSpec(input_shape, tuple(_conv_blocks(VGG19_BLOCKS) + _flat_tail(classes, p)), "vgg19")


def mini_vgg_spec(classes: int = 3, p: float = 0.3, input_shape=(32, 32, 3), widths=(16, 32)) -> ArchitectureSpec:
    """Two narrow VGG blocks followed by the full flat tail; for desk-scale runs."""
    if classes < 2:
        raise SpecError("need at least 2 classes")
    blocks = [(w, w) for w in widths]
    return ArchitectureSpec(input_shape, tuple(_conv_blocks(blocks) + _flat_tail(classes, p)), "mini-vgg")


BUILTIN = {"vgg16": vgg16_spec, "vgg19": vgg19_spec, "mini-vgg": mini_vgg_spec}


def resolve_spec(name_or_path: str, classes: int = 3, p: float = 0.3, input_shape=None) -> ArchitectureSpec:
    """A builtin architecture by name, or a spec file by path."""
    if name_or_path in BUILTIN:
        spec = BUILTIN[name_or_path](classes=classes, p=p)
    else:
        spec = load_spec(name_or_path)
    if input_shape is not None:
        spec = spec.with_input(*input_shape)
    return spec


# --------------------------------------------------------------------------
# shapes and parameter counts

def infer_shapes(spec: ArchitectureSpec) -> List[Tuple[int, ...]]:
    """Per-layer output shapes (without the batch axis)."""
    shape: Tuple[int, ...] = spec.input_shape
    out = []
    for layer in spec.layers:
        kind, args = layer.kind, layer.args
        if kind == "Conv2D":
            if len(shape) != 3:
                raise SpecError(f"{layer.name}: Conv2D needs an HxWxC input, got {shape}")
            shape = (shape[0], shape[1], args[1])
        elif kind == "MaxPool":
            d, s = args
            if len(shape) != 3:
                raise SpecError(f"{layer.name}: MaxPool needs an HxWxC input, got {shape}")
            if shape[0] < d or shape[1] < d:
                raise SpecError(f"{layer.name}: pool window {d} larger than input {shape[0]}x{shape[1]}")
            shape = ((shape[0] - d) // s + 1, (shape[1] - d) // s + 1, shape[2])
        elif kind == "Flatten":
            if len(shape) < 2:
                raise SpecError(f"{layer.name}: Flatten needs a rank >= 2 input, got {shape}")
            shape = (int(np.prod(shape)),)
        elif kind in ("Dense", "SoftmaxOutput"):
            if len(shape) != 1:
                raise SpecError(f"{layer.name}: {kind} needs a flat input, got {shape}; add a Flatten")
            shape = (args[0],)
        elif kind in ("BatchNorm", "Dropout"):
            pass
        out.append(shape)
    return out


@dataclass
class LayerCount:
    name: str
    kind: str
    output_shape: Tuple[int, ...]
    trainable: int
    buffers: int

    @property
    def total(self) -> int:
        return self.trainable + self.buffers


@dataclass
class ParamCount:
    layers: List[LayerCount] = field(default_factory=list)

    @property
    def trainable(self) -> int:
        return sum(c.trainable for c in self.layers)

    @property
    def buffers(self) -> int:
        return sum(c.buffers for c in self.layers)

    @property
    def total(self) -> int:
        return self.trainable + self.buffers

    def by_name(self, name: str) -> LayerCount:
        for c in self.layers:
            if c.name == name:
                return c
        raise KeyError(name)


def count_params(spec: ArchitectureSpec) -> ParamCount:
    """Closed-form counts: conv ``k*k*Cin*Cout + Cout``, dense ``f*n + n``, batch-norm ``2f + 2f``."""
    shapes = infer_shapes(spec)
    prev = spec.input_shape
    result = ParamCount()
    for layer, shape in zip(spec.layers, shapes):
        trainable = buffers = 0
        if layer.kind == "Conv2D":
            k, cout = layer.args
            trainable = k * k * prev[-1] * cout + cout
        elif layer.kind in ("Dense", "SoftmaxOutput"):
            trainable = prev[0] * layer.args[0] + layer.args[0]
        elif layer.kind == "BatchNorm":
            trainable = 2 * prev[-1]
            buffers = 2 * prev[-1]
        result.layers.append(LayerCount(layer.name, layer.kind, shape, trainable, buffers))
        prev = shape
    return result


# --------------------------------------------------------------------------
# runnable model

class Model:
    """An ordered stack of layers built from a spec."""

    def __init__(self, spec: ArchitectureSpec, layers: List[Layer]):
        self.spec = spec
        self.layers = layers

    def forward(self, x, mode: Mode = Mode.INFER):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.spec.input_shape:
            raise SpecError(f"model expects [N, {', '.join(map(str, self.spec.input_shape))}] input, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, dlogits):
        """Back-propagate the loss gradient w.r.t. the output logits; fills every layer's ``grads``."""
        dy = dlogits
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def predict(self, x, batch_size: int = 64):
        chunks = [self.forward(x[i:i + batch_size], Mode.INFER) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0)

    def params(self) -> Dict[str, np.ndarray]:
        return {f"{layer.name}/{k}": v for layer in self.layers for k, v in layer.params.items()}

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for k in layer.params:
                if k not in layer.grads:
                    raise StateError(f"{layer.name}/{k} has no gradient; run backward first")
                out[f"{layer.name}/{k}"] = layer.grads[k]
        return out

    def records(self) -> Iterator[Tuple[str, str, np.ndarray]]:
        for layer in self.layers:
            for k, v in layer.params.items():
                yield layer.name, k, v
            for k, v in layer.buffers.items():
                yield layer.name, k, v

    def digest(self) -> str:
        """SHA-256 over every parameter and buffer, in checkpoint order."""
        h = hashlib.sha256()
        for lname, k, v in self.records():
            h.update(f"{lname}/{k}:{v.shape}".encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def save(self, path, extra=()) -> None:
        write_checkpoint(path, list(self.records()) + list(extra))

    def load(self, path) -> Dict[Tuple[str, str], np.ndarray]:
        """Load parameters and buffers; returns records that belong to no layer."""
        by_name = {layer.name: layer for layer in self.layers}
        leftovers = {}
        for lname, k, value in read_checkpoint(path):
            layer = by_name.get(lname)
            store = None
            if layer is not None:
                store = layer.params if k in layer.params else layer.buffers if k in layer.buffers else None
            if store is None:
                leftovers[(lname, k)] = value
                continue
            if store[k].shape != value.shape:
                raise SpecError(f"checkpoint entry {lname}/{k} has shape {value.shape}, model expects {store[k].shape}")
            store[k][...] = value
        return leftovers


def build(spec: ArchitectureSpec, rng: Rng) -> Model:
    """Instantiate layers with He-uniform weights; each layer draws from ``rng.child(name)``."""
    shapes = infer_shapes(spec)
    prev = spec.input_shape
    layers: List[Layer] = []
    for ls, shape in zip(spec.layers, shapes):
        sub = rng.child(ls.name)
        if ls.kind == "Conv2D":
            layers.append(Conv2D(ls.name, ls.args[0], prev[-1], ls.args[1], sub))
        elif ls.kind == "MaxPool":
            layers.append(MaxPool2D(ls.name, *ls.args))
        elif ls.kind == "Flatten":
            layers.append(Flatten(ls.name))
        elif ls.kind == "Dense":
            layers.append(Dense(ls.name, prev[0], ls.args[0], sub))
        elif ls.kind == "BatchNorm":
            layers.append(BatchNorm(ls.name, prev[-1]))
        elif ls.kind == "Dropout":
            layers.append(Dropout(ls.name, ls.args[0], sub))
        elif ls.kind == "SoftmaxOutput":
            layers.append(SoftmaxOutput(ls.name, prev[0], ls.args[0], sub))
        prev = shape
    return Model(spec, layers)
