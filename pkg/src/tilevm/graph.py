"""Front-end model description: tensors, layers, weights, and the text graph format.

A graph file is line oriented with three sections (``tensors:``, ``layers:``,
``io:``) plus an optional ``weights:`` line naming a sidecar blob. See
``docs/graph-format.md`` for the grammar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import Diagnostic, ParseError, ValidationError

DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1"), "i32": np.dtype("<i4")}
LAYER_KINDS = ("conv2d", "maxpool2d", "dense", "relu", "quantize", "dequantize", "flatten")

REQUIRED_ATTRS = {
    "conv2d": ("kernel", "stride", "out_channels"),
    "maxpool2d": ("pool", "stride"),
    "dense": ("in_features", "out_features"),
}
WEIGHTED = ("conv2d", "dense")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int


@dataclass(frozen=True)
class TensorDesc:
    id: int
    shape: tuple[int, ...]
    dtype: str
    quant: QuantParams | None = None
    offset: int | None = None  # byte offset into the weight blob, constants only

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * DTYPES[self.dtype].itemsize

    @property
    def is_constant(self) -> bool:
        return self.offset is not None


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: Mapping[str, int] = field(default_factory=dict)
    weight: int | None = None  # tensor id of a constant
    bias: int | None = None


@dataclass(frozen=True)
class ModelGraph:
    tensors: tuple[TensorDesc, ...]
    layers: tuple[LayerDesc, ...]
    weights: bytes
    input_id: int
    output_id: int

    def tensor(self, tid: int) -> TensorDesc:
        for t in self.tensors:
            if t.id == tid:
                return t
        raise KeyError(tid)

    def constant(self, tid: int) -> np.ndarray:
        """Read a constant tensor out of the weight blob."""
        t = self.tensor(tid)
        return np.frombuffer(self.weights, dtype=DTYPES[t.dtype], count=t.size,
                             offset=t.offset).reshape(t.shape)


# --------------------------------------------------------------------------
# shape and dtype rules, shared with the module verifier


def tensor_problems(t: TensorDesc) -> list[str]:
    out = []
    if len(t.shape) == 0:
        out.append("shape is empty")
    if any(d < 1 for d in t.shape):
        out.append(f"shape {t.shape} has a dimension < 1")
    if t.dtype not in DTYPES:
        out.append(f"unknown dtype {t.dtype!r}")
    elif t.dtype == "i8":
        if t.quant is None:
            out.append("i8 tensor is missing quantization params")
    elif t.quant is not None:
        out.append(f"{t.dtype} tensor must not carry quantization params")
    if t.quant is not None:
        if not (t.quant.scale > 0 and math.isfinite(t.quant.scale)):
            out.append(f"scale {t.quant.scale} is not a positive finite number")
        if not -128 <= t.quant.zero_point <= 127:
            out.append(f"zero_point {t.quant.zero_point} outside [-128, 127]")
    if t.offset is not None and t.offset < 0:
        out.append("negative weight offset")
    return out


def _window_out(extent: int, window: int, stride: int) -> int | None:
    if window < 1 or stride < 1 or extent < window or (extent - window) % stride:
        return None
    return (extent - window) // stride + 1


def layer_problems(kind: str, attrs: Mapping[str, int], inputs: Sequence[TensorDesc],
                   output: TensorDesc, weight: TensorDesc | None = None,
                   bias: TensorDesc | None = None) -> list[str]:
    """Return the reasons a layer's attributes disagree with its tensors."""
    if kind not in LAYER_KINDS:
        return [f"unsupported layer kind {kind!r}"]
    missing = [a for a in REQUIRED_ATTRS.get(kind, ()) if a not in attrs]
    if missing:
        return [f"{kind} is missing attribute(s) {', '.join(missing)}"]
    if len(inputs) != 1:
        return [f"{kind} takes exactly one activation input, got {len(inputs)}"]
    (x,) = inputs
    y = output
    out: list[str] = []
    if kind in WEIGHTED:
        if weight is None or bias is None:
            out.append(f"{kind} requires a weight and a bias")
            return out
    elif weight is not None or bias is not None:
        out.append(f"{kind} takes no weight or bias")

    if kind == "quantize":
        if x.dtype != "f32" or y.dtype != "i8":
            out.append("quantize maps f32 -> i8")
        if x.shape != y.shape:
            out.append(f"shape {x.shape} != {y.shape}")
        return out
    if kind == "dequantize":
        if x.dtype != "i8" or y.dtype != "f32":
            out.append("dequantize maps i8 -> f32")
        if x.shape != y.shape:
            out.append(f"shape {x.shape} != {y.shape}")
        return out

    if kind in ("relu", "maxpool2d", "flatten"):
        if x.dtype != y.dtype:
            out.append(f"dtype {x.dtype} != {y.dtype}")
        elif x.quant != y.quant:
            out.append("input and output quantization params differ")
        if kind == "relu":
            if x.shape != y.shape:
                out.append(f"shape {x.shape} != {y.shape}")
        elif kind == "flatten":
            want = (x.shape[0], math.prod(x.shape[1:])) if len(x.shape) >= 2 else None
            if want is None or y.shape != want:
                out.append(f"flatten of {x.shape} cannot produce {y.shape}")
        else:
            if len(x.shape) != 4:
                out.append("maxpool2d expects a 4-D NCHW input")
                return out
            n, c, h, w = x.shape
            p, s = attrs["pool"], attrs["stride"]
            oh, ow = _window_out(h, p, s), _window_out(w, p, s)
            if oh is None or ow is None:
                out.append(f"pool {p} stride {s} does not tile input {h}x{w} exactly")
            elif y.shape != (n, c, oh, ow):
                out.append(f"output shape {y.shape} != expected {(n, c, oh, ow)}")
        return out

    # conv2d / dense
    quantized = x.dtype == "i8"
    want_w, want_b = ("i8", "i32") if quantized else ("f32", "f32")
    if x.dtype not in ("i8", "f32") or y.dtype != x.dtype:
        out.append(f"{kind} needs matching i8 or f32 input/output, got {x.dtype}/{y.dtype}")
    if weight.dtype != want_w or bias.dtype != want_b:
        out.append(f"{kind} with {x.dtype} input needs {want_w} weight and {want_b} bias")
    if quantized and weight.quant is not None and weight.quant.zero_point != 0:
        out.append("weights must be symmetric (zero_point 0)")
    if kind == "dense":
        fi, fo = attrs["in_features"], attrs["out_features"]
        if len(x.shape) != 2 or x.shape[1] != fi:
            out.append(f"input shape {x.shape} != (N, {fi})")
        if weight.shape != (fo, fi):
            out.append(f"weight shape {weight.shape} != {(fo, fi)}")
        if bias.shape != (fo,):
            out.append(f"bias shape {bias.shape} != {(fo,)}")
        if len(x.shape) == 2 and y.shape != (x.shape[0], fo):
            out.append(f"output shape {y.shape} != {(x.shape[0], fo)}")
        return out
    k, s, oc = attrs["kernel"], attrs["stride"], attrs["out_channels"]
    if len(x.shape) != 4:
        out.append("conv2d expects a 4-D NCHW input")
        return out
    n, c, h, w = x.shape
    if weight.shape != (oc, c, k, k):
        out.append(f"weight shape {weight.shape} != {(oc, c, k, k)}")
    if bias.shape != (oc,):
        out.append(f"bias shape {bias.shape} != {(oc,)}")
    oh, ow = _window_out(h, k, s), _window_out(w, k, s)
    if oh is None or ow is None:
        out.append(f"kernel {k} stride {s} does not tile input {h}x{w} exactly")
    elif y.shape != (n, oc, oh, ow):
        out.append(f"output shape {y.shape} != expected {(n, oc, oh, ow)}")
    return out


def validate_graph(g: ModelGraph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    by_id: dict[int, TensorDesc] = {}
    for t in g.tensors:
        if t.id in by_id:
            diags.append(Diagnostic(f"tensor {t.id}", "duplicate tensor id"))
        by_id[t.id] = t
        for msg in tensor_problems(t):
            diags.append(Diagnostic(f"tensor {t.id}", msg))
        if t.is_constant and t.dtype in DTYPES and t.offset >= 0 \
                and t.offset + t.nbytes > len(g.weights):
            diags.append(Diagnostic(f"tensor {t.id}", "constant runs past the end of the weight blob"))

    for tid, what in ((g.input_id, "input"), (g.output_id, "output")):
        if tid not in by_id:
            diags.append(Diagnostic(f"tensor {tid}", f"graph {what} does not exist"))
        elif by_id[tid].dtype != "f32" or by_id[tid].is_constant:
            diags.append(Diagnostic(f"tensor {tid}", f"graph {what} must be a non-constant f32 tensor"))

    writers: dict[int, int] = {}
    available = {g.input_id} | {t.id for t in g.tensors if t.is_constant}
    for i, layer in enumerate(g.layers):
        subj = f"layer {i}"
        refs = list(layer.inputs) + [layer.output]
        refs += [r for r in (layer.weight, layer.bias) if r is not None]
        dangling = [r for r in refs if r not in by_id]
        if dangling:
            diags.append(Diagnostic(subj, f"references unknown tensor id(s) {dangling}"))
            continue
        for r in layer.inputs:
            if r not in available:
                diags.append(Diagnostic(subj, f"reads tensor {r} before it is produced"))
            elif by_id[r].is_constant:
                diags.append(Diagnostic(subj, f"activation input {r} is a constant"))
        for r in (layer.weight, layer.bias):
            if r is not None and not by_id[r].is_constant:
                diags.append(Diagnostic(subj, f"weight/bias tensor {r} is not a constant"))
        o = layer.output
        if o in writers:
            diags.append(Diagnostic(subj, f"tensor {o} is also written by layer {writers[o]}"))
        elif o == g.input_id:
            diags.append(Diagnostic(subj, f"writes the graph input tensor {o}"))
        elif by_id[o].is_constant:
            diags.append(Diagnostic(subj, f"writes constant tensor {o}"))
        else:
            writers[o] = i
        available.add(o)
        w = by_id[layer.weight] if layer.weight is not None else None
        b = by_id[layer.bias] if layer.bias is not None else None
        if any(tensor_problems(by_id[r]) for r in refs):
            continue
        for msg in layer_problems(layer.kind, layer.attrs, [by_id[r] for r in layer.inputs],
                                  by_id[o], w, b):
            diags.append(Diagnostic(subj, msg))

    if g.output_id in by_id and g.output_id not in writers:
        diags.append(Diagnostic(f"tensor {g.output_id}", "graph output is never written"))

    if any(t.dtype == "i8" and not t.is_constant for t in g.tensors):
        for i, layer in enumerate(g.layers):
            if g.input_id in layer.inputs and layer.kind != "quantize":
                diags.append(Diagnostic(f"layer {i}", "first consumer of the f32 input must be quantize"))
            if layer.output == g.output_id and layer.kind != "dequantize":
                diags.append(Diagnostic(f"layer {i}", "producer of the f32 output must be dequantize"))
    return diags


# --------------------------------------------------------------------------
# text format


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(d) for d in text.split("x"))


def _fields(line: str, lineno: int) -> dict[str, str]:
    out = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep or not key or not val:
            raise ParseError(f"expected key=value, got {tok!r}", lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", lineno)
        out[key] = val
    return out


def _int(fields: dict[str, str], key: str, lineno: int) -> int:
    try:
        return int(fields.pop(key))
    except KeyError:
        raise ParseError(f"missing {key!r}", lineno) from None
    except ValueError:
        raise ParseError(f"{key!r} is not an integer", lineno) from None


_LAYER_KEYS = {"kind", "inputs", "output", "weight", "bias"}


def parse_graph(text: str, weights: bytes = b"") -> tuple[ModelGraph, str | None]:
    """Parse graph text. Returns the graph and the weights path named in the file, if any."""
    section = None
    weights_name = None
    tensors: list[TensorDesc] = []
    layers: list[LayerDesc] = []
    io: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("weights:"):
            weights_name = line[len("weights:"):].strip() or None
            continue
        if line in ("tensors:", "layers:", "io:"):
            section = line[:-1]
            continue
        if section is None:
            raise ParseError(f"record outside a section: {line!r}", lineno)
        f = _fields(line, lineno)
        if section == "tensors":
            tid = _int(f, "id", lineno)
            try:
                shape = _parse_shape(f.pop("shape"))
                dtype = f.pop("dtype")
            except KeyError as e:
                raise ParseError(f"missing {e.args[0]!r}", lineno) from None
            except ValueError:
                raise ParseError("malformed shape", lineno) from None
            quant = None
            if "scale" in f or "zero_point" in f:
                try:
                    quant = QuantParams(float(f.pop("scale")), _int(f, "zero_point", lineno))
                except (KeyError, ValueError):
                    raise ParseError("scale and zero_point must appear together", lineno) from None
            offset = _int(f, "offset", lineno) if "offset" in f else None
            if f:
                raise ParseError(f"unknown tensor key(s) {sorted(f)}", lineno)
            tensors.append(TensorDesc(tid, shape, dtype, quant, offset))
        elif section == "layers":
            if "kind" not in f:
                raise ParseError("missing 'kind'", lineno)
            kind = f.pop("kind")
            try:
                inputs = tuple(int(v) for v in f.pop("inputs").split(","))
            except KeyError:
                raise ParseError("missing 'inputs'", lineno) from None
            except ValueError:
                raise ParseError("malformed inputs list", lineno) from None
            output = _int(f, "output", lineno)
            weight = _int(f, "weight", lineno) if "weight" in f else None
            bias = _int(f, "bias", lineno) if "bias" in f else None
            attrs = {k: _int(f, k, lineno) for k in sorted(f)}
            layers.append(LayerDesc(kind, inputs, output, attrs, weight, bias))
        else:
            for key in list(f):
                if key not in ("input", "output"):
                    raise ParseError(f"unknown io key {key!r}", lineno)
                io[key] = _int(f, key, lineno)
    for key in ("input", "output"):
        if key not in io:
            raise ParseError(f"io section lacks {key!r}")
    g = ModelGraph(tuple(tensors), tuple(layers), bytes(weights), io["input"], io["output"])
    return g, weights_name


def load_graph(path: str | Path) -> ModelGraph:
    """Load and validate a graph file together with its weight blob."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    g, weights_name = parse_graph(text)
    if weights_name is not None:
        blob = (path.parent / weights_name).read_bytes()
        g = ModelGraph(g.tensors, g.layers, blob, g.input_id, g.output_id)
    diags = validate_graph(g)
    if diags:
        raise ValidationError(diags)
    return g


def serialize_graph(g: ModelGraph, weights_name: str | None = None) -> str:
    lines = []
    if weights_name is not None:
        lines.append(f"weights: {weights_name}")
    lines.append("tensors:")
    for t in g.tensors:
        rec = f"id={t.id} shape={'x'.join(map(str, t.shape))} dtype={t.dtype}"
        if t.quant is not None:
            rec += f" scale={t.quant.scale!r} zero_point={t.quant.zero_point}"
        if t.offset is not None:
            rec += f" offset={t.offset}"
        lines.append(rec)
    lines.append("layers:")
    for layer in g.layers:
        rec = f"kind={layer.kind} inputs={','.join(map(str, layer.inputs))} output={layer.output}"
        if layer.weight is not None:
            rec += f" weight={layer.weight}"
        if layer.bias is not None:
            rec += f" bias={layer.bias}"
        rec += "".join(f" {k}={v}" for k, v in sorted(layer.attrs.items()))
        lines.append(rec)
    lines.append("io:")
    lines.append(f"input={g.input_id} output={g.output_id}")
    return "\n".join(lines) + "\n"


def save_graph(g: ModelGraph, path: str | Path) -> None:
    """Write ``path`` and, when the graph has weights, ``<stem>.weights`` next to it."""
    path = Path(path)
    weights_name = None
    if g.weights:
        weights_name = path.stem + ".weights"
        (path.parent / weights_name).write_bytes(g.weights)
    path.write_text(serialize_graph(g, weights_name), encoding="utf-8")


class GraphBuilder:
    """Incremental construction of a :class:`ModelGraph` from numpy arrays.

    >>> b = GraphBuilder()
    >>> x = b.tensor((1, 1), "f32")
    >>> w = b.constant(np.ones((1, 1), np.float32))
    >>> bias = b.constant(np.zeros(1, np.float32))
    >>> y = b.tensor((1, 1), "f32")
    >>> b.layer("dense", [x], y, weight=w, bias=bias, in_features=1, out_features=1)
    >>> g = b.build(x, y)
    >>> len(g.tensors), len(g.layers)
    (4, 1)
    """

    def __init__(self):
        self._tensors: list[TensorDesc] = []
        self._layers: list[LayerDesc] = []
        self._blob = bytearray()

    def tensor(self, shape, dtype: str, scale: float | None = None, zero_point: int = 0) -> int:
        tid = len(self._tensors)
        quant = QuantParams(float(scale), int(zero_point)) if scale is not None else None
        self._tensors.append(TensorDesc(tid, tuple(int(d) for d in shape), dtype, quant))
        return tid

    def constant(self, values: np.ndarray, scale: float | None = None, zero_point: int = 0) -> int:
        values = np.asarray(values)
        dtype = {np.dtype("float32"): "f32", np.dtype("int8"): "i8", np.dtype("int32"): "i32"}[values.dtype]
        self._blob.extend(b"\0" * (-len(self._blob) % 4))
        offset = len(self._blob)
        self._blob.extend(np.ascontiguousarray(values, dtype=DTYPES[dtype]).tobytes())
        tid = len(self._tensors)
        quant = QuantParams(float(scale), int(zero_point)) if scale is not None else None
        self._tensors.append(TensorDesc(tid, tuple(values.shape), dtype, quant, offset))
        return tid

    def layer(self, kind: str, inputs, output: int, weight: int | None = None,
              bias: int | None = None, **attrs: int) -> None:
        self._layers.append(LayerDesc(kind, tuple(inputs), output, dict(attrs), weight, bias))

    def build(self, input_id: int, output_id: int, validate: bool = True) -> ModelGraph:
        g = ModelGraph(tuple(self._tensors), tuple(self._layers), bytes(self._blob), input_id, output_id)
        if validate:
            diags = validate_graph(g)
            if diags:
                raise ValidationError(diags)
        return g
