"""Random graph generators and a scheduler-free kernel evaluator for tests."""

from __future__ import annotations

import numpy as np

from tilevm.graph import DTYPES, GraphBuilder, ModelGraph
from tilevm.kernels import KernelArgs, Scratch, run_kernel
from tilevm.module_format import partition_extent

KINDS = ("quantize", "dequantize", "relu", "flatten", "dense", "conv2d", "maxpool2d")


def random_cover(rng: np.random.Generator, extent: int) -> list[tuple[int, int]]:
    """A random set of disjoint ranges covering [0, extent), in random order."""
    ncuts = int(rng.integers(0, extent))
    cuts = sorted(set(rng.integers(1, extent, ncuts).tolist())) if extent > 1 else []
    bounds = [0, *cuts, extent]
    ranges = list(zip(bounds[:-1], bounds[1:]))
    rng.shuffle(ranges)
    return ranges


def eval_with_kernels(g: ModelGraph, x: np.ndarray, splitter=None) -> dict[int, np.ndarray]:
    """Evaluate ``g`` layer by layer calling kernels directly on the ranges from ``splitter``.

    ``splitter(kind, extent)`` returns the ranges to execute; default is one full range.
    """
    values = {g.input_id: np.asarray(x, dtype=np.float32)}
    for layer in g.layers:
        xd, yd = g.tensor(layer.inputs[0]), g.tensor(layer.output)
        out = np.zeros(yd.shape, dtype=DTYPES[yd.dtype])
        inputs = [values[layer.inputs[0]]]
        w_quant = None
        if layer.weight is not None:
            inputs += [g.constant(layer.weight), g.constant(layer.bias)]
            w_quant = g.tensor(layer.weight).quant
        _, extent = partition_extent(layer.kind, yd.shape)
        ranges = splitter(layer.kind, extent) if splitter else [(0, extent)]
        for s, e in ranges:
            run_kernel(KernelArgs(layer.kind, layer.attrs, s, e, tuple(inputs), out,
                                  xd.quant, yd.quant, w_quant, Scratch()))
        values[layer.output] = out
    return values


def _scale(rng) -> float:
    return float(2.0 ** rng.uniform(-6, 0))


def _weights(b: GraphBuilder, rng, shape, quantized: bool, s_in: float):
    """Add weight and bias constants; return (w_id, b_id, typical accumulator scale)."""
    fan_in = int(np.prod(shape[1:]))
    if quantized:
        w = rng.integers(-127, 128, shape).astype(np.int8)
        s_w = _scale(rng)
        bias = rng.integers(-2000, 2001, shape[0]).astype(np.int32)
        w_id = b.constant(w, s_w, 0)
        # an output scale that keeps most results unsaturated but still clips sometimes
        s_out = s_w * s_in * 127 * np.sqrt(fan_in) * rng.uniform(0.2, 1.5) / 64
        return w_id, b.constant(bias), s_out
    w = rng.normal(0, 1, shape).astype(np.float32)
    bias = rng.normal(0, 1, shape[0]).astype(np.float32)
    return b.constant(w), b.constant(bias), None


def random_graph(rng: np.random.Generator, quantized: bool | None = None, max_layers: int = 4,
                 kinds=None, max_dim: int = 16, rank: int | None = None
                 ) -> tuple[ModelGraph, np.ndarray]:
    """A random valid graph of 1..max_layers core layers (dims <= max_dim) and an input."""
    if quantized is None:
        quantized = bool(rng.integers(0, 2))
    b = GraphBuilder()
    if rank is None:
        rank = int(rng.choice((2, 4)))
    if rank == 4:
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                 int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_dim + 1)))
    else:
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, max_dim + 1)))
    x_id = b.tensor(shape, "f32")
    dt = "i8" if quantized else "f32"
    if quantized:
        s, z = _scale(rng) * 4, int(rng.integers(-20, 21))
        cur = b.tensor(shape, "i8", s, z)
        b.layer("quantize", [x_id], cur)
    else:
        s, z = None, 0
        cur = x_id
    nlayers = int(rng.integers(1, max_layers + 1))
    allowed = kinds or ("dense", "conv2d", "maxpool2d", "relu", "flatten")
    for i in range(nlayers):
        options = [k for k in allowed if _fits(k, shape)]
        if not options:
            options = ["relu"]
        kind = str(rng.choice(options))
        if kind == "relu":
            out_shape = shape
            nxt_q = (s, z)
            attrs = {}
        elif kind == "flatten":
            out_shape = (shape[0], int(np.prod(shape[1:])))
            nxt_q = (s, z)
            attrs = {}
        elif kind == "maxpool2d":
            n, c, h, w = shape
            opts = [(p, st) for p in (1, 2, 3) for st in (1, 2, 3)
                    if p <= min(h, w) and (h - p) % st == 0 and (w - p) % st == 0]
            p, st = opts[int(rng.integers(0, len(opts)))]
            out_shape = (n, c, (h - p) // st + 1, (w - p) // st + 1)
            nxt_q = (s, z)
            attrs = {"pool": p, "stride": st}
        elif kind == "dense":
            fo = int(rng.integers(1, max_dim + 1))
            w_id, b_id, s_out = _weights(b, rng, (fo, shape[1]), quantized, s)
            out_shape = (shape[0], fo)
            nxt_q = (s_out, int(rng.integers(-10, 11))) if quantized else (None, 0)
            attrs = {"in_features": shape[1], "out_features": fo}
        else:
            n, c, h, w = shape
            opts = [(k, st) for k in (1, 2, 3, 5) for st in (1, 2)
                    if k <= min(h, w) and (h - k) % st == 0 and (w - k) % st == 0]
            k, st = opts[int(rng.integers(0, len(opts)))]
            oc = int(rng.integers(1, 5))
            w_id, b_id, s_out = _weights(b, rng, (oc, c, k, k), quantized, s)
            out_shape = (n, oc, (h - k) // st + 1, (w - k) // st + 1)
            nxt_q = (s_out, int(rng.integers(-10, 11))) if quantized else (None, 0)
            attrs = {"kernel": k, "stride": st, "out_channels": oc}
        nxt = b.tensor(out_shape, dt, *(nxt_q if quantized else (None,)))
        if kind in ("dense", "conv2d"):
            b.layer(kind, [cur], nxt, weight=w_id, bias=b_id, **attrs)
        else:
            b.layer(kind, [cur], nxt, **attrs)
        cur, shape = nxt, out_shape
        if quantized:
            s, z = nxt_q
    if quantized:
        y = b.tensor(shape, "f32")
        b.layer("dequantize", [cur], y)
        cur = y
    g = b.build(x_id, cur)
    x = rng.normal(0, 2, g.tensor(x_id).shape).astype(np.float32)
    return g, x


def _fits(kind: str, shape) -> bool:
    if kind in ("conv2d", "maxpool2d"):
        return len(shape) == 4
    if kind == "dense":
        return len(shape) == 2
    if kind == "flatten":
        return len(shape) == 4
    return True


def random_kernel_case(kind: str, rng: np.random.Generator, max_dim: int = 8):
    """A small graph whose only core layer (besides quantize/dequantize wrappers) is ``kind``."""
    if kind in ("quantize", "dequantize"):
        return random_graph(rng, quantized=True, max_layers=1, kinds=("relu",), max_dim=max_dim)
    quantized = bool(rng.integers(0, 4))  # mostly integer cases
    rank = 2 if kind == "dense" else 4 if kind in ("conv2d", "maxpool2d", "flatten") else None
    return random_graph(rng, quantized=quantized, max_layers=1, kinds=(kind,), max_dim=max_dim,
                        rank=rank)


def identity_dense() -> ModelGraph:
    """The 1->1 f32 dense layer with weight 1 and bias 0."""
    b = GraphBuilder()
    x = b.tensor((1, 1), "f32")
    y = b.tensor((1, 1), "f32")
    w = b.constant(np.ones((1, 1), np.float32))
    bias = b.constant(np.zeros(1, np.float32))
    b.layer("dense", [x], y, weight=w, bias=bias, in_features=1, out_features=1)
    return b.build(x, y)


def chain(kinds_shapes, quant=(1.0, 0)):
    """Quantize -> relu* -> dequantize chain on a (1, n) tensor, for bytecode tests."""
    n, depth = kinds_shapes
    b = GraphBuilder()
    x = b.tensor((1, n), "f32")
    cur = b.tensor((1, n), "i8", *quant)
    b.layer("quantize", [x], cur)
    for _ in range(depth):
        nxt = b.tensor((1, n), "i8", *quant)
        b.layer("relu", [cur], nxt)
        cur = nxt
    y = b.tensor((1, n), "f32")
    b.layer("dequantize", [cur], y)
    return b.build(x, y)
