"""Reference interpreter for :class:`ModelGraph`.

Deliberately naive and independent of :mod:`tilevm.kernels`: plain Python
loops over nested lists, exact rational arithmetic for rounding and f32
accumulation, no tiling. It is the ground truth the compiled path is checked
against. Do not import from ``kernels`` here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeMismatch
from .graph import ModelGraph, TensorDesc

_FMT = {"f32": "f", "i8": "b", "i32": "i"}
_NP = {"f32": np.float32, "i8": np.int8, "i32": np.int32}


@dataclass
class OracleResult:
    tensors: dict[int, np.ndarray]  # every layer output, by tensor id
    layer_outputs: list[int]  # tensor id written by each layer, in order
    output: np.ndarray


def _to_f32(v: float) -> float:
    return struct.unpack("<f", struct.pack("<f", v))[0]


def _round_away(x: float) -> int:
    q = Fraction(x)
    n = math.floor(abs(q) + Fraction(1, 2))
    return n if q >= 0 else -n


def _clamp8(v: int) -> int:
    return max(-128, min(127, v))


def _read_const(g: ModelGraph, t: TensorDesc) -> list:
    fmt = "<%d%s" % (t.size, _FMT[t.dtype])
    flat = list(struct.unpack_from(fmt, g.weights, t.offset))
    return _nest(flat, t.shape)


def _nest(flat: list, shape) -> list:
    if len(shape) == 1:
        return list(flat)
    step = len(flat) // shape[0]
    return [_nest(flat[i * step:(i + 1) * step], shape[1:]) for i in range(shape[0])]


def _flatten(v) -> list:
    if isinstance(v, list):
        out = []
        for e in v:
            out.extend(_flatten(e))
        return out
    return [v]


def _shape_of(v) -> tuple:
    shape = []
    while isinstance(v, list):
        shape.append(len(v))
        v = v[0]
    return tuple(shape)


def _map(fn, v):
    return [_map(fn, e) for e in v] if isinstance(v, list) else fn(v)


def _requant(acc: int, s_w: float, s_in: float, s_out: float, z_out: int) -> int:
    mult = s_w * s_in / s_out
    return _clamp8(_round_away(float(acc) * mult) + z_out)


def _exact_f32(terms) -> float:
    return _to_f32(float(sum((Fraction(t) for t in terms), Fraction(0))))


class _Interp:
    def __init__(self, g: ModelGraph, float_mode: bool):
        self.g = g
        self.float_mode = float_mode
        self.descs = {t.id: t for t in g.tensors}

    def const(self, tid: int):
        t = self.descs[tid]
        vals = _read_const(self.g, t)
        if not self.float_mode:
            return vals
        if t.dtype == "i8":
            return _map(lambda q: t.quant.scale * (q - t.quant.zero_point), vals)
        return vals

    def bias(self, layer, x_desc):
        b = self.const(layer.bias)
        if self.float_mode and self.descs[layer.bias].dtype == "i32":
            w = self.descs[layer.weight]
            return [v * w.quant.scale * x_desc.quant.scale for v in b]
        return b

    def run(self, layer, x):
        kind = layer.kind
        xd = self.descs[layer.inputs[0]]
        yd = self.descs[layer.output]
        fm = self.float_mode
        if kind == "quantize":
            if fm:
                return x
            s, z = yd.quant.scale, yd.quant.zero_point

            def q(v):
                if math.isnan(v):
                    return z
                if math.isinf(v):
                    return 127 if v > 0 else -128
                return _clamp8(_round_away(v / s) + z)
            return _map(q, x)
        if kind == "dequantize":
            if fm:
                return x
            s, z = xd.quant.scale, xd.quant.zero_point
            return _map(lambda v: _to_f32(s * (v - z)), x)
        if kind == "relu":
            if not fm and xd.dtype == "i8":
                z = xd.quant.zero_point
                return _map(lambda v: v if v > z else z, x)
            return _map(lambda v: v if v > 0 else 0.0, x)
        if kind == "flatten":
            return [_flatten(sample) for sample in x]
        if kind == "maxpool2d":
            p, st = layer.attrs["pool"], layer.attrs["stride"]
            n, c, h, w = _shape_of(x)
            oh, ow = (h - p) // st + 1, (w - p) // st + 1
            return [[[[max(x[b][ch][i * st + di][j * st + dj] for di in range(p) for dj in range(p))
                       for j in range(ow)] for i in range(oh)] for ch in range(c)] for b in range(n)]
        if kind == "dense":
            wt = self.const(layer.weight)
            bias = self.bias(layer, xd)
            fo = layer.attrs["out_features"]
            out = []
            for sample in x:
                row_out = []
                for r in range(fo):
                    if fm or xd.dtype == "f32":
                        terms = [wt[r][c] * sample[c] for c in range(len(sample))] + [bias[r]]
                        row_out.append(sum(terms) if fm else _exact_f32(terms))
                    else:
                        acc = bias[r]
                        for c in range(len(sample)):
                            acc += wt[r][c] * (sample[c] - xd.quant.zero_point)
                        row_out.append(_requant(acc, self.descs[layer.weight].quant.scale,
                                                xd.quant.scale, yd.quant.scale, yd.quant.zero_point))
                out.append(row_out)
            return out
        if kind == "conv2d":
            wt = self.const(layer.weight)
            bias = self.bias(layer, xd)
            k, st, oc_n = layer.attrs["kernel"], layer.attrs["stride"], layer.attrs["out_channels"]
            n, c, h, w = _shape_of(x)
            oh, ow = (h - k) // st + 1, (w - k) // st + 1
            out = []
            for b in range(n):
                chans = []
                for oc in range(oc_n):
                    rows = []
                    for i in range(oh):
                        cols = []
                        for j in range(ow):
                            taps = [(wt[oc][ci][di][dj], x[b][ci][i * st + di][j * st + dj])
                                    for ci in range(c) for di in range(k) for dj in range(k)]
                            if fm or xd.dtype == "f32":
                                terms = [a * v for a, v in taps] + [bias[oc]]
                                cols.append(sum(terms) if fm else _exact_f32(terms))
                            else:
                                z = xd.quant.zero_point
                                acc = bias[oc] + sum(a * (v - z) for a, v in taps)
                                cols.append(_requant(acc, self.descs[layer.weight].quant.scale,
                                                     xd.quant.scale, yd.quant.scale, yd.quant.zero_point))
                        rows.append(cols)
                    chans.append(rows)
                out.append(chans)
            return out
        raise ValueError(f"oracle has no rule for {kind!r}")


def _execute(g: ModelGraph, x, float_mode: bool) -> OracleResult:
    inp = g.tensor(g.input_id)
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape != inp.shape:
        raise ShapeMismatch(f"input shape {arr.shape} != {inp.shape}")
    interp = _Interp(g, float_mode)
    values = {g.input_id: arr.tolist()}
    produced = []
    results = {}
    for layer in g.layers:
        y = interp.run(layer, values[layer.inputs[0]])
        values[layer.output] = y
        produced.append(layer.output)
        d = g.tensor(layer.output)
        dtype = np.float64 if float_mode else _NP[d.dtype]
        results[layer.output] = np.array(y, dtype=dtype).reshape(d.shape)
    return OracleResult(results, produced, results[g.output_id])


def oracle_int(g: ModelGraph, x) -> OracleResult:
    """Run the graph with the same integer semantics as the compiled path."""
    return _execute(g, x, float_mode=False)


def oracle_f32(g: ModelGraph, x) -> OracleResult:
    """Run the graph in float64 ignoring quantization; constants are dequantized first."""
    return _execute(g, x, float_mode=True)
