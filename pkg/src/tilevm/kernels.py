"""Operator kernels that compute an arbitrary sub-range of an op's partition axis.

Each kernel writes only the slice ``[start, end)`` of its partition axis and
never writes its inputs, so disjoint ranges of one op can run concurrently.

Integer paths accumulate exactly in int64 and requantize with a float64
multiplier ``s_w * s_in / s_out`` followed by round-half-away-from-zero.
f32 paths form every product exactly in float64 and sum with ``math.fsum``
(correctly rounded), so results do not depend on how the range is cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import QuantParams

ACC_LIMIT = 2 ** 31


class Scratch:
    """Bump-allocated per-worker scratch region with a high-water mark."""

    def __init__(self, initial_bytes: int = 0):
        self._region = np.empty(initial_bytes, dtype=np.uint8)
        self._used = 0
        self.high_water = 0

    def reset(self) -> None:
        self._used = 0

    def take(self, shape, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = math.prod(shape) * dtype.itemsize
        start = -(-self._used // 16) * 16
        if start + nbytes > self._region.size:
            # views handed out earlier keep the old region alive
            self._region = np.empty(max(2 * self._region.size, start + nbytes), dtype=np.uint8)
        self._used = start + nbytes
        self.high_water = max(self.high_water, self._used)
        return self._region[start:start + nbytes].view(dtype).reshape(shape)


@dataclass
class KernelArgs:
    kind: str
    attrs: Mapping[str, int]
    start: int
    end: int
    inputs: tuple[np.ndarray, ...]  # activation, then weight and bias when present
    output: np.ndarray
    in_quant: QuantParams | None = None
    out_quant: QuantParams | None = None
    w_quant: QuantParams | None = None
    scratch: Scratch | None = None

    def temp(self, shape, dtype) -> np.ndarray:
        if self.scratch is None:
            return np.empty(shape, dtype=dtype)
        return self.scratch.take(shape, dtype)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero, exactly for finite float64."""
    a = np.abs(x)
    r = np.floor(a)
    r += (a - r) >= 0.5
    return np.copysign(r, x)


def requantize(acc: np.ndarray, multiplier: float, zero_point: int) -> np.ndarray:
    scaled = np.clip(acc.astype(np.float64) * multiplier, -1e9, 1e9)
    return np.clip(round_half_away(scaled) + zero_point, -128, 127).astype(np.int8)


def _multiplier(args: KernelArgs) -> float:
    return args.w_quant.scale * args.in_quant.scale / args.out_quant.scale


def _check_acc(acc: np.ndarray) -> None:
    if __debug__ and acc.size:
        assert int(np.abs(acc).max()) < ACC_LIMIT, "i32 accumulator overflow"


def _flat_io(args: KernelArgs) -> tuple[np.ndarray, np.ndarray]:
    return args.inputs[0].reshape(-1)[args.start:args.end], args.output.reshape(-1)


def k_quantize(args: KernelArgs) -> None:
    x, out = _flat_io(args)
    s, z = args.out_quant.scale, args.out_quant.zero_point
    v = x.astype(np.float64)
    nan = np.isnan(v)
    v = np.clip(np.where(nan, 0.0, v) / s, -1e9, 1e9)
    q = np.clip(round_half_away(v) + z, -128, 127)
    q[nan] = z
    out[args.start:args.end] = q.astype(np.int8)


def k_dequantize(args: KernelArgs) -> None:
    x, out = _flat_io(args)
    s, z = args.in_quant.scale, args.in_quant.zero_point
    out[args.start:args.end] = (s * (x.astype(np.float64) - z)).astype(np.float32)


def k_relu(args: KernelArgs) -> None:
    x, out = _flat_io(args)
    if args.in_quant is not None:
        out[args.start:args.end] = np.maximum(x, np.int8(args.in_quant.zero_point))
    else:
        out[args.start:args.end] = np.where(x > 0, x, np.float32(0))


def k_flatten(args: KernelArgs) -> None:
    x, out = _flat_io(args)
    out[args.start:args.end] = x


def _fsum_rows(products: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Correctly rounded sum over the last axis plus a per-row bias, cast to f32."""
    flat = products.reshape(-1, products.shape[-1])
    b = np.broadcast_to(bias, products.shape[:-1]).reshape(-1)
    sums = [math.fsum((*row, float(bb))) for row, bb in zip(flat.tolist(), b.tolist())]
    return np.array(sums, dtype=np.float64).astype(np.float32).reshape(products.shape[:-1])


def k_dense(args: KernelArgs) -> None:
    x, w, b = args.inputs
    s, e = args.start, args.end
    n, fin = x.shape
    if args.in_quant is None:
        prod = args.temp((n, e - s, fin), np.float64)
        np.multiply(x.astype(np.float64)[:, None, :], w[s:e].astype(np.float64)[None], out=prod)
        args.output[:, s:e] = _fsum_rows(prod, b[s:e].astype(np.float64))
        return
    prod = args.temp((n, e - s, fin), np.int64)
    xz = x.astype(np.int64) - args.in_quant.zero_point
    np.multiply(xz[:, None, :], w[s:e].astype(np.int64)[None], out=prod)
    acc = prod.sum(axis=2) + b[s:e].astype(np.int64)
    _check_acc(acc)
    args.output[:, s:e] = requantize(acc, _multiplier(args), args.out_quant.zero_point)


def _channel_rows(start: int, end: int, rows: int):
    """Yield ``(channel, row_lo, row_hi)`` covering flattened channel x row units."""
    for c in range(start // rows, (end - 1) // rows + 1):
        yield c, max(start, c * rows) - c * rows, min(end, (c + 1) * rows) - c * rows


def _windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, size, size)
    return sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]


def k_conv2d(args: KernelArgs) -> None:
    x, w, b = args.inputs
    k, st = args.attrs["kernel"], args.attrs["stride"]
    out = args.output
    n, _, oh, ow = out.shape
    quantized = args.in_quant is not None
    if quantized:
        win = _windows(x.astype(np.int64) - args.in_quant.zero_point, k, st)
        mult = _multiplier(args)
    else:
        win = _windows(x.astype(np.float64), k, st)
    for oc, y0, y1 in _channel_rows(args.start, args.end, oh):
        patch = win[:, :, y0:y1]  # (N, C, r, OW, k, k)
        wc = w[oc][None, :, None, None, :, :]
        if quantized:
            prod = args.temp(patch.shape, np.int64)
            np.multiply(patch, wc.astype(np.int64), out=prod)
            acc = prod.sum(axis=(1, 4, 5)) + int(b[oc])
            _check_acc(acc)
            out[:, oc, y0:y1] = requantize(acc, mult, args.out_quant.zero_point)
        else:
            prod = args.temp(patch.shape, np.float64)
            np.multiply(patch, wc.astype(np.float64), out=prod)
            terms = np.moveaxis(prod, 1, 3).reshape(n, y1 - y0, ow, -1)
            out[:, oc, y0:y1] = _fsum_rows(terms, np.float64(b[oc]))


def k_maxpool2d(args: KernelArgs) -> None:
    (x,) = args.inputs
    p, st = args.attrs["pool"], args.attrs["stride"]
    out = args.output
    win = _windows(x, p, st)
    for c, y0, y1 in _channel_rows(args.start, args.end, out.shape[2]):
        out[:, c, y0:y1] = win[:, c, y0:y1].max(axis=(-1, -2))


KERNELS: dict[str, Callable[[KernelArgs], None]] = {
    "quantize": k_quantize,
    "dequantize": k_dequantize,
    "relu": k_relu,
    "flatten": k_flatten,
    "dense": k_dense,
    "conv2d": k_conv2d,
    "maxpool2d": k_maxpool2d,
}


def run_kernel(args: KernelArgs) -> None:
    KERNELS[args.kind](args)
