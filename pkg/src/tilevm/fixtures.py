"""Seeded model builders: a quantized LeNet-5 and a compute-bound dense stack.

Weights are random (seeded), not trained. Each weighted layer is rescaled so
its float activations on a calibration batch peak at ``ACT_SPAN`` in
magnitude, and every activation tensor gets the symmetric scale
``peak / 127``. The input is quantized with scale 1/255 and zero point -128,
matching pixel intensities in [0, 1].
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import GraphBuilder, ModelGraph, load_graph

ACT_SPAN = 4.0
INPUT_SCALE = 1.0 / 255.0
INPUT_ZERO_POINT = -128

LENET5_LAYERS = (
    ("conv2d", 6, 5),
    ("maxpool2d", 2),
    ("conv2d", 16, 5),
    ("maxpool2d", 2),
    ("flatten",),
    ("dense", 120),
    ("dense", 84),
    ("dense", 10),
)
LENET5_INPUT_SHAPE = (1, 1, 28, 28)
LENET5_SEED = 5


def _float_layer(cfg, x, w=None, b=None):
    kind = cfg[0]
    if kind == "conv2d":
        win = sliding_window_view(x, w.shape[2:], axis=(2, 3))
        return np.einsum("nchwij,ocij->nohw", win, w) + b[None, :, None, None]
    if kind == "maxpool2d":
        p = cfg[1]
        return sliding_window_view(x, (p, p), axis=(2, 3))[:, :, ::p, ::p].max(axis=(-1, -2))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    return x @ w.T + b


def build_quantized_graph(layers, input_shape, calibration: np.ndarray, seed: int) -> ModelGraph:
    """Build a quantize -> layers -> dequantize graph with calibrated scales.

    ``layers`` holds tuples ``("conv2d", out_channels, kernel)``,
    ``("maxpool2d", pool)``, ``("flatten",)`` or ``("dense", out_features)``.
    ``calibration`` is a batch of inputs shaped ``(B, *input_shape[1:])``.
    """
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x_id = b.tensor(input_shape, "f32")
    cur = b.tensor(input_shape, "i8", INPUT_SCALE, INPUT_ZERO_POINT)
    b.layer("quantize", [x_id], cur)
    cur_shape, cur_scale, cur_zp = tuple(input_shape), INPUT_SCALE, INPUT_ZERO_POINT
    act = calibration.astype(np.float64)
    for cfg in layers:
        kind = cfg[0]
        if kind in ("conv2d", "dense"):
            if kind == "conv2d":
                oc, k = cfg[1], cfg[2]
                wshape = (oc, cur_shape[1], k, k)
            else:
                wshape = (cfg[1], cur_shape[1])
            fan_in = int(np.prod(wshape[1:]))
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), wshape)
            bias = rng.normal(0.0, 0.1, wshape[0])
            peak = np.abs(_float_layer(cfg, act, w, bias)).max()
            w, bias = w * (ACT_SPAN / peak), bias * (ACT_SPAN / peak)
            s_w = np.abs(w).max() / 127.0
            wq = np.clip(np.round(w / s_w), -127, 127).astype(np.int8)
            bq = np.round(bias / (s_w * cur_scale)).astype(np.int32)
            # calibrate on the dequantized weights the integer path will actually use
            act = _float_layer(cfg, act, wq * s_w, bq * s_w * cur_scale)
            out_scale = float(np.abs(act).max() / 127.0)
            out_shape = (cur_shape[0], *act.shape[1:])
            w_id = b.constant(wq, s_w, 0)
            b_id = b.constant(bq)
            nxt = b.tensor(out_shape, "i8", out_scale, 0)
            if kind == "conv2d":
                b.layer("conv2d", [cur], nxt, weight=w_id, bias=b_id, kernel=cfg[2], stride=1,
                        out_channels=cfg[1])
            else:
                b.layer("dense", [cur], nxt, weight=w_id, bias=b_id, in_features=wshape[1],
                        out_features=wshape[0])
            cur_scale, cur_zp = out_scale, 0
        else:
            act = _float_layer(cfg, act)
            out_shape = (cur_shape[0], *act.shape[1:])
            nxt = b.tensor(out_shape, "i8", cur_scale, cur_zp)
            attrs = {"pool": cfg[1], "stride": cfg[1]} if kind == "maxpool2d" else {}
            b.layer(kind, [cur], nxt, **attrs)
        cur, cur_shape = nxt, out_shape
    y_id = b.tensor(cur_shape, "f32")
    b.layer("dequantize", [cur], y_id)
    return b.build(x_id, y_id)


def lenet5_inputs(count: int = 3, seed: int = LENET5_SEED) -> np.ndarray:
    """Seeded stroke-like 28x28 images in [0, 1], shaped ``(count, 1, 1, 28, 28)``."""
    rng = np.random.default_rng(seed + 1000)
    yy, xx = np.mgrid[0:28, 0:28]
    imgs = []
    for _ in range(count):
        img = np.zeros((28, 28))
        for _ in range(3):
            cy, cx = rng.uniform(6, 22, 2)
            ry, rx = rng.uniform(3, 9, 2)
            ring = np.abs(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 - 1.0)
            img = np.maximum(img, np.clip(1.0 - 3.0 * ring, 0.0, 1.0))
        imgs.append(img)
    return np.array(imgs, dtype=np.float32).reshape(count, 1, 1, 28, 28)


def make_lenet5(seed: int = LENET5_SEED) -> ModelGraph:
    calib = np.concatenate([lenet5_inputs(16, seed + 1)[:, 0], lenet5_inputs(3, seed)[:, 0]])
    return build_quantized_graph(LENET5_LAYERS, LENET5_INPUT_SHAPE, calib, seed)


def make_dense_stack(width: int = 256, depth: int = 8, seed: int = 7) -> ModelGraph:
    """Compute-bound benchmark model: ``depth`` dense ``width x width`` layers."""
    rng = np.random.default_rng(seed + 1000)
    calib = rng.random((16, width))
    return build_quantized_graph((("dense", width),) * depth, (1, width), calib, seed)


def dense_stack_input(width: int = 256, seed: int = 7) -> np.ndarray:
    return np.random.default_rng(seed).random((1, width)).astype(np.float32)


def data_dir() -> Path:
    """Directory holding the committed LeNet-5 fixture files."""
    return Path(str(resources.files("tilevm") / "data"))


def load_lenet5() -> ModelGraph:
    return load_graph(data_dir() / "lenet5.graph")
