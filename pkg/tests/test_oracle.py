import numpy as np
import pytest

from tilevm.errors import ShapeMismatch
from tilevm.graph import GraphBuilder
from tilevm.oracle import oracle_f32, oracle_int

from helpers import identity_dense


def two_by_two(quantized: bool):
    b = GraphBuilder()
    x = b.tensor((1, 2), "f32")
    y = b.tensor((1, 2), "f32")
    if quantized:
        q = b.tensor((1, 2), "i8", 1.0, 0)
        h = b.tensor((1, 2), "i8", 1.0, 0)
        w = b.constant(np.array([[1, 2], [3, 4]], np.int8), 1.0, 0)
        bias = b.constant(np.zeros(2, np.int32))
        b.layer("quantize", [x], q)
        b.layer("dense", [q], h, weight=w, bias=bias, in_features=2, out_features=2)
        b.layer("dequantize", [h], y)
    else:
        w = b.constant(np.array([[1, 2], [3, 4]], np.float32))
        bias = b.constant(np.array([0.5, -1], np.float32))
        b.layer("dense", [x], y, weight=w, bias=bias, in_features=2, out_features=2)
    return b.build(x, y)


def test_identity_passthrough():
    g = identity_dense()
    for v in (5.0, -2.5, 1e-30, 3.4e38):
        x = np.array([[v]], np.float32)
        assert oracle_int(g, x).output.tobytes() == x.tobytes()
        assert oracle_f32(g, x).output.item() == np.float32(v)


def test_two_by_two():
    x = np.ones((1, 2), np.float32)
    assert oracle_int(two_by_two(True), x).output.tolist() == [[3.0, 7.0]]
    assert oracle_f32(two_by_two(True), x).output.tolist() == [[3.0, 7.0]]


def test_zero_input_gives_bias():
    g = two_by_two(False)
    assert oracle_f32(g, np.zeros((1, 2), np.float32)).output.tolist() == [[0.5, -1.0]]


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        oracle_int(identity_dense(), np.zeros((1, 2), np.float32))
    with pytest.raises(ShapeMismatch):
        oracle_f32(identity_dense(), np.zeros((2, 1), np.float32))


def test_lenet_intermediates(lenet, lenet_inputs, lenet_expected):
    res = oracle_int(lenet, lenet_inputs[0])
    assert len(res.layer_outputs) == len(lenet.layers)
    for layer, tid in zip(lenet.layers, res.layer_outputs):
        assert tid == layer.output
        t = lenet.tensor(tid)
        assert res.tensors[tid].shape == t.shape
        if t.dtype == "i8":
            assert res.tensors[tid].dtype == np.int8
    assert res.output.tobytes() == lenet_expected[0].tobytes()


def test_lenet_f32_close_to_int(lenet, lenet_inputs):
    for x in lenet_inputs:
        diff = np.abs(oracle_f32(lenet, x).output - oracle_int(lenet, x).output).max()
        assert diff <= 0.1


def test_oracle_shares_no_code_with_kernels():
    import ast
    import inspect

    import tilevm.oracle as oracle
    tree = ast.parse(inspect.getsource(oracle))
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    imported |= {a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names}
    assert not imported & {"kernels", "executor", "scheduler", "tilevm.kernels"}
