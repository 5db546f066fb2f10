import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilevm.compiler import TargetInfo, compile, emit_bytecode, graph_from_module, plan_tiles
from tilevm.errors import UnsupportedLayer, ValidationError
from tilevm.executor import run_inference
from tilevm.graph import LayerDesc, ModelGraph
from tilevm.module_format import (RETURN, WAIT, Alloc, Dispatch, Free, Opcode, encode_module,
                                  partition_extent, tile_ranges, verify_module)
from tilevm.oracle import oracle_int

from helpers import chain, identity_dense, random_graph


def test_identity_dense_program():
    m = compile(identity_dense(), TargetInfo(worker_count=1))
    assert m.program == (Dispatch(0), WAIT, RETURN)
    assert m.ops[0].tile_config.item_count == 1
    assert m.metadata.entry_point == "main"


def test_single_activation_op():
    g = chain((4, 0))
    m = compile(g)
    q = g.layers[0].output
    assert m.program == (Alloc(q), Dispatch(0), WAIT, Dispatch(1), WAIT, Free(q), RETURN)


def test_lenet_ten_dispatches_each_waited(lenet_module):
    prog = lenet_module.program
    dispatch_pcs = [pc for pc, i in enumerate(prog) if i.opcode == Opcode.DISPATCH]
    assert len(dispatch_pcs) == 10
    assert all(prog[pc + 1] == WAIT for pc in dispatch_pcs)
    assert [prog[pc].operand for pc in dispatch_pcs] == list(range(10))
    assert prog[-1] == RETURN


@pytest.mark.parametrize("kind,shape,workers,oversub,tile,items", [
    ("dense", (1, 10), 2, 1, 5, 2),
    ("dense", (1, 4), 2, 1, 2, 2),
    ("dense", (1, 1), 8, 1, 1, 1),
    ("conv2d", (1, 6, 24, 24), 2, 2, 36, 4),
    ("dense", (1, 7), 3, 1, 3, 3),
    ("quantize", (1, 1, 28, 28), 4, 1, 196, 4),
])
def test_plan_tiles(kind, shape, workers, oversub, tile, items):
    tc = plan_tiles(kind, shape, TargetInfo(workers, 16, oversub))
    assert (tc.tile_extent, tc.item_count) == (tile, items)


def test_lenet_dense_84_to_10(lenet):
    m = compile(lenet, TargetInfo(worker_count=2))
    last_dense = [op for op in m.ops if op.kind == "dense"][-1]
    assert (last_dense.tile_config.axis, last_dense.tile_config.tile_extent,
            last_dense.tile_config.item_count) == (1, 5, 2)


@settings(max_examples=200, deadline=None)
@given(extent=st.integers(1, 5000), workers=st.integers(1, 16), oversub=st.integers(1, 4))
def test_tiles_cover_exactly(extent, workers, oversub):
    tc = plan_tiles("dense", (1, extent), TargetInfo(workers, 16, oversub))
    ranges = tile_ranges(tc, extent)
    assert len(ranges) == tc.item_count <= workers * oversub
    assert ranges[0][0] == 0 and ranges[-1][1] == extent
    assert all(a[1] == b[0] and a[0] < a[1] for a, b in zip(ranges, ranges[1:]))


@settings(max_examples=100, deadline=None)
@given(extent=st.integers(1, 2000), workers=st.integers(1, 15))
def test_items_monotone_in_workers(extent, workers):
    a = plan_tiles("dense", (1, extent), TargetInfo(workers)).item_count
    b = plan_tiles("dense", (1, extent), TargetInfo(workers + 1)).item_count
    assert a <= b


def test_compile_is_deterministic(lenet):
    t = TargetInfo(worker_count=4, alignment=32, oversubscription=2)
    assert encode_module(compile(lenet, t)) == encode_module(compile(lenet, t))


def test_chained_ops_waits_between():
    m = compile(chain((8, 3)), TargetInfo(worker_count=2))
    prog = list(m.program)
    for k in range(len(m.ops) - 1):
        a, b = prog.index(Dispatch(k)), prog.index(Dispatch(k + 1))
        assert WAIT in prog[a:b]


def test_buffers_freed_after_last_reader(lenet_module):
    live = set()
    for ins in lenet_module.program:
        if ins.opcode == Opcode.ALLOC:
            live.add(ins.operand)
        elif ins.opcode == Opcode.FREE:
            live.remove(ins.operand)
    assert not live


def test_emit_bytecode_matches_compile(lenet_module):
    assert emit_bytecode(lenet_module.ops, lenet_module.buffers) == lenet_module.program


def test_unsupported_layer(lenet):
    layers = (LayerDesc("softmax", (0,), 1, {}),) + lenet.layers[1:]
    g = ModelGraph(lenet.tensors, layers, lenet.weights, lenet.input_id, lenet.output_id)
    with pytest.raises(UnsupportedLayer):
        compile(g)


def test_invalid_graph_rejected(lenet):
    layers = lenet.layers[:-1]
    g = ModelGraph(lenet.tensors, layers, lenet.weights, lenet.input_id, lenet.output_id)
    with pytest.raises(ValidationError):
        compile(g)


@pytest.mark.parametrize("kw", [{"worker_count": 0}, {"alignment": 3}, {"oversubscription": 0}])
def test_bad_target(kw):
    with pytest.raises(ValueError):
        TargetInfo(**kw)


def test_alignment_applied(lenet):
    for align in (4, 64):
        m = compile(lenet, TargetInfo(alignment=align))
        assert all(b.byte_size % align == 0 for b in m.buffers)
        assert verify_module(m) == []


def test_graph_from_module(lenet, lenet_module):
    assert graph_from_module(lenet_module) == lenet


def test_semantics_preserved_random_graphs(rng):
    for _ in range(200):
        g, x = random_graph(rng)
        t = TargetInfo(int(rng.integers(1, 5)), 16, int(rng.integers(1, 3)))
        m = compile(g, t)
        want = oracle_int(g, x).output
        got = run_inference(m, x, workers=int(rng.integers(1, 5)))
        assert got.tobytes() == np.asarray(want, np.float32).tobytes()


def test_partition_axes():
    assert partition_extent("dense", (2, 10)) == (1, 10)
    assert partition_extent("conv2d", (1, 6, 24, 24)) == (1, 144)
    assert partition_extent("relu", (2, 3, 4, 5)) == (0, 120)
