import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilevm.compiler import TargetInfo, compile
from tilevm.errors import BadMagic, ModuleFormatError, SectionOverlap, VerifyError, VersionUnsupported
from tilevm.module_format import (WAIT, BufferPlan, Dispatch, Opcode, TileConfig, decode_module,
                                  encode_module, scan_live_bytes, scan_peak_heap, tile_ranges,
                                  verify_module)

from helpers import chain, identity_dense, random_graph


def _replace_op(m, op_id, **changes):
    ops = tuple(dataclasses.replace(o, **changes) if o.op_id == op_id else o for o in m.ops)
    return dataclasses.replace(m, ops=ops)


def test_encode_is_deterministic():
    m = compile(identity_dense())
    assert encode_module(m) == encode_module(compile(identity_dense()))


def test_fixture_round_trip(lenet_module):
    data = encode_module(lenet_module)
    back = decode_module(data)
    assert back == lenet_module
    assert back.header.magic == b"AMLM"
    assert [s[0] for s in back.header.sections] == [1, 2, 3, 4, 5, 6]
    assert verify_module(lenet_module) == []


def test_bad_magic(lenet_module):
    data = b"XXXX" + encode_module(lenet_module)[4:]
    with pytest.raises(BadMagic, match="bad magic"):
        decode_module(data)


def test_unsupported_version(lenet_module):
    data = bytearray(encode_module(lenet_module))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(VersionUnsupported):
        decode_module(bytes(data))


@pytest.mark.parametrize("cut", [1, 7, 100])
def test_truncated(lenet_module, cut):
    data = encode_module(lenet_module)
    with pytest.raises(ModuleFormatError):
        decode_module(data[:-cut])


def test_truncated_section_is_overlap_error(lenet_module):
    with pytest.raises(SectionOverlap):
        decode_module(encode_module(lenet_module)[:-1])


def test_trailing_bytes_rejected(lenet_module):
    with pytest.raises(SectionOverlap):
        decode_module(encode_module(lenet_module) + b"\0")


def test_dangling_buffer_is_verify_error():
    m = compile(identity_dense())
    bad = _replace_op(m, 0, output_buffer=42)
    assert any("42" in str(d) for d in verify_module(bad))
    with pytest.raises(VerifyError):
        encode_module(bad)


def test_missing_wait_names_both_ops():
    m = compile(chain((4, 1)))
    prog = [i for k, i in enumerate(m.program)
            if not (i == WAIT and k + 1 < len(m.program) and m.program[k - 1] == Dispatch(0))]
    assert len(prog) == len(m.program) - 1
    diags = [str(d) for d in verify_module(dataclasses.replace(m, program=tuple(prog)))]
    assert any("op 1 reads buffer" in d and "op 0" in d and "no Wait" in d for d in diags), diags


def test_bad_item_count():
    m = compile(chain((10, 1)), TargetInfo(worker_count=2))
    tc = m.op(1).tile_config
    bad = _replace_op(m, 1, tile_config=TileConfig(tc.axis, tc.tile_extent, tc.item_count + 1))
    diags = verify_module(bad)
    assert len(diags) == 1 and "item_count" in str(diags[0])


def test_wrong_buffer_size():
    m = compile(identity_dense())
    buffers = tuple(dataclasses.replace(b, byte_size=b.byte_size + 1) if b.buffer_id == 0 else b
                    for b in m.buffers)
    assert verify_module(dataclasses.replace(m, buffers=buffers))


def test_double_free_and_leak():
    m = compile(chain((4, 2)))
    frees = [k for k, i in enumerate(m.program) if i.opcode == Opcode.FREE]
    doubled = m.program[:frees[0] + 1] + (m.program[frees[0]],) + m.program[frees[0] + 1:]
    assert verify_module(dataclasses.replace(m, program=doubled))
    leaked = m.program[:frees[-1]] + m.program[frees[-1] + 1:]
    assert any("live" in str(d) for d in verify_module(dataclasses.replace(m, program=leaked)))


def test_missing_return():
    m = compile(identity_dense())
    assert verify_module(dataclasses.replace(m, program=m.program[:-1]))


def test_tile_ranges():
    assert tile_ranges(TileConfig(1, 4, 1), 4) == [(0, 4)]
    assert tile_ranges(TileConfig(1, 2, 2), 4) == [(0, 2), (2, 4)]
    assert tile_ranges(TileConfig(1, 2, 3), 5) == [(0, 2), (2, 4), (4, 5)]


def test_scan_peak(lenet_module):
    live = scan_live_bytes(lenet_module)
    assert live[-1] == 0 and max(live) == scan_peak_heap(lenet_module)
    # independent recount straight from the instruction list
    sizes = {b.buffer_id: b.byte_size for b in lenet_module.buffers}
    cur = peak = 0
    for ins in lenet_module.program:
        if ins.opcode == Opcode.ALLOC:
            cur += sizes[ins.operand]
        elif ins.opcode == Opcode.FREE:
            cur -= sizes[ins.operand]
        peak = max(peak, cur)
    assert peak == scan_peak_heap(lenet_module)
    # conv1 output (6x24x24 i8) is live together with the quantized 28x28 input
    assert peak >= 3456 + 784


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), workers=st.integers(1, 8), oversub=st.integers(1, 3),
       align=st.sampled_from([4, 8, 16, 32, 64]))
def test_round_trip_property(seed, workers, oversub, align):
    g, _ = random_graph(np.random.default_rng(seed))
    m = compile(g, TargetInfo(workers, align, oversub))
    data = encode_module(m)
    assert decode_module(data) == m
    assert encode_module(decode_module(data)) == data


def test_every_single_byte_mutation_of_small_module():
    """Exhaustive: each flipped byte is rejected or decodes to a module that still verifies."""
    data = encode_module(compile(chain((3, 1))))
    for pos in range(len(data)):
        for flip in (0x01, 0x80, 0xFF):
            buf = bytearray(data)
            buf[pos] ^= flip
            try:
                m = decode_module(bytes(buf))
            except ModuleFormatError:
                continue
            assert verify_module(m) == []


def test_weights_kind_buffer_bounds():
    m = compile(identity_dense())
    buffers = tuple(dataclasses.replace(b, offset=1000) if b.kind == 0 else b for b in m.buffers)
    assert verify_module(dataclasses.replace(m, buffers=buffers))
    assert isinstance(m.buffers[0], BufferPlan)
