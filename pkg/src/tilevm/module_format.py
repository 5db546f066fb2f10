"""The compiled module artifact and its little-endian binary encoding.

Layout (all integers little-endian)::

    magic "AMLM" | version u16 | endianness u8 | reserved u8 | section count u16
    section table: count x (id u16, reserved u16, offset u32, length u32)
    sections in order: metadata, tensors, buffers, ops, bytecode, weights

``docs/module-format.md`` documents every section byte by byte.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping

from .errors import (BadMagic, Diagnostic, ModuleFormatError, SectionOverlap,
                     VerifyError, VersionUnsupported)
from .graph import DTYPES, LAYER_KINDS, QuantParams, TensorDesc, layer_problems, tensor_problems

MAGIC = b"AMLM"
VERSION = 1
ALIGNMENTS = (4, 8, 16, 32, 64)


class Section(enum.IntEnum):
    METADATA = 1
    TENSORS = 2
    BUFFERS = 3
    OPS = 4
    BYTECODE = 5
    WEIGHTS = 6


class BufferKind(enum.IntEnum):
    WEIGHTS = 0
    ACTIVATION = 1
    IO = 2


class Opcode(enum.IntEnum):
    ALLOC = 1
    DISPATCH = 2
    WAIT = 3
    FREE = 4
    RETURN = 5


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    operand: int = 0

    def __str__(self) -> str:
        name = self.opcode.name.capitalize()
        if self.opcode in (Opcode.WAIT, Opcode.RETURN):
            return name
        return f"{name}({self.operand})"


def Alloc(buffer_id: int) -> Instruction:
    return Instruction(Opcode.ALLOC, buffer_id)


def Dispatch(op_id: int) -> Instruction:
    return Instruction(Opcode.DISPATCH, op_id)


def Free(buffer_id: int) -> Instruction:
    return Instruction(Opcode.FREE, buffer_id)


WAIT = Instruction(Opcode.WAIT)
RETURN = Instruction(Opcode.RETURN)


@dataclass(frozen=True)
class TileConfig:
    axis: int
    tile_extent: int
    item_count: int


@dataclass(frozen=True)
class BufferPlan:
    buffer_id: int
    tensor_id: int
    byte_size: int
    kind: BufferKind
    offset: int = 0  # blob offset, weights buffers only


@dataclass(frozen=True)
class OpRecord:
    op_id: int
    kind: str
    attrs: Mapping[str, int]
    input_buffers: tuple[int, ...]  # activation input first, then weight and bias
    output_buffer: int
    weight_slice: tuple[int, int] | None
    tile_config: TileConfig


@dataclass(frozen=True)
class ModuleMetadata:
    worker_count_hint: int
    entry_point: str
    input_desc: int
    output_desc: int
    alignment: int


@dataclass(frozen=True)
class ModuleHeader:
    magic: bytes = MAGIC
    version: int = VERSION
    endianness: int = 0
    sections: tuple[tuple[int, int, int], ...] = ()


@dataclass(frozen=True)
class CompiledModule:
    tensors: tuple[TensorDesc, ...]
    buffers: tuple[BufferPlan, ...]
    weights: bytes
    ops: tuple[OpRecord, ...]
    program: tuple[Instruction, ...]
    metadata: ModuleMetadata
    # filled in by decode; ignored for equality so fresh and decoded modules compare equal
    header: ModuleHeader = field(default_factory=ModuleHeader, compare=False)

    def tensor(self, tid: int) -> TensorDesc:
        for t in self.tensors:
            if t.id == tid:
                return t
        raise KeyError(tid)

    def buffer(self, bid: int) -> BufferPlan:
        for b in self.buffers:
            if b.buffer_id == bid:
                return b
        raise KeyError(bid)

    def op(self, op_id: int) -> OpRecord:
        for o in self.ops:
            if o.op_id == op_id:
                return o
        raise KeyError(op_id)

    def buffer_tensor(self, bid: int) -> TensorDesc:
        return self.tensor(self.buffer(bid).tensor_id)


# --------------------------------------------------------------------------
# partitioning helpers


def partition_extent(kind: str, out_shape: tuple[int, ...]) -> tuple[int, int]:
    """Return ``(axis, extent)`` of the axis a kind's work items are cut along.

    dense cuts output features (axis 1); conv2d and maxpool2d cut the flattened
    channel x row span starting at axis 1; elementwise kinds cut the whole
    tensor viewed flat, reported as axis 0.
    """
    if kind == "dense":
        return 1, out_shape[1]
    if kind in ("conv2d", "maxpool2d"):
        return 1, out_shape[1] * out_shape[2]
    return 0, math.prod(out_shape)


def tile_ranges(tc: TileConfig, extent: int) -> list[tuple[int, int]]:
    return [(i * tc.tile_extent, min((i + 1) * tc.tile_extent, extent))
            for i in range(tc.item_count)]


def align_up(n: int, alignment: int) -> int:
    return -(-n // alignment) * alignment


def scan_live_bytes(m: CompiledModule) -> list[int]:
    """Live activation bytes after every instruction, from Alloc/Free alone."""
    sizes = {b.buffer_id: b.byte_size for b in m.buffers}
    live, out = 0, []
    for ins in m.program:
        if ins.opcode == Opcode.ALLOC:
            live += sizes.get(ins.operand, 0)
        elif ins.opcode == Opcode.FREE:
            live -= sizes.get(ins.operand, 0)
        out.append(live)
    return out


def scan_peak_heap(m: CompiledModule) -> int:
    """Analytic peak arena usage of a module's program."""
    return max(scan_live_bytes(m), default=0)


# --------------------------------------------------------------------------
# verification


def verify_module(m: CompiledModule) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def bad(subject: str, msg: str) -> None:
        diags.append(Diagnostic(subject, msg))

    md = m.metadata
    if md.alignment not in ALIGNMENTS:
        bad("metadata", f"alignment {md.alignment} not in {ALIGNMENTS}")
    if not md.entry_point:
        bad("metadata", "entry point is empty")
    if md.worker_count_hint < 1:
        bad("metadata", "worker count hint must be positive")

    tensors: dict[int, TensorDesc] = {}
    for t in m.tensors:
        if t.id in tensors:
            bad(f"tensor {t.id}", "duplicate tensor id")
        tensors[t.id] = t
        for msg in tensor_problems(t):
            bad(f"tensor {t.id}", msg)
    for tid, what in ((md.input_desc, "input"), (md.output_desc, "output")):
        if tid not in tensors:
            bad("metadata", f"{what} tensor {tid} does not exist")
        elif tensors[tid].dtype != "f32":
            bad("metadata", f"{what} tensor {tid} is not f32")

    buffers: dict[int, BufferPlan] = {}
    alignment = md.alignment if md.alignment in ALIGNMENTS else 1
    for b in m.buffers:
        subj = f"buffer {b.buffer_id}"
        if b.buffer_id in buffers:
            bad(subj, "duplicate buffer id")
        buffers[b.buffer_id] = b
        t = tensors.get(b.tensor_id)
        if t is None:
            bad(subj, f"tensor {b.tensor_id} does not exist")
            continue
        if t.dtype not in DTYPES or tensor_problems(t):
            continue
        if b.byte_size != align_up(t.nbytes, alignment):
            bad(subj, f"byte size {b.byte_size} != {align_up(t.nbytes, alignment)}")
        if b.kind == BufferKind.WEIGHTS:
            if t.offset != b.offset:
                bad(subj, f"blob offset {b.offset} disagrees with tensor offset {t.offset}")
            if b.offset < 0 or b.offset + t.nbytes > len(m.weights):
                bad(subj, "weights lie outside the blob")
        elif t.is_constant:
            bad(subj, "constant tensor bound to a non-weights buffer")
        elif b.offset:
            bad(subj, "non-weights buffer carries a blob offset")
        if b.kind == BufferKind.IO and b.tensor_id not in (md.input_desc, md.output_desc):
            bad(subj, "io buffer is not bound to the module input or output")

    ops: dict[int, OpRecord] = {}
    for op in m.ops:
        subj = f"op {op.op_id}"
        if op.op_id in ops:
            bad(subj, "duplicate op id")
        ops[op.op_id] = op
        if op.kind not in LAYER_KINDS:
            bad(subj, f"unknown kernel kind {op.kind!r}")
            continue
        unknown = sorted(set(op.attrs) - set(_ATTR_CODES))
        if unknown:
            bad(subj, f"unknown attribute(s) {unknown}")
        refs = list(op.input_buffers) + [op.output_buffer]
        missing = [r for r in refs if r not in buffers]
        if missing:
            bad(subj, f"references unknown buffer(s) {missing}")
            continue
        if op.output_buffer in op.input_buffers:
            bad(subj, "output buffer is also an input")
        if buffers[op.output_buffer].kind == BufferKind.WEIGHTS:
            bad(subj, "writes a weights buffer")
        spans = [(buffers[r].offset, buffers[r].offset + tensors[buffers[r].tensor_id].nbytes)
                 for r in op.input_buffers
                 if buffers[r].kind == BufferKind.WEIGHTS and buffers[r].tensor_id in tensors
                 and tensors[buffers[r].tensor_id].dtype in DTYPES]
        want_slice = None
        if spans:
            lo, hi = min(s for s, _ in spans), max(e for _, e in spans)
            want_slice = (lo, hi - lo)
        if op.weight_slice != want_slice:
            bad(subj, f"weight slice {op.weight_slice} != span of its constants {want_slice}")
        descs = [tensors.get(buffers[r].tensor_id) for r in refs]
        if any(d is None or tensor_problems(d) for d in descs):
            continue
        *ins, out = descs
        weighted = op.kind in ("conv2d", "dense")
        act = ins[:1] if weighted else ins
        w, bias = (ins[1], ins[2]) if weighted and len(ins) == 3 else (None, None)
        if weighted and len(ins) != 3:
            bad(subj, f"{op.kind} needs activation, weight and bias buffers")
            continue
        problems = layer_problems(op.kind, op.attrs, act, out, w, bias)
        for msg in problems:
            bad(subj, msg)
        if problems:
            continue
        tc = op.tile_config
        axis, extent = partition_extent(op.kind, out.shape)
        if tc.axis != axis:
            bad(subj, f"tile axis {tc.axis} != {axis}")
        if tc.tile_extent < 1:
            bad(subj, "tile extent must be positive")
        elif tc.item_count != -(-extent // tc.tile_extent):
            bad(subj, f"item_count {tc.item_count} != ceil({extent}/{tc.tile_extent})")

    diags.extend(_verify_program(m, buffers, ops))
    return diags


def _verify_program(m: CompiledModule, buffers: dict[int, BufferPlan],
                    ops: dict[int, OpRecord]) -> list[Diagnostic]:
    diags = []
    prog = m.program
    if not prog or prog[-1].opcode != Opcode.RETURN:
        diags.append(Diagnostic("program", "does not end with Return"))
    live: set[int] = set()
    freed: set[int] = set()
    pending: list[int] = []  # ops dispatched since the last Wait
    pending_writes: dict[int, int] = {}  # buffer -> writer op
    written = {b.buffer_id for b in buffers.values()
               if b.kind == BufferKind.WEIGHTS or b.tensor_id == m.metadata.input_desc}
    dispatched: set[int] = set()
    for pc, ins in enumerate(prog):
        subj = f"pc {pc}"
        code = ins.opcode
        if code == Opcode.RETURN:
            if pc != len(prog) - 1:
                diags.append(Diagnostic(subj, "Return before the end of the program"))
            if pending:
                diags.append(Diagnostic(subj, f"Return with un-waited dispatches {pending}"))
            if live:
                diags.append(Diagnostic(subj, f"buffers {sorted(live)} still live at Return"))
            outs = [b.buffer_id for b in buffers.values() if b.tensor_id == m.metadata.output_desc]
            if not any(b in written for b in outs):
                diags.append(Diagnostic(subj, "module output is never written"))
        elif code == Opcode.WAIT:
            pending.clear()
            pending_writes.clear()
        elif code in (Opcode.ALLOC, Opcode.FREE):
            bid = ins.operand
            b = buffers.get(bid)
            if b is None:
                diags.append(Diagnostic(subj, f"{ins} of unknown buffer"))
                continue
            if b.kind != BufferKind.ACTIVATION:
                diags.append(Diagnostic(subj, f"{ins} of a non-activation buffer"))
                continue
            if code == Opcode.ALLOC:
                if bid in live or bid in freed:
                    diags.append(Diagnostic(subj, f"double Alloc of buffer {bid}"))
                live.add(bid)
            else:
                if bid not in live:
                    diags.append(Diagnostic(subj, f"Free of buffer {bid} that is not live"))
                users = [o for o in pending if bid in _op_buffers(ops[o])]
                if users:
                    diags.append(Diagnostic(subj, f"Free of buffer {bid} still used by in-flight op(s) {users}"))
                live.discard(bid)
                freed.add(bid)
        elif code == Opcode.DISPATCH:
            op = ops.get(ins.operand)
            if op is None:
                diags.append(Diagnostic(subj, f"Dispatch of unknown op {ins.operand}"))
                continue
            for bid in _op_buffers(op):
                b = buffers.get(bid)
                if b is not None and b.kind == BufferKind.ACTIVATION and bid not in live:
                    diags.append(Diagnostic(subj, f"op {op.op_id} uses buffer {bid} which is not allocated"))
            if op.op_id in dispatched:
                diags.append(Diagnostic(subj, f"op {op.op_id} dispatched more than once"))
            dispatched.add(op.op_id)
            for bid in op.input_buffers:
                if bid not in written:
                    diags.append(Diagnostic(subj, f"op {op.op_id} reads buffer {bid} before any op writes it"))
                if bid in pending_writes:
                    diags.append(Diagnostic(
                        subj, f"op {op.op_id} reads buffer {bid} written by op {pending_writes[bid]} "
                              "with no Wait in between"))
            if op.output_buffer in pending_writes:
                diags.append(Diagnostic(
                    subj, f"op {op.op_id} and op {pending_writes[op.output_buffer]} both write "
                          f"buffer {op.output_buffer} with no Wait in between"))
            for o in pending:
                if op.output_buffer in ops[o].input_buffers:
                    diags.append(Diagnostic(
                        subj, f"op {op.op_id} overwrites buffer {op.output_buffer} read by in-flight op {o}"))
            pending.append(op.op_id)
            pending_writes[op.output_buffer] = op.op_id
            written.add(op.output_buffer)
        else:
            diags.append(Diagnostic(subj, f"unknown opcode {code}"))
    never = sorted(set(ops) - dispatched)
    if never:
        diags.append(Diagnostic("program", f"op(s) {never} are never dispatched"))
    return diags


def _op_buffers(op: OpRecord) -> tuple[int, ...]:
    return (*op.input_buffers, op.output_buffer)


# --------------------------------------------------------------------------
# binary encoding

_DTYPE_CODES = {"f32": 0, "i8": 1, "i32": 2}
_KIND_CODES = {k: i for i, k in enumerate(LAYER_KINDS)}
_ATTR_CODES = {"kernel": 0, "stride": 1, "out_channels": 2, "pool": 3,
               "in_features": 4, "out_features": 5}
_HEADER = struct.Struct("<4sHBBH")
_ENTRY = struct.Struct("<HHII")


def _inv(d: dict) -> dict:
    return {v: k for k, v in d.items()}


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def pack(self, fmt: str, *vals) -> None:
        self.buf += struct.pack("<" + fmt, *vals)


def _enc_metadata(md: ModuleMetadata) -> bytes:
    w = _Writer()
    name = md.entry_point.encode("utf-8")
    w.pack("IIII", md.worker_count_hint, md.input_desc, md.output_desc, md.alignment)
    w.pack("H", len(name))
    w.buf += name
    return bytes(w.buf)


def _enc_tensors(tensors) -> bytes:
    w = _Writer()
    w.pack("I", len(tensors))
    for t in tensors:
        w.pack("IBBBB", t.id, _DTYPE_CODES[t.dtype], len(t.shape),
               t.quant is not None, t.offset is not None)
        w.pack(f"{len(t.shape)}I", *t.shape)
        if t.quant is not None:
            w.pack("di", t.quant.scale, t.quant.zero_point)
        if t.offset is not None:
            w.pack("I", t.offset)
    return bytes(w.buf)


def _enc_buffers(buffers) -> bytes:
    w = _Writer()
    w.pack("I", len(buffers))
    for b in buffers:
        w.pack("IIBII", b.buffer_id, b.tensor_id, int(b.kind), b.byte_size, b.offset)
    return bytes(w.buf)


def _enc_ops(ops) -> bytes:
    w = _Writer()
    w.pack("I", len(ops))
    for op in ops:
        w.pack("IBB", op.op_id, _KIND_CODES[op.kind], len(op.attrs))
        for key in sorted(op.attrs, key=_ATTR_CODES.__getitem__):
            w.pack("Bi", _ATTR_CODES[key], op.attrs[key])
        w.pack("B", len(op.input_buffers))
        w.pack(f"{len(op.input_buffers)}I", *op.input_buffers)
        w.pack("I", op.output_buffer)
        if op.weight_slice is None:
            w.pack("BII", 0, 0, 0)
        else:
            w.pack("BII", 1, *op.weight_slice)
        tc = op.tile_config
        w.pack("BII", tc.axis, tc.tile_extent, tc.item_count)
    return bytes(w.buf)


def _enc_program(program) -> bytes:
    w = _Writer()
    w.pack("I", len(program))
    for ins in program:
        w.pack("BI", int(ins.opcode), ins.operand)
    return bytes(w.buf)


def encode_module(m: CompiledModule) -> bytes:
    diags = verify_module(m)
    if diags:
        raise VerifyError(diags)
    bodies = [
        (Section.METADATA, _enc_metadata(m.metadata)),
        (Section.TENSORS, _enc_tensors(m.tensors)),
        (Section.BUFFERS, _enc_buffers(m.buffers)),
        (Section.OPS, _enc_ops(m.ops)),
        (Section.BYTECODE, _enc_program(m.program)),
        (Section.WEIGHTS, bytes(m.weights)),
    ]
    offset = _HEADER.size + _ENTRY.size * len(bodies)
    out = bytearray(_HEADER.pack(MAGIC, VERSION, 0, 0, len(bodies)))
    for sid, body in bodies:
        out += _ENTRY.pack(int(sid), 0, offset, len(body))
        offset += len(body)
    for _, body in bodies:
        out += body
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.data):
            raise SectionOverlap(f"{self.name} section truncated")
        vals = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SectionOverlap(f"{self.name} section truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ModuleFormatError(f"{len(self.data) - self.pos} trailing bytes in {self.name} section")


def _code(table: dict, code: int, what: str):
    try:
        return table[code]
    except KeyError:
        raise ModuleFormatError(f"unknown {what} code {code}") from None


def _dec_metadata(r: _Reader) -> ModuleMetadata:
    hint, inp, outp, align = r.take("IIII")
    (n,) = r.take("H")
    try:
        name = r.raw(n).decode("utf-8")
    except UnicodeDecodeError:
        raise ModuleFormatError("entry point is not valid UTF-8") from None
    return ModuleMetadata(hint, name, inp, outp, align)


def _dec_tensors(r: _Reader) -> tuple[TensorDesc, ...]:
    dtypes = _inv(_DTYPE_CODES)
    out = []
    (count,) = r.take("I")
    for _ in range(count):
        tid, dcode, ndim, has_q, has_off = r.take("IBBBB")
        if has_q > 1 or has_off > 1:
            raise ModuleFormatError("malformed tensor flags")
        shape = r.take(f"{ndim}I")
        quant = QuantParams(*r.take("di")) if has_q else None
        offset = r.take("I")[0] if has_off else None
        out.append(TensorDesc(tid, tuple(shape), _code(dtypes, dcode, "dtype"), quant, offset))
    return tuple(out)


def _dec_buffers(r: _Reader) -> tuple[BufferPlan, ...]:
    out = []
    (count,) = r.take("I")
    for _ in range(count):
        bid, tid, kind, size, off = r.take("IIBII")
        try:
            kind = BufferKind(kind)
        except ValueError:
            raise ModuleFormatError(f"unknown buffer kind {kind}") from None
        out.append(BufferPlan(bid, tid, size, kind, off))
    return tuple(out)


def _dec_ops(r: _Reader) -> tuple[OpRecord, ...]:
    kinds, attr_names = _inv(_KIND_CODES), _inv(_ATTR_CODES)
    out = []
    (count,) = r.take("I")
    for _ in range(count):
        op_id, kcode, nattrs = r.take("IBB")
        attrs = {}
        for _ in range(nattrs):
            acode, val = r.take("Bi")
            name = _code(attr_names, acode, "attribute")
            if name in attrs:
                raise ModuleFormatError(f"duplicate attribute {name}")
            attrs[name] = val
        (nin,) = r.take("B")
        inputs = r.take(f"{nin}I")
        (output,) = r.take("I")
        has_slice, s_off, s_len = r.take("BII")
        if has_slice > 1 or (not has_slice and (s_off or s_len)):
            raise ModuleFormatError("malformed weight slice")
        axis, extent, items = r.take("BII")
        out.append(OpRecord(op_id, _code(kinds, kcode, "kernel kind"), attrs, tuple(inputs), output,
                            (s_off, s_len) if has_slice else None, TileConfig(axis, extent, items)))
    return tuple(out)


def _dec_program(r: _Reader) -> tuple[Instruction, ...]:
    out = []
    (count,) = r.take("I")
    for _ in range(count):
        code, operand = r.take("BI")
        try:
            opcode = Opcode(code)
        except ValueError:
            raise ModuleFormatError(f"unknown opcode {code}") from None
        if opcode in (Opcode.WAIT, Opcode.RETURN) and operand:
            raise ModuleFormatError(f"{opcode.name} carries an operand")
        out.append(Instruction(opcode, operand))
    return tuple(out)


def decode_module(data: bytes) -> CompiledModule:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise SectionOverlap("file shorter than the module header")
    magic, version, endian, reserved, nsec = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"module version {version} (supported: {VERSION})")
    if endian != 0 or reserved != 0:
        raise ModuleFormatError("only little-endian modules are supported")
    table_end = _HEADER.size + _ENTRY.size * nsec
    if table_end > len(data):
        raise SectionOverlap("section table runs past the end of the file")
    entries = [_ENTRY.unpack_from(data, _HEADER.size + i * _ENTRY.size) for i in range(nsec)]
    if [e[0] for e in entries] != [int(s) for s in Section] or any(e[1] for e in entries):
        raise ModuleFormatError("section table must list each section once, in order")
    spans = sorted((off, off + length) for _, _, off, length in entries)
    prev_end = table_end
    for start, end in spans:
        if start < prev_end:
            raise SectionOverlap("sections overlap each other or the header")
        if end > len(data):
            raise SectionOverlap("section runs past the end of the file")
        prev_end = end
    if prev_end != len(data) or sum(e - s for s, e in spans) != len(data) - table_end:
        raise SectionOverlap("file contains bytes outside every section")
    body = {Section(sid): data[off:off + length] for sid, _, off, length in entries}

    parsed = {}
    for sid, fn in ((Section.METADATA, _dec_metadata), (Section.TENSORS, _dec_tensors),
                    (Section.BUFFERS, _dec_buffers), (Section.OPS, _dec_ops),
                    (Section.BYTECODE, _dec_program)):
        r = _Reader(body[sid], sid.name.lower())
        parsed[sid] = fn(r)
        r.done()
    m = CompiledModule(
        tensors=parsed[Section.TENSORS], buffers=parsed[Section.BUFFERS],
        weights=body[Section.WEIGHTS], ops=parsed[Section.OPS],
        program=parsed[Section.BYTECODE], metadata=parsed[Section.METADATA],
        header=ModuleHeader(magic, version, endian, tuple((s, o, n) for s, _, o, n in entries)),
    )
    diags = verify_module(m)
    if diags:
        raise VerifyError(diags)
    return m
