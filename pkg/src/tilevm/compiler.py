"""Lower a validated :class:`ModelGraph` into a :class:`CompiledModule`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import TilingError, UnsupportedLayer, ValidationError
from .graph import LAYER_KINDS, LayerDesc, ModelGraph, validate_graph
from .module_format import (ALIGNMENTS, RETURN, WAIT, Alloc, BufferKind, BufferPlan, CompiledModule, Dispatch,
                            Free, Instruction, ModuleMetadata, OpRecord, TileConfig, align_up,
                            partition_extent)

ENTRY_POINT = "main"


@dataclass(frozen=True)
class TargetInfo:
    worker_count: int = 1
    alignment: int = 16
    oversubscription: int = 1

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.oversubscription < 1:
            raise ValueError("oversubscription must be >= 1")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")


def plan_tiles(kind: str, out_shape: tuple[int, ...], target: TargetInfo) -> TileConfig:
    """Split an op's partition axis into at most ``workers * oversubscription`` items.

    >>> plan_tiles("dense", (1, 10), TargetInfo(worker_count=2))
    TileConfig(axis=1, tile_extent=5, item_count=2)
    """
    axis, extent = partition_extent(kind, out_shape)
    if extent < 1:
        raise TilingError(f"{kind} output {out_shape} has nothing to tile")
    slots = target.worker_count * target.oversubscription
    tile = max(1, -(-extent // slots))
    return TileConfig(axis, tile, -(-extent // tile))


def emit_bytecode(ops: Sequence[OpRecord], buffers: Sequence[BufferPlan]) -> tuple[Instruction, ...]:
    """Alloc outputs on first use, Wait after every Dispatch, Free after the last reader's Wait."""
    kinds = {b.buffer_id: b.kind for b in buffers}
    last_use: dict[int, int] = {}
    for i, op in enumerate(ops):
        for bid in (*op.input_buffers, op.output_buffer):
            last_use[bid] = i
    prog: list[Instruction] = []
    allocated: set[int] = set()
    for i, op in enumerate(ops):
        out = op.output_buffer
        if kinds[out] == BufferKind.ACTIVATION and out not in allocated:
            allocated.add(out)
            prog.append(Alloc(out))
        prog.append(Dispatch(op.op_id))
        prog.append(WAIT)
        dead = sorted({b for b in (*op.input_buffers, out)
                       if kinds[b] == BufferKind.ACTIVATION and last_use[b] == i})
        prog.extend(Free(b) for b in dead)
    prog.append(RETURN)
    return tuple(prog)


def compile(g: ModelGraph, target: TargetInfo = TargetInfo()) -> CompiledModule:  # noqa: A001
    for i, layer in enumerate(g.layers):
        if layer.kind not in LAYER_KINDS:
            raise UnsupportedLayer(f"layer {i}: unsupported kind {layer.kind!r}")
    diags = validate_graph(g)
    if diags:
        raise ValidationError(diags)

    # one buffer per tensor, sharing its id
    buffers = []
    for t in g.tensors:
        if t.is_constant:
            kind = BufferKind.WEIGHTS
        elif t.id in (g.input_id, g.output_id):
            kind = BufferKind.IO
        else:
            kind = BufferKind.ACTIVATION
        buffers.append(BufferPlan(t.id, t.id, align_up(t.nbytes, target.alignment), kind,
                                  t.offset if t.is_constant else 0))

    ops = []
    for i, layer in enumerate(g.layers):
        consts = [g.tensor(r) for r in (layer.weight, layer.bias) if r is not None]
        weight_slice = None
        if consts:
            lo = min(c.offset for c in consts)
            weight_slice = (lo, max(c.offset + c.nbytes for c in consts) - lo)
        inputs = tuple(layer.inputs) + tuple(c.id for c in consts)
        ops.append(OpRecord(i, layer.kind, dict(layer.attrs), inputs, layer.output, weight_slice,
                            plan_tiles(layer.kind, g.tensor(layer.output).shape, target)))

    return CompiledModule(
        tensors=tuple(g.tensors),
        buffers=tuple(buffers),
        weights=bytes(g.weights),
        ops=tuple(ops),
        program=emit_bytecode(ops, buffers),
        metadata=ModuleMetadata(target.worker_count, ENTRY_POINT, g.input_id, g.output_id,
                                target.alignment),
    )


def graph_from_module(m: CompiledModule) -> ModelGraph:
    """Recover the layer graph a module was lowered from (buffers map 1:1 to tensors)."""
    layers = []
    for op in m.ops:
        tids = [m.buffer(b).tensor_id for b in op.input_buffers]
        weighted = op.kind in ("conv2d", "dense")
        layers.append(LayerDesc(op.kind, tuple(tids[:1] if weighted else tids),
                                m.buffer(op.output_buffer).tensor_id, dict(op.attrs),
                                tids[1] if weighted else None, tids[2] if weighted else None))
    return ModelGraph(tuple(m.tensors), tuple(layers), bytes(m.weights),
                      m.metadata.input_desc, m.metadata.output_desc)
