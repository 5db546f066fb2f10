"""Bytecode interpreter: turns a module's program into work items for the scheduler.

The program is read one instruction at a time; each instruction becomes a
command (the command buffer is never materialised ahead of time):

* ``Alloc``    reserves an activation buffer in the arena,
* ``Dispatch`` decodes an op's tile config into work items and queues them,
* ``Wait``     blocks until every queued item has finished,
* ``Free``     releases a buffer,
* ``Return``   ends the inference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import AllocFailure, ModuleInvalid, ShapeMismatch
from .graph import DTYPES, TensorDesc
from .kernels import KernelArgs, Scratch, run_kernel
from .module_format import (BufferKind, CompiledModule, Instruction, Opcode, partition_extent,
                            tile_ranges, verify_module)
from .scheduler import SimulatedPool, WorkerPool, WorkItem, WorkloadQueue


@dataclass(frozen=True)
class AllocCmd:
    buffer_id: int


@dataclass(frozen=True)
class DispatchCmd:
    op_id: int


@dataclass(frozen=True)
class BarrierCmd:
    pass


@dataclass(frozen=True)
class FreeCmd:
    buffer_id: int


@dataclass(frozen=True)
class ReturnCmd:
    pass


Command = Union[AllocCmd, DispatchCmd, BarrierCmd, FreeCmd, ReturnCmd]


def to_command(ins: Instruction) -> Command:
    if ins.opcode == Opcode.ALLOC:
        return AllocCmd(ins.operand)
    if ins.opcode == Opcode.DISPATCH:
        return DispatchCmd(ins.operand)
    if ins.opcode == Opcode.WAIT:
        return BarrierCmd()
    if ins.opcode == Opcode.FREE:
        return FreeCmd(ins.operand)
    return ReturnCmd()


class Arena:
    """Heap arena for activation buffers with live/peak byte accounting."""

    def __init__(self, cap: int | None = None):
        self.cap = cap
        self.live: dict[int, np.ndarray] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.allocated_bytes = 0
        self.freed_bytes = 0

    def alloc(self, buffer_id: int, nbytes: int) -> np.ndarray:
        if buffer_id in self.live:
            raise AllocFailure(f"buffer {buffer_id} is already live")
        if self.cap is not None and self.live_bytes + nbytes > self.cap:
            raise AllocFailure(f"allocating {nbytes} bytes for buffer {buffer_id} exceeds the "
                               f"{self.cap}-byte arena ({self.live_bytes} live)")
        raw = np.zeros(nbytes, dtype=np.uint8)
        self.live[buffer_id] = raw
        self.live_bytes += nbytes
        self.allocated_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return raw

    def free(self, buffer_id: int) -> None:
        raw = self.live.pop(buffer_id)
        self.live_bytes -= raw.size
        self.freed_bytes += raw.size


def _typed(raw: np.ndarray, t: TensorDesc) -> np.ndarray:
    return raw[:t.nbytes].view(DTYPES[t.dtype]).reshape(t.shape)


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass
class ExecutionState:
    module: CompiledModule
    pool: WorkerPool | SimulatedPool
    arena: Arena
    views: dict[int, np.ndarray]
    pc: int = 0
    # (event, op_id, perf_counter_ns) when profiling; event in start/dispatch/barrier/return
    events: list[tuple[str, int, int]] | None = None
    _last_op: int = -1

    @property
    def inflight(self) -> int:
        return self.pool.inflight

    def mark(self, event: str, op_id: int = -1) -> None:
        if self.events is not None:
            self.events.append((event, op_id, time.perf_counter_ns()))


def decode_dispatch(m: CompiledModule, op_id: int, views: dict[int, np.ndarray] | None = None
                    ) -> list[WorkItem]:
    """Cut op ``op_id`` into its work items per the op's tile config."""
    op = m.op(op_id)
    _, extent = partition_extent(op.kind, m.buffer_tensor(op.output_buffer).shape)
    bindings = ()
    if views is not None:
        bindings = tuple(views[b] for b in (*op.input_buffers, op.output_buffer))
    return [WorkItem(op_id, i, r, bindings) for i, r in enumerate(tile_ranges(op.tile_config, extent))]


def _task(m: CompiledModule, op_id: int, item: WorkItem) -> Callable[[Scratch], None]:
    op = m.op(op_id)
    *inputs, output = item.bindings
    act = m.buffer_tensor(op.input_buffers[0])
    out = m.buffer_tensor(op.output_buffer)
    w_quant = m.buffer_tensor(op.input_buffers[1]).quant if len(op.input_buffers) > 1 else None
    start, end = item.range
    inputs = tuple(_readonly(a) for a in inputs)

    def run(scratch: Scratch) -> None:
        run_kernel(KernelArgs(op.kind, op.attrs, start, end, inputs, output,
                              act.quant, out.quant, w_quant, scratch))
    return run


def step(state: ExecutionState, m: CompiledModule) -> bool:
    """Execute one instruction. Returns False once Return has been reached."""
    cmd = to_command(m.program[state.pc])
    state.pc += 1
    if isinstance(cmd, AllocCmd):
        t = m.buffer_tensor(cmd.buffer_id)
        raw = state.arena.alloc(cmd.buffer_id, m.buffer(cmd.buffer_id).byte_size)
        state.views[cmd.buffer_id] = _typed(raw, t)
    elif isinstance(cmd, DispatchCmd):
        state.mark("dispatch", cmd.op_id)
        state._last_op = cmd.op_id
        queue = WorkloadQueue()
        for item in decode_dispatch(m, cmd.op_id, state.views):
            queue.push(item, _task(m, cmd.op_id, item))
        while len(queue):
            state.pool.assign(*queue.pop())
    elif isinstance(cmd, BarrierCmd):
        state.pool.wait_idle()
        state.mark("barrier", state._last_op)
    elif isinstance(cmd, FreeCmd):
        state.arena.free(cmd.buffer_id)
        del state.views[cmd.buffer_id]
    else:
        state.mark("return")
        return False
    return True


class Runtime:
    """Owns a worker pool and runs inferences on it.

    ``simulate=True`` swaps the thread pool for a :class:`SimulatedPool`
    (single context, virtual clock, ``cost`` per work item). ``jitter`` is a
    callable returning seconds to sleep before each item, for tests.
    """

    def __init__(self, workers: int = 1, *, simulate: bool = False,
                 cost: Callable[[WorkItem], float] | None = None,
                 jitter: Callable[[], float] | None = None, arena_cap: int | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.pool = SimulatedPool(workers, cost) if simulate else WorkerPool(workers, jitter)
        self.arena_cap = arena_cap
        self.last_state: ExecutionState | None = None
        self._verified: dict[int, CompiledModule] = {}

    @property
    def workers(self) -> int:
        return self.pool.workers

    def resize(self, workers: int) -> None:
        self.pool.resize(workers)

    def close(self) -> None:
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _verify(self, m: CompiledModule) -> None:
        if self._verified.get(id(m)) is m:
            return
        diags = verify_module(m)
        if diags:
            raise ModuleInvalid(diags)
        self._verified[id(m)] = m

    def run(self, m: CompiledModule, x, *, profile: bool = False) -> np.ndarray:
        self._verify(m)
        inp = m.tensor(m.metadata.input_desc)
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.shape != inp.shape:
            raise ShapeMismatch(f"input shape {x.shape} != expected {inp.shape}")
        out_desc = m.tensor(m.metadata.output_desc)
        output = np.zeros(out_desc.shape, dtype=np.float32)
        views: dict[int, np.ndarray] = {}
        for b in m.buffers:
            t = m.tensor(b.tensor_id)
            if b.kind == BufferKind.WEIGHTS:
                views[b.buffer_id] = np.frombuffer(m.weights, dtype=DTYPES[t.dtype], count=t.size,
                                                   offset=b.offset).reshape(t.shape)
            elif b.kind == BufferKind.IO:
                views[b.buffer_id] = _readonly(x) if t.id == inp.id else output
        state = ExecutionState(m, self.pool, Arena(self.arena_cap), views,
                               events=[] if profile else None)
        self.last_state = state
        self.pool.begin()
        state.mark("start")
        try:
            while step(state, m):
                pass
        finally:
            if self.pool.inflight:
                try:
                    self.pool.wait_idle()
                except Exception:
                    pass
        assert not state.arena.live and state.arena.allocated_bytes == state.arena.freed_bytes
        return output


def run_inference(m: CompiledModule, x, workers: int = 1, **runtime_kwargs) -> np.ndarray:
    """One-shot inference on a fresh :class:`Runtime` with ``workers`` workers."""
    with Runtime(workers, **runtime_kwargs) as rt:
        return rt.run(m, x)
