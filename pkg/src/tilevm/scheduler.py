"""Greedy multicore scheduler over a FIFO workload queue.

The control context pops one work item at a time and hands it to the
lowest-numbered idle worker, blocking while every worker is busy. Items may
finish out of order; :meth:`WorkerPool.wait_idle` is the only ordering point.

Two pool flavours share one interface (``begin``, ``assign``, ``wait_idle``):

* :class:`WorkerPool` runs items on real threads.
* :class:`SimulatedPool` runs them in the caller's thread against a virtual
  clock with injected per-item costs, so scheduling properties can be tested
  without timing noise.
"""

from __future__ import annotations

import collections
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import BusyError, ExecutionError
from .kernels import Scratch

Task = Callable[[Scratch], None]


@dataclass(frozen=True)
class WorkItem:
    op_id: int
    item_index: int
    range: tuple[int, int]
    bindings: tuple = ()


@dataclass(frozen=True)
class LogEntry:
    worker: int
    op_id: int
    item_index: int
    start_ns: int
    end_ns: int


class WorkloadQueue:
    """FIFO of pending ``(item, task)`` pairs; each is popped exactly once."""

    def __init__(self, items: Iterable = ()):
        self._items = collections.deque(items)
        self.closed = False

    def push(self, item: WorkItem, task: Task | None = None) -> None:
        if self.closed:
            raise RuntimeError("queue is closed")
        self._items.append((item, task))

    def pop(self):
        return self._items.popleft()

    def close(self) -> None:
        self.closed = True

    def __len__(self) -> int:
        return len(self._items)


class WorkerPool:
    def __init__(self, workers: int, jitter: Callable[[], float] | None = None,
                 clock: Callable[[], int] = time.perf_counter_ns):
        self.jitter = jitter
        self.clock = clock
        self._lock = threading.Lock()
        self._idle_cv = threading.Condition(self._lock)
        self._threads: list[threading.Thread] = []
        self._start(workers)

    # -- lifecycle --------------------------------------------------------

    def _start(self, workers: int) -> None:
        if workers < 1:
            raise ValueError("a pool needs at least one worker")
        self.workers = workers
        self._slots: list = [None] * workers
        self._cvs = [threading.Condition(self._lock) for _ in range(workers)]
        self.scratch = [Scratch() for _ in range(workers)]
        self.state: list = ["idle"] * workers
        self.inflight = 0
        self.log: list[LogEntry] = []
        self._error: ExecutionError | None = None
        self._closing = False
        self._threads = [threading.Thread(target=self._loop, args=(w,), daemon=True,
                                          name=f"tilevm-worker-{w}") for w in range(workers)]
        for t in self._threads:
            t.start()

    def close(self) -> None:
        with self._lock:
            self._closing = True
            for cv in self._cvs:
                cv.notify()
        for t in self._threads:
            t.join()
        self._threads = []

    def resize(self, workers: int) -> None:
        if workers < 1:
            raise ValueError("a pool needs at least one worker")
        with self._lock:
            if self.inflight:
                raise BusyError("cannot resize while work items are in flight")
        self.close()
        self._start(workers)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- scheduling -------------------------------------------------------

    def begin(self) -> None:
        """Reset per-inference state (log, failure flag)."""
        with self._lock:
            if self.inflight:
                raise BusyError("inference already in flight")
            self.log = []
            self._error = None

    def assign(self, item: WorkItem, task: Task) -> None:
        """Hand ``item`` to the first idle worker, waiting for one if necessary."""
        with self._lock:
            if self._error is not None:
                return  # drain without executing after a failure
            while True:
                for w in range(self.workers):
                    if self.state[w] == "idle":
                        break
                else:
                    self._idle_cv.wait()
                    continue
                break
            self.state[w] = ("busy", item.op_id, item.item_index)
            self._slots[w] = (item, task)
            self.inflight += 1
            self._cvs[w].notify()

    def wait_idle(self) -> None:
        with self._lock:
            while self.inflight:
                self._idle_cv.wait()
            err = self._error
        if err is not None:
            raise err

    def _loop(self, w: int) -> None:
        cv = self._cvs[w]
        scratch = self.scratch[w]
        while True:
            with self._lock:
                while self._slots[w] is None and not self._closing:
                    cv.wait()
                if self._slots[w] is None:
                    return
                item, task = self._slots[w]
                skip = self._error is not None
            start = self.clock()
            err = None
            if not skip:
                if self.jitter is not None:
                    time.sleep(self.jitter())
                scratch.reset()
                try:
                    task(scratch)
                except Exception as e:  # surfaced by wait_idle
                    err = ExecutionError(item.op_id, item.item_index, e)
            end = self.clock()
            with self._lock:
                if not skip:
                    self.log.append(LogEntry(w, item.op_id, item.item_index, start, end))
                if err is not None and self._error is None:
                    self._error = err
                self._slots[w] = None
                self.state[w] = "idle"
                self.inflight -= 1
                self._idle_cv.notify_all()

    @property
    def scratch_peaks(self) -> list[int]:
        return [s.high_water for s in self.scratch]


# --------------------------------------------------------------------------
# deterministic simulation


@dataclass
class SimTrace:
    assignments: list[LogEntry] = field(default_factory=list)
    # (time, idle workers, queue length) after each assignment phase
    states: list[tuple[float, int, int]] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((a.end_ns for a in self.assignments), default=0)


def simulate(costs: Sequence[float], workers: int, start: float = 0) -> SimTrace:
    """Greedy list scheduling of items with known costs on a virtual clock.

    Items are popped in FIFO order; at each instant every idle worker (lowest
    index first) takes the next item before time advances.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    trace = SimTrace()
    queue = collections.deque(enumerate(costs))
    busy_until = [start] * workers
    now = start
    while queue:
        while queue:
            w = next((w for w in range(workers) if busy_until[w] <= now), None)
            if w is None:
                break
            idx, cost = queue.popleft()
            busy_until[w] = now + cost
            trace.assignments.append(LogEntry(w, -1, idx, now, now + cost))
        idle = sum(1 for b in busy_until if b <= now)
        trace.states.append((now, idle, len(queue)))
        if queue:
            now = min(b for b in busy_until if b > now)
    return trace


class SimulatedPool:
    """Pool with the :class:`WorkerPool` interface that executes on a virtual clock.

    ``cost`` maps a work item to its virtual duration (default 1). Items are
    run serially in the caller's thread in simulated start order.
    """

    def __init__(self, workers: int, cost: Callable[[WorkItem], float] | None = None):
        self.cost = cost or (lambda item: 1)
        self._setup(workers)

    def _setup(self, workers: int) -> None:
        if workers < 1:
            raise ValueError("a pool needs at least one worker")
        self.workers = workers
        self.scratch = [Scratch() for _ in range(workers)]
        self.state = ["idle"] * workers
        self.log: list[LogEntry] = []
        self.traces: list[SimTrace] = []
        self.now = 0
        self._pending: list = []

    @property
    def inflight(self) -> int:
        return len(self._pending)

    def resize(self, workers: int) -> None:
        if self._pending:
            raise BusyError("cannot resize while work items are in flight")
        self._setup(workers)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def begin(self) -> None:
        if self._pending:
            raise BusyError("inference already in flight")
        self.log = []
        self.traces = []
        self.now = 0

    def assign(self, item: WorkItem, task: Task) -> None:
        self._pending.append((item, task))

    def wait_idle(self) -> None:
        pending, self._pending = self._pending, []
        trace = simulate([self.cost(item) for item, _ in pending], self.workers, self.now)
        self.traces.append(trace)
        error = None
        for a in sorted(trace.assignments, key=lambda a: (a.start_ns, a.worker)):
            item, task = pending[a.item_index]
            if error is None:
                scratch = self.scratch[a.worker]
                scratch.reset()
                try:
                    task(scratch)
                except Exception as e:
                    error = ExecutionError(item.op_id, item.item_index, e)
            self.log.append(LogEntry(a.worker, item.op_id, item.item_index, a.start_ns, a.end_ns))
        self.now = max(self.now, trace.makespan)
        if error is not None:
            raise error

    @property
    def scratch_peaks(self) -> list[int]:
        return [s.high_water for s in self.scratch]


def schedule(queue: WorkloadQueue, pool) -> None:
    """Drain ``queue`` into ``pool`` greedily and return once every worker is idle."""
    while len(queue):
        item, task = queue.pop()
        pool.assign(item, task)
    pool.wait_idle()
