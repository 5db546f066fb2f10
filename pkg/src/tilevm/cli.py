"""Command-line front end: ``tilevm build|inspect|run|bench``.

Exit codes: 0 success, 1 validation/verification/shape error, 2 I/O error,
3 execution error. ``TILEVM_WORKERS`` sets the default worker count.
"""

from __future__ import annotations

import argparse
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .compiler import TargetInfo, compile, graph_from_module
from .errors import (ExecutionError, ModuleFormatError, ParseError, ShapeMismatch, TileVMError,
                     ValidationError)
from .executor import Runtime
from .graph import load_graph
from .module_format import (CompiledModule, Opcode, decode_module, encode_module, partition_extent,
                            scan_peak_heap)
from .oracle import oracle_int
from .profiler import bench, profile_inference, render_bench, report_render
from .tensorio import load_tensor, save_tensor

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_EXEC = 0, 1, 2, 3
WORKERS_ENV = "TILEVM_WORKERS"


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise _Exit(EXIT_IO, f"cannot read {path}: {e.strerror or e}") from None


def _load_module(path: str) -> CompiledModule:
    data = _read(path)
    try:
        return decode_module(data)
    except ModuleFormatError as e:
        raise _Exit(EXIT_INVALID, f"{path}: {e}") from None


def _load_input(path: str, m: CompiledModule) -> np.ndarray:
    try:
        x = load_tensor(path)
    except OSError as e:
        raise _Exit(EXIT_IO, f"cannot read {path}: {e.strerror or e}") from None
    except ParseError as e:
        raise _Exit(EXIT_INVALID, str(e)) from None
    want = m.tensor(m.metadata.input_desc).shape
    if x.shape != want:
        raise _Exit(EXIT_INVALID, f"input shape {x.shape} does not match module input {want}")
    return x


def _format_tensor(a: np.ndarray) -> str:
    lines = [f"shape={'x'.join(map(str, a.shape))} dtype=f32"]
    lines += [repr(float(v)) for v in np.asarray(a, dtype=np.float32).ravel()]
    return "\n".join(lines) + "\n"


def cmd_build(args) -> int:
    try:
        g = load_graph(args.graph)
    except OSError as e:
        raise _Exit(EXIT_IO, f"cannot read {getattr(e, 'filename', None) or args.graph}: "
                             f"{e.strerror or e}") from None
    except ValidationError as e:
        for d in e.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_INVALID
    except ParseError as e:
        print(f"error: {args.graph}: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        target = TargetInfo(args.workers, args.align, args.oversub)
    except ValueError as e:
        raise _Exit(EXIT_INVALID, str(e)) from None
    m = compile(g, target)
    data = encode_module(m)
    try:
        Path(args.out).write_bytes(data)
    except OSError as e:
        raise _Exit(EXIT_IO, f"cannot write {args.out}: {e.strerror or e}") from None
    sizes = {name: length for (sid, _, length), name in
             zip(decode_module(data).header.sections,
                 ("metadata", "tensors", "buffers", "ops", "bytecode", "weights"))}
    dispatches = sum(1 for i in m.program if i.opcode == Opcode.DISPATCH)
    print(f"wrote {args.out} ({len(data)} bytes)")
    for name, length in sizes.items():
        print(f"  {name:<9} {length:>8} bytes")
    print(f"layers: {len(g.layers)}  dispatches: {dispatches}  workers: {args.workers}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    m = _load_module(args.module)
    h, md = m.header, m.metadata
    print(f"magic={h.magic.decode('ascii')} version={h.version} endianness="
          f"{'little' if h.endianness == 0 else 'big'}")
    for sid, off, length in h.sections:
        print(f"  section {sid}: offset={off} length={length}")
    print(f"metadata: entry_point={md.entry_point} worker_count_hint={md.worker_count_hint} "
          f"input={md.input_desc} output={md.output_desc} alignment={md.alignment}")
    print("ops:")
    for op in m.ops:
        tc = op.tile_config
        _, extent = partition_extent(op.kind, m.buffer_tensor(op.output_buffer).shape)
        print(f"  op {op.op_id} {op.kind} in={list(op.input_buffers)} out={op.output_buffer} "
              f"tile(axis={tc.axis} extent={extent} tile_extent={tc.tile_extent} "
              f"items={tc.item_count})")
    print("bytecode:")
    for pc, ins in enumerate(m.program):
        print(f"  {pc:4d}  {ins}")
    print(f"peak_heap_bytes={scan_peak_heap(m)}")
    return EXIT_OK


def cmd_run(args) -> int:
    m = _load_module(args.module)
    x = _load_input(args.input, m)
    if args.oracle:
        g = load_graph(args.graph) if args.graph else graph_from_module(m)
        res = oracle_int(g, x)
        for i, tid in enumerate(res.layer_outputs):
            t = res.tensors[tid]
            print(f"layer {i} {g.layers[i].kind} tensor={tid} crc32={zlib.crc32(t.tobytes()):08x}")
        y = res.output
    else:
        try:
            with Runtime(args.workers, simulate=args.simulate) as rt:
                y = rt.run(m, x)
                report = (profile_inference(m, x, args.workers, args.repeats, runtime=rt)
                          if args.profile else None)
        except ShapeMismatch as e:
            raise _Exit(EXIT_INVALID, str(e)) from None
        except (ExecutionError, TileVMError) as e:
            raise _Exit(EXIT_EXEC, f"execution failed: {e}") from None
    if args.out:
        try:
            save_tensor(args.out, y)
        except OSError as e:
            raise _Exit(EXIT_IO, f"cannot write {args.out}: {e.strerror or e}") from None
    sys.stdout.write(_format_tensor(y))
    if not args.oracle and report is not None:
        sys.stdout.write(report_render(report, args.profile_format))
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        workers = [int(w) for w in args.workers_list.split(",") if w.strip()]
    except ValueError:
        workers = []
    if not workers or any(w < 1 for w in workers):
        raise _Exit(EXIT_INVALID, f"--workers-list must be positive integers, got {args.workers_list!r}")
    m = _load_module(args.module)
    x = _load_input(args.input, m)
    try:
        rows = bench(m, x, workers, args.repeats)
    except TileVMError as e:
        raise _Exit(EXIT_EXEC, f"execution failed: {e}") from None
    sys.stdout.write(render_bench(rows, args.csv))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilevm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="compile a graph file into a module")
    b.add_argument("graph")
    b.add_argument("out")
    b.add_argument("--workers", type=int, default=_default_workers())
    b.add_argument("--align", type=int, default=16)
    b.add_argument("--oversub", type=int, default=1)
    b.set_defaults(fn=cmd_build)

    i = sub.add_parser("inspect", help="print header, tiles, bytecode and analytic peak heap")
    i.add_argument("module")
    i.set_defaults(fn=cmd_inspect)

    r = sub.add_parser("run", help="run one inference")
    r.add_argument("module")
    r.add_argument("input")
    r.add_argument("--workers", type=int, default=_default_workers())
    r.add_argument("--oracle", action="store_true", help="run the reference interpreter instead")
    r.add_argument("--graph", help="graph file for --oracle (default: rebuilt from the module)")
    r.add_argument("--profile", action="store_true")
    r.add_argument("--profile-format", choices=("json", "table", "csv"), default="json")
    r.add_argument("--repeats", type=int, default=10)
    r.add_argument("--simulate", action="store_true", help="deterministic single-context scheduler")
    r.add_argument("--out", help="also write the output tensor to this file")
    r.set_defaults(fn=cmd_run)

    be = sub.add_parser("bench", help="median latency and speedup per worker count")
    be.add_argument("module")
    be.add_argument("input")
    be.add_argument("--workers-list", default="1,2,4")
    be.add_argument("--repeats", type=int, default=10)
    be.add_argument("--csv", action="store_true")
    be.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except _Exit as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
