"""Miniature quantized-inference stack: graph -> compiled module -> tiled multi-worker execution."""

from .compiler import TargetInfo, compile, emit_bytecode, plan_tiles
from .executor import Runtime, decode_dispatch, run_inference, step
from .graph import GraphBuilder, ModelGraph, load_graph, save_graph, validate_graph
from .module_format import CompiledModule, decode_module, encode_module, verify_module
from .oracle import oracle_f32, oracle_int
from .profiler import bench, profile_inference, report_render
from .scheduler import SimulatedPool, WorkerPool, schedule, simulate

__version__ = "0.1.0"

__all__ = [
    "CompiledModule", "GraphBuilder", "ModelGraph", "Runtime", "SimulatedPool", "TargetInfo",
    "WorkerPool", "bench", "compile", "decode_dispatch", "decode_module", "emit_bytecode",
    "encode_module", "load_graph", "oracle_f32", "oracle_int", "plan_tiles", "profile_inference",
    "report_render", "run_inference", "save_graph", "schedule", "simulate", "step",
    "validate_graph", "verify_module",
]
