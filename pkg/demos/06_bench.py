# Latency against worker count on a compute-heavy dense stack.
# Speedup depends on the host's core count; on a single core expect ~1.0 or less.
import os

from tilevm import TargetInfo, compile
from tilevm.fixtures import dense_stack_input, make_dense_stack
from tilevm.profiler import bench, render_bench

m = compile(make_dense_stack(), TargetInfo(worker_count=4))
x = dense_stack_input()
print("cores:", os.cpu_count())
print(render_bench(bench(m, x, [1, 2, 4], repeats=5)))
