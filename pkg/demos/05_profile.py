# Per-op latency, heap peak and scratch usage.
from tilevm import TargetInfo, compile, profile_inference, report_render
from tilevm.fixtures import lenet5_inputs, load_lenet5

m = compile(load_lenet5(), TargetInfo(worker_count=2))
x = lenet5_inputs(1)[0]
report = profile_inference(m, x, workers=2, repeats=5)
print(report_render(report, "table"))
print(report_render(report, "csv"))
