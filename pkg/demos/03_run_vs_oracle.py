# Running the module on worker threads and checking it against the oracle.
import numpy as np

from tilevm import TargetInfo, compile, oracle_f32, oracle_int, run_inference
from tilevm.fixtures import lenet5_inputs, load_lenet5

g = load_lenet5()
m = compile(g, TargetInfo(worker_count=4))
xs = lenet5_inputs(3)

for k, x in enumerate(xs):
    ref = oracle_int(g, x).output
    outs = {w: run_inference(m, x, workers=w) for w in (1, 2, 4, 8)}
    same = all(o.tobytes() == ref.tobytes() for o in outs.values())
    err = np.abs(outs[1] - oracle_f32(g, x).output).max()
    print(f"input {k}: argmax={int(outs[1].argmax())} bit-exact at 1/2/4/8 workers: {same}; "
          f"int vs float error {err:.4f}")

print(np.round(outs[4], 3))
