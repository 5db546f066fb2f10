"""Regenerate the committed LeNet-5 fixture under src/tilevm/data/.

Expected logits come from ``tilevm run --oracle``; they are never hand-written.

    python scripts/make_fixtures.py
"""

import contextlib
import io
import tempfile
from pathlib import Path

import numpy as np

from tilevm import cli
from tilevm.compiler import TargetInfo, compile
from tilevm.fixtures import data_dir, lenet5_inputs, make_lenet5
from tilevm.graph import save_graph
from tilevm.module_format import encode_module
from tilevm.oracle import oracle_f32, oracle_int
from tilevm.tensorio import load_tensor, save_tensor

QUANT_TOLERANCE = 0.1


def main() -> None:
    out = data_dir()
    g = make_lenet5()
    save_graph(g, out / "lenet5.graph")
    notes = ["LeNet-5 fixture (seeded random weights, not trained)", "",
             "tensor scales / zero points:"]
    for t in g.tensors:
        if t.quant is not None:
            notes.append(f"  tensor {t.id:2d} shape={t.shape} scale={t.quant.scale!r} "
                         f"zero_point={t.quant.zero_point}")
    with tempfile.TemporaryDirectory() as tmp:
        module = Path(tmp) / "lenet5.amlm"
        module.write_bytes(encode_module(compile(g, TargetInfo(worker_count=2))))
        notes += ["", f"dequantized logits vs float reference (tolerance {QUANT_TOLERANCE}):"]
        for i, x in enumerate(lenet5_inputs()):
            save_tensor(out / f"lenet5_input{i}.tensor", x)
            with contextlib.redirect_stdout(io.StringIO()):
                rc = cli.main(["run", str(module), str(out / f"lenet5_input{i}.tensor"), "--oracle",
                               "--out", str(out / f"lenet5_expected{i}.tensor")])
            assert rc == 0
            expected = load_tensor(out / f"lenet5_expected{i}.tensor")
            assert np.array_equal(expected, oracle_int(g, x).output)
            err = float(np.abs(oracle_f32(g, x).output - expected).max())
            notes.append(f"  input {i}: max |error| = {err:.4f}")
    (out / "lenet5.notes.txt").write_text("\n".join(notes) + "\n")
    print("\n".join(notes))


if __name__ == "__main__":
    main()
