# Loading, building and validating graphs.
import tempfile
from pathlib import Path

import numpy as np

from tilevm import GraphBuilder, load_graph, save_graph, validate_graph
from tilevm.fixtures import data_dir

g = load_graph(data_dir() / "lenet5.graph")
print("LeNet-5 fixture:", len(g.tensors), "tensors,", len(g.layers), "layers")
for i, layer in enumerate(g.layers):
    out = g.tensor(layer.output)
    print(f"  {i:2d} {layer.kind:<10} -> {out.dtype} {out.shape}")

# a tiny float network built in code
b = GraphBuilder()
x = b.tensor((1, 2), "f32")
y = b.tensor((1, 2), "f32")
w = b.constant(np.array([[1, 2], [3, 4]], np.float32))
bias = b.constant(np.zeros(2, np.float32))
b.layer("dense", [x], y, weight=w, bias=bias, in_features=2, out_features=2)
tiny = b.build(x, y)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tiny.graph"
    save_graph(tiny, path)
    print(path.read_text())
    assert load_graph(path) == tiny

# validation reports every problem at once
b = GraphBuilder()
x = b.tensor((1, 4), "f32")
h = b.tensor((1, 4), "i8")  # missing scale/zero_point
y = b.tensor((1, 4), "f32")
b.layer("relu", [x], h)
b.layer("relu", [x], h)  # second writer
broken = b.build(x, y, validate=False)
for d in validate_graph(broken):
    print("diagnostic:", d)
