# Lowering a graph to a module: tiles, bytecode and the arena plan.
from tilevm import TargetInfo, compile, decode_module, encode_module
from tilevm.fixtures import load_lenet5
from tilevm.module_format import scan_live_bytes, scan_peak_heap

g = load_lenet5()
m = compile(g, TargetInfo(worker_count=2))

print("op  kind        axis  tile  items")
for op in m.ops:
    tc = op.tile_config
    print(f"{op.op_id:2d}  {op.kind:<10}  {tc.axis:4d}  {tc.tile_extent:4d}  {tc.item_count:5d}")

print()
live = scan_live_bytes(m)
for ins, nbytes in zip(m.program, live):
    print(f"  {str(ins):<12} live={nbytes}")
print("peak heap:", scan_peak_heap(m), "bytes")

# more workers means more, smaller items
for w in (1, 2, 4, 8):
    mw = compile(g, TargetInfo(worker_count=w))
    print(w, "workers ->", sum(op.tile_config.item_count for op in mw.ops), "work items")

data = encode_module(m)
print("encoded module:", len(data), "bytes; round-trip ok:", decode_module(data) == m)
