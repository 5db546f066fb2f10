# The greedy scheduler on a virtual clock.
from tilevm.scheduler import simulate

for n, w in ((4, 2), (7, 3), (10, 4)):
    trace = simulate([1.0] * n, w)
    per_worker = [[a.item_index for a in trace.assignments if a.worker == k] for k in range(w)]
    print(f"{n} items on {w} workers: makespan={trace.makespan}  per worker={per_worker}")

# uneven costs: idle workers never wait while the queue has items
costs = [5, 1, 1, 1, 1, 1, 3, 2]
trace = simulate(costs, 2)
for a in trace.assignments:
    print(f"  item {a.item_index} cost {costs[a.item_index]} -> worker {a.worker} "
          f"[{a.start_ns}, {a.end_ns})")
print("makespan", trace.makespan, "lower bound", sum(costs) / 2)
