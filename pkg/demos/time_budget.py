"""Turning a throughput profile into the wall-clock cost of k samples.

A profile lists the median seconds to decode one batch at each batch size.
To draw k samples we fill as many batches as possible at the largest batch
that fits in memory, then finish the remainder with the smallest profiled
batch that holds it.
"""

from dlab.bench import BenchRow, ThroughputProfile
from dlab.scaling import BudgetPoint, pareto_front, time_for_k


def profile(name, rows):
    return ThroughputProfile(name, 512, 512, [BenchRow(b, t, b * 512 / t if t else None, 0, t is None) for b, t in rows])


# an attention model that runs out of memory at 512, and a recurrent student
# that is a little slower per batch but fits everywhere
teacher = profile("teacher", [(64, 8.0), (256, 29.4), (512, None)])
student = profile("student", [(64, 5.0), (256, 14.0), (512, 26.0)])

print("k     teacher_s  student_s")
for k in (1, 64, 256, 300, 512, 1024):
    print(f"{k:<5} {time_for_k(teacher, k):9.1f}  {time_for_k(student, k):9.1f}")
# teacher at k=512 is two full batches of 256 (2 x 29.4 = 58.8 s);
# at k=300 it is one batch of 256 plus a batch of 64 for the last 44

# coverage reached by each model at each k (made-up numbers)
coverage = {"teacher": {64: 0.80, 256: 0.86, 512: 0.88}, "student": {64: 0.74, 256: 0.83, 512: 0.87}}
points = [
    BudgetPoint(m, "coverage", k, time_for_k(p, k), coverage[m][k])
    for m, p in (("teacher", teacher), ("student", student))
    for k in coverage[m]
]
print("\nPareto front (time, coverage):")
for p in pareto_front(points):
    print(f"  {p.model:8s} k={p.k:<4} {p.time_s:6.1f} s  {p.value:.2f}")
