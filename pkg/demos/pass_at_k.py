"""How coverage, majority voting and weighted best-of-n differ on a toy set.

Four problems with 8 samples each. Problem "p2" is the interesting one: its
right answer appears twice but a wrong answer appears three times, so voting
loses it while a reward model that likes the right answer recovers it.
"""

from dlab.scaling import (
    ProblemSamples,
    TaskSampleSet,
    coverage_curve,
    majority_vote,
    pass_at_k,
    weighted_best_of_n,
)


def problem(pid, answers, right, scores=None):
    return ProblemSamples(pid, answers, [a == right for a in answers], scores)


samples = TaskSampleSet([
    problem("p0", ["3"] * 8, "3", [0.9] * 8),
    problem("p1", ["5", "5", "5", "5", "5", "2", "5", "5"], "5", [0.8] * 8),
    problem("p2", ["7", "1", "1", "7", "1", None, "4", "4"], "7", [0.9, 0.2, 0.2, 0.9, 0.2, 0.0, 0.3, 0.3]),
    problem("p3", ["0"] * 8, "9", [0.1] * 8),
])

print("pass@k for a single problem with n=8 samples, c correct:")
for c in range(9):
    print(f"  c={c}: " + "  ".join(f"k={k}:{pass_at_k(8, c, k):.3f}" for k in (1, 2, 4, 8)))

print("\nk   coverage  majority  weighted-BoN")
ks = (1, 2, 4, 8)
for (k, cov) in coverage_curve(samples, ks):
    print(f"{k:<3} {cov:8.3f}  {majority_vote(samples, k):8.3f}  {weighted_best_of_n(samples, k):12.3f}")

# coverage keeps climbing with k; at k=8 voting loses p2 to the repeated
# wrong answer while the reward model still picks "7"; p3 is never solved
