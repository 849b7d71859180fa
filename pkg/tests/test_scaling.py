import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlab.errors import ContractError, DataError
from dlab.scaling import (
    BudgetPoint,
    ProblemSamples,
    TaskSampleSet,
    coverage_curve,
    majority_vote,
    oracle_reward,
    pareto_front,
    pass_at_k,
    pass_at_k_table,
    points_to_csv,
    read_csv,
    select_answer,
    split_steps,
    subsample_coverage,
    subsample_indices,
    svg_chart,
    time_for_k,
    weighted_best_of_n,
    write_csv,
)
from dlab.tasks import COMPACT_FINAL, MATH_TEMPLATE, Problem, generate_problems, reference_cot


def log_comb_table(n_max: int) -> np.ndarray:
    """``log C(m, k)`` from exact big-integer binomials (-inf where k > m)."""
    out = np.full((n_max + 1, n_max + 1), -np.inf)
    for m in range(n_max + 1):
        for k in range(m + 1):
            out[m, k] = math.log(math.comb(m, k))
    return out


def oracle_table(n: int, lc: np.ndarray) -> np.ndarray:
    """Combination ratio in log space, laid out like pass_at_k_table."""
    c = np.arange(n + 1)[:, None]
    k = np.arange(1, n + 1)[None, :]
    ratio = np.exp(lc[n - c, k] - lc[n, k])  # exp(-inf) = 0 where n - c < k
    return 1.0 - ratio


def exact_pass_at_k(n: int, c: int, k: int) -> Fraction:
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


# ---------------------------------------------------------------------------
# pass@k


def test_pass_at_k_examples():
    assert pass_at_k(10, 0, 5) == 0.0
    assert pass_at_k(5, 1, 5) == 1.0
    assert pass_at_k(4, 2, 2) == pytest.approx(5 / 6, abs=1e-15)
    assert exact_pass_at_k(4, 2, 2) == Fraction(5, 6)


def test_pass_at_k_errors():
    with pytest.raises(ContractError):
        pass_at_k(3, 0, 4)
    with pytest.raises(ContractError):
        pass_at_k(3, 4, 1)
    with pytest.raises(ContractError):
        pass_at_k(3, 1, 0)


def test_pass_at_k_matches_exact_fraction_on_small_grid():
    for n in range(1, 25):
        for c in range(n + 1):
            for k in range(1, n + 1):
                assert abs(pass_at_k(n, c, k) - float(exact_pass_at_k(n, c, k))) < 1e-13


def test_pass_at_k_matches_log_space_oracle():
    lc = log_comb_table(80)
    for n in range(1, 81):
        assert np.abs(pass_at_k_table(n) - oracle_table(n, lc)).max() < 1e-12


def test_table_is_the_scalar_function():
    rng = np.random.default_rng(0)
    for n in (1, 3, 40, 200):
        table = pass_at_k_table(n)
        for _ in range(300):
            c, k = int(rng.integers(0, n + 1)), int(rng.integers(1, n + 1))
            assert table[c, k - 1] == pass_at_k(n, c, k)


def test_pass_at_k_large_n_is_finite():
    v = pass_at_k(10_000, 1, 100)
    assert math.isfinite(v) and 0 <= v <= 1
    assert v == pytest.approx(0.01, abs=1e-12)


@given(n=st.integers(1, 200), data=st.data())
def test_pass_at_k_monotone(n, data):
    c = data.draw(st.integers(0, n))
    k = data.draw(st.integers(1, n))
    v = pass_at_k(n, c, k)
    if k < n:
        assert pass_at_k(n, c, k + 1) >= v
    if c < n:
        assert pass_at_k(n, c + 1, k) >= v
    assert (pass_at_k(n, c, n) == 1.0) == (c >= 1)


# ---------------------------------------------------------------------------
# coverage


def _set(correct_counts, n):
    return TaskSampleSet(
        [ProblemSamples(f"p{i}", [str(i)] * c + [None] * (n - c), [True] * c + [False] * (n - c)) for i, c in enumerate(correct_counts)]
    )


def test_coverage_examples():
    assert coverage_curve(_set([4, 4], 4), [1, 2, 4]) == [(1, 1.0), (2, 1.0), (4, 1.0)]
    curve = coverage_curve(_set([2], 4), [1, 2])
    assert curve[0] == (1, 0.5) and curve[1][1] == pytest.approx(5 / 6)
    with pytest.raises(ContractError):
        coverage_curve(TaskSampleSet([]), [1])
    with pytest.raises(ContractError):
        coverage_curve(_set([1], 4), [5])


def test_coverage_matches_monte_carlo():
    counts, n, k = [0, 1, 3, 6, 8], 8, 3
    analytic = dict(coverage_curve(_set(counts, n), [k]))[k]
    rng = np.random.default_rng(0)
    draws = 100_000
    hits = 0.0
    for c in counts:
        # k draws without replacement hit a correct sample
        picks = rng.permuted(np.tile(np.arange(n), (draws, 1)), axis=1)[:, :k]
        hits += (picks < c).any(axis=1).mean()
    mc = hits / len(counts)
    sigma = math.sqrt(analytic * (1 - analytic) / (draws * len(counts)))
    assert abs(mc - analytic) < 2 * sigma + 1e-3


def test_sample_set_rejects_ragged_problems():
    with pytest.raises(ContractError):
        TaskSampleSet([ProblemSamples("a", ["1"], [True]), ProblemSamples("b", ["1", "2"], [True, False])])


# ---------------------------------------------------------------------------
# selection


def test_majority_examples():
    assert select_answer(["4", "4", "5"]) == "4"
    assert select_answer(["4", "5"]) == "4"
    assert select_answer(["5", "4"]) == "5"
    assert select_answer([None, None]) is None
    # absent answers never win while some answer exists
    assert select_answer([None, None, "7"]) == "7"
    s = TaskSampleSet([ProblemSamples("p", [None, None, None], [False] * 3)])
    assert majority_vote(s, 3) == 0.0
    s = TaskSampleSet([ProblemSamples("p", ["4", "4", "5"], [True, True, False])])
    assert majority_vote(s, 3) == 1.0
    with pytest.raises(ContractError):
        majority_vote(s, 0)


def test_weighted_bon_examples():
    answers, scores = ["4", "5", "5"], [0.9, 0.8, 0.7]
    assert select_answer(answers, scores) == "5"
    assert select_answer(answers, scores, best_of_n=True) == "4"
    assert select_answer(["9"], [0.1]) == "9"
    s = TaskSampleSet([ProblemSamples("p", answers, [False, True, True], None)])
    with pytest.raises(DataError):
        weighted_best_of_n(s, 2)


def test_subsample_indices_enumerate_or_draw():
    assert subsample_indices(4, 1, 0, 0) == [(0,), (1,), (2,), (3,)]
    assert subsample_indices(5, 5, 0, 0) == [(0, 1, 2, 3, 4)]
    drawn = subsample_indices(16, 8, 3, 2)
    assert len(drawn) == 20 and all(len(set(d)) == 8 for d in drawn)
    assert drawn == subsample_indices(16, 8, 3, 2)
    with pytest.raises(ContractError):
        subsample_indices(3, 4, 0, 0)


@st.composite
def sample_sets(draw):
    n = draw(st.integers(1, 10))
    n_problems = draw(st.integers(1, 5))
    problems = []
    for i in range(n_problems):
        truth = "1"
        answers = draw(st.lists(st.sampled_from(["1", "2", "3", None]), min_size=n, max_size=n))
        scores = draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
        problems.append(ProblemSamples(f"p{i}", answers, [a == truth for a in answers], scores))
    return TaskSampleSet(problems)


@given(s=sample_sets(), data=st.data())
def test_coverage_bounds_selection(s, data):
    k = data.draw(st.integers(1, s.n))
    seed = data.draw(st.integers(0, 1000))
    cov = subsample_coverage(s, k, seed)
    wbon = weighted_best_of_n(s, k, seed)
    maj = majority_vote(s, k, seed)
    assert cov >= wbon >= 0 and cov >= maj
    # the unbiased coverage estimate bounds selection too when subsets are enumerated
    if math.comb(s.n, k) <= 20:
        assert dict(coverage_curve(s, [k]))[k] >= max(wbon, maj) - 1e-12


@given(s=sample_sets())
def test_majority_at_one_is_mean_accuracy(s):
    mean_acc = np.mean([np.mean(p.correct) for p in s.problems])
    assert majority_vote(s, 1) == pytest.approx(mean_acc, abs=1e-12)


# ---------------------------------------------------------------------------
# reward oracle


def test_oracle_reward_on_reference_cot():
    for p in generate_problems(2, 10, (1, 4)):
        trace = oracle_reward(p, reference_cot(p, COMPACT_FINAL), epsilon=0.0)
        assert trace.step_scores == [1.0] * p.difficulty and trace.reduced == 1.0
        boxed = oracle_reward(p, reference_cot(p, MATH_TEMPLATE), epsilon=0.0, style="boxed")
        assert boxed.reduced == 1.0


def test_oracle_reward_wrong_step_scores_zero():
    p = Problem("x", "Start with 3, then +4, *2.", "14", 2, "train")
    bad = "## Step 1: 3+4=8\n## Step 2: 8*2=16\nThe final answer is 16"
    assert oracle_reward(p, bad, epsilon=0.0).step_scores == [0.0, 0.0]
    good = "## Step 1: 3+4=7\n## Step 2: 7*2=14\nThe final answer is 14"
    assert oracle_reward(p, good, epsilon=0.0).step_scores == [1.0, 1.0]


def test_oracle_reward_headerless_is_one_step():
    p = Problem("x", "Start with 3, then +4.", "7", 1, "train")
    assert split_steps("The final answer is 7") == ["The final answer is 7"]
    assert oracle_reward(p, "The final answer is 7", epsilon=0.0).step_scores == [1.0]
    assert oracle_reward(p, "no idea", epsilon=0.0).step_scores == [0.0]


def test_oracle_noise_is_bounded_and_reproducible():
    p = generate_problems(0, 1, (3, 3))[0]
    text = reference_cot(p, COMPACT_FINAL)
    a = oracle_reward(p, text, epsilon=0.1, seed=5)
    assert a == oracle_reward(p, text, epsilon=0.1, seed=5)
    assert all(abs(s - 1.0) <= 0.1 for s in a.step_scores)


def test_exact_oracle_bon_beats_majority_when_a_correct_answer_exists():
    rng = np.random.default_rng(0)
    for p in generate_problems(9, 15, (1, 3)):
        right = reference_cot(p, COMPACT_FINAL)
        wrong = "## Step 1: 0 + 0 = 0\nThe final answer is 0" if p.answer != "0" else "The final answer is 1"
        texts = [right if rng.random() < 0.3 else wrong for _ in range(6)]
        texts[int(rng.integers(6))] = right
        answers = ["0" if t is wrong and p.answer != "0" else ("1" if t is wrong else p.answer) for t in texts]
        scores = [oracle_reward(p, t, epsilon=0.0).reduced for t in texts]
        s = TaskSampleSet([ProblemSamples(p.id, answers, [a == p.answer for a in answers], scores)])
        for k in (1, 3, 6):
            assert weighted_best_of_n(s, k) >= majority_vote(s, k)


# ---------------------------------------------------------------------------
# time budgets


def test_time_for_k_examples():
    assert time_for_k({256: 29.4}, 512) == pytest.approx(58.8, abs=1e-12)
    assert time_for_k({256: 29.4}, 256) == 29.4
    assert time_for_k({256: 29.4, 64: 8.0}, 300) == pytest.approx(37.4, abs=1e-12)
    with pytest.raises(ContractError):
        time_for_k({256: 29.4}, 0)


@given(prof=st.dictionaries(st.integers(1, 512), st.floats(0.01, 100), min_size=1, max_size=6), k=st.integers(1, 3000))
def test_time_for_k_monotone(prof, k):
    # latencies grow with batch in any real profile
    sizes = sorted(prof)
    times = dict(zip(sizes, sorted(prof.values())))
    assert time_for_k(times, k + 1) >= time_for_k(times, k)


# ---------------------------------------------------------------------------
# Pareto


def _pt(t, v, model="m"):
    return BudgetPoint(model, "coverage", 1, t, v)


def brute_force_front(points):
    def dom(a, b):
        return a.time_s <= b.time_s and a.value >= b.value and (a.time_s < b.time_s or a.value > b.value)

    keep = {(p.time_s, p.value) for p in points if not any(dom(q, p) for q in points)}
    return sorted(keep)


def test_pareto_examples():
    front = pareto_front([_pt(1, 0.5), _pt(2, 0.6), _pt(3, 0.55)])
    assert [(p.time_s, p.value) for p in front] == [(1, 0.5), (2, 0.6)]
    assert pareto_front([_pt(1, 0.5)]) == [_pt(1, 0.5)]
    assert len(pareto_front([_pt(1, 0.5), _pt(1, 0.5)])) == 1
    with pytest.raises(ContractError):
        pareto_front([])


def test_pareto_matches_dominance_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        # coarse grid so ties and duplicates actually occur
        pts = [_pt(float(rng.integers(1, 10)), float(rng.integers(0, 8)) / 8) for _ in range(n)]
        got = [(p.time_s, p.value) for p in pareto_front(pts)]
        assert got == brute_force_front(pts)


# ---------------------------------------------------------------------------
# CSV / SVG


def test_csv_round_trip_and_format(tmp_path):
    pts = [BudgetPoint("pure", "coverage", 4, 1.5, 5 / 6), BudgetPoint("teacher", "acc@1", 1, None, 0.9)]
    text = points_to_csv(pts)
    assert text.splitlines()[0] == "model,metric,k,time_s,value"
    assert text.splitlines()[2] == "teacher,acc@1,1,,0.9"
    write_csv(tmp_path / "a.csv", pts)
    back = read_csv(tmp_path / "a.csv")
    assert back[0].value == pytest.approx(5 / 6, abs=1e-12) and back[1].time_s is None
    (tmp_path / "b.csv").write_text("model,metric,k,time_s,value\npure,coverage,x,1,1\n")
    with pytest.raises(DataError, match=":2:"):
        read_csv(tmp_path / "b.csv")


def test_svg_is_deterministic():
    series = {"a": [(1.0, 0.2), (4.0, 0.7)], "b": [(2.0, 0.5)]}
    one = svg_chart(series, "coverage", "time", "value")
    assert one == svg_chart(series, "coverage", "time", "value")
    assert one.startswith("<svg") and one.count("<polyline") == 2
