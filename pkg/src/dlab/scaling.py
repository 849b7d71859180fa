"""Coverage and selection-accuracy estimators, a toy process reward oracle,
time-budget mapping and Pareto fronts.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError
from .tasks import Problem, apply_op, canonical_answer, check, extract_answer, parse_prompt

N_DRAWS = 20


# ---------------------------------------------------------------------------
# coverage


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k, ``1 - C(n-c, k) / C(n, k)`` in product form."""
    if not (0 <= c <= n):
        raise ContractError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not (1 <= k <= n):
        raise ContractError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    # sequential fold from i = n downwards, the same order pass_at_k_table uses
    return 1.0 - math.prod([1.0 - k / i for i in range(n, n - c, -1)])


def pass_at_k_table(n: int) -> np.ndarray:
    """``table[c, k - 1] == pass_at_k(n, c, k)`` for every c in 0..n, k in 1..n.

    Running products over c share their prefix, so one cumprod per k gives
    the whole table with the same multiplications as the scalar form.
    """
    if n < 1:
        raise ContractError(f"need n >= 1, got {n}")
    ks = np.arange(1, n + 1)[:, None]
    factors = 1.0 - ks / np.arange(n, 0, -1)[None, :]
    running = np.cumprod(factors, axis=1)  # [k-1, c-1]
    table = np.empty((n + 1, n))
    table[0] = 0.0
    table[1:] = 1.0 - running.T
    c = np.arange(n + 1)[:, None]
    table[n - c < ks.T] = 1.0
    return table


@dataclass
class ProblemSamples:
    problem_id: str
    answers: list[str | None]
    correct: list[bool]
    scores: list[float] | None = None

    @property
    def n(self) -> int:
        return len(self.answers)

    @property
    def c(self) -> int:
        return sum(self.correct)


@dataclass
class TaskSampleSet:
    """All samples for a problem set; every problem has the same N."""

    problems: list[ProblemSamples]

    def __post_init__(self):
        if self.problems:
            ns = {p.n for p in self.problems}
            if len(ns) != 1:
                raise ContractError(f"problems have differing sample counts {sorted(ns)}")
            for p in self.problems:
                if len(p.correct) != p.n or (p.scores is not None and len(p.scores) != p.n):
                    raise ContractError(f"{p.problem_id}: ragged sample lists")

    @property
    def n(self) -> int:
        return self.problems[0].n if self.problems else 0

    @classmethod
    def from_records(cls, records, scores: Mapping[tuple[str, int], float] | None = None) -> "TaskSampleSet":
        by_problem: dict[str, list] = {}
        for r in records:
            by_problem.setdefault(r.problem_id, []).append(r)
        problems = []
        for pid in sorted(by_problem):
            recs = sorted(by_problem[pid], key=lambda r: r.sample_index)
            sc = None
            if scores is not None:
                sc = [scores.get((pid, r.sample_index)) for r in recs]
                if any(s is None for s in sc):
                    sc = None if all(s is None for s in sc) else sc
            problems.append(ProblemSamples(pid, [r.answer for r in recs], [bool(r.correct) for r in recs], sc))
        return cls(problems)


def coverage_curve(samples: TaskSampleSet, ks: Iterable[int]) -> list[tuple[int, float]]:
    if not samples.problems:
        raise ContractError("coverage of an empty problem set")
    ks = list(ks)
    if max(ks) > samples.n:
        raise ContractError(f"k={max(ks)} exceeds the {samples.n} samples per problem")
    return [(k, float(np.mean([pass_at_k(p.n, p.c, k) for p in samples.problems]))) for k in ks]


# ---------------------------------------------------------------------------
# selection (majority vote, best-of-n)


def subsample_indices(n: int, k: int, seed: int, problem_index: int, draws: int = N_DRAWS) -> list[tuple[int, ...]]:
    """Sorted index sets one problem is scored on.

    Every k-subset is listed when there are at most ``draws`` of them (so k=1
    and k=n are exact); otherwise ``draws`` seeded subsets without replacement.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > n:
        raise ContractError(f"k={k} exceeds the {n} available samples")
    if math.comb(n, k) <= draws:
        return list(itertools.combinations(range(n), k))
    rng = np.random.default_rng([seed, problem_index])
    return [tuple(sorted(rng.choice(n, size=k, replace=False).tolist())) for _ in range(draws)]


def _vote(answers: Sequence[str | None], weights: Sequence[float]) -> str | None:
    """Answer with the largest total weight; ties go to the earliest first occurrence."""
    totals: dict[str, float] = {}
    first: dict[str, int] = {}
    for i, (a, w) in enumerate(zip(answers, weights)):
        key = canonical_answer(a)
        if key is None:
            continue
        if key not in totals:
            totals[key] = 0.0
            first[key] = i
        totals[key] += w
    if not totals:
        return None
    return min(totals, key=lambda a: (-totals[a], first[a]))


def _winner_correct(p: ProblemSamples, winner: str | None) -> bool:
    if winner is None:
        return False
    return any(ok and canonical_answer(a) == winner for a, ok in zip(p.answers, p.correct))


def _selection(samples: TaskSampleSet, k: int, seed: int, pick, draws: int = N_DRAWS) -> float:
    if k < 1:
        raise ContractError("k must be >= 1")
    if not samples.problems:
        raise ContractError("selection accuracy of an empty problem set")
    per_problem = []
    for i, p in enumerate(samples.problems):
        subs = subsample_indices(p.n, k, seed, i, draws)
        per_problem.append(np.mean([_winner_correct(p, pick(p, idx)) for idx in subs]))
    return float(np.mean(per_problem))


def majority_vote(samples: TaskSampleSet, k: int, seed: int = 0, draws: int = N_DRAWS) -> float:
    """Self-consistency accuracy at k, averaged over seeded subsamples."""

    def pick(p, idx):
        return _vote([p.answers[j] for j in idx], [1.0] * len(idx))

    return _selection(samples, k, seed, pick, draws)


def _require_scores(p: ProblemSamples) -> list[float]:
    if p.scores is None or any(s is None for s in p.scores):
        raise DataError(f"{p.problem_id}: missing reward score")
    return p.scores


def weighted_best_of_n(samples: TaskSampleSet, k: int, seed: int = 0, best_of_n: bool = False, draws: int = N_DRAWS) -> float:
    """Weighted BoN (answer with the largest reward sum) or plain BoN (largest single reward)."""
    for p in samples.problems:
        _require_scores(p)

    def pick(p, idx):
        return select_answer([p.answers[j] for j in idx], [p.scores[j] for j in idx], best_of_n)

    return _selection(samples, k, seed, pick, draws)


def select_answer(answers: Sequence[str | None], scores: Sequence[float] | None = None, best_of_n: bool = False) -> str | None:
    """Single-problem selection rule: majority (no scores), weighted BoN or plain BoN."""
    if scores is None:
        return _vote(answers, [1.0] * len(answers))
    if len(scores) != len(answers) or any(s is None for s in scores):
        raise DataError("missing reward score")
    if best_of_n:
        cand = [(s, -i, canonical_answer(a)) for i, (a, s) in enumerate(zip(answers, scores)) if canonical_answer(a) is not None]
        return max(cand)[2] if cand else None
    return _vote(answers, scores)


def subsample_coverage(samples: TaskSampleSet, k: int, seed: int = 0, draws: int = N_DRAWS) -> float:
    """Fraction of the selection subsamples holding at least one correct sample."""

    def pick(p, idx):
        hits = [p.answers[j] for j in idx if p.correct[j]]
        return canonical_answer(hits[0]) if hits else None

    return _selection(samples, k, seed, pick, draws)


# ---------------------------------------------------------------------------
# reward oracle


@dataclass
class RewardTrace:
    step_scores: list[float]

    @property
    def reduced(self) -> float:
        return self.step_scores[-1]


_STEP_HEADER = re.compile(r"## Step \d+:")
_STEP_LINE = re.compile(r"^\s*(-?\d+)\s*([+\-*])\s*(\d+)\s*=\s*(-?\d+)\s*$")


def split_steps(text: str) -> list[str]:
    """Chunks after each ``## Step N:`` header; header-less text is one step."""
    parts = _STEP_HEADER.split(text)
    if len(parts) == 1:
        return [text]
    return parts[1:]


def _noise(seed: int, problem_id: str, text: str, n: int, epsilon: float) -> np.ndarray:
    if epsilon == 0 or n == 0:
        return np.zeros(n)
    h = hashlib.sha256(f"{problem_id}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng([seed, int.from_bytes(h[:8], "little")])
    return rng.uniform(-epsilon, epsilon, n)


def oracle_reward(problem: Problem, completion: str, epsilon: float = 0.1, seed: int = 0, style: str = "final_answer_is") -> RewardTrace:
    """Process-style scores for a toy-task completion.

    Step j scores 1 when its line ``a op b = c`` continues from a fully
    correct prefix, uses the problem's j-th operation and has the right
    result. The last step must also carry the correct answer line. Noise is
    keyed on the completion text so scores are reproducible.
    """
    start, ops = parse_prompt(problem.prompt)
    chunks = split_steps(completion)
    answer_ok = check(problem, extract_answer(completion, style))
    scores = []
    if len(chunks) == 1 and not _STEP_HEADER.search(completion):
        scores.append(1.0 if answer_ok else 0.0)
    else:
        value, ok = start, True
        for j, chunk in enumerate(chunks):
            line = chunk.strip().split("\n")[0] if chunk.strip() else ""
            m = _STEP_LINE.match(line)
            good = False
            if ok and m and j < len(ops):
                a, op, b, c = int(m.group(1)), m.group(2), int(m.group(3)), int(m.group(4))
                want_op, want_b = ops[j]
                good = a == value and op == want_op and b == want_b and c == apply_op(a, op, b)
                value = c
            ok = ok and good
            scores.append(1.0 if ok else 0.0)
        scores[-1] = 1.0 if (ok and answer_ok and len(chunks) == len(ops)) else 0.0
    eta = _noise(seed, problem.id, completion, len(scores), epsilon)
    return RewardTrace([float(s + e) for s, e in zip(scores, eta)])


# ---------------------------------------------------------------------------
# time budgets and Pareto fronts


def profile_times(profile) -> dict[int, float]:
    """``{batch: median seconds}`` for the feasible rows of a profile (or a plain dict)."""
    if isinstance(profile, Mapping):
        times = {int(b): float(t) for b, t in profile.items()}
    else:
        times = {r.batch: r.seconds_median for r in profile.rows if not r.oom}
    if not times:
        raise ContractError("profile has no feasible batch size")
    return times


def time_for_k(profile, k: int) -> float:
    """Seconds to draw k completions by greedy batching at the largest feasible batch."""
    if k < 1:
        raise ContractError("k must be >= 1")
    times = profile_times(profile)
    b_max = max(times)
    full, rem = divmod(k, b_max)
    total = 0.0
    for _ in range(full):
        total += times[b_max]
    if rem:
        total += times[min(b for b in times if b >= rem)]
    return total


@dataclass(frozen=True, order=True)
class BudgetPoint:
    model: str
    metric: str
    k: int
    time_s: float | None
    value: float


def dominates(a: BudgetPoint, b: BudgetPoint) -> bool:
    return a.time_s <= b.time_s and a.value >= b.value and (a.time_s < b.time_s or a.value > b.value)


def pareto_front(points: Sequence[BudgetPoint]) -> list[BudgetPoint]:
    """Non-dominated points sorted by time; identical (time, value) pairs kept once."""
    if not points:
        raise ContractError("pareto front of an empty point set")
    seen = {}
    for p in sorted(points, key=lambda p: (p.time_s, -p.value, p.model, p.metric, p.k)):
        seen.setdefault((p.time_s, p.value), p)
    uniq = list(seen.values())
    front, best = [], -math.inf
    for p in uniq:  # sorted by time asc, value desc
        if p.value > best:
            front.append(p)
            best = p.value
    return front


# ---------------------------------------------------------------------------
# CSV / SVG output

CSV_HEADER = ("model", "metric", "k", "time_s", "value")


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return format(round(float(x), 12), ".12g")


def points_to_csv(points: Iterable[BudgetPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([p.model, p.metric, p.k, _fmt(p.time_s), _fmt(p.value)])
    return buf.getvalue()


def write_csv(path: str | Path, points: Iterable[BudgetPoint]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(points_to_csv(points), encoding="utf-8", newline="\n")


def read_csv(path: str | Path) -> list[BudgetPoint]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such metrics file")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            model, metric, k, t, v = row
            out.append(BudgetPoint(model, metric, int(k), float(t) if t else None, float(v)))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_chart(series: Mapping[str, Sequence[tuple[float, float]]], title: str, xlabel: str, ylabel: str, log_x: bool = True, width: int = 640, height: int = 420) -> str:
    """Minimal deterministic SVG line chart, one polyline per series."""
    ml, mr, mt, mb = 60, 150, 40, 50
    pts = [(x, y) for s in series.values() for x, y in s]
    if not pts:
        pts = [(1.0, 0.0)]
    tx = (lambda x: math.log10(x)) if log_x else (lambda x: x)
    xs = [tx(max(x, 1e-12)) for x, _ in pts]
    x0, x1 = min(xs), max(xs)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = 0.0, max(1.0, max(y for _, y in pts))

    def px(x):
        return ml + (tx(max(x, 1e-12)) - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(title)}</text>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="16" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y0 + frac * (y1 - y0)
        out.append(f'<text x="{ml - 6}" y="{py(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.2f}</text>')
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        label = 10**xv if log_x else xv
        out.append(f'<text x="{ml + frac * (width - ml - mr):.1f}" y="{height - mb + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{label:.3g}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in sorted(s):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = mt + 18 * i
        out.append(f'<line x1="{width - mr + 12}" y1="{ly}" x2="{width - mr + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - mr + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(path: str | Path, points: Sequence[BudgetPoint], metric: str, x: str = "time_s") -> None:
    """One chart for ``metric``: value against time (or k), a line per model."""
    series: dict[str, list[tuple[float, float]]] = {}
    for p in points:
        if p.metric != metric:
            continue
        xv = p.time_s if x == "time_s" else p.k
        if xv is None:
            continue
        series.setdefault(p.model, []).append((float(xv), p.value))
    xlabel = "generation time (s)" if x == "time_s" else "k (samples)"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(svg_chart(series, metric, xlabel, metric), encoding="utf-8", newline="\n")
