"""Synthetic chain-of-thought arithmetic benchmark.

A problem is a chain of integer operations applied left to right to a
two-digit starting value, e.g. ``Start with 37, then +8, -3, *2.``. The
reference solution works one operation per ``## Step k:`` line and closes
with the answer sentence of the chosen template style. All intermediate
values stay in ``[0, 99]``; carries and borrows occur naturally.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError

# ---------------------------------------------------------------------------
# tokenizer

PAD, EOS, SYS, USR, AST = "<pad>", "<eos>", "<|system|>", "<|user|>", "<|assistant|>"
SPECIALS = (PAD, EOS, SYS, USR, AST)
_CHARS = (
    "\n !\"#$%'()*+,-./0123456789:;=?[\\]^_{|}"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
)


class CharTokenizer:
    """Character-level vocabulary plus five chat/control tokens."""

    def __init__(self):
        self.itos = list(SPECIALS) + list(_CHARS)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.eos_id = self.stoi[EOS]
        self.sys_id = self.stoi[SYS]
        self.user_id = self.stoi[USR]
        self.assistant_id = self.stoi[AST]

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[ch] for ch in text]
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} is outside the tokenizer vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            tok = self.itos[int(i)]
            if tok == EOS:
                break
            if tok not in SPECIALS:
                out.append(tok)
        return "".join(out)


TOKENIZER = CharTokenizer()

# ---------------------------------------------------------------------------
# prompt templates

MATH_SYSTEM_PROMPT = (
    "Solve the following math problem efficiently and clearly:\n\n"
    "- For simple problems (2 steps or fewer):\n"
    "Provide a concise solution with minimal explanation.\n\n"
    "- For complex problems (3 steps or more):\n"
    "Use this step-by-step format:\n\n"
    "## Step 1: [Concise description]\n[Brief explanation and calculations]\n\n"
    "## Step 2: [Concise description]\n[Brief explanation and calculations]\n\n"
    "...\n\n"
    "Regardless of the approach, always conclude with:\n\n"
    "Therefore, the final answer is: $\\boxed{answer}$. I hope it is correct.\n\n"
    "Where [answer] is just the final number or expression that solves the problem."
)

GSM8K_SYSTEM_PROMPT = (
    "\n\nGiven the following problem, reason and give a final answer to the problem.\n"
    'Your response should end with "The final answer is [answer]" where [answer] is the response to the problem.\n'
    "Problem:"
)

BOXED_INSTRUCTION = "Therefore, the final answer is: $\\boxed{answer}$"
FINAL_INSTRUCTION = "The final answer is [answer]"


@dataclass(frozen=True)
class PromptTemplate:
    style: str  # "boxed" | "final_answer_is"
    system: str

    def __post_init__(self):
        if self.style not in ("boxed", "final_answer_is"):
            raise ConfigError(f"unknown template style {self.style!r}")
        marker = BOXED_INSTRUCTION if self.style == "boxed" else FINAL_INSTRUCTION
        if marker not in self.system:
            raise ConfigError(f"{self.style} template must instruct {marker!r}")

    def answer_line(self, answer: str) -> str:
        if self.style == "boxed":
            return f"Therefore, the final answer is: $\\boxed{{{answer}}}$. I hope it is correct."
        return f"The final answer is {answer}"


MATH_TEMPLATE = PromptTemplate("boxed", MATH_SYSTEM_PROMPT)
GSM8K_TEMPLATE = PromptTemplate("final_answer_is", GSM8K_SYSTEM_PROMPT)
# short system texts keep desk-scale sequences small
COMPACT_BOXED = PromptTemplate("boxed", f"Conclude with: {BOXED_INSTRUCTION}.")
COMPACT_FINAL = PromptTemplate("final_answer_is", f'End with "{FINAL_INSTRUCTION}".')

TEMPLATES = {
    "math": MATH_TEMPLATE,
    "gsm8k": GSM8K_TEMPLATE,
    "compact_boxed": COMPACT_BOXED,
    "compact_final": COMPACT_FINAL,
}


def get_template(name: str) -> PromptTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ConfigError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class Problem:
    id: str
    prompt: str
    answer: str
    difficulty: int
    split: str
    ops: tuple[tuple[str, int], ...] = ()
    start: int = 0

    def to_json(self) -> dict:
        return {"id": self.id, "prompt": self.prompt, "answer": self.answer, "difficulty": self.difficulty, "split": self.split}


def apply_op(value: int, op: str, operand: int) -> int:
    """Integer evaluator shared by generator, checker and reward oracle."""
    if op == "+":
        return value + operand
    if op == "-":
        return value - operand
    if op == "*":
        return value * operand
    raise ValueError(f"unknown operator {op!r}")


def _choose_op(rng: np.random.Generator, value: int) -> tuple[str, int]:
    choices = []
    if value <= 90:
        choices.append("+")
    if value >= 10:
        choices.append("-")
    if 5 <= value <= 33:
        choices.append("*")
    op = choices[int(rng.integers(len(choices)))]
    if op == "*":
        operand = int(rng.integers(2, 99 // value + 1)) if value <= 33 else 2
        operand = min(operand, 3)
    elif op == "+":
        operand = int(rng.integers(1, min(9, 99 - value) + 1))
    else:
        operand = int(rng.integers(1, min(9, value) + 1))
    return op, operand


def _prompt_text(start: int, ops: Sequence[tuple[str, int]]) -> str:
    return f"Start with {start}, then " + ", ".join(f"{op}{v}" for op, v in ops) + "."


def _problem_seed(seed: int, split: str, index: int) -> np.random.Generator:
    # split tag in the entropy keeps train and eval streams independent
    tag = {"train": 1, "eval": 2}[split]
    return np.random.default_rng([seed, tag, index])


def split_of(prompt: str) -> str:
    """Every prompt string belongs to exactly one split (1 in 8 go to eval)."""
    return "eval" if hashlib.sha256(prompt.encode("utf-8")).digest()[0] % 8 == 0 else "train"


def make_problem(seed: int, split: str, index: int, difficulty_range: tuple[int, int]) -> Problem:
    lo, hi = difficulty_range
    rng = _problem_seed(seed, split, index)
    while True:
        difficulty = int(rng.integers(lo, hi + 1))
        value = start = int(rng.integers(10, 100))
        ops = []
        for _ in range(difficulty):
            op, operand = _choose_op(rng, value)
            value = apply_op(value, op, operand)
            ops.append((op, operand))
        if split_of(_prompt_text(start, ops)) == split:
            break
    return Problem(
        id=f"{split}-{index:06d}",
        prompt=_prompt_text(start, ops),
        answer=str(value),
        difficulty=difficulty,
        split=split,
        ops=tuple(ops),
        start=start,
    )


def generate_problems(seed: int, count: int, difficulty_range=(1, 3), split: str = "train") -> list[Problem]:
    """Deterministic problem set. Splits are disjoint both by id and by prompt text."""
    lo, hi = difficulty_range
    if hi < lo or lo < 1:
        raise ConfigError(f"empty difficulty range {difficulty_range}")
    if count <= 0:
        raise ConfigError("count must be positive")
    if split not in ("train", "eval"):
        raise ConfigError(f"unknown split {split!r}")
    return [make_problem(seed, split, i, (lo, hi)) for i in range(count)]


_PROMPT_RE = re.compile(r"^Start with (\d+), then (.*)\.$")


def parse_prompt(prompt: str) -> tuple[int, list[tuple[str, int]]]:
    m = _PROMPT_RE.match(prompt)
    if not m:
        raise DataError(f"unparseable prompt {prompt!r}")
    ops = [(tok[0], int(tok[1:])) for tok in m.group(2).split(", ")]
    return int(m.group(1)), ops


def evaluate_prompt(prompt: str) -> int:
    """Independent evaluation of a prompt string."""
    value, ops = parse_prompt(prompt)
    for op, v in ops:
        value = apply_op(value, op, v)
    return value


def reference_cot(problem: Problem, template: PromptTemplate) -> str:
    value, ops = parse_prompt(problem.prompt)
    lines = []
    for k, (op, v) in enumerate(ops, start=1):
        new = apply_op(value, op, v)
        lines.append(f"## Step {k}: {value}{op}{v}={new}")
        value = new
    lines.append(template.answer_line(str(value)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# answers


_BOXED_RE = re.compile(r"\\boxed\{([^{}]*)\}")
_FINAL_MARKER = "The final answer is"


def _normalize(ans: str) -> str:
    ans = ans.strip()
    ans = ans.lstrip("$").strip()
    ans = ans.rstrip(".").rstrip("$").strip()
    return ans


def extract_answer(text: str, style: str) -> str | None:
    """Last boxed payload or the text after the last answer marker; ``None`` if absent."""
    if style == "boxed":
        found = _BOXED_RE.findall(text)
        if not found:
            return None
        ans = _normalize(found[-1])
    elif style == "final_answer_is":
        idx = text.rfind(_FINAL_MARKER)
        if idx < 0:
            return None
        rest = text[idx + len(_FINAL_MARKER):]
        ans = _normalize(rest.lstrip(":").split("\n")[0])
    else:
        raise ConfigError(f"unknown template style {style!r}")
    return ans or None


def _canon_int(s: str) -> int | None:
    s = s.strip().replace(",", "")
    if re.fullmatch(r"[+-]?\d+", s):
        return int(s)
    return None


def canonical_answer(answer: str | None) -> str | None:
    """Grouping key for votes: integers by value, anything else verbatim."""
    if answer is None:
        return None
    n = _canon_int(answer)
    return str(n) if n is not None else answer.strip()


def check(problem: Problem | str, answer: str | None) -> bool:
    """Integer comparison after canonicalisation, else exact string match."""
    truth = problem.answer if isinstance(problem, Problem) else str(problem)
    if answer is None:
        return False
    a, b = _canon_int(answer), _canon_int(truth)
    if a is not None and b is not None:
        return a == b
    return answer.strip() == truth.strip()


# ---------------------------------------------------------------------------
# chat rendering


@dataclass(frozen=True)
class Rendered:
    """Token ids of a chat-formatted example and where the assistant turn starts."""

    ids: list[int]
    assistant_start: int

    @property
    def prompt_ids(self) -> list[int]:
        return self.ids[: self.assistant_start]


def render_chat(problem: Problem | str, template: PromptTemplate, completion: str | None = None) -> Rendered:
    """``<|system|>`` system ``<|user|>`` problem ``<|assistant|>`` [completion ``<eos>``]."""
    prompt = problem.prompt if isinstance(problem, Problem) else problem
    tok = TOKENIZER
    ids = [tok.sys_id, *tok.encode(template.system), tok.user_id, *tok.encode(prompt), tok.assistant_id]
    start = len(ids)
    if completion is not None:
        ids += tok.encode(completion) + [tok.eos_id]
    return Rendered(ids, start)


def render_chat_text(problem: Problem | str, template: PromptTemplate) -> str:
    prompt = problem.prompt if isinstance(problem, Problem) else problem
    return f"{SYS}{template.system}{USR}{prompt}{AST}"


def render_plain(problem: Problem, template: PromptTemplate) -> list[int]:
    """Template-free text (problem, newline, worked solution) for pretraining-style stages."""
    return TOKENIZER.encode(problem.prompt + "\n" + reference_cot(problem, template)) + [TOKENIZER.eos_id]


# ---------------------------------------------------------------------------
# serialization


def write_problems(path: str | Path, problems: Iterable[Problem]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_json(), sort_keys=False) + "\n")


def read_problems(path: str | Path) -> list[Problem]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                start, ops = parse_prompt(d["prompt"])
                out.append(
                    Problem(d["id"], d["prompt"], str(d["answer"]), int(d["difficulty"]), d["split"], tuple(ops), start)
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: malformed problem record ({exc})") from None
    return out


def problem_set_digest(problems: Iterable[Problem]) -> str:
    h = hashlib.sha256()
    for p in problems:
        h.update((json.dumps(p.to_json()) + "\n").encode("utf-8"))
    return h.hexdigest()
