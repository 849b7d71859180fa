"""Batched temperature / top-k sampling with per-sample reproducible RNG.

Each (seed, problem id, sample index) triple owns a Philox stream, so a
completion does not depend on which other rows share its batch or on how
work is split across processes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError
from .models import DecodeState, Model
from .tasks import TOKENIZER, PromptTemplate, Problem, check, extract_answer, render_chat

ALL = -1  # top_k sentinel: no truncation


@dataclass
class SamplingConfig:
    temperature: float = 0.6
    top_k: int = ALL
    max_new_tokens: int = 96
    greedy: bool = False
    stop_regex: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.greedy and not self.temperature > 0:
            raise ConfigError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.top_k != ALL and self.top_k < 1:
            raise ConfigError("top_k must be a positive integer or -1 (all tokens)")


@dataclass
class CompletionRecord:
    problem_id: str
    sample_index: int
    text: str
    answer: str | None
    correct: bool
    tokens_generated: int
    gen_time_ms: float

    def to_json(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d["gen_time_ms"] = 0.0
        return d


def _stream_key(seed: int, problem_id: str, sample_index: int) -> list[int]:
    digest = hashlib.sha256(problem_id.encode("utf-8")).digest()
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little"), int(sample_index)]


def sample_uniforms(seed: int, problem_id: str, sample_index: int, n: int) -> np.ndarray:
    """The ``n`` uniforms driving one completion (one per generated token)."""
    bitgen = np.random.Philox(np.random.SeedSequence(_stream_key(seed, problem_id, sample_index)))
    return np.random.Generator(bitgen).random(n)


def next_token_probs(logits: np.ndarray, temperature: float, top_k: int) -> np.ndarray:
    """Temperature-scaled, optionally top-k truncated softmax over the last axis."""
    z = logits / temperature
    if top_k != ALL and top_k < z.shape[-1]:
        kth = np.partition(z, -top_k, axis=-1)[..., -top_k][..., None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def choose_tokens(logits: np.ndarray, config: SamplingConfig, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row from its own uniform ``u``."""
    if config.greedy or config.top_k == 1:
        return logits.argmax(axis=-1)
    p = next_token_probs(logits, config.temperature, config.top_k)
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def _prefill_problem(model: Model, prompt_ids: list[int]) -> tuple[np.ndarray, DecodeState]:
    if not prompt_ids:
        raise InputError("empty prompt")
    return model.prefill(np.asarray([prompt_ids]))


def generate(
    model: Model,
    prompts: Sequence[list[int]],
    keys: Sequence[tuple[str, int]],
    config: SamplingConfig,
) -> list[tuple[list[int], float]]:
    """Decode one row per (prompt, key); returns generated ids and elapsed ms per row.

    Rows sharing a prompt (consecutive equal prompts) reuse one prefill.
    """
    if not prompts:
        return []
    t0 = time.perf_counter()
    states, logits0 = [], []
    i = 0
    while i < len(prompts):
        j = i
        while j < len(prompts) and prompts[j] is prompts[i]:
            j += 1
        lg, st = _prefill_problem(model, prompts[i])
        states.append(st.repeat(j - i))
        logits0.append(np.repeat(lg, j - i, axis=0))
        i = j
    state = DecodeState.concat(states) if len(states) > 1 else states[0]
    logits = np.concatenate(logits0)
    nrows = len(prompts)
    prefill_ms = (time.perf_counter() - t0) * 1e3 / nrows
    n = config.max_new_tokens
    if config.greedy or config.top_k == 1:
        u = np.zeros((nrows, n))
    else:
        u = np.stack([sample_uniforms(config.seed, pid, idx, n) for pid, idx in keys])
    out = np.zeros((nrows, n), dtype=np.int64)
    done = np.zeros(nrows, dtype=bool)
    lengths = np.zeros(nrows, dtype=np.int64)
    finish_ms = np.zeros(nrows)
    eos = TOKENIZER.eos_id
    stop = None
    if config.stop_regex:
        import re

        stop = re.compile(config.stop_regex)
    t1 = time.perf_counter()
    for t in range(n):
        tok = choose_tokens(logits, config, u[:, t])
        tok = np.where(done, eos, tok)
        out[:, t] = tok
        newly = ~done & (tok == eos)
        lengths[~done & ~newly] += 1
        done |= newly
        if stop is not None:
            for r in np.flatnonzero(~done):
                if stop.search(TOKENIZER.decode(out[r, : lengths[r]])):
                    done[r] = True
        now = (time.perf_counter() - t1) * 1e3
        finish_ms[newly] = now
        if done.all() or t == n - 1 or model.spec.max_seq_len <= int(state.positions.max()):
            break
        logits = model.step(state, tok)
    now = (time.perf_counter() - t1) * 1e3
    finish_ms[finish_ms == 0] = now
    return [(out[r, : lengths[r]].tolist(), float(prefill_ms + finish_ms[r])) for r in range(nrows)]


def _records(problems, template, model, config, n_samples, rows_per_batch):
    prompts_cache = {p.id: render_chat(p, template).ids for p in problems}
    jobs = [(p, s) for p in problems for s in range(n_samples)]
    records = []
    for start in range(0, len(jobs), rows_per_batch):
        chunk = jobs[start : start + rows_per_batch]
        prompts = [prompts_cache[p.id] for p, _ in chunk]
        keys = [(p.id, s) for p, s in chunk]
        for (p, s), (ids, ms) in zip(chunk, generate(model, prompts, keys, config)):
            text = TOKENIZER.decode(ids)
            ans = extract_answer(text, template.style)
            records.append(CompletionRecord(p.id, s, text, ans, check(p, ans), len(ids), ms))
    return records


def sample_batch(
    model: Model,
    problems: Sequence[Problem],
    template: PromptTemplate,
    config: SamplingConfig,
    n_samples: int,
    rows_per_batch: int = 256,
) -> list[CompletionRecord]:
    """``n_samples`` completions per problem, ordered by (problem, sample index)."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    return _records(problems, template, model, config, n_samples, rows_per_batch)


def greedy(model: Model, problems: Sequence[Problem] | Problem, template: PromptTemplate, max_new_tokens: int = 96, rows_per_batch: int = 256):
    """Argmax decoding, one completion per problem (acc@1)."""
    single = isinstance(problems, Problem)
    probs = [problems] if single else list(problems)
    cfg = SamplingConfig(greedy=True, max_new_tokens=max_new_tokens)
    recs = _records(probs, template, model, cfg, 1, rows_per_batch)
    return recs[0] if single else recs


def accuracy(records: Iterable[CompletionRecord]) -> float:
    recs = list(records)
    return sum(r.correct for r in recs) / len(recs) if recs else 0.0


# ---------------------------------------------------------------------------
# JSONL interchange

RECORD_FIELDS = ("problem_id", "sample_index", "text", "answer", "correct", "tokens_generated", "gen_time_ms")


def write_records(path: str | Path, records: Iterable[CompletionRecord], timing_sidecar: bool = True) -> None:
    """Write CompletionRecord JSONL.

    With ``timing_sidecar`` the measured ``gen_time_ms`` values go to
    ``<path>.timing.jsonl`` and the main file carries 0.0, so identical runs
    produce byte-identical main files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(include_timing=not timing_sidecar)) + "\n")
    if timing_sidecar:
        with open(timing_path(path), "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                fh.write(json.dumps({"problem_id": r.problem_id, "sample_index": r.sample_index, "gen_time_ms": r.gen_time_ms}) + "\n")


def timing_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.replace(".jsonl", "") + ".timing.jsonl")


def read_records(path: str | Path) -> list[CompletionRecord]:
    """Parse CompletionRecord JSONL, merging the timing sidecar if present."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such sample file")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                missing = [f for f in RECORD_FIELDS if f not in d]
                if missing:
                    raise KeyError(", ".join(missing))
                records.append(
                    CompletionRecord(
                        str(d["problem_id"]),
                        int(d["sample_index"]),
                        str(d["text"]),
                        None if d["answer"] is None else str(d["answer"]),
                        bool(d["correct"]),
                        int(d["tokens_generated"]),
                        float(d["gen_time_ms"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed CompletionRecord ({exc})") from None
    side = timing_path(path)
    if side.exists():
        timing = {}
        with open(side, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    timing[(d["problem_id"], d["sample_index"])] = float(d["gen_time_ms"])
        for r in records:
            r.gen_time_ms = timing.get((r.problem_id, r.sample_index), r.gen_time_ms)
    return records
