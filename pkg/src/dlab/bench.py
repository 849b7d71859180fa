"""Decode throughput and decode-state memory over a batch-size sweep.

Only the token-by-token generation loop is timed; the prompt is prefilled
once and replicated across the batch beforehand.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .models import Model, decode_state_bytes

log = logging.getLogger(__name__)

PROFILE_VERSION = 1
DEFAULT_BATCHES = (1, 16, 32, 64, 128, 256, 512)
DEFAULT_CAP = 800_000_000
STEP_WINDOW = 8


@dataclass
class BenchConfig:
    prompt_len: int = 512
    gen_len: int = 512
    batch_sizes: tuple[int, ...] = DEFAULT_BATCHES
    repetitions: int = 3
    # untimed decode steps before the timed repetitions of each batch size
    warmup: int = 1
    memory_cap_bytes: int = DEFAULT_CAP
    seed: int = 0

    def __post_init__(self):
        self.batch_sizes = tuple(sorted(int(b) for b in self.batch_sizes))
        if self.repetitions < 3:
            raise ConfigError("repetitions must be >= 3")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.prompt_len < 1 or self.gen_len < 1:
            raise ConfigError("prompt_len and gen_len must be >= 1")
        if not self.batch_sizes or self.batch_sizes[0] < 1:
            raise ConfigError("batch sizes must be positive")
        if self.memory_cap_bytes <= 0:
            raise ConfigError("memory cap must be > 0")


@dataclass
class BenchRow:
    batch: int
    seconds_median: float | None
    tokens_per_s: float | None
    state_bytes: int
    oom: bool
    # per-token wall time at the start and the end of generation (median
    # over the first / last STEP_WINDOW steps, then over repetitions)
    step_s_first: float | None = None
    step_s_last: float | None = None


@dataclass
class ThroughputProfile:
    model: str
    prompt_len: int
    gen_len: int
    rows: list[BenchRow] = field(default_factory=list)
    memory_cap_bytes: int | None = None
    load_avg: float | None = None

    def row(self, batch: int) -> BenchRow:
        for r in self.rows:
            if r.batch == batch:
                return r
        raise KeyError(batch)

    def to_json(self) -> dict:
        return {
            "version": PROFILE_VERSION,
            "model": self.model,
            "prompt_len": self.prompt_len,
            "gen_len": self.gen_len,
            "memory_cap_bytes": self.memory_cap_bytes,
            "load_avg": self.load_avg,
            "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ThroughputProfile":
        version = d.get("version", PROFILE_VERSION)
        if version != PROFILE_VERSION:
            raise DataError(
                f"throughput profile schema version {version} is not supported (expected {PROFILE_VERSION}); "
                "re-run `dlab bench` to regenerate it"
            )
        try:
            rows = [BenchRow(**r) for r in d["rows"]]
            return cls(d["model"], int(d["prompt_len"]), int(d["gen_len"]), rows, d.get("memory_cap_bytes"), d.get("load_avg"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed throughput profile ({exc})") from None

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ThroughputProfile":
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such profile (run `dlab bench` first)")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(d)


def _decode(model: Model, state, first_logits: np.ndarray, steps: int) -> np.ndarray:
    """Greedy-feed ``steps`` tokens; returns per-step wall times."""
    times = np.empty(steps)
    logits = first_logits
    for t in range(steps):
        t0 = time.perf_counter()
        tok = logits.argmax(axis=-1)
        logits = model.step(state, tok)
        times[t] = time.perf_counter() - t0
    return times


def run_bench(model: Model, config: BenchConfig, model_id: str = "model", memory_cap: int | None = None) -> ThroughputProfile:
    spec = model.spec
    cap = config.memory_cap_bytes if memory_cap is None else memory_cap
    if cap <= 0:
        raise ConfigError("memory cap must be > 0")
    if config.gen_len > spec.max_seq_len - config.prompt_len:
        raise ConfigError(
            f"gen_len {config.gen_len} exceeds max_seq_len {spec.max_seq_len} - prompt_len {config.prompt_len}"
        )
    total_len = config.prompt_len + config.gen_len
    rng = np.random.default_rng(config.seed)
    prompt = rng.integers(0, spec.vocab_size, size=(1, config.prompt_len))
    first_logits, base = model.prefill(prompt)
    load = os.getloadavg()[0] if hasattr(os, "getloadavg") else None
    if load is not None and load > (os.cpu_count() or 1):
        log.warning("ambient load %.2f exceeds the CPU count; timings may be noisy", load)
    rows = []
    for b in config.batch_sizes:
        need = decode_state_bytes(spec, b, total_len)
        if need > cap:
            rows.append(BenchRow(b, None, None, need, True))
            continue
        logits = np.repeat(first_logits, b, axis=0)
        state = base.repeat(b)
        state.reserve(total_len)
        _decode(model, state, logits, min(config.warmup, config.gen_len))
        totals, firsts, lasts = [], [], []
        for _ in range(config.repetitions):
            state = base.repeat(b)
            state.reserve(total_len)
            times = _decode(model, state, logits, config.gen_len)
            totals.append(times.sum())
            w = min(STEP_WINDOW, len(times))
            firsts.append(np.median(times[:w]))
            lasts.append(np.median(times[-w:]))
        sec = float(np.median(totals))
        rows.append(BenchRow(b, sec, b * config.gen_len / sec, need, False, float(np.median(firsts)), float(np.median(lasts))))
        log.info("%s batch %d: %.3fs (%.0f tok/s)", model_id, b, sec, b * config.gen_len / sec)
    return ThroughputProfile(model_id, config.prompt_len, config.gen_len, rows, int(cap), load)


@dataclass
class SpeedupRow:
    batch: int
    student_s: float | None
    teacher_s: float | None
    ratio: float | str


def speedup_table(student: ThroughputProfile, teacher: ThroughputProfile) -> list[SpeedupRow]:
    """Teacher / student median generation time per batch size."""
    if (student.prompt_len, student.gen_len) != (teacher.prompt_len, teacher.gen_len):
        raise ContractError("profiles were measured with different prompt/gen lengths")
    if {r.batch for r in student.rows} != {r.batch for r in teacher.rows}:
        raise ContractError("profiles cover different batch sizes")
    out = []
    for s in sorted(student.rows, key=lambda r: r.batch):
        t = teacher.row(s.batch)
        if t.oom and s.oom:
            ratio: float | str = "both-OOM"
        elif t.oom:
            ratio = "teacher-OOM"
        elif s.oom:
            ratio = "student-OOM"
        else:
            ratio = t.seconds_median / s.seconds_median
        out.append(SpeedupRow(s.batch, s.seconds_median, t.seconds_median, ratio))
    return out


def format_speedup_table(rows: list[SpeedupRow]) -> str:
    def sec(x):
        return "-" if x is None else f"{x:.3f}"

    lines = ["batch  student_s  teacher_s  speedup"]
    for r in rows:
        ratio = r.ratio if isinstance(r.ratio, str) else f"x{r.ratio:.2f}"
        lines.append(f"{r.batch:>5}  {sec(r.student_s):>9}  {sec(r.teacher_s):>9}  {ratio}")
    return "\n".join(lines)
