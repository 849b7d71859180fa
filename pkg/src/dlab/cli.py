"""``dlab`` command line: generate data, train, distil, sample, evaluate,
benchmark and build time-budget curves inside one run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bench import BenchConfig, ThroughputProfile, format_speedup_table, run_bench, speedup_table
from .checkpoint import save_json
from .config import RunConfig, run_dir
from .distill import StageConfig, pure_stage_configs, run_pipeline, run_sft
from .errors import ConfigError, DataError, DlabError
from .models import Model, ModelSpec
from .sampler import SamplingConfig, accuracy, greedy, read_records, sample_batch, write_records
from .scaling import (
    BudgetPoint,
    TaskSampleSet,
    coverage_curve,
    majority_vote,
    oracle_reward,
    pareto_front,
    read_csv,
    time_for_k,
    weighted_best_of_n,
    write_csv,
    write_svg,
)
from .tasks import TOKENIZER, generate_problems, get_template, read_problems, reference_cot, render_chat, write_problems
from .training import Example, cross_entropy, iterate_batches, train_loop

log = logging.getLogger("dlab")

MODELS = ("teacher", "pure", "hybrid", "pure-sft", "hybrid-sft")


# ---------------------------------------------------------------------------
# run-directory helpers


class Run:
    def __init__(self, args):
        self.config = RunConfig.load(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            self.config.seed = args.seed
        self.dir = run_dir(self.config, args.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config.save(self.dir / "config.json")
        self.template = get_template(self.config.task.template)

    def data(self, split: str):
        path = self.dir / "data" / f"{split}.jsonl"
        if not path.exists():
            raise DataError(f"{path} not found; run `dlab generate --out {self.dir}` first")
        return read_problems(path)

    def checkpoint(self, name: str) -> Path:
        return self.dir / "checkpoints" / f"{name}.bin"

    def load_model(self, name: str) -> Model:
        path = self.checkpoint(name)
        if not path.exists():
            hint = "train-teacher" if name == "teacher" else ("sft" if name.endswith("-sft") else "distill")
            raise DataError(f"checkpoint {path} not found; run `dlab {hint}` first")
        return Model.load(path)

    def update_manifest(self, key: str, entry: dict) -> None:
        path = self.dir / "manifest.json"
        data = json.loads(path.read_text()) if path.exists() else {}
        data[key] = entry
        save_json(path, data)


def _eval_problems(run: Run):
    probs = run.data("eval")
    n = run.config.sampling.n_problems
    return probs[:n] if n else probs


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    run = Run(args)
    c = run.config
    lo, hi = c.task.difficulty
    for split, n in (("train", c.task.n_train), ("eval", c.task.n_eval)):
        probs = generate_problems(c.seed, n, (lo, hi), split)
        write_problems(run.dir / "data" / f"{split}.jsonl", probs)
        print(f"wrote {n} {split} problems to {run.dir / 'data' / (split + '.jsonl')}")
    return 0


def teacher_spec(c: RunConfig) -> ModelSpec:
    m = c.model
    return ModelSpec(
        vocab_size=TOKENIZER.vocab_size,
        d_model=m.d_model,
        n_layers=m.n_layers,
        layer_kinds=["attention"] * m.n_layers,
        n_heads=m.n_heads,
        state_size=m.state_size,
        max_seq_len=m.max_seq_len,
        mlp_hidden=m.mlp_hidden,
    )


def train_teacher(run: Run) -> tuple[Model, dict]:
    c = run.config
    train = run.data("train")
    examples = []
    for p in train:
        r = render_chat(p, run.template, reference_cot(p, run.template))
        examples.append(Example(r.ids, r.assistant_start))
    model = Model.init(teacher_spec(c), c.seed)
    batches = iterate_batches(examples, c.model.seq_len, c.model.batch_rows, "assistant_only", np.random.default_rng([c.seed, 7]))

    def loss_fn(b):
        return cross_entropy(model.forward(b.tokens, b.positions, b.resets), b.targets, b.mask)

    res = train_loop(model.params, loss_fn, batches, 10**15, c.model.train_lr, max_steps=c.model.train_steps, stage="teacher", log_every=100)
    return model, {"steps": res.steps, "tokens": res.tokens, "final_loss": res.final_loss, "wallclock_s": res.seconds}


def cmd_train_teacher(args) -> int:
    run = Run(args)
    run.data("train")
    model, entry = train_teacher(run)
    model.save(run.checkpoint("teacher"))
    recs = greedy(model, run.data("eval"), run.template, run.config.sampling.max_new_tokens)
    write_records(run.dir / "greedy-teacher.jsonl", recs)
    entry.update({"run_id": run.config.run_id, "path": "teacher", "seed": run.config.seed, "acc1": accuracy(recs)})
    run.update_manifest("teacher", entry)
    print(f"teacher: final loss {entry['final_loss']:.4f}, greedy acc@1 {entry['acc1']:.3f}")
    return 0


def distill_stages(c: RunConfig, path: str) -> list[StageConfig]:
    d = c.distill
    kw = dict(batch_rows=d.batch_rows, seq_len=d.seq_len, max_steps=d.max_steps)
    if path == "pure":
        stages = pure_stage_configs(d.total_tokens, kl_direction=None, **kw)
        for s in stages:
            lr = getattr(d, f"lr_{s.stage}")
            if lr is not None:
                s.lr = lr
            if s.stage == "e2e_kd":
                s.kl_direction = d.pure_kl
            if s.stage == "hidden_alignment":
                s.freeze_mlp = d.freeze_mlp
        return stages
    tokens = d.hybrid_tokens if d.hybrid_tokens is not None else d.total_tokens
    return [StageConfig("hybrid_kd", tokens, lr=d.lr_hybrid_kd, kl_direction=d.hybrid_kl, **kw)]


def cmd_distill(args) -> int:
    run = Run(args)
    c = run.config
    teacher = run.load_model("teacher")
    student, manifest = run_pipeline(
        args.path,
        teacher,
        distill_stages(c, args.path),
        run.data("train"),
        run.template,
        seed=c.seed,
        n_attention=c.distill.n_attention,
        run_id=c.run_id,
        hybrid_state_size=c.distill.hybrid_state_size,
    )
    student.save(run.checkpoint(args.path))
    recs = greedy(student, run.data("eval"), run.template, c.sampling.max_new_tokens)
    write_records(run.dir / f"greedy-{args.path}.jsonl", recs)
    entry = manifest.to_json()
    entry["acc1"] = accuracy(recs)
    run.update_manifest(args.path, entry)
    print(f"{args.path} student: greedy acc@1 {entry['acc1']:.3f}")
    return 0


def cmd_sft(args) -> int:
    run = Run(args)
    c = run.config
    student = run.load_model(args.model)
    t0 = time.perf_counter()
    probs = run.data("train")[: c.distill.sft_problems]
    student, res, starts = run_sft(student, probs, run.template, c.distill.sft_epochs, c.distill.sft_lr, c.distill.batch_rows, c.distill.seq_len, c.seed)
    name = f"{args.model}-sft"
    student.save(run.checkpoint(name))
    recs = greedy(student, run.data("eval"), run.template, c.sampling.max_new_tokens)
    write_records(run.dir / f"greedy-{name}.jsonl", recs)
    run.update_manifest(
        name,
        {
            "run_id": c.run_id,
            "path": "sft",
            "seed": c.seed,
            "stages": {"sft": {"tokens": res.tokens, "steps": res.steps, "final_loss": res.final_loss, "epoch_start_losses": starts}},
            "wallclock_s": time.perf_counter() - t0,
            "acc1": accuracy(recs),
        },
    )
    print(f"{name}: greedy acc@1 {accuracy(recs):.3f}")
    return 0


def cmd_sample(args) -> int:
    run = Run(args)
    c = run.config
    model = run.load_model(args.model)
    probs = _eval_problems(run)
    if args.greedy:
        recs = greedy(model, probs, run.template, c.sampling.max_new_tokens, c.sampling.rows_per_batch)
        out = run.dir / f"greedy-{args.model}.jsonl"
    else:
        temp = args.temperature if args.temperature is not None else c.sampling.temperature
        top_k = args.top_k if args.top_k is not None else c.sampling.top_k
        n = args.k if args.k is not None else c.sampling.n_samples
        cfg = SamplingConfig(temperature=temp, top_k=top_k, max_new_tokens=c.sampling.max_new_tokens, seed=c.seed)
        recs = sample_batch(model, probs, run.template, cfg, n, c.sampling.rows_per_batch)
        out = run.dir / f"samples-{args.model}.jsonl"
    write_records(out, recs)
    print(f"wrote {len(recs)} completions to {out} (accuracy {accuracy(recs):.3f})")
    return 0


def evaluate_records(records, problems, model: str, ks, epsilon: float, seed: int, draws: int, style: str, greedy_records=None) -> list[BudgetPoint]:
    by_id = {p.id: p for p in problems}
    missing = sorted({r.problem_id for r in records} - set(by_id))
    if missing:
        raise DataError(f"samples reference unknown problem ids, e.g. {missing[0]}")
    scores = {(r.problem_id, r.sample_index): oracle_reward(by_id[r.problem_id], r.text, epsilon, seed, style).reduced for r in records}
    samples = TaskSampleSet.from_records(records, scores)
    ks = [k for k in ks if k <= samples.n]
    points = []
    if greedy_records:
        points.append(BudgetPoint(model, "acc@1", 1, None, accuracy(greedy_records)))
    for k, v in coverage_curve(samples, ks):
        points.append(BudgetPoint(model, "coverage", k, None, v))
    for k in ks:
        points.append(BudgetPoint(model, "majority", k, None, majority_vote(samples, k, seed, draws)))
    for k in ks:
        points.append(BudgetPoint(model, "weighted_bon", k, None, weighted_best_of_n(samples, k, seed, draws=draws)))
    return points


def cmd_eval(args) -> int:
    run = Run(args)
    c = run.config
    name = args.model
    samples_path = Path(args.samples) if args.samples else run.dir / f"samples-{name}.jsonl"
    if not samples_path.exists():
        raise DataError(f"{samples_path} not found; run `dlab sample --model {name}` first")
    records = read_records(samples_path)
    problems = read_problems(args.problems) if args.problems else run.data("eval")
    greedy_path = run.dir / f"greedy-{name}.jsonl"
    greedy_recs = read_records(greedy_path) if greedy_path.exists() and not args.samples else None
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(c.eval.ks)
    points = evaluate_records(records, problems, name, ks, c.eval.reward_epsilon, c.seed, c.eval.draws, run.template.style, greedy_recs)
    out = run.dir / f"eval-{name}.csv"
    write_csv(out, points)
    print(f"wrote {len(points)} metric rows to {out}")
    return 0


def bench_config(c: RunConfig, args) -> BenchConfig:
    b = c.bench
    sizes = [int(x) for x in args.batch_sizes.split(",")] if args.batch_sizes else list(b.batch_sizes)
    return BenchConfig(b.prompt_len, b.gen_len, tuple(sizes), b.repetitions, b.warmup, b.memory_cap_bytes, c.seed)


def cmd_bench(args) -> int:
    run = Run(args)
    cfg = bench_config(run.config, args)
    names = args.models.split(",") if args.models else ["teacher", "pure", "hybrid"]
    profiles = {}
    for name in names:
        model = run.load_model(name)
        profiles[name] = run_bench(model, cfg, name)
        profiles[name].save(run.dir / f"profile-{name}.json")
    if "teacher" in profiles:
        for name, prof in profiles.items():
            if name != "teacher":
                print(f"{name} vs teacher")
                print(format_speedup_table(speedup_table(prof, profiles["teacher"])))
    return 0


def join_budget(points, profiles) -> list[BudgetPoint]:
    out = []
    for p in points:
        prof = profiles.get(p.model)
        if prof is None:
            raise DataError(f"no throughput profile for model {p.model!r}")
        out.append(BudgetPoint(p.model, p.metric, p.k, time_for_k(prof, p.k), p.value))
    return sorted(out, key=lambda p: (p.metric, p.model, p.k))


def cmd_pareto(args) -> int:
    run = Run(args)
    evals = [Path(p) for p in args.evals.split(",")] if args.evals else sorted(run.dir.glob("eval-*.csv"))
    profs = [Path(p) for p in args.profiles.split(",")] if args.profiles else sorted(run.dir.glob("profile-*.json"))
    if not evals:
        raise DataError(f"no eval-*.csv in {run.dir}; run `dlab eval` first")
    if not profs:
        raise DataError(f"no profile-*.json in {run.dir}; run `dlab bench` first")
    profiles = {}
    for path in profs:
        prof = ThroughputProfile.load(path)
        profiles[prof.model] = prof
    points = [p for path in evals for p in read_csv(path) if p.metric != "acc@1"]
    joined = join_budget(points, profiles)
    write_csv(run.dir / "curves.csv", joined)
    for metric in sorted({p.metric for p in joined}):
        sel = [p for p in joined if p.metric == metric]
        write_csv(run.dir / f"front-{metric}.csv", pareto_front(sel))
        write_svg(run.dir / f"curves-{metric}.svg", sel, metric)
    print(f"wrote curves.csv and fronts for {len(joined)} points to {run.dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _top_k(value: str) -> int:
    k = int(value)
    if k == 0 or k < -1:
        raise argparse.ArgumentTypeError("top-k must be a positive integer or -1 (all tokens)")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlab", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (every field optional)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", help="run directory (default $DLAB_RUNS_DIR/<run_id>)")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write train/eval problem sets").set_defaults(fn=cmd_generate)
    sub.add_parser("train-teacher", parents=[common], help="train the attention teacher").set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", parents=[common], help="distil a student from the teacher")
    p.add_argument("--path", choices=("pure", "hybrid"), required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("sft", parents=[common], help="supervised finetuning of a distilled student")
    p.add_argument("--model", choices=("pure", "hybrid"), required=True)
    p.set_defaults(fn=cmd_sft)

    p = sub.add_parser("sample", parents=[common], help="sample completions on the eval split")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--k", type=int, help="samples per problem")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", type=_top_k, help="-1 keeps every token")
    p.add_argument("--greedy", action="store_true", help="one argmax completion per problem")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="coverage / majority / weighted BoN curves")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", help="CompletionRecord JSONL (default samples-<model>.jsonl in the run)")
    p.add_argument("--problems", help="problem JSONL (default the run's eval split)")
    p.add_argument("--k", dest="ks", help="comma-separated k values")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="decode throughput over batch sizes")
    p.add_argument("--models", help="comma-separated checkpoint names")
    p.add_argument("--batch-sizes", help="comma-separated batch sizes")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("pareto", parents=[common], help="join metrics with profiles into time-budget curves")
    p.add_argument("--evals", help="comma-separated eval CSVs (default eval-*.csv in the run)")
    p.add_argument("--profiles", help="comma-separated profile JSONs (default profile-*.json in the run)")
    p.set_defaults(fn=cmd_pareto)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
