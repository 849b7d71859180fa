"""A complete pipeline in a couple of minutes, driven through the CLI.

Trains a very small teacher, distils a pure SSM student and a hybrid,
samples, evaluates and prints the coverage curves. The models are far too
small to be good; the point is to see every artifact a run produces.
Pass a directory to keep the outputs, otherwise a temporary one is used.
"""

import json
import sys
import tempfile
from pathlib import Path

from dlab.cli import main
from dlab.scaling import read_csv

CONFIG = {
    "seed": 1,
    "run_id": "demo",
    "model": {"d_model": 32, "n_layers": 2, "n_heads": 2, "state_size": 8, "mlp_hidden": 64, "max_seq_len": 256, "train_steps": 150, "batch_rows": 8},
    "task": {"n_train": 400, "n_eval": 20},
    "distill": {"total_tokens": 60000, "batch_rows": 8, "hybrid_state_size": 8, "sft_epochs": 1, "sft_problems": 100},
    "sampling": {"n_samples": 8, "max_new_tokens": 64},
    "eval": {"ks": [1, 2, 4, 8]},
    "bench": {"prompt_len": 16, "gen_len": 16, "batch_sizes": [1, 8], "repetitions": 3, "warmup": 1},
}


def dlab(*argv):
    if main([*argv, "--config", str(cfg), "--out", str(out)]) != 0:
        sys.exit(f"dlab {argv[0]} failed")


out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "demo"
out.mkdir(parents=True, exist_ok=True)
cfg = out.parent / "demo-config.json"
cfg.write_text(json.dumps(CONFIG))

dlab("generate")
dlab("train-teacher")
dlab("distill", "--path", "pure")
dlab("distill", "--path", "hybrid")
models = ("teacher", "pure", "hybrid")
for m in models:
    dlab("sample", "--model", m)
    dlab("eval", "--model", m)
dlab("bench", "--models", ",".join(models))
dlab("pareto")

print("\ncoverage by k")
for m in models:
    curve = [p for p in read_csv(out / f"eval-{m}.csv") if p.metric == "coverage"]
    print(f"  {m:8s}" + "".join(f"  k={p.k}:{p.value:.2f}" for p in curve))
print(f"\nartifacts in {out}:")
for p in sorted(out.rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(out))
