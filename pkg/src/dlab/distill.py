"""Distilling an attention teacher into SSM students.

Two recipes:

* pure: every layer becomes an ``ssm_v2`` mixer, trained in three stages
  (mixer-matrix alignment, block-output alignment, end-to-end logit KD);
* hybrid: a few evenly spaced attention layers are kept, the rest become
  ``ssm_v1`` mixers initialised from the attention projections, then the
  whole model is finetuned with reverse KL on assistant tokens.

``run_sft`` adds plain supervised finetuning on top of either.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_json
from .errors import ConfigError, ContractError, DimensionError
from .models import Model, ModelSpec, SsmV1Mixer, hybrid_attention_layers
from .tasks import PromptTemplate, Problem, reference_cot, render_chat, render_plain
from .tensor import Tensor, exp, log_softmax, no_grad, tsum
from .training import Batch, Example, TrainResult, cross_entropy, iterate_batches, masked_mean, pack, slice_batch, train_loop

log = logging.getLogger(__name__)

STAGES = ("matrix_orientation", "hidden_alignment", "e2e_kd", "hybrid_kd", "sft")
PURE_ORDER = ("matrix_orientation", "hidden_alignment", "e2e_kd")
# published recipe learning rates; desk-scale configs usually override them
DEFAULT_LR = {"matrix_orientation": 1e-4, "hidden_alignment": 1e-4, "e2e_kd": 1e-5, "hybrid_kd": 2e-5, "sft": 1e-5}
STAGE_RATIOS = {"matrix_orientation": 1, "hidden_alignment": 3, "e2e_kd": 4}


@dataclass
class StageConfig:
    stage: str
    tokens: int
    batch_rows: int = 16
    seq_len: int = 160
    lr: float | None = None
    mask_policy: str | None = None
    max_steps: int | None = None
    kl_direction: str | None = None
    freeze_mlp: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.tokens < 0:
            raise ConfigError(f"{self.stage}: token budget must be >= 0")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.mask_policy is None:
            self.mask_policy = "assistant_only" if self.stage in ("hybrid_kd", "sft") else "all_tokens"
        if self.mask_policy not in ("all_tokens", "assistant_only"):
            raise ConfigError(f"unknown loss-mask policy {self.mask_policy!r}")
        if self.kl_direction is None:
            self.kl_direction = "reverse" if self.stage == "hybrid_kd" else "forward"
        if self.kl_direction not in ("forward", "reverse"):
            raise ConfigError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")


def pure_stage_configs(total_tokens: int, **kw) -> list[StageConfig]:
    """Split a token budget 1:3:4 over the three pure-path stages."""
    unit = total_tokens / sum(STAGE_RATIOS.values())
    return [StageConfig(s, int(round(unit * r)), **kw) for s, r in STAGE_RATIOS.items()]


@dataclass
class StageRecord:
    tokens: int
    steps: int
    final_loss: float
    mask_policy: str
    lr: float


@dataclass
class RunManifest:
    run_id: str
    path: str
    seed: int
    stages: dict[str, StageRecord] = field(default_factory=dict)
    wallclock_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "path": self.path,
            "seed": self.seed,
            "stages": {k: asdict(v) for k, v in self.stages.items()},
            "wallclock_s": self.wallclock_s,
        }

    def save(self, path: str | Path) -> None:
        save_json(path, self.to_json())


def params_digest(model: Model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# student construction


def _copy_shared(teacher: Model, arrays: dict, layers: Sequence[int] | None = None, mixers: bool = False) -> None:
    """Copy embeddings/head and, for ``layers``, norms and MLP weights."""
    t = teacher.arrays()
    for k in ("embed", "pos", "norm_f", "lm_head"):
        arrays[k] = t[k].copy()
    for i in layers or ():
        for k, v in t.items():
            if k.startswith(f"layers.{i}.") and (mixers or ".mixer." not in k):
                arrays[k] = v.copy()


def init_hybrid_from_teacher(teacher: Model, convert: Sequence[int], state_size: int | None = None, seed: int = 0) -> Model:
    """Replace the attention mixers at ``convert`` with ``ssm_v1`` mixers.

    C, B, x and output projections take the teacher's Q, K, V and O weights;
    only the step-size MLP and A are freshly initialised. Everything else is
    copied verbatim.
    """
    ts = teacher.spec
    convert = sorted(set(int(i) for i in convert))
    for i in convert:
        if not 0 <= i < ts.n_layers:
            raise ConfigError(f"layer index {i} out of range for a {ts.n_layers}-layer teacher")
        if ts.layer_kinds[i] != "attention":
            raise ConfigError(f"layer {i} of the teacher is not an attention layer")
    kinds = ["ssm_v1" if i in convert else k for i, k in enumerate(ts.layer_kinds)]
    spec = ModelSpec.from_dict({**ts.to_dict(), "layer_kinds": kinds, "state_size": state_size or ts.state_size})
    t = teacher.arrays()
    arrays: dict[str, np.ndarray] = {}
    _copy_shared(teacher, arrays, [i for i in range(ts.n_layers) if i not in convert], mixers=True)
    rng = np.random.default_rng([seed, 1])
    for i in convert:
        pre = f"layers.{i}."
        for k in ("norm1", "norm2", "mlp.w_gate", "mlp.w_up", "mlp.w_down"):
            arrays[pre + k] = t[pre + k].copy()
        for dst, src in (("w_c", "wq"), ("w_b", "wk"), ("w_x", "wv"), ("w_o", "wo")):
            arrays[f"{pre}mixer.{dst}"] = t[f"{pre}mixer.{src}"].copy()
        for k, v in SsmV1Mixer.new_params(spec, rng).items():
            arrays[f"{pre}mixer.{k}"] = v
    return Model.from_arrays(spec, arrays)


def hybrid_student(teacher: Model, n_attention: int, state_size: int | None = None, seed: int = 0) -> Model:
    keep = set(hybrid_attention_layers(teacher.spec.n_layers, n_attention))
    return init_hybrid_from_teacher(teacher, [i for i in range(teacher.spec.n_layers) if i not in keep], state_size, seed)


def pure_student(teacher: Model, seed: int = 0) -> Model:
    """All-``ssm_v2`` student with the teacher's embeddings and head.

    With state size equal to the head dim, each head's C/B/x/output
    projections start from the teacher's Q/K/V/O so the initial mixer is the
    unnormalised causal linear attention of the teacher's head. Norms and MLPs
    keep their fresh initialisation until hidden-state alignment copies them.
    """
    ts = teacher.spec
    spec = ModelSpec.from_dict({**ts.to_dict(), "layer_kinds": ["ssm_v2"] * ts.n_layers})
    arrays = Model.init(spec, seed).arrays()
    _copy_shared(teacher, arrays)
    if spec.state_size == spec.head_dim:
        t = teacher.arrays()
        for i in range(ts.n_layers):
            pre = f"layers.{i}.mixer."
            for dst, src in (("w_c", "wq"), ("w_b", "wk"), ("w_x", "wv"), ("w_o", "wo")):
                arrays[pre + dst] = t[pre + src].copy()
    return Model.from_arrays(spec, arrays)


def transfer_block_weights(teacher: Model, student: Model) -> None:
    """Copy every layer's norms and MLP weights from teacher to student (in place)."""
    for k, v in teacher.params.items():
        if k.startswith("layers.") and ".mixer." not in k:
            student.params[k].data = v.data.copy()


# ---------------------------------------------------------------------------
# stage losses


def head_group_pairing(spec: ModelSpec, n_teacher_heads: int) -> list[list[int]]:
    """Teacher heads each student mixer unit is aligned with.

    ``ssm_v2`` pairs head h with head h. ``ssm_v1`` pairs group g with the
    teacher heads whose channel span overlaps the group's channels.
    """
    d = spec.d_model
    hd = d // n_teacher_heads
    kinds = set(spec.layer_kinds) - {"attention"}
    if kinds == {"ssm_v2"} or kinds == set():
        if spec.n_heads != n_teacher_heads:
            raise ConfigError(f"{spec.n_heads} student heads cannot pair with {n_teacher_heads} teacher heads")
        return [[h] for h in range(n_teacher_heads)]
    n = spec.state_size
    if n % hd and hd % n:
        raise ConfigError(f"group width {n} and head width {hd} do not nest; pairing undefined")
    return [list(range(g * n // hd, max(g * n // hd + 1, (g + 1) * n // hd))) for g in range(d // n)]


def pair_targets(attn: Tensor | np.ndarray, pairing: list[list[int]]) -> np.ndarray:
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    return np.stack([a[:, hs].mean(axis=1) for hs in pairing], axis=1)


def matrix_distance(student_mixer: Tensor, target: np.ndarray) -> Tensor:
    """Squared Frobenius distance per (row, unit) matrix, averaged."""
    if student_mixer.shape != target.shape:
        raise DimensionError(f"mixer {student_mixer.shape} vs target {target.shape}")
    diff = student_mixer - target
    nb, units = diff.shape[:2]
    return tsum(diff * diff) / (nb * units)


def stage1_loss(student: Model, teacher: Model, layer: int, h_in: np.ndarray, resets=None) -> Tensor:
    """Mixer-matrix alignment for one layer given the teacher's input to it."""
    with no_grad():
        x = teacher.mixer_input(layer, Tensor(h_in))
        target = teacher.mixer_matrix(layer, x, resets)
    pairing = head_group_pairing(student.spec, teacher.spec.n_heads)
    m = student.mixer_matrix(layer, Tensor(x.data), resets)
    return matrix_distance(m, pair_targets(target, pairing))


def stage2_loss(student: Model, teacher: Model, layer: int, h_in: np.ndarray, resets=None, weights=None) -> Tensor:
    """Mean squared error between decoder-block outputs on the teacher's input."""
    with no_grad():
        want = teacher.block(layer, Tensor(h_in), resets).data
    got = student.block(layer, Tensor(h_in), resets)
    if got.shape != want.shape:
        raise DimensionError(f"block output {got.shape} vs teacher {want.shape}")
    diff = got - want
    per = (diff * diff).mean(axis=-1)
    if weights is None:
        return per.mean()
    return masked_mean(per, weights)


def kl_divergence(student_logits: Tensor, teacher_logits: np.ndarray, mask: np.ndarray, direction: str = "forward") -> Tensor:
    """Token-level KL over the vocabulary, averaged over unmasked positions.

    forward: KL(teacher || student); reverse: KL(student || teacher).
    """
    ls = log_softmax(student_logits, axis=-1)
    t = np.asarray(teacher_logits, dtype=np.float64)
    t = t - t.max(axis=-1, keepdims=True)
    lt = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    if direction == "forward":
        per = tsum(np.exp(lt) * (lt - ls), axis=-1)
    elif direction == "reverse":
        per = tsum(exp(ls) * (ls - lt), axis=-1)
    else:
        raise ConfigError(f"kl direction must be forward or reverse, got {direction!r}")
    return masked_mean(per, mask)


def stage3_loss(student: Model, teacher: Model, batch: Batch, direction: str) -> Tensor:
    with no_grad():
        t_logits = teacher.forward(batch.tokens, batch.positions, batch.resets).data
    s_logits = student.forward(batch.tokens, batch.positions, batch.resets)
    return kl_divergence(s_logits, t_logits, batch.mask, direction)


# ---------------------------------------------------------------------------
# pipelines


def plain_examples(problems: Sequence[Problem], template: PromptTemplate) -> list[Example]:
    return [Example(render_plain(p, template), 0) for p in problems]


def chat_examples(problems: Sequence[Problem], template: PromptTemplate) -> list[Example]:
    out = []
    for p in problems:
        r = render_chat(p, template, reference_cot(p, template))
        out.append(Example(r.ids, r.assistant_start))
    return out


def _teacher_inputs(teacher: Model, batch: Batch) -> list[np.ndarray]:
    with no_grad():
        _, hidden = teacher.forward(batch.tokens, batch.positions, batch.resets, return_hidden=True)
    return [h.data for h in hidden]


def _trainable(model: Model, names) -> dict[str, Tensor]:
    names = set(names)
    for k, v in model.params.items():
        v.requires_grad = k in names
    return {k: model.params[k] for k in names}


def _run_stage(cfg: StageConfig, student: Model, teacher: Model, examples, seed: int, index: int) -> TrainResult:
    spec = student.spec
    rng = np.random.default_rng([seed, index])
    batches = iterate_batches(examples, cfg.seq_len, cfg.batch_rows, cfg.mask_policy, rng)
    layers = range(spec.n_layers)
    if cfg.stage == "matrix_orientation":
        names = [k for k in student.params if ".mixer." in k]

        def loss_fn(b: Batch) -> Tensor:
            hs = _teacher_inputs(teacher, b)
            total = None
            for i in layers:
                li = stage1_loss(student, teacher, i, hs[i], b.resets)
                total = li if total is None else total + li
            return total

    elif cfg.stage == "hidden_alignment":
        names = [k for k in student.params if k.startswith("layers.") and not (cfg.freeze_mlp and (".mlp." in k or "norm" in k))]

        def loss_fn(b: Batch) -> Tensor:
            hs = _teacher_inputs(teacher, b)
            total = None
            for i in layers:
                li = stage2_loss(student, teacher, i, hs[i], b.resets, b.mask)
                total = li if total is None else total + li
            return total

    elif cfg.stage in ("e2e_kd", "hybrid_kd"):
        names = list(student.params)

        def loss_fn(b: Batch) -> Tensor:
            return stage3_loss(student, teacher, b, cfg.kl_direction)

    else:
        raise ConfigError(f"stage {cfg.stage!r} is not a distillation stage")
    params = _trainable(student, names)
    try:
        return train_loop(params, loss_fn, batches, cfg.tokens, cfg.lr, max_steps=cfg.max_steps, stage=cfg.stage)
    finally:
        for v in student.params.values():
            v.requires_grad = True


def check_stage_order(path: str, stages: Sequence[StageConfig]) -> None:
    names = [s.stage for s in stages]
    if path == "pure":
        bad = [n for n in names if n not in PURE_ORDER]
        if bad:
            raise ConfigError(f"pure path cannot run stage(s) {bad}")
        ranks = [PURE_ORDER.index(n) for n in names]
        if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
            raise ConfigError(f"pure-path stages must run in the order {' -> '.join(PURE_ORDER)}, got {' -> '.join(names)}")
    elif path == "hybrid":
        if names != ["hybrid_kd"]:
            raise ConfigError(f"hybrid path runs exactly one hybrid_kd stage, got {names}")
    else:
        raise ConfigError(f"unknown distillation path {path!r}")


def run_pipeline(
    path: str,
    teacher: Model,
    stages: Sequence[StageConfig],
    problems: Sequence[Problem],
    template: PromptTemplate,
    seed: int = 0,
    n_attention: int = 1,
    run_id: str = "run",
    hybrid_state_size: int | None = None,
) -> tuple[Model, RunManifest]:
    """Build and distil a student; the teacher is never modified."""
    check_stage_order(path, stages)
    t0 = time.perf_counter()
    before = params_digest(teacher)
    teacher.freeze()
    manifest = RunManifest(run_id, path, seed)
    if path == "pure":
        student = pure_student(teacher, seed)
    else:
        student = hybrid_student(teacher, n_attention, hybrid_state_size, seed)
    plain = chat = None
    for index, cfg in enumerate(stages):
        if cfg.stage == "hidden_alignment":
            transfer_block_weights(teacher, student)
        if cfg.stage in ("matrix_orientation", "hidden_alignment"):
            plain = plain or plain_examples(problems, template)
            examples = plain
        else:
            chat = chat or chat_examples(problems, template)
            examples = chat
        res = _run_stage(cfg, student, teacher, examples, seed, index)
        if params_digest(teacher) != before:
            raise ContractError(f"teacher parameters changed during {cfg.stage}")
        manifest.stages[cfg.stage] = StageRecord(res.tokens, res.steps, res.final_loss, cfg.mask_policy, cfg.lr)
        log.info("%s: %d steps, %d tokens, final loss %.5f", cfg.stage, res.steps, res.tokens, res.final_loss)
    manifest.wallclock_s = time.perf_counter() - t0
    return student, manifest


def run_sft(
    student: Model,
    problems: Sequence[Problem],
    template: PromptTemplate,
    epochs: int = 2,
    lr: float = DEFAULT_LR["sft"],
    batch_rows: int = 16,
    seq_len: int = 160,
    seed: int = 0,
) -> tuple[Model, TrainResult, list[float]]:
    """Next-token finetuning on assistant tokens for whole epochs.

    Returns the model, the training result and the loss of the first batch
    of each epoch.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if epochs == 0 or not problems:
        return student, TrainResult(0, 0, [], 0.0), []
    for v in student.params.values():
        v.requires_grad = True
    examples = chat_examples(problems, template)
    rng = np.random.default_rng([seed, 99])
    schedule: list[Batch] = []
    epoch_starts = []
    for _ in range(epochs):
        epoch_starts.append(len(schedule))
        order = rng.permutation(len(examples))
        packed = pack([examples[i] for i in order], seq_len, "assistant_only")
        schedule.extend(slice_batch(packed, s, batch_rows) for s in range(0, packed.tokens.shape[0], batch_rows))

    def loss_fn(b: Batch) -> Tensor:
        return cross_entropy(student.forward(b.tokens, b.positions, b.resets), b.targets, b.mask)

    res = train_loop(student.params, loss_fn, iter(schedule), 10**15, lr, max_steps=len(schedule), stage="sft")
    return student, res, [res.losses[i] for i in epoch_starts]
