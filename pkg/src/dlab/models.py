"""Teacher Transformer, SSM students and hybrids as one configurable stack.

A model is a :class:`ModelSpec` plus a flat ``name -> Tensor`` parameter
dict. Each layer is a pre-norm residual block ``h + mixer(norm(h))``
followed by ``h + mlp(norm(h))``; the mixer kind is chosen per layer from
``attention``, ``ssm_v1`` and ``ssm_v2``.

Two execution paths exist on purpose: :meth:`Model.forward` processes whole
sequences with autodiff tensors (training, prefill) and :meth:`Model.step`
advances a :class:`DecodeState` one token at a time with plain numpy.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ssm
from .checkpoint import load_arrays, save_arrays, save_json
from .errors import ConfigError, ContractError, InputError
from .tensor import (
    Tensor,
    log_softmax,
    masked_attention,
    matmul,
    no_grad,
    rmsnorm,
    silu,
    softmax,
    softplus,
    take_rows,
    tanh,
    where,
)

KINDS = ("attention", "ssm_v1", "ssm_v2")


@dataclass
class ModelSpec:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    layer_kinds: list[str] = field(default_factory=lambda: ["attention"] * 4)
    n_heads: int = 4
    state_size: int = 16
    max_seq_len: int = 1024
    mlp_hidden: int = 128
    rmsnorm_eps: float = 1e-6
    # experiment flag: scale C by delta in v1 layers
    discretize_c: bool = False

    def __post_init__(self):
        self.layer_kinds = list(self.layer_kinds)
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_groups(self) -> int:
        return self.d_model // self.state_size

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if len(self.layer_kinds) != self.n_layers:
            raise ConfigError(f"layer_kinds has {len(self.layer_kinds)} entries for {self.n_layers} layers")
        bad = [k for k in self.layer_kinds if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown layer kinds {bad}")
        if "ssm_v1" in self.layer_kinds and self.d_model % self.state_size:
            raise ConfigError(f"d_model {self.d_model} not divisible by state_size {self.state_size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelSpec keys {sorted(unknown)}")
        return cls(**d)


def hybrid_attention_layers(n_layers: int, n_attention: int) -> list[int]:
    """Evenly spaced attention positions, e.g. 4 of 16 -> [0, 5, 10, 15]."""
    if n_attention <= 0:
        return []
    if n_attention == 1:
        return [0]
    return sorted({round(i * (n_layers - 1) / (n_attention - 1)) for i in range(n_attention)})


# ---------------------------------------------------------------------------
# decode state


class AttentionCache:
    """Per-row key/value cache with independent lengths (ragged batch)."""

    def __init__(self, k: np.ndarray, v: np.ndarray, lengths: np.ndarray):
        self.k = k  # [B, H, cap, hd]
        self.v = v
        self.lengths = lengths  # valid entries per row

    @property
    def length(self) -> int:
        return int(self.lengths.max())

    def nbytes(self) -> int:
        b, h, _, hd = self.k.shape
        return int(2 * h * hd * 8 * self.lengths.sum())

    def reserve(self, capacity: int) -> None:
        """Grow storage to ``capacity`` positions so appends do not reallocate."""
        b, h, cap, hd = self.k.shape
        if capacity <= cap:
            return
        for name in ("k", "v"):
            old = getattr(self, name)
            grown = np.zeros((b, h, capacity, hd))
            grown[:, :, :cap] = old
            setattr(self, name, grown)

    def append(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        cap = self.k.shape[2]
        need = int(self.lengths.max()) + 1
        if need > cap:
            self.reserve(max(need, 2 * cap, 8))
        b = self.k.shape[0]
        rows = np.arange(b)
        self.k[rows, :, self.lengths] = k_t
        self.v[rows, :, self.lengths] = v_t
        self.lengths = self.lengths + 1

    def take(self, rows: np.ndarray) -> "AttentionCache":
        n = int(self.lengths[rows].max())
        return AttentionCache(self.k[rows, :, :n].copy(), self.v[rows, :, :n].copy(), self.lengths[rows].copy())

    @staticmethod
    def concat(caches: list["AttentionCache"]) -> "AttentionCache":
        n = max(c.length for c in caches)
        b0, h, _, hd = caches[0].k.shape

        def pad(a):
            out = np.zeros((a.shape[0], h, n, hd))
            m = min(n, a.shape[2])
            out[:, :, :m] = a[:, :, :m]
            return out

        return AttentionCache(
            np.concatenate([pad(c.k) for c in caches]),
            np.concatenate([pad(c.v) for c in caches]),
            np.concatenate([c.lengths for c in caches]),
        )


class RecurrentState:
    """Fixed-size SSM state: [B, D, N] for v1, [B, H, N, P] for v2."""

    def __init__(self, h: np.ndarray):
        self.h = h

    def nbytes(self) -> int:
        return int(self.h.nbytes)

    def reserve(self, capacity: int) -> None:
        pass  # constant size

    def take(self, rows):
        return RecurrentState(self.h[rows].copy())

    @staticmethod
    def concat(states):
        return RecurrentState(np.concatenate([s.h for s in states]))


class DecodeState:
    """Everything needed to continue generation: per-layer caches and the
    next position of every row."""

    def __init__(self, layers: list, positions: np.ndarray):
        self.layers = layers
        self.positions = np.asarray(positions, dtype=np.int64)

    @property
    def batch(self) -> int:
        return len(self.positions)

    def nbytes(self) -> int:
        return sum(s.nbytes() for s in self.layers)

    def reserve(self, capacity: int) -> None:
        for s in self.layers:
            s.reserve(capacity)

    def take(self, rows) -> "DecodeState":
        rows = np.asarray(rows)
        return DecodeState([s.take(rows) for s in self.layers], self.positions[rows].copy())

    def repeat(self, n: int) -> "DecodeState":
        """Replicate every row ``n`` times (row-major: r0, r0, ..., r1, ...)."""
        return self.take(np.repeat(np.arange(self.batch), n))

    @staticmethod
    def concat(states: list["DecodeState"]) -> "DecodeState":
        layers = []
        for per_layer in zip(*(s.layers for s in states)):
            layers.append(type(per_layer[0]).concat(list(per_layer)))
        return DecodeState(layers, np.concatenate([s.positions for s in states]))


def decode_state_bytes(spec: ModelSpec, batch: int, length: int) -> int:
    """Analytic DecodeState footprint for ``batch`` rows holding ``length`` tokens."""
    total = 0
    for kind in spec.layer_kinds:
        if kind == "attention":
            total += 2 * batch * length * spec.d_model * 8
        elif kind == "ssm_v1":
            total += batch * spec.d_model * spec.state_size * 8
        else:
            total += batch * spec.n_heads * spec.state_size * spec.head_dim * 8
    return total


# ---------------------------------------------------------------------------
# helpers


def _heads(t: Tensor, nh: int) -> Tensor:
    """[B, L, H*X] -> [B, H, L, X]"""
    b, seq, d = t.shape
    return t.reshape(b, seq, nh, d // nh).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, nh, seq, x = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, seq, nh * x)


def _np_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _np_silu(x):
    return x * _np_sigmoid(x)


def _np_rmsnorm(x, w, eps):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * w


def _np_softplus(x):
    return np.logaddexp(0.0, x)


def _log_sigmoid(t: Tensor) -> Tensor:
    return -softplus(-t)


# ---------------------------------------------------------------------------
# mixers


class AttentionMixer:
    kind = "attention"

    @staticmethod
    def init(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = spec.d_model
        s = d**-0.5
        so = s / math.sqrt(2 * spec.n_layers)
        return {
            "wq": rng.normal(0, s, (d, d)),
            "wk": rng.normal(0, s, (d, d)),
            "wv": rng.normal(0, s, (d, d)),
            "wo": rng.normal(0, so, (d, d)),
        }

    @staticmethod
    def _mask(seq, resets, nb):
        return ssm._causal_mask(seq, resets, nb)

    @classmethod
    def matrix(cls, spec, p, x, resets=None) -> Tensor:
        """Causal softmax attention matrix [B, H, L, L]."""
        nh = spec.n_heads
        q = _heads(matmul(x, p["wq"]), nh)
        k = _heads(matmul(x, p["wk"]), nh)
        scores = matmul(q, k.swapaxes(-1, -2)) * (spec.head_dim**-0.5)
        mask = cls._mask(x.shape[1], resets, x.shape[0])
        return softmax(where(mask, scores, -np.inf), axis=-1)

    @classmethod
    def forward(cls, spec, p, x, resets=None, capture=None):
        nh = spec.n_heads
        nb, seq = x.shape[:2]
        q = _heads(matmul(x, p["wq"]), nh)
        k = _heads(matmul(x, p["wk"]), nh)
        v = _heads(matmul(x, p["wv"]), nh)
        if capture is not None:
            capture.append(AttentionCache(k.data.copy(), v.data.copy(), np.full(nb, seq, dtype=np.int64)))
        y = masked_attention(q, k, v, cls._mask(seq, resets, nb), spec.head_dim**-0.5)
        return matmul(_merge_heads(y), p["wo"])

    @staticmethod
    def empty_state(spec, batch):
        shape = (batch, spec.n_heads, 0, spec.head_dim)
        return AttentionCache(np.zeros(shape), np.zeros(shape), np.zeros(batch, dtype=np.int64))

    @staticmethod
    def step(spec, p, x, cache: AttentionCache):
        nb = x.shape[0]
        nh, hd = spec.n_heads, spec.head_dim
        q = (x @ p["wq"]).reshape(nb, nh, hd)
        k = (x @ p["wk"]).reshape(nb, nh, hd)
        v = (x @ p["wv"]).reshape(nb, nh, hd)
        cache.append(k, v)
        n = cache.length
        keys = cache.k[:, :, :n]
        scores = np.matmul(keys, q[..., None])[..., 0] * hd**-0.5  # [B, H, n]
        if cache.lengths.min() != n:
            valid = np.arange(n)[None, :] < cache.lengths[:, None]
            scores = np.where(valid[:, None, :], scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        y = np.matmul(w[:, :, None, :], cache.v[:, :, :n])[:, :, 0]  # [B, H, hd]
        return y.reshape(nb, nh * hd) @ p["wo"]


class SsmV1Mixer:
    """Grouped selective-diagonal SSM with an input-dependent step size."""

    kind = "ssm_v1"

    @staticmethod
    def init(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d = spec.d_model
        s = d**-0.5
        so = s / math.sqrt(2 * spec.n_layers)
        return {
            "w_c": rng.normal(0, s, (d, d)),
            "w_b": rng.normal(0, s, (d, d)),
            "w_x": rng.normal(0, s, (d, d)),
            "w_o": rng.normal(0, so, (d, d)),
            **SsmV1Mixer.new_params(spec, rng),
        }

    @staticmethod
    def new_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Parameters with no attention counterpart: the step-size MLP and A."""
        d = spec.d_model
        hid = max(d // 4, 1)
        return {
            "dt_w1": rng.normal(0, d**-0.5, (d, hid)),
            "dt_b1": np.zeros(hid),
            # zero last layer: delta = softplus(0) = ln 2 at init
            "dt_w2": np.zeros((hid, d)),
            "dt_b2": np.zeros(d),
            # a = -softplus(a_raw) = -1
            "a_raw": np.full((d, spec.state_size), math.log(math.e - 1.0)),
        }

    @staticmethod
    def _projections(spec, p, x):
        nb, seq, d = x.shape
        n = spec.state_size
        xs = matmul(x, p["w_x"])
        bg = matmul(x, p["w_b"]).reshape(nb, seq, d // n, n)
        cg = matmul(x, p["w_c"]).reshape(nb, seq, d // n, n)
        hid = silu(matmul(xs, p["dt_w1"]) + p["dt_b1"])
        delta = softplus(matmul(hid, p["dt_w2"]) + p["dt_b2"])
        a = -softplus(p["a_raw"])
        return xs, delta, a, bg, cg

    @classmethod
    def forward(cls, spec, p, x, resets=None, capture=None):
        xs, delta, a, bg, cg = cls._projections(spec, p, x)
        if capture is not None:
            y, h = ssm.selective_scan_v1(xs, delta, a, bg, cg, resets, return_state=True)
            capture.append(RecurrentState(h))
        else:
            y = ssm.selective_scan_v1(xs, delta, a, bg, cg, resets)
        if spec.discretize_c:
            y = y * delta
        return matmul(y, p["w_o"])

    @classmethod
    def matrix(cls, spec, p, x, resets=None, reduce: str = "group") -> Tensor:
        """Materialised mixer: per channel [B, D, L, L] or group-averaged [B, G, L, L]."""
        xs, delta, a, bg, cg = cls._projections(spec, p, x)
        m = ssm.materialize_v1(delta, a, bg, cg, resets)
        if spec.discretize_c:
            m = m * delta.swapaxes(1, 2).reshape(*delta.shape[:1], delta.shape[2], delta.shape[1], 1)
        if reduce == "channel":
            return m
        return ssm.group_average(m, spec.state_size)

    @staticmethod
    def empty_state(spec, batch):
        return RecurrentState(np.zeros((batch, spec.d_model, spec.state_size)))

    @staticmethod
    def step(spec, p, x, state: RecurrentState):
        nb, d = x.shape
        n = spec.state_size
        xs = x @ p["w_x"]
        bg = (x @ p["w_b"]).reshape(nb, d // n, n)
        cg = (x @ p["w_c"]).reshape(nb, d // n, n)
        hid = _np_silu(xs @ p["dt_w1"] + p["dt_b1"])
        delta = _np_softplus(hid @ p["dt_w2"] + p["dt_b2"])
        a = -_np_softplus(p["a_raw"])
        state.h, y = ssm.ssm_v1_step(state.h, xs, bg, cg, delta, a)
        if spec.discretize_c:
            y = y * delta
        return y @ p["w_o"]


# v2 decay logits are squashed into (-cap, cap) so that sigmoid never rounds
# to exactly 0 or 1 in float64
DECAY_LOGIT_CAP = 20.0


class SsmV2Mixer:
    """Multi-head discrete-time SSM with a per-head scalar decay."""

    kind = "ssm_v2"

    @staticmethod
    def init(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d, nh, n = spec.d_model, spec.n_heads, spec.state_size
        s = d**-0.5
        so = s / math.sqrt(2 * spec.n_layers)
        return {
            "w_x": rng.normal(0, s, (d, d)),
            "w_b": rng.normal(0, s, (d, nh * n)),
            "w_c": rng.normal(0, s, (d, nh * n)),
            "w_o": rng.normal(0, so, (d, d)),
            # input-dependent part of the decay logit starts at zero
            "w_a": np.zeros((d, nh)),
            "decay_logit": np.full(nh, math.log(9.0)),  # alpha = 0.9
        }

    @staticmethod
    def _projections(spec, p, x):
        nb, seq, _ = x.shape
        nh, n = spec.n_heads, spec.state_size
        xs = matmul(x, p["w_x"]).reshape(nb, seq, nh, spec.head_dim)
        bh = matmul(x, p["w_b"]).reshape(nb, seq, nh, n)
        ch = matmul(x, p["w_c"]).reshape(nb, seq, nh, n)
        z = matmul(x, p["w_a"]) + p["decay_logit"]
        loga = _log_sigmoid(tanh(z * (1.0 / DECAY_LOGIT_CAP)) * DECAY_LOGIT_CAP)  # [B, L, H]
        return xs, loga, bh, ch

    @classmethod
    def matrix(cls, spec, p, x, resets=None) -> Tensor:
        _, loga, bh, ch = cls._projections(spec, p, x)
        return ssm.materialize_v2(loga, bh, ch, resets)

    @classmethod
    def forward(cls, spec, p, x, resets=None, capture=None):
        xs, loga, bh, ch = cls._projections(spec, p, x)
        m = ssm.materialize_v2(loga, bh, ch, resets)  # [B, H, L, L]
        y = matmul(m, xs.transpose(0, 2, 1, 3))  # [B, H, L, P]
        if capture is not None:
            capture.append(RecurrentState(ssm.v2_final_state(xs.data, loga.data, bh.data, resets)))
        return matmul(_merge_heads(y), p["w_o"])

    @staticmethod
    def empty_state(spec, batch):
        return RecurrentState(np.zeros((batch, spec.n_heads, spec.state_size, spec.head_dim)))

    @staticmethod
    def step(spec, p, x, state: RecurrentState):
        nb = x.shape[0]
        nh, n, hd = spec.n_heads, spec.state_size, spec.head_dim
        xs = (x @ p["w_x"]).reshape(nb, nh, hd)
        bh = (x @ p["w_b"]).reshape(nb, nh, n)
        ch = (x @ p["w_c"]).reshape(nb, nh, n)
        z = x @ p["w_a"] + p["decay_logit"]
        alpha = _np_sigmoid(np.tanh(z / DECAY_LOGIT_CAP) * DECAY_LOGIT_CAP)
        state.h, y = ssm.ssm_v2_step(state.h, xs, bh, ch, alpha)
        return y.reshape(nb, nh * hd) @ p["w_o"]


MIXERS = {m.kind: m for m in (AttentionMixer, SsmV1Mixer, SsmV2Mixer)}


# ---------------------------------------------------------------------------
# model


def _mlp_init(spec, rng):
    d, hdn = spec.d_model, spec.mlp_hidden
    return {
        "w_gate": rng.normal(0, d**-0.5, (d, hdn)),
        "w_up": rng.normal(0, d**-0.5, (d, hdn)),
        "w_down": rng.normal(0, hdn**-0.5 / math.sqrt(2 * spec.n_layers), (hdn, d)),
    }


class Model:
    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    # -- construction ---------------------------------------------------
    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        d = spec.d_model
        arrays: dict[str, np.ndarray] = {
            "embed": rng.normal(0, 1.0, (spec.vocab_size, d)),
            "pos": rng.normal(0, 0.1, (spec.max_seq_len, d)),
        }
        for i, kind in enumerate(spec.layer_kinds):
            arrays[f"layers.{i}.norm1"] = np.ones(d)
            for k, v in MIXERS[kind].init(spec, rng).items():
                arrays[f"layers.{i}.mixer.{k}"] = v
            arrays[f"layers.{i}.norm2"] = np.ones(d)
            for k, v in _mlp_init(spec, rng).items():
                arrays[f"layers.{i}.mlp.{k}"] = v
        arrays["norm_f"] = np.ones(d)
        arrays["lm_head"] = rng.normal(0, d**-0.5, (d, spec.vocab_size))
        return cls.from_arrays(spec, arrays)

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: dict[str, np.ndarray], trainable: bool = True) -> "Model":
        return cls(spec, {k: Tensor(np.array(v, dtype=np.float64), requires_grad=trainable) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self, trainable: bool = True) -> "Model":
        return Model.from_arrays(ModelSpec.from_dict(self.spec.to_dict()), self.arrays(), trainable)

    def num_params(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def layer_params(self, i: int, part: str | None = None) -> dict[str, Tensor]:
        pre = f"layers.{i}." + (f"{part}." if part else "")
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def freeze(self) -> "Model":
        for v in self.params.values():
            v.requires_grad = False
        return self

    # -- persistence ----------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_arrays(path, self.arrays())
        save_json(path.with_suffix(".json"), self.spec.to_dict())

    @classmethod
    def load(cls, path: str | Path, trainable: bool = False) -> "Model":
        path = Path(path)
        spec = ModelSpec.from_dict(json.loads(path.with_suffix(".json").read_text()))
        return cls.from_arrays(spec, load_arrays(path), trainable)

    # -- full-sequence path --------------------------------------------
    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] > self.spec.max_seq_len:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.spec.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise InputError(f"token id out of range [0, {self.spec.vocab_size})")
        return tokens

    def embed(self, tokens, positions=None) -> Tensor:
        tokens = self._check_tokens(tokens)
        if positions is None:
            positions = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
        return take_rows(self.params["embed"], tokens) + take_rows(self.params["pos"], positions)

    def mixer_input(self, i: int, h: Tensor) -> Tensor:
        return rmsnorm(h, self.params[f"layers.{i}.norm1"], self.spec.rmsnorm_eps)

    def block(self, i: int, h: Tensor, resets=None, capture=None) -> Tensor:
        """Run decoder layer ``i`` on residual stream ``h`` [B, L, D]."""
        spec = self.spec
        mixer = MIXERS[spec.layer_kinds[i]]
        h = h + mixer.forward(spec, self.layer_params(i, "mixer"), self.mixer_input(i, h), resets, capture)
        m = self.layer_params(i, "mlp")
        z = rmsnorm(h, self.params[f"layers.{i}.norm2"], spec.rmsnorm_eps)
        return h + matmul(silu(matmul(z, m["w_gate"])) * matmul(z, m["w_up"]), m["w_down"])

    def head(self, h: Tensor) -> Tensor:
        return matmul(rmsnorm(h, self.params["norm_f"], self.spec.rmsnorm_eps), self.params["lm_head"])

    def forward(self, tokens, positions=None, resets=None, return_hidden: bool = False):
        """Logits [B, L, vocab]. ``return_hidden`` also yields every layer's input."""
        h = self.embed(tokens, positions)
        hidden = [h]
        for i in range(self.spec.n_layers):
            h = self.block(i, h, resets)
            hidden.append(h)
        logits = self.head(h)
        return (logits, hidden) if return_hidden else logits

    __call__ = forward

    def mixer_matrix(self, i: int, x: Tensor, resets=None) -> Tensor:
        """Token-mixing matrix of layer ``i`` given its normalised input."""
        mixer = MIXERS[self.spec.layer_kinds[i]]
        return mixer.matrix(self.spec, self.layer_params(i, "mixer"), x, resets)

    # -- incremental path ----------------------------------------------
    def empty_state(self, batch: int) -> DecodeState:
        layers = [MIXERS[k].empty_state(self.spec, batch) for k in self.spec.layer_kinds]
        return DecodeState(layers, np.zeros(batch, dtype=np.int64))

    def prefill(self, tokens) -> tuple[np.ndarray, DecodeState]:
        """Process equal-length prompts [B, L]; return last-position logits and the state."""
        tokens = self._check_tokens(tokens)
        capture: list = []
        with no_grad():
            h = self.embed(tokens)
            for i in range(self.spec.n_layers):
                h = self.block(i, h, capture=capture)
            logits = self.head(h[:, -1:]).data[:, 0]
        return logits, DecodeState(capture, np.full(tokens.shape[0], tokens.shape[1], dtype=np.int64))

    def step(self, state: DecodeState, token_ids) -> np.ndarray:
        """Feed one token per row, mutate ``state`` in place, return logits [B, vocab]."""
        spec = self.spec
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != state.batch or len(state.layers) != spec.n_layers:
            raise ContractError(f"state holds {state.batch} rows, got {ids.shape[0]} tokens")
        if ids.min() < 0 or ids.max() >= spec.vocab_size:
            raise InputError(f"token id out of range [0, {spec.vocab_size})")
        if state.positions.max() >= spec.max_seq_len:
            raise ContractError("decode position exceeds max_seq_len")
        prm, layers = self._numpy_params()
        h = prm["embed"][ids] + prm["pos"][state.positions]
        eps = spec.rmsnorm_eps
        for i, kind in enumerate(spec.layer_kinds):
            lp = layers[i]
            x = _np_rmsnorm(h, lp["norm1"], eps)
            h = h + MIXERS[kind].step(spec, lp["mixer"], x, state.layers[i])
            z = _np_rmsnorm(h, lp["norm2"], eps)
            h = h + (_np_silu(z @ lp["mlp"]["w_gate"]) * (z @ lp["mlp"]["w_up"])) @ lp["mlp"]["w_down"]
        state.positions = state.positions + 1
        return _np_rmsnorm(h, prm["norm_f"], eps) @ prm["lm_head"]

    def _numpy_params(self):
        # keyed on array identity so optimizers that rebind .data invalidate it
        key = tuple(id(v.data) for v in self.params.values())
        cached = getattr(self, "_np_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1], cached[2]
        prm = {k: v.data for k, v in self.params.items()}
        layers = []
        for i in range(self.spec.n_layers):
            pre = f"layers.{i}."
            lp: dict = {"mixer": {}, "mlp": {}}
            for k, v in prm.items():
                if k.startswith(pre):
                    rest = k[len(pre):]
                    part, _, name = rest.partition(".")
                    if name:
                        lp[part][name] = v
                    else:
                        lp[rest] = v
            layers.append(lp)
        self._np_cache = (key, prm, layers)
        return prm, layers

    def decode_step(self, state: DecodeState, token_ids) -> tuple[np.ndarray, DecodeState]:
        logits = self.step(state, token_ids)
        return logits, state


def token_log_probs(logits: Tensor) -> Tensor:
    return log_softmax(logits, axis=-1)
