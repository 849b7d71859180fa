"""Central finite-difference oracle and the registry of differentiable ops.

Each case builds fresh random inputs from a seed and returns
``(fn, inputs)``; ``fn(*tensors)`` must return a Tensor of any shape. The
checker contracts the output with a random weight so every output element
contributes to the scalar being differentiated.
"""

from __future__ import annotations

import numpy as np

from dlab import ssm
from dlab import tensor as T
from dlab.distill import kl_divergence, matrix_distance
from dlab.training import cross_entropy

STEP = 1e-5
TOL = 1e-4


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / scale)


def check_case(fn, inputs: list[np.ndarray], seed: int) -> float:
    """Worst relative error over all inputs of one op."""
    rng = np.random.default_rng(10_000 + seed)
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = rng.normal(size=out.shape)
    (out * w).sum().backward()

    worst = 0.0
    for i, t in enumerate(tensors):
        base = [x.copy() for x in inputs]

        def f():
            with T.no_grad():
                return float((fn(*[T.Tensor(b) for b in base]).data * w).sum())

        num = numeric_grad(f, base[i])
        ana = t.grad if t.grad is not None else np.zeros_like(inputs[i])
        worst = max(worst, rel_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# registry


def _n(rng, *shape):
    return rng.normal(size=shape)


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


_MASK = np.array([[True, False, True, True], [False, True, True, False], [True, True, False, True]])
_IDS = np.array([[0, 3, 1, 2], [2, 2, 0, 1], [3, 0, 0, 1]])


def _causal(seq):
    return np.tril(np.ones((seq, seq), dtype=bool))[None, None]


def _kl(direction):
    def case(rng):
        mask = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
        teacher = rng.normal(size=(2, 3, 5))
        return (lambda s: kl_divergence(s, teacher, mask, direction)), [_n(rng, 2, 3, 5)]

    return case


def _v1_scan(rng):
    b, seq, d, n = 2, 5, 4, 2
    resets = np.zeros((b, seq), dtype=bool)
    resets[1, 3] = True
    inputs = [_n(rng, b, seq, d), _pos(rng, b, seq, d) * 0.5, -_pos(rng, d, n), _n(rng, b, seq, d // n, n), _n(rng, b, seq, d // n, n)]
    return (lambda x, dl, a, bg, cg: ssm.selective_scan_v1(x, dl, a, bg, cg, resets)), inputs


def _v1_matrix(rng):
    b, seq, d, n = 1, 4, 4, 2
    inputs = [_pos(rng, b, seq, d) * 0.5, -_pos(rng, d, n), _n(rng, b, seq, d // n, n), _n(rng, b, seq, d // n, n)]
    return (lambda dl, a, bg, cg: ssm.group_average(ssm.materialize_v1(dl, a, bg, cg), n)), inputs


def _v2_matrix(rng):
    b, seq, h, n = 2, 4, 2, 3
    loga = np.log(rng.uniform(0.3, 0.95, size=(b, seq, h)))
    return ssm.materialize_v2, [loga, _n(rng, b, seq, h, n), _n(rng, b, seq, h, n)]


def _attention(rng):
    return (lambda q, k, v: T.masked_attention(q, k, v, _causal(4), 0.5)), [_n(rng, 2, 2, 4, 3) for _ in range(3)]


def _distance(rng):
    target = rng.normal(size=(2, 2, 3, 3))
    return (lambda m: matrix_distance(m, target)), [_n(rng, 2, 2, 3, 3)]


CASES = {
    "add": lambda r: (T.add, [_n(r, 3, 4), _n(r, 1, 4)]),
    "sub": lambda r: (T.sub, [_n(r, 3, 4), _n(r, 3, 1)]),
    "mul": lambda r: (T.mul, [_n(r, 3, 4), _n(r, 4)]),
    "div": lambda r: (T.div, [_n(r, 3, 4), _pos(r, 3, 4)]),
    "neg": lambda r: (T.neg, [_n(r, 3, 4)]),
    "power": lambda r: ((lambda a: T.power(a, 3.0)), [_n(r, 3, 4)]),
    "exp": lambda r: (T.exp, [_n(r, 3, 4)]),
    "log": lambda r: (T.log, [_pos(r, 3, 4)]),
    "sigmoid": lambda r: (T.sigmoid, [_n(r, 3, 4) * 3]),
    "softplus": lambda r: (T.softplus, [_n(r, 3, 4) * 3]),
    "silu": lambda r: (T.silu, [_n(r, 3, 4) * 2]),
    "relu": lambda r: (T.relu, [_away_from_zero(r, 3, 4)]),
    "tanh": lambda r: (T.tanh, [_n(r, 3, 4)]),
    "where": lambda r: ((lambda a, b: T.where(_MASK, a, b)), [_n(r, 3, 4), _n(r, 3, 4)]),
    "masked_fill": lambda r: ((lambda a: T.masked_fill(a, _MASK, -2.0)), [_n(r, 3, 4)]),
    "sum": lambda r: ((lambda a: T.tsum(a, axis=1, keepdims=True)), [_n(r, 3, 4)]),
    "sum_all": lambda r: (T.tsum, [_n(r, 3, 4)]),
    "mean": lambda r: ((lambda a: T.mean(a, axis=0)), [_n(r, 3, 4)]),
    "reshape": lambda r: ((lambda a: T.reshape(a, (4, 3))), [_n(r, 3, 4)]),
    "transpose": lambda r: ((lambda a: T.transpose(a, (1, 0))), [_n(r, 3, 4)]),
    "broadcast_to": lambda r: ((lambda a: T.broadcast_to(a, (2, 3, 4))), [_n(r, 3, 1)]),
    "getitem": lambda r: ((lambda a: T.getitem(a, (slice(0, 2), slice(1, None)))), [_n(r, 3, 4)]),
    "take_rows": lambda r: ((lambda t: T.take_rows(t, _IDS)), [_n(r, 4, 3)]),
    "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=1)), [_n(r, 3, 4), _n(r, 3, 2)]),
    "stack": lambda r: ((lambda a, b: T.stack([a, b], axis=0)), [_n(r, 3, 4), _n(r, 3, 4)]),
    "matmul": lambda r: (T.matmul, [_n(r, 3, 4), _n(r, 4, 2)]),
    "matmul_batched": lambda r: (T.matmul, [_n(r, 2, 3, 4), _n(r, 4, 2)]),
    "softmax": lambda r: ((lambda a: T.softmax(a, axis=-1)), [_n(r, 3, 4)]),
    "softmax_rows": lambda r: (T.softmax_rows, [_n(r, 3, 4)]),
    "log_softmax": lambda r: ((lambda a: T.log_softmax(a, axis=-1)), [_n(r, 3, 4)]),
    "rmsnorm": lambda r: ((lambda x, w: T.rmsnorm(x, w, 1e-6)), [_n(r, 3, 4), _n(r, 4)]),
    "gather_last": lambda r: ((lambda a: T.gather_last(a, _IDS[:, :3] % 4)), [_n(r, 3, 3, 4)]),
    "masked_attention": _attention,
    "selective_scan_v1": _v1_scan,
    "materialize_v1": _v1_matrix,
    "materialize_v2": _v2_matrix,
    "cross_entropy": lambda r: ((lambda s: cross_entropy(s, _IDS[:2, :3] % 5, np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]))), [_n(r, 2, 3, 5)]),
    "matrix_distance": _distance,
    "kl_forward": _kl("forward"),
    "kl_reverse": _kl("reverse"),
}


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    fn, inputs = CASES[name](rng)
    return check_case(fn, inputs, seed)
