"""State-space mixing primitives.

Two recurrences live here:

* grouped selective-diagonal ("v1"): every channel ``d`` keeps its own state
  ``h_d`` of size ``N`` and shares input/output vectors with the other
  channels of its group ``d // N``::

      h_t[d] = exp(delta_t[d] * a[d]) * h_{t-1}[d] + delta_t[d] * x_t[d] * B_t[g(d)]
      y_t[d] = C_t[g(d)] . h_t[d]

* multi-head scalar decay ("v2"): every head keeps a matrix state ``S``::

      S_t = alpha_t * S_{t-1} + B_t x_t^T
      y_t = C_t^T S_t

Each has a step function (numpy, used for decoding), a differentiable
full-sequence form used in training, and a materialised L x L mixer.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, as_tensor, exp, make_op, matmul, where

# ---------------------------------------------------------------------------
# v1: grouped selective-diagonal recurrence


def _expand_groups(bg: np.ndarray, state: int) -> np.ndarray:
    """[..., G, N] -> [..., G*state, N] by repeating each group over its channels."""
    return np.repeat(bg, state, axis=-2)


def _reduce_groups(gc: np.ndarray, state: int) -> np.ndarray:
    """Adjoint of :func:`_expand_groups`."""
    *lead, d, n = gc.shape
    return gc.reshape(*lead, d // state, state, n).sum(axis=-2)


def ssm_v1_step(h_prev, x_t, b_t, c_t, delta_t, a):
    """One recurrence step for a batch of channels.

    Shapes: ``h_prev`` [..., D, N], ``x_t``/``delta_t`` [..., D],
    ``b_t``/``c_t`` [..., G, N] with ``G * N == D``, ``a`` [D, N].
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.isnan(delta_t).any():
        raise NumericError("NaN in delta")
    if np.any(delta_t < 0):
        raise ContractError("delta must be nonnegative")
    n = a.shape[-1]
    decay = np.exp(delta_t[..., None] * a)
    bc = _expand_groups(np.asarray(b_t), n)
    cc = _expand_groups(np.asarray(c_t), n)
    h = decay * h_prev + (delta_t * x_t)[..., None] * bc
    y = (cc * h).sum(axis=-1)
    return h, y


def selective_scan_v1(x, delta, a, bg, cg, resets: np.ndarray | None = None, return_state: bool = False):
    """Differentiable full-sequence v1 scan.

    ``x``, ``delta``: [B, L, D]; ``a``: [D, N]; ``bg``, ``cg``: [B, L, G, N].
    ``resets`` is an optional boolean [B, L]; ``True`` at position ``t`` zeroes
    the carried state before ``t`` is absorbed (document boundary).
    Returns ``y`` [B, L, D], plus the final state [B, D, N] when asked.
    """
    x, delta, a, bg, cg = (as_tensor(t) for t in (x, delta, a, bg, cg))
    xd, dd, ad = x.data, delta.data, a.data
    if np.isnan(dd).any():
        raise NumericError("NaN in delta")
    nb, seq, d = xd.shape
    n = ad.shape[-1]
    bc = _expand_groups(bg.data, n)
    cc = _expand_groups(cg.data, n)
    decay = np.exp(dd[..., None] * ad)  # [B, L, D, N]
    carry = decay.copy()
    if resets is not None:
        carry[np.asarray(resets, dtype=bool)] = 0.0
    dx = dd * xd
    u = dx[..., None] * bc
    hs = np.empty_like(u)
    h = np.zeros((nb, d, n))
    for t in range(seq):
        h = carry[:, t] * h + u[:, t]
        hs[:, t] = h
    y = (cc * hs).sum(axis=-1)

    def bw(gy):
        gcc = gy[..., None] * hs
        gh = np.zeros((nb, d, n))
        ghs = np.empty_like(hs)
        for t in range(seq - 1, -1, -1):
            gh = gy[:, t, :, None] * cc[:, t] + gh
            ghs[:, t] = gh
            gh = gh * carry[:, t]
        h_prev = np.concatenate([np.zeros((nb, 1, d, n)), hs[:, :-1]], axis=1)
        gcarry = ghs * h_prev
        if resets is not None:
            gcarry[np.asarray(resets, dtype=bool)] = 0.0
        gexp = gcarry * decay  # d/d(delta*a)
        gdx = (ghs * bc).sum(axis=-1)
        gbc = ghs * dx[..., None]
        gdelta = (gexp * ad).sum(axis=-1) + gdx * xd
        ga = (gexp * dd[..., None]).sum(axis=(0, 1))
        gx = gdx * dd
        return gx, gdelta, ga, _reduce_groups(gbc, n), _reduce_groups(gcc, n)

    out = make_op(y, (x, delta, a, bg, cg), bw)
    if return_state:
        return out, hs[:, -1].copy()
    return out


def ssm_v1_reference_scan(x, delta, a, bg, cg):
    """Step-by-step numpy scan built from :func:`ssm_v1_step` (test oracle)."""
    nb, seq, d = x.shape
    h = np.zeros((nb, d, a.shape[-1]))
    ys = []
    for t in range(seq):
        h, y = ssm_v1_step(h, x[:, t], bg[:, t], cg[:, t], delta[:, t], a)
        ys.append(y)
    return np.stack(ys, axis=1)


def _causal_mask(seq: int, resets: np.ndarray | None, nb: int) -> np.ndarray:
    """Boolean [B, 1, L, L] (or [1, 1, L, L]) mask of allowed (t, s) pairs."""
    lower = np.tril(np.ones((seq, seq), dtype=bool))
    if resets is None:
        return lower[None, None]
    seg = np.cumsum(np.asarray(resets, dtype=np.int64), axis=-1)  # [B, L]
    same = seg[:, :, None] == seg[:, None, :]
    return (lower[None] & same)[:, None]


def _segment_sums(loga: Tensor) -> Tensor:
    """[B, K, L] per-step log decays -> [B, K, L, L] with entry (t, s) = sum_{r=s+1..t}."""
    seq = loga.shape[-1]
    upper = np.triu(np.ones((seq, seq)))  # upper[r, t] = 1 iff r <= t
    cum = matmul(loga.reshape(*loga.shape[:-1], 1, seq), Tensor(upper))  # [B, K, 1, L]
    cum_t = cum.swapaxes(-1, -2)  # [B, K, L, 1]
    return cum_t - cum


def materialize_v1(delta, a, bg, cg, resets: np.ndarray | None = None) -> Tensor:
    """Per-channel mixer [B, D, L, L] such that ``y[:, :, d] = M[:, d] @ x[:, :, d]``."""
    delta, a, bg, cg = (as_tensor(t) for t in (delta, a, bg, cg))
    nb, seq, d = delta.shape
    n = a.shape[-1]
    g = d // n
    dt = delta.swapaxes(1, 2)  # [B, D, L]
    seg = _segment_sums(dt)  # [B, D, L, L]
    mask = _causal_mask(seq, resets, nb)[:, :, None]  # [., 1, 1, L, L]
    expo = seg.reshape(nb, d, 1, seq, seq) * a.reshape(1, d, n, 1, 1)
    decay = exp(where(mask, expo, -np.inf))  # [B, D, N, L, L]
    # C_t[g, n] * B_s[g, n] per group: [B, G, N, L, L]
    cgt = cg.transpose(0, 2, 3, 1).reshape(nb, g, n, seq, 1)
    bgt = bg.transpose(0, 2, 3, 1).reshape(nb, g, n, 1, seq)
    cb = cgt * bgt
    decay = decay.reshape(nb, g, n, n, seq, seq)  # channels grouped: [B, G, chan, N, L, L]
    m = (decay * cb.reshape(nb, g, 1, n, seq, seq)).sum(axis=3)  # [B, G, chan, L, L]
    m = m.reshape(nb, d, seq, seq)
    return m * dt.reshape(nb, d, 1, seq)


def group_average(mixer: Tensor, state: int) -> Tensor:
    """Average per-channel mixers [B, D, L, L] over each group -> [B, G, L, L]."""
    nb, d, seq, _ = mixer.shape
    return mixer.reshape(nb, d // state, state, seq, seq).mean(axis=2)


# ---------------------------------------------------------------------------
# v2: multi-head scalar-decay recurrence


def ssm_v2_step(s_prev, x_t, b_t, c_t, alpha):
    """One step per head. ``s_prev`` [..., H, N, P], ``x_t`` [..., H, P],
    ``b_t``/``c_t`` [..., H, N], ``alpha`` [..., H] strictly inside (0, 1)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0) or np.isnan(alpha).any():
        raise ContractError("v2 decay must lie strictly inside (0, 1)")
    s = alpha[..., None, None] * s_prev + b_t[..., :, None] * x_t[..., None, :]
    y = np.einsum("...n,...np->...p", c_t, s)
    return s, y


def ssm_v2_reference_scan(x, loga, bh, ch):
    """Step-by-step numpy scan. ``x`` [B, L, H, P], ``loga`` [B, L, H],
    ``bh``/``ch`` [B, L, H, N]."""
    nb, seq, nh, p = x.shape
    s = np.zeros((nb, nh, bh.shape[-1], p))
    ys = []
    for t in range(seq):
        s, y = ssm_v2_step(s, x[:, t], bh[:, t], ch[:, t], np.exp(loga[:, t]))
        ys.append(y)
    return np.stack(ys, axis=1)


def materialize_v2(loga, bh, ch, resets: np.ndarray | None = None) -> Tensor:
    """Per-head mixer [B, H, L, L] with entry (t, s) = C_t . B_s * prod_{r=s+1..t} alpha_r."""
    loga, bh, ch = (as_tensor(t) for t in (loga, bh, ch))
    nb, seq, nh = loga.shape
    seg = _segment_sums(loga.swapaxes(1, 2))  # [B, H, L, L]
    mask = _causal_mask(seq, resets, nb)
    decay = exp(where(mask, seg, -np.inf))
    cb = matmul(ch.transpose(0, 2, 1, 3), bh.transpose(0, 2, 3, 1))  # [B, H, L, L]
    return cb * decay


def v2_final_state(x, loga, bh, resets: np.ndarray | None = None) -> np.ndarray:
    """Closed-form state after the last position, [B, H, N, P] (numpy)."""
    nb, seq, nh, p = x.shape
    cum = np.cumsum(loga, axis=1)  # [B, L, H]
    w = np.exp(cum[:, -1:] - cum)  # prod_{r=s+1..L-1} alpha_r
    if resets is not None:
        seg = np.cumsum(np.asarray(resets, dtype=np.int64), axis=1)
        w = w * (seg == seg[:, -1:])[..., None]
    return np.einsum("blh,blhn,blhp->bhnp", w, bh, x)
