"""Packing examples into fixed-length rows and the shared training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .optim import AdamW, clip_grad_norm, wsd_lr
from .tensor import Tensor, gather_last, log_softmax

log = logging.getLogger(__name__)


@dataclass
class Example:
    """One tokenised document; ``loss_from`` is the first token that counts
    as a target under the assistant-only policy."""

    ids: list[int]
    loss_from: int = 0


@dataclass
class Batch:
    tokens: np.ndarray  # [B, L] int
    targets: np.ndarray  # [B, L] int (next token)
    mask: np.ndarray  # [B, L] float, 1 where the target counts
    positions: np.ndarray  # [B, L] int, restart at each document
    resets: np.ndarray  # [B, L] bool, True at each document start

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def pack(examples: Sequence[Example], seq_len: int, policy: str = "all_tokens", pad_id: int = 0) -> Batch:
    """Greedy packing of whole documents into rows of ``seq_len`` tokens.

    Position ids restart and the recurrent state / attention window is cut at
    every document boundary, so packed documents never see each other.
    """
    if policy not in ("all_tokens", "assistant_only"):
        raise ContractError(f"unknown loss-mask policy {policy!r}")
    rows: list[list[tuple[Example, int]]] = [[]]
    used = 0
    for ex in examples:
        n = len(ex.ids)
        if n > seq_len + 1:
            raise ContractError(f"document of {n} tokens does not fit seq_len {seq_len}")
        if used + n > seq_len + 1 and rows[-1]:
            rows.append([])
            used = 0
        rows[-1].append((ex, used))
        used += n
    nb = len(rows)
    tokens = np.full((nb, seq_len + 1), pad_id, dtype=np.int64)
    mask = np.zeros((nb, seq_len + 1))
    positions = np.zeros((nb, seq_len + 1), dtype=np.int64)
    resets = np.zeros((nb, seq_len + 1), dtype=bool)
    for r, row in enumerate(rows):
        for ex, off in row:
            n = len(ex.ids)
            tokens[r, off : off + n] = ex.ids
            positions[r, off : off + n] = np.arange(n)
            resets[r, off] = True
            first = ex.loss_from if policy == "assistant_only" else 1
            # mask indexes the *target* token
            mask[r, off + max(first, 1) : off + n] = 1.0
    return Batch(
        tokens=tokens[:, :-1],
        targets=tokens[:, 1:],
        mask=mask[:, 1:],
        positions=positions[:, :-1],
        resets=resets[:, :-1],
    )


def masked_mean(per_token: Tensor, mask: np.ndarray) -> Tensor:
    total = float(mask.sum())
    if total == 0:
        raise ContractError("every position is masked: empty loss")
    return (per_token * mask).sum() / total


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    return masked_mean(-gather_last(logp, targets), mask)


def slice_batch(b: Batch, start: int, rows: int) -> Batch:
    sl = slice(start, start + rows)
    return Batch(b.tokens[sl], b.targets[sl], b.mask[sl], b.positions[sl], b.resets[sl])


def iterate_batches(examples: Sequence[Example], seq_len: int, batch_rows: int, policy: str, rng: np.random.Generator):
    """Endless stream of packed batches over shuffled epochs."""
    while True:
        order = rng.permutation(len(examples))
        packed = pack([examples[i] for i in order], seq_len, policy)
        for start in range(0, packed.tokens.shape[0], batch_rows):
            yield slice_batch(packed, start, batch_rows)


@dataclass
class TrainResult:
    steps: int
    tokens: int
    losses: list[float]
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_loop(
    params: dict[str, Tensor],
    loss_fn: Callable[[Batch], Tensor],
    batches,
    token_budget: int,
    peak_lr: float,
    *,
    max_steps: int | None = None,
    clip: float = 1.0,
    weight_decay: float = 0.1,
    stage: str = "train",
    log_every: int = 50,
) -> TrainResult:
    """Run AdamW + WSD until ``token_budget`` supervised tokens are consumed.

    The step count is fixed up front from the average tokens per batch of
    the first batch, so the schedule is known before training starts.
    """
    t0 = time.perf_counter()
    if token_budget <= 0:
        return TrainResult(0, 0, [], 0.0)
    first = next(batches)
    per_batch = max(first.n_tokens, 1)
    total = max(1, math.ceil(token_budget / per_batch))
    if max_steps is not None:
        total = min(total, max_steps)
    opt = AdamW(params, lr=peak_lr, weight_decay=weight_decay)
    losses: list[float] = []
    seen = 0
    batch = first
    for step in range(total):
        if step:
            batch = next(batches)
        opt.zero_grad()
        loss = loss_fn(batch)
        val = loss.item()
        if not math.isfinite(val):
            raise NumericError(f"{stage}: loss became {val} at step {step}")
        loss.backward()
        clip_grad_norm(opt.params, clip)
        # WSD is evaluated at step+1 so the first update is not a no-op
        opt.step(wsd_lr(step + 1, total, peak_lr))
        losses.append(val)
        seen += batch.n_tokens
        if log_every and (step % log_every == 0 or step == total - 1):
            log.info("%s step %d/%d loss %.4f", stage, step, total, val)
    return TrainResult(total, seen, losses, time.perf_counter() - t0)
