import numpy as np
import pytest
from conftest import tiny_spec
from hypothesis import given
from hypothesis import strategies as st

from dlab.errors import ContractError, NumericError
from dlab.models import Model
from dlab.optim import BETAS, WEIGHT_DECAY, AdamW, clip_grad_norm, wsd_lr
from dlab.tensor import Tensor
from dlab.training import Example, cross_entropy, iterate_batches, pack, train_loop


def test_wsd_examples():
    assert wsd_lr(0, 1000, 1e-3) == 0.0
    assert wsd_lr(500, 1000, 1e-3) == 1e-3
    assert wsd_lr(950, 1000, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    assert wsd_lr(1000, 1000, 1e-4) <= 1e-6
    with pytest.raises(ContractError):
        wsd_lr(1001, 1000, 1e-4)


@given(total=st.integers(10, 5000), peak=st.floats(1e-6, 1.0))
def test_wsd_shape(total, peak):
    lrs = np.array([wsd_lr(s, total, peak) for s in range(total + 1)])
    assert lrs[0] == 0.0 and lrs.max() == pytest.approx(peak)
    assert np.all(lrs >= 0) and np.all(lrs <= peak * (1 + 1e-12))
    warm, decay = int(0.1 * total), int(np.ceil(0.9 * total))
    assert np.all(np.diff(lrs[: warm + 1]) >= 0)
    assert np.all(lrs[int(np.ceil(0.1 * total)) : int(0.9 * total) + 1] == peak)
    assert np.all(np.diff(lrs[decay:]) <= 0)


def test_adamw_matches_hand_update():
    rng = np.random.default_rng(0)
    w0, g1, g2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    b0, gb = rng.normal(size=2), rng.normal(size=2)
    w, b = Tensor(w0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, lr=0.01)
    assert (opt.b1, opt.b2, opt.wd) == BETAS + (WEIGHT_DECAY,) == (0.9, 0.95, 0.1)

    # reference, written out step by step
    lr, b1, b2, eps = 0.01, 0.9, 0.95, 1e-8
    m = v = 0.0
    ref = w0.copy()
    for t, g in enumerate((g1, g2), start=1):
        w.grad, b.grad = g, gb
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref * (1 - lr * 0.1) - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert np.allclose(w.data, ref, atol=1e-15)
    # vectors are not decayed
    mb = vb = 0.0
    refb = b0.copy()
    for t in (1, 2):
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        refb = refb - lr * (mb / (1 - b1**t)) / (np.sqrt(vb / (1 - b2**t)) + eps)
    assert np.allclose(b.data, refb, atol=1e-15)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"a": a}, 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.8])


def test_pack_layout_and_masks():
    docs = [Example([1, 2, 3, 4], 2), Example([5, 6, 7], 1), Example([8, 9], 1)]
    b = pack(docs, seq_len=8, policy="assistant_only")
    assert b.tokens.shape == (1, 8)
    assert b.tokens[0].tolist() == [1, 2, 3, 4, 5, 6, 7, 8]
    assert b.targets[0].tolist() == [2, 3, 4, 5, 6, 7, 8, 9]
    assert b.positions[0].tolist() == [0, 1, 2, 3, 0, 1, 2, 0]
    assert b.resets[0].tolist() == [True, False, False, False, True, False, False, True]
    # targets 3, 4 | 6, 7 | 9 count; a document's first token (5, 8) never does
    assert b.mask[0].tolist() == [0, 1, 1, 0, 1, 1, 0, 1]
    every = pack(docs, seq_len=8, policy="all_tokens")
    assert every.mask[0].tolist() == [1, 1, 1, 0, 1, 1, 0, 1]


def test_pack_errors():
    with pytest.raises(ContractError):
        pack([Example([1] * 20)], seq_len=8)
    with pytest.raises(ContractError):
        pack([Example([1, 2])], seq_len=8, policy="sometimes")


@given(seed=st.integers(0, 2**32 - 1))
def test_assistant_only_ignores_prompt_targets(seed):
    rng = np.random.default_rng(seed)
    docs = [Example(rng.integers(5, 50, size=int(rng.integers(3, 12))).tolist(), 0) for _ in range(4)]
    docs = [Example(d.ids, int(rng.integers(1, len(d.ids)))) for d in docs]
    b = pack(docs, seq_len=48, policy="assistant_only")
    logits = Tensor(rng.normal(size=b.tokens.shape + (60,)))
    base = cross_entropy(logits, b.targets, b.mask).item()
    perturbed = b.targets.copy()
    prompt = b.mask == 0
    perturbed[prompt] = rng.integers(0, 60, size=int(prompt.sum()))
    assert cross_entropy(logits, perturbed, b.mask).item() == base


@pytest.mark.parametrize("kinds", [("attention",), ("ssm_v1",), ("ssm_v2",)])
def test_packed_documents_do_not_see_each_other(kinds):
    model = Model.init(tiny_spec(kinds), seed=3)
    rng = np.random.default_rng(1)
    a, c = rng.integers(5, 60, size=7).tolist(), rng.integers(5, 60, size=6).tolist()
    b = pack([Example(a), Example(c)], seq_len=12)
    packed = model.forward(b.tokens, b.positions, b.resets).data
    alone = model.forward(np.array([c[:-1]])).data
    assert np.abs(packed[0, 7:12] - alone[0]).max() < 1e-10


def test_iterate_batches_is_seeded():
    docs = [Example(list(range(1, n))) for n in range(3, 18)]
    first = [next(iterate_batches(docs, 16, 2, "all_tokens", np.random.default_rng(4))).tokens for _ in range(2)]
    assert np.array_equal(*first)


def test_train_loop_learns_and_guards():
    w = Tensor(5.0, requires_grad=True)
    batch = pack([Example([1, 2, 3])], seq_len=4)

    def loss_fn(_):
        return w * w

    res = train_loop({"w": w}, loss_fn, iter(lambda: batch, None), token_budget=200, peak_lr=0.5, log_every=0)
    assert res.steps == 100 and res.final_loss < 1.0
    assert train_loop({"w": w}, loss_fn, iter(lambda: batch, None), 0, 0.1).steps == 0

    def bad(_):
        return w * np.nan

    with pytest.raises(NumericError, match="step 0"):
        train_loop({"w": w}, bad, iter(lambda: batch, None), 10, 0.1, stage="boom")
