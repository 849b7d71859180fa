import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("dlab", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dlab")

from dlab.models import Model, ModelSpec  # noqa: E402
from dlab.tasks import TOKENIZER  # noqa: E402


def tiny_spec(kinds=("attention", "attention"), d_model=16, n_heads=2, state_size=4, **kw) -> ModelSpec:
    return ModelSpec(
        vocab_size=TOKENIZER.vocab_size,
        d_model=d_model,
        n_layers=len(kinds),
        layer_kinds=list(kinds),
        n_heads=n_heads,
        state_size=state_size,
        max_seq_len=kw.pop("max_seq_len", 256),
        mlp_hidden=kw.pop("mlp_hidden", 32),
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_teacher():
    return Model.init(tiny_spec(), seed=0)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'✅' if ok else '❌'} {n:>2}. {title}: {detail}")
