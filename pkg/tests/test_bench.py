import json

import pytest
from conftest import tiny_spec

from dlab.bench import (
    BenchConfig,
    BenchRow,
    ThroughputProfile,
    format_speedup_table,
    run_bench,
    speedup_table,
)
from dlab.errors import ConfigError, ContractError, DataError
from dlab.models import Model, decode_state_bytes
from dlab.scaling import time_for_k

SMALL = dict(prompt_len=8, gen_len=8, batch_sizes=(1, 4), repetitions=3, warmup=1)


@pytest.fixture(scope="module")
def teacher():
    return Model.init(tiny_spec(("attention", "attention"), max_seq_len=1024), seed=0)


@pytest.fixture(scope="module")
def ssm():
    return Model.init(tiny_spec(("ssm_v2", "ssm_v2"), max_seq_len=1024), seed=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(repetitions=2)
    with pytest.raises(ConfigError):
        BenchConfig(warmup=0)
    with pytest.raises(ConfigError):
        BenchConfig(memory_cap_bytes=0)
    assert BenchConfig(batch_sizes=(4, 1)).batch_sizes == (1, 4)


def test_gen_len_must_fit(teacher):
    with pytest.raises(ConfigError):
        run_bench(teacher, BenchConfig(prompt_len=600, gen_len=512))


def test_state_accounting_laws(teacher, ssm):
    for b in (1, 64):
        assert decode_state_bytes(ssm.spec, b, 513) == decode_state_bytes(ssm.spec, b, 1024)
        # the attention cache grows linearly with the tokens it holds
        ratio = decode_state_bytes(teacher.spec, b, 1024) / decode_state_bytes(teacher.spec, b, 513)
        assert ratio == pytest.approx(1024 / 513, rel=1e-12)


def test_cap_one_byte_short_flags_only_attention(teacher, ssm):
    cfg = BenchConfig(**SMALL)
    need = decode_state_bytes(teacher.spec, 4, 16)
    t = run_bench(teacher, cfg, "teacher", memory_cap=need - 1)
    s = run_bench(ssm, cfg, "ssm", memory_cap=need - 1)
    assert t.row(4).oom and t.row(4).seconds_median is None and t.row(4).state_bytes == need
    assert not t.row(1).oom
    assert not s.row(4).oom and s.row(4).seconds_median > 0


def test_profile_rows_and_throughput(ssm):
    prof = run_bench(ssm, BenchConfig(**SMALL), "ssm")
    for r in prof.rows:
        assert r.tokens_per_s == pytest.approx(r.batch * 8 / r.seconds_median)
        assert r.step_s_first > 0 and r.step_s_last > 0
    # time_for_k reproduces the profile's own single-batch timing at k = batch
    assert time_for_k(prof, 4) == prof.row(4).seconds_median
    assert time_for_k(prof, 1) == prof.row(1).seconds_median


def test_speedup_table(teacher, ssm):
    cfg = BenchConfig(**SMALL)
    t = run_bench(teacher, cfg, "teacher", memory_cap=decode_state_bytes(teacher.spec, 4, 16) - 1)
    s = run_bench(ssm, cfg, "ssm")
    rows = speedup_table(s, t)
    assert [r.batch for r in rows] == [1, 4]
    assert rows[1].ratio == "teacher-OOM" and rows[1].student_s == s.row(4).seconds_median
    assert "teacher-OOM" in format_speedup_table(rows)
    self_rows = speedup_table(s, s)
    assert all(r.ratio == 1.0 for r in self_rows)
    other = ThroughputProfile("x", 16, 8, s.rows)
    with pytest.raises(ContractError):
        speedup_table(other, t)


def test_profile_json_round_trip(tmp_path):
    prof = ThroughputProfile("m", 512, 512, [BenchRow(256, 29.4, 256 * 512 / 29.4, 10, False), BenchRow(512, None, None, 20, True)], 15)
    path = tmp_path / "p.json"
    prof.save(path)
    d = json.loads(path.read_text())
    assert d["version"] == 1 and set(d["rows"][0]) >= {"batch", "seconds_median", "tokens_per_s", "state_bytes", "oom"}
    assert ThroughputProfile.load(path) == prof
    assert time_for_k(prof, 512) == pytest.approx(58.8, abs=1e-12)
    d["version"] = 2
    path.write_text(json.dumps(d))
    with pytest.raises(DataError, match="re-run"):
        ThroughputProfile.load(path)
    with pytest.raises(DataError):
        ThroughputProfile.load(tmp_path / "missing.json")
