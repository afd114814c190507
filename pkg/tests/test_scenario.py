import json
import re
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptlab.errors import ContractError, ExperienceError
from cptlab.models import load_checkpoint, model_hash
from cptlab.scenario import (
    GAP,
    Reservoir,
    RunConfig,
    RunRecord,
    acc_metric,
    flat_tables,
    forgetting,
    run_scenario,
    run_traditional_cl,
)
from cptlab.core.rng import make_rng
from cptlab.streams import AccessLog, generate
from cptlab.training import Budget

from conftest import tiny_run_config

ACC_FIELDS = ("downstream_acc", "downstream_one_epoch", "fc_acc", "fc_one_epoch", "fc_linear")


@pytest.fixture(scope="module")
def mlm_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mlm")
    log = AccessLog()
    rec = run_scenario(tiny_run_config("mlm", n_experiences=3), log=log, out_dir=out)
    return rec, log, out


# -- structure --------------------------------------------------------------------
def test_empty_stream_has_baseline_only():
    rec = run_scenario(tiny_run_config("clf", n_experiences=0))
    assert rec.experiences == []
    assert set(rec.baseline) >= {"fc_acc", "fc_one_epoch", "fc_linear"}
    assert [c["role"] for c in rec.checkpoints] == ["pr", "fc"]


@pytest.mark.parametrize("objective, kw", [("mlm", {}), ("clf", {}), ("mim", {}), ("clf", {"modality": "image", "family": "cnn"})])
def test_record_shape(objective, kw):
    rec = run_scenario(tiny_run_config(objective, n_experiences=2, **kw))
    assert len(rec.experiences) == 2
    for i, e in enumerate(rec.experiences, 1):
        assert e.index == i and e.classes == [2 * i - 2, 2 * i - 1]
        for f in ACC_FIELDS:
            assert 0.0 <= getattr(e, f) <= 1.0
        assert e.forgetting == pytest.approx(rec.baseline["fc_acc"] - e.fc_acc)
        assert 0 <= e.cka_bottom <= 1 + 1e-6 and 0 <= e.cka_top <= 1 + 1e-6


def test_fc_modes():
    lin = run_scenario(tiny_run_config("clf", n_experiences=1, fc_mode="linear_eval"))
    assert lin.experiences[0].fc_acc is None and lin.experiences[0].fc_linear is not None
    ft = run_scenario(tiny_run_config("clf", n_experiences=1, fc_mode="finetune", fc_grid=((1e-3, 16), (1e-4, 8))))
    assert ft.experiences[0].fc_linear is None and "fc_grid_index" in ft.baseline


def test_forgetting_accounting():
    assert forgetting(0.934, 0.929) == pytest.approx(0.005)
    assert forgetting(None, 0.5) is None


# -- invariants -------------------------------------------------------------------
def test_lineage(mlm_run):
    rec, _, out = mlm_run
    pr = [c for c in rec.checkpoints if c["role"] == "pr"]
    assert [c["index"] for c in pr] == [0, 1, 2, 3]
    assert pr[0]["parent"] is None and pr[0]["data"] == ["base"]
    for prev, cur in zip(pr, pr[1:]):
        assert cur["parent"] == prev["hash"]
        assert cur["data"] == [f"e{cur['index']}/pr"]
    by_index = {c["index"]: c["hash"] for c in pr}
    for c in rec.checkpoints:
        if c["role"] in ("ds", "fc"):
            assert c["parent"] == by_index[c["index"]]
            assert "hash" not in c  # fine-tuned models are never carried or saved
    # pre-training parents are only ever pre-training checkpoints
    assert {c["parent"] for c in pr[1:]} <= set(by_index.values())
    for c in pr:
        model, prov = load_checkpoint(out / "ckpt" / f"h{c['index']}")
        assert model_hash(model) == c["hash"] and prov == c


def test_data_isolation(mlm_run):
    _, log, _ = mlm_run
    assert log.events
    for phase, name in log.events:
        m = re.match(r"e(\d+)/", name)
        if m:
            assert int(m.group(1)) == phase, (phase, name)
        elif name == "base":
            assert phase == 0
        else:
            assert name.startswith("fc/")


def test_mim_isolation_and_frozen_codebook():
    log = AccessLog()
    rec = run_scenario(tiny_run_config("mim", n_experiences=2), log=log)
    for phase, name in log.events:
        m = re.match(r"e(\d+)/", name)
        if m:
            assert int(m.group(1)) >= phase
    assert (0, "e1/pr") in log.events  # codebook fit
    assert "codebook_digest" in rec.baseline


def test_rerun_is_byte_identical(mlm_run, tmp_path):
    rec, _, _ = mlm_run
    again = run_scenario(tiny_run_config("mlm", n_experiences=3))
    assert again.canonical_bytes() == rec.canonical_bytes()
    rec.save(tmp_path / "a.json")
    again.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert RunRecord.load(tmp_path / "a.json").canonical_bytes() == rec.canonical_bytes()


def test_failure_attaches_index_and_persists_partial(tmp_path):
    cfg = tiny_run_config("clf", n_experiences=3)
    stream = generate(cfg.stream)
    broken = stream.experiences[1].downstream.test
    broken.inputs, broken.labels = [], np.zeros(0, np.int64)
    with pytest.raises(ExperienceError) as info:
        run_scenario(cfg, out_dir=tmp_path, stream=stream)
    assert info.value.experience == 2
    partial = json.loads((tmp_path / "record.partial.json").read_text())
    assert len(partial["experiences"]) == 1
    assert partial["error"]["experience"] == 2 and partial["error"]["type"] == "DataError"


def test_nt_variant():
    cfg = tiny_run_config("mlm", n_experiences=2, nt_budgets=(4, 3))
    rec = run_scenario(cfg, keep_models=True)
    added = [e.new_tokens for e in rec.experiences]
    assert [len(a) for a in added] == [4, 3]
    vocab = rec.models["vocab"]
    assert vocab.added == added[0] + added[1]
    h0, h2 = rec.models["h0"], rec.models["h2"]
    assert h2.spec.vocab_size == h0.spec.vocab_size + 7
    # embedding rows of h0 were only ever trained, never reordered; shapes line up with the vocab
    assert h2.params["tok_emb"].shape[0] == len(vocab)
    for e in rec.experiences:
        for f in ACC_FIELDS:
            assert 0.0 <= getattr(e, f) <= 1.0
    assert run_scenario(cfg).canonical_bytes() == rec.canonical_bytes()


def test_config_validation():
    with pytest.raises(ContractError):
        tiny_run_config("mim", modality="text").validate()
    with pytest.raises(ContractError):
        tiny_run_config("mlm", nt_budgets=(1,)).validate()
    with pytest.raises(ContractError):
        tiny_run_config("mlm", finetune=Budget(0, 1e-3)).validate()
    cfg = tiny_run_config("clf")
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        RunConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_flat_tables_gap_marker():
    rec = run_scenario(tiny_run_config("clf", n_experiences=2))
    rec.experiences = rec.experiences[1:]  # drop e1
    t = flat_tables(rec)
    header, row = t["fc_accuracy"].splitlines()
    assert header.split("\t") == ["metric", "Base", "e1", "e2"]
    assert row.split("\t")[2] == GAP
    self_cmp = flat_tables(rec, baseline=rec)["forgetting"].splitlines()[1].split("\t")
    assert self_cmp[1] == GAP and self_cmp[2] == GAP


# -- ACC and traditional CL -----------------------------------------------------------
def test_acc_examples():
    assert acc_metric([[1.0, 0.0], [0.2, 0.9]]) == pytest.approx(0.55)
    assert acc_metric([[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [1.0, 1.0, 1.0]]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_acc_matches_independent_mean(seed):
    r = make_rng(seed, "acc").uniform(0, 1, (5, 5))
    assert abs(acc_metric(r.tolist(), 5) - sum(float(v) for v in r[4]) / 5) < 1e-12


def test_acc_incomplete_row():
    with pytest.raises(ContractError):
        acc_metric([[1.0, None], [0.5]])
    with pytest.raises(ContractError):
        acc_metric([[1.0]], 2)


def test_single_task_acc_is_that_tasks_accuracy():
    rec = run_traditional_cl(tiny_run_config("clf", n_experiences=1))
    assert len(rec.R) == 1 and rec.acc == rec.R[0][0]


def test_traditional_cl_matrix_shape_and_strategy():
    cfg = tiny_run_config("clf", n_experiences=3)
    rec = run_traditional_cl(cfg, "replay", memory=12)
    assert rec.strategy == "replay(12)"
    assert len(rec.R) == 3 and all(len(r) == 3 for r in rec.R)
    assert rec.acc == pytest.approx(np.mean(rec.R[-1]))


def test_sequential_budget_overrides_finetune():
    cfg = tiny_run_config("clf", n_experiences=2)
    same = replace(cfg, sequential=cfg.finetune)
    assert run_traditional_cl(same).R == run_traditional_cl(cfg).R
    longer = replace(cfg, sequential=Budget(3, 1e-3, batch_size=16))
    assert RunConfig.from_dict(longer.to_dict()) == longer
    with pytest.raises(ContractError):
        replace(cfg, sequential=Budget(0, 1e-3)).validate()


def test_small_memory_warns():
    cfg = tiny_run_config("clf", n_experiences=2)
    with pytest.warns(RuntimeWarning, match="smaller than"):
        run_traditional_cl(cfg, "replay", memory=2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_traditional_cl(cfg, "replay", memory=8)


def test_reservoir_is_uniform():
    counts = np.zeros(20)
    for s in range(2000):
        r = Reservoir(5, make_rng(s, "res"))
        for i in range(20):
            r.offer(i)
        assert len(r) == 5
        counts[r.items] += 1
    # each item kept with probability 5/20
    np.testing.assert_allclose(counts / 2000, 0.25, atol=0.04)
