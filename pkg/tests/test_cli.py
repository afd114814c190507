import json
import os

import numpy as np
import pytest

from cptlab import cli
from cptlab.analysis import CkaMatrix
from cptlab.scenario import ExperienceResult, RunRecord

from conftest import tiny_run_config


def _manifest(tmp_path, name="exp", seeds=(0,), artifacts=("run_record", "summary"), **cfg_kw):
    objective = cfg_kw.pop("objective", "clf")
    cfg = tiny_run_config(objective, **cfg_kw).to_dict()
    m = {"name": name, "config": cfg, "seeds": list(seeds), "artifacts": list(artifacts), "output": str(tmp_path / name)}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(m))
    return path, tmp_path / name


def _headers(path):
    return [ln for ln in path.read_text().splitlines() if ln.startswith("# ")]


def test_single_seed_run(tmp_path, capsys):
    path, out = _manifest(tmp_path)
    assert cli.main(["run", str(path)]) == 0
    assert (out / "seed0" / "record.json").exists()
    assert "seed 0: ran" in capsys.readouterr().out
    rec = json.loads((out / "seed0" / "record.json").read_text())
    mhash = rec["header"]["manifest"]
    assert rec["header"]["seed"] == 0
    for tsv in (out / "seed0").glob("*.tsv"):
        assert _headers(tsv) == [f"# manifest {mhash}", "# seed 0"]


def test_sweep_and_idempotent_rerun(tmp_path, capsys):
    path, out = _manifest(tmp_path, seeds=range(5))
    assert cli.main(["run", str(path)]) == 0
    records = sorted(out.glob("seed*/record.json"))
    assert len(records) == 5 and (out / "summary.tsv").exists()
    before = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in out.rglob("*") if p.is_file() and p.name != "summary.tsv"}
    capsys.readouterr()
    assert cli.main(["run", str(path)]) == 0
    assert capsys.readouterr().out.count("skipped") == 5
    after = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in before}
    assert before == after
    assert cli.main(["run", str(path), "--seed", "2", "--force"]) == 0
    assert "seed 2: ran" in capsys.readouterr().out


def test_equal_headers_mean_equal_bytes(tmp_path, monkeypatch):
    # one manifest, two output roots: same header, so every file must match byte for byte
    cfg = tiny_run_config("clf", n_experiences=2).to_dict()
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"name": "same", "config": cfg, "artifacts": ["run_record", "cka"]}))
    for root in ("a", "b"):
        monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / root))
        assert cli.main(["run", str(path)]) == 0
    d1, d2 = tmp_path / "a" / "same" / "seed0", tmp_path / "b" / "same" / "seed0"
    # the wall-clock sidecar carries no header and is excluded by design
    names = sorted(p.name for p in d1.iterdir() if p.suffix != ".timing")
    assert names == sorted(p.name for p in d2.iterdir() if p.suffix != ".timing") and "cka_final_vs_h0.tsv" in names
    for n in names:
        assert (d1 / n).read_bytes() == (d2 / n).read_bytes(), n


def test_traditional_kind(tmp_path):
    cfg = tiny_run_config("clf").to_dict()
    m = {"name": "cl", "kind": "traditional", "strategy": "replay", "memory": 10, "config": cfg, "output": str(tmp_path / "cl")}
    (tmp_path / "cl.json").write_text(json.dumps(m))
    assert cli.main(["run", str(tmp_path / "cl.json")]) == 0
    table = (tmp_path / "cl" / "seed0" / "accuracy_matrix.tsv").read_text()
    assert "ACC\t" in table
    assert "ACC" in (tmp_path / "cl" / "summary.tsv").read_text()


def test_output_root_env(tmp_path, monkeypatch):
    cfg = tiny_run_config("clf", n_experiences=1).to_dict()
    (tmp_path / "m.json").write_text(json.dumps({"name": "rel", "config": cfg}))
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "root"))
    assert cli.main(["run", str(tmp_path / "m.json")]) == 0
    assert (tmp_path / "root" / "rel" / "seed0" / "record.json").exists()


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"seeds": []}, "manifest.seeds"),
        ({"name": ""}, "manifest.name"),
        ({"artifacts": ["summary"]}, "manifest.artifacts"),
        ({"bogus": 1}, "bogus"),
        ({"strategy": "replay"}, "manifest.strategy"),
        ({"config": {"objective": "clf", "stream": {"seed": 0, "n_pretrain": -1}}}, "n_pretrain"),
        ({"config": {"objective": "clf", "stream": {"seed": 0}, "finetune": {"epochs": 1, "lr": 1e-3, "nope": 2}}}, "finetune"),
    ],
)
def test_invalid_manifest_exits_nonzero_with_field(tmp_path, capsys, patch, field):
    m = {"name": "bad", "config": tiny_run_config("clf").to_dict()}
    m.update(patch)
    (tmp_path / "bad.json").write_text(json.dumps(m))
    assert cli.main(["run", str(tmp_path / "bad.json")]) == 2
    assert field in capsys.readouterr().err


def test_missing_manifest(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.json")]) == 2


# -- compare ---------------------------------------------------------------------
def _record(fc_id, base, values):
    exps = [
        ExperienceResult(i + 1, [2 * i, 2 * i + 1], 1.0, 1.0, v, v, None, None, None) for i, v in enumerate(values)
    ]
    return RunRecord(config={}, seed=0, objective="mlm", fc_dataset_id=fc_id, baseline={"fc_acc": base}, experiences=exps)


def test_compare_with_itself_and_worked_example(tmp_path):
    rec = _record("fc1", 0.934, [0.95, 0.94, 0.93, 0.93, 0.929])
    rec.save(tmp_path / "r.json")
    out = tmp_path / "cmp.tsv"
    assert cli.main(["compare", str(tmp_path / "r.json"), "--baseline", str(tmp_path / "r.json"), "--out", str(out)]) == 0
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    cols = lines[0].split("\t")
    row = dict(zip(cols, lines[1].split("\t")))
    assert row["Base"] == "0.9340" and row["e5_forgetting"] == "0.0050"
    self_rec = _record("fc1", 0.9, [0.9])
    table = cli.compare_table([self_rec], ["x"], self_rec)
    assert table.splitlines()[1].split("\t")[-1] == "0.0000"


def test_compare_gap_marker_and_mismatch(tmp_path, capsys):
    full = _record("fc1", 0.9, [0.8, 0.7])
    short = _record("fc1", 0.9, [0.8])
    table = cli.compare_table([full, short], ["full", "short"], full)
    last = table.splitlines()[2].split("\t")
    assert last[-3:] == [cli.GAP] * 3
    other = _record("fc2", 0.9, [0.8])
    full.save(tmp_path / "a.json")
    other.save(tmp_path / "b.json")
    assert cli.main(["compare", str(tmp_path / "b.json"), "--baseline", str(tmp_path / "a.json")]) == 2
    assert "FC dataset" in capsys.readouterr().err


# -- cka, dump, explain -----------------------------------------------------------
@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    out = {}
    for name, kw in [("text", {}), ("vit", {"modality": "image"}), ("cnn", {"modality": "image", "family": "cnn"})]:
        path, o = _manifest(root, name=name, artifacts=("run_record", "checkpoints"), n_experiences=1, **kw)
        assert cli.main(["run", str(path)]) == 0
        out[name] = o / "seed0"
    return out


def test_cka_same_checkpoint_diagonal_ones(checkpoints, tmp_path):
    d = checkpoints["text"]
    out = tmp_path / "m.tsv"
    args = ["cka", str(d / "ckpt" / "h1"), str(d / "ckpt" / "h1"), "--config", str(d / "config.json"), "--out", str(out)]
    assert cli.main(args) == 0
    m = CkaMatrix.from_table(out.read_text())
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-6)
    first = out.read_bytes()
    assert cli.main(args) == 0
    assert out.read_bytes() == first


def test_cka_text_checkpoints_use_their_own_vocab(checkpoints, tmp_path):
    d = checkpoints["text"]
    out = tmp_path / "m.tsv"
    args = ["cka", str(d / "ckpt" / "h1"), str(d / "ckpt" / "h0"), "--config", str(d / "config.json"), "--out", str(out)]
    assert cli.main(args) == 0
    m = CkaMatrix.from_table(out.read_text())
    assert m.values.shape == (3, 3)


def test_cka_cross_family_rectangular(checkpoints, tmp_path):
    a, b = checkpoints["vit"], checkpoints["cnn"]
    out = tmp_path / "x.tsv"
    args = ["cka", str(a / "ckpt" / "h1"), str(b / "ckpt" / "h1"), "--config", str(a / "config.json"), "--out", str(out)]
    assert cli.main(args) == 0
    m = CkaMatrix.from_table(out.read_text())
    assert m.values.shape == (3, 2)


def test_cka_unknown_probe(checkpoints):
    d = checkpoints["text"]
    assert cli.main(["cka", str(d / "ckpt" / "h0"), str(d / "ckpt" / "h0"), "--config", str(d / "config.json"), "--probe", "zz"]) == 2


def test_dump_data_and_explain(tmp_path, capsys):
    path, out = _manifest(tmp_path, n_experiences=1)
    assert cli.main(["dump-data", str(path), "--out", str(tmp_path / "data")]) == 0
    assert sorted(os.listdir(tmp_path / "data"))[0].endswith(".jsonl")
    capsys.readouterr()
    assert cli.main(["explain-config", str(path)]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["resolved_config"]["stream"]["n_experiences"] == 1
    assert cli.main(["explain-config"]) == 0
    defaults = json.loads(capsys.readouterr().out)["defaults"]
    assert defaults["pretrain"]["lr"] == 5e-5 and defaults["finetune"]["epochs"] == 20
