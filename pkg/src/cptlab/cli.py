"""Batch front-end: ``cptlab {run, compare, cka, dump-data, explain-config}``.

Experiments are declared in a JSON manifest::

    {
      "name": "mlm-vs-clf",
      "kind": "scenario",                 # or "traditional"
      "preset": {"objective": "mlm", "modality": "text"},
      "config": {"finetune": {"epochs": 3}},   # deep-merged over the preset
      "seeds": [0, 1, 2, 3, 4],
      "output": "runs/mlm",               # relative paths resolve under $CPTLAB_OUT
      "artifacts": ["run_record", "checkpoints", "cka", "summary"]
    }

Every emitted file starts with a header naming the manifest hash and the
seed(s); text tables use ``#`` comment lines, JSON files a ``header`` key.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import CkaConfig, collect_activations, cka_from_dumps
from .errors import ComparisonError, CptLabError
from .models import load_checkpoint
from .scenario import GAP, RunConfig, RunRecord, desk_config, flat_tables, forgetting, run_scenario, run_traditional_cl
from .streams import dump_stream, generate
from .tokenizer import Vocab, tokenize_batch

ENV_OUT = "CPTLAB_OUT"
KINDS = ("scenario", "traditional")
ARTIFACTS = ("run_record", "checkpoints", "cka", "summary")
MANIFEST_KEYS = ("name", "kind", "preset", "config", "seeds", "output", "artifacts", "strategy", "memory")


class ManifestError(CptLabError, ValueError):
    """A manifest field is missing or invalid; the message names the field."""


# -- manifests --------------------------------------------------------------
def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:16]


def load_manifest(path: str | Path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    return validate_manifest(m)


def validate_manifest(m) -> dict:
    if not isinstance(m, dict):
        raise ManifestError("manifest: top level must be an object")
    extra = set(m) - set(MANIFEST_KEYS)
    if extra:
        raise ManifestError(f"manifest: unknown field(s) {', '.join(sorted(extra))}")
    if not isinstance(m.get("name"), str) or not m["name"]:
        raise ManifestError("manifest.name: required non-empty string")
    kind = m.setdefault("kind", "scenario")
    if kind not in KINDS:
        raise ManifestError(f"manifest.kind: must be one of {KINDS}, got {kind!r}")
    seeds = m.setdefault("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ManifestError("manifest.seeds: required non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ManifestError("manifest.seeds: duplicate seeds")
    arts = m.setdefault("artifacts", ["run_record", "summary"])
    if not isinstance(arts, list) or any(a not in ARTIFACTS for a in arts) or "run_record" not in arts:
        raise ManifestError(f"manifest.artifacts: list drawn from {ARTIFACTS}, must include 'run_record'")
    if "preset" not in m and "config" not in m:
        raise ManifestError("manifest: one of 'preset' or 'config' is required")
    if "preset" in m:
        p = m["preset"]
        if not isinstance(p, dict) or "objective" not in p:
            raise ManifestError("manifest.preset.objective: required")
        unknown = set(p) - {"objective", "modality", "family"}
        if unknown:
            raise ManifestError(f"manifest.preset: unknown field(s) {', '.join(sorted(unknown))}")
    if "config" in m and not isinstance(m["config"], dict):
        raise ManifestError("manifest.config: must be an object")
    if kind == "traditional":
        if m.setdefault("strategy", "naive") not in ("naive", "replay"):
            raise ManifestError("manifest.strategy: must be 'naive' or 'replay'")
        mem = m.setdefault("memory", None)
        if mem is not None and (not isinstance(mem, int) or mem < 0):
            raise ManifestError("manifest.memory: must be a non-negative integer or null")
    elif "strategy" in m or "memory" in m:
        raise ManifestError("manifest.strategy/memory: only valid for kind 'traditional'")
    resolve_config(m, seeds[0])  # surfaces config errors early
    return m


def resolve_config(m: dict, seed: int) -> RunConfig:
    """The run config for one seed: preset (or defaults) + config overrides, seeded."""
    if "preset" in m:
        p = m["preset"]
        base = desk_config(p["objective"], p.get("modality", "text"), seed=seed, family=p.get("family", "transformer")).to_dict()
    else:
        cfg = m["config"]
        if "objective" not in cfg or "stream" not in cfg:
            raise ManifestError("manifest.config: 'objective' and 'stream' are required without a preset")
        base = {}
    merged = _merge(base, m.get("config", {}))
    merged["seed"] = seed
    merged.setdefault("stream", {})["seed"] = seed
    try:
        return RunConfig.from_dict(merged).validate()
    except (TypeError, ValueError, CptLabError) as exc:
        raise ManifestError(f"manifest.config: {exc}") from exc


def output_dir(m: dict) -> Path:
    out = Path(m.get("output") or m["name"])
    if not out.is_absolute():
        out = Path(os.environ.get(ENV_OUT, ".")) / out
    return out


# -- emission helpers ---------------------------------------------------------
def _header_lines(mhash: str, seed) -> list[str]:
    return [f"manifest {mhash}", f"seed {seed}"]


def _write_table(path: Path, text: str, mhash: str, seed) -> None:
    path.write_text("".join(f"# {h}\n" for h in _header_lines(mhash, seed)) + text)


def _write_record(path: Path, record: RunRecord, mhash: str, seed: int) -> None:
    body = {"header": {"manifest": mhash, "seed": seed}, "record": record.to_dict()}
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".timing").write_text(f"{record.wall_clock:.3f}\n")


def read_record(path: str | Path) -> RunRecord:
    d = json.loads(Path(path).read_text())
    return RunRecord.from_dict(d.get("record", d))


def _run_one(args) -> tuple[int, str]:
    m, seed, mhash, force = args
    out = output_dir(m) / f"seed{seed}"
    rec_path = out / "record.json"
    if rec_path.exists() and not force:
        try:
            head = json.loads(rec_path.read_text())["header"]
            if head["manifest"] == mhash and head["seed"] == seed:
                return seed, "skipped"
        except (KeyError, json.JSONDecodeError):
            pass
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(m, seed)
    arts = m["artifacts"]
    if m["kind"] == "traditional":
        record = run_traditional_cl(cfg, m["strategy"], m.get("memory"))
    else:
        if "cka" not in arts:
            cfg = replace(cfg, cka=False)
        record = run_scenario(cfg, out_dir=out if "checkpoints" in arts else None)
    (out / "config.json").write_text(
        json.dumps({"header": {"manifest": mhash, "seed": seed}, "config": cfg.to_dict()}, indent=1, sort_keys=True) + "\n"
    )
    if m["kind"] == "scenario":
        for name, text in flat_tables(record).items():
            _write_table(out / f"{name}.tsv", text, mhash, seed)
        if "cka" in arts and record.cka is not None:
            c = record.cka
            rows = ["\t".join(["tap"] + c["cols"])] + [
                "\t".join([r] + [f"{v:.10f}" for v in vals]) for r, vals in zip(c["rows"], c["values"])
            ]
            _write_table(out / "cka_final_vs_h0.tsv", "\n".join(rows) + "\n", mhash, seed)
    else:
        lines = ["\t".join(["after"] + [f"task{j + 1}" for j in range(len(record.R))])]
        lines += ["\t".join([f"task{i + 1}"] + [f"{v:.4f}" for v in row]) for i, row in enumerate(record.R)]
        lines.append(f"ACC\t{record.acc:.4f}")
        _write_table(out / "accuracy_matrix.tsv", "\n".join(lines) + "\n", mhash, seed)
    _write_record(rec_path, record, mhash, seed)  # written last: marks the seed complete
    return seed, "ran"


def summarize(records: list[RunRecord]) -> str:
    """Median over seeds of every per-experience metric (Base column first)."""
    if not records:
        return ""
    if records[0].R is not None:
        accs = [r.acc for r in records]
        return f"metric\tmedian\tmin\tmax\nACC\t{np.median(accs):.4f}\t{min(accs):.4f}\t{max(accs):.4f}\n"
    n = max(len(r.experiences) for r in records)
    cols = ["Base"] + [f"e{i}" for i in range(1, n + 1)]
    keys = [
        ("fc_accuracy", "fc_acc", "fc_acc"),
        ("fc_one_epoch", "fc_one_epoch", "fc_one_epoch"),
        ("fc_linear", "fc_linear", "fc_linear"),
        ("downstream_accuracy", None, "downstream_acc"),
        ("downstream_one_epoch", None, "downstream_one_epoch"),
        ("forgetting", None, "forgetting"),
    ]
    lines = ["\t".join(["metric"] + cols)]
    for name, bkey, ekey in keys:
        row = [name]
        vals = [r.baseline.get(bkey) for r in records] if bkey else []
        row.append(_median(vals))
        for i in range(n):
            row.append(_median([getattr(r.experiences[i], ekey) if i < len(r.experiences) else None for r in records]))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _median(vals) -> str:
    vals = [v for v in vals if v is not None]
    return f"{np.median(vals):.4f}" if vals else GAP


# -- commands -----------------------------------------------------------------
def cmd_run(args) -> int:
    m = load_manifest(args.manifest)
    if args.seed is not None:
        m["seeds"] = [args.seed]
    mhash = manifest_hash(m)
    jobs = [(m, s, mhash, args.force) for s in m["seeds"]]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for seed, status in results:
        print(f"seed {seed}: {status}")
    out = output_dir(m)
    if "summary" in m["artifacts"]:
        records = [read_record(out / f"seed{s}" / "record.json") for s in m["seeds"]]
        _write_table(out / "summary.tsv", summarize(records), mhash, ",".join(map(str, m["seeds"])))
    missing = [s for s in m["seeds"] if not (out / f"seed{s}" / "record.json").exists()]
    return 1 if missing else 0


def compare_table(records: list[RunRecord], names: list[str], baseline: RunRecord) -> str:
    """Per-experience accuracy, 1-epoch accuracy and forgetting against ``baseline``'s Base row."""
    for r, name in zip(records, names):
        if r.fc_dataset_id != baseline.fc_dataset_id:
            raise ComparisonError(
                f"{name}: FC dataset {r.fc_dataset_id} differs from the baseline's {baseline.fc_dataset_id}"
            )
    n = max([len(r.experiences) for r in records] + [0])
    base_acc = baseline.baseline.get("fc_acc")
    cols = ["run", "Base"]
    for i in range(1, n + 1):
        cols += [f"e{i}_acc", f"e{i}_1ep", f"e{i}_forgetting"]
    lines = ["\t".join(cols)]
    fmt = lambda v: GAP if v is None else f"{v:.4f}"  # noqa: E731
    for r, name in zip(records, names):
        by = {e.index: e for e in r.experiences}
        row = [name, fmt(base_acc)]
        for i in range(1, n + 1):
            e = by.get(i)
            if e is None:
                row += [GAP, GAP, GAP]
            else:
                row += [fmt(e.fc_acc), fmt(e.fc_one_epoch), fmt(forgetting(base_acc, e.fc_acc))]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    baseline = read_record(args.baseline)
    records = [read_record(p) for p in args.records]
    text = compare_table(records, [str(p) for p in args.records], baseline)
    mhash = hashlib.sha256("".join(Path(p).read_text() for p in [args.baseline, *args.records]).encode()).hexdigest()[:16]
    if args.out:
        _write_table(Path(args.out), text, mhash, "-")
    else:
        sys.stdout.write(text)
    return 0


def _probe_inputs(config_path: str | Path, probe: str):
    d = json.loads(Path(config_path).read_text())
    cfg = RunConfig.from_dict(d.get("config", d))
    stream = generate(cfg.stream)
    for ds in stream.datasets():
        if ds.name == probe:
            return cfg, ds.inputs, d.get("header", {}).get("manifest", "-")
    raise ManifestError(f"probe {probe!r} is not a dataset of this stream")


def _encode_for(ckpt_dir: Path, model, inputs):
    if model.spec.modality == "text":
        vocab = Vocab.load(ckpt_dir / "vocab.tsv")
        return tokenize_batch(vocab, inputs, model.spec.max_sequence)
    return np.asarray(inputs, dtype=np.float32)


def cmd_cka(args) -> int:
    a_dir, b_dir = Path(args.ckpt_a), Path(args.ckpt_b)
    model_a, _ = load_checkpoint(a_dir)
    model_b, _ = load_checkpoint(b_dir)
    cfg, inputs, mhash = _probe_inputs(args.config, args.probe)
    seed = cfg.seed if args.seed is None else args.seed
    ccfg = CkaConfig(batch_size=args.batch_size, passes=args.passes, seed=seed, estimator=args.estimator)
    dump_a = collect_activations(model_a, _encode_for(a_dir, model_a, inputs), args.probe)
    dump_b = collect_activations(model_b, _encode_for(b_dir, model_b, inputs), args.probe)
    m = cka_from_dumps(dump_a, dump_b, ccfg)
    header = _header_lines(mhash, seed) + [f"a {dump_a.checkpoint_id}", f"b {dump_b.checkpoint_id}", f"probe {args.probe}", f"estimator {m.estimator}"]
    text = m.to_table(header)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_dump_data(args) -> int:
    m = load_manifest(args.manifest)
    seed = m["seeds"][0] if args.seed is None else args.seed
    cfg = resolve_config(m, seed)
    out = Path(args.out) if args.out else output_dir(m) / f"seed{seed}" / "data"
    paths = dump_stream(generate(cfg.stream), out)
    print(f"wrote {len(paths)} files to {out}")
    return 0


def cmd_explain(args) -> int:
    if args.manifest:
        m = load_manifest(args.manifest)
        seed = m["seeds"][0] if args.seed is None else args.seed
        cfg = resolve_config(m, seed)
        print(json.dumps({"manifest": m, "manifest_hash": manifest_hash(m), "resolved_config": cfg.to_dict()}, indent=1, sort_keys=True))
    else:
        from .streams import StreamConfig

        cfg = RunConfig(objective="mlm", stream=StreamConfig(seed=0 if args.seed is None else args.seed))
        print(json.dumps({"defaults": cfg.to_dict()}, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cptlab", description="Continual pre-training laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute every seed of a manifest")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--force", action="store_true", help="recompute seeds that already have a record")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (one run per worker)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="forgetting table of records against a baseline record")
    p.add_argument("records", nargs="+")
    p.add_argument("--baseline", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cka", help="layer-by-layer CKA between two checkpoints")
    p.add_argument("ckpt_a")
    p.add_argument("ckpt_b")
    p.add_argument("--config", required=True, help="config.json written next to the run record")
    p.add_argument("--probe", default="fc/test")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--passes", type=int, default=10)
    p.add_argument("--estimator", choices=("unbiased-minibatch", "biased"), default="unbiased-minibatch")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("dump-data", help="export the synthetic stream of a manifest")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_data)

    p = sub.add_parser("explain-config", help="print the resolved configuration with all defaults")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_explain)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CptLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
