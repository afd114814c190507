"""Continual pre-training scenario and the traditional continual-learning baselines.

:func:`run_scenario` drives one run::

    h0 = initial pre-training on the base set
    FC-evaluate h0                                   -> baseline row
    for each experience e_i:
        (optional) grow vocabulary and embeddings
        h_i = pre-train h_{i-1} on D_i^pr (same head)
        fine-tune a head-swapped copy on D_i^ds      -> downstream row
        fine-tune / probe a head-swapped copy on FC  -> FC row

Only ``h_i`` is carried forward.  Every checkpoint gets a provenance entry
naming its parent hash so lineage can be audited after the fact.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import tokenizer as tok
from .analysis import CkaConfig, layer_cka, quartile_means
from .core import tensor as T
from .core.optim import Optimizer
from .core.rng import make_rng
from .errors import ContractError, DataError, ExperienceError
from .models import ModelSpec, build, expand_embeddings, forward, model_hash, patchify, replace_head, save_checkpoint
from .objectives import MIM_PLAN, MLM_PLAN, MaskingPlan, fit_codebook
from .streams import AccessLog, Stream, StreamConfig, generate, initial_pretrain
from .training import Budget, FitResult, Objective, accuracy, fc_grid_eval, finetune, linear_eval, pretrain

OBJECTIVES = ("mlm", "mim", "clf")
FC_MODES = ("finetune", "linear_eval", "both")


@dataclass(frozen=True)
class RunConfig:
    objective: str
    stream: StreamConfig
    model: ModelSpec = ModelSpec()
    seed: int = 0
    initial: Budget = Budget(epochs=30, lr=5e-5, patience=2)
    pretrain: Budget = Budget(epochs=30, lr=5e-5, patience=2)
    finetune: Budget = Budget(epochs=20, lr=1e-5)
    probe: Budget = Budget(epochs=20, lr=1e-3)
    fc_mode: str = "both"
    fc_grid: tuple | None = None
    nt_budgets: tuple | None = None
    vocab_size: int = 512
    codebook_size: int = 64
    mlm_plan: MaskingPlan = MLM_PLAN
    mim_plan: MaskingPlan = MIM_PLAN
    cka: bool = True
    cka_cfg: CkaConfig = CkaConfig()
    base_downstream: bool = False
    sequential: Budget | None = None  # traditional-CL budget; None reuses finetune

    def validate(self) -> "RunConfig":
        if self.objective not in OBJECTIVES:
            raise ContractError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.fc_mode not in FC_MODES:
            raise ContractError(f"fc_mode must be one of {FC_MODES}, got {self.fc_mode!r}")
        self.stream.validate()
        for name in ("initial", "pretrain", "finetune", "probe"):
            b = getattr(self, name).validate()
            if b.lr <= 0:
                raise ContractError(f"{name}.lr must be positive")
        if self.sequential is not None and (self.sequential.validate().lr <= 0 or self.sequential.epochs < 1):
            raise ContractError("sequential budget needs a positive lr and at least one epoch")
        if self.finetune.epochs < 1 or self.probe.epochs < 1:
            raise ContractError("fine-tuning and probe budgets need at least one epoch")
        if self.objective == "mlm" and self.stream.modality != "text":
            raise ContractError("mlm needs a text stream")
        if self.objective == "mim" and (self.stream.modality != "image" or self.model.family != "transformer"):
            raise ContractError("mim needs an image stream and a transformer")
        if self.stream.modality == "text" and self.model.family != "transformer":
            raise ContractError("text streams need a transformer")
        if self.nt_budgets is not None:
            if self.stream.modality != "text":
                raise ContractError("vocabulary expansion needs a text stream")
            if len(self.nt_budgets) != self.stream.n_experiences or any(k < 0 for k in self.nt_budgets):
                raise ContractError("nt_budgets needs one non-negative entry per experience")
        if self.fc_grid is not None and len(self.fc_grid) == 0:
            raise ContractError("fc_grid must be non-empty when given")
        return self

    def resolved_model(self, vocab_size: int | None = None) -> ModelSpec:
        if self.stream.modality == "text":
            return replace(self.model, vocab_size=vocab_size, image_size=None).validate()
        return replace(
            self.model, vocab_size=None, image_size=self.stream.image_size, channels=self.stream.channels
        ).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("mlm_plan", "mim_plan"):
            d[key]["special"] = sorted(d[key]["special"])
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw: dict[str, Any] = {}
        nested = {
            "stream": StreamConfig,
            "model": ModelSpec,
            "initial": Budget,
            "pretrain": Budget,
            "finetune": Budget,
            "probe": Budget,
            "sequential": Budget,
            "cka_cfg": CkaConfig,
        }
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            if f.name in nested and isinstance(v, dict):
                v = _build(nested[f.name], v, f.name)
            elif f.name in ("mlm_plan", "mim_plan") and isinstance(v, dict):
                v = MaskingPlan(float(v["mask_prob"]), tuple(v["split"]), frozenset(v.get("special", ())))
            elif f.name == "fc_grid" and v is not None:
                v = tuple(tuple(g) for g in v)
            elif f.name == "nt_budgets" and v is not None:
                v = tuple(int(k) for k in v)
            kw[f.name] = v
        if d:
            raise ContractError(f"unknown run config field(s): {', '.join(sorted(d))}")
        return cls(**kw)


def _build(klass, d: dict, where: str):
    names = {f.name for f in fields(klass)}
    extra = set(d) - names
    if extra:
        raise ContractError(f"unknown field(s) in {where}: {', '.join(sorted(extra))}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return klass(**d)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (frozenset, set)):
        return sorted(_plain(v) for v in x)
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x


# -- records -----------------------------------------------------------------
@dataclass
class ExperienceResult:
    index: int
    classes: list[int]
    downstream_acc: float
    downstream_one_epoch: float
    fc_acc: float | None
    fc_one_epoch: float | None
    fc_linear: float | None
    forgetting: float | None
    forgetting_linear: float | None
    base_downstream_acc: float | None = None
    pretrain_epochs: int = 0
    new_tokens: list[str] = field(default_factory=list)
    cka_bottom: float | None = None
    cka_top: float | None = None


@dataclass
class RunRecord:
    config: dict
    seed: int
    objective: str
    fc_dataset_id: str
    baseline: dict = field(default_factory=dict)
    experiences: list[ExperienceResult] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    cka: dict | None = None
    R: list[list[float]] | None = None
    acc: float | None = None
    strategy: str | None = None
    error: dict | None = None
    wall_clock: float = 0.0
    models: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        """Canonical content; wall-clock time and in-memory models are excluded."""
        d = {
            "config": self.config,
            "seed": self.seed,
            "objective": self.objective,
            "fc_dataset_id": self.fc_dataset_id,
            "baseline": self.baseline,
            "experiences": [asdict(e) for e in self.experiences],
            "checkpoints": self.checkpoints,
            "cka": self.cka,
            "R": self.R,
            "acc": self.acc,
            "strategy": self.strategy,
            "error": self.error,
        }
        return _plain(d)

    def canonical_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n").encode()

    def save(self, path: str | Path) -> Path:
        """Write the canonical record; wall-clock goes to a ``.timing`` sidecar."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.canonical_bytes())
        p.with_suffix(p.suffix + ".timing").write_text(f"{self.wall_clock:.3f}\n")
        return p

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        exps = [ExperienceResult(**e) for e in d.get("experiences", [])]
        kw = {k: d.get(k) for k in ("config", "seed", "objective", "fc_dataset_id")}
        return cls(
            **kw,
            baseline=d.get("baseline") or {},
            experiences=exps,
            checkpoints=d.get("checkpoints") or [],
            cka=d.get("cka"),
            R=d.get("R"),
            acc=d.get("acc"),
            strategy=d.get("strategy"),
            error=d.get("error"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def forgetting(self, linear: bool = False) -> list[float | None]:
        return [e.forgetting_linear if linear else e.forgetting for e in self.experiences]


def forgetting(baseline: float | None, current: float | None) -> float | None:
    """Baseline FC accuracy minus current FC accuracy (``None`` when either is missing)."""
    if baseline is None or current is None:
        return None
    return float(baseline) - float(current)


# -- data plumbing -----------------------------------------------------------
class _Encoder:
    """Turns dataset inputs into model-ready arrays (tokenized text or raw images)."""

    def __init__(self, modality: str, vocab: tok.Vocab | None, max_len: int):
        self.modality = modality
        self.vocab = vocab
        self.max_len = max_len

    def __call__(self, inputs) -> np.ndarray:
        if self.modality == "text":
            return tok.tokenize_batch(self.vocab, inputs, self.max_len)
        return np.asarray(inputs, dtype=np.float32)

    def labeled(self, ds, relabel=None):
        x, y = ds.read()
        y = np.asarray(y) if relabel is None else relabel(np.asarray(y))
        return self(x), y


def _objective(cfg: RunConfig, vocab_size: int | None, codebook) -> Objective:
    if cfg.objective == "mlm":
        return Objective("mlm", vocab_size=vocab_size, plan=cfg.mlm_plan)
    if cfg.objective == "mim":
        return Objective("mim", plan=cfg.mim_plan, codebook=codebook)
    return Objective("clf")


def _head_k(cfg: RunConfig, spec: ModelSpec) -> int | None:
    if cfg.objective == "clf":
        return cfg.stream.n_base_labels + cfg.stream.n_classes
    if cfg.objective == "mim":
        return cfg.codebook_size
    return None


def _fit(model, train, val, test, n_classes, budget, seed, tag) -> FitResult:
    return finetune(model, train, val, test, n_classes, budget, seed, tag)


def _fc_eval(cfg: RunConfig, model, fc_sets, n_classes: int, seed: int, tag: str) -> dict:
    out: dict[str, Any] = {"fc_acc": None, "fc_one_epoch": None, "fc_linear": None}
    train, val, test = fc_sets
    if cfg.fc_mode in ("finetune", "both"):
        if cfg.fc_grid:
            g = fc_grid_eval(model, train, val, test, n_classes, cfg.fc_grid, cfg.finetune, seed, tag=f"{tag}/fc")
            out["fc_acc"], out["fc_one_epoch"], out["fc_grid_index"] = g.accuracy, g.one_epoch_accuracy, g.best_index
        else:
            r = _fit(model, train, val, test, n_classes, cfg.finetune, seed, f"{tag}/fc")
            out["fc_acc"], out["fc_one_epoch"] = r.accuracy, r.one_epoch_accuracy
    if cfg.fc_mode in ("linear_eval", "both"):
        out["fc_linear"] = linear_eval(model, train, val, test, n_classes, cfg.probe, seed, f"{tag}/probe").accuracy
    return out


def _provenance(role: str, index: int, model, parent: str | None, data: list[str]) -> dict:
    return {"role": role, "index": index, "hash": model_hash(model), "parent": parent, "data": data}


def _save(model, directory: Path, prov: dict, vocab) -> None:
    save_checkpoint(model, directory, prov)
    if vocab is not None:
        vocab.save(directory / "vocab.tsv")


def _persist_partial(record: RunRecord, out_dir: str | Path | None) -> None:
    if out_dir is not None:
        record.save(Path(out_dir) / "record.partial.json")


def run_scenario(
    cfg: RunConfig,
    log: AccessLog | None = None,
    out_dir: str | Path | None = None,
    keep_models: bool = False,
    stream: Stream | None = None,
) -> RunRecord:
    """Continual pre-training run; see the module docstring for the exact order of steps.

    ``log`` (when given) records every dataset read tagged with the current
    experience index (0 for the initial phase).  With ``out_dir`` the
    pre-training checkpoints are written to ``out_dir/ckpt/h{i}``.  With
    ``keep_models`` the carried checkpoints are kept on ``record.models``.
    """
    cfg.validate()
    t0 = time.perf_counter()
    seed = cfg.seed
    stream = generate(cfg.stream) if stream is None else stream
    stream.attach_log(log)
    scfg = stream.config
    offset = scfg.n_base_labels  # stream class c is clf label offset + c

    def phase(i: int) -> None:
        if log is not None:
            log.phase = i

    phase(0)
    xb_raw, yb = stream.base.read()
    vocab = None
    if scfg.modality == "text":
        vocab = tok.train_vocab(xb_raw, cfg.vocab_size)
    spec = cfg.resolved_model(None if vocab is None else len(vocab))
    enc = _Encoder(scfg.modality, vocab, spec.max_sequence)

    codebook = None
    if cfg.objective == "mim":
        # the frozen visual tokenizer is fit once, on the first experience's patches
        if not stream.experiences:
            x1 = np.asarray(xb_raw, dtype=np.float32)
        else:
            x1, _ = stream.experiences[0].pretrain.read()
        cb_rng = make_rng(seed, "codebook-sample")
        patches = patchify(np.asarray(x1, dtype=np.float32), spec.patch).reshape(-1, spec.patch**2 * spec.channels)
        take = cb_rng.choice(len(patches), size=min(len(patches), 20000), replace=False)
        codebook = fit_codebook(patches[np.sort(take)], cfg.codebook_size, seed, spec.patch)

    objective = _objective(cfg, spec.vocab_size, codebook)
    record = RunRecord(
        config=cfg.to_dict(), seed=seed, objective=cfg.objective, fc_dataset_id=stream.fc.dataset_id()
    )
    if codebook is not None:
        record.baseline["codebook_digest"] = codebook.digest()

    model = build(spec, seed, head=cfg.objective, k=_head_k(cfg, spec))
    h0 = initial_pretrain(model, objective, enc(xb_raw), np.asarray(yb), cfg.initial, seed)
    prov = _provenance("pr", 0, h0, None, [stream.base.name])
    record.checkpoints.append(prov)
    if out_dir is not None:
        _save(h0, Path(out_dir) / "ckpt" / "h0", prov, vocab)

    fc_sets = [enc.labeled(d) for d in stream.fc.splits.all()]
    base = _fc_eval(cfg, h0, fc_sets, stream.fc.n_classes, seed, "e0")
    record.baseline.update(base)
    for role in ("fc",):
        record.checkpoints.append({"role": role, "index": 0, "parent": prov["hash"], "data": [d.name for d in stream.fc.splits.all()]})
    h0_enc = _Encoder(scfg.modality, vocab, spec.max_sequence)
    fc_probe = fc_sets[2][0]

    current, parent = h0, prov["hash"]
    cka_rows = []
    for e in stream.experiences:
        i = e.index
        phase(i)
        try:
            new_tokens: list[str] = []
            xpr_raw, ypr = e.pretrain.read()
            if cfg.nt_budgets is not None and cfg.nt_budgets[i - 1] > 0:
                new_tokens, _ = tok.select_new_tokens(enc.vocab, xpr_raw, cfg.nt_budgets[i - 1])
                if new_tokens:
                    vocab = tok.expand(enc.vocab, new_tokens, i)
                    current = expand_embeddings(current, len(new_tokens), init_seed=int(make_rng(seed, "nt", i).integers(2**31)))
                    enc = _Encoder(scfg.modality, vocab, spec.max_sequence)
                    objective = _objective(cfg, current.spec.vocab_size, codebook)
            ypr = None if ypr is None else offset + np.asarray(ypr)
            current, hist = pretrain(current, objective, enc(xpr_raw), ypr, cfg.pretrain, seed, tag=f"e{i}/pr")
            prov = _provenance("pr", i, current, parent, [e.pretrain.name])
            record.checkpoints.append(prov)
            if out_dir is not None:
                _save(current, Path(out_dir) / "ckpt" / f"h{i}", prov, enc.vocab)
            parent = prov["hash"]

            ds_sets = [enc.labeled(d) for d in e.downstream.all()]
            ds = _fit(current, *ds_sets, len(e.classes), cfg.finetune, seed, f"e{i}/ds")
            record.checkpoints.append({"role": "ds", "index": i, "parent": parent, "data": [d.name for d in e.downstream.all()]})
            base_ds = None
            if cfg.base_downstream:
                base_sets = [h0_enc.labeled(d) for d in e.downstream.all()]
                base_ds = _fit(h0, *base_sets, len(e.classes), cfg.finetune, seed, f"e{i}/ds").accuracy

            fc_sets = [enc.labeled(d) for d in stream.fc.splits.all()]
            fc = _fc_eval(cfg, current, fc_sets, stream.fc.n_classes, seed, f"e{i}")
            record.checkpoints.append({"role": "fc", "index": i, "parent": parent, "data": [d.name for d in stream.fc.splits.all()]})

            res = ExperienceResult(
                index=i,
                classes=list(e.classes),
                downstream_acc=ds.accuracy,
                downstream_one_epoch=ds.one_epoch_accuracy,
                fc_acc=fc["fc_acc"],
                fc_one_epoch=fc["fc_one_epoch"],
                fc_linear=fc["fc_linear"],
                forgetting=forgetting(record.baseline.get("fc_acc"), fc["fc_acc"]),
                forgetting_linear=forgetting(record.baseline.get("fc_linear"), fc["fc_linear"]),
                base_downstream_acc=base_ds,
                pretrain_epochs=len(hist.train_loss),
                new_tokens=list(new_tokens),
            )
            if cfg.cka:
                m = layer_cka(current, h0, fc_sets[2][0], cfg.cka_cfg, probe_id="fc/test")
                res.cka_bottom, res.cka_top = quartile_means(m)
                cka_rows.append(m)
            record.experiences.append(res)
            if keep_models:
                record.models[f"h{i}"] = current
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            record.error = {"experience": i, "type": type(exc).__name__, "message": str(exc)}
            record.wall_clock = time.perf_counter() - t0
            _persist_partial(record, out_dir)
            raise ExperienceError(i, exc) from exc

    if cka_rows:
        last = cka_rows[-1]
        record.cka = {"rows": last.rows, "cols": last.cols, "values": last.values.tolist(), "estimator": last.estimator, "probe": "fc/test"}
    if keep_models:
        record.models["h0"] = h0
        record.models["vocab"] = enc.vocab
        record.models["fc_probe"] = fc_probe
    record.wall_clock = time.perf_counter() - t0
    return record


# -- traditional continual learning -----------------------------------------
def acc_metric(R, T: int | None = None) -> float:
    """Mean of the last row of the accuracy matrix over the first ``T`` tasks."""
    R = [list(r) for r in R]
    T = len(R) if T is None else T
    if T < 1 or len(R) < T:
        raise ContractError(f"accuracy matrix has {len(R)} rows, need {T}")
    row = R[T - 1]
    if len(row) < T or any(v is None or not np.isfinite(v) for v in row[:T]):
        raise ContractError(f"row {T - 1} of the accuracy matrix is incomplete")
    return float(np.mean(np.asarray(row[:T], dtype=np.float64)))


class Reservoir:
    """Fixed-size reservoir sample over every item offered so far."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.items: list[int] = []
        self.seen = 0

    def offer(self, item: int) -> None:
        if self.capacity <= 0:
            return
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self.rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.items[j] = item
        self.seen += 1

    def __len__(self) -> int:
        return len(self.items)


def run_traditional_cl(
    cfg: RunConfig,
    strategy: str = "naive",
    memory: int | None = None,
    stream: Stream | None = None,
    h0=None,
) -> RunRecord:
    """Sequential supervised fine-tuning over the downstream tasks with one shared head.

    ``strategy`` is ``naive`` or ``replay``.  Replay keeps a reservoir of past
    training samples (default capacity: 10% of all downstream training
    samples) and concatenates an equally sized memory batch to every current
    batch.  Training uses ``cfg.sequential`` when set, else ``cfg.finetune``.
    ``R[i][j]`` is the test accuracy on task ``j`` after training on task ``i``.
    """
    cfg.validate()
    if strategy not in ("naive", "replay"):
        raise ContractError(f"strategy must be 'naive' or 'replay', got {strategy!r}")
    t0 = time.perf_counter()
    seed = cfg.seed
    stream = generate(cfg.stream) if stream is None else stream
    scfg = stream.config
    xb_raw, yb = stream.base.read()
    vocab = tok.train_vocab(xb_raw, cfg.vocab_size) if scfg.modality == "text" else None
    spec = cfg.resolved_model(None if vocab is None else len(vocab))
    enc = _Encoder(scfg.modality, vocab, spec.max_sequence)
    if h0 is None:
        codebook = None
        if cfg.objective == "mim":
            x1 = stream.experiences[0].pretrain.inputs if stream.experiences else xb_raw
            patches = patchify(np.asarray(x1, dtype=np.float32), spec.patch).reshape(-1, spec.patch**2 * spec.channels)
            codebook = fit_codebook(patches, cfg.codebook_size, seed, spec.patch)
        model = build(spec, seed, head=cfg.objective, k=_head_k(cfg, spec))
        h0 = initial_pretrain(model, _objective(cfg, spec.vocab_size, codebook), enc(xb_raw), np.asarray(yb), cfg.initial, seed)
    model = replace_head(h0, "clf", scfg.n_classes, seed=int(make_rng(seed, "cl-head").integers(2**31)))
    model.set_trainable(True, True)

    tasks = []
    for e in stream.experiences:
        to_global = lambda y, c=e.classes: np.asarray(c)[y]  # noqa: E731
        tasks.append([enc.labeled(d, to_global) for d in e.downstream.all()])
    if memory is None:
        memory = int(round(0.1 * sum(len(t[0][1]) for t in tasks)))
    record = RunRecord(config=cfg.to_dict(), seed=seed, objective="clf", fc_dataset_id=stream.fc.dataset_id())
    record.strategy = strategy if strategy == "naive" else f"replay({memory})"

    budget = cfg.sequential or cfg.finetune
    opt = Optimizer(model.parameters(), budget.optimizer, budget.lr)
    mem_x: list[np.ndarray] = []
    mem_y: list[int] = []
    reservoir = Reservoir(memory if strategy == "replay" else 0, make_rng(seed, "reservoir"))
    R: list[list[float]] = []
    classes_seen = 0
    for ti, ((xtr, ytr), _, _) in enumerate(tasks):
        classes_seen += len(np.unique(ytr))
        if strategy == "replay" and 0 < memory < classes_seen:
            warnings.warn(f"replay memory of {memory} samples is smaller than the {classes_seen} classes seen", RuntimeWarning)
        for epoch in range(budget.epochs):
            ep_rng = make_rng(seed, "cl", ti, epoch)
            order = ep_rng.permutation(len(xtr))
            for b, s in enumerate(range(0, len(order), budget.batch_size)):
                idx = order[s : s + budget.batch_size]
                xb, yb_ = xtr[idx], ytr[idx]
                if strategy == "replay" and len(reservoir):
                    pick = ep_rng.integers(0, len(reservoir), size=len(idx))
                    slots = [reservoir.items[p] for p in pick]
                    xb = np.concatenate([xb, np.stack([mem_x[k] for k in slots])])
                    yb_ = np.concatenate([yb_, np.asarray([mem_y[k] for k in slots])])
                logits, _ = forward(model, xb, training=True, rng=make_rng(seed, "cl-drop", ti, epoch, b))
                loss = T.softmax_ce(logits, yb_)
                opt.zero_grad()
                loss.backward()
                opt.step()
        if strategy == "replay":
            for k in range(len(xtr)):
                mem_x.append(xtr[k])
                mem_y.append(int(ytr[k]))
                reservoir.offer(len(mem_x) - 1)
        R.append([accuracy(model, xte, yte) for (_, _, (xte, yte)) in tasks])
    record.R = R
    record.acc = acc_metric(R, len(R)) if R else None
    record.wall_clock = time.perf_counter() - t0
    return record


# -- tables -------------------------------------------------------------------
GAP = "-"


def _fmt(v) -> str:
    return GAP if v is None else f"{float(v):.4f}"


def flat_tables(record: RunRecord, baseline: RunRecord | None = None) -> dict[str, str]:
    """Per-metric tables: one ``Base`` column followed by ``e1..eN``."""
    base = baseline or record
    n = max((e.index for e in record.experiences), default=0)
    by_index = {e.index: e for e in record.experiences}
    cols = ["Base"] + [f"e{i}" for i in range(1, n + 1)]
    out = {}
    spec = {
        "fc_accuracy": ("fc_acc", "fc_acc"),
        "fc_one_epoch": ("fc_one_epoch", "fc_one_epoch"),
        "fc_linear": ("fc_linear", "fc_linear"),
        "downstream_accuracy": (None, "downstream_acc"),
        "downstream_one_epoch": (None, "downstream_one_epoch"),
    }
    for name, (bkey, ekey) in spec.items():
        row = [_fmt(base.baseline.get(bkey)) if bkey else GAP]
        row += [_fmt(getattr(by_index[i], ekey)) if i in by_index else GAP for i in range(1, n + 1)]
        out[name] = "\t".join(["metric"] + cols) + "\n" + "\t".join([name] + row) + "\n"
    fg = [GAP]
    for i in range(1, n + 1):
        e = by_index.get(i)
        fg.append(_fmt(forgetting(base.baseline.get("fc_acc"), e.fc_acc) if e else None))
    out["forgetting"] = "\t".join(["metric"] + cols) + "\n" + "\t".join(["forgetting"] + fg) + "\n"
    return out


# -- desk presets -------------------------------------------------------------
def desk_config(objective: str, modality: str = "text", seed: int = 0, family: str = "transformer", **overrides) -> RunConfig:
    """Small budgets and models that keep one run in the minutes range on one core."""
    if modality == "text":
        stream = StreamConfig(
            seed=seed,
            modality="text",
            n_base=2000,
            n_pretrain=1000,
            n_downstream_train=300,
            n_downstream_val=100,
            n_downstream_test=200,
            n_fc_train=300,
            n_fc_val=200,
            n_fc_test=400,
        )
        model = ModelSpec(family="transformer", depth=4, width=32, heads=4, max_sequence=32)
    else:
        stream = StreamConfig(
            seed=seed,
            modality="image",
            image_size=16,
            n_base=2000,
            n_pretrain=1000,
            n_downstream_train=300,
            n_downstream_val=100,
            n_downstream_test=200,
            n_fc_train=300,
            n_fc_val=200,
            n_fc_test=400,
        )
        model = ModelSpec(family=family, depth=4, width=32, heads=4, patch=4)
    cfg = RunConfig(
        objective=objective,
        stream=stream,
        model=model,
        seed=seed,
        initial=Budget(epochs=10, lr=1e-3, patience=2),
        pretrain=Budget(epochs=6, lr=1e-3, patience=2),
        finetune=Budget(epochs=5, lr=1e-3, batch_size=16),
        probe=Budget(epochs=20, lr=1e-2),
        sequential=Budget(epochs=10, lr=1e-3, batch_size=16),
        codebook_size=32,
    )
    return replace(cfg, **overrides) if overrides else cfg
