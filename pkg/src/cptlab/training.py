"""Training loops shared by the scenario and the traditional-CL baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import tensor as T
from .core.optim import Optimizer
from .core.rng import make_rng
from .errors import DataError, DegenerateBatchError
from .models import Model, forward, pooled_output, replace_head
from .objectives import IGNORE, MaskingPlan, VisualCodebook, mim_corrupt, mlm_corrupt, objective_loss


@dataclass(frozen=True)
class Budget:
    epochs: int
    lr: float
    batch_size: int = 32
    patience: int | None = None
    optimizer: str = "adam"

    def validate(self) -> "Budget":
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError(f"invalid budget {self}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        return self


@dataclass
class Objective:
    """Everything needed to turn a raw batch into ``(inputs, targets)``."""

    kind: str
    vocab_size: int | None = None
    plan: MaskingPlan | None = None
    codebook: VisualCodebook | None = None

    def prepare(self, x, y, rng):
        if self.kind == "mlm":
            c = mlm_corrupt(x, self.plan, rng, self.vocab_size)
            return c.inputs, c.targets
        if self.kind == "mim":
            c = mim_corrupt(x, self.codebook, self.plan, rng)
            return c.inputs, c.targets
        return x, y


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def _snapshot(model: Model) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: Model, arrays: list[np.ndarray]) -> None:
    for p, a in zip(model.parameters(), arrays):
        p.data = a


@dataclass
class PretrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 0 means "no epoch run"


def eval_objective(model: Model, objective: Objective, x, y, batch_size: int, seed: int) -> float:
    """Mean loss with a fixed corruption stream (identical across calls)."""
    losses, weights = [], []
    with T.no_grad():
        for b, idx in enumerate(_batches(len(x), batch_size, None)):
            inp, tgt = objective.prepare(x[idx], None if y is None else y[idx], make_rng(seed, "val", b))
            try:
                loss = objective_loss(objective.kind, model, inp, tgt)
            except DegenerateBatchError:
                continue
            n = len(idx) if objective.kind == "clf" else int(np.sum(np.asarray(tgt) != IGNORE))
            losses.append(loss.item() * n)
            weights.append(n)
    return float(np.sum(losses) / max(np.sum(weights), 1))


def pretrain(
    model: Model,
    objective: Objective,
    x,
    y,
    budget: Budget,
    seed: int,
    tag: str = "pretrain",
    val_fraction: float = 0.1,
) -> tuple[Model, PretrainHistory]:
    """Train body and head on the objective, with optional early stopping.

    ``x``/``y`` are already-encoded arrays. A ``val_fraction`` slice (fixed
    permutation) drives early stopping; the best-validation weights are kept.
    The input model is not modified.
    """
    budget.validate()
    hist = PretrainHistory()
    model = model.copy()
    if budget.epochs == 0:
        return model, hist
    n = len(x)
    if n == 0:
        raise DataError(f"{tag}: empty pre-training set")
    perm = make_rng(seed, tag, "split").permutation(n)
    n_val = int(round(n * val_fraction)) if budget.patience else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    model.set_trainable(True, True)
    opt = Optimizer(model.parameters(), budget.optimizer, budget.lr)
    best, best_loss, stale = None, np.inf, 0
    for epoch in range(budget.epochs):
        ep_rng = make_rng(seed, tag, "epoch", epoch)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(tr_idx), budget.batch_size, ep_rng)):
            rows = tr_idx[idx]
            inp, tgt = objective.prepare(x[rows], None if y is None else y[rows], make_rng(seed, tag, epoch, b))
            try:
                loss = objective_loss(objective.kind, model, inp, tgt, training=True, rng=make_rng(seed, tag, "drop", epoch, b))
            except DegenerateBatchError:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        hist.train_loss.append(total / max(count, 1))
        if n_val:
            vl = eval_objective(model, objective, x[val_idx], None if y is None else y[val_idx], budget.batch_size, seed)
            hist.val_loss.append(vl)
            if vl < best_loss:
                best, best_loss, stale, hist.best_epoch = _snapshot(model), vl, 0, epoch + 1
            else:
                stale += 1
                if stale >= budget.patience:
                    break
        else:
            hist.best_epoch = epoch + 1
    if best is not None:
        _restore(model, best)
    return model, hist


def predict(model: Model, x, batch_size: int = 256) -> np.ndarray:
    preds = []
    with T.no_grad():
        for idx in _batches(len(x), batch_size, None):
            logits, _ = forward(model, x[idx])
            preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, x, y, batch_size: int = 256) -> float:
    if len(x) == 0:
        raise DataError("accuracy on an empty set")
    return float(np.mean(predict(model, x, batch_size) == np.asarray(y)))


@dataclass
class FitResult:
    """Outcome of fine-tuning or linear evaluation on one labeled task."""

    accuracy: float  # test accuracy at the best-validation epoch
    one_epoch_accuracy: float  # test accuracy after exactly one epoch
    test_curve: list[float]
    val_curve: list[float]
    best_epoch: int
    model: Model | None = field(default=None, repr=False)


def _check_labeled(name, x, y):
    if x is None or len(x) == 0:
        raise DataError(f"{name}: empty dataset")
    if y is None:
        raise DataError(f"{name}: dataset has no labels")


def _fit_head(model, params, logits_fn, train, val, test, budget, seed, tag) -> FitResult:
    (xtr, ytr), (xva, yva), (xte, yte) = train, val, test
    opt = Optimizer(params, budget.optimizer, budget.lr)
    test_curve, val_curve = [], []
    best = None
    for epoch in range(budget.epochs):
        ep_rng = make_rng(seed, tag, "epoch", epoch)
        for b, idx in enumerate(_batches(len(xtr), budget.batch_size, ep_rng)):
            logits = logits_fn(xtr[idx], True, make_rng(seed, tag, "drop", epoch, b))
            loss = T.softmax_ce(logits, ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with T.no_grad():
            va = float(np.mean(_argmax(logits_fn, xva) == yva))
            te = float(np.mean(_argmax(logits_fn, xte) == yte))
        val_curve.append(va)
        test_curve.append(te)
        if best is None or va > val_curve[best]:
            best = epoch
            if model is not None:
                kept = _snapshot(model)
    if best is None:
        with T.no_grad():
            te = float(np.mean(_argmax(logits_fn, xte) == yte))
        return FitResult(te, te, [], [], 0, model)
    if model is not None:
        _restore(model, kept)
    return FitResult(test_curve[best], test_curve[0], test_curve, val_curve, best + 1, model)


def _argmax(logits_fn, x, batch_size: int = 256) -> np.ndarray:
    out = [logits_fn(x[idx], False, None).data.argmax(axis=-1) for idx in _batches(len(x), batch_size, None)]
    return np.concatenate(out)


def finetune(model: Model, train, val, test, n_classes: int, budget: Budget, seed: int, tag: str = "finetune") -> FitResult:
    """Swap in a fresh ``n_classes`` head and train everything.

    ``train``/``val``/``test`` are ``(x, y)`` pairs of encoded arrays.  The
    reported accuracy is the test accuracy at the best validation epoch
    (first maximum); the one-epoch accuracy is recorded separately.
    """
    for name, (x, y) in zip(("train", "val", "test"), (train, val, test)):
        _check_labeled(f"{tag}/{name}", x, y)
    budget.validate()
    m = replace_head(model, "clf", n_classes, seed=int(make_rng(seed, tag, "head").integers(2**31)))
    m.set_trainable(True, True)

    def logits_fn(x, training, rng):
        logits, _ = forward(m, x, training=training, rng=rng)
        return logits

    return _fit_head(m, m.parameters(), logits_fn, train, val, test, budget, seed, tag)


def linear_eval(model: Model, train, val, test, n_classes: int, budget: Budget, seed: int, tag: str = "linear") -> FitResult:
    """Train only a linear probe on frozen pooled features; the body is never touched."""
    for name, (x, y) in zip(("train", "val", "test"), (train, val, test)):
        _check_labeled(f"{tag}/{name}", x, y)
    budget.validate()
    feats = [pooled_output(model, x) if len(x) else x for x, _ in (train, val, test)]
    probe = replace_head(model, "probe", n_classes, seed=int(make_rng(seed, tag, "head").integers(2**31))).head
    w, b = probe.params["w"], probe.params["b"]

    def logits_fn(f, training, rng):
        return T.linear(T.Tensor(f, dtype=w.dtype), w, b)

    splits = [(f, y) for f, (_, y) in zip(feats, (train, val, test))]
    return _fit_head(None, [w, b], logits_fn, splits[0], splits[1], splits[2], budget, seed, tag)


@dataclass
class GridResult:
    accuracy: float
    one_epoch_accuracy: float
    best_index: int
    val_scores: list[float]
    configs: list[tuple[float, int]]


def fc_grid_eval(model: Model, train, val, test, n_classes: int, grid, budget: Budget, seed: int, tag: str = "fc") -> GridResult:
    """Fine-tune once per ``(lr, batch_size)``; select on validation, report test."""
    grid = [tuple(g) for g in grid]
    if not grid:
        raise ValueError("grid must be non-empty")
    results = []
    for i, (lr, bs) in enumerate(grid):
        b = Budget(epochs=budget.epochs, lr=float(lr), batch_size=int(bs), optimizer=budget.optimizer)
        results.append(finetune(model, train, val, test, n_classes, b, seed, tag=f"{tag}/grid{i}"))
    scores = [max(r.val_curve) if r.val_curve else 0.0 for r in results]
    best = int(np.argmax(scores))
    return GridResult(results[best].accuracy, results[best].one_epoch_accuracy, best, scores, grid)
