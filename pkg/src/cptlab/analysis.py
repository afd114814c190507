"""Linear-kernel CKA between model checkpoints, estimated in minibatches.

The minibatch estimator averages the unbiased HSIC estimator over shuffled
minibatches and several passes, then forms::

    CKA = mean HSIC(K, L) / sqrt(mean HSIC(K, K) * mean HSIC(L, L))

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import tensor as T
from .core.rng import make_rng
from .core.snapshot import load_tensors, save_tensors
from .errors import AlignmentError, DataError, DegeneracyError, EstimatorDomainError
from .models import Model, forward, model_hash

EPS = 1e-6


def gram_linear(x) -> np.ndarray:
    """``X @ X.T`` in float64, made exactly symmetric."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EstimatorDomainError(f"gram_linear needs [n >= 2, d], got {x.shape}")
    k = x @ x.T
    return 0.5 * (k + k.T)


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC estimator on symmetric gram matrices (n >= 4)."""
    n = k.shape[0]
    if n < 4:
        raise EstimatorDomainError(f"unbiased HSIC needs n >= 4, got {n}")
    if l.shape != k.shape:
        raise AlignmentError(f"gram shapes differ: {k.shape} vs {l.shape}")
    kt = np.array(k, dtype=np.float64)
    lt = np.array(l, dtype=np.float64)
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    ks, ls = kt.sum(axis=1), lt.sum(axis=1)
    trace = np.sum(kt * lt)
    ones = ks.sum() * ls.sum() / ((n - 1) * (n - 2))
    cross = 2.0 / (n - 2) * np.sum(ks * ls)
    return float((trace + ones - cross) / (n * (n - 3)))


def _center(k: np.ndarray) -> np.ndarray:
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def cka_biased(x, y) -> float:
    """Full-batch CKA with the biased (centered-gram) HSIC."""
    kc, lc = _center(gram_linear(x)), _center(gram_linear(y))
    den = np.sqrt(np.sum(kc * kc) * np.sum(lc * lc))
    if den <= 0:
        raise DegeneracyError("zero-variance representation")
    return float(np.sum(kc * lc) / den)


def cka_unbiased(x, y) -> float:
    """Full-batch CKA with the unbiased HSIC estimator."""
    k, l = gram_linear(x), gram_linear(y)
    xx, yy = hsic_unbiased(k, k), hsic_unbiased(l, l)
    if xx <= 0 or yy <= 0:
        raise DegeneracyError(f"non-positive HSIC denominator ({xx:.3g}, {yy:.3g})")
    return float(hsic_unbiased(k, l) / np.sqrt(xx * yy))


def _minibatches(n: int, batch_size: int, passes: int, rng: np.random.Generator):
    if batch_size < 4:
        raise EstimatorDomainError(f"batch size must be >= 4, got {batch_size}")
    if n < batch_size:
        raise DataError(f"probe set of {n} samples is smaller than one batch ({batch_size})")
    for _ in range(passes):
        perm = rng.permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield perm[s : s + batch_size]


def _ratio(xy: float, xx: float, yy: float) -> float:
    if xx <= 0 or yy <= 0:
        raise DegeneracyError(f"non-positive HSIC denominator ({xx:.3g}, {yy:.3g})")
    return float(np.clip(xy / np.sqrt(xx * yy), -EPS, 1.0 + EPS))


def cka_minibatch(
    x,
    y,
    batch_size: int = 16,
    passes: int = 10,
    rng: np.random.Generator | None = None,
    ids_x=None,
    ids_y=None,
) -> float:
    """Minibatch CKA between two activation matrices over the same samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise AlignmentError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if ids_x is not None or ids_y is not None:
        if ids_x is None or ids_y is None or not np.array_equal(np.asarray(ids_x), np.asarray(ids_y)):
            raise AlignmentError("activation dumps do not share sample ids and ordering")
    rng = make_rng(0, "cka") if rng is None else rng
    xy = xx = yy = 0.0
    count = 0
    for idx in _minibatches(x.shape[0], batch_size, passes, rng):
        k, l = gram_linear(x[idx]), gram_linear(y[idx])
        xy += hsic_unbiased(k, l)
        xx += hsic_unbiased(k, k)
        yy += hsic_unbiased(l, l)
        count += 1
    return _ratio(xy / count, xx / count, yy / count)


# -- activation dumps and layer matrices ------------------------------------
@dataclass
class ActivationDump:
    checkpoint_id: str
    probe_id: str
    taps: list[str]
    values: dict[str, np.ndarray]  # tap -> [n, d] float64
    sample_ids: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def save(self, path: str | Path) -> None:
        """Tensor container: sample ids, then one matrix per tap in tap order."""
        save_tensors(path, [self.sample_ids.astype(np.float64)] + [self.values[t] for t in self.taps])
        Path(str(path) + ".taps").write_text(
            "\n".join([self.checkpoint_id, self.probe_id] + self.taps) + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "ActivationDump":
        arrays = load_tensors(path)
        lines = Path(str(path) + ".taps").read_text().splitlines()
        ckpt, probe, taps = lines[0], lines[1], lines[2:]
        return cls(ckpt, probe, taps, dict(zip(taps, arrays[1:])), arrays[0].astype(np.int64))


def collect_activations(model: Model, x, probe_id: str = "probe", batch_size: int = 128, sample_ids=None) -> ActivationDump:
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in model.taps}
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            _, acts = forward(model, x[s : s + batch_size], want_logits=False) if model.head is None else forward(model, x[s : s + batch_size])
            for t in model.taps:
                chunks[t].append(acts[t].data.astype(np.float64))
    values = {t: np.concatenate(v) for t, v in chunks.items()}
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    return ActivationDump(model_hash(model)[:16], probe_id, list(model.taps), values, ids)


@dataclass(frozen=True)
class CkaConfig:
    batch_size: int = 16
    passes: int = 10
    seed: int = 0
    estimator: str = "unbiased-minibatch"  # or "biased"


@dataclass
class CkaMatrix:
    rows: list[str]
    cols: list[str]
    values: np.ndarray
    estimator: str
    meta: dict = field(default_factory=dict)

    def to_table(self, header_lines: list[str] | None = None) -> str:
        lines = [f"# {h}" for h in (header_lines or [])]
        lines.append("\t".join(["tap"] + self.cols))
        for r, row in zip(self.rows, self.values):
            lines.append("\t".join([r] + [f"{v:.10f}" for v in row]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text: str, estimator: str = "unbiased-minibatch") -> "CkaMatrix":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        cols = rows[0].split("\t")[1:]
        names, vals = [], []
        for ln in rows[1:]:
            parts = ln.split("\t")
            names.append(parts[0])
            vals.append([float(v) for v in parts[1:]])
        return cls(names, cols, np.array(vals), estimator)


def cka_from_dumps(a: ActivationDump, b: ActivationDump, cfg: CkaConfig = CkaConfig()) -> CkaMatrix:
    if not np.array_equal(a.sample_ids, b.sample_ids):
        raise AlignmentError("activation dumps do not share sample ids and ordering")
    values = np.zeros((len(a.taps), len(b.taps)))
    if cfg.estimator == "biased":
        for i, ta in enumerate(a.taps):
            for j, tb in enumerate(b.taps):
                values[i, j] = cka_biased(a.values[ta], b.values[tb])
        return CkaMatrix(list(a.taps), list(b.taps), values, cfg.estimator)
    xy = np.zeros_like(values)
    xx = np.zeros(len(a.taps))
    yy = np.zeros(len(b.taps))
    count = 0
    rng = make_rng(cfg.seed, "cka-shuffle")
    for idx in _minibatches(a.n, cfg.batch_size, cfg.passes, rng):
        ka = [gram_linear(a.values[t][idx]) for t in a.taps]
        kb = [gram_linear(b.values[t][idx]) for t in b.taps]
        for i, k in enumerate(ka):
            xx[i] += hsic_unbiased(k, k)
            for j, l in enumerate(kb):
                xy[i, j] += hsic_unbiased(k, l)
        for j, l in enumerate(kb):
            yy[j] += hsic_unbiased(l, l)
        count += 1
    for i in range(len(a.taps)):
        for j in range(len(b.taps)):
            values[i, j] = _ratio(xy[i, j] / count, xx[i] / count, yy[j] / count)
    return CkaMatrix(list(a.taps), list(b.taps), values, cfg.estimator)


def layer_cka(model_a: Model, model_b: Model, probe_x, cfg: CkaConfig = CkaConfig(), probe_id: str = "probe") -> CkaMatrix:
    """Tap-by-tap CKA between two checkpoints on a shared probe set."""
    if len(probe_x) < cfg.batch_size:
        raise DataError(f"probe set of {len(probe_x)} samples is smaller than one batch ({cfg.batch_size})")
    a = collect_activations(model_a, probe_x, probe_id)
    b = collect_activations(model_b, probe_x, probe_id)
    m = cka_from_dumps(a, b, cfg)
    m.meta = {"a": a.checkpoint_id, "b": b.checkpoint_id, "probe": probe_id}
    return m


def quartile_means(matrix: CkaMatrix) -> tuple[float, float]:
    """Mean diagonal CKA over the bottom and top quarter of taps (at least one tap each)."""
    diag = np.diag(matrix.values)
    q = max(1, len(diag) // 4)
    return float(diag[:q].mean()), float(diag[-q:].mean())
