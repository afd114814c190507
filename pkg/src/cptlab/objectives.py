"""Pre-training objectives: masked language modeling, masked image modeling
over a frozen k-means patch codebook, and supervised classification.

Both masking transforms share one convention: ``targets`` holds the original
token (or nearest code index) at selected positions and :data:`IGNORE`
everywhere else.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import tensor as T
from .errors import ContractError, DegenerateCodebookError, HeadError
from .models import Model, forward, patchify
from .tokenizer import CLS, MASK, PAD, SPECIALS

IGNORE = -100


@dataclass(frozen=True)
class MaskingPlan:
    mask_prob: float
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # mask / random / keep
    special: frozenset[int] = frozenset()

    def validate(self) -> "MaskingPlan":
        # 0 is tolerated as a degenerate "select nothing" plan
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ContractError(f"mask_prob must be in (0, 1], got {self.mask_prob}")
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ContractError(f"split must be three non-negative fractions, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ContractError(f"split must sum to 1, got {sum(self.split)}")
        return self


MLM_PLAN = MaskingPlan(0.15, (0.8, 0.1, 0.1), frozenset({PAD, CLS}))
MIM_PLAN = MaskingPlan(0.4, (1.0, 0.0, 0.0))


class Corrupted(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True when no position was selected (the loss is undefined)."""
        return not np.any(self.targets != IGNORE)


def _select(shape, plan: MaskingPlan, rng: np.random.Generator, eligible: np.ndarray):
    """Draw selection and action masks; all draws are full-shape for determinism."""
    selected = (rng.random(shape) < plan.mask_prob) & eligible
    action = rng.random(shape)
    to_mask = selected & (action < plan.split[0])
    to_random = selected & (action >= plan.split[0]) & (action < plan.split[0] + plan.split[1])
    return selected, to_mask, to_random


def mlm_corrupt(tokens, plan: MaskingPlan, rng: np.random.Generator, vocab_size: int) -> Corrupted:
    """BERT-style corruption of a ``[B, L]`` token matrix."""
    plan.validate()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= vocab_size:
        raise ContractError(f"token id {tokens.max()} outside vocabulary of size {vocab_size}")
    eligible = ~np.isin(tokens, list(plan.special))
    selected, to_mask, to_random = _select(tokens.shape, plan, rng, eligible)
    random_ids = rng.integers(len(SPECIALS), vocab_size, size=tokens.shape)
    inputs = tokens.copy()
    inputs[to_mask] = MASK
    inputs[to_random] = random_ids[to_random]
    targets = np.where(selected, tokens, IGNORE)
    return Corrupted(inputs, targets)


# -- visual codebook --------------------------------------------------------
@dataclass(frozen=True)
class VisualCodebook:
    codes: np.ndarray  # [codebook_size, patch * patch * channels], read-only
    patch: int

    @property
    def codebook_size(self) -> int:
        return self.codes.shape[0]

    @property
    def frozen(self) -> bool:
        return not self.codes.flags.writeable

    def digest(self) -> str:
        return hashlib.sha256(self.codes.tobytes()).hexdigest()

    def assign(self, patches: np.ndarray) -> np.ndarray:
        """Nearest code per patch (squared Euclidean, ties to the lowest index)."""
        p = np.asarray(patches, dtype=np.float64)
        flat = p.reshape(-1, p.shape[-1])
        c = self.codes.astype(np.float64)
        d = (flat * flat).sum(1)[:, None] - 2.0 * flat @ c.T + (c * c).sum(1)[None, :]
        return d.argmin(axis=1).reshape(p.shape[:-1])


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def fit_codebook(patches, codebook_size: int, seed: int, patch: int, iterations: int = 20) -> VisualCodebook:
    """k-means++ seeding followed by a fixed number of Lloyd iterations."""
    from .core.rng import make_rng

    x = np.asarray(patches, dtype=np.float64).reshape(-1, np.asarray(patches).shape[-1])
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < codebook_size:
        raise DegenerateCodebookError(f"{distinct} distinct patches cannot fill {codebook_size} codes")
    rng = make_rng(seed, "codebook", codebook_size)
    centers = _kmeans_pp(x, codebook_size, rng)
    sq = (x * x).sum(1)
    for _ in range(iterations):
        d = sq[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
        assign = d.argmin(axis=1)
        for j in range(codebook_size):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    codes = centers.astype(np.float32)
    codes.setflags(write=False)
    return VisualCodebook(codes=codes, patch=patch)


def mim_corrupt(images, codebook: VisualCodebook | None, plan: MaskingPlan, rng: np.random.Generator) -> Corrupted:
    """Patchify ``[B, H, W, C]`` images, zero the masked patches, target their codes."""
    if codebook is None:
        raise ContractError("mim_corrupt needs a fitted codebook")
    plan.validate()
    images = np.asarray(images, dtype=np.float32)
    if images.shape[1] % codebook.patch or images.shape[2] % codebook.patch:
        raise ContractError(f"image extents {images.shape[1:3]} not divisible by patch {codebook.patch}")
    patches = patchify(images, codebook.patch)
    B, N, _ = patches.shape
    eligible = np.ones((B, N), dtype=bool)
    if plan.special:
        eligible[:, sorted(plan.special)] = False
    selected, to_mask, to_random = _select((B, N), plan, rng, eligible)
    donor = rng.integers(0, B * N, size=(B, N))
    inputs = patches.copy()
    inputs[to_random] = patches.reshape(B * N, -1)[donor[to_random]]
    inputs[to_mask] = 0.0
    codes = codebook.assign(patches)
    targets = np.where(selected, codes, IGNORE)
    return Corrupted(inputs, targets)


# -- losses ------------------------------------------------------------------
_HEAD_FOR = {"mlm": ("mlm",), "mim": ("mim",), "clf": ("clf", "probe")}


def objective_loss(kind: str, model: Model, inputs, targets, training: bool = False, rng=None) -> T.Tensor:
    """Cross-entropy for one prepared batch.

    For ``mlm``/``mim`` ``targets`` is the per-position matrix from the
    corresponding corrupt function; for ``clf`` it is a label vector.
    """
    if kind not in _HEAD_FOR:
        raise ContractError(f"unknown objective {kind!r}")
    if model.head is None or model.head.kind not in _HEAD_FOR[kind]:
        have = None if model.head is None else model.head.kind
        raise HeadError(f"objective {kind!r} needs a {_HEAD_FOR[kind][0]!r} head, model has {have!r}")
    logits, _ = forward(model, inputs, training=training, rng=rng)
    if kind == "clf":
        return T.softmax_ce(logits, targets)
    targets = np.asarray(targets)
    if kind == "mim":
        logits = logits[:, 1:, :]  # drop CLS
    return T.softmax_ce(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)
