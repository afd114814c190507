"""Synthetic experience streams for text and images.

Text
    A shared base lexicon is split into ``n_topics`` topics.  A topic's
    unigram distribution puts ``topic_weight`` of its mass on the topic's own
    words and spreads the rest uniformly over the whole base lexicon.  The
    base corpus (initial pre-training) is labeled by topic.  Each stream class
    owns a Zipf-distributed class vocabulary; a class document draws a class
    word with probability ``class_weight`` and otherwise a base word from a
    random topic.  Half of every class vocabulary also leaks into the base
    corpus at rate ``leak`` (so the base tokenizer knows it); the other half
    never appears there and is what vocabulary expansion can add.  The
    forgetting-control (FC) task classifies topics from documents that use the
    base lexicon only.

Images
    Base textures are oriented sinusoidal gratings, one orientation per
    topic.  Stream classes draw a class-specific shape in a class-specific
    color on top of a random base texture.  FC images are textures only
    (label = orientation), rendered with their own tint.

Every split is deduplicated by content hash across the whole stream; a
generator that cannot supply enough distinct samples raises
:class:`~cptlab.errors.CapacityError`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .core.rng import make_rng
from .core.snapshot import save_tensors
from .errors import CapacityError, ContractError

_CONSONANTS = "bcdfghjklmnpqrstvwxz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class StreamConfig:
    seed: int
    modality: str = "text"
    n_experiences: int = 5
    classes_per_experience: int = 2
    n_base: int = 4000
    n_pretrain: int = 2000
    n_downstream_train: int = 500
    n_downstream_val: int = 100
    n_downstream_test: int = 200
    n_fc_train: int = 1000
    n_fc_val: int = 200
    n_fc_test: int = 400
    n_topics: int = 4
    # text knobs
    n_base_words: int = 80
    class_words: int = 12
    doc_length: tuple[int, int] = (16, 30)
    topic_weight: float = 0.5
    fc_topic_weight: float = 0.25
    class_weight: float = 0.3
    leak: float = 0.03
    # image knobs
    image_size: int = 32
    channels: int = 3
    jitter: float = 1.0
    noise: float = 0.05
    orientation_noise: float = 0.25  # radians; topic spacing is pi / n_topics
    n_base_colors: int = 4

    @property
    def n_base_labels(self) -> int:
        """Label count of the base set: topics (text) or topic x object color (images)."""
        return self.n_topics if self.modality == "text" else self.n_topics * self.n_base_colors

    @property
    def n_classes(self) -> int:
        return self.n_experiences * self.classes_per_experience

    def validate(self) -> "StreamConfig":
        if self.modality not in ("text", "image"):
            raise ContractError(f"modality must be 'text' or 'image', got {self.modality!r}")
        counts = {k: v for k, v in asdict(self).items() if k.startswith("n_") and k != "n_experiences"}
        for k, v in counts.items():
            if v <= 0:
                raise ContractError(f"{k} must be positive, got {v}")
        if self.n_experiences < 0 or self.classes_per_experience < 1:
            raise ContractError("n_experiences must be >= 0 and classes_per_experience >= 1")
        if self.modality == "text" and self.doc_length[0] < 1:
            raise ContractError("doc_length must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class AccessLog:
    """Records every dataset read together with the scenario phase."""

    def __init__(self) -> None:
        self.phase: int = 0
        self.events: list[tuple[int, str]] = []

    def touch(self, name: str) -> None:
        self.events.append((self.phase, name))

    def to_lines(self) -> list[str]:
        return [f"{p}\t{n}" for p, n in self.events]


@dataclass
class Dataset:
    """A named split. ``inputs`` is a list of strings (text) or a float array (images)."""

    name: str
    inputs: Any
    labels: np.ndarray | None = None
    log: AccessLog | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.inputs)

    def read(self):
        """Return ``(inputs, labels)`` and log the access."""
        if self.log is not None:
            self.log.touch(self.name)
        return self.inputs, self.labels

    def hashes(self) -> list[str]:
        return [sample_hash(x) for x in self.inputs]


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    def all(self) -> list[Dataset]:
        return [self.train, self.val, self.test]


@dataclass
class Experience:
    index: int  # 1-based, matching e_1 .. e_n
    classes: tuple[int, ...]
    pretrain: Dataset
    downstream: Splits


@dataclass
class FcDataset:
    splits: Splits
    n_classes: int
    tag: str

    @property
    def train(self) -> Dataset:
        return self.splits.train

    @property
    def val(self) -> Dataset:
        return self.splits.val

    @property
    def test(self) -> Dataset:
        return self.splits.test

    def dataset_id(self) -> str:
        h = hashlib.sha256(self.tag.encode())
        for d in self.splits.all():
            for s in d.hashes():
                h.update(s.encode())
        return h.hexdigest()[:16]


@dataclass
class Stream:
    config: StreamConfig
    base: Dataset
    experiences: list[Experience]
    fc: FcDataset
    generator: dict[str, Any] = field(default_factory=dict, repr=False)

    def datasets(self) -> list[Dataset]:
        out = [self.base]
        for e in self.experiences:
            out += [e.pretrain, *e.downstream.all()]
        return out + self.fc.splits.all()

    def attach_log(self, log: AccessLog | None) -> None:
        for d in self.datasets():
            d.log = log

    def __iter__(self):
        # unpacks as (base, experiences, fc)
        return iter((self.base, self.experiences, self.fc))


def sample_hash(x) -> str:
    if isinstance(x, str):
        return hashlib.sha1(x.encode()).hexdigest()
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float32).tobytes()).hexdigest()


def _dedup_fill(
    name: str,
    n: int,
    sample: Callable[[np.random.Generator, int], tuple[list, np.ndarray]],
    seed: int,
    seen: set[str],
    max_rounds: int = 20,
):
    """Draw ``n`` samples whose hashes are new to ``seen``."""
    inputs: list = []
    labels: list = []
    for rnd in range(max_rounds):
        need = n - len(inputs)
        if need == 0:
            break
        xs, ys = sample(make_rng(seed, name, rnd), need)
        for x, y in zip(xs, ys):
            h = sample_hash(x)
            if h in seen:
                continue
            seen.add(h)
            inputs.append(x)
            labels.append(y)
    if len(inputs) < n:
        raise CapacityError(f"{name}: generator produced only {len(inputs)} distinct samples of {n}")
    return inputs, np.asarray(labels, dtype=np.int64)


# -- text ------------------------------------------------------------------
def _lexicon(rng: np.random.Generator, n: int) -> list[str]:
    total = len(_CONSONANTS) ** 3 * len(_VOWELS) ** 2
    if n > total:
        raise CapacityError(f"lexicon of {n} words exceeds {total} available")
    picks = rng.choice(total, size=n, replace=False)
    words = []
    for p in picks:
        p = int(p)
        chars = []
        for alphabet in (_CONSONANTS, _VOWELS, _CONSONANTS, _VOWELS, _CONSONANTS):
            p, r = divmod(p, len(alphabet))
            chars.append(alphabet[r])
        words.append("".join(chars))
    return words


def _text_generator(cfg: StreamConfig) -> dict[str, Any]:
    rng = make_rng(cfg.seed, "text-lexicon")
    n_class_words = cfg.n_classes * cfg.class_words
    words = _lexicon(rng, cfg.n_base_words + n_class_words)
    base = words[: cfg.n_base_words]
    group = cfg.n_base_words // cfg.n_topics
    topics = []
    for t in range(cfg.n_topics):
        p = np.full(cfg.n_base_words, (1.0 - cfg.topic_weight) / cfg.n_base_words)
        p[t * group : (t + 1) * group] += cfg.topic_weight / group
        topics.append(p)
    fc_topics = []
    for t in range(cfg.n_topics):
        p = np.full(cfg.n_base_words, (1.0 - cfg.fc_topic_weight) / cfg.n_base_words)
        p[t * group : (t + 1) * group] += cfg.fc_topic_weight / group
        fc_topics.append(p)
    zipf = 1.0 / np.arange(1, cfg.class_words + 1)
    zipf /= zipf.sum()
    class_vocab = [words[cfg.n_base_words + c * cfg.class_words : cfg.n_base_words + (c + 1) * cfg.class_words] for c in range(cfg.n_classes)]
    half = cfg.class_words // 2
    shared = [w for v in class_vocab for w in v[:half]]
    novel = [w for v in class_vocab for w in v[half:]]
    return {
        "base_words": base,
        "topics": np.array(topics),
        "fc_topics": np.array(fc_topics),
        "class_vocab": class_vocab,
        "class_probs": zipf,
        "shared_class_words": shared,
        "novel_class_words": novel,
    }


def _doc_lengths(rng, cfg: StreamConfig, n: int) -> np.ndarray:
    lo, hi = cfg.doc_length
    return rng.integers(lo, hi + 1, size=n)


def _topic_docs(gen, cfg, dists, leak: float):
    base = np.array(gen["base_words"])
    shared = np.array(gen["shared_class_words"])

    def sample(rng, n):
        lens = _doc_lengths(rng, cfg, n)
        topics = rng.integers(0, cfg.n_topics, size=n)
        docs = []
        for t, L in zip(topics, lens):
            toks = base[rng.choice(len(base), size=L, p=dists[t])]
            if leak > 0 and len(shared):
                hit = rng.random(L) < leak
                toks = np.where(hit, shared[rng.integers(0, len(shared), size=L)], toks)
            docs.append(" ".join(toks))
        return docs, topics

    return sample


def _class_docs(gen, cfg, classes: Sequence[int]):
    base = np.array(gen["base_words"])
    vocabs = [np.array(v) for v in gen["class_vocab"]]

    def sample(rng, n):
        lens = _doc_lengths(rng, cfg, n)
        labels = np.asarray(classes)[rng.integers(0, len(classes), size=n)]
        docs = []
        for c, L in zip(labels, lens):
            t = rng.integers(0, cfg.n_topics)
            toks = base[rng.choice(len(base), size=L, p=gen["topics"][t])]
            cw = vocabs[c][rng.choice(cfg.class_words, size=L, p=gen["class_probs"])]
            toks = np.where(rng.random(L) < cfg.class_weight, cw, toks)
            docs.append(" ".join(toks))
        return docs, labels

    return sample


def _local(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[int(c)] for c in labels], dtype=np.int64)


def _build_stream(cfg: StreamConfig, base_sampler, class_sampler, fc_sampler, generator, as_array: bool) -> Stream:
    seen: set[str] = set()
    seed = cfg.seed

    def make(name, n, sampler, relabel=None):
        xs, ys = _dedup_fill(name, n, sampler, seed, seen)
        if relabel is not None:
            ys = relabel(ys)
        inputs = np.stack(xs).astype(np.float32) if as_array else xs
        return Dataset(name=name, inputs=inputs, labels=ys)

    base = make("base", cfg.n_base, base_sampler)
    experiences = []
    for i in range(cfg.n_experiences):
        classes = tuple(range(i * cfg.classes_per_experience, (i + 1) * cfg.classes_per_experience))
        sampler = class_sampler(classes)
        tag = f"e{i + 1}"
        pr = make(f"{tag}/pr", cfg.n_pretrain, sampler)
        relabel = lambda ys, classes=classes: _local(ys, classes)  # noqa: E731
        ds = Splits(
            make(f"{tag}/ds-train", cfg.n_downstream_train, sampler, relabel),
            make(f"{tag}/ds-val", cfg.n_downstream_val, sampler, relabel),
            make(f"{tag}/ds-test", cfg.n_downstream_test, sampler, relabel),
        )
        experiences.append(Experience(index=i + 1, classes=classes, pretrain=pr, downstream=ds))
    fc = FcDataset(
        splits=Splits(
            make("fc/train", cfg.n_fc_train, fc_sampler),
            make("fc/val", cfg.n_fc_val, fc_sampler),
            make("fc/test", cfg.n_fc_test, fc_sampler),
        ),
        n_classes=cfg.n_topics,
        tag=f"fc-{cfg.modality}-topics{cfg.n_topics}",
    )
    return Stream(config=cfg, base=base, experiences=experiences, fc=fc, generator=generator)


def gen_text_stream(cfg: StreamConfig) -> Stream:
    """Base corpus, stream of experiences and FC dataset for the text modality."""
    cfg.validate()
    if cfg.modality != "text":
        raise ContractError("gen_text_stream needs modality='text'")
    gen = _text_generator(cfg)
    return _build_stream(
        cfg,
        _topic_docs(gen, cfg, gen["topics"], cfg.leak),
        lambda classes: _class_docs(gen, cfg, classes),
        _topic_docs(gen, cfg, gen["fc_topics"], 0.0),
        gen,
        as_array=False,
    )


def class_distribution(gen: dict, cfg: StreamConfig, c: int) -> dict[str, float]:
    """Exact unigram distribution of stream class ``c``."""
    out: dict[str, float] = {}
    base_mix = np.mean(gen["topics"], axis=0)
    for w, p in zip(gen["base_words"], base_mix):
        out[w] = out.get(w, 0.0) + (1 - cfg.class_weight) * p
    for w, p in zip(gen["class_vocab"][c], gen["class_probs"]):
        out[w] = out.get(w, 0.0) + cfg.class_weight * p
    return out


def fc_distribution(gen: dict) -> dict[str, float]:
    mix = np.mean(gen["fc_topics"], axis=0)
    return dict(zip(gen["base_words"], mix))


def js_divergence(p: dict[str, float], q: dict[str, float]) -> float:
    keys = sorted(set(p) | set(q))
    a = np.array([p.get(k, 0.0) for k in keys])
    b = np.array([q.get(k, 0.0) for k in keys])
    m = 0.5 * (a + b)

    def kl(x, y):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / y[nz])))

    return 0.5 * kl(a, m) + 0.5 * kl(b, m)


# -- images ----------------------------------------------------------------
_SHAPES = ("disk", "square", "triangle", "cross", "ring")
_BASE_SHAPES = ("hbar", "vbar", "diamond", "corner", "dot", "xbar")


def _hue_color(hue: float) -> np.ndarray:
    k = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    return 0.5 + 0.45 * np.cos(2 * np.pi * (hue - k))


def _class_color(c: int, n: int) -> np.ndarray:
    return _hue_color(c / max(n, 1))


def _grid(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return (x + 0.5) / size - 0.5, (y + 0.5) / size - 0.5


def _textures(rng, cfg: StreamConfig, topics: np.ndarray, jitter: float) -> np.ndarray:
    """Grayscale gratings ``[n, H, W]`` in [0, 1]."""
    xx, yy = _grid(cfg.image_size)
    n = len(topics)
    theta = np.pi * topics / cfg.n_topics + jitter * rng.normal(0, cfg.orientation_noise, n)
    freq = 4.0 + jitter * rng.uniform(-0.5, 0.5, n)
    phase = jitter * rng.uniform(0, 2 * np.pi, n)
    arg = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]) * freq[:, None, None]
    return 0.5 + 0.5 * np.sin(2 * np.pi * arg + phase[:, None, None])


def _shape_mask(shape: str, xx, yy, cx, cy, r):
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return (dx**2 + dy**2) <= r**2
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        return ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r))
    if shape == "hbar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.3)
    if shape == "vbar":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r * 0.3)
    if shape == "diamond":
        return (np.abs(dx) + np.abs(dy)) <= r
    if shape == "corner":
        return ((np.abs(dx + r * 0.35) <= r * 0.3) | (np.abs(dy - r * 0.35) <= r * 0.3)) & (np.abs(dx) <= r * 0.65) & (np.abs(dy) <= r * 0.65)
    if shape == "dot":
        return (dx**2 + dy**2) <= (0.5 * r) ** 2
    if shape == "xbar":
        return (np.abs(dx - dy) <= r * 0.35) & (np.abs(dx + dy) <= r * 1.4)
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


def _finish(rng, cfg: StreamConfig, img: np.ndarray, jitter: float) -> np.ndarray:
    if cfg.noise > 0 and jitter > 0:
        img = img + rng.normal(0, cfg.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img[..., : cfg.channels] if cfg.channels < 3 else img


def render_texture_images(rng, cfg: StreamConfig, topics: np.ndarray, tint: np.ndarray, jitter: float):
    tex = _textures(rng, cfg, topics, jitter)
    img = tex[..., None] * tint[None, None, None, :] + (1 - tex[..., None]) * (1 - tint[None, None, None, :]) * 0.3
    return _finish(rng, cfg, img, jitter)


def render_class_images(rng, cfg: StreamConfig, c: int, n: int, jitter: float) -> np.ndarray:
    """``n`` images of stream class ``c``: class shape and color over a random base texture."""
    xx, yy = _grid(cfg.image_size)
    if jitter > 0:
        topics = rng.integers(0, cfg.n_topics, size=n)
    else:
        topics = np.full(n, c % cfg.n_topics)
    tex = _textures(rng, cfg, topics, jitter)
    background = 0.25 + 0.5 * tex[..., None] * np.ones(3)
    color = _class_color(c, cfg.n_classes)
    shape = _SHAPES[c % len(_SHAPES)]
    imgs = np.empty((n, cfg.image_size, cfg.image_size, 3))
    for k in range(n):
        cx, cy = jitter * rng.uniform(-0.08, 0.08, 2)
        r = 0.28 * (1.0 + jitter * rng.uniform(-0.1, 0.1))
        m = _shape_mask(shape, xx, yy, cx, cy, r)
        shade = color * (1.0 + jitter * rng.uniform(-0.08, 0.08))
        imgs[k] = np.where(m[..., None], shade, background[k])
    return _finish(rng, cfg, imgs, jitter)


def render_base_images(rng, cfg: StreamConfig, labels: np.ndarray, jitter: float) -> np.ndarray:
    """Base images: a topic grating plus one object whose color family is part of the label.

    ``label = topic * n_base_colors + color``; the object's shape is a random
    member of a base-only shape family.
    """
    topics, colors = np.divmod(labels, cfg.n_base_colors)
    xx, yy = _grid(cfg.image_size)
    tex = _textures(rng, cfg, topics, jitter)
    imgs = tex[..., None] * _BASE_TINT + (1 - tex[..., None]) * (1 - _BASE_TINT) * 0.3
    for k in range(len(labels)):
        cx, cy = jitter * rng.uniform(-0.12, 0.12, 2)
        r = 0.28 * (1.0 + jitter * rng.uniform(-0.1, 0.1))
        shape = _BASE_SHAPES[int(rng.integers(len(_BASE_SHAPES)))]
        hue = (colors[k] + 0.5 + jitter * rng.uniform(-0.15, 0.15)) / cfg.n_base_colors
        m = _shape_mask(shape, xx, yy, cx, cy, r)
        imgs[k] = np.where(m[..., None], _hue_color(hue), imgs[k])
    return _finish(rng, cfg, imgs, jitter)


_BASE_TINT = np.array([0.9, 0.9, 0.9])
_FC_TINT = np.array([0.95, 0.8, 0.6])


def _image_samplers(cfg: StreamConfig):
    def base(rng, n):
        labels = rng.integers(0, cfg.n_base_labels, size=n)
        return list(render_base_images(rng, cfg, labels, cfg.jitter)), labels

    def fc(rng, n):
        topics = rng.integers(0, cfg.n_topics, size=n)
        return list(render_texture_images(rng, cfg, topics, _FC_TINT, cfg.jitter)), topics

    def klass(classes):
        def sample(rng, n):
            labels = np.asarray(classes)[rng.integers(0, len(classes), size=n)]
            out = np.empty((n, cfg.image_size, cfg.image_size, cfg.channels))
            for c in classes:
                idx = np.flatnonzero(labels == c)
                if len(idx):
                    out[idx] = render_class_images(rng, cfg, c, len(idx), cfg.jitter)
            return list(out), labels

        return sample

    return base, klass, fc


def gen_image_stream(cfg: StreamConfig) -> Stream:
    """Base image set, stream of experiences and FC dataset for the image modality."""
    cfg.validate()
    if cfg.modality != "image":
        raise ContractError("gen_image_stream needs modality='image'")
    base, klass, fc = _image_samplers(cfg)
    gen = {"shapes": [_SHAPES[c % len(_SHAPES)] for c in range(cfg.n_classes)]}
    return _build_stream(cfg, base, klass, fc, gen, as_array=True)


def generate(cfg: StreamConfig) -> Stream:
    return gen_text_stream(cfg) if cfg.modality == "text" else gen_image_stream(cfg)


# -- export ------------------------------------------------------------------
def dump_stream(stream: Stream, directory: str | Path) -> list[Path]:
    """Write every split: JSON lines for text, tensor container + labels for images."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in stream.datasets():
        stem = ds.name.replace("/", "_")
        labels = [] if ds.labels is None else [int(y) for y in ds.labels]
        if stream.config.modality == "text":
            path = d / f"{stem}.jsonl"
            with open(path, "w") as fh:
                for i, x in enumerate(ds.inputs):
                    rec = {"id": i, "text": x, "label": labels[i] if labels else None}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        else:
            path = d / f"{stem}.cpts"
            save_tensors(path, [np.asarray(ds.inputs, dtype=np.float32), np.asarray(labels, dtype=np.float32)])
        written.append(path)
    return written


def initial_pretrain(model, objective, x, y, budget, seed: int):
    """Pre-train a fresh model on the base distribution, giving the forgetting baseline ``h_0``.

    With a zero-epoch budget the initialized model is returned unchanged.
    """
    from .training import pretrain

    h0, _ = pretrain(model, objective, x, y, budget, seed, tag="h0")
    return h0
