"""Toy model zoo: a pre-LN transformer encoder and a small strided CNN.

Both families expose an ordered list of activation taps, each pooled to a
``[batch, feature]`` matrix so that layer-wise CKA can compare any two
checkpoints of the same spec:

* transformer: ``embed`` (mean over non-padding, non-CLS positions, since the
  CLS position carries no input information before attention), then
  ``block0 .. block{depth-1}`` (the CLS position's vector);
* cnn: ``block0 .. block{depth-1}``, each globally average pooled.

Heads are separate from the body and are always linear:

* ``mlm`` / ``mim``: per-position logits (vocab size / codebook size) on the
  final-layer-normed sequence;
* ``clf`` / ``probe``: ``k`` logits on the final-layer-normed CLS vector (or
  the pooled last CNN block).

Parameter count (``F = mlp_ratio * W``, ``W = width``)::

    transformer body  = input_params + P * W + depth * (4 W^2 + 2 W F + 9 W + F) + 2 W
        text input_params  = vocab_size * W
        image input_params = (patch^2 * channels) * W + W (patch bias) + W (CLS vector)
        P = max_sequence (text) or n_patches + 1 (image)
    cnn body          = 9 * channels * W + (depth - 1) * 9 * W^2 + depth * 2 W
    head              = W * k + k
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .core import tensor as T
from .core.rng import make_rng, truncated_normal
from .core.snapshot import load_tensors, save_named, tensor_bytes
from .errors import ContractError, FamilyError, HeadError, SpecError

HEAD_KINDS = ("mlm", "mim", "clf", "probe")
FAMILIES = ("transformer", "cnn")
PAD_ID = 0


@dataclass(frozen=True)
class ModelSpec:
    family: str = "transformer"
    depth: int = 4
    width: int = 64
    heads: int = 4
    vocab_size: int | None = None
    max_sequence: int = 32
    image_size: int | None = None
    channels: int = 3
    patch: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.0

    @property
    def modality(self) -> str:
        return "image" if self.image_size is not None else "text"

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def sequence_length(self) -> int:
        """Positions seen by the transformer, CLS included."""
        return self.max_sequence if self.modality == "text" else self.n_patches + 1

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise SpecError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1:
            raise SpecError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise SpecError(f"width must be >= 1, got {self.width}")
        if (self.vocab_size is None) == (self.image_size is None):
            raise SpecError("exactly one of vocab_size (text) or image_size (image) must be set")
        if self.family == "cnn" and self.image_size is None:
            raise SpecError("cnn family needs image inputs")
        if self.family == "transformer":
            if self.heads < 1 or self.width % self.heads:
                raise SpecError(f"width {self.width} not divisible by heads {self.heads}")
            if self.vocab_size is not None and self.max_sequence < 2:
                raise SpecError("max_sequence must be >= 2")
            if self.image_size is not None and self.image_size % self.patch:
                raise SpecError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Head:
    kind: str
    k: int
    params: dict[str, T.Tensor]


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, T.Tensor]
    head: Head | None = None
    taps: list[str] = field(default_factory=list)

    def body_parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def head_parameters(self) -> list[T.Tensor]:
        return [] if self.head is None else list(self.head.params.values())

    def parameters(self, body: bool = True, head: bool = True) -> list[T.Tensor]:
        return (self.body_parameters() if body else []) + (self.head_parameters() if head else [])

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.params.items()}
        if self.head is not None:
            out.update({f"head.{n}": p.data for n, p in self.head.params.items()})
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        out = self.copy()
        for p in out.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return out

    def set_trainable(self, body: bool = True, head: bool = True) -> None:
        for p in self.body_parameters():
            p.requires_grad = body
        for p in self.head_parameters():
            p.requires_grad = head


def tap_names(spec: ModelSpec) -> list[str]:
    blocks = [f"block{i}" for i in range(spec.depth)]
    return (["embed"] + blocks) if spec.family == "transformer" else blocks


def _param(arr: np.ndarray, name: str) -> T.Tensor:
    return T.Tensor(arr, requires_grad=True, name=name)


def _transformer_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, T.Tensor]:
    W, F = spec.width, spec.width * spec.mlp_ratio
    p: dict[str, np.ndarray] = {}
    if spec.modality == "text":
        p["tok_emb"] = truncated_normal(rng, (spec.vocab_size, W))
    else:
        pdim = spec.patch * spec.patch * spec.channels
        p["patch_w"] = truncated_normal(rng, (pdim, W))
        p["patch_b"] = np.zeros(W, np.float32)
        p["cls"] = truncated_normal(rng, (1, W))
    p["pos_emb"] = truncated_normal(rng, (spec.sequence_length, W))
    for i in range(spec.depth):
        b = f"block{i}"
        p[f"{b}.ln1.g"] = np.ones(W, np.float32)
        p[f"{b}.ln1.b"] = np.zeros(W, np.float32)
        p[f"{b}.attn.wqkv"] = truncated_normal(rng, (W, 3 * W))
        p[f"{b}.attn.bqkv"] = np.zeros(3 * W, np.float32)
        p[f"{b}.attn.wo"] = truncated_normal(rng, (W, W))
        p[f"{b}.attn.bo"] = np.zeros(W, np.float32)
        p[f"{b}.ln2.g"] = np.ones(W, np.float32)
        p[f"{b}.ln2.b"] = np.zeros(W, np.float32)
        p[f"{b}.mlp.w1"] = truncated_normal(rng, (W, F))
        p[f"{b}.mlp.b1"] = np.zeros(F, np.float32)
        p[f"{b}.mlp.w2"] = truncated_normal(rng, (F, W))
        p[f"{b}.mlp.b2"] = np.zeros(W, np.float32)
    p["ln_f.g"] = np.ones(W, np.float32)
    p["ln_f.b"] = np.zeros(W, np.float32)
    return {n: _param(a, n) for n, a in p.items()}


def _cnn_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, T.Tensor]:
    W = spec.width
    p: dict[str, np.ndarray] = {}
    cin = spec.channels
    for i in range(spec.depth):
        p[f"block{i}.conv"] = truncated_normal(rng, (3, 3, cin, W))
        p[f"block{i}.ln.g"] = np.ones(W, np.float32)
        p[f"block{i}.ln.b"] = np.zeros(W, np.float32)
        cin = W
    return {n: _param(a, n) for n, a in p.items()}


def param_count(spec: ModelSpec, head_k: int | None = None) -> int:
    """Closed-form parameter count (see module docstring)."""
    W = spec.width
    if spec.family == "cnn":
        body = 9 * spec.channels * W + (spec.depth - 1) * 9 * W * W + spec.depth * 2 * W
    else:
        F = spec.mlp_ratio * W
        if spec.modality == "text":
            inp = spec.vocab_size * W
        else:
            inp = spec.patch * spec.patch * spec.channels * W + 2 * W
        body = inp + spec.sequence_length * W + spec.depth * (4 * W * W + 2 * W * F + 9 * W + F) + 2 * W
    head = 0 if head_k is None else W * head_k + head_k
    return body + head


def _new_head(spec: ModelSpec, kind: str, k: int | None, seed: int) -> Head:
    if kind not in HEAD_KINDS:
        raise ContractError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
    if kind == "mlm":
        if spec.family != "transformer" or spec.modality != "text":
            raise FamilyError("mlm head needs a text transformer")
        k = spec.vocab_size
    elif kind == "mim" and (spec.family != "transformer" or spec.modality != "image"):
        raise FamilyError("mim head needs an image transformer")
    if k is None or k < 1:
        raise ContractError(f"head {kind!r} needs k >= 1, got {k}")
    rng = make_rng(seed, "head", kind, k)
    params = {
        "w": _param(truncated_normal(rng, (spec.width, k)), "head.w"),
        "b": _param(np.zeros(k, np.float32), "head.b"),
    }
    return Head(kind=kind, k=int(k), params=params)


def build(spec: ModelSpec, seed: int, head: str | None = None, k: int | None = None) -> Model:
    """Initialize a model deterministically from ``seed``."""
    spec.validate()
    rng = make_rng(seed, "init", spec.family)
    params = _transformer_params(spec, rng) if spec.family == "transformer" else _cnn_params(spec, rng)
    model = Model(spec=spec, params=params, taps=tap_names(spec))
    if head is not None:
        model.head = _new_head(spec, head, k, seed)
    return model


def replace_head(model: Model, head_kind: str, k: int | None = None, seed: int = 0) -> Model:
    """Return a copy of ``model`` whose head is freshly initialized; the body is untouched."""
    head = _new_head(model.spec, head_kind, k, seed)
    out = Model(spec=model.spec, params=copy.deepcopy(model.params), head=head, taps=list(model.taps))
    return out


def expand_embeddings(model: Model, n_new: int, init_seed: int) -> Model:
    """Grow the token table (and an attached MLM head) by ``n_new`` rows.

    New rows are the mean of the existing rows plus N(0, 0.02^2) noise.
    """
    if model.spec.family != "transformer" or model.spec.modality != "text":
        raise FamilyError("expand_embeddings needs a text transformer")
    if n_new < 0:
        raise ContractError("n_new must be >= 0")
    out = model.copy()
    if n_new == 0:
        return out
    rng = make_rng(init_seed, "expand", model.spec.vocab_size, n_new)
    table = out.params["tok_emb"]
    noise = rng.standard_normal((n_new, table.shape[1])) * 0.02
    new_rows = (table.data.mean(axis=0, keepdims=True) + noise).astype(table.dtype)
    table.data = np.concatenate([table.data, new_rows], axis=0)
    table.grad = None
    if out.head is not None and out.head.kind == "mlm":
        w, b = out.head.params["w"], out.head.params["b"]
        noise = rng.standard_normal((w.shape[0], n_new)) * 0.02
        w.data = np.concatenate([w.data, (w.data.mean(axis=1, keepdims=True) + noise).astype(w.dtype)], axis=1)
        b.data = np.concatenate([b.data, np.full(n_new, b.data.mean(), dtype=b.dtype)])
        w.grad = b.grad = None
        out.head.k += n_new
    out.spec = replace(model.spec, vocab_size=model.spec.vocab_size + n_new)
    return out


# -- forward ----------------------------------------------------------------
def _attention(x: T.Tensor, p: dict, b: str, heads: int, key_bias: np.ndarray | None) -> T.Tensor:
    B, L, W = x.shape
    dh = W // heads
    qkv = T.linear(x, p[f"{b}.attn.wqkv"], p[f"{b}.attn.bqkv"])
    qkv = qkv.reshape(B, L, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if key_bias is not None:
        scores = scores + key_bias
    att = T.softmax(scores, axis=-1)
    ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, W)
    return T.linear(ctx, p[f"{b}.attn.wo"], p[f"{b}.attn.bo"])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, n_patches, patch * patch * C]`` in row-major patch order."""
    B, H, W, C = images.shape
    g = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return g.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def _transformer_forward(model: Model, batch, training: bool, rng) -> tuple[T.Tensor, dict]:
    spec, p = model.spec, model.params
    dtype = p["pos_emb"].dtype
    acts: dict[str, T.Tensor] = {}
    if spec.modality == "text":
        ids = np.asarray(batch, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] > spec.max_sequence:
            raise ContractError(f"token batch must be [B, <= {spec.max_sequence}], got {ids.shape}")
        B, L = ids.shape
        h = T.embedding(p["tok_emb"], ids) + p["pos_emb"][:L]
        real = (ids != PAD_ID).astype(dtype)
        real[:, 0] = 0.0
        key_bias = np.where(ids == PAD_ID, -1e9, 0.0).astype(dtype)[:, None, None, :]
    else:
        imgs = np.asarray(batch, dtype=dtype)
        if imgs.ndim == 3:
            patches = imgs  # already patchified [B, N, patch_dim]
        else:
            if imgs.shape[1:] != (spec.image_size, spec.image_size, spec.channels):
                raise ContractError(f"image batch shape {imgs.shape} does not match spec")
            patches = patchify(imgs, spec.patch)
        B, N, _ = patches.shape
        tok = T.linear(T.Tensor(patches, dtype=dtype), p["patch_w"], p["patch_b"])
        cls = T.mul(p["cls"], np.ones((B, 1, 1), dtype=dtype))
        h = T.concat([cls, tok], axis=1) + p["pos_emb"]
        L = N + 1
        real = np.ones((B, L), dtype=dtype)
        real[:, 0] = 0.0
        key_bias = None
    weights = real / np.maximum(real.sum(axis=1, keepdims=True), 1.0)
    acts["embed"] = T.tsum(h * weights[:, :, None], axis=1)
    for i in range(spec.depth):
        b = f"block{i}"
        a = _attention(T.layer_norm(h, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"]), p, b, spec.heads, key_bias)
        h = h + T.dropout(a, spec.dropout, rng, training)
        m = T.layer_norm(h, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        m = T.linear(T.gelu(T.linear(m, p[f"{b}.mlp.w1"], p[f"{b}.mlp.b1"])), p[f"{b}.mlp.w2"], p[f"{b}.mlp.b2"])
        h = h + T.dropout(m, spec.dropout, rng, training)
        acts[b] = h[:, 0, :]
    return T.layer_norm(h, p["ln_f.g"], p["ln_f.b"]), acts


def _cnn_forward(model: Model, batch, training: bool, rng) -> tuple[T.Tensor, dict]:
    spec, p = model.spec, model.params
    x = T.Tensor(np.asarray(batch), dtype=p["block0.conv"].dtype)
    if x.ndim != 4 or x.shape[1:] != (spec.image_size, spec.image_size, spec.channels):
        raise ContractError(f"image batch shape {x.shape} does not match spec")
    acts: dict[str, T.Tensor] = {}
    for i in range(spec.depth):
        b = f"block{i}"
        x = T.conv2d(x, p[f"{b}.conv"], stride=2, padding=1)
        x = T.relu(T.layer_norm(x, p[f"{b}.ln.g"], p[f"{b}.ln.b"]))
        x = T.dropout(x, spec.dropout, rng, training)
        acts[b] = T.mean(x, axis=(1, 2))
    return x, acts


def forward(model: Model, batch, training: bool = False, rng=None, want_logits: bool = True):
    """Run the body and, when attached, the head.

    Returns ``(logits, activations)``: ``logits`` is ``[B, k]`` for clf/probe
    heads and ``[B, L, k]`` for mlm/mim heads, ``None`` when no head is
    attached and ``want_logits`` is false.
    """
    if model.spec.family == "transformer":
        hidden, acts = _transformer_forward(model, batch, training, rng)
    else:
        hidden, acts = _cnn_forward(model, batch, training, rng)
    if model.head is None:
        if want_logits:
            raise HeadError("model has no head attached")
        return None, acts
    return head_logits(model, hidden), acts


def head_logits(model: Model, hidden: T.Tensor) -> T.Tensor:
    h = model.head
    w, b = h.params["w"], h.params["b"]
    if model.spec.family == "cnn":
        if h.kind not in ("clf", "probe"):
            raise HeadError(f"cnn cannot carry a {h.kind!r} head")
        return T.linear(T.mean(hidden, axis=(1, 2)), w, b)
    if h.kind in ("clf", "probe"):
        return T.linear(hidden[:, 0, :], w, b)
    return T.linear(hidden, w, b)


def pooled_output(model: Model, batch) -> np.ndarray:
    """The vector a clf/probe head consumes: final-normed CLS (transformer) or pooled last block (cnn)."""
    with T.no_grad():
        hidden, _ = (_transformer_forward if model.spec.family == "transformer" else _cnn_forward)(
            model, batch, False, None
        )
    if model.spec.family == "cnn":
        return hidden.data.mean(axis=(1, 2))
    return hidden.data[:, 0, :]


def features(model: Model, batch, tap: str | None = None) -> np.ndarray:
    """Pooled activations of ``tap`` (default: the final tap) without a tape."""
    with T.no_grad():
        _, acts = forward(model, batch, want_logits=False) if model.head is None else forward(model, batch)
    return acts[tap or model.taps[-1]].data


# -- hashing and checkpoints ------------------------------------------------
def body_hash(model: Model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(tensor_bytes(model.params[name].data))
    return h.hexdigest()


def model_hash(model: Model) -> str:
    h = hashlib.sha256()
    arrays = model.named_arrays()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(tensor_bytes(arrays[name]))
    return h.hexdigest()


def save_checkpoint(model: Model, directory: str | Path, provenance: dict[str, Any]) -> Path:
    """Write ``manifest.json`` plus ``tensors.bin`` (snapshot container)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = model.named_arrays()
    names = save_named(d / "tensors.bin", arrays)
    manifest = {
        "spec": model.spec.to_dict(),
        "head": None if model.head is None else {"kind": model.head.kind, "k": model.head.k},
        "provenance": provenance,
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory: str | Path) -> tuple[Model, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = ModelSpec(**manifest["spec"]).validate()
    arrays = load_tensors(d / "tensors.bin")
    names = [t["name"] for t in manifest["tensors"]]
    if len(names) != len(arrays):
        raise ContractError(f"{d}: manifest lists {len(names)} tensors, payload has {len(arrays)}")
    params, head_params = {}, {}
    for name, arr in zip(names, arrays):
        if name.startswith("head."):
            head_params[name[5:]] = _param(arr, name)
        else:
            params[name] = _param(arr, name)
    head = None
    if manifest["head"] is not None:
        head = Head(kind=manifest["head"]["kind"], k=manifest["head"]["k"], params=head_params)
    return Model(spec=spec, params=params, head=head, taps=tap_names(spec)), manifest["provenance"]
