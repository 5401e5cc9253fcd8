"""Frozen conditioning encoders: token sequence + CLS vector per image.

Three interchangeable encoder kinds:

  frozen-random-vit  a fixed-seed, never-trained patch transformer; its
                     random features preserve coarse image similarity
                     and are pure functions of the pixels.
  oracle-factor      embeds the generator's known factors (class, hue,
                     nuisance) directly; nuisance dims are zeroed in the
                     CLS vector so same-episode images get CLS cosine
                     similarity exactly 1. Requires factor metadata.
  imported           reads records from an EMBD file keyed by image id.

CLS for the ViT encoder is the mean over patch tokens (the stand-in has
no dedicated CLS token, so pooling defines it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fileio

ENCODER_KINDS = ("oracle-factor", "frozen-random-vit", "imported")
NUM_SHAPE_CLASSES = 8
_VIT_HEADS = 4


@dataclass(frozen=True)
class Factors:
    """Generative factors of one synthetic image."""

    class_id: int
    hue: float
    nuisance: tuple  # (dx, dy, scale, rotation, noise_level)


@dataclass
class ContextTokens:
    tokens: np.ndarray  # [T_c, D_c] float32
    cls: np.ndarray  # [D_c] float32
    source_id: str


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    seed: int = 0
    patch_size: int = 4
    depth: int = 2
    width: int = 64
    t_c: int = 16
    d_c: int = 32
    path: str | None = field(default=None, compare=True)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.t_c < 1 or self.d_c < 1:
            raise ValueError("t_c and d_c must be >= 1")

    @property
    def source_id(self):
        return f"{self.kind}/seed{self.seed}/{self.t_c}x{self.d_c}"


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("cosine_similarity dims differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity of zero-norm vector")
    if np.array_equal(a, b):
        return 1.0  # exact duplicates must score exactly 1 (dedup filtering)
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def encode(spec: EncoderSpec, image, meta=None) -> ContextTokens:
    """Encode one [H, W, C] image into ContextTokens.

    meta carries side information that two of the encoders need: a
    Factors instance for oracle-factor, the integer image id for
    imported. The ViT encoder ignores it.
    """
    if spec.kind == "frozen-random-vit":
        tokens, cls = _vit_encode_batch(spec, np.asarray(image)[None])
        return ContextTokens(tokens[0], cls[0], spec.source_id)
    if spec.kind == "oracle-factor":
        if not isinstance(meta, Factors):
            raise ValueError("oracle-factor encoder needs Factors metadata")
        tokens, cls = _oracle_encode(spec, meta)
        return ContextTokens(tokens, cls, spec.source_id)
    # imported
    if meta is None:
        raise ValueError("imported encoder needs an image id")
    table = load_embedding_table(spec)
    return table.get(int(meta))


def encode_batch(spec: EncoderSpec, images, metas=None):
    """Vectorized encode: returns (tokens [B,T_c,D_c], cls [B,D_c])."""
    images = np.asarray(images)
    if spec.kind == "frozen-random-vit":
        return _vit_encode_batch(spec, images)
    out_t = np.empty((len(images), spec.t_c, spec.d_c), dtype=np.float32)
    out_c = np.empty((len(images), spec.d_c), dtype=np.float32)
    for i in range(len(images)):
        ct = encode(spec, images[i], None if metas is None else metas[i])
        out_t[i] = ct.tokens
        out_c[i] = ct.cls
    return out_t, out_c


def precompute_embeddings(spec: EncoderSpec, image_shard_path, out_path) -> int:
    """Encode every image in a shard and write an EMBD file ordered by image id."""
    images, episodes = fileio.read_shard(image_shard_path)
    metas = {}
    for ep in episodes:
        for j, image_id in enumerate(ep["member_ids"]):
            metas[image_id] = Factors(
                class_id=int(ep["class_id"]),
                hue=float(ep["hue"]),
                nuisance=tuple(float(v) for v in ep["nuisances"][j]),
            )
    records = []
    for image_id in range(len(images)):
        ct = encode(spec, images[image_id], metas.get(image_id, image_id))
        records.append((image_id, ct.tokens, ct.cls))
    fileio.write_embeddings(out_path, records, spec.t_c, spec.d_c)
    return len(records)


class EmbeddingTable:
    """In-memory image_id -> ContextTokens lookup."""

    def __init__(self, records, source_id):
        self._table = {rid: (tok, cls) for rid, tok, cls in records}
        self.source_id = source_id

    @classmethod
    def from_file(cls, path, source_id=None):
        records, _, _ = fileio.read_embeddings(path)
        return cls(records, source_id or f"imported/{path}")

    @classmethod
    def from_shard(cls, spec, shard_path):
        images, episodes = fileio.read_shard(shard_path)
        records = []
        metas = {}
        for ep in episodes:
            for j, image_id in enumerate(ep["member_ids"]):
                metas[image_id] = Factors(
                    int(ep["class_id"]), float(ep["hue"]), tuple(map(float, ep["nuisances"][j]))
                )
        for image_id in range(len(images)):
            ct = encode(spec, images[image_id], metas.get(image_id, image_id))
            records.append((image_id, ct.tokens, ct.cls))
        return cls(records, spec.source_id)

    def __len__(self):
        return len(self._table)

    def __contains__(self, image_id):
        return image_id in self._table

    def get(self, image_id) -> ContextTokens:
        if image_id not in self._table:
            raise KeyError(f"no embedding record for image {image_id}")
        tok, cls = self._table[image_id]
        return ContextTokens(tok, cls, self.source_id)


_IMPORT_CACHE = {}


def load_embedding_table(spec: EncoderSpec) -> EmbeddingTable:
    if spec.path is None:
        raise ValueError("imported encoder spec has no path")
    if spec.path not in _IMPORT_CACHE:
        _IMPORT_CACHE[spec.path] = EmbeddingTable.from_file(spec.path, spec.source_id)
    return _IMPORT_CACHE[spec.path]


# ---------------------------------------------------------------------------
# oracle-factor encoder

_ORACLE_NUIS_DIM = 5
_ORACLE_BASE = NUM_SHAPE_CLASSES + 2  # one-hot classes, then (cos, sin) of hue


def _oracle_encode(spec: EncoderSpec, fac: Factors):
    if spec.d_c < _ORACLE_BASE + _ORACLE_NUIS_DIM:
        raise ValueError(f"oracle-factor needs d_c >= {_ORACLE_BASE + _ORACLE_NUIS_DIM}")
    base = np.zeros(spec.d_c, dtype=np.float32)
    base[fac.class_id % NUM_SHAPE_CLASSES] = 1.0
    base[NUM_SHAPE_CLASSES] = math.cos(2.0 * math.pi * fac.hue)
    base[NUM_SHAPE_CLASSES + 1] = math.sin(2.0 * math.pi * fac.hue)
    tokens = np.tile(base, (spec.t_c, 1))
    nuis = np.asarray(fac.nuisance[:_ORACLE_NUIS_DIM], dtype=np.float32)
    tokens[:, _ORACLE_BASE : _ORACLE_BASE + len(nuis)] = nuis
    # remaining dims: fixed sinusoidal token-index code so tokens are distinct
    rest = spec.d_c - (_ORACLE_BASE + _ORACLE_NUIS_DIM)
    if rest > 0:
        idx = np.arange(spec.t_c, dtype=np.float32)[:, None]
        freq = np.arange(rest, dtype=np.float32)[None, :] + 1.0
        tokens[:, _ORACLE_BASE + _ORACLE_NUIS_DIM :] = 0.1 * np.sin(idx * freq / spec.t_c)
    cls = base.copy()  # nuisance dims (and index code) stay zero in cls
    return tokens, cls


# ---------------------------------------------------------------------------
# frozen random ViT encoder (pure numpy; never trained)

_VIT_CACHE = {}


def _vit_params(spec: EncoderSpec, in_dim):
    key = (spec.kind, spec.seed, spec.patch_size, spec.depth, spec.width, spec.t_c, spec.d_c, in_dim)
    if key in _VIT_CACHE:
        return _VIT_CACHE[key]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    w = spec.width

    def dense(shape):
        fan_in = shape[0]
        return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)

    params = {"embed": dense((in_dim, w)), "pos": _sincos_position(spec.t_c, w)}
    for i in range(spec.depth):
        params[f"b{i}"] = {
            "wq": dense((w, w)),
            "wk": dense((w, w)),
            "wv": dense((w, w)),
            "wo": dense((w, w)),
            "w1": dense((w, 2 * w)),
            "w2": dense((2 * w, w)),
        }
    params["out"] = dense((w, spec.d_c))
    _VIT_CACHE[key] = params
    return params


def _sincos_position(t, dim):
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((t, dim), dtype=np.float32)
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def _vit_encode_batch(spec: EncoderSpec, images):
    b, h, w, c = images.shape
    p = spec.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    t = (h // p) * (w // p)
    if t != spec.t_c:
        raise ValueError(f"spec.t_c={spec.t_c} but {h}x{w}/patch{p} gives {t} tokens")
    params = _vit_params(spec, p * p * c)
    x = images.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, t, p * p * c).astype(np.float32)
    x = x @ params["embed"] + params["pos"]
    heads = _VIT_HEADS
    dh = spec.width // heads
    for i in range(spec.depth):
        blk = params[f"b{i}"]
        hn = _np_layernorm(x)
        q = (hn @ blk["wq"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        k = (hn @ blk["wk"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        v = (hn @ blk["wv"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        att = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        att = att - att.max(axis=-1, keepdims=True)
        att = np.exp(att)
        att /= att.sum(axis=-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, spec.width)
        x = x + o @ blk["wo"]
        hn = _np_layernorm(x)
        x = x + np.maximum(hn @ blk["w1"], 0.0) @ blk["w2"]
    tokens = _np_layernorm(x) @ params["out"]
    cls = tokens.mean(axis=1)
    return tokens.astype(np.float32), cls.astype(np.float32)


def _np_layernorm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + eps)).astype(np.float32)
