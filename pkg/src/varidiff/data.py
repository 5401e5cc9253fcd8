"""Synthetic episodic image corpus, pair sampling, filtering, batching.

An episode is a set of images rendered from shared factors (shape class
and hue) with per-member nuisance factors (position, scale, rotation,
pixel noise). Pair-mode training conditions on one member and denoises
another; reconstruction mode conditions on the target itself;
label-grouped mode pairs members across episodes that share the class
factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import fileio
from .encoders import EmbeddingTable, EncoderSpec, Factors, cosine_similarity, encode

NUM_CLASSES = 8
PAIR_MODES = ("pair", "reconstruction", "label-grouped")


class DataError(ValueError):
    """Invalid shard, pair request, or empty batch stream."""


@dataclass(frozen=True)
class ImageConfig:
    height: int = 16
    width: int = 16
    channels: int = 3


@dataclass
class EpisodeRecord:
    episode_id: int
    class_id: int
    hue: float
    member_ids: list
    nuisances: np.ndarray  # [m, 5]: dx, dy, scale, rotation, noise_level

    def factors(self, member_index) -> Factors:
        return Factors(
            class_id=self.class_id,
            hue=self.hue,
            nuisance=tuple(float(v) for v in self.nuisances[member_index]),
        )


@dataclass
class PairRecord:
    cond_image_id: int
    target_image_id: int
    similarity: float
    episode_id: int


@dataclass(frozen=True)
class FilterConfig:
    low_threshold: float
    high_threshold: float
    encoder: EncoderSpec

    def __post_init__(self):
        if not self.low_threshold < self.high_threshold:
            raise ValueError("need low_threshold < high_threshold")


# ---------------------------------------------------------------------------
# renderer

_NUIS_LOW = np.array([-0.25, -0.25, 0.55, 0.0, 0.0])
_NUIS_HIGH = np.array([0.25, 0.25, 0.95, 2.0 * math.pi, 0.06])
_BACKGROUND = -0.85


def render_image(cfg: ImageConfig, class_id, hue, nuisance, rng=None):
    """Render one shape image with values in [-1, 1].

    nuisance = (dx, dy, scale, rotation, noise_level); the pixel noise is
    drawn from rng (pass the member's own generator for determinism).
    """
    h, w = cfg.height, cfg.width
    dx, dy, scl, rot, noise_level = (float(v) for v in nuisance)
    ys, xs = np.meshgrid(
        np.linspace(-1.0, 1.0, h, endpoint=False) + 1.0 / h,
        np.linspace(-1.0, 1.0, w, endpoint=False) + 1.0 / w,
        indexing="ij",
    )
    # map pixel coords into the shape's canonical frame
    px = (xs - dx) / scl
    py = (ys - dy) / scl
    c, s = math.cos(-rot), math.sin(-rot)
    qx = c * px - s * py
    qy = s * px + c * py
    sdf = _shape_sdf(class_id % NUM_CLASSES, qx, qy)
    aa = 2.0 / (h * scl)  # one canonical-frame pixel of smoothing
    mask = np.clip(0.5 - sdf / (2.0 * aa), 0.0, 1.0)
    fg = 2.0 * np.asarray(_hue_rgb(hue)) - 1.0
    img = _BACKGROUND + mask[..., None] * (fg - _BACKGROUND)
    if cfg.channels == 1:
        img = img.mean(-1, keepdims=True)
    if noise_level > 0.0 and rng is not None:
        img = img + noise_level * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def _shape_sdf(class_id, x, y):
    r = 0.55
    if class_id == 0:  # disk
        return np.hypot(x, y) - r
    if class_id == 1:  # square
        return np.maximum(np.abs(x), np.abs(y)) - r
    if class_id == 2:  # triangle (equilateral, pointing up)
        k = math.sqrt(3.0)
        return np.maximum.reduce([-y - r / 2.0, (k * x + y) / 2.0 - r / 2.0, (-k * x + y) / 2.0 - r / 2.0])
    if class_id == 3:  # ring
        return np.abs(np.hypot(x, y) - 0.78 * r) - 0.3 * r
    if class_id == 4:  # plus
        bar1 = np.maximum(np.abs(x) - r, np.abs(y) - 0.34 * r)
        bar2 = np.maximum(np.abs(x) - 0.34 * r, np.abs(y) - r)
        return np.minimum(bar1, bar2)
    if class_id == 5:  # diamond
        return (np.abs(x) + np.abs(y)) - r
    if class_id == 6:  # bar
        return np.maximum(np.abs(x) - r, np.abs(y) - 0.38 * r)
    # crossed diagonals
    c = math.cos(math.pi / 4.0)
    ux, uy = c * (x + y), c * (y - x)
    bar1 = np.maximum(np.abs(ux) - r, np.abs(uy) - 0.3 * r)
    bar2 = np.maximum(np.abs(ux) - 0.3 * r, np.abs(uy) - r)
    return np.minimum(bar1, bar2)


def _hue_rgb(hue):
    """Map hue in [0, 1) to a fully saturated RGB triple in [0, 1]."""
    h6 = (hue % 1.0) * 6.0
    i = int(h6)
    f = h6 - i
    q, t = 1.0 - f, f
    table = [(1, t, 0), (q, 1, 0), (0, 1, t), (0, q, 1), (t, 0, 1), (1, 0, q)]
    return table[i % 6]


# ---------------------------------------------------------------------------
# corpus generation and access


def build_corpus(num_episodes, members_per_episode, image_cfg: ImageConfig, seed):
    """Render the full corpus in memory; deterministic per-episode seeds."""
    if num_episodes < 0 or members_per_episode < 1:
        raise DataError("counts must be positive")
    seeds = np.random.SeedSequence(seed).spawn(max(num_episodes, 1))
    images = []
    episodes = []
    next_id = 0
    for e in range(num_episodes):
        rng = np.random.default_rng(seeds[e])
        class_id = int(rng.integers(NUM_CLASSES))
        hue = float(rng.uniform(0.0, 1.0))
        nuis = rng.uniform(_NUIS_LOW, _NUIS_HIGH, size=(members_per_episode, len(_NUIS_LOW)))
        member_ids = []
        for j in range(members_per_episode):
            images.append(render_image(image_cfg, class_id, hue, nuis[j], rng))
            member_ids.append(next_id)
            next_id += 1
        episodes.append(
            EpisodeRecord(
                episode_id=e,
                class_id=class_id,
                hue=hue,
                member_ids=member_ids,
                nuisances=nuis.astype(np.float32),
            )
        )
    shape = (len(images), image_cfg.height, image_cfg.width, image_cfg.channels)
    stacked = np.stack(images).reshape(shape) if images else np.zeros(shape, dtype=np.float32)
    return stacked.astype(np.float32), episodes


def generate_corpus(num_episodes, members_per_episode, image_cfg: ImageConfig, seed, out_path):
    """Render and write an EPIS shard; returns the image count."""
    images, episodes = build_corpus(num_episodes, members_per_episode, image_cfg, seed)
    fileio.write_shard(
        out_path,
        images,
        [
            {
                "episode_id": ep.episode_id,
                "class_id": ep.class_id,
                "hue": ep.hue,
                "member_ids": ep.member_ids,
                "nuisances": ep.nuisances,
            }
            for ep in episodes
        ],
    )
    return len(images)


class Corpus:
    """Loaded shard: images plus episode metadata and factor lookup."""

    def __init__(self, images, episodes):
        self.images = images
        self.episodes = episodes
        self._by_image = {}
        self._by_class = {}
        for ep in episodes:
            self._by_class.setdefault(ep.class_id, []).append(ep)
            for j, image_id in enumerate(ep.member_ids):
                self._by_image[image_id] = (ep, j)

    @classmethod
    def load(cls, path):
        images, raw = fileio.read_shard(path)
        episodes = [
            EpisodeRecord(
                episode_id=d["episode_id"],
                class_id=d["class_id"],
                hue=d["hue"],
                member_ids=d["member_ids"],
                nuisances=d["nuisances"],
            )
            for d in raw
        ]
        return cls(images, episodes)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def factors(self, image_id) -> Factors:
        ep, j = self._by_image[image_id]
        return ep.factors(j)

    def same_class_images(self, class_id):
        out = []
        for ep in self._by_class.get(class_id, []):
            out.extend(ep.member_ids)
        return out


# ---------------------------------------------------------------------------
# pair sampling and filtering


def sample_pair(episode: EpisodeRecord, mode, rng, corpus: Corpus | None = None) -> PairRecord:
    """Draw one (conditioning, target) pair under the given objective mode."""
    if mode not in PAIR_MODES:
        raise DataError(f"unknown pair mode {mode!r}")
    m = len(episode.member_ids)
    if mode == "reconstruction":
        i = int(rng.integers(m))
        image_id = episode.member_ids[i]
        return PairRecord(image_id, image_id, 1.0, episode.episode_id)
    if mode == "pair":
        if m < 2:
            raise DataError("pair mode needs an episode with >= 2 members")
        i, j = rng.choice(m, size=2, replace=False)
        return PairRecord(
            episode.member_ids[int(i)], episode.member_ids[int(j)], 0.0, episode.episode_id
        )
    # label-grouped: target uniform over all images whose episode shares the class
    if corpus is None:
        raise DataError("label-grouped mode needs the corpus for the class index")
    cond = episode.member_ids[int(rng.integers(m))]
    pool = corpus.same_class_images(episode.class_id)
    target = pool[int(rng.integers(len(pool)))]
    return PairRecord(cond, target, 0.0, episode.episode_id)


def annotate_similarity(pairs, embeddings: EmbeddingTable):
    """Fill each pair's similarity from the CLS embeddings."""
    out = []
    for p in pairs:
        s = cosine_similarity(
            embeddings.get(p.cond_image_id).cls, embeddings.get(p.target_image_id).cls
        )
        out.append(replace(p, similarity=s))
    return out


def filter_pairs(pairs, cfg: FilterConfig, embeddings: EmbeddingTable):
    """Keep pairs with low <= cls cosine similarity <= high (inclusive bounds)."""
    annotated = annotate_similarity(pairs, embeddings)
    return [p for p in annotated if cfg.low_threshold <= p.similarity <= cfg.high_threshold]


def enumerate_pairs(corpus: Corpus, mode, seed=0):
    """The deterministic base pair list for an epoch-shuffled iterator.

    pair mode: all ordered distinct member pairs per episode;
    reconstruction: one (i, i) pair per member; label-grouped: one drawn
    same-class pair per member (seeded).
    """
    pairs = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A12]))
    for ep in corpus.episodes:
        ids = ep.member_ids
        if mode == "reconstruction":
            pairs.extend(PairRecord(i, i, 1.0, ep.episode_id) for i in ids)
        elif mode == "pair":
            if len(ids) < 2:
                raise DataError("pair mode needs episodes with >= 2 members")
            for a in ids:
                for b in ids:
                    if a != b:
                        pairs.append(PairRecord(a, b, 0.0, ep.episode_id))
        elif mode == "label-grouped":
            pool = corpus.same_class_images(ep.class_id)
            for a in ids:
                b = pool[int(rng.integers(len(pool)))]
                pairs.append(PairRecord(a, b, 0.0, ep.episode_id))
        else:
            raise DataError(f"unknown pair mode {mode!r}")
    return pairs


@dataclass
class Batch:
    x: np.ndarray  # target images [B, H, W, C]
    tokens: np.ndarray  # conditioning tokens [B, T_c, D_c]
    cls: np.ndarray  # conditioning CLS [B, D_c]
    records: list  # the PairRecords backing this batch


def batch_iterator(
    shard,
    pair_mode,
    filter_cfg: FilterConfig | None,
    batch_size,
    seed,
    encoder: EncoderSpec | None = None,
    embeddings: EmbeddingTable | None = None,
):
    """Endless deterministic stream of training batches.

    Each item carries the target images and the conditioning image's
    precomputed ContextTokens. Epochs reshuffle the (filtered) pair list
    with a seed derived from (seed, epoch); trailing partial batches are
    dropped.
    """
    corpus = shard if isinstance(shard, Corpus) else Corpus.load(shard)
    enc = encoder or (filter_cfg.encoder if filter_cfg else None)
    if enc is None:
        raise DataError("batch_iterator needs an encoder (directly or via filter_cfg)")
    if embeddings is None:
        embeddings = embedding_table_for(corpus, enc)
    pairs = enumerate_pairs(corpus, pair_mode, seed)
    if filter_cfg is not None:
        pairs = filter_pairs(pairs, filter_cfg, embeddings)
    else:
        pairs = annotate_similarity(pairs, embeddings)
    if len(pairs) < batch_size:
        raise DataError(f"only {len(pairs)} pairs available for batch size {batch_size}")
    epoch = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE90C, epoch]))
        order = rng.permutation(len(pairs))
        for lo in range(0, len(pairs) - batch_size + 1, batch_size):
            chunk = [pairs[k] for k in order[lo : lo + batch_size]]
            x = np.stack([corpus.images[p.target_image_id] for p in chunk])
            toks = np.stack([embeddings.get(p.cond_image_id).tokens for p in chunk])
            cls = np.stack([embeddings.get(p.cond_image_id).cls for p in chunk])
            yield Batch(x=x, tokens=toks, cls=cls, records=chunk)
        epoch += 1


def embedding_table_for(corpus: Corpus, spec: EncoderSpec) -> EmbeddingTable:
    """Build an in-memory embedding table for every image in the corpus."""
    records = []
    for image_id in range(len(corpus.images)):
        meta = corpus.factors(image_id) if image_id in corpus._by_image else image_id
        ct = encode(spec, corpus.images[image_id], meta)
        records.append((image_id, ct.tokens, ct.cls))
    return EmbeddingTable(records, spec.source_id)
