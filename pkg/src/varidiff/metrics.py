"""Few-shot generative metrics: Frechet distance, k-NN precision/recall,
intra-condition diversity, and the copying diagnostic.

The few-shot protocol: from N test images select K conditioning images,
generate N/K samples per condition, then compare the N generated
features against the N test features. Precision measures sample
quality, recall measures diversity; a generator that copies its
conditioning input collapses to recall ~ 1/N because every generated
manifold radius degenerates to zero.

Features come from a frozen encoder's CLS vector (extractor choice is
pinned in the report). Image-to-image distance in this feature space is
reported as a "perceptual proxy": a copying model attains proxy
distance 0, which is exactly why it cannot certify variation quality.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoders import EncoderSpec, encode_batch


@dataclass
class FeatureSet:
    features: np.ndarray  # [M, D]
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be [M, D]")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")

    @property
    def count(self):
        return self.features.shape[0]


@dataclass
class ManifoldEstimate:
    points: np.ndarray  # [M, D]
    radii: np.ndarray  # [M] distance of each point to its k-th nearest neighbor
    k: int


@dataclass(frozen=True)
class FewShotConfig:
    n: int
    k_conditions: int
    guidance: float = 0.0
    seed: int = 0
    k_nn: int = 3

    def __post_init__(self):
        if self.k_conditions < 1:
            raise ValueError("k_conditions must be >= 1")
        if self.n % self.k_conditions:
            raise ValueError("k_conditions must divide n")

    @property
    def samples_per_condition(self):
        return self.n // self.k_conditions


@dataclass
class MetricReport:
    fid: float
    precision: float
    recall: float
    diversity: float
    proxy_distance: float
    config: dict

    def lines(self):
        out = []
        for k in ("fid", "precision", "recall", "diversity"):
            out.append(f"{k}: {getattr(self, k):.6f}")
        out.append(f"perceptual proxy (feature-space L2): {self.proxy_distance:.6f}")
        for k in sorted(self.config):
            out.append(f"config.{k}: {self.config[k]}")
        return out

    def text(self):
        return "\n".join(self.lines()) + "\n"


# ---------------------------------------------------------------------------
# feature extraction


def extract_features(extractor, images, metas=None) -> FeatureSet:
    """Encode images to per-image CLS feature rows.

    extractor: an EncoderSpec, or any callable mapping [M,H,W,C] images
    to an [M,D] feature array (used by tests and custom pipelines).
    """
    images = np.asarray(images)
    if isinstance(extractor, EncoderSpec):
        _, cls = encode_batch(extractor, images, metas)
        return FeatureSet(cls, extractor.source_id)
    feats = np.asarray(extractor(images))
    return FeatureSet(feats, getattr(extractor, "extractor_id", "callable"))


# ---------------------------------------------------------------------------
# Frechet distance


def gaussian_moments(fs: FeatureSet):
    """Mean and unbiased covariance of a feature set (requires M >= 2)."""
    if fs.count < 2:
        raise ValueError("moment estimation needs at least 2 feature rows")
    mu = fs.features.mean(axis=0)
    centered = fs.features - mu
    cov = centered.T @ centered / (fs.count - 1)
    return mu, cov


def frechet_distance(fs_a: FeatureSet, fs_b: FeatureSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root is taken by symmetric eigendecomposition of
    S_a^{1/2} S_b S_a^{1/2}, clamping negative eigenvalues to zero.
    """
    if fs_a.features.shape[1] != fs_b.features.shape[1]:
        raise ValueError("feature dims differ")
    mu_a, cov_a = gaussian_moments(fs_a)
    mu_b, cov_b = gaussian_moments(fs_b)
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise ValueError("non-finite covariance")
    sqrt_a = _sqrtm_psd(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


# ---------------------------------------------------------------------------
# k-NN manifold precision / recall


def pairwise_distances(a, b, chunk=256):
    """Euclidean distance matrix [len(a), len(b)] in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        d = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.sqrt(np.sum(d * d, axis=-1))
    return out


def manifold_estimate(fs: FeatureSet, k: int) -> ManifoldEstimate:
    """Per-point radius = distance to the k-th nearest neighbor, self excluded."""
    m = fs.count
    if not (0 < k < m):
        raise ValueError(f"need 0 < k < {m}, got k={k}")
    d = pairwise_distances(fs.features, fs.features)
    np.fill_diagonal(d, np.inf)
    d.sort(axis=1)
    return ManifoldEstimate(points=fs.features, radii=d[:, k - 1].copy(), k=k)


def knn_precision_recall(real: FeatureSet, gen: FeatureSet, k=3):
    """Improved precision/recall via k-NN manifolds (inclusive radius test).

    precision: fraction of generated points within some real point's
    radius; recall: fraction of real points within some generated
    point's radius.
    """
    man_real = manifold_estimate(real, k)
    man_gen = manifold_estimate(gen, k)
    d = pairwise_distances(real.features, gen.features)  # [M_real, M_gen]
    precision = float(np.mean(np.any(d <= man_real.radii[:, None], axis=0)))
    recall = float(np.mean(np.any(d <= man_gen.radii[None, :], axis=1)))
    return precision, recall


# ---------------------------------------------------------------------------
# few-shot protocol


def fewshot_evaluate(cfg: FewShotConfig, test_images, sampler_fn, extractor) -> MetricReport:
    """Run the N/K protocol and score the generated set.

    sampler_fn(cond_image, num_samples, rng) must return [num_samples,
    H, W, C] images. Conditioning images are drawn from the test set
    without replacement; per-condition child generators keep the whole
    evaluation reproducible from cfg.seed.
    """
    test_images = np.asarray(test_images)
    if len(test_images) < cfg.n:
        raise ValueError(f"need {cfg.n} test images, got {len(test_images)}")
    test_images = test_images[: cfg.n]
    root = np.random.SeedSequence([cfg.seed, 0xFE57])
    pick_rng = np.random.default_rng(root.spawn(1)[0])
    cond_idx = np.sort(pick_rng.choice(cfg.n, size=cfg.k_conditions, replace=False))
    child_seeds = root.spawn(cfg.k_conditions + 1)[1:]

    per = cfg.samples_per_condition
    groups = []
    for j, ci in enumerate(cond_idx):
        rng = np.random.default_rng(child_seeds[j])
        out = np.asarray(sampler_fn(test_images[ci], per, rng))
        if out.shape[0] != per:
            raise ValueError("sampler returned wrong sample count")
        groups.append(out)
    samples = np.concatenate(groups, axis=0)

    feats_test = extract_features(extractor, test_images)
    feats_gen = extract_features(extractor, samples)
    feats_cond = extract_features(extractor, test_images[cond_idx])

    fid = frechet_distance(feats_test, feats_gen)
    precision, recall = knn_precision_recall(feats_test, feats_gen, cfg.k_nn)
    diversity = _intra_condition_diversity(feats_gen.features, cfg.k_conditions, per)
    proxy = _proxy_distance(feats_gen.features, feats_cond.features, per)
    return MetricReport(
        fid=fid,
        precision=precision,
        recall=recall,
        diversity=diversity,
        proxy_distance=proxy,
        config={
            "n": cfg.n,
            "k_conditions": cfg.k_conditions,
            "samples_per_condition": per,
            "guidance": cfg.guidance,
            "seed": cfg.seed,
            "k_nn": cfg.k_nn,
            "extractor": feats_test.extractor_id,
        },
    )


def _intra_condition_diversity(gen_features, k_conditions, per):
    """Mean pairwise feature distance within each condition's sample
    group, averaged over groups (0 for singleton groups)."""
    vals = []
    for j in range(k_conditions):
        grp = gen_features[j * per : (j + 1) * per]
        if len(grp) < 2:
            vals.append(0.0)
            continue
        d = pairwise_distances(grp, grp)
        iu = np.triu_indices(len(grp), 1)
        vals.append(float(d[iu].mean()))
    return float(np.mean(vals))


def _proxy_distance(gen_features, cond_features, per):
    dists = []
    for j in range(cond_features.shape[0]):
        grp = gen_features[j * per : (j + 1) * per]
        dists.append(np.sqrt(np.sum((grp - cond_features[j]) ** 2, axis=1)))
    return float(np.mean(np.concatenate(dists)))


def guidance_sweep(make_sampler, test_images, g_values, cfg: FewShotConfig, extractor):
    """One fewshot_evaluate per guidance value.

    make_sampler(g) must return the sampler_fn to evaluate at guidance
    g. Returns reports in the order of g_values.
    """
    reports = []
    for g in g_values:
        cfg_g = replace(cfg, guidance=float(g))
        reports.append(fewshot_evaluate(cfg_g, test_images, make_sampler(float(g)), extractor))
    return reports


def sweep_csv_rows(g_values, reports):
    rows = [["g", "fid", "precision", "recall", "diversity"]]
    for g, rep in zip(g_values, reports):
        rows.append(
            [
                f"{float(g):g}",
                f"{rep.fid:.6f}",
                f"{rep.precision:.6f}",
                f"{rep.recall:.6f}",
                f"{rep.diversity:.6f}",
            ]
        )
    return rows
