"""Frechet distances (FID / FVD) over a pluggable embedder, and the Inception Score."""

from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Tuple

import numpy as np
import torch

PSD_TOL = 1e-6


@dataclass
class FeatureGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError(f"sigma {self.sigma.shape} does not match mu of length {self.mu.size}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-9 * max(1.0, np.abs(self.sigma).max(initial=0))):
            raise ValueError("covariance is not symmetric")


def gaussian_stats(features) -> FeatureGaussian:
    """Sample mean and unbiased covariance of an ``n x d`` feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples for a covariance")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    return FeatureGaussian(mu, (sigma + sigma.T) / 2, x.shape[0])


class RunningMoments:
    """Mergeable first/second moments (pairwise update), so shards combine in any order."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, features) -> "RunningMoments":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        other = RunningMoments(x.shape[1])
        other.n = x.shape[0]
        other.mean = x.mean(axis=0)
        xc = x - other.mean
        other.m2 = xc.T @ xc
        return self.merge(other)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.mean = self.mean + delta * (other.n / n)
        self.n = n
        return self

    def gaussian(self) -> FeatureGaussian:
        if self.n < 2:
            raise ValueError("need at least 2 samples for a covariance")
        sigma = self.m2 / (self.n - 1)
        return FeatureGaussian(self.mean.copy(), (sigma + sigma.T) / 2, self.n)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    m = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(m)
    tol = PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0)))
    if vals.min(initial=0) < -tol:
        raise ValueError(f"{what} is not positive semi-definite (eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureGaussian, b: FeatureGaussian) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of ``(S_a S_b)^(1/2)`` equals that of ``(S_a^(1/2) S_b S_a^(1/2))^(1/2)``,
    which is symmetric PSD and is taken through an eigendecomposition.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.size} vs {b.mu.size}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        _psd_sqrt(a.sigma, "covariance")
        return 0.0
    root_a = _psd_sqrt(a.sigma, "first covariance")
    _psd_sqrt(b.sigma, "second covariance")
    inner = _psd_sqrt(root_a @ b.sigma @ root_a, "covariance product")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * np.trace(inner))
    # Round-off can push an exact zero slightly negative.
    return max(value, 0.0)


def inception_score(probabilities, atol: float = 1e-6) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` over a single split."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("probabilities must be a non-empty n x c matrix")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("rows must be probability vectors")
    if (p == p[0]).all():
        # Every row equals the marginal; skip the round-off of averaging.
        return 1.0
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def sample_eval_frame(bf: torch.Tensor, gfp: torch.Tensor, generator=None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pick one timestep per sample uniformly; both domains use the same index.

    Inputs are ``[B, T, H, W]``; returns ``(bf_frames, gfp_frames, indices)``
    with frames ``[B, H, W]``.
    """
    b, t = bf.shape[:2]
    idx = torch.randint(0, t, (b,), generator=generator)
    rows = torch.arange(b)
    return bf[rows, idx], gfp[rows, idx], idx


class Embedder(Protocol):
    feature_dim: int

    def embed_image(self, images: torch.Tensor) -> np.ndarray:
        """``[N, H, W]`` frames -> ``[N, feature_dim]``."""

    def embed_sequence(self, sequences: torch.Tensor) -> np.ndarray:
        """``[N, T, H, W]`` sequences -> ``[N, feature_dim]``."""


class Classifier(Protocol):
    def predict_proba(self, images: torch.Tensor) -> np.ndarray:
        """``[N, H, W]`` frames -> ``[N, classes]`` rows summing to one."""


class IdentityEmbedder:
    """Flattened pixels as features. Only practical for tiny images."""

    def __init__(self, shape: Tuple[int, ...]):
        self.shape = tuple(shape)
        self.feature_dim = int(np.prod(self.shape))

    def embed_image(self, images):
        return _np(images).reshape(len(images), -1)

    def embed_sequence(self, sequences):
        return _np(sequences).reshape(len(sequences), -1)


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of area-pooled pixels; deterministic given the seed.

    Frames are average-pooled to ``pool`` x ``pool`` before projection; sequences
    concatenate the pooled frames in time order.
    """

    def __init__(self, feature_dim: int = 64, pool: int = 16, timesteps: int = 3, seed: int = 0):
        self.feature_dim = feature_dim
        self.pool = pool
        rng = np.random.default_rng(seed)
        d = pool * pool
        self._img = rng.standard_normal((d, feature_dim)) / np.sqrt(d)
        self._seq = rng.standard_normal((d * timesteps, feature_dim)) / np.sqrt(d * timesteps)

    def _pooled(self, x: torch.Tensor) -> np.ndarray:
        x = torch.as_tensor(x, dtype=torch.float64)
        lead = x.shape[:-2]
        x = torch.nn.functional.adaptive_avg_pool2d(x.reshape(-1, 1, *x.shape[-2:]), self.pool)
        return x.reshape(*lead, -1).numpy()

    def embed_image(self, images):
        return self._pooled(images) @ self._img

    def embed_sequence(self, sequences):
        p = self._pooled(sequences)
        return p.reshape(p.shape[0], -1) @ self._seq


class RandomSoftmaxClassifier:
    """Softmax over a fixed random projection; a stand-in when no trained classifier is supplied."""

    def __init__(self, classes: int = 10, pool: int = 16, temperature: float = 1.0, seed: int = 0):
        self.embedder = RandomProjectionEmbedder(classes, pool, seed=seed)
        self.temperature = temperature

    def predict_proba(self, images):
        logits = self.embedder.embed_image(images) / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy().astype(np.float64) if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def _stats(batches: Iterable, embed) -> FeatureGaussian:
    moments = None
    for batch in batches:
        feats = embed(batch)
        moments = (moments or RunningMoments(feats.shape[1])).update(feats)
    if moments is None:
        raise ValueError("no samples")
    return moments.gaussian()


def _batched(x, batch_size):
    if isinstance(x, (torch.Tensor, np.ndarray)):
        for i in range(0, len(x), batch_size):
            yield x[i : i + batch_size]
    else:
        yield from x


def compute_fid(real_frames, fake_frames, embedder: Embedder, batch_size: int = 256) -> float:
    """Frechet distance between embedded single frames (``[N, H, W]`` or an iterable of batches)."""
    a = _stats(_batched(real_frames, batch_size), embedder.embed_image)
    b = _stats(_batched(fake_frames, batch_size), embedder.embed_image)
    return frechet_distance(a, b)


def compute_fvd(real_seqs, fake_seqs, embedder: Embedder, batch_size: int = 256) -> float:
    """Frechet distance between embedded whole sequences (``[N, T, H, W]``)."""
    a = _stats(_batched(real_seqs, batch_size), embedder.embed_sequence)
    b = _stats(_batched(fake_seqs, batch_size), embedder.embed_sequence)
    return frechet_distance(a, b)


def compute_is(frames, classifier: Classifier, batch_size: int = 256) -> float:
    probs = np.concatenate([classifier.predict_proba(b) for b in _batched(frames, batch_size)])
    return inception_score(probs)


# Reported values for the full-scale model on the laboratory dataset. Not reproducible
# with the stand-in embedders; kept for reference in reports.
REFERENCE_TARGETS = {
    "fid.bf": 33.3687,
    "fid.gfp": 207.8409,
    "fvd.bf": 4.4632,
    "fvd.gfp": 30.1650,
    "is.bf": 1.864,
    "is.gfp": 2.437,
    "is_dataset.bf": 2.021,
    "is_dataset.gfp": 2.479,
}


def evaluate_pairs(real_batches: Iterable, fake_batches: Iterable, embedder: Embedder,
                   classifier: Optional[Classifier] = None, generator: Optional[torch.Generator] = None) -> dict:
    """Per-domain FID / FVD / IS from matching streams of ``(bf, gfp)`` batches.

    FID and IS use one uniformly sampled frame per sequence.
    """
    acc = {k: None for k in ("fid_r_bf", "fid_r_gfp", "fid_f_bf", "fid_f_gfp", "fvd_r_bf", "fvd_r_gfp", "fvd_f_bf", "fvd_f_gfp")}
    probs = {"bf": [], "gfp": [], "real_bf": [], "real_gfp": []}

    def add(key, feats):
        acc[key] = (acc[key] or RunningMoments(feats.shape[1])).update(feats)

    for tag, stream in (("r", real_batches), ("f", fake_batches)):
        for bf, gfp in stream:
            fb, fg, _ = sample_eval_frame(bf, gfp, generator)
            add(f"fid_{tag}_bf", embedder.embed_image(fb))
            add(f"fid_{tag}_gfp", embedder.embed_image(fg))
            add(f"fvd_{tag}_bf", embedder.embed_sequence(bf))
            add(f"fvd_{tag}_gfp", embedder.embed_sequence(gfp))
            if classifier is not None:
                prefix = "" if tag == "f" else "real_"
                probs[prefix + "bf"].append(classifier.predict_proba(fb))
                probs[prefix + "gfp"].append(classifier.predict_proba(fg))
    if any(v is None for v in acc.values()):
        raise ValueError("both streams must contain at least one batch")
    report = {}
    for dom in ("bf", "gfp"):
        report[f"fid.{dom}"] = frechet_distance(acc[f"fid_r_{dom}"].gaussian(), acc[f"fid_f_{dom}"].gaussian())
        report[f"fvd.{dom}"] = frechet_distance(acc[f"fvd_r_{dom}"].gaussian(), acc[f"fvd_f_{dom}"].gaussian())
        if classifier is not None:
            report[f"is.{dom}"] = inception_score(np.concatenate(probs[dom]))
            report[f"is_dataset.{dom}"] = inception_score(np.concatenate(probs["real_" + dom]))
    return report
