"""Virtual out-of-vocabulary prompt synthesis.

In-vocabulary prompt embeddings are modeled as class-conditional Gaussians
with a shared (tied) covariance. Candidates drawn from those Gaussians are
ranked by Mahalanobis distance to their generating class mean, and the
lowest-likelihood one becomes the virtual OOV prompt embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .types import l2_normalize

__all__ = [
    "PromptQueue",
    "ClassGaussianModel",
    "MaskedNoiseSpec",
    "estimate_class_means",
    "estimate_tied_covariance",
    "fit_class_gaussians",
    "mahalanobis_sq",
    "gaussian_log_density",
    "joint_log_density",
    "synthesize_oov_prompt",
    "OOVCandidate",
]


@dataclass(frozen=True)
class PromptQueue:
    """Per-class lists of prompt embeddings, all of one dimension.

    ``embeddings[i]`` is an (n_i, d) array with 1 <= n_i <= capacity.
    """

    embeddings: tuple[np.ndarray, ...]
    capacity: int | None = None

    def __post_init__(self):
        if len(self.embeddings) < 1:
            raise ValueError("queue needs at least one class")
        arrays = []
        d = None
        for i, arr in enumerate(self.embeddings):
            a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
            if a.shape[0] < 1:
                raise ValueError(f"class {i} has an empty prompt queue")
            if self.capacity is not None and a.shape[0] > self.capacity:
                raise ValueError(
                    f"class {i} holds {a.shape[0]} prompts, over capacity {self.capacity}"
                )
            if not np.all(np.isfinite(a)):
                raise ValueError(f"class {i} has non-finite prompt entries")
            if d is None:
                d = a.shape[1]
            elif a.shape[1] != d:
                raise ValueError(f"class {i} dimension {a.shape[1]} != {d}")
            arrays.append(a)
        object.__setattr__(self, "embeddings", tuple(arrays))

    @property
    def n_classes(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings[0].shape[1]

    @classmethod
    def from_labeled(cls, samples: Sequence, n_classes: int | None = None) -> "PromptQueue":
        """Group labeled embeddings by class index into a queue."""
        by_class: dict[int, list[np.ndarray]] = {}
        for s in samples:
            if s.class_index < 0:
                raise ValueError("prompt queues hold in-vocabulary classes only")
            by_class.setdefault(s.class_index, []).append(s.values)
        k = n_classes if n_classes is not None else max(by_class) + 1
        missing = [i for i in range(k) if i not in by_class]
        if missing:
            raise ValueError(f"no prompts for classes {missing}")
        return cls(tuple(np.stack(by_class[i]) for i in range(k)))


@dataclass(frozen=True)
class ClassGaussianModel:
    """K class means with one tied covariance matrix."""

    means: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.covariance, dtype=np.float64)
        d = m.shape[1]
        if c.shape != (d, d):
            raise ValueError(f"covariance shape {c.shape} does not match dimension {d}")
        if not np.allclose(c, c.T, atol=1e-9, rtol=0.0):
            raise ValueError("covariance is not symmetric within 1e-9")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariance", c)
        _cholesky(c)  # fail fast if not positive definite

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class MaskedNoiseSpec:
    """Bernoulli-masked Gaussian perturbation applied during covariance estimation.

    ``mask_ratio`` is the keep-probability of the Bernoulli mask,
    ``alpha_noise`` the perturbation scale, ``noise_sigma`` the std of the
    raw noise entries.
    """

    mask_ratio: float = 0.5
    alpha_noise: float = 0.1
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        if self.alpha_noise < 0.0:
            raise ValueError("alpha_noise must be >= 0")
        if self.noise_sigma <= 0.0:
            raise ValueError("noise_sigma must be > 0")


def _cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises ValueError if factorization fails."""
    try:
        return scipy.linalg.cholesky(cov, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError("covariance is singular or not positive definite") from exc


def estimate_class_means(queue: PromptQueue) -> np.ndarray:
    """Per-class arithmetic means, shape (K, d)."""
    return np.stack([arr.mean(axis=0) for arr in queue.embeddings])


def estimate_tied_covariance(
    queue: PromptQueue,
    means: np.ndarray,
    spec: MaskedNoiseSpec,
    beta_reg: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Tied covariance over all classes with masked-noise perturbation.

    Each queue entry is perturbed by alpha * (mask (*) noise) with a fresh
    Bernoulli mask and Gaussian noise vector per entry; the scatter of the
    perturbed entries around their unperturbed class means is averaged over
    all entries, then ridge-regularized by ``beta_reg`` times the identity.
    The result is symmetric positive definite with smallest eigenvalue
    >= beta_reg.
    """
    if beta_reg <= 0.0:
        raise ValueError("beta_reg must be > 0")
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    d = queue.dim
    if means.shape != (queue.n_classes, d):
        raise ValueError(
            f"means shape {means.shape} does not match queue ({queue.n_classes}, {d})"
        )
    scatter = np.zeros((d, d))
    total = 0
    for i, arr in enumerate(queue.embeddings):
        for row in arr:
            mask = rng.random(d) < spec.mask_ratio
            noise = rng.normal(0.0, spec.noise_sigma, size=d)
            dev = row + spec.alpha_noise * (mask * noise) - means[i]
            scatter += np.outer(dev, dev)
            total += 1
    cov = scatter / total + beta_reg * np.eye(d)
    return (cov + cov.T) / 2.0


def fit_class_gaussians(
    queue: PromptQueue,
    spec: MaskedNoiseSpec,
    beta_reg: float,
    rng: np.random.Generator,
) -> ClassGaussianModel:
    """Estimate means and tied covariance in one call."""
    means = estimate_class_means(queue)
    cov = estimate_tied_covariance(queue, means, spec, beta_reg, rng)
    return ClassGaussianModel(means=means, covariance=cov)


def mahalanobis_sq(v, mean, cov) -> float:
    """Squared Mahalanobis distance (v - mean)^T cov^-1 (v - mean).

    Zero iff v equals mean; requires a positive-definite covariance.
    """
    v = np.asarray(v, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    diff = v - mean
    chol = _cholesky(np.asarray(cov, dtype=np.float64))
    y = scipy.linalg.solve_triangular(chol, diff, lower=True)
    return float(y @ y)


def gaussian_log_density(v, mean, cov) -> float:
    """Log density of the multivariate normal N(mean, cov) at v."""
    v = np.asarray(v, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = v.shape[0]
    chol = _cholesky(cov)
    y = scipy.linalg.solve_triangular(chol, v - mean, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * d * np.log(2.0 * np.pi) - 0.5 * log_det - 0.5 * (y @ y))


def joint_log_density(v, model: ClassGaussianModel) -> float:
    """Log of the product of all class-conditional densities at v."""
    return float(
        sum(gaussian_log_density(v, mu, model.covariance) for mu in model.means)
    )


@dataclass(frozen=True)
class OOVCandidate:
    """Diagnostics for one synthesized candidate."""

    class_index: int
    mahalanobis_sq: float
    log_density: float
    values: np.ndarray
    selected: bool = False


def synthesize_oov_prompt(
    model: ClassGaussianModel,
    pool_size: int,
    rng: np.random.Generator,
    return_candidates: bool = False,
):
    """Sample a virtual OOV prompt from low-likelihood Gaussian regions.

    Draws ``pool_size`` candidates from each class Gaussian, ranks the whole
    pool by squared Mahalanobis distance to the generating class mean, and
    returns the farthest (lowest-likelihood) candidate, L2-normalized. Ties
    resolve to the earliest draw. With ``return_candidates`` the full
    diagnostic pool is returned alongside.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    chol = _cholesky(model.covariance)
    d = model.dim
    log_norm = -0.5 * d * np.log(2.0 * np.pi) - np.sum(np.log(np.diag(chol)))
    pool_values = []
    pool_dists = []
    for i in range(model.n_classes):
        draws = model.means[i] + rng.standard_normal((pool_size, d)) @ chol.T
        y = scipy.linalg.solve_triangular(chol, (draws - model.means[i]).T, lower=True)
        pool_values.append(draws)
        pool_dists.append(np.sum(y * y, axis=0))
    dists = np.concatenate(pool_dists)
    values = np.concatenate(pool_values)
    best_idx = int(np.argmax(dists))
    prompt = l2_normalize(values[best_idx])
    if not return_candidates:
        return prompt
    candidates = [
        OOVCandidate(
            class_index=j // pool_size,
            mahalanobis_sq=float(dists[j]),
            log_density=float(log_norm - 0.5 * dists[j]),
            values=values[j],
            selected=(j == best_idx),
        )
        for j in range(values.shape[0])
    ]
    return prompt, candidates
