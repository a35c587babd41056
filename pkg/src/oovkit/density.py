"""Low-density prior: Gaussian KDE against an in-vocabulary feature bank.

Pseudo-OOV features are penalized with a hinge on their log KDE density
above a threshold, weighted by a focal factor of the sample's ground-truth
probability. Gradients are analytic and flow to the pseudo-OOV features
only; the bank is constant within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import PseudoOOVBatch

__all__ = [
    "FeatureBank",
    "LDPConfig",
    "kde_density",
    "kde_grad",
    "density_threshold",
    "ld_hinge",
    "LDPriorResult",
    "ld_prior_loss",
]


@dataclass(frozen=True)
class FeatureBank:
    """Bank of in-vocabulary features, shape (N, d)."""

    features: np.ndarray

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if f.shape[0] < 1:
            raise ValueError("feature bank is empty")
        if not np.all(np.isfinite(f)):
            raise ValueError("feature bank has non-finite entries")
        object.__setattr__(self, "features", f)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LDPConfig:
    """Bandwidth, density threshold, and focal exponent for the prior."""

    h: float
    tau_hat: float
    focal_alpha: float = 2.0

    def __post_init__(self):
        if self.h <= 0.0:
            raise ValueError("bandwidth h must be > 0")
        if self.tau_hat <= 0.0:
            raise ValueError("density threshold tau_hat must be > 0")
        if self.focal_alpha < 0.0:
            raise ValueError("focal_alpha must be >= 0")


def _bank_array(bank) -> np.ndarray:
    if isinstance(bank, FeatureBank):
        return bank.features
    f = np.atleast_2d(np.asarray(bank, dtype=np.float64))
    if f.shape[0] < 1:
        raise ValueError("feature bank is empty")
    return f


def _kernel_values(z: np.ndarray, feats: np.ndarray, h: float) -> np.ndarray:
    d = feats.shape[1]
    norm = (2.0 * np.pi * h * h) ** (d / 2.0)
    sq = np.sum((feats - z) ** 2, axis=1)
    return np.exp(-sq / (2.0 * h * h)) / norm


def kde_density(z, bank, h: float) -> float:
    """Gaussian-kernel mixture density of z against the bank.

    Exact evaluation: mean over bank points of the isotropic Gaussian
    kernel with bandwidth h. Always strictly positive.
    """
    if h <= 0.0:
        raise ValueError("bandwidth h must be > 0")
    feats = _bank_array(bank)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (feats.shape[1],):
        raise ValueError(f"feature dimension {z.shape} does not match bank {feats.shape}")
    return float(_kernel_values(z, feats, h).mean())


def kde_grad(z, bank, h: float) -> np.ndarray:
    """Gradient of kde_density with respect to z."""
    if h <= 0.0:
        raise ValueError("bandwidth h must be > 0")
    feats = _bank_array(bank)
    z = np.asarray(z, dtype=np.float64)
    k = _kernel_values(z, feats, h)
    return (k[:, None] * (feats - z)).mean(axis=0) / (h * h)


def density_threshold(bank, h: float, percentile: float = 10.0) -> float:
    """Density threshold rule: a low percentile of the bank's self-density.

    Evaluates kde_density at every bank point (each point's own kernel
    included) and returns the requested percentile, adapting the threshold
    to the bank's scale.
    """
    feats = _bank_array(bank)
    dens = [kde_density(p, feats, h) for p in feats]
    return float(np.percentile(dens, percentile))


def ld_hinge(z, bank, cfg: LDPConfig, s: float) -> tuple[float, np.ndarray]:
    """Focal-weighted hinge on log density above the threshold.

    Returns (loss, gradient w.r.t. z) with
    loss = s * (1 - s)^alpha * max(log p(z) - log tau_hat, 0). The gradient
    is the weight times grad p / p while the hinge is active and exactly
    zero otherwise.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("ground-truth probability s must be in [0, 1]")
    z = np.asarray(z, dtype=np.float64)
    weight = s * (1.0 - s) ** cfg.focal_alpha
    p = kde_density(z, bank, cfg.h)
    margin = np.log(p) - np.log(cfg.tau_hat)
    if weight == 0.0 or margin <= 0.0:
        return 0.0, np.zeros_like(z)
    grad = weight * kde_grad(z, bank, cfg.h) / p
    return float(weight * margin), grad


@dataclass(frozen=True)
class LDPriorResult:
    """Total loss plus per-sample terms; gradients carry the 1/B group scaling."""

    total: float
    fg_losses: tuple[float, ...]
    fg_grads: tuple[np.ndarray, ...]
    bg_losses: tuple[float, ...]
    bg_grads: tuple[np.ndarray, ...]


def ld_prior_loss(
    batch: PseudoOOVBatch,
    bank,
    cfg: LDPConfig,
    fg_weights,
    bg_weights,
) -> LDPriorResult:
    """Group-mean hinge losses for foreground and background pseudo-OOVs.

    Total is the foreground mean plus the background mean; an empty group
    contributes zero. Per-sample gradients are scaled by the group size so
    they are exact gradients of the total.
    """
    fg_weights = list(fg_weights)
    bg_weights = list(bg_weights)
    if len(fg_weights) != len(batch.foreground):
        raise ValueError("fg_weights length does not match batch foreground group")
    if len(bg_weights) != len(batch.background):
        raise ValueError("bg_weights length does not match batch background group")

    def group(samples, weights):
        losses, grads = [], []
        for sample, s in zip(samples, weights):
            loss, grad = ld_hinge(sample.feature, bank, cfg, s)
            losses.append(loss)
            grads.append(grad)
        if not samples:
            return 0.0, (), ()
        b = len(samples)
        return sum(losses) / b, tuple(losses), tuple(g / b for g in grads)

    fg_mean, fg_losses, fg_grads = group(batch.foreground, fg_weights)
    bg_mean, bg_losses, bg_grads = group(batch.background, bg_weights)
    return LDPriorResult(
        total=fg_mean + bg_mean,
        fg_losses=fg_losses,
        fg_grads=fg_grads,
        bg_losses=bg_losses,
        bg_grads=bg_grads,
    )
