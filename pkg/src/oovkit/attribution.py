"""Gradient-attribution uncertainty for pseudo-OOV mining.

Per-proposal attribution gradient maps (one map per channel) are reduced to
a probability simplex over channels plus a concentration vector of
positive-gradient counts. Treating these as Dirichlet observations, the
negative log density scores how diffuse the attribution is: diffuse
gradients mean an uncertain proposal, the raw material for pseudo-OOV
mining.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

__all__ = [
    "GradientMapSet",
    "GradientAttribution",
    "MinedProposal",
    "PseudoOOVBatch",
    "SIMPLEX_FLOOR",
    "attribution_stats",
    "smooth_simplex",
    "concentration_from_counts",
    "dirichlet_log_density",
    "uncertainty",
    "mine_pseudo_oov",
]

# Lower clamp applied to simplex entries before taking logs.
SIMPLEX_FLOOR = 1e-8


@dataclass(frozen=True)
class GradientMapSet:
    """Attribution gradients for one proposal: C maps of shape (W, H)."""

    proposal_id: str
    maps: np.ndarray
    is_foreground: bool

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3:
            raise ValueError(f"maps must have shape (C, W, H), got {m.shape}")
        c, w, h = m.shape
        if c < 2 or w < 1 or h < 1:
            raise ValueError(f"need C >= 2 channels and non-empty maps, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("gradient maps contain non-finite entries")
        object.__setattr__(self, "maps", m)

    @property
    def n_channels(self) -> int:
        return self.maps.shape[0]


@dataclass(frozen=True)
class GradientAttribution:
    """Channel simplex ``x_g`` and raw positive-count concentration ``alpha_g``."""

    x_g: np.ndarray
    alpha_g: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_g, dtype=np.float64)
        a = np.asarray(self.alpha_g, dtype=np.int64)
        if x.shape != a.shape or x.ndim != 1:
            raise ValueError("x_g and alpha_g must be 1-D vectors of equal length")
        if np.any(x < 0.0) or abs(x.sum() - 1.0) > 1e-9:
            raise ValueError("x_g must lie on the probability simplex")
        if np.any(a < 0):
            raise ValueError("alpha_g entries must be >= 0")
        object.__setattr__(self, "x_g", x)
        object.__setattr__(self, "alpha_g", a)


@dataclass(frozen=True)
class MinedProposal:
    proposal_id: str
    uncertainty: float
    feature: np.ndarray


@dataclass(frozen=True)
class PseudoOOVBatch:
    """Mined pseudo-OOV proposals, split by role, sorted by uncertainty descending."""

    foreground: tuple[MinedProposal, ...]
    background: tuple[MinedProposal, ...]

    def __post_init__(self):
        for group in (self.foreground, self.background):
            us = [p.uncertainty for p in group]
            if any(a < b for a, b in zip(us, us[1:])):
                raise ValueError("groups must be sorted by uncertainty descending")
        object.__setattr__(self, "foreground", tuple(self.foreground))
        object.__setattr__(self, "background", tuple(self.background))


def attribution_stats(gset: GradientMapSet) -> GradientAttribution:
    """Reduce gradient maps to (simplex, positive-count concentration).

    The simplex entry for channel c is the mean absolute gradient of that
    channel's map, normalized across channels. The concentration entry is
    the count of strictly positive map entries. All-zero map sets have no
    defined simplex and are rejected.
    """
    agg = np.abs(gset.maps).mean(axis=(1, 2))
    total = agg.sum()
    if total == 0.0:
        raise ValueError(
            f"proposal {gset.proposal_id!r}: all gradient maps are zero, simplex undefined"
        )
    counts = (gset.maps > 0.0).sum(axis=(1, 2))
    return GradientAttribution(x_g=agg / total, alpha_g=counts)


def smooth_simplex(x, floor: float = SIMPLEX_FLOOR) -> np.ndarray:
    """Clamp simplex entries to at least ``floor`` and renormalize."""
    x = np.asarray(x, dtype=np.float64)
    x = np.maximum(x, floor)
    return x / x.sum()


def concentration_from_counts(counts) -> np.ndarray:
    """Evidence-to-concentration shift: counts + 1, so entries are >= 1."""
    return np.asarray(counts, dtype=np.float64) + 1.0


def dirichlet_log_density(x, alpha) -> float:
    """Log density of Dirichlet(alpha) at simplex point x.

    Data term sum_c (alpha_c - 1) log x_c minus the log-beta normalizer
    sum_c logGamma(alpha_c) - logGamma(sum_c alpha_c).
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if x.shape != alpha.shape or x.ndim != 1:
        raise ValueError("x and alpha must be 1-D vectors of equal length")
    if np.any(x <= 0.0):
        raise ValueError("simplex entries must be strictly positive (smooth first)")
    if abs(x.sum() - 1.0) > 1e-6:
        raise ValueError(f"x must sum to 1, got {x.sum()!r}")
    if np.any(alpha <= 0.0):
        raise ValueError("concentration entries must be > 0")
    data = np.sum((alpha - 1.0) * np.log(x))
    log_beta = np.sum(gammaln(alpha)) - gammaln(alpha.sum())
    return float(data - log_beta)


def uncertainty(gset: GradientMapSet) -> float:
    """Negative Dirichlet log density of the proposal's attribution stats.

    Concentrations are the positive counts shifted by +1 and the simplex is
    floor-smoothed, so the density is defined even at map-set extremes.
    Higher values mean more diffuse attribution, i.e. a stronger pseudo-OOV
    candidate.
    """
    stats = attribution_stats(gset)
    x = smooth_simplex(stats.x_g)
    alpha = concentration_from_counts(stats.alpha_g)
    return -dirichlet_log_density(x, alpha)


def _take_top(scored: list[tuple[float, str, np.ndarray]], count: int) -> tuple[MinedProposal, ...]:
    ordered = sorted(scored, key=lambda t: (-t[0], t[1]))
    return tuple(
        MinedProposal(proposal_id=pid, uncertainty=u, feature=feat)
        for u, pid, feat in ordered[:count]
    )


def mine_pseudo_oov(
    proposals: Sequence[tuple[GradientMapSet, np.ndarray]],
    top_k: int,
    fg_bg_ratio: tuple[int, int] = (1, 1),
) -> PseudoOOVBatch:
    """Select the highest-uncertainty proposals, balanced across roles.

    Takes the ``top_k`` most uncertain foreground proposals and the
    ratio-matched count of background proposals (top_k * bg / fg). Groups
    come back sorted by uncertainty descending; score ties break on
    proposal id ascending, so the result does not depend on input order.
    Short groups are filled with whatever is available.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    fg_share, bg_share = int(fg_bg_ratio[0]), int(fg_bg_ratio[1])
    if fg_share < 1 or bg_share < 1:
        raise ValueError("fg_bg_ratio entries must be >= 1")
    if not proposals:
        raise ValueError("no proposals to mine")
    fg_scored: list[tuple[float, str, np.ndarray]] = []
    bg_scored: list[tuple[float, str, np.ndarray]] = []
    for gset, feature in proposals:
        entry = (uncertainty(gset), gset.proposal_id, np.asarray(feature, dtype=np.float64))
        (fg_scored if gset.is_foreground else bg_scored).append(entry)
    bg_count = (top_k * bg_share) // fg_share
    return PseudoOOVBatch(
        foreground=_take_top(fg_scored, top_k),
        background=_take_top(bg_scored, bg_count),
    )
