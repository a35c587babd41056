"""Shared domain types, seeded randomness, and geometry helpers.

All numeric state is float64. Every record type is an immutable value;
randomness flows through explicitly passed ``numpy.random.Generator``
instances created by :func:`seeded_rng` / :func:`derived_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

__all__ = [
    "OOV_MARKER",
    "FOREGROUND",
    "BACKGROUND",
    "seeded_rng",
    "derived_rng",
    "as_embedding",
    "l2_normalize",
    "validate_box",
    "box_iou",
    "LabeledEmbedding",
    "DetectionRecord",
    "GroundTruthRecord",
    "RunConfig",
]

# Sentinel class index for out-of-vocabulary samples in labeled embeddings.
# Never a valid in-vocabulary index (those are >= 0).
OOV_MARKER = -1

FOREGROUND = "foreground"
BACKGROUND = "background"

_U64 = (1 << 64) - 1


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random source: identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & _U64))


def derived_rng(seed: int, *offsets: int) -> np.random.Generator:
    """Independent sub-stream derived from (seed, offsets).

    Parallel or multi-phase code must not share one generator; each phase
    gets its own stream keyed by a fixed offset tuple.
    """
    entropy = [int(seed) & _U64] + [int(o) & _U64 for o in offsets]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_embedding(values, unit_norm: bool = False) -> np.ndarray:
    """Validate and return a float64 embedding vector.

    Requires dimension >= 1 and all entries finite. With ``unit_norm`` the
    L2 norm must equal 1 within 1e-6.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValueError(f"embedding must be a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding has non-finite entries")
    if unit_norm and abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError(f"embedding is not unit-norm: |v| = {np.linalg.norm(v)!r}")
    return v


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm. Zero vectors are rejected."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def validate_box(box) -> tuple[float, float, float, float]:
    """Check (x1, y1, x2, y2) with x2 > x1 and y2 > y1; return as tuple."""
    x1, y1, x2, y2 = (float(c) for c in box)
    if not all(np.isfinite(c) for c in (x1, y1, x2, y2)):
        raise ValueError(f"box has non-finite coordinates: {box}")
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate box: {box}")
    return (x1, y1, x2, y2)


def box_iou(a, b) -> float:
    """Intersection-over-union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = validate_box(a)
    bx1, by1, bx2, by2 = validate_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass(frozen=True)
class LabeledEmbedding:
    """An embedding with its class index and proposal role.

    ``class_index`` is an in-vocabulary index in [0, K-1] or the
    out-of-vocabulary sentinel :data:`OOV_MARKER`.
    """

    values: np.ndarray
    class_index: int
    role: str = FOREGROUND

    def __post_init__(self):
        object.__setattr__(self, "values", as_embedding(self.values))
        if self.class_index < 0 and self.class_index != OOV_MARKER:
            raise ValueError(f"invalid class index {self.class_index}")
        if self.role not in (FOREGROUND, BACKGROUND):
            raise ValueError(f"invalid role {self.role!r}")

    @property
    def is_oov(self) -> bool:
        return self.class_index == OOV_MARKER


@dataclass(frozen=True)
class DetectionRecord:
    """One predicted box with per-class scores over K+1 slots (K IV + OOV).

    ``predicted_label`` must equal the argmax of ``scores`` with ties
    resolved to the lowest index.
    """

    box: tuple[float, float, float, float]
    scores: np.ndarray
    predicted_label: int
    image_id: str

    def __post_init__(self):
        object.__setattr__(self, "box", validate_box(self.box))
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.shape[0] < 2:
            raise ValueError(f"scores must be a vector of length K+1, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
            raise ValueError("scores must be finite and within [0, 1]")
        object.__setattr__(self, "scores", s)
        if self.predicted_label != int(np.argmax(s)):
            raise ValueError(
                f"predicted_label {self.predicted_label} is not the argmax "
                f"(lowest-index tie-break) of scores"
            )

    @property
    def score(self) -> float:
        """Confidence of the predicted label."""
        return float(self.scores[self.predicted_label])


@dataclass(frozen=True)
class GroundTruthRecord:
    """One annotated object: box plus class index in [0, K] (K marks OOV)."""

    box: tuple[float, float, float, float]
    class_index: int
    image_id: str

    def __post_init__(self):
        object.__setattr__(self, "box", validate_box(self.box))
        if self.class_index < 0:
            raise ValueError(f"ground-truth class index must be >= 0, got {self.class_index}")


@dataclass(frozen=True)
class RunConfig:
    """Full hyperparameter set for one reproducible run.

    Field groups:
      geometry        d, k, n_seen
      prompt model    queue_size, mask_ratio, alpha_noise, noise_sigma,
                      beta_reg, pool_size
      mining          top_k, fg_bg_ratio, map_size
      density prior   h, tau_hat (None selects the bank-percentile rule),
                      tau_percentile, focal_alpha, lambda_ld, bank_capacity
      alignment       temperature_tau
      optimization    learning_rate, iterations, batch_scenes
      synthetic data  train_scenes, test_scenes, fg_per_scene, bg_per_scene,
                      oov_per_scene, cluster_noise, queue_noise,
                      ambiguous_fraction
    """

    d: int = 16
    k: int = 6
    seed: int = 0
    n_seen: int = 4

    queue_size: int = 24
    mask_ratio: float = 0.5
    alpha_noise: float = 0.1
    noise_sigma: float = 1.0
    beta_reg: float = 1e-3
    pool_size: int = 64

    top_k: int = 3
    fg_bg_ratio: tuple[int, int] = (1, 1)
    map_size: int = 6

    h: float = 0.8
    tau_hat: float | None = None
    tau_percentile: float = 10.0
    focal_alpha: float = 2.0
    lambda_ld: float = 10.0
    bank_capacity: int = 512

    temperature_tau: float = 0.1
    eval_oov_draws: int = 64
    align_mined_to_oov: bool = True

    learning_rate: float = 5e-4
    iterations: int = 3000
    batch_scenes: int = 4
    weight_anchor: float = 0.02

    train_scenes: int = 60
    test_scenes: int = 50
    fg_per_scene: int = 6
    bg_per_scene: int = 6
    oov_per_scene: int = 4
    feature_scale: float = 3.0
    cluster_noise: float = 0.05
    queue_noise: float = 0.05
    ambiguous_fraction: float = 0.12

    def __post_init__(self):
        object.__setattr__(self, "fg_bg_ratio", tuple(int(x) for x in self.fg_bg_ratio))
        self.validate()

    def validate(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.n_seen <= self.k:
            raise ValueError("n_seen must be in [1, k]")
        if not -(1 << 63) <= self.seed < (1 << 64):
            raise ValueError("seed must fit in 64 bits")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        if self.alpha_noise < 0.0:
            raise ValueError("alpha_noise must be >= 0")
        if self.noise_sigma <= 0.0:
            raise ValueError("noise_sigma must be > 0")
        if self.beta_reg <= 0.0:
            raise ValueError("beta_reg must be > 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if len(self.fg_bg_ratio) != 2 or min(self.fg_bg_ratio) < 1:
            raise ValueError("fg_bg_ratio must be a pair of positive integers")
        if self.map_size < 1:
            raise ValueError("map_size must be >= 1")
        if self.h <= 0.0:
            raise ValueError("h must be > 0")
        if self.tau_hat is not None and self.tau_hat <= 0.0:
            raise ValueError("tau_hat must be > 0 when set")
        if not 0.0 < self.tau_percentile < 100.0:
            raise ValueError("tau_percentile must be in (0, 100)")
        if self.focal_alpha < 0.0:
            raise ValueError("focal_alpha must be >= 0")
        if self.lambda_ld < 0.0:
            raise ValueError("lambda_ld must be >= 0")
        if self.bank_capacity < 1:
            raise ValueError("bank_capacity must be >= 1")
        if self.temperature_tau <= 0.0:
            raise ValueError("temperature_tau must be > 0")
        if self.eval_oov_draws < 1:
            raise ValueError("eval_oov_draws must be >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_scenes < 1:
            raise ValueError("batch_scenes must be >= 1")
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("scene counts must be >= 1")
        if self.fg_per_scene < 1 or self.bg_per_scene < 0 or self.oov_per_scene < 0:
            raise ValueError("per-scene proposal counts out of range")
        if self.cluster_noise < 0.0 or self.queue_noise < 0.0:
            raise ValueError("noise scales must be >= 0")
        if self.feature_scale <= 0.0:
            raise ValueError("feature_scale must be > 0")
        if self.weight_anchor < 0.0:
            raise ValueError("weight_anchor must be >= 0")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ValueError("ambiguous_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)
