"""Similarity-based classification against a prompt table.

Logits are temperature-scaled cosine similarities between a proposal
feature and the K+2 prompt slots (K in-vocabulary classes, one virtual OOV
prompt, one background prompt). The alignment loss is the mean softmax
cross-entropy over those slots, normalized over all K+2 entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import box_iou, l2_normalize, validate_box

__all__ = [
    "PromptTable",
    "similarity_logits",
    "softmax",
    "alignment_loss",
    "alignment_loss_grad",
    "box_loss",
]


@dataclass(frozen=True)
class PromptTable:
    """K in-vocabulary prompts plus one OOV and one background prompt.

    All entries are unit-norm vectors of one dimension. Slot layout is
    [IV_0 .. IV_{K-1}, OOV, background], so labels take values in [0, K+1]
    with K the OOV slot and K+1 the background slot.
    """

    iv_prompts: np.ndarray
    oov_prompt: np.ndarray
    background_prompt: np.ndarray

    def __post_init__(self):
        iv = np.atleast_2d(np.asarray(self.iv_prompts, dtype=np.float64))
        oov = np.asarray(self.oov_prompt, dtype=np.float64)
        bg = np.asarray(self.background_prompt, dtype=np.float64)
        d = iv.shape[1]
        if oov.shape != (d,) or bg.shape != (d,):
            raise ValueError("prompt dimensions disagree")
        rows = np.vstack([iv, oov[None, :], bg[None, :]])
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("all prompts must be unit-norm within 1e-6")
        object.__setattr__(self, "iv_prompts", iv)
        object.__setattr__(self, "oov_prompt", oov)
        object.__setattr__(self, "background_prompt", bg)

    @property
    def n_classes(self) -> int:
        return self.iv_prompts.shape[0]

    @property
    def dim(self) -> int:
        return self.iv_prompts.shape[1]

    @property
    def oov_slot(self) -> int:
        return self.n_classes

    @property
    def background_slot(self) -> int:
        return self.n_classes + 1

    def as_matrix(self) -> np.ndarray:
        """All prompts stacked as rows, shape (K+2, d)."""
        return np.vstack(
            [self.iv_prompts, self.oov_prompt[None, :], self.background_prompt[None, :]]
        )


def similarity_logits(feature, table: PromptTable, tau: float = 0.01) -> np.ndarray:
    """Cosine similarity of the feature to each prompt slot, divided by tau.

    The feature is normalized internally, so entries lie in [-1/tau, 1/tau].
    """
    if tau <= 0.0:
        raise ValueError("temperature tau must be > 0")
    f = l2_normalize(np.asarray(feature, dtype=np.float64))
    return (table.as_matrix() @ f) / tau


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, n_slots: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_slots):
        raise ValueError(f"labels must lie in [0, {n_slots - 1}]")


def alignment_loss(features, labels, table: PromptTable, tau: float = 0.01) -> float:
    """Mean softmax cross-entropy of features against their label slots."""
    loss, _ = alignment_loss_grad(features, labels, table, tau)
    return loss


def alignment_loss_grad(
    features, labels, table: PromptTable, tau: float = 0.01
) -> tuple[float, np.ndarray]:
    """Alignment loss plus its analytic gradient w.r.t. the raw features.

    Features need not be unit-norm; the gradient includes the chain through
    the internal L2 normalization.
    """
    if tau <= 0.0:
        raise ValueError("temperature tau must be > 0")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if feats.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree in length")
    if feats.shape[0] < 1:
        raise ValueError("need at least one feature")
    prompts = table.as_matrix()
    _check_labels(labels, prompts.shape[0])

    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm feature cannot be normalized")
    unit = feats / norms[:, None]
    logits = (unit @ prompts.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = feats.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())

    probs = np.exp(log_probs)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    # d logit_j / d f = (T_j - (f_hat . T_j) f_hat) / (tau |f|)
    grad_unit = delta @ prompts
    grad_unit -= np.sum(grad_unit * unit, axis=1, keepdims=True) * unit
    grad = grad_unit / (tau * norms[:, None] * n)
    return loss, grad


def box_loss(pred, target) -> float:
    """IoU loss plus mean absolute coordinate difference.

    (1 - IoU) + mean(|pred - target|) over the four corner coordinates.
    Zero iff the boxes coincide.
    """
    p = np.asarray(validate_box(pred))
    t = np.asarray(validate_box(target))
    return float((1.0 - box_iou(p, t)) + np.abs(p - t).mean())
