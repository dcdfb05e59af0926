"""Training objectives and their analytic gradients.

Reduction conventions: the contrastive and cross-entropy terms are summed
over the batch, the memory term is averaged over the images that have a
prototype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import NumericError, log_softmax

DEFAULT_TAU = 0.07


class SamplerContractError(ValueError):
    """A contrastive anchor had no positive in the batch."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda1 * factor, self.lambda2 * factor, self.lambda3 * factor)


@dataclass(frozen=True)
class ContrastiveBatch:
    """Projected multiview vectors (both views of both modalities) with labels."""

    vectors: np.ndarray
    labels: np.ndarray
    tau: float = DEFAULT_TAU


@dataclass(frozen=True)
class LossParts:
    cmcm: float = 0.0
    ml: float = 0.0
    cls: float = 0.0
    ask: float = 0.0

    @property
    def dl(self) -> float:
        return self.cls + self.ask


def cmcm_loss(batch: ContrastiveBatch) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over the whole multiview set.

    Every row is an anchor; positives are all other rows with the same label
    regardless of modality or view. Returns ``(loss, d loss / d vectors)``.
    """
    v = np.asarray(batch.vectors, dtype=np.float64)
    y = np.asarray(batch.labels)
    m = v.shape[0]
    if m < 2 or y.shape[0] != m:
        raise ValueError("need at least two vectors with one label each")
    if batch.tau <= 0:
        raise ValueError("temperature must be positive")

    s = (v @ v.T) / batch.tau
    off = ~np.eye(m, dtype=bool)
    pos = (y[:, None] == y[None, :]) & off
    n_pos = pos.sum(axis=1)
    if (n_pos == 0).any():
        bad = int(np.flatnonzero(n_pos == 0)[0])
        raise SamplerContractError(f"anchor {bad} (label {y[bad]}) has no positive")

    masked = np.where(off, s, -np.inf)
    log_prob = log_softmax(masked)
    per_anchor = -np.where(pos, log_prob, 0.0).sum(axis=1) / n_pos
    loss = math.fsum(per_anchor)

    q = np.where(off, np.exp(log_prob), 0.0)
    g = q - pos / n_pos[:, None]
    grad = ((g + g.T) @ v) / batch.tau
    return loss, grad


def memory_loss_rows(f_img: np.ndarray, protos: np.ndarray, has_proto: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative cosine between rows and their prototypes, masked rows excluded."""
    grad = np.zeros_like(f_img, dtype=np.float64)
    n = int(has_proto.sum())
    if n == 0:
        return 0.0, grad
    f = f_img[has_proto]
    p = protos[has_proto]
    fn = np.sqrt(np.einsum("ij,ij->i", f, f))
    pn = np.sqrt(np.einsum("ij,ij->i", p, p))
    if (fn == 0).any() or (pn == 0).any():
        raise NumericError("memory loss on a zero-norm feature or prototype")
    cos = np.einsum("ij,ij->i", f, p) / (fn * pn)
    loss = -math.fsum(cos) / n
    dcos = p / (fn * pn)[:, None] - cos[:, None] * f / (fn**2)[:, None]
    grad[has_proto] = -dcos / n
    return loss, grad


def prototypes_for(labels, bank) -> tuple[np.ndarray, np.ndarray]:
    """Look up one prototype per label; returns (rows, mask of labels that had one)."""
    labels = np.asarray(labels)
    protos = np.zeros((labels.shape[0], bank.dim))
    mask = np.zeros(labels.shape[0], dtype=bool)
    for i, c in enumerate(labels):
        p = bank.prototype(int(c))
        if p is not None:
            protos[i] = p
            mask[i] = True
    return protos, mask


def memory_loss(f_img: np.ndarray, y_img, bank) -> tuple[float, np.ndarray]:
    """Pull each image feature toward its category's sketch prototype.

    Categories with an empty bank contribute nothing. The prototype is a
    constant here: the returned gradient is with respect to ``f_img`` only.
    """
    protos, mask = prototypes_for(y_img, bank)
    return memory_loss_rows(np.asarray(f_img, dtype=np.float64), protos, mask)


def cls_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")
    if ((labels < 0) | (labels >= c)).any():
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    loss = -math.fsum(logp[np.arange(n), labels])
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad


def ask_loss(logits: np.ndarray, teacher_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy against soft teacher targets, summed over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    t = np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"teacher shape {t.shape} != logits shape {logits.shape}")
    if (t < 0).any() or (np.abs(t.sum(axis=1) - 1.0) > 1e-8).any():
        raise ValueError("teacher rows must be probability distributions")
    logp = log_softmax(logits)
    loss = -math.fsum((t * logp).ravel())
    return loss, np.exp(logp) - t


def total_loss(parts: LossParts, w: LossWeights) -> float:
    return w.lambda1 * parts.cmcm + w.lambda2 * parts.ml + w.lambda3 * (parts.cls + parts.ask)
