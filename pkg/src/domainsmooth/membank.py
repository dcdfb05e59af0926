"""Per-category bank of the sketch features closest to the category's mean image feature."""
from __future__ import annotations

import csv
import io

import numpy as np

from . import kernels

DEFAULT_K = 10


class MemoryBank:
    """Keeps up to ``k`` sketch features per category.

    Each update ranks the stored entries plus the incoming sketch by cosine
    to the mean same-category image feature of the current batch and keeps
    the best ``k``; equal similarities keep the older entry. Entries are
    stored sorted by descending similarity and are detached copies.
    """

    def __init__(self, dim: int, k: int = DEFAULT_K):
        if k < 1 or dim < 1:
            raise ValueError("k and dim must be >= 1")
        self.k = k
        self.dim = dim
        self.counter = 0
        self._slot_of: dict[int, int] = {}
        self._vecs = np.zeros((0, k, dim))
        self._counters = np.zeros((0, k), dtype=np.int64)
        self._sizes = np.zeros(0, dtype=np.int64)

    def _slots(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        new = [int(c) for c in dict.fromkeys(labels.tolist()) if int(c) not in self._slot_of]
        if new:
            for c in new:
                self._slot_of[c] = len(self._slot_of)
            grow = len(new)
            self._vecs = np.concatenate([self._vecs, np.zeros((grow, self.k, self.dim))])
            self._counters = np.concatenate([self._counters, np.zeros((grow, self.k), dtype=np.int64)])
            self._sizes = np.concatenate([self._sizes, np.zeros(grow, dtype=np.int64)])
        return np.array([self._slot_of[int(c)] for c in labels], dtype=np.int64)

    def _check(self, feats: np.ndarray, what: str) -> np.ndarray:
        feats = np.ascontiguousarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None, :]
        if feats.shape[1] != self.dim:
            raise ValueError(f"{what} dimension {feats.shape[1]} != bank dimension {self.dim}")
        return feats

    def update(self, f_ske, y_ske: int, f_img_batch, y_img_batch) -> "MemoryBank":
        return self.update_batch(np.asarray(f_ske)[None, :], [y_ske], f_img_batch, y_img_batch)

    def update_batch(self, f_ske_batch, y_ske_batch, f_img_batch, y_img_batch) -> "MemoryBank":
        """Apply single-sketch updates in row order. Mutates and returns ``self``."""
        ske = self._check(f_ske_batch, "sketch")
        img = self._check(f_img_batch, "image")
        y_ske = np.asarray(y_ske_batch, dtype=np.int64).reshape(-1)
        y_img = np.asarray(y_img_batch, dtype=np.int64).reshape(-1)
        if ske.shape[0] != y_ske.shape[0] or img.shape[0] != y_img.shape[0]:
            raise ValueError("feature and label counts differ")
        if ske.shape[0] == 0:
            return self
        ske_slots = self._slots(y_ske)
        # image categories without a sketch in the batch are never looked up
        img_slots = np.array([self._slot_of.get(int(c), -1) for c in y_img], dtype=np.int64)
        self.counter = int(
            kernels.bank_update_batch(
                self._vecs, self._counters, self._sizes, self.counter, ske, ske_slots, img, img_slots
            )
        )
        return self

    def entries(self, category: int) -> tuple[np.ndarray, np.ndarray]:
        """Stored vectors (best first) and their insertion counters."""
        slot = self._slot_of.get(int(category))
        if slot is None:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        n = self._sizes[slot]
        return self._vecs[slot, :n].copy(), self._counters[slot, :n].copy()

    def size(self, category: int) -> int:
        slot = self._slot_of.get(int(category))
        return 0 if slot is None else int(self._sizes[slot])

    def categories(self) -> list[int]:
        return sorted(c for c in self._slot_of if self.size(c) > 0)

    def prototype(self, category: int) -> np.ndarray | None:
        """Mean of the stored vectors, or ``None`` for an empty category."""
        vecs, _ = self.entries(category)
        if vecs.shape[0] == 0:
            return None
        return vecs.mean(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "slot", "counter"] + [f"x{i}" for i in range(self.dim)])
        for c in self.categories():
            vecs, cnts = self.entries(c)
            for i, (v, n) in enumerate(zip(vecs, cnts)):
                w.writerow([c, i, int(n)] + [repr(float(x)) for x in v])
        return buf.getvalue()
