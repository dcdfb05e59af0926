"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import numpy as np


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method: n-1 rounds of disjoint pairs, a bye slot when n is odd
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_sweeps(cols: np.ndarray, vcols: np.ndarray, tol: float, max_sweeps: int) -> int:
    """One-sided Jacobi with parallel (round-robin) pair ordering.

    Each round rotates n/2 disjoint row pairs at once, so a sweep is n-1
    vectorized updates instead of n(n-1)/2 scalar ones.
    """
    n = cols.shape[0]
    rounds = _round_robin(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            xp, xq = cols[p], cols[q]
            alpha = np.einsum("ij,ij->i", xp, xp)
            beta = np.einsum("ij,ij->i", xq, xq)
            gamma = np.einsum("ij,ij->i", xp, xq)
            active = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            cols[p], cols[q] = c * xp - s * xq, s * xp + c * xq
            vp, vq = vcols[p], vcols[q]
            vcols[p], vcols[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1


def hamming_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    if queries.shape[1] != gallery.shape[1]:
        raise ValueError("code width mismatch")
    out = np.empty((queries.shape[0], gallery.shape[0]), dtype=np.int64)
    for i, q in enumerate(queries):
        out[i] = np.bitwise_count(gallery ^ q).sum(axis=1, dtype=np.int64)
    return out


def bank_update_batch(vecs, counters, sizes, next_counter, sketches, sketch_slots, images, image_slots):
    k = vecs.shape[1]
    for i in range(sketches.shape[0]):
        slot = sketch_slots[i]
        match = image_slots == slot
        n_match = int(match.sum())
        if n_match == 0:
            continue
        mean = np.zeros(vecs.shape[2])
        for j in np.flatnonzero(match):
            mean += images[j]
        mean /= n_match
        mnorm = np.sqrt(mean @ mean)
        if mnorm == 0.0:
            raise ValueError("zero-norm mean image feature")

        n = sizes[slot]
        cand = np.concatenate([vecs[slot, :n], sketches[i][None, :]])
        cnt = np.concatenate([counters[slot, :n], [next_counter]])
        next_counter += 1
        norms = np.sqrt(np.einsum("ij,ij->i", cand, cand))
        if (norms == 0.0).any():
            raise ValueError("zero-norm sketch feature")
        sim = (cand @ mean) / (mnorm * norms)
        order = sorted(range(len(cand)), key=lambda a: (-sim[a], cnt[a]))[:k]
        vecs[slot, : len(order)] = cand[order]
        counters[slot, : len(order)] = cnt[order]
        sizes[slot] = len(order)
    return next_counter
