# cython: language_level=3
"""Compiled hot loops. Semantics mirror ``_pykernels`` exactly.

Every function here is re-exported through ``domainsmooth.kernels``; do not
import this module directly.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()


cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long)


def jacobi_sweeps(double[:, ::1] cols, double[:, ::1] vcols, double tol, int max_sweeps):
    """One-sided cyclic Jacobi on the rows of ``cols`` (columns of the input).

    ``cols`` and ``vcols`` are rotated in place. Returns the number of sweeps
    used, or -1 when ``max_sweeps`` is exhausted without convergence.
    """
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t m = cols.shape[1]
    cdef Py_ssize_t nv = vcols.shape[1]
    cdef Py_ssize_t p, q, r
    cdef double alpha, beta, gamma, zeta, t, c, s, xp, xq
    cdef int sweep, rotated

    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    xp = cols[p, r]
                    xq = cols[q, r]
                    alpha += xp * xp
                    beta += xq * xq
                    gamma += xp * xq
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    xp = cols[p, r]
                    xq = cols[q, r]
                    cols[p, r] = c * xp - s * xq
                    cols[q, r] = s * xp + c * xq
                for r in range(nv):
                    xp = vcols[p, r]
                    xq = vcols[q, r]
                    vcols[p, r] = c * xp - s * xq
                    vcols[q, r] = s * xp + c * xq
        if not rotated:
            return sweep + 1
    return -1


def hamming_distances(const uint64_t[:, ::1] queries, const uint64_t[:, ::1] gallery):
    """Pairwise popcount distances between packed code rows."""
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t ng = gallery.shape[0]
    cdef Py_ssize_t w = queries.shape[1]
    cdef Py_ssize_t i, j, b
    cdef int acc
    out = np.empty((nq, ng), dtype=np.int64)
    cdef int64_t[:, ::1] d = out
    if gallery.shape[1] != w:
        raise ValueError("code width mismatch")
    for i in range(nq):
        for j in range(ng):
            acc = 0
            for b in range(w):
                acc += popcount64(queries[i, b] ^ gallery[j, b])
            d[i, j] = acc
    return out


def bank_update_batch(
    double[:, :, ::1] vecs,
    int64_t[:, ::1] counters,
    int64_t[::1] sizes,
    int64_t next_counter,
    const double[:, ::1] sketches,
    const int64_t[::1] sketch_slots,
    const double[:, ::1] images,
    const int64_t[::1] image_slots,
):
    """Sequential top-k bank update; returns the advanced insertion counter.

    Slots index the first axis of ``vecs``. Raises on zero-norm vectors.
    """
    cdef Py_ssize_t k = vecs.shape[1]
    cdef Py_ssize_t dim = vecs.shape[2]
    cdef Py_ssize_t n_ske = sketches.shape[0]
    cdef Py_ssize_t n_img = images.shape[0]
    cdef Py_ssize_t i, j, r, a, b, n_cand, n_match
    cdef int64_t slot, tmp_i
    cdef double dot, nrm, mnorm, tmp_d

    mean_arr = np.empty(dim, dtype=np.float64)
    cand_arr = np.empty((k + 1, dim), dtype=np.float64)
    sim_arr = np.empty(k + 1, dtype=np.float64)
    cnt_arr = np.empty(k + 1, dtype=np.int64)
    order_arr = np.empty(k + 1, dtype=np.int64)
    cdef double[::1] mean = mean_arr
    cdef double[:, ::1] cand = cand_arr
    cdef double[::1] sim = sim_arr
    cdef int64_t[::1] cnt = cnt_arr
    cdef int64_t[::1] order = order_arr

    for i in range(n_ske):
        slot = sketch_slots[i]
        for r in range(dim):
            mean[r] = 0.0
        n_match = 0
        for j in range(n_img):
            if image_slots[j] == slot:
                n_match += 1
                for r in range(dim):
                    mean[r] += images[j, r]
        if n_match == 0:
            continue
        mnorm = 0.0
        for r in range(dim):
            mean[r] = mean[r] / n_match
            mnorm += mean[r] * mean[r]
        mnorm = sqrt(mnorm)
        if mnorm == 0.0:
            raise ValueError("zero-norm mean image feature")

        n_cand = sizes[slot]
        for a in range(n_cand):
            for r in range(dim):
                cand[a, r] = vecs[slot, a, r]
            cnt[a] = counters[slot, a]
        for r in range(dim):
            cand[n_cand, r] = sketches[i, r]
        cnt[n_cand] = next_counter
        next_counter += 1
        n_cand += 1

        for a in range(n_cand):
            dot = 0.0
            nrm = 0.0
            for r in range(dim):
                dot += mean[r] * cand[a, r]
                nrm += cand[a, r] * cand[a, r]
            if nrm == 0.0:
                raise ValueError("zero-norm sketch feature")
            sim[a] = dot / (mnorm * sqrt(nrm))
            order[a] = a

        # insertion sort: descending similarity, then ascending counter
        for a in range(1, n_cand):
            tmp_i = order[a]
            b = a - 1
            while b >= 0 and (
                sim[order[b]] < sim[tmp_i]
                or (sim[order[b]] == sim[tmp_i] and cnt[order[b]] > cnt[tmp_i])
            ):
                order[b + 1] = order[b]
                b -= 1
            order[b + 1] = tmp_i

        if n_cand > k:
            n_cand = k
        for a in range(n_cand):
            for r in range(dim):
                vecs[slot, a, r] = cand[order[a], r]
            counters[slot, a] = cnt[order[a]]
        sizes[slot] = n_cand
    return next_counter
