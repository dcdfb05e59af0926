"""Sketch-to-image retrieval evaluation: ranking, AP / Prec@k, ITQ hashing."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import FeatureSet
from .model import ModelParams, encode
from .numkit import NumericError, random_orthogonal, svd_small

AP_VARIANT = "mean precision at each relevant hit over all relevant gallery items"
PREC_DIVISOR = "k (even when the gallery is shorter)"
ITQ_ITERS = 50


class ProtocolError(ValueError):
    """The evaluation protocol was violated (e.g. a query category missing from the gallery)."""


def pack_codes(bits: np.ndarray) -> np.ndarray:
    """Pack an (N, b) boolean array into (N, ceil(b/64)) little-endian uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    n, b = bits.shape
    width = max(1, -(-b // 64))
    padded = np.zeros((n, width * 64), dtype=bool)
    padded[:, :b] = bits
    return np.ascontiguousarray(np.packbits(padded, axis=1, bitorder="little").view("<u8"))


def cosine_scores(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query, axis=-1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1)
    if (qn == 0).any() or (gn == 0).any():
        raise NumericError("cosine ranking with a zero-norm vector")
    return (query / qn) @ (gallery / gn[:, None]).T


def rank_gallery(query, gallery, metric: str = "cosine") -> np.ndarray:
    """Gallery indices best-first; ties keep ascending gallery index.

    For ``metric="hamming"`` both inputs are boolean bit codes.
    """
    query = np.asarray(query)
    gallery = np.asarray(gallery)
    if gallery.ndim != 2 or query.shape != (gallery.shape[1],):
        raise ValueError(f"query shape {query.shape} does not match gallery shape {gallery.shape}")
    if metric == "cosine":
        s = cosine_scores(query.astype(np.float64), gallery.astype(np.float64))
        return np.argsort(-s, kind="stable")
    if metric == "hamming":
        d = kernels.hamming_distances(pack_codes(query[None, :]), pack_codes(gallery))[0]
        return np.argsort(d, kind="stable")
    raise ValueError(f"unknown metric {metric!r}")


def average_precision(relevance, total_relevant: int) -> float:
    rel = np.asarray(relevance, dtype=bool)
    if total_relevant < 1:
        raise ProtocolError("average precision needs at least one relevant item")
    hits_at = np.cumsum(rel)[rel]
    if hits_at.size > total_relevant:
        raise ValueError("more relevant marks than total_relevant")
    ranks = np.flatnonzero(rel) + 1
    return math.fsum((hits_at / ranks).tolist()) / total_relevant


def precision_at_k(relevance, k: int = 100) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = np.asarray(relevance, dtype=bool)
    return int(rel[:k].sum()) / k


def mean_ap(aps) -> float:
    aps = list(aps)
    return math.fsum(aps) / len(aps) if aps else 0.0


@dataclass
class ITQModel:
    mean: np.ndarray
    pca: np.ndarray  # D x b, orthonormal columns
    rotation: np.ndarray  # b x b
    bits: int
    loss_trace: list[float] = field(default_factory=list)
    orth_trace: list[float] = field(default_factory=list)


def _orth_err(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - np.eye(r.shape[0])).max())


def itq_fit(features, bits: int, rng: np.random.Generator, iters: int = ITQ_ITERS, init_rotation=None) -> ITQModel:
    """Centre, project onto the top ``bits`` principal axes and learn a rotation
    by alternating sign quantization and orthogonal Procrustes.

    ``loss_trace[0]`` is the quantization loss of the initial rotation and
    ``loss_trace[t]`` the loss after iteration ``t``; the sequence does not
    increase.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if not n > bits:
        raise ValueError(f"need more samples ({n}) than bits ({bits})")
    if bits > d:
        raise NumericError(f"cannot take {bits} principal components of {d}-dimensional data")
    mean = x.mean(axis=0)
    xc = x - mean
    u, s, _ = svd_small((xc.T @ xc) / (n - 1))
    rank = int((s > 1e-10 * max(s[0], 1e-300)).sum())
    if rank < bits:
        raise NumericError(f"covariance has rank {rank} < {bits} bits")
    pca = u[:, :bits].copy()
    v = xc @ pca

    r = np.array(init_rotation, dtype=np.float64) if init_rotation is not None else None
    if r is None:
        r = random_orthogonal(bits, rng)
    vr = v @ r
    b = np.where(vr >= 0, 1.0, -1.0)
    model = ITQModel(mean, pca, r, bits, [float(((b - vr) ** 2).sum())], [_orth_err(r)])
    prev_b = None
    for _ in range(iters):
        b = np.where(v @ r >= 0, 1.0, -1.0)
        if prev_b is None or not np.array_equal(b, prev_b):
            # same codes -> the current rotation is already the Procrustes optimum
            uu, _, ww = svd_small(v.T @ b)
            r = uu @ ww.T
        prev_b = b
        model.loss_trace.append(float(((b - v @ r) ** 2).sum()))
        model.orth_trace.append(_orth_err(r))
    model.rotation = r
    return model


def itq_encode(model: ITQModel, features) -> np.ndarray:
    """Boolean codes: bit set where the rotated projection is >= 0."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != model.mean.shape[0]:
        raise ValueError(f"ITQ model expects {model.mean.shape[0]} columns, got {x.shape[1]}")
    return ((x - model.mean) @ model.pca @ model.rotation) >= 0


@dataclass
class RetrievalReport:
    query_labels: np.ndarray
    aps: np.ndarray
    precs: np.ndarray
    map_all: float
    prec_at_100: float
    metric: str
    dim: int
    metadata: dict[str, str] = field(default_factory=dict)

    def summary(self) -> str:
        return f"mAP@all={self.map_all!r} Prec@100={self.prec_at_100!r} metric={self.metric} dim={self.dim}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        meta = dict(self.metadata)
        meta.setdefault("eval.ap_variant", AP_VARIANT)
        meta.setdefault("eval.prec_divisor", PREC_DIVISOR)
        for k in sorted(meta):
            buf.write(f"# {k}={meta[k]}\n")
        buf.write("query,label,ap,prec_at_100\n")
        for i, (y, ap, p) in enumerate(zip(self.query_labels, self.aps, self.precs)):
            buf.write(f"{i},{int(y)},{float(ap)!r},{float(p)!r}\n")
        buf.write(f"# summary {self.summary()}\n")
        return buf.getvalue()


def score_rankings(orders: np.ndarray, query_labels, gallery_labels, k: int = 100):
    """Per-query AP and Prec@k from precomputed rankings (one row per query)."""
    gallery_labels = np.asarray(gallery_labels)
    counts = {int(c): int(n) for c, n in zip(*np.unique(gallery_labels, return_counts=True))}
    missing = sorted({int(y) for y in query_labels} - set(counts))
    if missing:
        raise ProtocolError(f"query categories absent from gallery: {missing}")
    aps, precs = [], []
    for order, y in zip(orders, query_labels):
        rel = gallery_labels[order] == y
        aps.append(average_precision(rel, counts[int(y)]))
        precs.append(precision_at_k(rel, k))
    return np.array(aps), np.array(precs)


def rank_all(queries: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    if queries.shape[1] != gallery.shape[1]:
        raise ValueError("query and gallery dimensions differ")
    if metric == "cosine":
        return np.argsort(-cosine_scores(queries, gallery), axis=1, kind="stable")
    if metric == "hamming":
        d = kernels.hamming_distances(pack_codes(queries), pack_codes(gallery))
        return np.argsort(d, axis=1, kind="stable")
    raise ValueError(f"unknown metric {metric!r}")


def evaluate(
    params: ModelParams,
    queries: FeatureSet,
    gallery: FeatureSet,
    metric: str = "cosine",
    itq: ITQModel | None = None,
) -> RetrievalReport:
    """Embed sketches and images, rank the full gallery for every query and score it."""
    missing = sorted(queries.categories() - gallery.categories())
    if missing:
        raise ProtocolError(f"query categories absent from gallery: {missing}")
    fq = encode(params, queries.features)
    fg = encode(params, gallery.features)
    if metric == "hamming":
        if itq is None:
            raise ValueError("hamming evaluation needs a fitted ITQ model")
        fq, fg = itq_encode(itq, fq), itq_encode(itq, fg)
        dim = itq.bits
    elif metric == "cosine":
        dim = fq.shape[1]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    orders = rank_all(fq, fg, metric)
    aps, precs = score_rankings(orders, queries.labels, gallery.labels)
    return RetrievalReport(
        query_labels=queries.labels.copy(),
        aps=aps,
        precs=precs,
        map_all=mean_ap(aps.tolist()),
        prec_at_100=mean_ap(precs.tolist()),
        metric=metric,
        dim=dim,
        metadata={"eval.metric": metric, "eval.dim": str(dim), "kernels.backend": kernels.BACKEND},
    )


def similarity_matrix(params: ModelParams, sketches: FeatureSet, images: FeatureSet, categories=None):
    """Cosine between per-category mean sketch and mean image embeddings.

    Returns ``(categories, matrix)`` with rows indexed by sketch category.
    """
    cats = sorted(categories if categories is not None else sketches.categories() | images.categories())
    fs = encode(params, sketches.features)
    fi = encode(params, images.features)
    ms, mi = [], []
    for c in cats:
        sm, im = sketches.labels == c, images.labels == c
        if not sm.any() or not im.any():
            raise ValueError(f"category {c} has no sketches or no images")
        ms.append(fs[sm].mean(axis=0))
        mi.append(fi[im].mean(axis=0))
    return cats, np.clip(cosine_scores(np.array(ms), np.array(mi)), -1.0, 1.0)


def similarity_csv(cats, mat: np.ndarray) -> str:
    lines = ["sketch\\image," + ",".join(str(c) for c in cats)]
    for c, row in zip(cats, mat):
        lines.append(f"{c}," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"
