"""Feature-level networks: encoder, normalized projection head, two linear
classifier heads and a frozen softmax teacher, with hand-written backprop."""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import losses
from .data import atomic_write
from .numkit import NumericError, l2_normalize_rows, softmax

PROJ_DIM = 128
MASK_PROB = 0.1
CHECKPOINT_MAGIC = b"DSNC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """All trainable arrays. Also used as the gradient container."""

    enc_w1: np.ndarray  # D_in x H
    enc_b1: np.ndarray
    enc_w2: np.ndarray  # H x D_emb
    enc_b2: np.ndarray
    proj_w1: np.ndarray  # D_emb x H_p
    proj_b1: np.ndarray
    proj_w2: np.ndarray  # H_p x 128
    proj_b2: np.ndarray
    cls_w: np.ndarray  # C_seen x D_emb
    cls_b: np.ndarray
    tcls_w: np.ndarray  # C_T x D_emb
    tcls_b: np.ndarray

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def map(self, fn) -> "ModelParams":
        return ModelParams(*(fn(a) for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    @property
    def dims(self) -> dict[str, int]:
        return {
            "d_in": self.enc_w1.shape[0],
            "hidden": self.enc_w1.shape[1],
            "d_emb": self.enc_w2.shape[1],
            "proj_hidden": self.proj_w1.shape[1],
            "proj_dim": self.proj_w2.shape[1],
            "n_seen": self.cls_w.shape[0],
            "n_teacher": self.tcls_w.shape[0],
        }

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) and a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))


def _he(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def init_params(
    rng: np.random.Generator,
    d_in: int,
    n_seen: int,
    n_teacher: int,
    hidden: int = 64,
    d_emb: int = 64,
    proj_hidden: int = 64,
    proj_dim: int = PROJ_DIM,
) -> ModelParams:
    return ModelParams(
        enc_w1=_he(rng, d_in, hidden),
        enc_b1=np.zeros(hidden),
        enc_w2=_he(rng, hidden, d_emb),
        enc_b2=np.zeros(d_emb),
        proj_w1=_he(rng, d_emb, proj_hidden),
        proj_b1=np.zeros(proj_hidden),
        proj_w2=_he(rng, proj_hidden, proj_dim),
        proj_b2=np.zeros(proj_dim),
        cls_w=_he(rng, d_emb, n_seen).T.copy(),
        cls_b=np.zeros(n_seen),
        tcls_w=_he(rng, d_emb, n_teacher).T.copy(),
        tcls_b=np.zeros(n_teacher),
    )


@dataclass(frozen=True)
class TeacherModel:
    weight: np.ndarray  # D_in x C_T
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]


def init_teacher(rng: np.random.Generator, d_in: int, n_classes: int, scale: float = 1.0) -> TeacherModel:
    return TeacherModel(rng.standard_normal((d_in, n_classes)) * scale / np.sqrt(d_in), np.zeros(n_classes))


def teacher_predict(teacher: TeacherModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != teacher.weight.shape[0]:
        raise ValueError(f"teacher expects {teacher.weight.shape[0]} input columns, got {x.shape[1]}")
    return softmax(x @ teacher.weight + teacher.bias)


def _check_cols(x: np.ndarray, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"{what} expects {n} columns, got shape {x.shape}")
    return x


def _encode(params: ModelParams, x: np.ndarray):
    z1 = x @ params.enc_w1 + params.enc_b1
    h = np.maximum(z1, 0.0)
    return h @ params.enc_w2 + params.enc_b2, z1, h


def encode(params: ModelParams, x) -> np.ndarray:
    x = _check_cols(x, params.enc_w1.shape[0], "encode")
    return _encode(params, x)[0]


def _project(params: ModelParams, f: np.ndarray):
    a1 = f @ params.proj_w1 + params.proj_b1
    a = np.maximum(a1, 0.0)
    u = a @ params.proj_w2 + params.proj_b2
    try:
        v, norms = l2_normalize_rows(u)
    except NumericError:
        raise NumericError("projection produced a zero vector before normalization") from None
    return v, a1, a, norms


def project(params: ModelParams, f) -> np.ndarray:
    f = _check_cols(f, params.proj_w1.shape[0], "project")
    return _project(params, f)[0]


def classify_seen(params: ModelParams, f) -> np.ndarray:
    f = _check_cols(f, params.cls_w.shape[1], "classify_seen")
    return f @ params.cls_w.T + params.cls_b


def classify_teacher_space(params: ModelParams, f) -> np.ndarray:
    f = _check_cols(f, params.tcls_w.shape[1], "classify_teacher_space")
    return f @ params.tcls_w.T + params.tcls_b


def augment(x: np.ndarray, rng: np.random.Generator, strength: float, mask_prob: float = MASK_PROB) -> np.ndarray:
    """Gaussian jitter followed by independent per-coordinate zeroing."""
    if strength < 0:
        raise ValueError("strength must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape)
    drop = rng.random(x.shape) < mask_prob
    return np.where(drop, 0.0, x + strength * noise)


@dataclass
class Batch:
    """Everything one optimization step needs, with m images and m sketches.

    ``views`` stacks the two augmented views of images then sketches
    (4m rows) and ``view_labels`` gives their category ids. ``cls_targets``
    are classifier indices for ``[x_img; x_ske]`` and ``teacher_probs`` the
    teacher distributions for the same rows. ``protos``/``proto_mask`` hold
    the memory-bank prototype for each image row.
    """

    x_img: np.ndarray
    x_ske: np.ndarray
    y_img: np.ndarray
    y_ske: np.ndarray
    views: np.ndarray
    view_labels: np.ndarray
    cls_targets: np.ndarray
    teacher_probs: np.ndarray
    protos: np.ndarray | None = None
    proto_mask: np.ndarray | None = None
    tau: float = losses.DEFAULT_TAU

    def with_prototypes(self, protos, mask) -> "Batch":
        return replace(self, protos=protos, proto_mask=mask)


def backward(params: ModelParams, batch: Batch, w: losses.LossWeights):
    """Composite loss and its gradient with respect to every parameter.

    Returns ``(total, grads, parts)``; terms whose weight is zero are skipped
    and reported as 0.
    """
    m_img = batch.x_img.shape[0]
    m_ske = batch.x_ske.shape[0]
    n_orig = m_img + m_ske
    use_views = w.lambda1 > 0
    stacked = [batch.x_img, batch.x_ske] + ([batch.views] if use_views else [])
    x = _check_cols(np.concatenate(stacked), params.enc_w1.shape[0], "backward")
    f, z1, h = _encode(params, x)
    df = np.zeros_like(f)
    g = params.zeros_like()
    parts = {}

    if use_views:
        f_v = f[n_orig:]
        v, a1, a, unorm = _project(params, f_v)
        l_cmcm, dv = losses.cmcm_loss(losses.ContrastiveBatch(v, batch.view_labels, batch.tau))
        parts["cmcm"] = l_cmcm
        dv = w.lambda1 * dv
        du = (dv - v * np.einsum("ij,ij->i", dv, v)[:, None]) / unorm[:, None]
        g.proj_w2 = a.T @ du
        g.proj_b2 = du.sum(axis=0)
        da1 = (du @ params.proj_w2.T) * (a1 > 0)
        g.proj_w1 = f_v.T @ da1
        g.proj_b1 = da1.sum(axis=0)
        df[n_orig:] += da1 @ params.proj_w1.T

    if w.lambda2 > 0 and batch.protos is not None:
        l_ml, dfi = losses.memory_loss_rows(f[:m_img], batch.protos, batch.proto_mask)
        parts["ml"] = l_ml
        df[:m_img] += w.lambda2 * dfi

    if w.lambda3 > 0:
        fo = f[:n_orig]
        l_cls, dl = losses.cls_loss(fo @ params.cls_w.T + params.cls_b, batch.cls_targets)
        l_ask, dt = losses.ask_loss(fo @ params.tcls_w.T + params.tcls_b, batch.teacher_probs)
        parts["cls"], parts["ask"] = l_cls, l_ask
        dl *= w.lambda3
        dt *= w.lambda3
        g.cls_w = dl.T @ fo
        g.cls_b = dl.sum(axis=0)
        g.tcls_w = dt.T @ fo
        g.tcls_b = dt.sum(axis=0)
        df[:n_orig] += dl @ params.cls_w + dt @ params.tcls_w

    g.enc_w2 = h.T @ df
    g.enc_b2 = df.sum(axis=0)
    dz1 = (df @ params.enc_w2.T) * (z1 > 0)
    g.enc_w1 = x.T @ dz1
    g.enc_b1 = dz1.sum(axis=0)

    lp = losses.LossParts(**parts)
    return losses.total_loss(lp, w), g, lp


def loss_only(params: ModelParams, batch: Batch, w: losses.LossWeights) -> float:
    return backward(params, batch, w)[0]


_DIM_ORDER = ("d_in", "hidden", "d_emb", "proj_hidden", "proj_dim", "n_seen", "n_teacher")


def encode_checkpoint(params: ModelParams) -> bytes:
    dims = params.dims
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(_DIM_ORDER))]
    out.append(struct.pack(f"<{len(_DIM_ORDER)}I", *(dims[k] for k in _DIM_ORDER)))
    out.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return b"".join(out)


def _shapes(d: dict[str, int]) -> list[tuple[int, ...]]:
    return [
        (d["d_in"], d["hidden"]),
        (d["hidden"],),
        (d["hidden"], d["d_emb"]),
        (d["d_emb"],),
        (d["d_emb"], d["proj_hidden"]),
        (d["proj_hidden"],),
        (d["proj_hidden"], d["proj_dim"]),
        (d["proj_dim"],),
        (d["n_seen"], d["d_emb"]),
        (d["n_seen"],),
        (d["n_teacher"], d["d_emb"]),
        (d["n_teacher"],),
    ]


class CheckpointError(Exception):
    pass


def decode_checkpoint(blob: bytes) -> ModelParams:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    version, n_dims = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION or n_dims != len(_DIM_ORDER):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dims = dict(zip(_DIM_ORDER, struct.unpack_from(f"<{n_dims}I", blob, 12)))
    off = 12 + 4 * n_dims
    arrays = []
    for shape in _shapes(dims):
        n = int(np.prod(shape))
        if off + 8 * n > len(blob):
            raise CheckpointError("truncated parameters")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    if off != len(blob):
        raise CheckpointError("trailing bytes after parameters")
    return ModelParams(*arrays)


def save_checkpoint(params: ModelParams, path) -> None:
    atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
