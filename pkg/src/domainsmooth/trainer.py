"""Batch sampling, Adam, learning-rate schedule and the training loop."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import FeatureSet
from .membank import MemoryBank
from .model import (
    Batch,
    ModelParams,
    TeacherModel,
    augment,
    backward,
    encode,
    init_params,
    init_teacher,
    teacher_predict,
)
from .numkit import NumericError, make_rng

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 96
    epochs: int = 10
    lr_initial: float = 1e-4
    lr_final: float = 1e-7
    tau: float = losses.DEFAULT_TAU
    k: int = 10
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0
    augment_strength: float = 0.1
    use_cmcm: bool = True
    use_ml: bool = True
    seed: int = 0
    hidden: int = 64
    d_emb: int = 64
    proj_hidden: int = 64
    n_teacher: int = 32
    teacher_scale: float = 1.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.tau <= 0 or self.k < 1:
            raise ValueError("tau must be > 0 and k >= 1")
        losses.LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            self.lambda1 if self.use_cmcm else 0.0,
            self.lambda2 if self.use_ml else 0.0,
            self.lambda3,
        )


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Geometric interpolation from ``lr_initial`` (step 0) to ``lr_final`` (step ``total_steps``)."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}/{total_steps}")
    if step == 0:
        return cfg.lr_initial
    if step == total_steps:
        return cfg.lr_final
    return cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** (step / total_steps)


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = getattr(grads, name)
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * (g * g)
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t, b1, b2, state.eps)


@dataclass(frozen=True)
class SampledBatch:
    img_idx: np.ndarray
    ske_idx: np.ndarray
    categories: np.ndarray


def sample_batch(seen_img: FeatureSet, seen_ske: FeatureSet, rng: np.random.Generator, batch_size: int) -> SampledBatch:
    """Draw batch_size/2 (image, sketch) pairs, each pair sharing a category.

    Categories are drawn uniformly from those present in both modalities,
    then one image and one sketch of that category uniformly.
    """
    if len(seen_img) == 0 or len(seen_ske) == 0:
        raise ValueError("both feature sets must be nonempty")
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be even and >= 2")
    cats_img, cats_ske = seen_img.categories(), seen_ske.categories()
    if cats_img != cats_ske:
        orphan = sorted(cats_img ^ cats_ske)
        raise ValueError(f"categories present in only one modality: {orphan}")
    cats = np.array(sorted(cats_img))
    if cats.size < 2:
        raise ValueError("need at least two categories")
    by_img = {c: np.flatnonzero(seen_img.labels == c) for c in cats}
    by_ske = {c: np.flatnonzero(seen_ske.labels == c) for c in cats}
    half = batch_size // 2
    chosen = cats[rng.integers(0, cats.size, size=half)]
    img_pick = rng.random(half)
    ske_pick = rng.random(half)
    img_idx = np.array([by_img[c][int(u * by_img[c].size)] for c, u in zip(chosen, img_pick)])
    ske_idx = np.array([by_ske[c][int(u * by_ske[c].size)] for c, u in zip(chosen, ske_pick)])
    return SampledBatch(img_idx, ske_idx, chosen)


LOG_COLUMNS = ("step", "lr", "cmcm", "ml", "cls", "ask", "total")


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def append(self, step: int, lr: float, parts: losses.LossParts, total: float) -> None:
        self.rows.append((step, lr, parts.cmcm, parts.ml, parts.cls, parts.ask, total))

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.metadata):
            buf.write(f"# {key}={self.metadata[key]}\n")
        buf.write(",".join(LOG_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(f"{r[0]}," + ",".join(repr(float(x)) for x in r[1:]) + "\n")
        return buf.getvalue()


class TrainingAborted(NumericError):
    """Training hit a non-finite loss; carries the last finite parameters."""

    def __init__(self, msg: str, params: ModelParams, log: "TrainLog"):
        super().__init__(msg)
        self.params = params
        self.log = log


@dataclass
class TrainResult:
    params: ModelParams
    bank: MemoryBank
    log: TrainLog
    teacher: TeacherModel
    classes: np.ndarray


def steps_per_epoch(n_img: int, n_ske: int, batch_size: int) -> int:
    return max(1, (n_img + n_ske) // batch_size)


def config_metadata(cfg: TrainConfig) -> dict[str, str]:
    meta = {f"train.{k}": repr(v) for k, v in asdict(cfg).items()}
    meta.update(
        {
            "adam.beta1": repr(ADAM_BETA1),
            "adam.beta2": repr(ADAM_BETA2),
            "adam.eps": repr(ADAM_EPS),
            "loss.reduction": "cmcm=sum,cls=sum,ask=sum,ml=mean",
            "lr.schedule": "geometric per step",
        }
    )
    return meta


def _clip(grads: ModelParams, max_norm: float) -> ModelParams:
    norm = math.sqrt(sum(float((a * a).sum()) for a in grads.arrays()))
    if norm <= max_norm:
        return grads
    return grads.map(lambda a: a * (max_norm / norm))


def train(cfg: TrainConfig, images: FeatureSet, sketches: FeatureSet, teacher: TeacherModel | None = None) -> TrainResult:
    """Train on seen-category data. Deterministic for a fixed ``cfg.seed``.

    Per step: sample, augment each sample twice, update the memory bank with
    the current (unaugmented) embeddings, then take one Adam step on the
    weighted objective.
    """
    classes = np.array(sorted(images.categories() | sketches.categories()))
    class_index = {int(c): i for i, c in enumerate(classes)}
    rng = make_rng(cfg.seed)
    param_rng, teacher_rng, data_rng = rng.spawn(3)
    params = init_params(
        param_rng, images.dim, len(classes), cfg.n_teacher, cfg.hidden, cfg.d_emb, cfg.proj_hidden
    )
    if teacher is None:
        teacher = init_teacher(teacher_rng, images.dim, cfg.n_teacher, cfg.teacher_scale)
    elif teacher.n_classes != cfg.n_teacher:
        raise ValueError(f"teacher has {teacher.n_classes} classes, config says {cfg.n_teacher}")
    bank = MemoryBank(cfg.d_emb, cfg.k)
    tlog = TrainLog(metadata=config_metadata(cfg))
    state = AdamState.zeros(params)
    weights = cfg.weights
    per_epoch = steps_per_epoch(len(images), len(sketches), cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    tlog.metadata["train.total_steps"] = str(total_steps)

    for step in range(total_steps):
        sb = sample_batch(images, sketches, data_rng, cfg.batch_size)
        x_img = images.features[sb.img_idx]
        x_ske = sketches.features[sb.ske_idx]
        y = sb.categories
        views = np.concatenate(
            [
                augment(x_img, data_rng, cfg.augment_strength),
                augment(x_img, data_rng, cfg.augment_strength),
                augment(x_ske, data_rng, cfg.augment_strength),
                augment(x_ske, data_rng, cfg.augment_strength),
            ]
        )
        targets = np.array([class_index[int(c)] for c in np.concatenate([y, y])])
        batch = Batch(
            x_img=x_img,
            x_ske=x_ske,
            y_img=y,
            y_ske=y,
            views=views,
            view_labels=np.tile(y, 4),
            cls_targets=targets,
            teacher_probs=teacher_predict(teacher, np.concatenate([x_img, x_ske])),
            tau=cfg.tau,
        )
        if weights.lambda2 > 0:
            f_img = encode(params, x_img)
            f_ske = encode(params, x_ske)
            bank.update_batch(f_ske, y, f_img, y)
            batch = batch.with_prototypes(*losses.prototypes_for(y, bank))

        total, grads, parts = backward(params, batch, weights)
        if not math.isfinite(total):
            raise TrainingAborted(f"non-finite loss at step {step}", params, tlog)
        if cfg.grad_clip > 0:
            grads = _clip(grads, cfg.grad_clip)
        lr = lr_at(cfg, step, max(total_steps - 1, 1))
        params, state = adam_step(params, grads, state, lr)
        tlog.append(step, lr, parts, total)
        if step % max(per_epoch, 1) == 0:
            log.debug("step %d lr %.3g loss %.6g", step, lr, total)

    return TrainResult(params, bank, tlog, teacher, classes)
