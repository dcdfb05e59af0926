"""Two-modality feature sets: synthesis, zero-shot splits and file I/O."""
from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .numkit import make_rng

FEATURE_MAGIC = b"DSNF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIBII")


class Modality(IntEnum):
    IMAGE = 0
    SKETCH = 1

    @classmethod
    def parse(cls, value: "str | int | Modality") -> "Modality":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown modality {value!r}; expected 'image' or 'sketch'") from None
        return cls(value)


class FeatureFileError(Exception):
    """Malformed feature file. ``code`` is one of the class-level constants."""

    BAD_MAGIC = "bad magic"
    BAD_VERSION = "version mismatch"
    TRUNCATED = "truncated payload"
    COUNT_MISMATCH = "label/row count mismatch"
    BAD_MODALITY = "bad modality"
    BAD_CSV = "malformed csv"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Feature rows with category labels for one modality.

    Values are rounded to float32 precision on construction (the on-disk
    precision), so save/load round-trips exactly; arithmetic stays float64.
    """

    features: np.ndarray
    labels: np.ndarray
    modality: Modality

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32).astype(np.float64)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if feats.ndim != 2:
            feats = feats.reshape(len(labels), -1)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if (labels < 0).any():
            raise ValueError("labels must be nonnegative")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "modality", Modality.parse(self.modality))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def categories(self) -> set[int]:
        return {int(c) for c in np.unique(self.labels)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ZeroShotSplit:
    seen: frozenset[int]
    unseen: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "seen", frozenset(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", frozenset(int(c) for c in self.unseen))
        if self.seen & self.unseen:
            raise ValueError(f"seen and unseen overlap: {sorted(self.seen & self.unseen)}")

    @property
    def universe(self) -> frozenset[int]:
        return self.seen | self.unseen


@dataclass(frozen=True)
class SynthConfig:
    n_categories: int = 25
    dim: int = 64
    samples_per_category: int = 60
    domain_gap: float = 2.0
    image_noise: float = 1.0
    sketch_noise: float = 2.0
    latent_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.n_categories, self.dim, self.samples_per_category) < 1:
            raise ValueError("category, dimension and sample counts must be >= 1")
        if self.image_noise <= 0 or self.sketch_noise <= 0:
            raise ValueError("noise scales must be > 0")
        if self.domain_gap < 0:
            raise ValueError("domain_gap must be >= 0")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.dim:
            raise ValueError("latent_dim must be in [1, dim]")


def generate_synthetic(cfg: SynthConfig) -> tuple[FeatureSet, FeatureSet]:
    """Draw an (image, sketch) pair of feature sets.

    Category means are standard normal inside a random ``latent_dim``-dimensional
    subspace shared by all categories (the full space when ``None``). Sketches
    are shifted by one global offset of norm ``cfg.domain_gap`` and carry
    ``cfg.sketch_noise`` isotropic noise; images carry ``cfg.image_noise``.
    """
    rng = make_rng(cfg.seed)
    r = cfg.latent_dim or cfg.dim
    if r == cfg.dim:
        means = rng.standard_normal((cfg.n_categories, cfg.dim))
    else:
        basis = np.linalg.qr(rng.standard_normal((cfg.dim, r)))[0].T
        means = rng.standard_normal((cfg.n_categories, r)) @ basis
    gap = rng.standard_normal(cfg.dim)
    gap *= cfg.domain_gap / np.linalg.norm(gap)
    labels = np.repeat(np.arange(cfg.n_categories), cfg.samples_per_category)
    img = means[labels] + cfg.image_noise * rng.standard_normal((labels.size, cfg.dim))
    ske = means[labels] + gap + cfg.sketch_noise * rng.standard_normal((labels.size, cfg.dim))
    return FeatureSet(img, labels, Modality.IMAGE), FeatureSet(ske, labels, Modality.SKETCH)


def make_zero_shot_split(category_ids, n_unseen: int, rng: np.random.Generator) -> ZeroShotSplit:
    ids = sorted({int(c) for c in category_ids})
    if not 1 <= n_unseen < len(ids):
        raise ValueError(f"n_unseen must be in [1, {len(ids) - 1}], got {n_unseen}")
    picked = rng.choice(len(ids), size=n_unseen, replace=False)
    unseen = {ids[i] for i in picked}
    return ZeroShotSplit(seen=frozenset(ids) - unseen, unseen=frozenset(unseen))


def restrict(fs: FeatureSet, categories) -> FeatureSet:
    keep = np.isin(fs.labels, np.fromiter((int(c) for c in categories), dtype=np.int64))
    return FeatureSet(fs.features[keep].reshape(-1, fs.dim), fs.labels[keep], fs.modality)


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(fs: FeatureSet) -> bytes:
    n, d = fs.features.shape
    return b"".join(
        [
            _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, int(fs.modality), n, d),
            fs.features.astype("<f4").tobytes(),
            fs.labels.astype("<u4").tobytes(),
        ]
    )


def decode_features(blob: bytes) -> FeatureSet:
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FeatureFileError(FeatureFileError.BAD_MAGIC, repr(blob[:4]))
    if len(blob) < _HEADER.size:
        raise FeatureFileError(FeatureFileError.TRUNCATED, "header")
    _, version, modality, n, d = _HEADER.unpack_from(blob)
    if version != FEATURE_VERSION:
        raise FeatureFileError(FeatureFileError.BAD_VERSION, f"file v{version}, reader v{FEATURE_VERSION}")
    if modality not in (0, 1):
        raise FeatureFileError(FeatureFileError.BAD_MODALITY, str(modality))
    body = memoryview(blob)[_HEADER.size :]
    need = 4 * n * d + 4 * n
    if len(body) < need:
        raise FeatureFileError(FeatureFileError.TRUNCATED, f"{len(body)} of {need} payload bytes")
    if len(body) > need:
        raise FeatureFileError(FeatureFileError.COUNT_MISMATCH, f"{len(body) - need} trailing bytes")
    feats = np.frombuffer(body[: 4 * n * d], dtype="<f4").reshape(n, d)
    labels = np.frombuffer(body[4 * n * d :], dtype="<u4")
    return FeatureSet(feats.astype(np.float64), labels.astype(np.int64), Modality(modality))


def save_features(fs: FeatureSet, path) -> None:
    atomic_write(path, encode_features(fs))


def load_features(path) -> FeatureSet:
    with open(path, "rb") as fh:
        return decode_features(fh.read())


def load_csv(path, modality) -> FeatureSet:
    """Read ``label,x1,...,xD`` rows (no header)."""
    labels, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise FeatureFileError(FeatureFileError.BAD_CSV, f"line {lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise FeatureFileError(FeatureFileError.BAD_CSV, f"line {lineno}: ragged row")
    if not rows:
        raise FeatureFileError(FeatureFileError.BAD_CSV, "no rows")
    return FeatureSet(np.array(rows), np.array(labels), Modality.parse(modality))


def format_split(split: ZeroShotSplit) -> str:
    return "seen=" + ",".join(map(str, sorted(split.seen))) + "\nunseen=" + ",".join(map(str, sorted(split.unseen))) + "\n"


def parse_split(text: str) -> ZeroShotSplit:
    parts: dict[str, set[int]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key.strip() not in ("seen", "unseen"):
            raise ValueError(f"unexpected key {key!r} in split file")
        parts[key.strip()] = {int(v) for v in value.split(",") if v.strip()}
    if set(parts) != {"seen", "unseen"}:
        raise ValueError("split file needs both 'seen=' and 'unseen=' lines")
    return ZeroShotSplit(frozenset(parts["seen"]), frozenset(parts["unseen"]))


def save_split(split: ZeroShotSplit, path) -> None:
    atomic_write(path, format_split(split))


def load_split(path) -> ZeroShotSplit:
    with open(path, encoding="utf-8") as fh:
        return parse_split(fh.read())
