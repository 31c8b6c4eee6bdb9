"""Synthetic two-view word-discrimination data.

Each class ("word") has a text feature vector and an acoustic centroid on
the unit sphere; the centroid is a fixed random rotation of the text
features, so phonetically confusable words (shared text component) are also
acoustically close.  A sample is a variable-length sequence of frames, each
frame being the centroid plus isotropic Gaussian noise whose size is drawn
per class, so classes differ in intra-class variance.

Seen classes get ids ``0..num_seen-1`` and unseen classes the remaining
ids; unseen classes only contribute test samples.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

MAGIC = b"ADMSDATA"
FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test")


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    num_classes: int = 50
    samples_per_class: int = 20
    unseen_fraction: float = 0.2
    input_dim: int = 16
    text_dim: int = 16
    noise_scale_range: tuple[float, float] = (0.3, 3.0)
    seq_len_range: tuple[int, int] = (4, 12)
    confusable_fraction: float = 0.2
    confusable_weight: float = 0.6
    train_fraction: float = 0.6
    dev_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.noise_scale_range
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.unseen_fraction < 1:
            raise ValueError("unseen_fraction must lie in [0, 1)")
        if not (0 < lo <= hi):
            raise ValueError(f"noise_scale_range must satisfy 0 < lo <= hi, got {self.noise_scale_range}")
        if not (1 <= self.seq_len_range[0] <= self.seq_len_range[1]):
            raise ValueError("seq_len_range must satisfy 1 <= lo <= hi")
        if self.input_dim < 1 or self.text_dim < 1:
            raise ValueError("dims must be positive")
        if self.input_dim != self.text_dim:
            # centroids are rotated text features
            raise ValueError("input_dim and text_dim must match")
        if not (0 <= self.confusable_fraction <= 1):
            raise ValueError("confusable_fraction must lie in [0, 1]")
        if not (0 < self.train_fraction and 0 <= self.dev_fraction and self.train_fraction + self.dev_fraction < 1):
            raise ValueError("train/dev fractions must be positive and leave room for test")
        n_train = int(round(self.samples_per_class * self.train_fraction))
        if n_train < 2:
            raise ValueError("every seen class needs >= 2 train samples")
        if self.num_unseen > self.num_classes - 2:
            raise ValueError("need at least two seen classes")

    @property
    def num_unseen(self) -> int:
        return int(round(self.unseen_fraction * self.num_classes))


@dataclass
class ClassInfo:
    class_id: int
    text_features: np.ndarray
    centroid: np.ndarray
    noise_scale: float
    unseen: bool


@dataclass
class Sample:
    sample_id: int
    class_id: int
    frames: np.ndarray
    split: str


@dataclass
class SyntheticDataset:
    classes: list[ClassInfo]
    samples: list[Sample]

    @property
    def input_dim(self) -> int:
        return self.classes[0].centroid.size

    @property
    def text_dim(self) -> int:
        return self.classes[0].text_features.size

    @property
    def num_seen(self) -> int:
        return sum(not c.unseen for c in self.classes)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def text_matrix(self) -> np.ndarray:
        return np.stack([c.text_features for c in self.classes])

    def equals(self, other: "SyntheticDataset") -> bool:
        if len(self.classes) != len(other.classes) or len(self.samples) != len(other.samples):
            return False
        for a, b in zip(self.classes, other.classes):
            if (a.class_id, a.noise_scale, a.unseen) != (b.class_id, b.noise_scale, b.unseen):
                return False
            if not (np.array_equal(a.text_features, b.text_features) and np.array_equal(a.centroid, b.centroid)):
                return False
        for a, b in zip(self.samples, other.samples):
            if (a.sample_id, a.class_id, a.split) != (b.sample_id, b.class_id, b.split):
                return False
            if not np.array_equal(a.frames, b.frames):
                return False
        return True


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate(config: GenerationConfig) -> SyntheticDataset:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_classes
    dim = cfg.input_dim

    text = np.stack([_unit(rng, dim) for _ in range(n)])
    num_pairs = int(round(cfg.confusable_fraction * n / 2))
    order = rng.permutation(n)
    for p in range(num_pairs):
        a, b = order[2 * p], order[2 * p + 1]
        shared = _unit(rng, dim)
        for c in (a, b):
            v = text[c] + cfg.confusable_weight * shared
            text[c] = v / np.linalg.norm(v)

    rotation, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    centroids = text @ rotation.T

    lo, hi = cfg.noise_scale_range
    noise = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))

    classes = [ClassInfo(c, text[c], centroids[c], float(noise[c]), c >= n - cfg.num_unseen)
               for c in range(n)]

    n_train = int(round(cfg.samples_per_class * cfg.train_fraction))
    n_dev = int(round(cfg.samples_per_class * cfg.dev_fraction))
    samples = []
    for info in classes:
        for m in range(cfg.samples_per_class):
            length = int(rng.integers(cfg.seq_len_range[0], cfg.seq_len_range[1] + 1))
            # per-coordinate std scaled so the expected noise norm is ~noise_scale
            frames = info.centroid + info.noise_scale / np.sqrt(dim) * rng.standard_normal((length, dim))
            if info.unseen:
                split = "test"
            else:
                split = "train" if m < n_train else "dev" if m < n_train + n_dev else "test"
            samples.append(Sample(len(samples), info.class_id, frames, split))
    return SyntheticDataset(classes, samples)


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<8sIIIII")   # magic, version, num_classes, input_dim, text_dim, num_samples
_CLASS = struct.Struct("<I?d")         # id, unseen, noise_scale
_SAMPLE = struct.Struct("<IIBI")       # id, class, split, num_frames


def save(dataset: SyntheticDataset, path: str | Path):
    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset.classes), dataset.input_dim,
                        dataset.text_dim, len(dataset.samples))
    for c in dataset.classes:
        out += _CLASS.pack(c.class_id, c.unseen, c.noise_scale)
        out += c.text_features.astype("<f8").tobytes()
        out += c.centroid.astype("<f8").tobytes()
    for s in dataset.samples:
        out += _SAMPLE.pack(s.sample_id, s.class_id, SPLITS.index(s.split), s.frames.shape[0])
        out += s.frames.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError("truncated dataset file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load(path: str | Path) -> SyntheticDataset:
    r = _Reader(Path(path).read_bytes())
    magic, version, n_classes, in_dim, text_dim, n_samples = r.unpack(_HEADER)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic bytes, not a dataset file")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset format version {version} (expected {FORMAT_VERSION})")
    classes = []
    for _ in range(n_classes):
        cid, unseen, scale = r.unpack(_CLASS)
        classes.append(ClassInfo(cid, r.floats(text_dim), r.floats(in_dim), scale, unseen))
    samples = []
    for _ in range(n_samples):
        sid, cid, split, n_frames = r.unpack(_SAMPLE)
        if split >= len(SPLITS):
            raise DatasetFormatError(f"bad split code {split}")
        samples.append(Sample(sid, cid, r.floats(n_frames * in_dim).reshape(n_frames, in_dim), SPLITS[split]))
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after dataset payload")
    return SyntheticDataset(classes, samples)


def export_csv(dataset: SyntheticDataset, path: str | Path):
    """Flat, lossy-free inspection dump: one row per frame."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "class", "split", "unseen", "frame"] + [f"f{d}" for d in range(dataset.input_dim)])
        for s in dataset.samples:
            unseen = dataset.classes[s.class_id].unseen
            for t, frame in enumerate(s.frames):
                w.writerow([s.sample_id, s.class_id, s.split, int(unseen), t] + [repr(float(x)) for x in frame])


def config_dict(config: GenerationConfig) -> dict:
    d = asdict(config)
    d["noise_scale_range"] = list(config.noise_scale_range)
    d["seq_len_range"] = list(config.seq_len_range)
    return d
