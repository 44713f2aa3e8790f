"""Synthetic task generation, head construction, and on-disk formats.

Formats (all little-endian):

* EMB1 embedding store: ``b"EMB1"``, version u16, dim u32, count u64, then
  ``count`` records of sample_id u64, view_id (u16 byte length + UTF-8),
  ``dim`` float32 values.
* IMG1 image tensors: ``b"IMG1"``, C, H, W as u32, then N*C*H*W float32
  values (N inferred from the payload size).
* labels: text lines ``sample_id,label_index``.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DegenerateHead,
    InvalidGeometry,
    NormOutOfRange,
    TruncatedFile,
    VersionUnsupported,
)
from .head import ZeroShotHead
from .prng import PrngStream

log = logging.getLogger(__name__)

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
IMG_MAGIC = b"IMG1"
NORM_WARN = 1e-3
NORM_FAIL = 0.5


@dataclass(frozen=True)
class TaskConfig:
    k: int = 8
    per_class: int = 64
    geometry: tuple[int, int, int] = (3, 32, 32)
    noise_sigma: float = 0.01
    share: float = 0.0  # weight of the field common to every class
    anisotropy: float = 0.0  # weight of planar (non-radial) cosines
    max_cycles: float = 2.0  # highest radial frequency, cycles per image width
    contrast: float = 0.03  # prototype half-range around mid-gray


@dataclass
class SyntheticTask:
    config: TaskConfig
    seed: int
    prototypes: np.ndarray  # (k, C, H, W)
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)


def _field(rng: PrngStream, h: int, w: int, cfg: TaskConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - (h - 1) / 2, xx - (w - 1) / 2
    r = np.hypot(dx, dy)
    f = np.zeros((h, w))
    for _ in range(4):
        kr = rng.uniform(0.3, cfg.max_cycles) * 2 * np.pi / w
        f += rng.uniform(0.5, 1.0) * np.cos(kr * r + rng.uniform(0, 2 * np.pi))
        kx, ky = rng.uniform(-1, 1) * 2 * np.pi / w, rng.uniform(-1, 1) * 2 * np.pi / h
        amp = cfg.anisotropy * rng.uniform(0.5, 1.0)
        f += amp * np.cos(kx * dx + ky * dy + rng.uniform(0, 2 * np.pi))
    return f


def _prototype(rng: PrngStream, geometry, cfg: TaskConfig, base=None) -> np.ndarray:
    c, h, w = geometry
    img = np.stack([_field(rng, h, w, cfg) for _ in range(c)])
    if base is not None:
        img = (1 - cfg.share) * img + cfg.share * base
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return 0.5 + cfg.contrast * (2 * (img - lo) / np.maximum(hi - lo, 1e-12) - 1)


def gen_task(cfg: TaskConfig = TaskConfig(), seed: int = 0) -> SyntheticTask:
    """Low-frequency class prototypes plus Gaussian pixel noise.

    Pixel values are rounded to float32 so the IMG1 round trip is exact.
    """
    c, h, w = (int(g) for g in cfg.geometry)
    if c < 1 or h < 4 or w < 4 or cfg.k < 2 or cfg.per_class < 1:
        raise InvalidGeometry(f"bad task geometry {cfg.geometry} / k={cfg.k}")
    if cfg.noise_sigma < 0:
        raise InvalidGeometry("noise_sigma must be non-negative")
    base = _field(PrngStream.derive(seed, 1 << 32, "data"), h, w, cfg)
    protos = np.stack(
        [_prototype(PrngStream.derive(seed, i, "data"), (c, h, w), cfg, base) for i in range(cfg.k)]
    )
    protos = protos.astype(np.float32).astype(np.float64)
    n = cfg.k * cfg.per_class
    labels = np.repeat(np.arange(cfg.k), cfg.per_class)
    images = np.empty((n, c, h, w))
    for i in range(n):
        img = protos[labels[i]]
        if cfg.noise_sigma > 0:
            rng = PrngStream.derive(seed, (1 << 33) + i, "data")
            img = np.clip(img + cfg.noise_sigma * rng.normal((c, h, w)), 0.0, 1.0)
        images[i] = img
    images = images.astype(np.float32).astype(np.float64)
    return SyntheticTask(cfg, seed, protos, images, labels)


def build_head(encoder, prototypes: np.ndarray, temperature: float = 0.01, labels=()) -> ZeroShotHead:
    t = encoder.embed(np.asarray(prototypes, dtype=np.float64))
    gram = t @ t.T
    np.fill_diagonal(gram, -1.0)
    if gram.max() >= 0.999:
        raise DegenerateHead(f"class embeddings nearly coincide (cos {gram.max():.4f})")
    return ZeroShotHead(t, temperature, tuple(labels))


# --------------------------------------------------------------------------
# EMB1


@dataclass
class EmbeddingStore:
    dim: int
    records: dict = field(default_factory=dict)  # (sample_id, view_id) -> float32 (dim,)

    def add(self, sample_id: int, view_id: str, vector) -> None:
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise ValueError(f"vector shape {v.shape} != ({self.dim},)")
        self.records[(int(sample_id), str(view_id))] = v

    def __len__(self):
        return len(self.records)


def _check_norm(v: np.ndarray, key) -> np.ndarray:
    n = float(np.linalg.norm(v.astype(np.float64)))
    dev = abs(n - 1.0)
    if dev >= NORM_FAIL:
        raise NormOutOfRange(f"record {key} has norm {n:.4f}")
    if dev > NORM_WARN:
        log.warning("record %s has norm %.4f; renormalizing", key, n)
        return (v.astype(np.float64) / n).astype(np.float32)
    return v


def write_store(path, store: EmbeddingStore) -> None:
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<HIQ", EMB_VERSION, store.dim, len(store.records)))
    for (sid, vid), v in store.records.items():
        v = _check_norm(np.asarray(v, dtype=np.float32), (sid, vid))
        raw = vid.encode("utf-8")
        buf.write(struct.pack("<QH", sid, len(raw)))
        buf.write(raw)
        buf.write(np.asarray(v, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_store(path) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != EMB_MAGIC:
        raise BadMagic(f"{path} is not an EMB1 file")
    if len(data) < 18:
        raise TruncatedFile("header truncated")
    version, dim, count = struct.unpack_from("<HIQ", data, 4)
    if version != EMB_VERSION:
        raise VersionUnsupported(f"EMB1 version {version}")
    store = EmbeddingStore(dim)
    off = 18
    for _ in range(count):
        if off + 10 > len(data):
            raise TruncatedFile("record header truncated")
        sid, n = struct.unpack_from("<QH", data, off)
        off += 10
        if off + n + 4 * dim > len(data):
            raise TruncatedFile("record payload truncated")
        vid = data[off : off + n].decode("utf-8")
        off += n
        v = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float32)
        off += 4 * dim
        store.records[(sid, vid)] = _check_norm(v, (sid, vid))
    return store


# --------------------------------------------------------------------------
# IMG1 and labels


def write_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    _, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<III", c, h, w))
        fh.write(images.astype("<f4").tobytes())


def read_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMG_MAGIC:
        raise BadMagic(f"{path} is not an IMG1 file")
    if len(data) < 16:
        raise TruncatedFile("IMG1 header truncated")
    c, h, w = struct.unpack_from("<III", data, 4)
    per = c * h * w * 4
    payload = len(data) - 16
    if per == 0 or payload % per:
        raise TruncatedFile("IMG1 payload is not a whole number of images")
    arr = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    return arr.reshape(payload // per, c, h, w)


def write_labels(path, sample_ids, labels) -> None:
    lines = [f"{int(s)},{int(l)}" for s, l in zip(sample_ids, labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path):
    ids, labels = [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            s, l = line.split(",")
            ids.append(int(s))
            labels.append(int(l))
    return np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64)
