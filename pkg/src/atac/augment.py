"""Image transforms with exact vector-Jacobian products, and the named suites.

Images are float64 arrays of shape ``(C, H, W)`` (or ``(B, C, H, W)``) with
values in ``[0, 1]``. Every transform is a linear map in the pixels followed by
a clamp to ``[0, 1]``; the clamp passes zero gradient on clamped pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import UnknownSuite, UnsupportedKind
from .prng import PrngStream

KINDS = ("hflip", "vflip", "rotate", "color_jitter", "center_crop_resize")
CORNERS = ("tl", "tr", "bl", "br", "center")
GRAY = np.array([0.299, 0.587, 0.114])
# RGB <-> YIQ; hue jitter is a rotation of the (I, Q) chroma plane.
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a C x H x W tensor, got shape {x.shape}")
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    degrees: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0  # degrees
    crop_corner: str = "center"
    scale: float = 1.0
    mirrored: bool = False  # crop only: horizontal flip before cropping
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKind(self.kind)
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if not np.isfinite(self.degrees):
            raise ValueError("degrees must be finite")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError("scale must lie in (0, 1]")
        if self.crop_corner not in CORNERS:
            raise ValueError(f"unknown crop corner {self.crop_corner!r}")

    @property
    def name(self) -> str:
        if self.kind == "rotate":
            base = f"rot{self.degrees:+g}"
        elif self.kind == "center_crop_resize":
            base = ("hflip+" if self.mirrored else "") + f"crop_{self.crop_corner}"
        elif self.kind == "color_jitter":
            base = "jitter"
        else:
            base = self.kind
        return base if self.probability == 1.0 else f"{base}@p{self.probability:g}"

    @property
    def is_random(self) -> bool:
        return self.probability < 1.0 or self.kind == "color_jitter"


@dataclass(frozen=True)
class AugmentationSuite:
    name: str
    specs: tuple[AugmentationSpec, ...]

    def __len__(self):
        return len(self.specs)

    @property
    def is_random(self) -> bool:
        return any(s.is_random for s in self.specs)

    def view_ids(self) -> list[str]:
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            names = [f"{i}:{n}" for i, n in enumerate(names)]
        return names


# --------------------------------------------------------------------------
# Resolved (concrete) transforms


class Transform:
    """A concrete transform: every random choice already drawn."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Identity(Transform):
    def forward(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    def vjp(self, x, upstream):
        return np.array(upstream, dtype=np.float64, copy=True)


class Skipped(Identity):
    """A random spec whose coin flip said "do not apply"."""


SKIPPED = Skipped()


class Flip(Transform):
    def __init__(self, axis: int):
        self.axis = axis  # -1 horizontal, -2 vertical

    def forward(self, x):
        return np.flip(x, axis=self.axis).copy()

    def vjp(self, x, upstream):
        return np.flip(upstream, axis=self.axis).copy()


class Resample(Transform):
    """Bilinear sampling at fixed source coordinates, edge-clamped.

    The forward pass uses nested lerps so that constant images map to
    themselves exactly; the VJP scatters through the same weights.
    """

    def __init__(self, sy: np.ndarray, sx: np.ndarray, h: int, w: int):
        sy = np.clip(sy, 0.0, h - 1.0).ravel()
        sx = np.clip(sx, 0.0, w - 1.0).ravel()
        y0 = np.floor(sy).astype(np.int64)
        x0 = np.floor(sx).astype(np.int64)
        self.b = sy - y0
        self.a = sx - x0
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        self.i00, self.i01 = y0 * w + x0, y0 * w + x1
        self.i10, self.i11 = y1 * w + x0, y1 * w + x1
        self.h, self.w = h, w
        n = h * w
        rows = np.tile(np.arange(n), 4)
        cols = np.concatenate([self.i00, self.i01, self.i10, self.i11])
        a, b = self.a, self.b
        vals = np.concatenate([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b])
        keep = vals != 0
        self.matrix = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))

    def _linear(self, x):
        flat = x.reshape(*x.shape[:-2], self.h * self.w)
        v00, v01 = flat[..., self.i00], flat[..., self.i01]
        v10, v11 = flat[..., self.i10], flat[..., self.i11]
        top = v00 + self.a * (v01 - v00)
        bot = v10 + self.a * (v11 - v10)
        return (top + self.b * (bot - top)).reshape(x.shape)

    def forward(self, x):
        return np.clip(self._linear(x), 0.0, 1.0)

    def vjp(self, x, upstream):
        pre = self._linear(x)
        g = np.where((pre >= 0.0) & (pre <= 1.0), upstream, 0.0)
        flat = g.reshape(-1, self.h * self.w)
        out = np.asarray(self.matrix.T @ flat.T).T
        return out.reshape(upstream.shape)


class Chain(Transform):
    def __init__(self, *parts: Transform):
        self.parts = parts

    def forward(self, x):
        for p in self.parts:
            x = p.forward(x)
        return x

    def vjp(self, x, upstream):
        inputs = []
        for p in self.parts:
            inputs.append(x)
            x = p.forward(x)
        g = upstream
        for p, xin in zip(reversed(self.parts), reversed(inputs)):
            g = p.vjp(xin, g)
        return g


class ColorJitter(Transform):
    """Brightness, contrast, saturation, hue; clamped after each stage."""

    def __init__(self, brightness: float, contrast: float, saturation: float, hue_deg: float):
        self.bf, self.cf, self.sf = brightness, contrast, saturation
        th = np.radians(hue_deg)
        rot = np.array([[1, 0, 0], [0, np.cos(th), -np.sin(th)], [0, np.sin(th), np.cos(th)]])
        self.hue_matrix = _YIQ2RGB @ rot @ _RGB2YIQ

    @staticmethod
    def _gray(x):
        c = x.shape[-3]
        if c == 3:
            return np.einsum("c,...chw->...hw", GRAY, x)[..., None, :, :]
        return x.mean(axis=-3, keepdims=True)

    def _stages(self, x):
        pres = []
        pre = self.bf * x
        pres.append(pre)
        x = np.clip(pre, 0.0, 1.0)
        m = self._gray(x).mean(axis=(-2, -1), keepdims=True)
        pre = self.cf * x + (1 - self.cf) * m
        pres.append(pre)
        x = np.clip(pre, 0.0, 1.0)
        pre = self.sf * x + (1 - self.sf) * self._gray(x)
        pres.append(pre)
        x = np.clip(pre, 0.0, 1.0)
        if x.shape[-3] == 3:
            pre = np.einsum("dc,...chw->...dhw", self.hue_matrix, x)
        else:
            pre = x
        pres.append(pre)
        return pres

    def forward(self, x):
        return np.clip(self._stages(x)[-1], 0.0, 1.0)

    def vjp(self, x, upstream):
        pres = self._stages(x)
        masks = [(p >= 0.0) & (p <= 1.0) for p in pres]
        c = x.shape[-3]
        wts = GRAY if c == 3 else np.full(c, 1.0 / c)
        g = np.where(masks[3], upstream, 0.0)
        if c == 3:
            g = np.einsum("dc,...dhw->...chw", self.hue_matrix, g)
        g = np.where(masks[2], g, 0.0)
        g = self.sf * g + (1 - self.sf) * wts[:, None, None] * g.sum(axis=-3, keepdims=True)
        g = np.where(masks[1], g, 0.0)
        hw = x.shape[-1] * x.shape[-2]
        total = g.sum(axis=(-3, -2, -1), keepdims=True)
        g = self.cf * g + (1 - self.cf) * wts[:, None, None] * total / hw
        g = np.where(masks[0], g, 0.0)
        return self.bf * g


@lru_cache(maxsize=256)
def _rotation(degrees: float, h: int, w: int) -> Resample:
    th = np.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = r - cy, c - cx
    sx = cx + np.cos(th) * dx + np.sin(th) * dy
    sy = cy - np.sin(th) * dx + np.cos(th) * dy
    return Resample(sy, sx, h, w)


@lru_cache(maxsize=256)
def _crop(corner: str, scale: float, h: int, w: int) -> Resample:
    ch, cw = scale * h, scale * w
    oy = {"tl": 0.0, "tr": 0.0, "bl": h - ch, "br": h - ch, "center": (h - ch) / 2}[corner]
    ox = {"tl": 0.0, "bl": 0.0, "tr": w - cw, "br": w - cw, "center": (w - cw) / 2}[corner]
    r, c = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = oy + r * (ch - 1) / max(h - 1, 1)
    sx = ox + c * (cw - 1) / max(w - 1, 1)
    return Resample(sy, sx, h, w)


def resolve(spec: AugmentationSpec, shape, rng: PrngStream | None = None) -> Transform:
    """Draw every random choice of ``spec`` and return a concrete transform.

    Draw order per spec: one uniform for the apply/skip decision when
    ``probability < 1``, then four uniforms for color jitter factors.
    """
    h, w = shape[-2], shape[-1]
    if spec.probability < 1.0:
        if rng is None:
            raise ValueError(f"{spec.name} needs a PRNG stream")
        if rng.random() >= spec.probability:
            return SKIPPED
    if spec.kind == "hflip":
        return Flip(-1)
    if spec.kind == "vflip":
        return Flip(-2)
    if spec.kind == "rotate":
        if spec.degrees == 0.0:
            return Identity()
        return _rotation(float(spec.degrees), h, w)
    if spec.kind == "center_crop_resize":
        crop = _crop(spec.crop_corner, float(spec.scale), h, w)
        return Chain(Flip(-1), crop) if spec.mirrored else crop
    if spec.kind == "color_jitter":
        if rng is None:
            raise ValueError("color jitter needs a PRNG stream")
        b = rng.uniform(1 - spec.brightness, 1 + spec.brightness)
        c = rng.uniform(1 - spec.contrast, 1 + spec.contrast)
        s = rng.uniform(1 - spec.saturation, 1 + spec.saturation)
        hue = rng.uniform(-spec.hue, spec.hue)
        return ColorJitter(b, c, s, hue)
    raise UnsupportedKind(spec.kind)


def apply(spec: AugmentationSpec, x, rng: PrngStream | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return resolve(spec, x.shape, rng).forward(x)


def apply_vjp(spec: AugmentationSpec, x, upstream, rng: PrngStream | None = None) -> np.ndarray:
    """``J^T upstream`` for ``apply`` at ``x``.

    ``rng`` must be in the same state it was in for the forward call.
    """
    x = np.asarray(x, dtype=np.float64)
    return resolve(spec, x.shape, rng).vjp(x, np.asarray(upstream, dtype=np.float64))


# --------------------------------------------------------------------------
# Named suites


def _rot(d: float, p: float = 1.0) -> AugmentationSpec:
    return AugmentationSpec("rotate", degrees=d, probability=p)


def _jitter() -> AugmentationSpec:
    return AugmentationSpec("color_jitter", brightness=0.4, contrast=0.4, saturation=0.4, hue=15.0)


def _build_suites() -> dict[str, AugmentationSuite]:
    default = (AugmentationSpec("hflip"), _rot(15), _rot(-15), _rot(30), _rot(-30))
    corners = ("tl", "tr", "bl", "br")
    suites = {
        "default": default,
        "asymmetric": (AugmentationSpec("hflip"), _rot(15), _rot(-20), _rot(-25), _rot(30)),
        "random": tuple(replace(s, probability=0.5) for s in default),
        "color": tuple(_jitter() for _ in range(5)),
        "more": (AugmentationSpec("hflip"), AugmentationSpec("vflip"))
        + tuple(_rot(s * d) for d in (15, 20, 25, 30) for s in (1, -1)),
        "tte9": (AugmentationSpec("hflip"),)
        + tuple(AugmentationSpec("center_crop_resize", crop_corner=c, scale=0.9) for c in corners)
        + tuple(
            AugmentationSpec("center_crop_resize", crop_corner=c, scale=0.9, mirrored=True)
            for c in corners
        ),
    }
    return {k: AugmentationSuite(k, v) for k, v in suites.items()}


SUITES = _build_suites()


def suite(name: str) -> AugmentationSuite:
    try:
        return SUITES[name]
    except KeyError:
        raise UnknownSuite(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None


def resolve_suite(s: AugmentationSuite, shape, rng: PrngStream | None) -> list[Transform]:
    return [resolve(spec, shape, rng) for spec in s.specs]
