"""Toy differentiable image encoders and a store-backed encoder for real features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GradientUnsupported, MissingKey, NonFiniteOutput, ShapeMismatch
from .head import normalize_backward
from .prng import PrngStream

ARCHITECTURES = ("linear", "mlp1")


@dataclass(frozen=True)
class EncoderParams:
    architecture: str
    geometry: tuple[int, int, int]
    weights: tuple[np.ndarray, ...]  # (W, b) or (W1, b1, W2, b2)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        n_in = int(np.prod(self.geometry))
        if self.architecture == "linear":
            w, b = self.weights
            if w.shape != (b.shape[0], n_in):
                raise ShapeMismatch("linear weights inconsistent with geometry")
        else:
            w1, b1, w2, b2 = self.weights
            if w1.shape != (b1.shape[0], n_in) or w2.shape != (b2.shape[0], b1.shape[0]):
                raise ShapeMismatch("mlp1 weights inconsistent with geometry")
        if not all(np.all(np.isfinite(p)) for p in self.weights):
            raise ValueError("encoder parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass(frozen=True)
class EncodeResult:
    embedding: np.ndarray
    pre_norm: np.ndarray
    hidden: np.ndarray | None = field(default=None, repr=False)


def init_encoder(
    architecture: str = "mlp1",
    geometry=(3, 32, 32),
    dim: int = 64,
    hidden: int = 256,
    seed: int = 0,
    gain: float = 2.0,
    center: float = 0.5,
    bias_scale: float = 0.1,
    band: tuple[float, float] | None = None,
) -> EncoderParams:
    """Seeded encoder with weights ~ N(0, 1/fan_in).

    The first layer is multiplied by ``gain``, and its bias absorbs
    ``-W @ center`` so that pre-activations are centered on mid-gray images.
    """
    rng = PrngStream.derive(seed, 0, "encoder")
    geometry = tuple(int(g) for g in geometry)
    n_in = int(np.prod(geometry))
    first = hidden if architecture == "mlp1" else dim
    w1 = rng.normal((first, n_in)) / np.sqrt(n_in)
    if band is not None:
        w1 = _band_pass(w1, geometry, band)
    w1 = w1 * gain
    b1 = rng.normal(first) * bias_scale - w1 @ np.full(n_in, center)
    if architecture == "linear":
        return EncoderParams("linear", geometry, (w1, b1))
    w2 = rng.normal((dim, hidden)) / np.sqrt(hidden)
    b2 = rng.normal(dim) * (bias_scale / 10)
    return EncoderParams("mlp1", geometry, (w1, b1, w2, b2))


def _band_pass(rows: np.ndarray, geometry, band) -> np.ndarray:
    """Difference-of-Gaussians filtering of each row's spatial planes; unit-norm output."""
    c, h, w = geometry
    lo, hi = band
    planes = rows.reshape(-1, c, h, w)
    out = ndimage.gaussian_filter(planes, (0, 0, lo, lo), mode="wrap")
    if hi:
        out = out - ndimage.gaussian_filter(planes, (0, 0, hi, hi), mode="wrap")
    out = out.reshape(len(rows), -1)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _flatten(params: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != params.geometry:
        raise ShapeMismatch(f"input {x.shape} does not match geometry {params.geometry}")
    return x.reshape(*x.shape[:-3], -1)


def encode(params: EncoderParams, x) -> EncodeResult:
    v = _flatten(params, x)
    if params.architecture == "linear":
        w, b = params.weights
        pre = v @ w.T + b
        hid = None
    else:
        w1, b1, w2, b2 = params.weights
        hid = np.tanh(v @ w1.T + b1)
        pre = hid @ w2.T + b2
    if not np.all(np.isfinite(pre)):
        raise NonFiniteOutput("encoder produced NaN or Inf")
    n = np.linalg.norm(pre, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise NonFiniteOutput("encoder produced a zero feature vector")
    return EncodeResult(pre / n, pre, hid)


def encode_vjp(params: EncoderParams, x, upstream, result: EncodeResult | None = None) -> np.ndarray:
    """``J^T upstream`` where J is the Jacobian of the unit embedding in ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if result is None:
        result = encode(params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != result.embedding.shape:
        raise ShapeMismatch(f"upstream {upstream.shape} vs embedding {result.embedding.shape}")
    g = normalize_backward(result.pre_norm, upstream)
    if params.architecture == "linear":
        gv = g @ params.weights[0]
    else:
        w1, _, w2, _ = params.weights
        gh = (g @ w2) * (1.0 - result.hidden**2)
        gv = gh @ w1
    return gv.reshape(x.shape)


class ImageEncoder:
    """Object wrapper used by the defenses and attacks; counts encoded images."""

    differentiable = True

    def __init__(self, params: EncoderParams):
        self.params = params
        self.calls = 0

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def geometry(self):
        return self.params.geometry

    def encode(self, x) -> EncodeResult:
        x = np.asarray(x, dtype=np.float64)
        self.calls += 1 if x.ndim == 3 else int(np.prod(x.shape[:-3]))
        return encode(self.params, x)

    def embed(self, x) -> np.ndarray:
        return self.encode(x).embedding

    def encode_vjp(self, x, upstream, result: EncodeResult | None = None) -> np.ndarray:
        return encode_vjp(self.params, x, upstream, result)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    errors: list[float]


def grad_check(
    params: EncoderParams,
    x,
    trials: int = 10,
    tol: float = 1e-3,
    seed: int = 0,
    step: float = 1e-6,
    vjp=None,
) -> GradCheckReport:
    """Compare ``encode_vjp`` against central differences on random directions.

    ``vjp`` overrides the VJP under test (used for negative controls).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    vjp = vjp or (lambda x_, u_: encode_vjp(params, x_, u_))
    x = np.asarray(x, dtype=np.float64)
    rng = PrngStream.derive(seed, 0, "probe")
    errs = []
    for _ in range(trials):
        u = rng.normal(params.dim)
        v = rng.normal(x.shape)
        analytic = float(np.sum(vjp(x, u) * v))
        fp = encode(params, x + step * v).embedding @ u
        fm = encode(params, x - step * v).embedding @ u
        numeric = (fp - fm) / (2 * step)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        errs.append(abs(analytic - numeric) / scale)
    worst = max(errs)
    return GradCheckReport(worst, worst <= tol, errs)


class StoreEncoder:
    """Serves pre-computed embeddings from an EMB1 store; no gradients."""

    differentiable = False

    def __init__(self, store):
        self.store = store
        self.calls = 0

    @property
    def dim(self) -> int:
        return self.store.dim

    def encode_key(self, sample_id: int, view_id: str) -> EncodeResult:
        try:
            v = self.store.records[(int(sample_id), view_id)]
        except KeyError:
            raise MissingKey(f"({sample_id}, {view_id!r}) not in store") from None
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if abs(n - 1.0) > 1e-4:
            v = v / n
        self.calls += 1
        return EncodeResult(v, v)

    def encode_vjp(self, *args, **kwargs):
        raise GradientUnsupported("store-backed embeddings carry no gradient")


def embedding_store_encoder(store, sample_id: int, view_id: str) -> EncodeResult:
    return StoreEncoder(store).encode_key(sample_id, view_id)
