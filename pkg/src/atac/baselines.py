"""Comparison defenses: prediction ensembling over views, and the counterattack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment
from .augment import AugmentationSuite
from .errors import GradientUnsupported
from .head import Prediction, ZeroShotHead, class_probabilities
from .prng import PrngStream


def tte_predict(x, encoder, head: ZeroShotHead, s: AugmentationSuite | None = None, rng: PrngStream | None = None) -> Prediction:
    """Mean softmax over the original and every view, then argmax."""
    s = s or augment.suite("tte9")
    x = augment.as_image(x)
    ops = augment.resolve_suite(s, x.shape, rng)
    batch = np.stack([x] + [op.forward(x) for op in ops])
    p = class_probabilities(encoder.embed(batch), head).mean(axis=0)
    return Prediction(int(np.argmax(p)), p)


def tte_predict_batch(x: np.ndarray, encoder, head: ZeroShotHead, s: AugmentationSuite | None = None, streams=None) -> np.ndarray:
    s = s or augment.suite("tte9")
    if s.is_random:
        return np.array([tte_predict(xb, encoder, head, s, r).label_index for xb, r in zip(x, streams)])
    ops = augment.resolve_suite(s, x.shape, None)
    p = class_probabilities(encoder.embed(x), head)
    for op in ops:
        p = p + class_probabilities(encoder.embed(op.forward(x)), head)
    return np.argmax(p / (len(ops) + 1), axis=-1)


@dataclass(frozen=True)
class TtcParams:
    epsilon_ttc: float = 4 / 255
    steps: int = 5
    eta: float = 2 * (4 / 255) / 5  # beta * epsilon_ttc / steps with beta = 2
    tau_thresh: float = 0.2
    epsilon_tau: float = 2 / 255
    probe_count: int = 8

    def __post_init__(self):
        if self.epsilon_ttc < 0 or self.epsilon_tau < 0 or self.eta <= 0:
            raise ValueError("TTC budgets must be non-negative and eta positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")


@dataclass(frozen=True)
class TtcResult:
    x_defended: np.ndarray
    tau_hat: np.ndarray
    fired: np.ndarray


def _rows(streams, n):
    if isinstance(streams, PrngStream):
        return [streams] * n
    return list(streams)


def drift_ratio(encoder, x: np.ndarray, f_x: np.ndarray, eps: float, count: int, streams):
    """Mean relative embedding shift under uniform pixel noise, per sample.

    Returns ``(tau_hat, probes)`` where ``probes`` keeps each noisy input and
    its encoding for callers that need gradients.
    """
    tau_hat = np.zeros(len(x))
    probes = []
    for _ in range(count):
        noise = np.stack([r.uniform(-eps, eps, x.shape[1:]) for r in streams])
        xp = np.clip(x + noise, 0.0, 1.0)
        res = encoder.encode(xp)
        diff = res.embedding - f_x
        tau_hat += np.linalg.norm(diff, axis=-1) / np.linalg.norm(f_x, axis=-1) / count
        probes.append((xp, res, diff))
    return tau_hat, probes


def counterattack(encoder, x: np.ndarray, f_x: np.ndarray, eps: float, eta: float, steps: int, streams) -> np.ndarray:
    """Sign ascent on ``|f_x - E(x + delta)|`` from a uniform start; returns delta."""
    if eps == 0:
        return np.zeros_like(x)
    delta = np.stack([r.uniform(-eps, eps, x.shape[1:]) for r in streams])
    delta = np.clip(x + delta, 0.0, 1.0) - x
    for _ in range(steps):
        xt = x + delta
        res = encoder.encode(xt)
        diff = res.embedding - f_x
        n = np.linalg.norm(diff, axis=-1, keepdims=True)
        u = np.where(n > 0, diff / np.where(n > 0, n, 1.0), 0.0)
        g = encoder.encode_vjp(xt, u, res)
        delta = np.clip(delta + eta * np.sign(g), -eps, eps)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return delta


def ttc_defend_batch(x: np.ndarray, encoder, params: TtcParams, streams) -> TtcResult:
    if not getattr(encoder, "differentiable", False):
        raise GradientUnsupported("TTC needs a differentiable encoder")
    x = np.asarray(x, dtype=np.float64)
    streams = _rows(streams, len(x))
    f_x = encoder.embed(x)
    tau_hat, _ = drift_ratio(encoder, x, f_x, params.epsilon_tau, params.probe_count, streams)
    fired = tau_hat < params.tau_thresh
    out = x.copy()
    if np.any(fired):
        idx = np.flatnonzero(fired)
        sub = [streams[i] for i in idx]
        delta = counterattack(encoder, x[idx], f_x[idx], params.epsilon_ttc, params.eta, params.steps, sub)
        out[idx] = np.clip(x[idx] + delta, 0.0, 1.0)
    return TtcResult(out, tau_hat, fired)


def ttc_defend(x, encoder, params: TtcParams, rng: PrngStream) -> TtcResult:
    """Single-image counterattack; fields are scalars / a C x H x W image."""
    res = ttc_defend_batch(augment.as_image(x)[None], encoder, params, [rng])
    return TtcResult(res.x_defended[0], float(res.tau_hat[0]), bool(res.fired[0]))
