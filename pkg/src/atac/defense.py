"""Augmentation-drift test-time correction of image embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment
from .augment import AugmentationSuite
from .embedding import DriftStats, batch_drift_stats, drift_stats
from .head import Prediction, ZeroShotHead, class_probabilities, predict_labels
from .prng import PrngStream

DIRECTIONS = {"toward_views": -1.0, "away_from_views": 1.0}


@dataclass(frozen=True)
class AtacParams:
    """Gate threshold, step size and augmentation suite.

    ``direction`` picks the sign of the step along the mean drift
    ``d = mean(f_x - f_view)``. ``"toward_views"`` moves the embedding toward
    the augmented views (``f_x - alpha * d``); ``"away_from_views"`` applies
    ``f_x + alpha * d``.
    """

    tau_star: float = 0.85
    alpha: float = 7.0
    suite: AugmentationSuite = field(default_factory=lambda: augment.suite("default"))
    direction: str = "toward_views"

    def __post_init__(self):
        if not -1.0 < self.tau_star <= 1.0:
            raise ValueError("tau_star must lie in (-1, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if len(self.suite) < 2:
            raise ValueError("ATAC needs at least two augmentations")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}")

    @property
    def sign(self) -> float:
        return DIRECTIONS[self.direction]


@dataclass(frozen=True)
class CorrectionOutcome:
    corrected: np.ndarray
    tau: float
    fired: bool
    drift: DriftStats | None


def correct(f_x, view_embeddings, params: AtacParams) -> CorrectionOutcome:
    f_x = np.asarray(f_x, dtype=np.float64)
    stats = drift_stats(f_x, view_embeddings)
    fired = (stats.tau > params.tau_star) and not stats.degenerate
    if not fired:
        return CorrectionOutcome(f_x, stats.tau, False, stats)
    moved = f_x + params.sign * params.alpha * stats.mean_drift
    return CorrectionOutcome(moved / np.linalg.norm(moved), stats.tau, True, stats)


def correct_batch(f_x: np.ndarray, views: np.ndarray, params: AtacParams):
    """Vectorised ``correct``: ``f_x (B, D)``, ``views (n, B, D)``.

    Returns ``(corrected, tau, fired)``.
    """
    _, mean_drift, tau, degenerate = batch_drift_stats(f_x, views)
    fired = (tau > params.tau_star) & ~degenerate
    moved = f_x + params.sign * params.alpha * mean_drift
    moved = moved / np.linalg.norm(moved, axis=-1, keepdims=True)
    return np.where(fired[:, None], moved, f_x), tau, fired


def view_embeddings(x: np.ndarray, encoder, s: AugmentationSuite) -> np.ndarray:
    """Embeddings of every view of a batch ``x (B, C, H, W)`` under a deterministic suite: ``(n, B, D)``."""
    ops = augment.resolve_suite(s, x.shape, None)
    return np.stack([encoder.embed(op.forward(x)) for op in ops])


@dataclass(frozen=True)
class AtacResult:
    prediction: Prediction
    outcome: CorrectionOutcome
    encoder_calls: int


def atac_predict(x, encoder, head: ZeroShotHead, params: AtacParams, rng: PrngStream | None = None) -> AtacResult:
    """Encode ``x`` and its views, correct, classify. Uses ``n + 1`` encodes."""
    x = augment.as_image(x)
    before = encoder.calls
    f_x = encoder.embed(x)
    ops = [op for op in augment.resolve_suite(params.suite, x.shape, rng) if not isinstance(op, augment.Skipped)]
    if len(ops) < 2:
        # Too few applied views to estimate a direction: leave the embedding alone.
        outcome = CorrectionOutcome(f_x, 0.0, False, None)
    else:
        views = encoder.embed(np.stack([op.forward(x) for op in ops]))
        outcome = correct(f_x, views, params)
    p = class_probabilities(outcome.corrected, head)
    return AtacResult(Prediction(int(np.argmax(p)), p), outcome, encoder.calls - before)


def atac_predict_batch(x: np.ndarray, encoder, head: ZeroShotHead, params: AtacParams, streams=None):
    """Batch pipeline used by the harness: ``(labels, tau, fired)``."""
    if params.suite.is_random:
        if streams is None or len(streams) != len(x):
            raise ValueError("random suites need one PRNG stream per sample")
        out = [atac_predict(xb, encoder, head, params, r) for xb, r in zip(x, streams)]
        labels = np.array([o.prediction.label_index for o in out])
        tau = np.array([o.outcome.tau for o in out])
        fired = np.array([o.outcome.fired for o in out])
        return labels, tau, fired
    f_x = encoder.embed(x)
    views = view_embeddings(x, encoder, params.suite)
    corrected, tau, fired = correct_batch(f_x, views, params)
    return predict_labels(corrected, head), tau, fired


def atac_from_store(encoder, sample_id: int, head: ZeroShotHead, params: AtacParams) -> AtacResult:
    """ATAC on pre-computed embeddings: ``"orig"`` plus one record per suite view id."""
    if params.suite.is_random:
        raise ValueError("stored views require a deterministic suite")
    before = encoder.calls
    f_x = encoder.encode_key(sample_id, "orig").embedding
    views = np.stack([encoder.encode_key(sample_id, v).embedding for v in params.suite.view_ids()])
    outcome = correct(f_x, views, params)
    p = class_probabilities(outcome.corrected, head)
    return AtacResult(Prediction(int(np.argmax(p)), p), outcome, encoder.calls - before)
