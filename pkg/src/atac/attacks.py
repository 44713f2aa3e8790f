"""L-infinity PGD, its variants, and adaptive attacks on the two test-time defenses.

All attacks run on batches ``x (B, C, H, W)`` with one PRNG stream per sample,
so results depend only on ``(seed, sample index, config)``. The single-image
wrappers return an :class:`AttackResult`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import augment
from .baselines import TtcParams, counterattack, drift_ratio
from .defense import AtacParams
from .embedding import batch_drift_stats, tau_backward
from .errors import GradientUnsupported
from .head import ZeroShotHead, cross_entropy, normalize_backward, predict_labels
from .prng import PrngStream


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 4 / 255
    gamma: float = 1 / 255
    steps: int = 10
    random_start: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0 or self.gamma <= 0 or self.steps < 1:
            raise ValueError("need epsilon >= 0, gamma > 0, steps >= 1")
        if self.norm != "linf":
            raise ValueError("only the linf threat model is implemented")


LARGE_EPSILON = 127.5 / 255


def large_eps_config(base: PgdConfig = PgdConfig()) -> PgdConfig:
    """Budget of 127.5/255 with step ``2 * eps / steps`` so the ball is reachable."""
    return replace(base, epsilon=LARGE_EPSILON, gamma=2 * LARGE_EPSILON / base.steps)


@dataclass(frozen=True)
class AdaptiveConfig:
    base: PgdConfig = field(default_factory=PgdConfig)
    gate_temp: float = 40.0
    lam: float = 1.0
    strategy: str = "lure"
    eot_samples: int = 1  # suite draws per step; only matters for random suites

    def __post_init__(self):
        if self.gate_temp <= 0:
            raise ValueError("gate_temp must be positive")
        if self.strategy not in ("avoid", "lure"):
            raise ValueError("strategy must be 'avoid' or 'lure'")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray | bool
    steps_used: np.ndarray | int
    loss_trace: list


def _require_grad(encoder):
    if not getattr(encoder, "differentiable", False):
        raise GradientUnsupported("attack needs a differentiable encoder")


def _streams(streams, n):
    if isinstance(streams, PrngStream):
        if n != 1:
            raise ValueError("pass one stream per sample for batches")
        return [streams]
    streams = list(streams)
    if len(streams) != n:
        raise ValueError(f"{len(streams)} streams for {n} samples")
    return streams


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def random_start(x: np.ndarray, eps: float, streams) -> np.ndarray:
    noise = np.stack([r.uniform(-eps, eps, x.shape[1:]) for r in streams])
    return project(x + noise, x, eps)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ce_gradient(x_a, y, encoder, head, target: bool = False):
    """CE loss and its input gradient; ``target=True`` negates for descent."""
    res = encoder.encode(x_a)
    loss, gf = cross_entropy(res.embedding, y, head, grad=True)
    g = encoder.encode_vjp(x_a, gf, res)
    if target:
        return -loss, -g
    return loss, g


def _sign_pgd(x, grad_fn, cfg: PgdConfig, streams, stop_fn=None):
    """Shared PGD loop. ``stop_fn(x_a) -> bool mask`` freezes finished samples."""
    x = np.asarray(x, dtype=np.float64)
    steps_used = np.zeros(len(x), dtype=np.int64)
    active = np.ones(len(x), dtype=bool)
    x_a = x.copy()
    if stop_fn is not None:
        active &= ~stop_fn(x_a)
    if cfg.random_start:
        start = random_start(x, cfg.epsilon, streams)
        x_a = np.where(active[:, None, None, None], start, x_a)
        if stop_fn is not None:
            active &= ~stop_fn(x_a)
    trace = []
    for t in range(cfg.steps):
        if not np.any(active):
            break
        loss, g = grad_fn(x_a, t)
        trace.append(loss)
        stepped = project(x_a + cfg.gamma * np.sign(g), x, cfg.epsilon)
        x_a = np.where(active[:, None, None, None], stepped, x_a)
        steps_used += active
        if stop_fn is not None:
            active &= ~stop_fn(x_a)
    return x_a, steps_used, trace


def _finish(x_adv, y, encoder, head, steps_used, trace, single):
    success = predict_labels(encoder.embed(x_adv), head) != np.asarray(y)
    if single:
        return AttackResult(x_adv[0], bool(success[0]), int(steps_used[0]), [float(l[0]) for l in trace])
    return AttackResult(x_adv, success, steps_used, trace)


def _batchify(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
        y = np.atleast_1d(y)
    return x, np.asarray(y), single


def pgd_untargeted(x, y_true, encoder, head: ZeroShotHead, cfg: PgdConfig = PgdConfig(), streams=None) -> AttackResult:
    _require_grad(encoder)
    x, y, single = _batchify(x, y_true)
    streams = _streams(streams, len(x)) if cfg.random_start else None
    x_adv, used, trace = _sign_pgd(x, lambda xa, t: ce_gradient(xa, y, encoder, head), cfg, streams)
    return _finish(x_adv, y, encoder, head, used, trace, single)


def pgd_large_eps(x, y_true, encoder, head, cfg: PgdConfig = PgdConfig(), streams=None) -> AttackResult:
    return pgd_untargeted(x, y_true, encoder, head, large_eps_config(cfg), streams)


def pgd_early_stop(x, y_true, encoder, head, cfg: PgdConfig = PgdConfig(), streams=None) -> AttackResult:
    """Stops each sample at the first iterate the undefended head misclassifies.

    The clean input and the random-start point are both checked before any
    gradient step; either being misclassified gives ``steps_used = 0``.
    """
    _require_grad(encoder)
    x, y, single = _batchify(x, y_true)
    streams = _streams(streams, len(x)) if cfg.random_start else None

    def wrong(xa):
        return predict_labels(encoder.embed(xa), head) != y

    x_adv, used, trace = _sign_pgd(x, lambda xa, t: ce_gradient(xa, y, encoder, head), cfg, streams, wrong)
    return _finish(x_adv, y, encoder, head, used, trace, single)


def pgd_unsupervised(x, encoder, cfg: PgdConfig = PgdConfig(), streams=None, y_true=None, head=None) -> AttackResult:
    """Label-free ascent on ``|E(x) - E(x + delta)|``.

    ``y_true`` and ``head`` are only used to score success afterwards.
    """
    _require_grad(encoder)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    streams = _streams(streams, len(x)) if cfg.random_start else None
    f0 = encoder.embed(x)

    def grad_fn(xa, t):
        res = encoder.encode(xa)
        diff = res.embedding - f0
        n = np.linalg.norm(diff, axis=-1)
        safe = np.where(n > 0, n, 1.0)[:, None]
        u = np.where(n[:, None] > 0, diff / safe, 0.0)
        return n, encoder.encode_vjp(xa, u, res)

    x_adv, used, trace = _sign_pgd(x, grad_fn, cfg, streams)
    if y_true is None or head is None:
        success = np.zeros(len(x), dtype=bool)
        if single:
            return AttackResult(x_adv[0], False, int(used[0]), [float(l[0]) for l in trace])
        return AttackResult(x_adv, success, used, trace)
    y = np.atleast_1d(np.asarray(y_true))
    return _finish(x_adv, y, encoder, head, used, trace, single)


def pick_targets(y: np.ndarray, k: int, streams) -> np.ndarray:
    """Uniform target among the ``k - 1`` wrong labels, one draw per sample."""
    out = np.empty(len(y), dtype=np.int64)
    for i, (yi, r) in enumerate(zip(y, streams)):
        j = r.integer(k - 1)
        out[i] = j + (j >= yi)
    return out


def pgd_targeted(x, y_true, encoder, head, cfg: PgdConfig = PgdConfig(), streams=None, y_target=None, target_streams=None) -> AttackResult:
    """Sign descent on CE toward ``y_target``; success is judged against ``y_true``."""
    _require_grad(encoder)
    x, y, single = _batchify(x, y_true)
    if y_target is None:
        if target_streams is None:
            raise ValueError("need y_target or target_streams")
        y_target = pick_targets(y, head.k, _streams(target_streams, len(x)))
    y_target = np.atleast_1d(np.asarray(y_target))
    if np.any(y_target == y):
        raise ValueError("target label must differ from the true label")
    streams = _streams(streams, len(x)) if cfg.random_start else None
    x_adv, used, trace = _sign_pgd(x, lambda xa, t: ce_gradient(xa, y_target, encoder, head, target=True), cfg, streams)
    return _finish(x_adv, y, encoder, head, used, trace, single)


# --------------------------------------------------------------------------
# Adaptive attacks


def atac_objective(x_a, y, encoder, head, atac: AtacParams, cfg: AdaptiveConfig, ops_per_sample=None):
    """Soft-gated ATAC attack loss and its gradient w.r.t. ``x_a``.

    ``ops_per_sample`` supplies resolved transforms for random suites
    (a list over samples of per-spec transforms); deterministic suites are
    resolved once for the whole batch.
    """
    res0 = encoder.encode(x_a)
    f = res0.embedding
    if cfg.strategy == "avoid" and cfg.lam == 0:
        loss, gf = cross_entropy(f, y, head, grad=True)
        return loss, encoder.encode_vjp(x_a, gf, res0)

    n = len(atac.suite)
    if ops_per_sample is None:
        ops = augment.resolve_suite(atac.suite, x_a.shape, None)
        xs = [op.forward(x_a) for op in ops]
    else:
        xs = [np.stack([ops_per_sample[b][i].forward(x_a[b]) for b in range(len(x_a))]) for i in range(n)]
    results = [encoder.encode(xi) for xi in xs]
    views = np.stack([r.embedding for r in results])
    drifts, mean_drift, tau, _ = batch_drift_stats(f, views)
    gate = sigmoid(cfg.gate_temp * (tau - atac.tau_star))

    if cfg.strategy == "avoid":
        ce, grad_f = cross_entropy(f, y, head, grad=True)
        loss = ce - cfg.lam * tau
        g_tau = np.full(len(f), -cfg.lam)
        grad_mean = np.zeros_like(f)
    else:
        step = atac.sign * atac.alpha
        f_star = f + step * gate[:, None] * mean_drift
        u = f_star / np.linalg.norm(f_star, axis=-1, keepdims=True)
        ce, grad_u = cross_entropy(u, y, head, grad=True)
        loss = ce + cfg.lam * tau
        grad_fstar = normalize_backward(f_star, grad_u)
        grad_f = grad_fstar
        grad_mean = step * gate[:, None] * grad_fstar
        grad_gate = step * np.sum(grad_fstar * mean_drift, axis=-1)
        g_tau = cfg.lam + grad_gate * cfg.gate_temp * gate * (1 - gate)

    grad_d = tau_backward(drifts, mean_drift, g_tau) + grad_mean[None] / n
    grad_f = grad_f + grad_d.sum(axis=0)
    g = encoder.encode_vjp(x_a, grad_f, res0)
    for i in range(n):
        gv = encoder.encode_vjp(xs[i], -grad_d[i], results[i])
        if ops_per_sample is None:
            g = g + ops[i].vjp(x_a, gv)
        else:
            g = g + np.stack([ops_per_sample[b][i].vjp(x_a[b], gv[b]) for b in range(len(x_a))])
    return loss, g


def adaptive_atac_attack(x, y_true, encoder, head, atac: AtacParams = AtacParams(), cfg: AdaptiveConfig = AdaptiveConfig(), streams=None) -> AttackResult:
    """Soft-gate attack on the full correction pipeline (random start always on)."""
    _require_grad(encoder)
    x, y, single = _batchify(x, y_true)
    streams = _streams(streams, len(x))
    base = replace(cfg.base, random_start=True)

    def grad_fn(xa, t):
        if not atac.suite.is_random:
            return atac_objective(xa, y, encoder, head, atac, cfg)
        loss, g = 0.0, 0.0
        for _ in range(cfg.eot_samples):
            ops = [augment.resolve_suite(atac.suite, xa.shape[1:], r) for r in streams]
            li, gi = atac_objective(xa, y, encoder, head, atac, cfg, ops)
            loss, g = loss + li / cfg.eot_samples, g + gi / cfg.eot_samples
        return loss, g

    x_adv, used, trace = _sign_pgd(x, grad_fn, base, streams)
    return _finish(x_adv, y, encoder, head, used, trace, single)


def ttc_objective(x_a, y, encoder, head, ttc: TtcParams, cfg: AdaptiveConfig, streams):
    """Soft-gated counterattack objective and its gradient w.r.t. ``x_a``."""
    res0 = encoder.encode(x_a)
    f = res0.embedding
    if cfg.strategy == "avoid" and cfg.lam == 0:
        loss, gf = cross_entropy(f, y, head, grad=True)
        return loss, encoder.encode_vjp(x_a, gf, res0)

    delta_ttc = counterattack(encoder, x_a, f, ttc.epsilon_ttc, ttc.eta, 1, streams)
    tau_hat, probes = drift_ratio(encoder, x_a, f, ttc.epsilon_tau, ttc.probe_count, streams)

    def tau_grad():
        gf = np.zeros_like(f)
        gx = np.zeros_like(x_a)
        for xp, res, diff in probes:
            n = np.linalg.norm(diff, axis=-1, keepdims=True)
            r = np.where(n > 0, diff / np.where(n > 0, n, 1.0), 0.0) / ttc.probe_count
            inside = (xp > 0.0) & (xp < 1.0)
            gx += np.where(inside, encoder.encode_vjp(xp, r, res), 0.0)
            gf -= r
        return gx, gf

    gx_tau, gf_tau = tau_grad()
    if cfg.strategy == "avoid":
        ce, grad_f = cross_entropy(f, y, head, grad=True)
        loss = ce + cfg.lam * tau_hat
        g = encoder.encode_vjp(x_a, grad_f + cfg.lam * gf_tau, res0) + cfg.lam * gx_tau
        return loss, g

    gate = sigmoid(cfg.gate_temp * (ttc.tau_thresh - tau_hat))
    x_star = x_a + gate[:, None, None, None] * delta_ttc
    res_s = encoder.encode(x_star)
    ce, grad_fs = cross_entropy(res_s.embedding, y, head, grad=True)
    loss = ce - cfg.lam * tau_hat
    g_star = encoder.encode_vjp(x_star, grad_fs, res_s)
    dgate = -cfg.gate_temp * gate * (1 - gate)
    coef = np.sum(g_star * delta_ttc, axis=(1, 2, 3)) * dgate - cfg.lam
    g = g_star + coef[:, None, None, None] * gx_tau
    g = g + encoder.encode_vjp(x_a, coef[:, None] * gf_tau, res0)
    return loss, g


def adaptive_ttc_attack(x, y_true, encoder, head, ttc: TtcParams | None = None, cfg: AdaptiveConfig = AdaptiveConfig(), streams=None) -> AttackResult:
    _require_grad(encoder)
    ttc = ttc or TtcParams(epsilon_ttc=2 / 255, eta=1 / 255, epsilon_tau=2 / 255, tau_thresh=0.2)
    x, y, single = _batchify(x, y_true)
    streams = _streams(streams, len(x))
    base = replace(cfg.base, random_start=True)
    x_adv, used, trace = _sign_pgd(x, lambda xa, t: ttc_objective(xa, y, encoder, head, ttc, cfg, streams), base, streams)
    return _finish(x_adv, y, encoder, head, used, trace, single)


def eot_loss(x, y, encoder, head, transforms, probe_count: int = 1, rng: PrngStream | None = None, grad: bool = False):
    """Mean CE over transform draws.

    A list of deterministic specs is averaged exactly (``probe_count`` and
    ``rng`` are ignored); otherwise ``probe_count`` draws cycle through the
    list, each resolved from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    specs = list(transforms.specs if hasattr(transforms, "specs") else transforms)
    if all(not s.is_random for s in specs):
        draws = [augment.resolve(s, x.shape, None) for s in specs]
    else:
        if probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        draws = [augment.resolve(specs[j % len(specs)], x.shape, rng) for j in range(probe_count)]
    xs = np.stack([op.forward(x) for op in draws])
    ys = np.full(len(draws), y)
    res = encoder.encode(xs)
    loss, gf = cross_entropy(res.embedding, ys, head, grad=True)
    if not grad:
        return float(loss.mean())
    gxs = encoder.encode_vjp(xs, gf / len(draws), res)
    g = sum(op.vjp(x, gi) for op, gi in zip(draws, gxs))
    return float(loss.mean()), g
