import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from atac import attacks as atk
from atac import augment
from atac.attacks import AdaptiveConfig, PgdConfig
from atac.baselines import TtcParams
from atac.data import EmbeddingStore
from atac.defense import AtacParams
from atac.encoders import ImageEncoder, StoreEncoder, init_encoder
from atac.errors import GradientUnsupported
from atac.head import ZeroShotHead, cross_entropy, predict_labels
from atac.prng import PrngStream


def _streams(n, base=0):
    return [PrngStream.derive(base, i, "attack") for i in range(n)]


def _fd(fn, x, v, h=1e-5):
    return (np.sum(fn(x + h * v)) - np.sum(fn(x - h * v))) / (2 * h)


def test_zero_budget_returns_input(tiny):
    x, y = tiny.task.images[:4], tiny.task.labels[:4]
    r = atk.pgd_untargeted(x, y, tiny.encoder, tiny.head, PgdConfig(epsilon=0.0), _streams(4))
    assert np.array_equal(r.x_adv, x)
    wrong = predict_labels(tiny.encoder.embed(x), tiny.head) != y
    assert np.array_equal(r.success, wrong)


def test_linear_single_step_follows_gradient_sign():
    geometry = (3, 8, 8)
    enc = ImageEncoder(init_encoder("linear", geometry, dim=6, seed=4))
    head = ZeroShotHead(np.eye(6)[:3])
    x = 0.25 + 0.5 * np.random.default_rng(0).random(geometry)
    cfg = PgdConfig(steps=1, random_start=False)
    r = atk.pgd_untargeted(x, 0, enc, head, cfg)
    expected_sign = np.sign(r.x_adv - x)

    def loss(z):
        return cross_entropy(enc.embed(z)[None], [0], head)[0]

    fd = np.zeros(x.size)
    h = 1e-6
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        e = e.reshape(geometry)
        fd[j] = (loss(x + e) - loss(x - e)) / (2 * h)
    ok = np.abs(fd) > 1e-9
    agree = np.mean(np.sign(fd[ok]) == expected_sign.ravel()[ok])
    assert agree >= 0.99


ATTACKS = ["pgd", "pgd-large", "pgd-early", "pgd-unsup", "pgd-targeted", "atac-lure", "atac-avoid", "ttc-lure", "ttc-avoid"]


def _run(name, exp, x, y, cfg):
    enc, head, s = exp.encoder, exp.head, _streams(len(x))
    if name == "pgd":
        return atk.pgd_untargeted(x, y, enc, head, cfg, s), cfg.epsilon
    if name == "pgd-large":
        return atk.pgd_large_eps(x, y, enc, head, cfg, s), atk.LARGE_EPSILON
    if name == "pgd-early":
        return atk.pgd_early_stop(x, y, enc, head, cfg, s), cfg.epsilon
    if name == "pgd-unsup":
        return atk.pgd_unsupervised(x, enc, cfg, s), cfg.epsilon
    if name == "pgd-targeted":
        return atk.pgd_targeted(x, y, enc, head, cfg, s, target_streams=_streams(len(x), 9)), cfg.epsilon
    kind, strategy = name.split("-")
    acfg = AdaptiveConfig(cfg, strategy=strategy)
    if kind == "atac":
        return atk.adaptive_atac_attack(x, y, enc, head, AtacParams(), acfg, s), cfg.epsilon
    return atk.adaptive_ttc_attack(x, y, enc, head, None, acfg, s), cfg.epsilon


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(ATTACKS), st.floats(0.0, 0.1), st.integers(1, 3))
def test_budget_and_range(tiny, name, eps, steps):
    x, y = tiny.task.images[:3], tiny.task.labels[:3]
    r, bound = _run(name, tiny, x, y, PgdConfig(epsilon=eps, steps=steps))
    assert np.abs(r.x_adv - x).max() <= bound + 1e-9
    assert r.x_adv.min() >= 0.0 and r.x_adv.max() <= 1.0


def test_unsupervised_ignores_labels(tiny):
    x = tiny.task.images[:4]
    a = atk.pgd_unsupervised(x, tiny.encoder, PgdConfig(), _streams(4), y_true=tiny.task.labels[:4], head=tiny.head)
    b = atk.pgd_unsupervised(x, tiny.encoder, PgdConfig(), _streams(4), y_true=np.zeros(4, int), head=tiny.head)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_unsupervised_first_step_from_origin():
    geometry = (3, 8, 8)
    enc = ImageEncoder(init_encoder("mlp1", geometry, dim=6, hidden=12, seed=2))
    x = 0.5 * np.ones((1, *geometry))
    r = atk.pgd_unsupervised(x, enc, PgdConfig(steps=1, random_start=False))
    assert r.loss_trace[0][0] == 0.0
    # the first step from a zero perturbation moves along a zero gradient
    assert np.array_equal(r.x_adv, x)


def test_two_class_targets_are_forced():
    y = np.array([0, 1, 0, 1])
    t = atk.pick_targets(y, 2, _streams(4))
    assert t.tolist() == [1, 0, 1, 0]


def test_targeted_rejects_true_label(tiny):
    with pytest.raises(ValueError):
        atk.pgd_targeted(tiny.task.images[:1], tiny.task.labels[:1], tiny.encoder, tiny.head, PgdConfig(), _streams(1), y_target=tiny.task.labels[:1])


def test_early_stop_on_misclassified_input(tiny):
    x, y = tiny.task.images[:3], tiny.task.labels[:3]
    wrong = (y + 1) % tiny.head.k
    r = atk.pgd_early_stop(x, wrong, tiny.encoder, tiny.head, PgdConfig(), _streams(3))
    assert np.all(r.steps_used == 0)
    assert np.array_equal(r.x_adv, x)


def test_early_stop_exhaustion(tiny):
    x, y = tiny.task.images[:2], tiny.task.labels[:2]
    r = atk.pgd_early_stop(x, y, tiny.encoder, tiny.head, PgdConfig(epsilon=1e-6, gamma=1e-7, steps=2), _streams(2))
    assert np.all(r.steps_used == 2) and not np.any(r.success)


@pytest.mark.parametrize("kind", ["atac", "ttc"])
def test_lambda_zero_avoid_is_plain_pgd(tiny, kind):
    x, y = tiny.task.images[:4], tiny.task.labels[:4]
    cfg = PgdConfig()
    plain = atk.pgd_untargeted(x, y, tiny.encoder, tiny.head, cfg, _streams(4))
    acfg = AdaptiveConfig(cfg, lam=0.0, strategy="avoid")
    if kind == "atac":
        adaptive = atk.adaptive_atac_attack(x, y, tiny.encoder, tiny.head, AtacParams(), acfg, _streams(4))
    else:
        adaptive = atk.adaptive_ttc_attack(x, y, tiny.encoder, tiny.head, None, acfg, _streams(4))
    assert np.array_equal(plain.x_adv, adaptive.x_adv)


def test_gate_is_nearly_hard_far_from_threshold():
    for gap in (0.2, 0.5, -0.2, -0.7):
        g = atk.sigmoid(40.0 * gap)
        assert abs(g - round(g)) < 1e-3


def test_ttc_gate_suppresses_counterattack_for_large_drift():
    assert atk.sigmoid(40.0 * (0.2 - 0.9)) < 1e-3


def test_attacks_need_gradients(tiny):
    store = StoreEncoder(EmbeddingStore(tiny.encoder.dim))
    with pytest.raises(GradientUnsupported):
        atk.pgd_untargeted(tiny.task.images[:1], tiny.task.labels[:1], store, tiny.head, PgdConfig(), _streams(1))


def test_eot_identity_is_plain_loss(tiny):
    x, y = tiny.task.images[0], int(tiny.task.labels[0])
    plain = cross_entropy(tiny.encoder.embed(x)[None], [y], tiny.head)[0]
    spec = augment.AugmentationSpec("rotate", degrees=0.0)
    assert atk.eot_loss(x, y, tiny.encoder, tiny.head, [spec]) == pytest.approx(plain, abs=1e-12)


def test_eot_deterministic_list_ignores_rng(tiny):
    x, y = tiny.task.images[0], int(tiny.task.labels[0])
    s = augment.suite("default")
    a = atk.eot_loss(x, y, tiny.encoder, tiny.head, s, 3, PrngStream(1))
    b = atk.eot_loss(x, y, tiny.encoder, tiny.head, s, 7, PrngStream(2))
    assert a == b


def test_eot_variance_shrinks_with_probes(tiny):
    x, y = tiny.task.images[0], int(tiny.task.labels[0])
    s = augment.suite("color")

    def var(count):
        return np.var([atk.eot_loss(x, y, tiny.encoder, tiny.head, s, count, PrngStream(i)) for i in range(200)])

    v1, v4, v16 = var(1), var(4), var(16)
    assert v4 < v1 / 2 and v16 < v4 / 2


def test_eot_gradient_matches_finite_differences(tiny):
    # a wrong label keeps the loss away from saturation
    x, y = tiny.task.images[0], int(tiny.task.labels[0] + 1) % tiny.head.k
    s = augment.suite("default")
    _, g = atk.eot_loss(x, y, tiny.encoder, tiny.head, s, grad=True)
    v = np.random.default_rng(0).standard_normal(x.shape)
    fd = _fd(lambda z: atk.eot_loss(z, y, tiny.encoder, tiny.head, s), x, v)
    assert np.sum(g * v) == pytest.approx(fd, rel=1e-2)


@pytest.mark.parametrize("strategy", ["lure", "avoid"])
def test_atac_objective_gradient(tiny, strategy):
    x, y = tiny.task.images[:3], tiny.task.labels[:3]
    cfg = AdaptiveConfig(strategy=strategy)
    params = AtacParams(tau_star=0.3)
    _, g = atk.atac_objective(x, y, tiny.encoder, tiny.head, params, cfg)
    v = np.random.default_rng(1).standard_normal(x.shape)
    fd = _fd(lambda z: atk.atac_objective(z, y, tiny.encoder, tiny.head, params, cfg)[0], x, v)
    assert np.sum(g * v) == pytest.approx(fd, rel=1e-2)


@pytest.mark.parametrize("strategy", ["lure", "avoid"])
def test_ttc_objective_gradient(tiny, strategy):
    x, y = tiny.task.images[:3], (tiny.task.labels[:3] + 1) % tiny.head.k
    cfg = AdaptiveConfig(strategy=strategy, gate_temp=5.0)
    ttc = TtcParams(epsilon_ttc=2 / 255, eta=1 / 255, epsilon_tau=2 / 255)
    _, g = atk.ttc_objective(x, y, tiny.encoder, tiny.head, ttc, cfg, _streams(3))
    v = np.random.default_rng(2).standard_normal(x.shape)
    fd = _fd(lambda z: atk.ttc_objective(z, y, tiny.encoder, tiny.head, ttc, cfg, _streams(3))[0], x, v, h=1e-7)
    assert np.sum(g * v) == pytest.approx(fd, rel=1e-2)
