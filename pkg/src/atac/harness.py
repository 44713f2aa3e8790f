"""Clean/robust evaluation, consistency-score ROC, sweeps and suite ablations."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import attacks as atk
from .baselines import tte_predict_batch, ttc_defend_batch
from .config import RunConfig
from .data import SyntheticTask, build_head, gen_task
from .defense import AtacParams, atac_predict_batch
from .encoders import ImageEncoder
from .head import ZeroShotHead, predict_labels
from .prng import PrngStream
from . import augment


@dataclass
class Experiment:
    """Task, encoder and head for one evaluation seed."""

    config: RunConfig
    seed: int
    task: SyntheticTask
    encoder: ImageEncoder
    head: ZeroShotHead


def build_experiment(cfg: RunConfig, seed: int) -> Experiment:
    task = gen_task(cfg.task, seed)
    encoder = ImageEncoder(cfg.encoder.build(cfg.task.geometry))
    head = build_head(encoder, task.prototypes, cfg.temperature)
    encoder.calls = 0
    return Experiment(cfg, seed, task, encoder, head)


def streams(seed: int, sample_ids, purpose: str) -> list[PrngStream]:
    return [PrngStream.derive(seed, int(i), purpose) for i in sample_ids]


# --------------------------------------------------------------------------
# Attacks (cached; the standard attacks do not depend on the defense)


class AttackCache:
    def __init__(self):
        self._store: dict = {}
        self.hits = 0

    def get(self, key, compute):
        if key in self._store:
            self.hits += 1
            return self._store[key]
        value = compute()
        self._store[key] = value
        return value


def attack_key(cfg: RunConfig, attack: str, seed: int):
    key = [attack, seed, cfg.task, cfg.encoder, cfg.temperature, cfg.pgd]
    if attack.startswith("adaptive"):
        key.append(cfg.adaptive)
        key.append(cfg.atac if "atac" in attack else cfg.adaptive_ttc)
    return tuple(repr(k) for k in key)


def run_attack(exp: Experiment, attack: str, x=None, y=None, ids=None) -> np.ndarray:
    cfg = exp.config
    t = exp.task
    x = t.images if x is None else x
    y = t.labels if y is None else y
    ids = t.sample_ids if ids is None else ids
    enc, head = exp.encoder, exp.head
    s = streams(exp.seed, ids, "attack")
    if attack == "none":
        return x.copy()
    if attack == "pgd":
        return atk.pgd_untargeted(x, y, enc, head, cfg.pgd, s).x_adv
    if attack == "pgd-large":
        return atk.pgd_large_eps(x, y, enc, head, cfg.pgd, s).x_adv
    if attack == "pgd-early":
        return atk.pgd_early_stop(x, y, enc, head, cfg.pgd, s).x_adv
    if attack == "pgd-unsup":
        return atk.pgd_unsupervised(x, enc, cfg.pgd, s).x_adv
    if attack == "pgd-targeted":
        ts = streams(exp.seed, ids, "target")
        return atk.pgd_targeted(x, y, enc, head, cfg.pgd, s, target_streams=ts).x_adv
    strategy = attack.rsplit("-", 1)[1]
    acfg = cfg.adaptive.config(cfg.pgd, strategy)
    if attack.startswith("adaptive-atac"):
        return atk.adaptive_atac_attack(x, y, enc, head, cfg.atac.params(), acfg, s).x_adv
    if attack.startswith("adaptive-ttc"):
        return atk.adaptive_ttc_attack(x, y, enc, head, cfg.adaptive_ttc, acfg, s).x_adv
    raise ValueError(f"unknown attack {attack!r}")


# --------------------------------------------------------------------------
# Defenses


@dataclass
class DefenseOutput:
    labels: np.ndarray
    tau: np.ndarray | None = None
    fired: np.ndarray | None = None


def run_defense(exp: Experiment, defense: str, x: np.ndarray, ids=None, atac: AtacParams | None = None) -> DefenseOutput:
    cfg = exp.config
    ids = exp.task.sample_ids if ids is None else ids
    enc, head = exp.encoder, exp.head
    if defense == "none":
        return DefenseOutput(predict_labels(enc.embed(x), head))
    if defense == "atac":
        params = atac or cfg.atac.params()
        s = streams(exp.seed, ids, "defense") if params.suite.is_random else None
        labels, tau, fired = atac_predict_batch(x, enc, head, params, s)
        return DefenseOutput(labels, tau, fired)
    if defense == "tte":
        suite = augment.suite(cfg.tte_suite)
        s = streams(exp.seed, ids, "defense") if suite.is_random else None
        return DefenseOutput(tte_predict_batch(x, enc, head, suite, s))
    if defense == "ttc":
        res = ttc_defend_batch(x, enc, cfg.ttc, streams(exp.seed, ids, "defense"))
        return DefenseOutput(predict_labels(enc.embed(res.x_defended), head), res.tau_hat, res.fired)
    raise ValueError(f"unknown defense {defense!r}")


# --------------------------------------------------------------------------
# Reports


def _fmt(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {str(k): _fmt(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_fmt(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return _fmt(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


@dataclass
class EvalReport:
    defense: str
    attack: str
    seed: int
    clean_accuracy: float
    robust_accuracy: float
    undefended_clean_accuracy: float
    undefended_robust_accuracy: float
    tau_clean: list = field(default_factory=list)
    tau_adv: list = field(default_factory=list)
    gate_fire_rate_clean: float | None = None
    gate_fire_rate_adv: float | None = None
    encoder_calls_per_sample: float = 0.0
    attack_encoder_calls_per_sample: float = 0.0
    wall_seconds: float = 0.0
    config: dict = field(default_factory=dict)
    clean_predictions: list = field(default_factory=list, repr=False)
    adv_predictions: list = field(default_factory=list, repr=False)

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_seconds")
        return _fmt(d)

    def dumps(self, timing: bool = False) -> str:
        """Sorted keys and 9 significant digits; identical runs give identical text."""
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=1) + "\n"


def evaluate(exp: Experiment, defense: str | None = None, attack: str | None = None, cache: AttackCache | None = None, atac: AtacParams | None = None) -> EvalReport:
    cfg = exp.config
    defense = defense or cfg.defense
    attack = attack or cfg.attack
    t0 = time.perf_counter()
    x, y = exp.task.images, exp.task.labels
    enc = exp.encoder

    calls0 = enc.calls

    def compute():
        return run_attack(exp, attack)

    x_adv = cache.get(attack_key(cfg, attack, exp.seed), compute) if cache else compute()
    attack_calls = (enc.calls - calls0) / len(x)

    base_clean = predict_labels(enc.embed(x), exp.head)
    base_adv = predict_labels(enc.embed(x_adv), exp.head)

    calls0 = enc.calls
    clean = run_defense(exp, defense, x, atac=atac)
    calls = (enc.calls - calls0) / len(x)
    adv = run_defense(exp, defense, x_adv, atac=atac)

    echo = cfg.to_dict()
    echo.update(defense=defense, attack=attack, seed=exp.seed)
    if atac is not None:
        echo["atac"] = dict(tau_star=atac.tau_star, alpha=atac.alpha, suite=atac.suite.name, direction=atac.direction)
    return EvalReport(
        defense=defense,
        attack=attack,
        seed=exp.seed,
        clean_accuracy=float(np.mean(clean.labels == y)),
        robust_accuracy=float(np.mean(adv.labels == y)),
        undefended_clean_accuracy=float(np.mean(base_clean == y)),
        undefended_robust_accuracy=float(np.mean(base_adv == y)),
        tau_clean=[] if clean.tau is None else clean.tau.tolist(),
        tau_adv=[] if adv.tau is None else adv.tau.tolist(),
        gate_fire_rate_clean=None if clean.fired is None else float(np.mean(clean.fired)),
        gate_fire_rate_adv=None if adv.fired is None else float(np.mean(adv.fired)),
        encoder_calls_per_sample=calls,
        attack_encoder_calls_per_sample=attack_calls,
        wall_seconds=time.perf_counter() - t0,
        config=echo,
        clean_predictions=clean.labels.tolist(),
        adv_predictions=adv.labels.tolist(),
    )


# --------------------------------------------------------------------------
# ROC / AUC


def roc_auc(tau_clean, tau_adv) -> float:
    """AUC of "adversarial iff tau >= threshold" by the Mann-Whitney rank sum.

    Ties between a clean and an adversarial score count one half.
    """
    c = np.asarray(tau_clean, dtype=np.float64)
    a = np.asarray(tau_adv, dtype=np.float64)
    if len(c) == 0 or len(a) == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([a, c]))
    u = ranks[: len(a)].sum() - len(a) * (len(a) + 1) / 2
    return float(u / (len(a) * len(c)))


def roc_curve(tau_clean, tau_adv):
    """``(threshold, fpr, tpr)`` rows: +inf, each distinct score (descending), -inf."""
    c = np.asarray(tau_clean, dtype=np.float64)
    a = np.asarray(tau_adv, dtype=np.float64)
    rows = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(np.concatenate([a, c]))[::-1]:
        rows.append((float(t), float(np.mean(c >= t)), float(np.mean(a >= t))))
    rows.append((float("-inf"), 1.0, 1.0))
    return rows


# --------------------------------------------------------------------------
# Sweeps and ablations


@dataclass
class SweepPoint:
    value: float
    clean_accuracy: float
    robust_accuracy: float
    clean_predictions: np.ndarray = field(repr=False)
    adv_predictions: np.ndarray = field(repr=False)


def sweep(exp: Experiment, parameter: str, grid, attack: str = "pgd", cache: AttackCache | None = None) -> list[SweepPoint]:
    """Evaluate ATAC at each grid value; the attack is computed once and reused."""
    if parameter not in ("tau_star", "alpha"):
        raise ValueError("parameter must be 'tau_star' or 'alpha'")
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    cache = cache or AttackCache()
    base = exp.config.atac.params()
    out = []
    for v in grid:
        params = replace(base, **{parameter: float(v)})
        r = evaluate(exp, "atac", attack, cache, atac=params)
        out.append(SweepPoint(float(v), r.clean_accuracy, r.robust_accuracy, np.array(r.clean_predictions), np.array(r.adv_predictions)))
    return out


def ablate_suites(exp: Experiment, names, attack: str = "pgd", cache: AttackCache | None = None) -> dict:
    """Per-suite ``(clean, robust)`` accuracy of ATAC under one shared attack."""
    cache = cache or AttackCache()
    base = exp.config.atac.params()
    table = {}
    for name in names:
        r = evaluate(exp, "atac", attack, cache, atac=replace(base, suite=augment.suite(name)))
        table[name] = (r.clean_accuracy, r.robust_accuracy)
    return table
