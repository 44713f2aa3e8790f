"""Print every ordering checked by the acceptance suite, per seed."""

import argparse
import json
import time

import numpy as np

from atac.config import RunConfig, override
from atac.harness import AttackCache, ablate_suites, build_experiment, evaluate, roc_auc, sweep


def _get(cfg, dotted):
    for part in dotted.split("."):
        cfg = getattr(cfg, part)
    return cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--skip", nargs="*", default=[])
    ap.add_argument("--set", nargs="*", default=[], help="dotted.key=value overrides")
    args = ap.parse_args()
    cfg = RunConfig()
    for item in args.set:
        key, value = item.split("=")
        cfg = override(cfg, key, json.loads(value))
    for seed in args.seeds:
        t0 = time.perf_counter()
        exp = build_experiment(cfg, seed)
        cache = AttackCache()
        rows = {}
        for d in ("none", "atac", "tte", "ttc"):
            r = evaluate(exp, d, "pgd", cache)
            rows[d] = r
            print(f"seed {seed} {d:5s} pgd clean {r.clean_accuracy:.3f} robust {r.robust_accuracy:.3f}")
        a = rows["atac"]
        print(f"  auc {roc_auc(a.tau_clean, a.tau_adv):.4f} fire clean {a.gate_fire_rate_clean:.3f} adv {a.gate_fire_rate_adv:.3f}")
        if "variants" not in args.skip:
            for atk in ("pgd-large", "pgd-early", "pgd-unsup", "pgd-targeted"):
                r = evaluate(exp, "atac", atk, cache)
                print(f"  atac {atk:14s} robust {r.robust_accuracy:.3f} undefended {r.undefended_robust_accuracy:.3f}")
        if "adaptive" not in args.skip:
            for atk in ("adaptive-atac-lure", "adaptive-atac-avoid"):
                r = evaluate(exp, "atac", atk, cache)
                print(f"  atac {atk:20s} robust {r.robust_accuracy:.3f}")
        if "sweep" not in args.skip:
            for p, g in (("alpha", [3, 5, 7, 10]), ("tau_star", [0.5, 0.7, 0.85, 0.95])):
                pts = sweep(exp, p, g, cache=cache)
                agree = min(np.mean(u.adv_predictions == v.adv_predictions) for u in pts for v in pts)
                print(f"  sweep {p}: " + " ".join(f"{q.value}:{q.clean_accuracy:.3f}/{q.robust_accuracy:.3f}" for q in pts) + f" min-agree {agree:.3f}")
        if "suites" not in args.skip:
            tab = ablate_suites(exp, ["default", "asymmetric", "random", "color", "more"], cache=cache)
            print("  suites " + " ".join(f"{k}:{c:.3f}/{r:.3f}" for k, (c, r) in tab.items()))
        print(f"  {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
