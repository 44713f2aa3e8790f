"""Command-line driver: data generation, embedding export, evaluation, sweeps."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment, config, harness
from .config import ATTACKS, DEFENSES, RunConfig
from .data import (
    EMB_VERSION,
    EmbeddingStore,
    build_head,
    gen_task,
    read_images,
    read_labels,
    read_store,
    write_images,
    write_labels,
    write_store,
)
from .defense import atac_from_store
from .encoders import ImageEncoder, StoreEncoder
from .errors import AtacError
from .head import ZeroShotHead

FORMATS = {"report": config.FORMAT_VERSION, "EMB1": EMB_VERSION, "IMG1": 1}


class InvariantViolation(AtacError):
    """A report failed one of its own consistency checks."""


# --------------------------------------------------------------------------
# Config assembly


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _geometry(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.lower().replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("geometry must be C,H,W")
    return tuple(parts)


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if "config" in doc and "formats" in doc:
            # an emitted manifest: replay its config and seed
            seed = doc.get("seed")
            doc = doc["config"]
            if seed is not None:
                doc["seeds"] = [seed]
        cfg = config.from_dict(doc)
    named = {
        "k": "task.k",
        "per_class": "task.per_class",
        "geometry": "task.geometry",
        "noise": "task.noise_sigma",
        "tau_star": "atac.tau_star",
        "alpha": "atac.alpha",
        "suite": "atac.suite",
        "epsilon": "pgd.epsilon",
        "defense": "defense",
        "attack": "attack",
        "seeds": "seeds",
    }
    for attr, key in named.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg = config.override(cfg, key, tuple(value) if isinstance(value, list) else value)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        value = _parse_value(value)
        cfg = config.override(cfg, key, tuple(value) if isinstance(value, list) else value)
    return config.from_dict(cfg.to_dict())


def manifest(cfg: RunConfig, seed: int | None = None) -> dict:
    return {"config": cfg.to_dict(), "seed": seed, "formats": FORMATS, "digest": cfg.digest()}


# --------------------------------------------------------------------------
# Report checks


def check_report(report: harness.EvalReport, n: int, cfg: RunConfig) -> None:
    problems = []
    for name in ("clean_accuracy", "robust_accuracy"):
        if not 0.0 <= getattr(report, name) <= 1.0:
            problems.append(f"{name} outside [0, 1]")
    if report.defense == "atac":
        if len(report.tau_clean) != n or len(report.tau_adv) != n:
            problems.append("tau lists do not cover every sample")
        if not augment.suite(cfg.atac.suite).is_random and report.encoder_calls_per_sample != len(augment.suite(cfg.atac.suite)) + 1:
            problems.append("ATAC encoder calls differ from n + 1")
    if report.defense in ("none", "tte") and report.encoder_calls_per_sample != round(report.encoder_calls_per_sample):
        problems.append("deterministic defense made a fractional number of encoder calls")
    if problems:
        raise InvariantViolation("; ".join(problems))


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    seed = args.seed
    task = gen_task(cfg.task, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "images.img1", task.images)
    write_images(out / "prototypes.img1", task.prototypes)
    write_labels(out / "labels.csv", task.sample_ids, task.labels)
    _dump(out / "manifest.json", manifest(cfg, seed))
    print(f"wrote {len(task.labels)} samples ({cfg.task.k} classes) to {out}")
    return 0


def _encoder(cfg: RunConfig, geometry) -> ImageEncoder:
    return ImageEncoder(cfg.encoder.build(geometry))


def cmd_export(args) -> int:
    cfg = build_config(args)
    if args.encoder:
        cfg = config.override(cfg, "encoder.architecture", args.encoder)
    data = Path(args.data)
    images = read_images(data / "images.img1")
    ids, _ = read_labels(data / "labels.csv")
    s = augment.suite(args.suite or cfg.atac.suite)
    if s.is_random:
        raise SystemExit("export needs a deterministic suite")
    enc = _encoder(cfg, images.shape[1:])
    store = EmbeddingStore(enc.dim)
    for sid, f in zip(ids, enc.embed(images)):
        store.add(sid, "orig", f)
    for vid, op in zip(s.view_ids(), augment.resolve_suite(s, images.shape, None)):
        for sid, f in zip(ids, enc.embed(op.forward(images))):
            store.add(sid, vid, f)
    write_store(args.out, store)
    print(f"wrote {len(store)} records to {args.out}")
    protos = data / "prototypes.img1"
    if protos.exists():
        head = build_head(enc, read_images(protos), cfg.temperature)
        classes = EmbeddingStore(enc.dim)
        for i, t in enumerate(head.class_embeddings):
            classes.add(i, "class", t)
        write_store(args.head or f"{args.out}.head", classes)
    return 0


def _eval_seed(cfg: RunConfig, seed: int, defense: str, attack: str):
    exp = harness.build_experiment(cfg, seed)
    report = harness.evaluate(exp, defense, attack, harness.AttackCache())
    check_report(report, len(exp.task.labels), cfg)
    return report


def _map_seeds(fn, cfg, seeds, jobs, *rest):
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, [cfg] * len(seeds), seeds, *[[r] * len(seeds) for r in rest]))
    return [fn(cfg, s, *rest) for s in seeds]


def _store_eval(args, cfg: RunConfig) -> int:
    store = read_store(args.store)
    ids, labels = read_labels(args.labels)
    classes = read_store(args.head or f"{args.store}.head")
    rows = [classes.records[key] for key in sorted(classes.records)]
    head = ZeroShotHead(np.stack([r / np.linalg.norm(r.astype(np.float64)) for r in rows]), cfg.temperature)
    enc = StoreEncoder(store)
    params = cfg.atac.params()
    if cfg.defense == "atac":
        results = [atac_from_store(enc, sid, head, params) for sid in ids]
        preds = np.array([r.prediction.label_index for r in results])
        taus = [r.outcome.tau for r in results]
    elif cfg.defense == "none":
        f = np.stack([enc.encode_key(sid, "orig").embedding for sid in ids])
        preds, taus = np.argmax(f @ head.class_embeddings.T, axis=1), []
    else:
        raise SystemExit("store-backed evaluation supports --defense none or atac")
    doc = {
        "defense": cfg.defense,
        "clean_accuracy": float(np.mean(preds == labels)),
        "predictions": preds.tolist(),
        "tau": taus,
        "encoder_calls_per_sample": enc.calls / len(ids),
        "manifest": manifest(cfg),
    }
    text = json.dumps(harness._fmt(doc), sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "store_report.json").write_text(text)
    print(f"store {cfg.defense}: accuracy {doc['clean_accuracy']:.4f} over {len(ids)} samples")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if args.store:
        if not args.labels:
            raise SystemExit("--store needs --labels")
        return _store_eval(args, cfg)
    try:
        reports = _map_seeds(_eval_seed, cfg, list(cfg.seeds), args.jobs, cfg.defense, cfg.attack)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else None
    for r in reports:
        print(f"seed {r.seed}: {r.defense}/{r.attack} clean {r.clean_accuracy:.4f} robust {r.robust_accuracy:.4f}")
        if out is not None:
            run = out / f"seed{r.seed}-{cfg.digest()}"
            run.mkdir(parents=True, exist_ok=True)
            (run / "report.json").write_text(r.dumps())
            _dump(run / "manifest.json", manifest(cfg, r.seed))
            _dump(run / "timing.json", {"wall_seconds": r.wall_seconds})
    if len(reports) > 1:
        rob = np.array([r.robust_accuracy for r in reports])
        print(f"robust mean {rob.mean():.4f} std {rob.std():.4f}")
    return 0


def _sweep_seed(cfg, seed, parameter, grid, attack):
    exp = harness.build_experiment(cfg, seed)
    return [(seed, p.value, p.clean_accuracy, p.robust_accuracy) for p in harness.sweep(exp, parameter, grid, attack)]


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    grid = _floats(args.grid)
    if not grid:
        print("usage error: --grid must name at least one value", file=sys.stderr)
        return 2
    rows = _map_seeds(_sweep_seed, cfg, list(cfg.seeds), args.jobs, args.parameter, grid, cfg.attack)
    _emit(args.out, ["value", "clean", "robust"], rows)
    return 0


def _roc_seed(cfg, seed, attack):
    exp = harness.build_experiment(cfg, seed)
    r = harness.evaluate(exp, "atac", attack)
    return seed, r.tau_clean, r.tau_adv


def cmd_roc(args) -> int:
    cfg = build_config(args)
    rows = []
    for seed, clean, adv in _map_seeds(_roc_seed, cfg, list(cfg.seeds), args.jobs, cfg.attack):
        print(f"seed {seed}: auc {harness.roc_auc(clean, adv):.6f}", file=sys.stderr)
        rows.append([(seed, t, fpr, tpr) for t, fpr, tpr in harness.roc_curve(clean, adv)])
    _emit(args.out, ["threshold", "fpr", "tpr"], rows)
    return 0


def _ablate_seed(cfg, seed, names, attack):
    exp = harness.build_experiment(cfg, seed)
    table = harness.ablate_suites(exp, names, attack)
    return [(seed, name, c, r) for name, (c, r) in table.items()]


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    names = [n for n in args.suites.split(",") if n]
    for n in names:
        augment.suite(n)
    rows = _map_seeds(_ablate_seed, cfg, list(cfg.seeds), args.jobs, names, cfg.attack)
    _emit(args.out, ["suite", "clean", "robust"], rows)
    return 0


# --------------------------------------------------------------------------
# Output helpers


def _dump(path: Path, obj) -> None:
    # full float repr: a manifest must replay to the same config digest
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _emit(path, header, blocks) -> None:
    """Write per-seed row blocks as CSV; a leading seed column appears only for several seeds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    multi = len(blocks) > 1
    w.writerow(["seed", *header] if multi else header)
    for row in (r if multi else r[1:] for block in blocks for r in block):
        w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    if path:
        Path(path).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


# --------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser, seeds: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field (dotted key)")
    if seeds:
        p.add_argument("--seeds", type=_ints, help="comma-separated evaluation seeds")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--tau-star", dest="tau_star", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atac", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic task as IMG1 tensors and labels")
    _common(p, seeds=False)
    p.add_argument("--k", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--geometry", type=_geometry)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-embeddings", help="encode originals and suite views into an EMB1 store")
    _common(p, seeds=False)
    p.add_argument("--encoder", choices=("linear", "mlp1"))
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--suite")
    p.add_argument("--out", required=True)
    p.add_argument("--head", help="class-embedding store (default: OUT.head)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="clean and robust accuracy of one defense under one attack")
    _common(p)
    p.add_argument("--defense", choices=DEFENSES)
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--suite")
    p.add_argument("--store", help="evaluate from an EMB1 store instead of the encoder")
    p.add_argument("--labels", help="labels file for --store")
    p.add_argument("--head", help="class-embedding store for --store (default: STORE.head)")
    p.add_argument("--out", help="run directory root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ATAC accuracy across a grid of tau_star or alpha")
    _common(p)
    p.add_argument("--parameter", choices=("tau_star", "alpha"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("roc", help="ROC points of the consistency score")
    _common(p)
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("ablate-augs", help="ATAC accuracy per augmentation suite")
    _common(p)
    p.add_argument("--suites", default="default,asymmetric,random,color,more")
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        return args.func(args)
    except (AtacError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, InvariantViolation) else 1


if __name__ == "__main__":
    sys.exit(main())
