"""Command-line interface: ``hcr generate | train | diagnose | verify-theory``.

Every command writes into one output directory (``--out``, else the
``HCR_OUT_DIR`` environment variable, else ``./hcr-out``) and records a
``manifest-<command>.json`` before any long computation starts.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    AugmentSpec,
    NoiseSpec,
    apply_noise,
    load_csv_dataset,
    make_shell_dataset,
    make_sphere_blobs,
    mask_labels,
)
from .diffnet import NetworkConfig, forward, load_checkpoint, save_checkpoint
from .exceptions import ConfigError, HCRError
from .geometry import project_to_sphere
from .losses import GRADIENT_FLOWS, UNSUPERVISED_KINDS, HcrConfig, SimilarityConfig
from .theory import CHECKS, ksg_mutual_information, run_checks
from .trainer import TrainConfig, distance_consistency, metrics_to_csv, train

logger = logging.getLogger("hcr")

OUT_ENV = "HCR_OUT_DIR"
GENERATORS = ("blobs", "shells")

TRAIN_DEFAULTS = {
    "label_column": "label",
    "label_proportion": 1.0,
    "noise_kind": "none",
    "noise_rate": 0.0,
    "hcr_weight": 1.0,
    "grad_flow": "classifier_only",
    "sigma": 2 ** -0.5,
    "unsup": "info_nce",
    "lambda_u": 1.0,
    "tau": 0.07,
    "lr": 0.02,
    "momentum": 0.9,
    "batch_size": 64,
    "epochs": 50,
    "seed": 0,
    "precision": "float64",
    "encoder_widths": [64],
    "feature_dim": 32,
    "projection_dim": 16,
    "activation": "tanh",
    "jitter_sigma": 0.1,
    "scale_range": [0.8, 1.25],
}


class UsageError(Exception):
    pass


def _out_dir(args):
    out = Path(args.out or os.environ.get(OUT_ENV) or "hcr-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out, command, argv, config, seeds, artifacts, inputs=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "inputs": inputs or {},
        "tool": "hcr",
        "version": __version__,
    }
    _write_json(out / f"manifest-{command}.json", manifest)
    return manifest


def cmd_generate(args, argv):
    out = _out_dir(args)
    path = out / args.output
    config = {
        "kind": args.kind, "classes": args.classes, "dim": args.dim,
        "per_class": args.per_class, "concentration": args.concentration,
    }
    _write_manifest(out, "generate", argv, config, {"seed": args.seed}, {"dataset": path})
    if args.kind == "blobs":
        ds = make_sphere_blobs(args.classes, args.dim, args.per_class,
                               args.concentration, args.seed)
    else:
        ds = make_shell_dataset(args.classes, args.dim, args.per_class, args.seed)
    ds.to_csv(path)
    print(f"wrote {len(ds)} rows to {path}")
    return 0


def _resolve_train_config(args):
    resolved = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(
                f"{args.config}: invalid JSON at line {exc.lineno}, column {exc.colno}"
            ) from None
        unknown = sorted(set(from_file) - set(TRAIN_DEFAULTS))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        resolved.update(from_file)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _build_train_config(r, input_dim, num_classes):
    sim = SimilarityConfig(sigma=r["sigma"])
    return TrainConfig(
        network=NetworkConfig(
            input_dim=input_dim,
            encoder_widths=tuple(r["encoder_widths"]),
            feature_dim=r["feature_dim"],
            num_classes=num_classes,
            projection_dim=r["projection_dim"],
            activation=r["activation"],
        ),
        hcr=HcrConfig(similarity_g=sim, similarity_h=sim,
                      gradient_flow=r["grad_flow"], weight=r["hcr_weight"]),
        tau=r["tau"],
        lambda_u=r["lambda_u"],
        unsupervised_kind=r["unsup"],
        learning_rate=r["lr"],
        momentum=r["momentum"],
        batch_size=r["batch_size"],
        epochs=r["epochs"],
        seed=r["seed"],
        precision=r["precision"],
        augment=AugmentSpec(r["jitter_sigma"], tuple(r["scale_range"])),
    )


def _mi_between_heads(params, x):
    rec = forward(params, x)
    return ksg_mutual_information(project_to_sphere(rec.logits), rec.projections).value


def cmd_train(args, argv):
    r = _resolve_train_config(args)
    out = _out_dir(args)
    ds = load_csv_dataset(args.data, r["label_column"])
    test_ds = load_csv_dataset(args.test_data, r["label_column"]) if args.test_data else None

    if r["noise_kind"] != "none" and r["noise_rate"] > 0:
        ds = apply_noise(ds, NoiseSpec(r["noise_kind"], r["noise_rate"], r["seed"]))
    if r["label_proportion"] < 1.0:
        ds = mask_labels(ds, r["label_proportion"], r["seed"])

    num_classes = max(ds.num_classes, test_ds.num_classes if test_ds else 0)
    try:
        cfg = _build_train_config(r, ds.features.shape[1], num_classes)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    artifacts = {
        "metrics": out / "metrics.csv",
        "checkpoint": out / "checkpoint.json",
        "summary": out / "summary.json",
    }
    inputs = {"data": {"path": str(args.data), "sha256": _sha256(args.data)}}
    if args.test_data:
        inputs["test_data"] = {"path": str(args.test_data), "sha256": _sha256(args.test_data)}
    config = dict(r, train_config=cfg.to_dict(), n_examples=len(ds),
                  n_labeled=ds.n_labeled)
    _write_manifest(out, "train", argv, config, {"seed": r["seed"]}, artifacts, inputs)

    eval_ds = test_ds if test_ds is not None else ds
    diag = eval_ds.features[: cfg.diagnostic_size]
    records, params = train(cfg, ds, eval_ds)
    mi_after = _mi_between_heads(params, diag) if len(diag) > 5 else float("nan")

    metrics_to_csv(records, artifacts["metrics"])
    save_checkpoint(params, artifacts["checkpoint"])
    summary = {
        "epochs": len(records),
        "n_labeled": ds.n_labeled,
        "final": None if not records else {
            k: getattr(records[-1], k) for k in
            ("loss_total", "train_acc", "test_acc", "ks_statistic")
        },
        # diagnostic only, no claim attached
        "mi_logits_projections": mi_after,
    }
    _write_json(artifacts["summary"], summary)
    if records:
        last = records[-1]
        print(f"epochs={len(records)} test_acc={last.test_acc:.4f} ks={last.ks_statistic:.4f}")
    return 0


def cmd_diagnose(args, argv):
    if args.batch_size < 8:
        raise UsageError("--batch-size must be at least 8")
    for p in (args.checkpoint, args.data):
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")
    out = _out_dir(args)
    artifacts = {"hist_g": out / "hist_g.csv", "hist_h": out / "hist_h.csv",
                 "report": out / "diagnose.json"}
    inputs = {"checkpoint": {"path": str(args.checkpoint), "sha256": _sha256(args.checkpoint)},
              "data": {"path": str(args.data), "sha256": _sha256(args.data)}}
    config = {"batch_size": args.batch_size, "offset": args.offset, "bins": args.bins}
    _write_manifest(out, "diagnose", argv, config, {}, artifacts, inputs)

    params = load_checkpoint(args.checkpoint)
    ds = load_csv_dataset(args.data, args.label_column)
    batch = ds.features[args.offset: args.offset + args.batch_size]
    if batch.shape[0] < 8:
        raise UsageError(f"only {batch.shape[0]} rows available after --offset")
    result = distance_consistency(params, batch, bins=args.bins)
    result.hist_g.to_csv(artifacts["hist_g"])
    result.hist_h.to_csv(artifacts["hist_h"])
    _write_json(artifacts["report"], {"ks_statistic": result.ks_statistic,
                                      "batch_rows": int(batch.shape[0])})
    print(f"ks={result.ks_statistic:.17g}")
    return 0


def cmd_verify_theory(args, argv):
    out = _out_dir(args)
    only = tuple(dict.fromkeys(args.only)) if args.only else CHECKS
    artifacts = {name: out / f"theory-{name}.json" for name in only}
    config = {"only": list(only), "dim": args.dim, "n_points": args.n_points,
              "target_dim": args.target_dim, "n_samples": args.n_samples, "k": args.k}
    _write_manifest(out, "verify-theory", argv, config, {"seeds": args.seeds}, artifacts)
    reports = run_checks(only, seeds=args.seeds, dim=args.dim, n_points=args.n_points,
                         target_dim=args.target_dim, n_samples=args.n_samples, k=args.k)
    for name, report in reports.items():
        _write_json(artifacts[name], report)
        print(f"{name}: {'PASS' if report['passed'] else 'FAIL'}")
    return 0 if all(r["passed"] for r in reports.values()) else 1


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_pair(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return [lo, hi]


def build_parser():
    parser = argparse.ArgumentParser(prog="hcr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_out(p):
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./hcr-out)")

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    add_out(g)
    g.add_argument("--kind", required=True, choices=GENERATORS)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--per-class", type=int, default=250)
    g.add_argument("--concentration", type=float, default=25.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", default="dataset.csv", help="file name inside --out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset CSV")
    add_out(t)
    t.add_argument("--data", required=True)
    t.add_argument("--test-data")
    t.add_argument("--config", help="JSON file; explicit flags override its values")
    t.add_argument("--label-column")
    t.add_argument("--label-proportion", type=float)
    t.add_argument("--noise-kind", choices=("none", "symmetric", "asymmetric", "instance"))
    t.add_argument("--noise-rate", type=float)
    t.add_argument("--hcr-weight", type=float)
    t.add_argument("--grad-flow", choices=GRADIENT_FLOWS)
    t.add_argument("--sigma", type=float, help="similarity kernel width")
    t.add_argument("--unsup", choices=UNSUPERVISED_KINDS)
    t.add_argument("--lambda-u", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("float64", "float32"))
    t.add_argument("--encoder-widths", type=_int_list)
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--projection-dim", type=int)
    t.add_argument("--activation", choices=("relu", "tanh"))
    t.add_argument("--jitter-sigma", type=float)
    t.add_argument("--scale-range", type=_float_pair)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("diagnose", help="distance-distribution histograms and KS")
    add_out(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--label-column", default="label")
    d.add_argument("--batch-size", type=int, default=256)
    d.add_argument("--offset", type=int, default=0)
    d.add_argument("--bins", type=int, default=50)
    d.set_defaults(func=cmd_diagnose)

    v = sub.add_parser("verify-theory", help="Monte-Carlo checks with frozen bounds")
    add_out(v)
    v.add_argument("--only", action="append", choices=CHECKS)
    v.add_argument("--seeds", type=int, help="number of seeds (JL default 20, others 1)")
    v.add_argument("--dim", type=int, default=512)
    v.add_argument("--n-points", type=int, default=2000)
    v.add_argument("--target-dim", type=int, default=64)
    v.add_argument("--n-samples", type=int, default=2000)
    v.add_argument("--k", type=int, default=5)
    v.set_defaults(func=cmd_verify_theory)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.exit(2, f"hcr {args.command}: error: {exc}\n")
    except (HCRError, FileNotFoundError, ValueError) as exc:
        print(f"hcr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
