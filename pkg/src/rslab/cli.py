"""Command-line pipelines: data generation, training, attacks, recording,
comparison, and full experiment families.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical failure,
5 validation failure. Errors print machine-readable JSON on stderr.
Every command refuses to overwrite an existing non-empty --out unless
--force is passed, and a single --seed determines every output byte.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import nets
from .activations import Condition, read_dump, record_activations, write_dump
from .errors import ConfigError, NumericalError, RslabError, ValidationError
from .experiments import ExperimentSpec, run_experiment
from .nets import Batch
from .ppm import write_heatmap
from .simmetrics import MetricKind, crosslayer_matrix
from .threats import ThreatModel, evaluate_accuracy, generate
from .training import (
    DatasetSpec,
    TrainingConfig,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    train,
)

SCHEMA_VERSION = 1


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version}")
    return doc


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _check_out(path: str, force: bool) -> None:
    if os.path.isfile(path) and not force:
        raise ConfigError(f"output {path} exists; pass --force to overwrite")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force")


def _threat_from_args(args) -> ThreatModel:
    return ThreatModel(args.threat, args.eps, args.steps)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    _check_out(args.out, args.force)
    if args.spec:
        doc = _load_json(args.spec)
        _reject_unknown(doc, {"schema_version", "dataset"}, args.spec)
        spec = DatasetSpec.from_json(doc.get("dataset", {}))
    else:
        spec = DatasetSpec()
    data = make_synthetic_dataset(spec, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_dataset(data, args.out)
    print(json.dumps({
        "out": args.out, "n_train": data.train.n, "n_val": data.val.n,
        "classes": spec.classes, "seed": args.seed,
    }))
    return 0


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    allowed = {"schema_version", "model_id", "arch", "width", "classes", "data", "training"}
    _reject_unknown(doc, allowed, args.config)
    _check_out(args.out, args.force)
    config = TrainingConfig.from_json(doc.get("training", {}))
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    data_path = args.data or doc.get("data")
    if not data_path:
        raise ConfigError("dataset path missing: give --data or a 'data' key")
    data = load_dataset(data_path)
    net = nets.make_network(
        doc.get("arch", "miniresnet"),
        input_shape=data.train.inputs.shape[1:],
        classes=data.spec.classes,
        width_factor=doc.get("width", 1),
        seed=config.seed,
    )
    model_id = doc.get("model_id", "")
    _, trace = train(net, data, config, out_dir=args.out, model_id=model_id)
    last = trace.entries[-1]
    print(json.dumps({
        "out": args.out, "epochs": last.epoch, "benign_acc": last.benign_acc,
        "robust_acc": last.robust_acc,
    }))
    return 0


def cmd_attack(args) -> int:
    _check_out(args.out, args.force)
    net = nets.load_checkpoint(args.model)
    data = load_dataset(args.data)
    sub = data.val
    if args.limit:
        sub = Batch(sub.inputs[: args.limit], sub.labels[: args.limit])
    threat = _threat_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    benign, robust = evaluate_accuracy(net, sub, threat, seed=args.seed)
    adv = generate(net, sub, threat, seed=args.seed)
    cond = Condition.adversarial(threat.kind, threat.epsilon)
    aset = record_activations(
        net, Batch(adv.perturbed, sub.labels), cond,
        model_id=os.path.basename(args.model), seed=args.seed,
    )
    write_dump(aset, os.path.join(args.out, "adversarial.rsam"))
    summary = {
        "benign_acc": benign, "robust_acc": robust,
        "threat": threat.to_json(), "n": sub.n,
        "flipped": int(adv.success_mask.sum()),
    }
    with open(os.path.join(args.out, "accuracy.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(summary))
    return 0


def cmd_record(args) -> int:
    _check_out(args.out, args.force)
    net = nets.load_checkpoint(args.model)
    data = load_dataset(args.data)
    sub = data.val
    if args.limit:
        sub = Batch(sub.inputs[: args.limit], sub.labels[: args.limit])
    if args.condition == "benign":
        cond = Condition.benign()
    else:
        if args.threat is None or args.eps is None:
            raise ConfigError("adversarial condition needs --threat and --eps")
        cond = Condition.adversarial(args.threat, args.eps)
    aset = record_activations(
        net, sub, cond, model_id=os.path.basename(args.model), seed=args.seed
    )
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_dump(aset, args.out)
    print(json.dumps({"out": args.out, "layers": len(aset.records), "n": aset.n}))
    return 0


def cmd_compare(args) -> int:
    _check_out(args.out, args.force)
    a = read_dump(args.a)
    b = a if os.path.abspath(args.b) == os.path.abspath(args.a) else read_dump(args.b)
    if args.metric == "online_cka":
        metric = MetricKind.online_cka(batch=args.batch, passes=args.passes, seed=args.seed)
    elif args.metric == "svcca":
        metric = MetricKind.svcca()
    else:
        metric = MetricKind(args.metric)
    sm = crosslayer_matrix(a, b, metric)
    os.makedirs(args.out, exist_ok=True)
    sm.save(os.path.join(args.out, "matrix_compare"))
    clamped = write_heatmap(
        os.path.join(args.out, "heatmap_compare.ppm"), sm.values, *metric.value_range
    )
    diag = [float(sm.values[i, i]) for i in range(min(*sm.values.shape))]
    summary = {
        "metric": metric.to_json(),
        "mean": float(sm.values.mean()),
        "mean_diagonal": float(np.mean(diag)) if diag else None,
        "degenerate_cells": int(sm.degenerate.sum()) if sm.degenerate is not None else 0,
        "clamped": clamped,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(summary))
    return 0


def cmd_experiment(args) -> int:
    doc = _load_json(args.spec)
    _reject_unknown(doc, {"schema_version", "experiment"}, args.spec)
    spec = ExperimentSpec.from_json(doc.get("experiment", {}))
    _check_out(args.out, args.force)
    run_experiment(spec, args.out)
    with open(os.path.join(args.out, "summary.json")) as fh:
        print(fh.read().strip())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rslab",
        description="train desk-scale robust/non-robust nets and compare their representations",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    g.add_argument("--spec", help="JSON file with a 'dataset' section")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a network per a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset .npz (overrides config)")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="attack a checkpoint and dump activations")
    a.add_argument("--model", required=True, help="RSCK checkpoint")
    a.add_argument("--threat", required=True, choices=("linf", "l2", "jpeg", "gabor", "snow"))
    a.add_argument("--eps", type=float, required=True)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--data", required=True)
    a.add_argument("--limit", type=int, default=0, help="attack only the first N val points")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_attack)

    r = sub.add_parser("record", help="record activations of a checkpoint over a dataset")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--condition", default="benign", choices=("benign", "adversarial"))
    r.add_argument("--threat", choices=("linf", "l2", "jpeg", "gabor", "snow"))
    r.add_argument("--eps", type=float)
    r.add_argument("--limit", type=int, default=0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output .rsam path")
    r.add_argument("--force", action="store_true")
    r.set_defaults(fn=cmd_record)

    c = sub.add_parser("compare", help="cross-layer similarity between two dumps")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument(
        "--metric", default="linear_cka",
        choices=("linear_cka", "online_cka", "mean_cca", "svcca", "procrustes"),
    )
    c.add_argument("--batch", type=int, default=1024, help="online_cka batch size")
    c.add_argument("--passes", type=int, default=3, help="online_cka passes")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_compare)

    e = sub.add_parser("experiment", help="run a full experiment family")
    e.add_argument("--spec", required=True, help="JSON file with an 'experiment' section")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(2, "config", str(exc))
    except OSError as exc:
        return _fail(3, "io", str(exc))
    except NumericalError as exc:
        return _fail(4, "numerical", str(exc))
    except ValidationError as exc:
        return _fail(5, "validation", str(exc))
    except RslabError as exc:
        return _fail(5, "validation", str(exc))


if __name__ == "__main__":
    sys.exit(main())
