"""Experiment families: cross-layer structure, budget/width grids, benign
vs adversarial divergence, transfer, evolution over epochs, threat grids.

Each runner consumes completed run directories (or in-memory nets), writes
matrix_*.csv / curves_*.csv / summary.json / heatmap_*.ppm into its output
directory, and returns its summary scalars so callers can assert numbers
instead of reading images. Re-running on unchanged inputs is byte-identical.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .activations import Condition, read_dump, record_activations
from .errors import ConfigError, ProbeMismatchError, ShapeError, ValidationError
from .nets import Batch
from .ppm import write_heatmap
from .simmetrics import MetricKind, SimilarityMatrix, block_structure_score, crosslayer_matrix
from .threats import ThreatModel, generate
from .training import EpochTrace, load_run

EXPERIMENT_KINDS = (
    "crosslayer", "grid", "divergence", "transfer", "evolution", "threatgrid",
)


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one experiment family instance."""

    kind: str
    runs: tuple = ()          # run directories (meaning depends on kind)
    labels: tuple = ()        # display names aligned with runs
    metric: MetricKind = field(default_factory=MetricKind.linear_cka)
    condition: str = "benign"  # which probe dump to use: benign | adv
    min_lag: int | None = None
    eps_values: tuple = ()    # grid: epsilon per run
    width_values: tuple = ()  # grid: width per run
    taps: tuple = ()          # evolution: restrict to these layer indices
    threat: ThreatModel | None = None  # transfer: attack to generate
    data_path: str | None = None       # transfer: dataset file

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        if "metric" in d:
            d["metric"] = MetricKind.from_json(d["metric"])
        if "threat" in d and d["threat"] is not None:
            d["threat"] = ThreatModel.from_json(d["threat"])
        for key in ("runs", "labels", "eps_values", "width_values", "taps"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _write_summary(out_dir: str, summary: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_curve(path: str, header: list, rows: list) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def _final_probe(run_dir: str, condition: str):
    _, trace = load_run(run_dir)
    entry = trace.entries[-1]
    path = entry.probe_benign_path if condition == "benign" else entry.probe_adv_path
    if path is None:
        raise ValidationError(f"run {run_dir} has no {condition} probe dump")
    if not os.path.isabs(path) and not os.path.exists(path):
        path = os.path.join(run_dir, path)
    return read_dump(path)


def _default_lag(aset) -> int:
    names = aset.layer_names
    # one residual stage of the miniresnet preset spans 5 taps; fall back to
    # a third of the depth for other nets
    adds = [i for i, n in enumerate(names) if n.endswith("_add")]
    if len(adds) >= 2:
        return adds[1] - adds[0]
    return max(1, len(names) // 3)


def run_crosslayer(spec: ExperimentSpec, out_dir: str):
    """Layer x layer similarity of one model under one condition."""
    if len(spec.runs) != 1:
        raise ConfigError("crosslayer expects exactly one run")
    aset = _final_probe(spec.runs[0], spec.condition)
    sm = crosslayer_matrix(aset, aset, spec.metric)
    lag = spec.min_lag if spec.min_lag is not None else _default_lag(aset)
    score = block_structure_score(sm, lag)
    os.makedirs(out_dir, exist_ok=True)
    sm.save(os.path.join(out_dir, "matrix_crosslayer"))
    warn = write_heatmap(
        os.path.join(out_dir, "heatmap_crosslayer.ppm"), sm.values, *sm.metric.value_range
    )
    _write_summary(out_dir, {
        "kind": "crosslayer",
        "long_range_score": score,
        "min_lag": lag,
        "layers": len(aset.records),
        "clamped": warn,
    })
    return sm, score


def run_grid(spec: ExperimentSpec, out_dir: str):
    """Long-range score per (epsilon, width) cell; missing cells become NaN."""
    eps_values = spec.eps_values or (None,) * len(spec.runs)
    width_values = spec.width_values or (None,) * len(spec.runs)
    if not (len(spec.runs) == len(eps_values) == len(width_values)):
        raise ConfigError("grid needs aligned runs/eps_values/width_values")
    eps_axis = sorted(set(eps_values))
    width_axis = sorted(set(width_values))
    grid = np.full((len(eps_axis), len(width_axis)), np.nan)
    missing = []
    for run, eps, width in zip(spec.runs, eps_values, width_values):
        i = eps_axis.index(eps)
        j = width_axis.index(width)
        try:
            aset = _final_probe(run, spec.condition)
        except (OSError, ValidationError) as exc:
            missing.append({"run": run, "error": str(exc)})
            continue
        sm = crosslayer_matrix(aset, aset, spec.metric)
        lag = spec.min_lag if spec.min_lag is not None else _default_lag(aset)
        grid[i, j] = block_structure_score(sm, lag)
    os.makedirs(out_dir, exist_ok=True)
    _write_curve(
        os.path.join(out_dir, "matrix_grid.csv"),
        ["epsilon\\width"] + [str(w) for w in width_axis],
        [[str(e)] + [f"{v:.12g}" for v in grid[i]] for i, e in enumerate(eps_axis)],
    )
    monotone = {}
    for j, width in enumerate(width_axis):
        col = grid[:, j]
        ok = np.all(np.diff(col[~np.isnan(col)]) >= -0.02)
        monotone[str(width)] = bool(ok)
    _write_summary(out_dir, {
        "kind": "grid",
        "eps_axis": [e for e in eps_axis],
        "width_axis": [w for w in width_axis],
        "scores": [[None if np.isnan(v) else v for v in row] for row in grid],
        "monotone_in_eps": monotone,
        "missing": missing,
    })
    return grid, monotone


def divergence_curve(benign_set, adv_set, metric: MetricKind):
    """Per-layer metric(benign_i, adv_i); the probe must be shared."""
    if benign_set.n != adv_set.n:
        raise ProbeMismatchError("probe sizes differ between conditions")
    if benign_set.layer_names != adv_set.layer_names:
        raise ProbeMismatchError("layer lists differ between conditions")
    dig_b = benign_set.manifest.get("probe_digest")
    dig_a = adv_set.manifest.get("probe_digest")
    if dig_b is not None and dig_a is not None and dig_b != dig_a:
        raise ProbeMismatchError("dumps were recorded over different probes")
    return np.array([
        metric.evaluate(rb.matrix, ra.matrix)
        for rb, ra in zip(benign_set.records, adv_set.records)
    ])


def run_divergence(spec: ExperimentSpec, out_dir: str):
    """Benign-vs-adversarial similarity by depth for one model."""
    if len(spec.runs) != 1:
        raise ConfigError("divergence expects exactly one run")
    benign = _final_probe(spec.runs[0], "benign")
    adv = _final_probe(spec.runs[0], "adv")
    curve = divergence_curve(benign, adv, spec.metric)
    third = max(1, int(np.ceil(len(curve) / 3)))
    summary = {
        "kind": "divergence",
        "first_third_mean": float(curve[:third].mean()),
        "final_layer": float(curve[-1]),
        "layers": benign.layer_names,
    }
    os.makedirs(out_dir, exist_ok=True)
    _write_curve(
        os.path.join(out_dir, "curves_divergence.csv"),
        ["layer", "similarity"],
        [[name, float(v)] for name, v in zip(benign.layer_names, curve)],
    )
    _write_summary(out_dir, summary)
    return curve, summary


def transfer_matrix(models: dict, data: Batch, threat: ThreatModel, seed: int = 0):
    """Robust accuracy of source-generated examples on every target model.

    models: {name: NetworkGraph}. Returns (names, accuracy matrix, curves)
    where curves[(src, tgt)] is the layer-wise similarity between source and
    target activations on the source's adversarial examples.
    """
    names = list(models)
    shapes = {models[n].input_shape for n in names}
    if len(shapes) != 1:
        raise ShapeError("transfer requires a shared input shape")
    acc = np.zeros((len(names), len(names)))
    curves = {}
    metric = MetricKind.linear_cka()
    for i, src in enumerate(names):
        adv = generate(models[src], data, threat, seed=seed)
        adv_batch = Batch(adv.perturbed, data.labels)
        cond = Condition.adversarial(threat.kind, threat.epsilon)
        src_set = record_activations(models[src], adv_batch, cond, model_id=src)
        for j, tgt in enumerate(names):
            preds = nets.predict(models[tgt], adv.perturbed)
            acc[i, j] = float((preds == data.labels).mean())
            tgt_set = record_activations(models[tgt], adv_batch, cond, model_id=tgt)
            curves[(src, tgt)] = np.array([
                metric.evaluate(a.matrix, b.matrix)
                for a, b in zip(src_set.records, tgt_set.records)
            ])
    return names, acc, curves


def run_transfer(spec: ExperimentSpec, out_dir: str):
    """Transfer tournament between the final checkpoints of the given runs."""
    from .training import load_dataset

    if len(spec.runs) < 2:
        raise ConfigError("transfer expects at least two runs")
    if spec.threat is None or spec.data_path is None:
        raise ConfigError("transfer needs a threat and a dataset path")
    labels = spec.labels or tuple(os.path.basename(r.rstrip("/")) for r in spec.runs)
    models = {}
    for label, run in zip(labels, spec.runs):
        _, trace = load_run(run)
        models[label] = nets.load_checkpoint(trace.entries[-1].checkpoint_path)
    data = load_dataset(spec.data_path)
    probe_n = min(256, data.val.n)
    probe = Batch(data.val.inputs[:probe_n], data.val.labels[:probe_n])
    names, acc, curves = transfer_matrix(models, probe, spec.threat)
    os.makedirs(out_dir, exist_ok=True)
    _write_curve(
        os.path.join(out_dir, "matrix_transfer_accuracy.csv"),
        ["source\\target"] + names,
        [[src] + [float(v) for v in acc[i]] for i, src in enumerate(names)],
    )
    layer_count = len(next(iter(curves.values())))
    _write_curve(
        os.path.join(out_dir, "curves_transfer_cka.csv"),
        ["source", "target"] + [f"layer_{i}" for i in range(layer_count)],
        [[s, t] + [float(v) for v in c] for (s, t), c in sorted(curves.items())],
    )
    _write_summary(out_dir, {
        "kind": "transfer",
        "names": names,
        "accuracy": [[float(v) for v in row] for row in acc],
        "mean_early_cka": {
            f"{s}->{t}": float(c[: max(1, layer_count // 3)].mean())
            for (s, t), c in sorted(curves.items())
        },
    })
    return names, acc, curves


def run_evolution(spec: ExperimentSpec, out_dir: str):
    """Similarity of each checkpoint epoch to the final epoch, per tap.

    Also emits the pairwise epoch x epoch heatmap per tap and the validation
    losses for overlay. All dumps must share the probe digest.
    """
    if len(spec.runs) != 1:
        raise ConfigError("evolution expects exactly one run")
    _, trace = load_run(spec.runs[0])
    entries = [e for e in trace.entries if e.probe_benign_path]
    if len(entries) < 2:
        raise ValidationError("evolution needs at least two checkpoints")
    sets = [read_dump(e.probe_benign_path) for e in entries]
    digests = {s.manifest.get("probe_digest") for s in sets}
    if len(digests) > 1:
        raise ProbeMismatchError("probe drifted across epochs")
    epochs = [e.epoch for e in entries]
    names = sets[0].layer_names
    tap_ids = list(spec.taps) if spec.taps else list(range(len(names)))
    index_of = {r.layer_index: k for k, r in enumerate(sets[0].records)}
    missing = [t for t in tap_ids if t not in index_of]
    if missing:
        raise ValidationError(f"taps {missing} not present in dumps")
    series = {}
    heatmaps = {}
    for t in tap_ids:
        k = index_of[t]
        mats = [s.records[k].matrix for s in sets]
        final = mats[-1]
        series[t] = np.array([spec.metric.evaluate(m, final) for m in mats])
        h = np.zeros((len(mats), len(mats)))
        for i in range(len(mats)):
            h[i, i] = spec.metric.evaluate(mats[i], mats[i])
            for j in range(i + 1, len(mats)):
                h[i, j] = h[j, i] = spec.metric.evaluate(mats[i], mats[j])
        heatmaps[t] = h
    os.makedirs(out_dir, exist_ok=True)
    _write_curve(
        os.path.join(out_dir, "curves_evolution.csv"),
        ["epoch"] + [names[index_of[t]] for t in tap_ids] + ["val_loss", "val_loss_adv"],
        [
            [epochs[i]]
            + [float(series[t][i]) for t in tap_ids]
            + [entries[i].val_loss, entries[i].val_loss_adv or float("nan")]
            for i in range(len(epochs))
        ],
    )
    for t in tap_ids:
        write_heatmap(
            os.path.join(out_dir, f"heatmap_evolution_tap{t:02d}.ppm"),
            heatmaps[t], *spec.metric.value_range,
        )
    reach = {}
    for t in tap_ids:
        hit = [e for e, v in zip(epochs, series[t]) if v >= 0.9]
        reach[str(t)] = hit[0] if hit else None
    _write_summary(out_dir, {
        "kind": "evolution",
        "epochs": epochs,
        "taps": tap_ids,
        "reach_09_epoch": reach,
        "final_epoch": epochs[-1],
    })
    return epochs, series, heatmaps


def run_threatgrid(spec: ExperimentSpec, out_dir: str):
    """Pairwise benign cross-layer similarity between per-threat models."""
    if len(spec.runs) < 2:
        raise ConfigError("threatgrid expects at least two runs")
    labels = spec.labels or tuple(os.path.basename(r.rstrip("/")) for r in spec.runs)
    sets = {}
    missing = []
    for label, run in zip(labels, spec.runs):
        try:
            sets[label] = _final_probe(run, "benign")
        except (OSError, ValidationError) as exc:
            missing.append({"run": run, "error": str(exc)})
    names = list(sets)
    means = {}
    os.makedirs(out_dir, exist_ok=True)
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if j < i:
                continue
            sm = crosslayer_matrix(sets[a], sets[a] if a == b else sets[b], spec.metric)
            sm.save(os.path.join(out_dir, f"matrix_threatgrid_{a}_vs_{b}"))
            write_heatmap(
                os.path.join(out_dir, f"heatmap_threatgrid_{a}_vs_{b}.ppm"),
                sm.values, *sm.metric.value_range,
            )
            means[f"{a}|{b}"] = float(sm.values.mean())
    _write_summary(out_dir, {
        "kind": "threatgrid",
        "names": names,
        "pair_means": means,
        "missing": missing,
    })
    return names, means


_RUNNERS = {
    "crosslayer": run_crosslayer,
    "grid": run_grid,
    "divergence": run_divergence,
    "transfer": run_transfer,
    "evolution": run_evolution,
    "threatgrid": run_threatgrid,
}


def run_experiment(spec: ExperimentSpec, out_dir: str):
    """Dispatch an ExperimentSpec to its runner."""
    return _RUNNERS[spec.kind](spec, out_dir)
