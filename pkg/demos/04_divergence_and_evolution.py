"""Where adversarial inputs bend the network, and when layers converge.

Part 1 compares each layer's activations on clean vs attacked copies of
the same probe: on a standard net the early layers barely notice the
perturbation while the deep layers diverge almost completely; an
adversarially trained net stays aligned throughout.

Part 2 tracks each stage's similarity to its own final representation over
training epochs: early stages settle quickly, the last stage keeps moving.
"""
import os

import numpy as np

from rslab import (
    DatasetSpec,
    ThreatModel,
    TrainingConfig,
    make_network,
    make_synthetic_dataset,
    train,
)
from rslab.activations import read_dump
from rslab.experiments import ExperimentSpec, divergence_curve, run_evolution
from rslab.simmetrics import MetricKind

OUT = os.path.join(os.path.dirname(__file__), "out_evolution")
spec = DatasetSpec(n_train=1000, n_val=300)
data = make_synthetic_dataset(spec, seed=0)
threat = ThreatModel("linf", 0.1, steps=10)
metric = MetricKind.linear_cka()

runs = {}
for method in ("standard", "advpgd"):
    net = make_network("miniresnet", (1, 16, 16), classes=4, seed=0)
    out = os.path.join(OUT, method)
    cfg = TrainingConfig(
        method=method, threat=threat if method == "advpgd" else None,
        epochs=16, checkpoint_every=2, probe_size=128,
        eval_threat=ThreatModel("linf", 0.1, steps=20),
    )
    _, trace = train(net, data, cfg, out_dir=out, model_id=method)
    runs[method] = (out, trace)

print("benign-vs-adversarial similarity by depth (layer 0 -> logits):")
for method, (out, trace) in runs.items():
    last = trace.entries[-1]
    curve = divergence_curve(
        read_dump(last.probe_benign_path), read_dump(last.probe_adv_path), metric
    )
    print(f"  {method:9s}: " + " ".join(f"{v:.2f}" for v in curve))

print("\nsimilarity of each stage to its final representation, per epoch:")
out, _ = runs["advpgd"]
espec = ExperimentSpec(kind="evolution", runs=(out,), taps=(6, 12, 18))
epochs, series, _ = run_evolution(espec, os.path.join(OUT, "evolution"))
print("  epoch:   " + " ".join(f"{e:5d}" for e in epochs))
for tap, label in ((6, "stage1"), (12, "stage2"), (18, "stage3")):
    print(f"  {label}:  " + " ".join(f"{v:5.2f}" for v in series[tap]))
print("\nearlier stages reach their final representation sooner")
