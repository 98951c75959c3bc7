"""Train a small network two ways and attack both.

Standard training reaches high benign accuracy but collapses under a
bounded adversary; adversarial training gives up a little benign accuracy
to keep most of it. The five threat families are then compared on the
standard net at their default desk budgets.
"""
import numpy as np

from rslab import (
    Batch,
    DatasetSpec,
    ThreatModel,
    TrainingConfig,
    evaluate_accuracy,
    make_network,
    make_synthetic_dataset,
    train,
)

spec = DatasetSpec(n_train=1000, n_val=300)
data = make_synthetic_dataset(spec, seed=0)
threat = ThreatModel("linf", 0.1, steps=10)
eval_threat = ThreatModel("linf", 0.1, steps=20)
EPOCHS = 15

print(f"dataset: {spec.classes} classes, {spec.size}x{spec.size}, "
      f"{data.train.n} train / {data.val.n} val\n")

nets = {}
for method in ("standard", "advpgd"):
    net = make_network("miniresnet", (1, spec.size, spec.size),
                       classes=spec.classes, seed=0)
    cfg = TrainingConfig(
        method=method, threat=threat if method == "advpgd" else None,
        epochs=EPOCHS, probe_size=128, val_adv_subset=128,
        eval_threat=eval_threat,
    )
    net, trace = train(net, data, cfg)
    last = trace.entries[-1]
    nets[method] = net
    print(f"{method:9s}: benign={last.benign_acc:.3f}  robust={last.robust_acc:.3f}")

print("\nstandard net under each threat family (benign acc "
      f"{evaluate_accuracy(nets['standard'], data.val)[0]:.3f}):")
sub = Batch(data.val.inputs[:200], data.val.labels[:200])
for kind, eps in (("linf", 0.1), ("l2", 1.0), ("jpeg", 0.1),
                  ("gabor", 0.2), ("snow", 0.5)):
    t = ThreatModel(kind, eps, steps=20)
    _, robust = evaluate_accuracy(nets["standard"], sub, t, seed=0)
    print(f"  {kind:6s} eps={eps:<5}: robust accuracy {robust:.3f}")
