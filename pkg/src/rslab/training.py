"""Training loops (standard, adversarial, TRADES) and the synthetic dataset.

A run owns its parameters exclusively and is deterministic for a fixed
config seed: batch order, attack seeds, and probe selection all derive from
it. Run directories follow the layout

    config.json
    trace.csv                      epoch, losses, accuracies
    checkpoints/epoch_NNN.rsck
    probes/epoch_NNN_{benign,adv}.rsam
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .activations import Condition, record_activations, write_dump
from .errors import ConfigError, NumericalError, ValidationError
from .nets import Batch, NetworkGraph
from .threats import ThreatModel, generate

METHODS = ("standard", "advpgd", "trades")


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one run.

    `threat` is the training-time constraint (advpgd/trades); `eval_threat`
    is what robust metrics and adversarial probes are computed against and
    defaults to the training threat. Standard runs may set it explicitly so
    their robustness and probe divergence can still be measured.
    """

    method: str = "standard"
    threat: ThreatModel | None = None
    beta: float = 6.0
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    lr_decay: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    probe_size: int = 512
    val_adv_subset: int = 256
    eval_threat: ThreatModel | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method in ("advpgd", "trades") and self.threat is None:
            raise ConfigError(f"{self.method} requires a threat")
        if self.method == "trades" and self.beta <= 0:
            raise ConfigError("trades requires beta > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def effective_eval_threat(self) -> ThreatModel | None:
        if self.eval_threat is not None:
            return self.eval_threat
        if self.threat is not None:
            # evaluation convention: double the attack steps used in training
            return replace(self.threat, steps=2 * self.threat.steps)
        return None

    def to_json(self) -> dict:
        d = {
            "method": self.method,
            "beta": self.beta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "probe_size": self.probe_size,
            "val_adv_subset": self.val_adv_subset,
        }
        if self.threat is not None:
            d["threat"] = self.threat.to_json()
        if self.eval_threat is not None:
            d["eval_threat"] = self.eval_threat.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        for key in ("threat", "eval_threat"):
            if key in d and d[key] is not None:
                d[key] = ThreatModel.from_json(d[key])
        return cls(**d)


@dataclass
class EpochEntry:
    epoch: int
    train_loss: float
    val_loss: float
    val_loss_adv: float | None
    benign_acc: float
    robust_acc: float | None
    checkpoint_path: str | None = None
    probe_benign_path: str | None = None
    probe_adv_path: str | None = None


@dataclass
class EpochTrace:
    """Per-epoch losses, accuracies, and artifact paths of one run."""

    entries: list = field(default_factory=list)
    run_dir: str | None = None

    def _rel(self, p) -> str:
        # artifact paths are stored relative to the run dir so a run is
        # byte-identical regardless of where it was written
        if not p:
            return ""
        if self.run_dir:
            return os.path.relpath(p, self.run_dir)
        return p

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([
                "epoch", "train_loss", "val_loss", "val_loss_adv",
                "benign_acc", "robust_acc", "checkpoint", "probe_benign", "probe_adv",
            ])
            for e in self.entries:
                w.writerow([
                    e.epoch, f"{e.train_loss:.8g}", f"{e.val_loss:.8g}",
                    "" if e.val_loss_adv is None else f"{e.val_loss_adv:.8g}",
                    f"{e.benign_acc:.6g}",
                    "" if e.robust_acc is None else f"{e.robust_acc:.6g}",
                    self._rel(e.checkpoint_path), self._rel(e.probe_benign_path),
                    self._rel(e.probe_adv_path),
                ])

    @classmethod
    def load_csv(cls, path) -> "EpochTrace":
        run_dir = os.path.dirname(str(path)) or "."

        def resolve(p):
            if not p:
                return None
            return p if os.path.isabs(p) else os.path.join(run_dir, p)

        trace = cls(run_dir=run_dir)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.entries.append(EpochEntry(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                    val_loss_adv=float(row["val_loss_adv"]) if row["val_loss_adv"] else None,
                    benign_acc=float(row["benign_acc"]),
                    robust_acc=float(row["robust_acc"]) if row["robust_acc"] else None,
                    checkpoint_path=resolve(row["checkpoint"]),
                    probe_benign_path=resolve(row["probe_benign"]),
                    probe_adv_path=resolve(row["probe_adv"]),
                ))
        return trace


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class DatasetSpec:
    """Class-conditional blobs plus class-specific frequency textures.

    Each class has a fixed spatial bump pattern (robust, high-amplitude
    feature) and an oriented sinusoidal grating (fragile, low-amplitude
    feature), so multi-layer features are useful but a small pixel budget
    can erase the texture channel.
    """

    classes: int = 4
    size: int = 16
    channels: int = 1
    n_train: int = 2000
    n_val: int = 500
    background: float = 0.35
    blob_amplitude: float = 0.45
    blob_sigma: float = 2.4
    jitter: int = 2
    texture_amplitude: float = 0.12
    texture_cycles: float = 4.0
    noise_std: float = 0.06

    def __post_init__(self):
        if self.classes < 2 or self.size < 4 or self.n_train < self.classes:
            raise ConfigError("degenerate dataset spec")

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    train: Batch
    val: Batch
    spec: DatasetSpec
    seed: int


def _class_centers(classes: int, size: int) -> np.ndarray:
    lo, hi = size * 0.3, size * 0.7
    grid = [(lo, lo), (hi, hi), (lo, hi), (hi, lo), (size / 2, size / 2),
            (lo, size / 2), (hi, size / 2), (size / 2, lo)]
    return np.array([grid[c % len(grid)] for c in range(classes)])


def _render(spec: DatasetSpec, labels: np.ndarray, rng) -> np.ndarray:
    n = len(labels)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = _class_centers(spec.classes, size)
    angles = np.pi * np.arange(spec.classes) / spec.classes
    imgs = np.full((n, size, size), spec.background)
    jit = rng.integers(-spec.jitter, spec.jitter + 1, size=(n, 2)) if spec.jitter else np.zeros((n, 2))
    phase = rng.uniform(0, 2 * np.pi, size=n)
    for i in range(n):
        c = labels[i]
        cy, cx = centers[c] + jit[i]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.blob_sigma**2))
        th = angles[c]
        wave = np.sin(
            2 * np.pi * spec.texture_cycles * (xx * np.cos(th) + yy * np.sin(th)) / size
            + phase[i]
        )
        imgs[i] += spec.blob_amplitude * bump + spec.texture_amplitude * wave
    if spec.noise_std > 0:
        imgs += rng.normal(0.0, spec.noise_std, imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0)
    return np.repeat(imgs[:, None, :, :], spec.channels, axis=1)


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def make_synthetic_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministic labeled image dataset in [0,1] with balanced classes."""
    rng = np.random.default_rng(seed)
    train_labels = _balanced_labels(spec.n_train, spec.classes, rng)
    val_labels = _balanced_labels(spec.n_val, spec.classes, rng)
    train_x = _render(spec, train_labels, rng)
    val_x = _render(spec, val_labels, rng)
    return Dataset(Batch(train_x, train_labels), Batch(val_x, val_labels), spec, seed)


def save_dataset(data: Dataset, path) -> None:
    np.savez(
        path,
        train_x=data.train.inputs.astype(np.float32),
        train_y=data.train.labels,
        val_x=data.val.inputs.astype(np.float32),
        val_y=data.val.labels,
        spec=json.dumps(data.spec.to_json(), sort_keys=True),
        seed=data.seed,
    )


def load_dataset(path) -> Dataset:
    z = np.load(path, allow_pickle=False)
    spec = DatasetSpec.from_json(json.loads(str(z["spec"])))
    return Dataset(
        Batch(z["train_x"].astype(np.float64), z["train_y"]),
        Batch(z["val_x"].astype(np.float64), z["val_y"]),
        spec,
        int(z["seed"]),
    )


# ---------------------------------------------------------------------------
# loss/gradient variants


def _sgd_step(params, grads, velocity, lr, momentum):
    for p, g, v in zip(params, grads, velocity):
        for key in p:
            v[key] = momentum * v[key] - lr * g[key]
            p[key] += v[key]


def _kl_pgd(net, batch: Batch, threat: ThreatModel, seed: int) -> np.ndarray:
    """Inner maximization of KL(p(x) || p(x')) within the threat ball."""
    x0 = batch.inputs
    eps = threat.epsilon
    if eps == 0.0:
        return x0.copy()
    logits0, _ = nets.forward(net, x0)
    p0 = nets.softmax(logits0)
    rng = np.random.default_rng(seed)
    x = np.clip(x0 + rng.uniform(-eps, eps, x0.shape), 0.0, 1.0)
    n = x0.shape[0]
    for _ in range(threat.steps):
        logits, state = nets.forward_cache(net, x)
        dlogits = (nets.softmax(logits) - p0) / n
        _, dx = nets.backward(net, state, dlogits, need_param_grads=False)
        x = x + threat.alpha * np.sign(dx)
        x = np.clip(x0 + np.clip(x - x0, -eps, eps), 0.0, 1.0)
    return x


def trades_loss_and_grad(net, batch: Batch, threat: ThreatModel, beta: float, seed: int):
    """CE(f(x), y) + beta * KL(p(x) || p(x_adv)) and its parameter gradients."""
    x_adv = _kl_pgd(net, batch, threat, seed)
    n = batch.n
    logits_b, state_b = nets.forward_cache(net, batch.inputs)
    logits_a, state_a = nets.forward_cache(net, x_adv)
    ce, dlogits_b = nets.cross_entropy(logits_b, batch.labels)
    logp = nets.log_softmax(logits_b)
    logq = nets.log_softmax(logits_a)
    p = np.exp(logp)
    q = np.exp(logq)
    kl_terms = (p * (logp - logq)).sum(axis=1)
    kl = float(kl_terms.mean())
    # d/dz of KL(p(z) || q): p_k [(logp - logq)_k - KL_row]; d/dz' is q - p
    dz_b = p * ((logp - logq) - kl_terms[:, None]) * (beta / n)
    dz_a = (q - p) * (beta / n)
    grads_b, _ = nets.backward(net, state_b, dlogits_b + dz_b, need_input_grad=False)
    grads_a, _ = nets.backward(net, state_a, dz_a, need_input_grad=False)
    total = [
        {k: gb.get(k, 0.0) + ga.get(k, 0.0) for k in gb} if gb else {}
        for gb, ga in zip(grads_b, grads_a)
    ]
    return ce + beta * kl, total


def _batch_seed(seed: int, epoch: int, index: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + index) % (2**31)


# ---------------------------------------------------------------------------
# probes and checkpoints


def checkpoint_probe(
    net: NetworkGraph,
    probe: Batch,
    epoch: int | str,
    threat: ThreatModel | None,
    out_dir: str,
    model_id: str = "",
    seed: int = 0,
):
    """Record benign (and, given a threat, adversarial) probe dumps.

    Activations are taken from the float32-rounded parameters so re-recording
    from the saved checkpoint reproduces the dumps bit-exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    snap = nets.round_params_f32(net)
    tag = f"{epoch:03d}" if isinstance(epoch, int) else str(epoch)
    benign = record_activations(
        snap, probe, Condition.benign(), model_id=model_id, epoch=epoch, seed=seed
    )
    benign_path = os.path.join(out_dir, f"epoch_{tag}_benign.rsam")
    write_dump(benign, benign_path)
    adv_path = None
    if threat is not None:
        adv_batch = generate(snap, probe, threat, seed=seed)
        cond = Condition.adversarial(threat.kind, threat.epsilon)
        adv = record_activations(
            snap,
            Batch(adv_batch.perturbed, probe.labels),
            cond,
            model_id=model_id,
            epoch=epoch,
            seed=seed,
        )
        # divergence analyses pair dumps by probe; keep the benign digest
        adv.manifest["probe_digest"] = benign.manifest["probe_digest"]
        adv_path = os.path.join(out_dir, f"epoch_{tag}_adv.rsam")
        write_dump(adv, adv_path)
    return benign_path, adv_path


def _mean_loss(net, batch: Batch, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, batch.n, chunk):
        sub = Batch(batch.inputs[s : s + chunk], batch.labels[s : s + chunk])
        logits, _ = nets.forward(net, sub.inputs)
        loss, _ = nets.cross_entropy(logits, sub.labels)
        total += loss * sub.n
    return total / batch.n


def train(
    net: NetworkGraph,
    data: Dataset,
    config: TrainingConfig,
    out_dir: str | None = None,
    model_id: str = "",
):
    """Momentum-SGD training; returns (net, EpochTrace).

    advpgd replaces each batch with its PGD perturbation before the gradient
    step; trades adds the beta-weighted benign/adversarial divergence term.
    Deterministic given the config seed. Aborts with NumericalError if the
    loss stops being finite.
    """
    if net.params is None:
        net.params = nets.init_params(net, config.seed)
    rng = np.random.default_rng(config.seed)
    probe_rng = np.random.default_rng(config.seed + 7_777)
    probe_idx = probe_rng.permutation(data.val.n)[: min(config.probe_size, data.val.n)]
    probe = Batch(data.val.inputs[probe_idx], data.val.labels[probe_idx])
    eval_threat = config.effective_eval_threat()
    adv_sub = min(config.val_adv_subset, data.val.n)
    val_sub = Batch(data.val.inputs[:adv_sub], data.val.labels[:adv_sub])
    velocity = [
        {k: np.zeros_like(v) for k, v in p.items()} for p in net.params
    ]
    trace = EpochTrace(run_dir=out_dir)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(
                {"schema_version": 1, "model_id": model_id, "training": config.to_json()},
                fh, sort_keys=True, indent=1,
            )
            fh.write("\n")
    n_train = data.train.n
    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        if config.lr_decay:
            frac = epoch / config.epochs
            lr = config.learning_rate * (0.01 if frac > 0.75 else 0.1 if frac > 0.5 else 1.0)
        order = rng.permutation(n_train)
        losses = []
        for bi, s in enumerate(range(0, n_train, config.batch_size)):
            idx = order[s : s + config.batch_size]
            batch = Batch(data.train.inputs[idx], data.train.labels[idx])
            if config.method == "advpgd":
                adv = generate(
                    net, batch, config.threat,
                    seed=_batch_seed(config.seed, epoch, bi),
                )
                batch = Batch(adv.perturbed, batch.labels)
                loss, grads, _ = nets.loss_and_grad(net, batch, need_input_grad=False)
            elif config.method == "trades":
                loss, grads = trades_loss_and_grad(
                    net, batch, config.threat, config.beta,
                    seed=_batch_seed(config.seed, epoch, bi),
                )
            else:
                loss, grads, _ = nets.loss_and_grad(net, batch, need_input_grad=False)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss diverged at epoch {epoch}, batch {bi}: {loss}"
                )
            losses.append(loss)
            _sgd_step(net.params, grads, velocity, lr, config.momentum)
        val_loss = _mean_loss(net, data.val)
        benign_acc = float(
            (nets.predict(net, data.val.inputs) == data.val.labels).mean()
        )
        val_loss_adv = None
        robust_acc = None
        if eval_threat is not None:
            adv = generate(net, val_sub, eval_threat, seed=_batch_seed(config.seed, epoch, -1))
            adv_batch = Batch(adv.perturbed, val_sub.labels)
            val_loss_adv = _mean_loss(net, adv_batch)
            robust_acc = float(
                (nets.predict(net, adv_batch.inputs) == val_sub.labels).mean()
            )
        entry = EpochEntry(
            epoch, float(np.mean(losses)), val_loss, val_loss_adv, benign_acc, robust_acc
        )
        due = config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0
        if out_dir and (due or epoch == config.epochs):
            ck = os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}.rsck")
            nets.save_checkpoint(net, ck, epoch=epoch)
            entry.checkpoint_path = ck
            bp, ap = checkpoint_probe(
                net, probe, epoch, eval_threat,
                os.path.join(out_dir, "probes"), model_id=model_id,
                seed=config.seed,
            )
            entry.probe_benign_path = bp
            entry.probe_adv_path = ap
        trace.entries.append(entry)
        if out_dir:
            trace.save_csv(os.path.join(out_dir, "trace.csv"))
    return net, trace


def load_run(run_dir: str):
    """(config dict, EpochTrace) for a completed run directory."""
    with open(os.path.join(run_dir, "config.json")) as fh:
        config = json.load(fh)
    trace = EpochTrace.load_csv(os.path.join(run_dir, "trace.csv"))
    trace.run_dir = run_dir
    return config, trace
