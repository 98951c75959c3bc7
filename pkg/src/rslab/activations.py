"""Activation-dump data model and the RSAM binary file format.

A dump holds one matrix per tapped layer, recorded over a fixed probe set,
together with per-point class labels and a JSON manifest. The payload is
32-bit on disk and widened to float64 on load; metric tolerances account for
the precision loss.

RSAM v1 layout (little-endian):

    magic "RSAM" | u16 version | u32 record_count
    per record:
        u16 name_len | name utf-8 | u32 layer_index | u64 n | u64 p
        u8 condition (0 benign, 1 adversarial)
        if adversarial: u8 threat_kind | f64 epsilon
        f32[n*p] row-major payload
    u64 label_count (= n) | i32[n] labels
    u32 manifest_len | manifest JSON utf-8
    footer: u64 byte offset of the manifest length field
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    BadMagicError,
    FormatError,
    ManifestError,
    ShapeError,
    TruncatedError,
    ValidationError,
    VersionError,
)

MAGIC = b"RSAM"
VERSION = 1

THREAT_KINDS = ("linf", "l2", "jpeg", "gabor", "snow")


@dataclass(frozen=True)
class Condition:
    """Input condition a dump was recorded under."""

    kind: str  # "benign" | "adversarial"
    threat: str | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in ("benign", "adversarial"):
            raise ValidationError(f"unknown condition kind {self.kind!r}")
        if self.kind == "adversarial":
            if self.threat not in THREAT_KINDS:
                raise ValidationError(f"unknown threat kind {self.threat!r}")
            if self.epsilon is None or not np.isfinite(self.epsilon) or self.epsilon < 0:
                raise ValidationError("adversarial condition needs finite epsilon >= 0")

    @classmethod
    def benign(cls) -> "Condition":
        return cls("benign")

    @classmethod
    def adversarial(cls, threat: str, epsilon: float) -> "Condition":
        return cls("adversarial", threat, float(epsilon))

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "adversarial":
            d["threat"] = self.threat
            d["epsilon"] = self.epsilon
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Condition":
        return cls(d["kind"], d.get("threat"), d.get("epsilon"))


@dataclass
class ActivationRecord:
    """One layer's n x p activation matrix plus identifying metadata."""

    layer_name: str
    layer_index: int
    matrix: np.ndarray  # (n, p) float64
    condition: Condition
    model_id: str = ""
    epoch: int | str = "final"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.size == 0:
            raise ShapeError(
                f"record {self.layer_name!r} matrix must be nonempty 2-d"
            )
        if self.layer_index < 0:
            raise ValidationError("layer_index must be >= 0")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ActivationSet:
    """Ordered per-layer records over one probe set, with labels and manifest."""

    records: list
    labels: np.ndarray  # (n,) int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("activation set must contain records")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.records[0].n
        for r in self.records:
            if r.n != n:
                raise AlignmentError(
                    f"record {r.layer_name!r} has {r.n} rows, expected {n}"
                )
        idx = [r.layer_index for r in self.records]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError("layer_index must be strictly increasing")
        if self.labels.ndim != 1 or len(self.labels) != n:
            raise AlignmentError("labels length must equal probe size")
        if len(self.labels) and self.labels.min() < 0:
            raise ValidationError("labels must be >= 0")

    @property
    def n(self) -> int:
        return self.records[0].n

    @property
    def layer_names(self) -> list:
        return [r.layer_name for r in self.records]


def probe_digest(inputs: np.ndarray, labels: np.ndarray) -> str:
    """Stable digest of a probe batch, for detecting probe drift across dumps."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(inputs, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


_THREAT_CODE = {k: i for i, k in enumerate(THREAT_KINDS)}


def write_dump(aset: ActivationSet, path) -> None:
    """Serialize an ActivationSet to an RSAM file."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(aset.records))]
    for r in aset.records:
        name = r.layer_name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IQQ", r.layer_index, r.n, r.p))
        if r.condition.kind == "benign":
            parts.append(b"\x00")
        else:
            parts.append(
                struct.pack(
                    "<BBd", 1, _THREAT_CODE[r.condition.threat], r.condition.epsilon
                )
            )
        parts.append(np.ascontiguousarray(r.matrix, dtype="<f4").tobytes())
    parts.append(struct.pack("<Q", aset.n))
    parts.append(np.ascontiguousarray(aset.labels, dtype="<i4").tobytes())
    manifest = dict(aset.manifest)
    manifest.setdefault("n", aset.n)
    manifest["layers"] = aset.layer_names
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    offset = sum(len(p) for p in parts)
    parts.append(struct.pack("<I", len(mbytes)))
    parts.append(mbytes)
    parts.append(struct.pack("<Q", offset))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    """Bounds-checked cursor over an in-memory file image."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int) -> bytes:
        if count < 0 or self.pos + count > len(self.buf):
            raise TruncatedError(
                f"need {count} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dump(path) -> ActivationSet:
    """Read an RSAM file back into an ActivationSet (payload widened to f64)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if len(buf) < 4:
        raise TruncatedError("file shorter than magic")
    if rd.take(4) != MAGIC:
        raise BadMagicError("not an RSAM file")
    (version, count) = rd.unpack("<HI")
    if version != VERSION:
        raise VersionError(f"unsupported RSAM version {version}")
    if count == 0:
        raise ManifestError("record count is zero")
    records = []
    expected_n = None
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        try:
            name = rd.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestError(f"record name is not valid UTF-8: {exc}") from exc
        layer_index, n, p = rd.unpack("<IQQ")
        if n == 0 or p == 0:
            raise TruncatedError(f"record {name!r} declares empty {n}x{p} matrix")
        (cond_byte,) = rd.unpack("<B")
        if cond_byte == 0:
            cond = Condition.benign()
        elif cond_byte == 1:
            tk, eps = rd.unpack("<Bd")
            if tk >= len(THREAT_KINDS):
                raise ManifestError(f"unknown threat code {tk}")
            try:
                cond = Condition.adversarial(THREAT_KINDS[tk], eps)
            except ValidationError as exc:
                raise ManifestError(f"bad condition header: {exc}") from exc
        else:
            raise ManifestError(f"unknown condition byte {cond_byte}")
        need = n * p * 4
        if rd.pos + need > len(buf):
            raise TruncatedError(
                f"record {name!r} declares {n}x{p} floats past end of file"
            )
        mat = np.frombuffer(rd.take(need), dtype="<f4").reshape(n, p)
        if expected_n is None:
            expected_n = n
        elif n != expected_n:
            raise ManifestError(f"record {name!r} has n={n}, expected {expected_n}")
        records.append((name, layer_index, mat.astype(np.float64), cond))
    (label_count,) = rd.unpack("<Q")
    if label_count != expected_n:
        raise ManifestError(
            f"label count {label_count} disagrees with record rows {expected_n}"
        )
    labels = np.frombuffer(rd.take(label_count * 4), dtype="<i4").astype(np.int64)
    manifest_offset = rd.pos
    (manifest_len,) = rd.unpack("<I")
    try:
        manifest = json.loads(rd.take(manifest_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    (footer,) = rd.unpack("<Q")
    if footer != manifest_offset:
        raise ManifestError(
            f"footer offset {footer} does not point at the manifest ({manifest_offset})"
        )
    if rd.pos != len(buf):
        raise ManifestError(f"{len(buf) - rd.pos} trailing bytes after footer")
    declared = manifest.get("layers")
    if declared is not None and len(declared) != count:
        raise ManifestError(
            f"manifest lists {len(declared)} layers, file has {count} records"
        )
    model_id = manifest.get("model_id", "")
    epoch = manifest.get("epoch", "final")
    try:
        recs = [
            ActivationRecord(name, idx, mat, cond, model_id=model_id, epoch=epoch)
            for (name, idx, mat, cond) in records
        ]
        return ActivationSet(recs, labels, manifest)
    except FormatError:
        raise
    except ValidationError as exc:
        raise ManifestError(f"records violate set invariants: {exc}") from exc


def record_activations(
    net,
    probe,
    condition: Condition,
    model_id: str = "",
    epoch: int | str = "final",
    dataset: str = "",
    seed: int = 0,
) -> ActivationSet:
    """Run the probe batch through `net` and collect one record per tap point.

    Spatial activations (c, h, w) flatten channel-major into the columns.
    The tapped matrices are rounded through float32, matching what a dump
    written to disk would reload, so recordings are bit-stable across a
    write/read cycle.
    """
    from . import nets  # deferred: avoid import cycle

    inputs, labels = nets.batch_arrays(probe)
    _, tapped = nets.forward(net, inputs, taps=net.taps)
    names = nets.layer_names(net)
    records = []
    for idx in net.taps:
        mat = tapped[idx].astype(np.float32).astype(np.float64)
        records.append(
            ActivationRecord(names[idx], idx, mat, condition, model_id, epoch)
        )
    manifest = {
        "model_id": model_id,
        "dataset": dataset,
        "seed": seed,
        "n": int(inputs.shape[0]),
        "condition": condition.to_json(),
        "epoch": epoch,
        "probe_digest": probe_digest(inputs, labels),
    }
    return ActivationSet(records, labels, manifest)
