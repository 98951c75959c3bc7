import struct

import numpy as np
import pytest

from rslab import activations as act
from rslab import nets
from rslab.errors import (
    AlignmentError,
    BadMagicError,
    FormatError,
    ManifestError,
    TruncatedError,
    ValidationError,
    VersionError,
)


def random_set(rng, records=3, n=6):
    recs = []
    for i in range(records):
        p = int(rng.integers(1, 9))
        cond = (
            act.Condition.benign()
            if rng.random() < 0.5
            else act.Condition.adversarial(
                act.THREAT_KINDS[int(rng.integers(0, 5))], float(rng.uniform(0, 1))
            )
        )
        mat = rng.normal(size=(n, p)).astype(np.float32).astype(np.float64)
        recs.append(act.ActivationRecord(f"layer{i:02d}", i, mat, cond, "m", i))
    labels = rng.integers(0, 4, n)
    return act.ActivationSet(recs, labels, {"model_id": "m", "seed": 0})


def sets_equal(a, b):
    if a.layer_names != b.layer_names or not np.array_equal(a.labels, b.labels):
        return False
    for ra, rb in zip(a.records, b.records):
        if ra.layer_index != rb.layer_index:
            return False
        if not np.array_equal(ra.matrix, rb.matrix):
            return False
        if ra.condition != rb.condition:
            return False
    return True


def test_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(0)
    s = random_set(rng)
    path = tmp_path / "a.rsam"
    act.write_dump(s, path)
    assert sets_equal(act.read_dump(path), s)


def test_roundtrip_bit_exact_many(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "many.rsam"
    for _ in range(50):
        s = random_set(rng, records=int(rng.integers(1, 5)), n=int(rng.integers(2, 10)))
        act.write_dump(s, path)
        assert sets_equal(act.read_dump(path), s)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.rsam"
    rng = np.random.default_rng(2)
    act.write_dump(random_set(rng), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        act.read_dump(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.rsam"
    rng = np.random.default_rng(3)
    act.write_dump(random_set(rng), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        act.read_dump(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.rsam"
    rng = np.random.default_rng(4)
    act.write_dump(random_set(rng), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedError):
        act.read_dump(path)


def test_oversized_record_header(tmp_path):
    # a record declaring an n x p payload larger than the remaining bytes
    path = tmp_path / "big.rsam"
    rng = np.random.default_rng(5)
    s = act.ActivationSet(
        [act.ActivationRecord("only", 0, rng.normal(size=(4, 2)), act.Condition.benign())],
        np.zeros(4, dtype=int),
    )
    act.write_dump(s, path)
    raw = bytearray(path.read_bytes())
    # record header starts after magic(4)+version(2)+count(4)+namelen(2)+name(4)
    off = 4 + 2 + 4 + 2 + 4 + 4  # ... +layer_index(4) -> n field
    raw[off : off + 8] = struct.pack("<Q", 1 << 40)
    path.write_bytes(bytes(raw))
    with pytest.raises(TruncatedError):
        act.read_dump(path)


def test_manifest_record_count_disagreement(tmp_path):
    path = tmp_path / "m.rsam"
    rng = np.random.default_rng(6)
    s = random_set(rng, records=2)
    s.manifest["layers"] = ["a", "b", "c"]  # will be overwritten by writer
    act.write_dump(s, path)
    raw = path.read_bytes()
    # corrupt the manifest in place: swap the layers list for a longer one
    (offset,) = struct.unpack("<Q", raw[-8:])
    (mlen,) = struct.unpack("<I", raw[offset : offset + 4])
    import json

    manifest = json.loads(raw[offset + 4 : offset + 4 + mlen])
    manifest["layers"].append("ghost")
    mbytes = json.dumps(manifest).encode()
    patched = raw[:offset] + struct.pack("<I", len(mbytes)) + mbytes + struct.pack("<Q", offset)
    path.write_bytes(patched)
    with pytest.raises(ManifestError):
        act.read_dump(path)


def test_fuzz_corrupted_headers_never_crash(tmp_path):
    rng = np.random.default_rng(7)
    path = tmp_path / "fuzz.rsam"
    act.write_dump(random_set(rng), path)
    pristine = path.read_bytes()
    for trial in range(300):
        raw = bytearray(pristine)
        for _ in range(int(rng.integers(1, 6))):
            pos = int(rng.integers(0, len(raw)))
            raw[pos] = int(rng.integers(0, 256))
        path.write_bytes(bytes(raw))
        try:
            act.read_dump(path)
        except FormatError:
            pass  # any format error is acceptable; crashes are not


def test_truncation_fuzz(tmp_path):
    rng = np.random.default_rng(8)
    path = tmp_path / "cut.rsam"
    act.write_dump(random_set(rng), path)
    pristine = path.read_bytes()
    for cut in range(0, len(pristine) - 1, max(1, len(pristine) // 64)):
        path.write_bytes(pristine[:cut])
        with pytest.raises(FormatError):
            act.read_dump(path)


def test_set_invariants():
    rng = np.random.default_rng(9)
    rec = lambda i, n: act.ActivationRecord(
        f"l{i}", i, rng.normal(size=(n, 2)), act.Condition.benign()
    )
    with pytest.raises(AlignmentError):
        act.ActivationSet([rec(0, 4), rec(1, 5)], np.zeros(4, dtype=int))
    with pytest.raises(ValidationError):
        act.ActivationSet([rec(1, 4), rec(0, 4)], np.zeros(4, dtype=int))
    with pytest.raises(AlignmentError):
        act.ActivationSet([rec(0, 4)], np.zeros(3, dtype=int))


def test_record_activations_identity_net():
    # a single flatten layer is the identity on already-flat probe data
    net = nets.NetworkGraph([nets.Flatten()], (1, 2, 2))
    net.params = nets.init_params(net, 0)
    rng = np.random.default_rng(10)
    probe = nets.Batch(rng.uniform(0, 1, (4, 1, 2, 2)), rng.integers(0, 2, 4))
    s = act.record_activations(net, probe, act.Condition.benign())
    assert len(s.records) == 1
    expected = probe.inputs.reshape(4, -1).astype(np.float32).astype(np.float64)
    assert np.array_equal(s.records[0].matrix, expected)


def test_record_activations_structure_and_determinism():
    net = nets.make_network("mlp-3", input_shape=(1, 4, 4), classes=2, seed=0)
    net.taps = (1, 3, 5)
    rng = np.random.default_rng(11)
    probe = nets.Batch(rng.uniform(0, 1, (5, 1, 4, 4)), rng.integers(0, 2, 5))
    s1 = act.record_activations(net, probe, act.Condition.benign())
    s2 = act.record_activations(net, probe, act.Condition.benign())
    assert len(s1.records) == 3
    idx = [r.layer_index for r in s1.records]
    assert idx == sorted(idx) and len(set(idx)) == 3
    assert sets_equal(s1, s2)


def test_roundtrip_after_recording(tmp_path):
    net = nets.make_network("mlp-3", input_shape=(1, 4, 4), classes=2, seed=1)
    rng = np.random.default_rng(12)
    probe = nets.Batch(rng.uniform(0, 1, (6, 1, 4, 4)), rng.integers(0, 2, 6))
    s = act.record_activations(net, probe, act.Condition.adversarial("linf", 0.1))
    path = tmp_path / "rec.rsam"
    act.write_dump(s, path)
    assert sets_equal(act.read_dump(path), s)
