import json
import os

import numpy as np
import pytest

from rslab import cli


def run_cli(*argv):
    return cli.main(list(argv))


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + a short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_path = str(root / "data.npz")
    spec_path = write_json(
        root / "dspec.json",
        {
            "schema_version": 1,
            "dataset": {
                "classes": 2, "size": 8, "n_train": 160, "n_val": 64,
                "blob_amplitude": 0.5, "blob_sigma": 1.8, "noise_std": 0.04,
                "jitter": 1, "texture_amplitude": 0.08,
            },
        },
    )
    assert run_cli("gen-data", "--spec", spec_path, "--seed", "3", "--out", data_path) == 0
    run_dir = str(root / "run")
    config_path = write_json(
        root / "train.json",
        {
            "schema_version": 1,
            "model_id": "m0",
            "arch": "miniresnet",
            "width": 1,
            "data": data_path,
            "training": {
                "method": "advpgd",
                "threat": {"kind": "linf", "epsilon": 0.05, "steps": 3},
                "epochs": 2, "batch_size": 32, "probe_size": 24,
                "val_adv_subset": 24, "checkpoint_every": 1, "seed": 5,
            },
        },
    )
    assert run_cli("train", "--config", config_path, "--out", run_dir) == 0
    return root, data_path, config_path, run_dir


def test_gen_data_outputs(pipeline):
    _, data_path, _, _ = pipeline
    from rslab.training import load_dataset

    data = load_dataset(data_path)
    assert data.train.n == 160 and data.val.n == 64


def test_gen_data_refuses_overwrite(pipeline, capsys):
    _, data_path, _, _ = pipeline
    assert run_cli("gen-data", "--out", data_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"


def test_train_run_layout(pipeline):
    _, _, _, run_dir = pipeline
    assert os.path.exists(os.path.join(run_dir, "trace.csv"))
    assert os.path.exists(os.path.join(run_dir, "checkpoints", "epoch_002.rsck"))
    assert os.path.exists(os.path.join(run_dir, "probes", "epoch_002_adv.rsam"))


def test_train_rejects_unknown_keys(pipeline, tmp_path, capsys):
    root, data_path, _, _ = pipeline
    bad = write_json(
        tmp_path / "bad.json",
        {"schema_version": 1, "data": data_path, "training": {}, "surprise": 1},
    )
    assert run_cli("train", "--config", bad, "--out", str(tmp_path / "r")) == 2


def test_train_rejects_bad_schema_version(tmp_path):
    bad = write_json(tmp_path / "bad.json", {"schema_version": 9, "training": {}})
    assert run_cli("train", "--config", bad, "--out", str(tmp_path / "r")) == 2


def test_missing_file_is_io_error(tmp_path, capsys):
    assert (
        run_cli(
            "record", "--model", str(tmp_path / "none.rsck"),
            "--data", str(tmp_path / "none.npz"), "--out", str(tmp_path / "o.rsam"),
        )
        == 3
    )
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "io"


def test_attack_eps0_robust_equals_benign(pipeline, tmp_path, capsys):
    _, data_path, _, run_dir = pipeline
    out = str(tmp_path / "atk")
    code = run_cli(
        "attack", "--model", os.path.join(run_dir, "checkpoints", "epoch_002.rsck"),
        "--threat", "linf", "--eps", "0", "--steps", "5",
        "--data", data_path, "--limit", "32", "--out", out,
    )
    assert code == 0
    with open(os.path.join(out, "accuracy.json")) as fh:
        acc = json.load(fh)
    assert acc["robust_acc"] == acc["benign_acc"]
    assert os.path.exists(os.path.join(out, "adversarial.rsam"))


def test_record_and_compare_self_diagonal(pipeline, tmp_path):
    _, data_path, _, run_dir = pipeline
    dump = str(tmp_path / "b.rsam")
    code = run_cli(
        "record", "--model", os.path.join(run_dir, "checkpoints", "epoch_002.rsck"),
        "--data", data_path, "--limit", "24", "--out", dump,
    )
    assert code == 0
    out = str(tmp_path / "cmp")
    code = run_cli("compare", "--a", dump, "--b", dump, "--metric", "linear_cka", "--out", out)
    assert code == 0
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["mean_diagonal"] == pytest.approx(1.0, abs=1e-9)
    assert os.path.exists(os.path.join(out, "matrix_compare.csv"))
    assert os.path.exists(os.path.join(out, "heatmap_compare.ppm"))


def test_compare_online_metric(pipeline, tmp_path):
    _, data_path, _, run_dir = pipeline
    dump = str(tmp_path / "c.rsam")
    run_cli(
        "record", "--model", os.path.join(run_dir, "checkpoints", "epoch_002.rsck"),
        "--data", data_path, "--limit", "32", "--out", dump,
    )
    out = str(tmp_path / "cmp2")
    code = run_cli(
        "compare", "--a", dump, "--b", dump, "--metric", "online_cka",
        "--batch", "16", "--passes", "2", "--out", out,
    )
    assert code == 0


def test_experiment_command(pipeline, tmp_path):
    _, _, _, run_dir = pipeline
    spec = write_json(
        tmp_path / "exp.json",
        {"schema_version": 1, "experiment": {"kind": "crosslayer", "runs": [run_dir]}},
    )
    out = str(tmp_path / "exp")
    assert run_cli("experiment", "--spec", spec, "--out", out) == 0
    with open(os.path.join(out, "summary.json")) as fh:
        assert "long_range_score" in json.load(fh)


def test_validation_failure_exit_code(pipeline, tmp_path, capsys):
    _, data_path, _, run_dir = pipeline
    # corrupt a dump so compare hits a format (validation) error
    dump = str(tmp_path / "bad.rsam")
    with open(os.path.join(run_dir, "probes", "epoch_002_benign.rsam"), "rb") as fh:
        raw = bytearray(fh.read())
    raw[:4] = b"XXXX"
    with open(dump, "wb") as fh:
        fh.write(bytes(raw))
    code = run_cli("compare", "--a", dump, "--b", dump, "--out", str(tmp_path / "c"))
    assert code == 5
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "validation"


def test_seed_threading_determinism(pipeline, tmp_path):
    root, data_path, config_path, _ = pipeline
    out_a = str(tmp_path / "ra")
    out_b = str(tmp_path / "rb")
    assert run_cli("train", "--config", config_path, "--seed", "11", "--out", out_a) == 0
    assert run_cli("train", "--config", config_path, "--seed", "11", "--out", out_b) == 0
    for sub in ("trace.csv", os.path.join("checkpoints", "epoch_002.rsck"),
                os.path.join("probes", "epoch_002_benign.rsam")):
        with open(os.path.join(out_a, sub), "rb") as fa, open(
            os.path.join(out_b, sub), "rb"
        ) as fb:
            assert fa.read() == fb.read(), sub
