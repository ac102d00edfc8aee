import csv
import json
import subprocess
import sys

import pytest

from lighthoi.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY = [
    "data.n_sequences=24", "data.T=24", "data.objects_per_category=2", "data.n_points=128", "data.n_basis=64",
    "model.layers=1", "model.model_dim=16", "model.ffn_dim=32", "model.heads=2", "model.K=10",
    "train.steps=4", "train.log_every=2",
    "sample.n_samples=4", "sample.delta=5", "sample.batch_size=3",
    "analyze.n_sequences=3",
    "augment.n_jobs=2", "augment.iters=3",
    "sweep.omega2=[0.0, 3.0]", "sweep.delta=[2, 5]",
    "run.log_level=WARNING",
]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = TINY + [f"data.root={root / 'data'}", f"run.out_dir={root / 'out'}"]

    def call(cmd, *extra, out=None):
        args = list(base) + list(extra)
        if out is not None:
            args.append(f"run.out_dir={out}")
        return main([cmd, *args])

    for cmd in ("generate-data", "train", "sample", "evaluate"):
        assert call(cmd) == EXIT_OK, cmd
    return root, call


def test_pipeline_outputs(run):
    root, _ = run
    out = root / "out"
    for name in ("checkpoint.pt", "metrics.json", "metrics.csv", "run.json", "config.yaml", "loss_log.csv"):
        assert (out / name).exists(), name
    m = json.loads((out / "metrics.json").read_text())
    assert m["n"] == 4
    assert set(m["mean"]) >= {"contact", "penetration_fraction", "fsr", "c_f1"}
    for split in ("train", "test", "library"):
        assert (root / "data" / f"{split}.npz").exists()


def test_rerun_metrics_byte_identical(run):
    root, call = run
    other = root / "rerun"
    ck = f"sample.checkpoint={root / 'out' / 'checkpoint.pt'}"
    assert call("sample", ck, out=other) == EXIT_OK
    assert call("evaluate", out=other) == EXIT_OK
    assert (other / "metrics.json").read_bytes() == (root / "out" / "metrics.json").read_bytes()


def test_streaming_sample_matches(run):
    root, call = run
    other = root / "stream"
    ck = f"sample.checkpoint={root / 'out' / 'checkpoint.pt'}"
    assert call("sample", ck, "sample.streaming=true", out=other) == EXIT_OK
    assert call("evaluate", out=other) == EXIT_OK
    assert (other / "metrics.json").read_bytes() == (root / "out" / "metrics.json").read_bytes()


def test_sweep_zero_row_is_baseline(run):
    root, call = run
    out = root / "sweep"
    ck = f"sample.checkpoint={root / 'out' / 'checkpoint.pt'}"
    assert call("sweep", ck, out=out) == EXIT_OK
    rows = list(csv.DictReader(open(out / "curve_omega2.csv")))
    assert [float(r["omega2"]) for r in rows] == [0.0, 3.0]
    assert call("sample", ck, "sample.omega2=0.0", out=root / "base") == EXIT_OK
    assert call("evaluate", out=root / "base") == EXIT_OK
    base = json.loads((root / "base" / "metrics.json").read_text())["mean"]
    for k, v in base.items():
        assert float(rows[0][k]) == v, k
    assert len(list(csv.DictReader(open(out / "curve_delta.csv")))) == 2


def test_analyze_and_augment(run):
    root, call = run
    out = root / "an"
    ck = f"sample.checkpoint={root / 'out' / 'checkpoint.pt'}"
    assert call("analyze-guidance", ck, out=out) == EXIT_OK
    s = json.loads((out / "guidance_directions.json").read_text())
    assert {"cfg_gt", "light_gt", "cfg_pen", "light_pen", "delta_pen", "sign_test_pen"} <= set(s)
    assert (out / "directions.csv").exists()
    assert call("augment", out=root / "aug") == EXIT_OK
    rows = list(csv.DictReader(open(root / "aug" / "quality.csv")))
    assert len(rows) == 2


def test_exit_codes(run, tmp_path):
    root, call = run
    assert main(["sample", "sample.foo=1"]) == EXIT_CONFIG
    assert call("sample", "sample.delta=500", f"sample.checkpoint={root / 'out' / 'checkpoint.pt'}", out=tmp_path / "a") == EXIT_CONFIG
    assert call("sample", f"sample.checkpoint={tmp_path / 'nope.pt'}", out=tmp_path / "b") == EXIT_RUNTIME
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_CONFIG


def test_console_entry_reports_unknown_key(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "lighthoi.cli", "evaluate", "evaluate.bogus=1", f"run.out_dir={tmp_path}"],
        capture_output=True, text=True,
    )
    assert r.returncode == EXIT_CONFIG
    assert "evaluate.bogus" in r.stderr
