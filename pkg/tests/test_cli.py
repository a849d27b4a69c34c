import csv
import json

import numpy as np
import pytest

from telereg.cli import main
from telereg.dataset import list_samples, read_manifest, read_pair
from telereg.plotting import SchemaError, plot_runs


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """make-shapes -> gen-data -> a short tiny training run."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["--quiet", "make-shapes", "--out", str(root / "shapes"), "--category", "chair", "--count", "3", "--seed", "1"]) == 0
    args = ["--quiet", "gen-data", "--shapes", str(root / "shapes"), "--category", "chair", "--count", "4", "--seed", "0",
            "--split", "0.5,0,0.5"]
    assert main(args + ["--out", str(root / "data")]) == 0
    cfg = {"width": "tiny", "num_points": 64, "batch_size": 2, "iterations": 2, "lr": 1e-3,
           "val_every": 0, "checkpoint_every": 0, "train_split": "train"}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["--quiet", "train", "--data", str(root / "data"), "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    return root


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path), "--category", "chair", "--count", "1", "--seed", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--shapes", "s", "--out", "o", "--category", "c", "--count", "1", "--seed", "0", "--overlap", "0.95"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["plot", "--runs", "a.csv", "--out", "chart.txt"])
    assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path):
    rc = main(["--quiet", "gen-data", "--shapes", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
               "--category", "chair", "--count", "1", "--seed", "0"])
    assert rc == 1
    run = json.loads((tmp_path / "o" / "run.json").read_text())
    assert run["status"] == "failed" and "does not exist" in run["error"]


def test_wrong_shape_size_is_rejected(tmp_path):
    (tmp_path / "shapes").mkdir()
    np.savetxt(tmp_path / "shapes" / "bad.xyz", np.zeros((10, 3)))
    rc = main(["--quiet", "gen-data", "--shapes", str(tmp_path / "shapes"), "--out", str(tmp_path / "o"),
               "--category", "chair", "--count", "1", "--seed", "0"])
    assert rc == 1


def test_gen_data_is_byte_identical(workspace, tmp_path):
    args = ["--quiet", "gen-data", "--shapes", str(workspace / "shapes"), "--category", "chair", "--count", "4",
            "--seed", "0", "--split", "0.5,0,0.5", "--out", str(tmp_path / "again")]
    assert main(args) == 0
    first = sorted(p.relative_to(workspace / "data") for p in (workspace / "data").rglob("*") if p.is_file() and p.name != "run.json")
    second = sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file() and p.name != "run.json")
    assert first == second and len(first) > 4
    for rel in first:
        assert (workspace / "data" / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_gen_data_layout(workspace):
    manifest = read_manifest(workspace / "data")
    assert manifest["count_requested"] == 4 and len(manifest["samples"]) == 4
    run = json.loads((workspace / "data" / "run.json").read_text())
    assert run["command"] == "gen-data" and run["seed"] == 0 and run["status"] == "ok"
    pair = read_pair(list_samples(workspace / "data")[0].path)
    assert pair.p1.shape == (2048, 3)


def test_gen_data_overlap(workspace, tmp_path):
    shapes = tmp_path / "shapes"
    shapes.mkdir()
    from telereg.pointcloud import save_cloud
    from telereg.shapes import make_shape

    # shapes that admit the target overlap are rare; pool a few that do
    for cat, seed in (("box", 0), ("table", 1), ("chair", 1), ("plane", 2)):
        save_cloud(shapes / f"{cat}{seed}.xyz", make_shape(cat, np.random.default_rng(seed)))
    assert main(["--quiet", "gen-data", "--shapes", str(shapes), "--out", str(tmp_path / "ov"), "--category", "mixed",
                 "--count", "8", "--seed", "0", "--overlap", "0.4"]) == 0
    refs = list_samples(tmp_path / "ov")
    assert refs
    for ref in refs:
        assert 0.36 <= read_pair(ref.path).overlap_iou <= 0.44


def test_train_outputs(workspace):
    run = workspace / "run"
    rows = _read_csv(run / "train_log.csv")
    assert [r["iteration"] for r in rows] == ["1", "2"]
    assert (run / "checkpoints" / "final" / "manifest.json").exists()
    meta = json.loads((run / "run.json").read_text())
    assert meta["train_config"]["num_points"] == 64


def test_eval_oracle_registration_and_aggregate(workspace):
    out = workspace / "eval_oracle"
    assert main(["--quiet", "eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "checkpoints" / "final"),
                 "--out", str(out), "--split", "train", "--oracle-registration"]) == 0
    rows = _read_csv(out / "eval.csv")
    assert rows[-1]["category"] == "average"
    assert float(rows[-1]["e_theta"]) == 0.0 and float(rows[-1]["e_t"]) == 0.0
    per = _read_csv(out / "eval_samples.csv")
    for col in ("e_emd_g", "e_emd_f", "e_cd_g", "e_cd_f"):
        assert float(rows[-1][col]) == pytest.approx(np.mean([float(r[col]) for r in per]), rel=1e-12)
    assert int(rows[-1]["n_samples"]) == len(per)


def test_eval_empty_split_fails(workspace, tmp_path):
    rc = main(["--quiet", "eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "checkpoints" / "final"),
               "--out", str(tmp_path / "e"), "--split", "val"])
    assert rc == 1


def test_stress_and_plot(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoints" / "final")
    base = ["--quiet", "stress", "--data", str(workspace / "data"), "--checkpoint", ck, "--split", "train"]
    assert main(base + ["--out", str(tmp_path / "s1"), "--noise", "0", "0.03", "--outliers", "10", "--filter"]) == 0
    assert main(base + ["--out", str(tmp_path / "s2"), "--noise", "0", "0.03", "--outliers", "10", "--filter", "--seed", "1"]) == 0
    rows = _read_csv(tmp_path / "s1" / "stress.csv")
    assert [(r["setting"], r["value"], r["filter"]) for r in rows] == [
        ("noise", "0.0", "0"), ("noise", "0.03", "0"), ("outliers", "10", "0"), ("outliers", "10", "1")
    ]
    chart = tmp_path / "chart.png"
    assert main(["--quiet", "plot", "--runs", str(tmp_path / "s1"), str(tmp_path / "s2" / "stress.csv"), "--out", str(chart)]) == 0
    assert chart.stat().st_size > 0
    merged = _read_csv(tmp_path / "chart.csv")
    assert len({r["run"] for r in merged}) == 2 and len(merged) == 8
    first = (tmp_path / "chart.csv").read_bytes()
    assert main(["--quiet", "plot", "--runs", str(tmp_path / "s1"), str(tmp_path / "s2" / "stress.csv"), "--out", str(chart)]) == 0
    assert (tmp_path / "chart.csv").read_bytes() == first
    assert json.loads((tmp_path / "chart.run.json").read_text())["status"] == "ok"


def test_plot_schema_errors(workspace, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("category,e_theta,e_t\nchair,1,2\n")
    with pytest.raises(SchemaError, match="closest is 'eval'"):
        plot_runs([bad], tmp_path / "x.png")
    with pytest.raises(SchemaError, match="mix schemas"):
        plot_runs([workspace / "run" / "train_log.csv", workspace / "eval_oracle" / "eval.csv"], tmp_path / "x.png")
    with pytest.raises(SchemaError, match="metric"):
        plot_runs([workspace / "eval_oracle" / "eval.csv"], tmp_path / "x.png", metric="nope")
    assert main(["--quiet", "plot", "--runs", str(bad), "--out", str(tmp_path / "y.png")]) == 1


def test_plot_train_logs(workspace, tmp_path):
    merged = plot_runs([workspace / "run"], tmp_path / "loss.svg")
    assert (tmp_path / "loss.svg").exists() and len(_read_csv(merged)) == 2
