import json

import numpy as np
import pytest

from gascn.cli import main
from gascn.data import read_ply, write_ply, write_xyz
from gascn.geometry import PointCloud, nn_distance_field
from gascn.model import load_config, load_params

from conftest import small_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(stdout: str) -> dict:
    return json.loads(stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["gen-data", "--shapes", "10", "--views", "2", "--gt-points", "200", "--scan-points", "300",
                 "--resolution", "24", "--seed", "4", "--out", str(root / "ds")])
    assert code == 0
    return root / "ds" / "manifest.json"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    config = root / "run.json"
    config.write_text(json.dumps({"model": small_config().to_dict(),
                                  "train": {"epochs": 2, "batch_size": 4, "lr_initial": 1e-3, "eval_every": 1}}))
    ckpt = root / "model.gasc"
    assert main(["train", "--config", str(config), "--manifest", str(dataset), "--checkpoint", str(ckpt),
                 "--deterministic"]) == 0
    return config, ckpt


def test_gen_data_split_counts_and_rerun(capsys, tmp_path):
    argv = ["gen-data", "--shapes", "10", "--views", "1", "--gt-points", "100", "--scan-points", "200",
            "--resolution", "16", "--seed", "1"]
    code, out, _ = run(capsys, *argv, "--out", tmp_path / "a")
    assert code == 0
    assert last_json(out)["split_counts"] == {"train": 8, "val": 1, "test": 1}
    run(capsys, *argv, "--out", tmp_path / "b")
    a, b = sorted((tmp_path / "a").rglob("*.ply")), sorted((tmp_path / "b").rglob("*.ply"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_gen_data_missing_parent(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--shapes", "3", "--out", tmp_path / "missing" / "ds")
    assert code == 3 and "does not exist" in err


def test_train_zero_epochs_writes_initial_checkpoint(capsys, dataset, tmp_path):
    ckpt = tmp_path / "m.gasc"
    code, _, _ = run(capsys, "train", "--manifest", dataset, "--checkpoint", ckpt, "--epochs", "0")
    assert code == 0 and ckpt.is_file()
    assert (tmp_path / "m.gasc.metrics.ndjson").read_text() == ""


def test_train_log_has_one_line_per_epoch(trained):
    _, ckpt = trained
    lines = (ckpt.parent / "model.gasc.metrics.ndjson").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1]
    assert "val_fine_cd" in json.loads(lines[-1])


def test_train_is_reproducible(capsys, trained, dataset, tmp_path):
    config, ckpt = trained
    again = tmp_path / "again.gasc"
    code, _, _ = run(capsys, "train", "--config", config, "--manifest", dataset, "--checkpoint", again,
                     "--deterministic")
    assert code == 0
    assert again.read_bytes() == ckpt.read_bytes()


def test_config_errors_exit_2(capsys, dataset, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": 1}, "colour": "blue"}))
    code, _, err = run(capsys, "train", "--config", bad, "--manifest", dataset, "--checkpoint", tmp_path / "x")
    assert code == 2 and "colour" in err
    bad.write_text(json.dumps({"model": {"latent_dim": -3}}))
    code, _, _ = run(capsys, "train", "--config", bad, "--manifest", dataset, "--checkpoint", tmp_path / "x")
    assert code == 2


def test_complete_writes_outputs(capsys, trained, tmp_path, rng):
    _, ckpt = trained
    pts = rng.normal(size=(120, 3)) * [0.3, 0.2, 0.1] + [2.0, 0.0, 0.0]
    write_ply(PointCloud(pts), tmp_path / "scan.ply")
    write_xyz(pts[:60], tmp_path / "half.xyz")
    out_dir = tmp_path / "out"
    out_dir.mkdir()
    code, out, _ = run(capsys, "complete", "--checkpoint", ckpt, "--out", out_dir,
                       tmp_path / "scan.ply", tmp_path / "half.xyz")
    assert code == 0
    cfg = small_config()
    for stem in ("scan", "half"):
        coarse = read_ply(out_dir / f"{stem}_coarse.ply")
        fine = read_ply(out_dir / f"{stem}_fine.ply")
        normals = read_ply(out_dir / f"{stem}_coarse_normals.ply")
        assert len(coarse) == cfg.n_coarse and len(fine) == cfg.n_coarse * cfg.grid_n**2
        assert np.abs(np.linalg.norm(normals.normals, axis=1) - 1).max() < 1e-6
        # Output lives in the input's coordinates, not the unit ball.
        assert abs(fine.points[:, 0].mean() - 2.0) < 0.5
    assert len(last_json(out)["completed"]) == 2


def test_complete_reports_bad_input(capsys, trained, tmp_path):
    _, ckpt = trained
    (tmp_path / "tiny.xyz").write_text("0 0 0\n1 0 0\n")
    code, _, err = run(capsys, "complete", "--checkpoint", ckpt, "--out", tmp_path, tmp_path / "tiny.xyz")
    assert code == 3 and "tiny.xyz" in err
    code, _, _ = run(capsys, "complete", "--checkpoint", ckpt, "--out", tmp_path / "nope", tmp_path / "tiny.xyz")
    assert code == 3


def test_eval_report_and_distance_fields(capsys, trained, dataset, tmp_path):
    config, ckpt = trained
    dump = tmp_path / "fields"
    dump.mkdir()
    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--config", config, "--manifest", dataset,
                       "--dump-distance-fields", dump, "--report", tmp_path / "r.json")
    assert code == 0 and "overall" in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["n_instances"] == 2 and report["scale"] == 1000
    for variant in ("unsquared", "squared"):
        assert report[variant]["overall"] > 0 and sum(report[variant]["counts"].values()) == 2
    files = sorted(dump.glob("*_dist.ply"))
    assert len(files) == 2
    gt = read_ply(dataset.parent / "gt" / f"{files[0].name[:10]}.ply")
    field = read_ply(files[0])
    expected = nn_distance_field(field.points, gt.points).scalar_field
    assert np.allclose(field.scalar_field, expected, rtol=1e-8, atol=1e-12)


def test_register_identical_views(capsys, trained, tmp_path, rng):
    _, ckpt = trained
    pts = rng.normal(size=(80, 3)) * [0.4, 0.25, 0.1]
    write_ply(PointCloud(pts), tmp_path / "v.ply")
    code, out, _ = run(capsys, "register", "--checkpoint", ckpt, tmp_path / "v.ply", tmp_path / "v.ply")
    assert code == 0
    report = last_json(out)
    assert report["partial"]["mse"] == 0.0 and report["completed"]["mse"] < 1e-20
    assert np.allclose(report["partial"]["rotation"], np.eye(3))
    assert report["partial"]["translation"] == [0.0, 0.0, 0.0]


def test_register_degenerate_exit_5(capsys, trained, tmp_path):
    _, ckpt = trained
    line = np.stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)], 1)
    write_ply(PointCloud(line), tmp_path / "line.ply")
    code, _, _ = run(capsys, "register", "--checkpoint", ckpt, tmp_path / "line.ply", tmp_path / "line.ply")
    assert code == 5


def test_missing_checkpoint_exit_3(capsys, tmp_path):
    code, _, _ = run(capsys, "register", "--checkpoint", tmp_path / "none.gasc", "a.ply", "b.ply")
    assert code == 3


def test_train_variant_and_gat_layer_flags(capsys, dataset, tmp_path):
    for flags, check in ((["--variant", "model_b"], lambda c, p: c.variant == "model_b" and "gat.0.W" not in p),
                         (["--gat-layers", "2"], lambda c, p: c.num_gat_layers == 2 and "gat.1.W" in p)):
        ckpt = tmp_path / "v.gasc"
        code, _, _ = run(capsys, "train", "--manifest", dataset, "--checkpoint", ckpt, "--epochs", "0", *flags)
        cfg = load_config(ckpt)
        assert code == 0 and check(cfg, load_params(ckpt, cfg))


def test_train_non_finite_exit_4(capsys, dataset, tmp_path):
    config = tmp_path / "hot.json"
    # A huge learning rate drives the weights to overflow within a few steps.
    config.write_text(json.dumps({"model": small_config().to_dict(),
                                  "train": {"epochs": 30, "batch_size": 1, "lr_initial": 1e12}}))
    code, _, err = run(capsys, "train", "--config", config, "--manifest", dataset, "--checkpoint", tmp_path / "h")
    assert code == 4 and "epoch" in err
