import json

import numpy as np
import pytest

from holochroma import camera_model as cm
from holochroma.cli import main
from holochroma.colorimetry import ColorSpace, holo, laser_spectrum
from holochroma.imageio import read_pfm, write_png


@pytest.fixture(scope="module")
def system_json(tmp_path_factory):
    d = tmp_path_factory.mktemp("sys")
    cfg = d / "desk.json"
    cfg.write_text(json.dumps({"size": 16, "camera_mode": "synthetic", "grid": [6, 6, 6], "epochs": 5}))
    assert main(["build-system", "--config", str(cfg), "--out", str(d / "system.json")]) == 0
    return d / "system.json"


@pytest.fixture(scope="module")
def target_pfm(tmp_path_factory):
    d = tmp_path_factory.mktemp("tgt")
    img = np.random.default_rng(0).uniform(0.2, 0.8, (16, 16, 3))
    write_png(d / "img.png", img)
    assert main(["prepare-target", "--in", str(d / "img.png"), "--encoding", "srgb", "--out", str(d / "t.pfm")]) == 0
    return d / "t.pfm"


def test_build_colorspace_matches_library(tmp_path, capsys):
    paths = []
    for ch in "rgb":
        p = tmp_path / f"{ch}.csv"
        laser_spectrum(ch).to_csv(p)
        paths.append(str(p))
    out = tmp_path / "cs.json"
    assert main(["build-colorspace", "--spd-r", paths[0], "--spd-g", paths[1], "--spd-b", paths[2],
                 "--white", "d65", "--out", str(out)]) == 0
    np.testing.assert_allclose(ColorSpace.load(out).m_rgb_to_xyz, holo().m_rgb_to_xyz, rtol=1e-12)
    assert len(json.loads(capsys.readouterr().out)) in (3, 9)


def test_dataset_and_training(tmp_path):
    data = tmp_path / "data.csv"
    assert main(["make-synth-dataset", "--grid", "6x6x6", "--out", str(data)]) == 0
    ds = cm.ColorDataset.from_csv(data)
    assert len(ds) > 100
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 3, "batch_size": 64}))
    out = tmp_path / "mlp.json"
    assert main(["train-mlp", "--data", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    net = cm.MLPParams.load(out)
    assert net.layer_dims == (3, 256, 128, 64, 32, 3)
    rows = (tmp_path / "mlp.log.csv").read_text().strip().splitlines()
    assert len(rows) == 4


def test_seed_environment_override(tmp_path, monkeypatch, system_json, target_pfm):
    base = ["optimize", "--target", str(target_pfm), "--system", str(system_json), "--iters", "2"]
    assert main(base + ["--seed", "7", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("HOLOCHROMA_SEED", "7")
    assert main(base + ["--seed", "0", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "config.json").read_text())["optimization"]["seed"] == 7
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    monkeypatch.setenv("HOLOCHROMA_SEED", "seven")
    assert main(base + ["--out", str(tmp_path / "c")]) == 2


def test_fit_ccm_command(tmp_path):
    rng = np.random.default_rng(0)
    ref = rng.uniform(0.05, 0.9, (24, 3))
    composite = np.array([[1.3, -0.2, -0.1], [-0.1, 1.2, -0.1], [0.0, -0.2, 1.2]])
    cap = ref @ np.linalg.inv(composite).T
    np.savetxt(tmp_path / "cap.csv", cap, delimiter=",", header="r,g,b", comments="")
    np.savetxt(tmp_path / "ref.csv", ref, delimiter=",", header="r,g,b", comments="")
    out = tmp_path / "ccm.json"
    assert main(["fit-ccm", "--captured", str(tmp_path / "cap.csv"), "--reference", str(tmp_path / "ref.csv"),
                 "--out", str(out)]) == 0
    got = np.array(json.loads(out.read_text())["composite"]).reshape(3, 3)
    np.testing.assert_allclose(got, composite, atol=1e-3)


def test_prepare_target_writes_source_sidecar(target_pfm):
    t = read_pfm(target_pfm)
    src = read_pfm(target_pfm.with_name("t_source.pfm"))
    assert t.shape == src.shape == (16, 16, 3)
    assert t.min() >= 0 and t.max() <= 1


def test_optimize_and_evaluate(tmp_path, system_json, target_pfm):
    runs = []
    for method, extra in [("pacolorholo", []), ("pacolorholo", ["--ablate", "cbc"]), ("citl", []), ("citl-ccm", [])]:
        out = tmp_path / f"run{len(runs)}"
        assert main(["optimize", "--method", method, "--target", str(target_pfm), "--system", str(system_json),
                     "--iters", "4", "--seed", "1", *extra, "--out", str(out)]) == 0
        runs.append(str(out))
    first = tmp_path / "run0"
    for name in ("config.json", "loss.csv", "phase_r.png", "phase_g.png", "phase_b.png", "captured_raw.pfm",
                 "restored_holo.pfm", "result.json"):
        assert (first / name).exists(), name
    assert len((first / "loss.csv").read_text().strip().splitlines()) == 5
    assert json.loads((first / "result.json").read_text())["laser_updates"] == [2]
    assert json.loads((tmp_path / "run1" / "result.json").read_text())["laser_updates"] == []

    report = tmp_path / "report.json"
    assert main(["evaluate", "--runs", *runs, "--out", str(report)]) == 0
    blob = json.loads(report.read_text())
    assert [r["method"] for r in blob["rows"]] == ["pacolorholo", "pacolorholo-no-cbc", "citl", "citl_ccm"]
    assert all(np.isfinite(r["psnr_db"]) for r in blob["rows"])


def test_optimize_is_reproducible(tmp_path, system_json, target_pfm):
    for sub in ("a", "b"):
        assert main(["optimize", "--target", str(target_pfm), "--system", str(system_json), "--iters", "4",
                     "--out", str(tmp_path / sub)]) == 0
    for name in ("loss.csv", "result.json", "restored_holo.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_input_exits_2(tmp_path, system_json, target_pfm):
    base = ["optimize", "--target", str(target_pfm), "--system", str(system_json), "--out", str(tmp_path / "x")]
    assert main(base + ["--ablate", "cst,warp"]) == 2
    assert main(base + ["--iters", "3"]) == 2
    assert main(base + ["--perturbation", "1,0,1"]) == 2
    assert main(["optimize", "--target", str(tmp_path / "nope.pfm"), "--system", str(system_json),
                 "--out", str(tmp_path / "y")]) == 2
    assert main(["make-synth-dataset", "--grid", "4x4", "--out", str(tmp_path / "d.csv")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["prepare-target", "--in", "a.png", "--encoding", "rec2020", "--out", "t.pfm"])
    assert exc.value.code == 2


def test_numerical_failure_exits_3(tmp_path):
    data = tmp_path / "data.csv"
    assert main(["make-synth-dataset", "--grid", "5x5x5", "--out", str(data)]) == 0
    lines = data.read_text().splitlines()
    cells = lines[1].split(",")
    cells[3] = "nan"
    lines[1] = ",".join(cells)
    data.write_text("\n".join(lines) + "\n")
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 2}))
    assert main(["train-mlp", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == 3
