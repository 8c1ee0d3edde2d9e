import csv
import subprocess
import sys

import numpy as np
import pytest

from tofjoint import formats
from tofjoint.cli import main, run
from tofjoint.geometry import CameraIntrinsics, DepthMap, PointCloud, RigidTransform, transform
from tofjoint.scenegen import calibration_target

K = CameraIntrinsics(20.0, 20.0, 9.5, 7.5, 20, 16)
SCENE = "seed 1\nsphere 10 0 600 100\nbackground 0.3 0.1 -1 -750\n"


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "scene.txt").write_text(SCENE)
    formats.write_intrinsics(tmp_path / "k.txt", K)
    return tmp_path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_scene(ws):
    res = run(["gen-scene", "scene.txt", "k.txt", "s"])
    assert res.exit_code == 0
    assert res.artifacts == ["s.depth.tfdr", "s.normal.tfnr", "s.ply"]
    assert all((ws / a).exists() for a in res.artifacts)


def test_gen_scene_errors(ws):
    assert main(["gen-scene", "nope.txt", "k.txt", "s"]) == 2
    (ws / "empty.txt").write_text("# nothing\n")
    assert main(["gen-scene", "empty.txt", "k.txt", "s"]) == 1
    (ws / "junk.txt").write_text("sphere 1 2\n")
    assert main(["gen-scene", "junk.txt", "k.txt", "s"]) == 1
    assert main(["no-such-command"]) == 1


def test_simulate_noiseless_round_trip_and_outputs(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    res = run(["simulate", "s.depth.tfdr", "sim"])
    assert res.exit_code == 0 and len(res.artifacts) == 3
    gt = formats.read_depth("s.depth.tfdr")
    dec = formats.read_depth("sim.depth.tfdr")
    assert np.abs(dec.values - gt.values)[gt.mask].max() < 0.1
    res = run(["simulate", "s.depth.tfdr", "only", "--outputs", "depth"])
    assert res.artifacts == ["only.depth.tfdr"]
    assert main(["simulate", "s.depth.tfdr", "x", "--outputs", "phase"]) == 1


def test_simulate_frames_average_noise(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    gt = formats.read_depth("s.depth.tfdr")
    errs = {}
    for n in (1, 10):
        main(["--seed", "5", "simulate", "s.depth.tfdr", f"f{n}", "--noise-sigma", "0.02", "--frames", str(n)])
        d = formats.read_depth(f"f{n}.depth.tfdr")
        m = d.mask & gt.mask
        errs[n] = np.sqrt(np.mean((d.values - gt.values)[m] ** 2))
    assert 0.6 < errs[10] * np.sqrt(10) / errs[1] < 1.4


def test_align_identity_known_and_too_few_points(ws):
    src = calibration_target(np.random.default_rng(0))
    t = RigidTransform.from_axis_angle((1, 0, 1), np.radians(8), (20, -10, 5))
    formats.write_ply("src.ply", src)
    formats.write_ply("tgt.ply", transform(src, t))
    assert main(["align", "src.ply", "src.ply", "-o", "id.txt"]) == 0
    deg, mm = formats.read_transform("id.txt").error_to(RigidTransform.identity())
    assert deg < 1e-6 and mm < 1e-6
    src2 = calibration_target(np.random.default_rng(1))
    formats.write_ply("src2.ply", src2)
    formats.write_ply("tgt2.ply", transform(src2, t))
    assert main(["align", "src.ply", "tgt.ply", "--pairs", "src2.ply:tgt2.ply", "-o", "t.txt"]) == 0
    deg, mm = formats.read_transform("t.txt").error_to(t)
    assert deg < 0.01 and mm < 0.05  # float32 PLY storage limits precision
    assert "# scenes = 2" in (ws / "t.txt").read_text()
    formats.write_ply("two.ply", PointCloud(np.array([[0, 0, 1.0], [1, 0, 1.0]])))
    assert main(["align", "two.ply", "tgt.ply", "-o", "x.txt"]) == 1
    assert main(["align", "src.ply", "tgt.ply", "--pairs", "bad", "-o", "x.txt"]) == 1


def test_optimize_perfect_init_zero_trace(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    res = run(["optimize", "s.depth.tfdr", "s.ply", "s.depth.tfdr", "k.txt", "o", "--steps", "3"])
    assert res.exit_code == 0
    rows = read_csv("o.trace.csv")
    # the PLY holds float32 coordinates, so the Chamfer term is zero only to storage precision
    assert all(float(r["total"]) < 1e-6 for r in rows)
    assert all(float(r["l1_term"]) == 0 for r in rows[:1])


def test_optimize_noisy_improves(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    gt = formats.read_depth("s.depth.tfdr")
    rng = np.random.default_rng(0)
    formats.write_depth("noisy.tfdr", DepthMap(gt.values + rng.normal(0, 8, gt.shape), gt.mask))
    noisy = formats.read_depth("noisy.tfdr")
    assert main(["optimize", "noisy.tfdr", "s.ply", "s.depth.tfdr", "k.txt", "o", "--steps", "30",
                 "--w-chamfer", "0.05", "--no-normalize-chamfer"]) == 0
    out = formats.read_depth("o.depth.tfdr")
    assert np.abs(out.values - gt.values)[gt.mask].mean() < np.abs(noisy.values - gt.values)[gt.mask].mean()
    assert main(["optimize", "noisy.tfdr", "s.ply", "s.depth.tfdr", "k.txt", "u", "--steps", "3",
                 "--uniform-error", "2", "--no-jitter"]) == 0
    assert {r["selected_jitter"] for r in read_csv("u.trace.csv")} == {"none"}


def test_refine(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    assert main(["refine", "s.depth.tfdr", "k.txt", "r", "--normals", "s.normal.tfnr", "--iterations", "2"]) == 0
    assert main(["refine", "s.depth.tfdr", "k.txt", "r2", "--estimate-normals"]) == 0
    assert main(["refine", "s.depth.tfdr", "k.txt", "r3", "--estimate-normals", "--window", "4"]) == 1
    assert main(["refine", "s.depth.tfdr", "k.txt", "r4"]) == 1


def test_eval_self_bias_and_disjoint(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    assert main(["eval", "s.depth.tfdr", "k.txt", "--gt-depth", "s.depth.tfdr", "-o", "self.csv"]) == 0
    row = read_csv("self.csv")[0]
    assert float(row["mae_mm"]) == 0 and float(row["rmse_mm"]) == 0 and float(row["normal_mae_rad"]) < 1e-6
    assert main(["eval", "s.depth.tfdr", "k.txt", "--gt-ply", "s.ply", "-o", "ply.csv"]) == 0
    assert float(read_csv("ply.csv")[0]["mae_mm"]) < 1e-3  # float32 PLY coordinates
    formats.write_depth("g.tfdr", DepthMap.from_array(np.full(K.shape, 1000.0)))
    formats.write_depth("p.tfdr", DepthMap.from_array(np.full(K.shape, 1010.0)))
    main(["eval", "p.tfdr", "k.txt", "--gt-depth", "g.tfdr", "-o", "bias.csv"])
    row = read_csv("bias.csv")[0]
    assert float(row["mae_mm"]) == 10 and float(row["rmse_mm"]) == 10 and float(row["abs_rel"]) == 0.01
    half = np.full(K.shape, np.nan)
    half[:, :10] = 1000.0
    formats.write_depth("left.tfdr", DepthMap.from_array(half))
    formats.write_depth("right.tfdr", DepthMap.from_array(half[:, ::-1]))
    assert main(["eval", "left.tfdr", "k.txt", "--gt-depth", "right.tfdr", "-o", "x.csv"]) == 3


def test_eval_loss(ws):
    main(["gen-scene", "scene.txt", "k.txt", "s"])
    assert main(["eval-loss", "s.depth.tfdr", "s.depth.tfdr", "s.ply", "k.txt", "-o", "l.csv",
                 "--pred-normals", "s.normal.tfnr", "--gt-normals", "s.normal.tfnr"]) == 0
    row = read_csv("l.csv")[0]
    assert float(row["reweighted_l1"]) == 0 and float(row["cosine"]) < 1e-6
    assert row["selected_jitter"] == "0"


def test_threads_flag_restores_default(ws):
    from tofjoint import nnsearch

    main(["gen-scene", "scene.txt", "k.txt", "s"])
    assert main(["--threads", "0", "eval", "s.depth.tfdr", "k.txt", "--gt-ply", "s.ply", "-o", "m.csv"]) == 0
    assert nnsearch.workers == 1


def test_module_entry_point(ws):
    proc = subprocess.run([sys.executable, "-m", "tofjoint", "gen-scene", "missing.txt", "k.txt", "s"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "I/O error" in proc.stderr
