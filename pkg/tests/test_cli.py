import json

import numpy as np
import pytest

import lgrnet.train as train_mod
from lgrnet import cli, dataio
from lgrnet.geometry import PointCloud
from lgrnet.inspection import read_grid
from lgrnet.lgr import voxel_coordinates
from lgrnet.train import dump_json, evaluate, load_model
from tiny import TINY_CFG, TINY_SCENE_CFG, tiny_config


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    (root / "scene.cfg").write_text(TINY_SCENE_CFG)
    return root


@pytest.fixture(scope="module")
def dataset(files):
    data = files / "data"
    assert cli.main(["gen", "--spec", str(files / "scene.cfg"), "--out", str(data),
                     "--count", "8", "--seed", "3"]) == 0
    return data


@pytest.fixture(scope="module")
def trained(files, dataset):
    out = files / "run"
    assert cli.main(["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset),
                     "--out", str(out)]) == 0
    return out / "model.ckpt"


def write_points(path, coords, feats=None):
    coords = np.asarray(coords, dtype=float)
    feats = np.ones((len(coords), 1)) if feats is None else feats
    dataio.save_points(path, PointCloud(coords, feats))
    return path


class TestGen:
    def test_layout(self, dataset):
        scenes = sorted(p.name for p in (dataset / "scenes").iterdir())
        assert scenes == sorted([f"{i:04d}.lgrpc" for i in range(8)] +
                                [f"{i:04d}.lgrgt" for i in range(8)])
        assert dataio.read_manifest(dataset, "train") == [f"{i:04d}" for i in range(6)]
        assert dataio.read_manifest(dataset, "val") == ["0006", "0007"]

    def test_same_seed_same_bytes(self, files, dataset, tmp_path):
        cli.main(["gen", "--spec", str(files / "scene.cfg"), "--out", str(tmp_path),
                  "--count", "8", "--seed", "3"])
        for p in sorted(dataset.rglob("*.*")):
            assert (tmp_path / p.relative_to(dataset)).read_bytes() == p.read_bytes(), p.name

    def test_different_seed_differs(self, files, dataset, tmp_path):
        cli.main(["gen", "--spec", str(files / "scene.cfg"), "--out", str(tmp_path),
                  "--count", "1", "--seed", "4"])
        assert (tmp_path / "scenes/0000.lgrpc").read_bytes() != \
            (dataset / "scenes/0000.lgrpc").read_bytes()

    def test_reloaded_dataset_validates(self, dataset):
        samples = dataio.load_split(dataset, "train") + dataio.load_split(dataset, "val")
        assert len(samples) == 8
        for s in samples:
            dataio.validate_sample(s, min_object_points=30)
            assert s.pc.n == 256 and s.pc.c == 1
            assert 1 <= len(s.boxes) <= 2


class TestExitCodes:
    def test_config_error(self, files, dataset, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("sp1.num_region = 3\n")
        assert cli.main(["train", "--config", str(bad), "--data", str(dataset),
                         "--out", str(tmp_path)]) == 2
        assert "sp1.num_region" in capsys.readouterr().err
        assert cli.main(["train", "--config", str(files / "tiny.cfg"), "--set", "grid.power=-1",
                         "--data", str(dataset), "--out", str(tmp_path)]) == 2
        assert cli.main(["gen", "--spec", str(files / "scene.cfg"), "--out", str(tmp_path),
                         "--count", "0"]) == 2

    def test_data_error(self, files, tmp_path, capsys):
        assert cli.main(["train", "--config", str(files / "tiny.cfg"),
                         "--data", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 3
        pts = tmp_path / "bad.lgrpc"
        pts.write_text("LGRPC1 2 1\n0 0 0 1\n0 0 nan 1\n")
        assert cli.main(["bench", "--config", str(files / "tiny.cfg"), "--points", str(pts)]) == 3
        assert ":3" in capsys.readouterr().err

    def test_numeric_error(self, files, dataset, tmp_path, monkeypatch):
        real = train_mod.detection_loss

        def poisoned(*args, **kwargs):
            loss, comps = real(*args, **kwargs)
            return loss * float("inf"), comps

        monkeypatch.setattr(train_mod, "detection_loss", poisoned)
        assert cli.main(["train", "--config", str(files / "tiny.cfg"), "--data", str(dataset),
                         "--out", str(tmp_path)]) == 4


class TestTrainEval:
    def test_train_outputs(self, trained):
        log = [json.loads(x) for x in (trained.parent / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [0]
        assert log[0]["lr"] == pytest.approx(0.001)

    def test_eval_files(self, files, dataset, trained, tmp_path):
        m, t = tmp_path / "metrics.json", tmp_path / "timing.json"
        assert cli.main(["eval", "--config", str(files / "tiny.cfg"), "--ckpt", str(trained),
                         "--data", str(dataset), "--out", str(m), "--timing-out", str(t)]) == 0
        metrics = json.loads(m.read_text())
        assert {"mAP@0.25", "mAP@0.5", "AP@0.25", "AP@0.5"} <= set(metrics)
        assert "seconds_per_scan" not in metrics
        assert json.loads(t.read_text())["seconds_per_scan"] > 0
        cfg = tiny_config()
        model, _ = load_model(cfg, trained)
        expect = evaluate(model, cfg, dataio.load_split(dataset, "val"))[0]
        assert m.read_text() == dump_json(expect)

    def test_eval_to_stdout(self, files, dataset, trained, capsys):
        assert cli.main(["eval", "--config", str(files / "tiny.cfg"), "--ckpt", str(trained),
                         "--data", str(dataset), "--split", "train"]) == 0
        assert json.loads(capsys.readouterr().out)["num_scenes"] == 6


class TestInspect:
    def run(self, files, pts, tmp_path, *extra):
        out = tmp_path / "grid.txt"
        assert cli.main(["inspect", "--config", str(files / "tiny.cfg"), "--points", str(pts),
                         "--centroid-index", "0", "--out", str(out), *extra]) == 0
        return read_grid(out)

    def test_single_point_region(self, files, tmp_path):
        pts = write_points(tmp_path / "one.lgrpc", [[0.2, -0.1, 0.4]])
        grid = self.run(files, pts, tmp_path, "--set", "grid.radius_scale=2.5")
        r = 2.5 * 0.5 * np.sqrt(3 * 0.5 ** 2)
        dist = np.linalg.norm(voxel_coordinates(tiny_config().detector.backbone.stages[0].grid),
                              axis=-1)
        assert grid.shape == (5, 5, 5, 1)
        np.testing.assert_array_equal(grid[..., 0] != 0, dist < r)
        np.testing.assert_allclose(grid[dist < r, 0], 1.0, rtol=1e-12)

    def test_dump_parses_to_rendered_tensor(self, files, tmp_path):
        from lgrnet.inspection import render_region
        rng = np.random.default_rng(0)
        coords = rng.uniform(-0.5, 0.5, (300, 3))
        pts = write_points(tmp_path / "c.lgrpc", coords, rng.normal(size=(300, 2)))
        grid = self.run(files, pts, tmp_path)
        spec = tiny_config().detector.backbone.stages[0]
        pc = dataio.load_points(pts)
        _, rendered = render_region(pc, 0, spec.region, spec.grid, seed=0)
        np.testing.assert_array_equal(grid, rendered.values[0])

    def test_active_set_matches_oracle_support(self, files, tmp_path):
        rng = np.random.default_rng(1)
        coords = rng.uniform(-1, 1, (400, 3))
        pts = write_points(tmp_path / "s.lgrpc", coords)
        grid = self.run(files, pts, tmp_path, "--set", "sp1.neighbors=400")
        # brute force: every point in the cube, normalized, against every voxel
        pc = dataio.load_points(pts)
        e = 0.3
        d = pc.coords - pc.coords[0]
        local = d[np.all(np.abs(d) <= e, axis=1)] / e
        assert 5 < len(local) < 400
        vox = voxel_coordinates(tiny_config().detector.backbone.stages[0].grid)
        r = 0.5 * np.sqrt(3 * 0.5 ** 2)
        dmin = np.linalg.norm(vox[..., None, :] - local, axis=-1).min(axis=-1)
        np.testing.assert_array_equal(grid[..., 0] != 0, dmin < r)

    def test_bad_index(self, files, tmp_path):
        pts = write_points(tmp_path / "one.lgrpc", [[0, 0, 0]])
        assert cli.main(["inspect", "--config", str(files / "tiny.cfg"), "--points", str(pts),
                         "--centroid-index", "5"]) == 3

    def test_render_inspect_alias_to_stdout(self, files, tmp_path, capsys):
        pts = write_points(tmp_path / "one.lgrpc", [[0, 0, 0]])
        assert cli.main(["render-inspect", "--config", str(files / "tiny.cfg"),
                         "--points", str(pts), "--centroid-index", "0"]) == 0
        assert capsys.readouterr().out.startswith("LGRGRID1 5 5 5 1\n")

    def test_seed_trace(self, files, dataset, trained, tmp_path):
        pts = dataset / "scenes" / "0000.lgrpc"
        trace_path = tmp_path / "trace.json"
        self.run(files, pts, tmp_path, "--ckpt", str(trained), "--trace-out", str(trace_path))
        trace = json.loads(trace_path.read_text())
        seeds, props = trace["seeds"], trace["proposals"]
        cfg = tiny_config()
        assert len(seeds) == cfg["sp2.num_regions"]
        assert len(props) == cfg["head.num_proposals"]
        pc = dataio.load_points(pts)
        for s in seeds:
            np.testing.assert_allclose(s["coords"], pc.coords[s["input_index"]], atol=1e-12)
            for p in s["proposals"]:
                assert s["index"] in props[p]["members"]
        for p in props:
            for m in p["members"]:
                assert p["index"] in seeds[m]["proposals"]
        assert any(p["kept"] for p in props)


class TestBench:
    def bench(self, files, pts, tmp_path, *extra):
        out = tmp_path / "bench.json"
        assert cli.main(["bench", "--config", str(files / "tiny.cfg"), "--points", str(pts),
                         "--out", str(out), *extra]) == 0
        return json.loads(out.read_text())

    def test_all_stages_positive(self, files, dataset, tmp_path):
        res = self.bench(files, dataset / "scenes/0000.lgrpc", tmp_path, "--repeat", "1")
        for stage in ("sampling", "query", "render", "cnn", "head"):
            assert res["stages"][stage] > 0, stage
        assert res["total"] == pytest.approx(sum(res["stages"].values()))

    def test_render_scales_with_region_count(self, files, tmp_path):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-2, 2, (2048, 3))
        pts = write_points(tmp_path / "big.lgrpc", coords, coords[:, 2:] + 2)
        widen = ["--set", "sp1.neighbors=32"]
        base = self.bench(files, pts, tmp_path, "--repeat", "5", *widen)
        doubled = self.bench(files, pts, tmp_path, "--repeat", "5", *widen,
                             "--set", "sp1.num_regions=128", "--set", "sp2.num_regions=64",
                             "--set", "sp3.num_regions=32", "--set", "sp4.num_regions=16")
        ratio = doubled["stages"]["render"] / base["stages"]["render"]
        assert 2 / 3 <= ratio <= 6, ratio

    def test_timers_are_disjoint(self, files, dataset, tmp_path):
        from lgrnet.timing import timed_forward
        import time
        cfg = tiny_config()
        model = train_mod.build_model(cfg)
        pc = dataio.load_points(dataset / "scenes/0000.lgrpc")
        t0 = time.perf_counter()
        dets, stages = timed_forward(model, pc.coords[None], pc.feats[None], [0])
        wall = time.perf_counter() - t0
        assert sum(stages.values()) <= wall
        # same detections as the untimed path
        model.eval()
        from lgrnet.detect import decode
        from lgrnet.nncore import no_grad
        with no_grad():
            props = model(pc.coords[None], pc.feats[None], [0])[2]
        ref = decode(props, nms_iou=0.25)[0]
        np.testing.assert_allclose(dets[0].boxes, ref.boxes, atol=1e-12)

    def test_bad_repeat(self, files, dataset):
        assert cli.main(["bench", "--config", str(files / "tiny.cfg"),
                         "--points", str(dataset / "scenes/0000.lgrpc"), "--repeat", "0"]) == 3


def test_ablate_small(files, dataset, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(files / "tiny.cfg"), "--data", str(dataset),
                     "--out", str(out), "--seeds", "0", "1",
                     "--variant", "conv1x1:sp.kernel_size=1"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["val_mAP@0.25"]) == {"base", "conv1x1"}
    assert set(summary["val_mAP@0.25"]["base"]) == {"0", "1"}
    for v in summary["val_mAP@0.25"].values():
        assert all(0 <= x <= 1 for x in v.values())
    assert (out / "conv1x1_seed1" / "model.ckpt").exists()


def test_ablate_rejects_typo_before_training(files, dataset, tmp_path):
    assert cli.main(["ablate", "--config", str(files / "tiny.cfg"), "--data", str(dataset),
                     "--out", str(tmp_path), "--variant", "x:sp.kernel=1"]) == 2
    assert not (tmp_path / "base_seed0").exists()
