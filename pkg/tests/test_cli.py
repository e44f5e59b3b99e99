import io
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from dssinet.cli import main
from dssinet.density import AnnotationSet, read_density, write_annotations, write_density
from dssinet.model import ModelParams, load_checkpoint, save_checkpoint, sidecar_path


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), stdout=out)
    text = out.getvalue()
    return code, (json.loads(text) if code == 0 else text)


@pytest.fixture
def ann_file(tmp_path):
    def make(points, w=40, h=30, name="a.json"):
        p = tmp_path / name
        write_annotations(p, AnnotationSet(w, h, points))
        return p

    return make


def tiny_train_config(tmp_path, **kw):
    cfg = {
        "model": {"widths": [4, 4, 4, 4], "convs_per_stage": 1, "head_width": 4},
        "data": {"scene": {"height": 32, "width": 32, "count_range": [2, 6], "r_max": 3.0}, "n_train": 2, "n_val": 1, "crop_size": 32, "batch": 1},
        "steps": 0,
        "seed": 5,
        "checkpoint_dir": str(tmp_path / "ckpt"),
    }
    cfg.update(kw)
    p = tmp_path / "train.json"
    p.write_text(json.dumps(cfg))
    return p


def fixture_model(path, per_pixel):
    """Constant-output model: count is per_pixel * H * W."""
    p = ModelParams.init(seed=0)
    for t in p.tensors.values():
        t.data[...] = 0
    p["side0.regress.bias"].data[...] = per_pixel * p.config.density_scale
    p["fuse.w0"].data[0, 0, 1, 1] = 1.0
    save_checkpoint(path, p)
    return path


def dataset_dir(root, items):
    root.mkdir()
    for i, (h, w, n) in enumerate(items):
        write_annotations(root / f"s{i}.json", AnnotationSet(w, h, [(1.0, 1.0)] * n))
        write_density(root / f"s{i}.img", np.zeros((h, w)))
    return root


# ---------------------------------------------------------------- gen-gt


def test_gen_gt_single_point(ann_file, tmp_path):
    out = tmp_path / "d.dmp"
    code, doc = run("gen-gt", "--annotations", str(ann_file([(20.0, 15.0)])), "--out", str(out))
    assert code == 0
    assert doc["count"] == 1 and doc["skipped_points"] == 0
    assert abs(doc["integral"] - 1.0) < 1e-9
    assert abs(read_density(out).sum() - 1.0) < 1e-9


def test_gen_gt_empty(ann_file, tmp_path):
    code, doc = run("gen-gt", "--annotations", str(ann_file([])), "--out", str(tmp_path / "d.dmp"))
    assert code == 0 and doc == {"count": 0, "integral": 0.0, "skipped_points": 0}


def test_gen_gt_skips_outside_and_writes_pgm(ann_file, tmp_path, caplog):
    code, doc = run("gen-gt", "--annotations", str(ann_file([(10.0, 10.0), (-4.0, 3.0)])), "--out", str(tmp_path / "d.dmp"), "--pgm", str(tmp_path / "d.pgm"), "--k", "1", "--beta", "0.1")
    assert code == 0 and doc["skipped_points"] == 1 and doc["count"] == 2
    assert (tmp_path / "d.pgm").read_bytes().startswith(b"P5\n40 30\n")
    assert "skipped 1" in caplog.text


def test_gen_gt_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code, _ = run("gen-gt", "--annotations", str(missing), "--out", str(tmp_path / "d.dmp"))
    assert code == 2 and str(missing) in capsys.readouterr().err


def test_gen_gt_malformed_names_field(tmp_path, capsys):
    p = tmp_path / "a.json"
    p.write_text('{"width": 10, "height": 10, "points": [[1, 2], [3, "x"]]}')
    code, _ = run("gen-gt", "--annotations", str(p), "--out", str(tmp_path / "d.dmp"))
    assert code == 2 and "points[1]" in capsys.readouterr().err


# ---------------------------------------------------------------- ssim


def maps(tmp_path, a, b):
    write_density(tmp_path / "a.dmp", a)
    write_density(tmp_path / "b.dmp", b)
    return "--a", str(tmp_path / "a.dmp"), "--b", str(tmp_path / "b.dmp")


def test_ssim_identical(tmp_path):
    x = np.random.default_rng(0).uniform(size=(40, 40))
    code, doc = run("ssim", *maps(tmp_path, x, x))
    assert code == 0
    assert abs(doc["dms_ssim"] - 1.0) < 1e-9 and abs(doc["loss"]) < 1e-9
    assert len(doc["per_scale"]) == 5


def test_ssim_values_add_up(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(32, 32))
    code, doc = run("ssim", *maps(tmp_path, x, 0.5 * x + 0.5 * rng.uniform(size=(32, 32))))
    assert code == 0 and 0 < doc["loss"] < 1
    assert doc["dms_ssim"] + doc["loss"] == pytest.approx(1.0, abs=1e-15)


def test_ssim_too_small(tmp_path, capsys):
    code, _ = run("ssim", *maps(tmp_path, np.zeros((8, 8)), np.zeros((8, 8))))
    assert code == 2 and "minimum size is 19x19" in capsys.readouterr().err


def test_ssim_shape_mismatch(tmp_path, capsys):
    code, _ = run("ssim", *maps(tmp_path, np.zeros((32, 32)), np.zeros((32, 40))))
    assert code == 2 and "shape mismatch" in capsys.readouterr().err


def test_ssim_config_from_env_dir(tmp_path, monkeypatch):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    (cfg_dir / "dms_ssim.json").write_text(json.dumps({"m": 3, "dilations": [1, 2, 3], "alphas": [1 / 3, 1 / 3, 1 / 3]}))
    x = np.random.default_rng(2).uniform(size=(24, 24))
    monkeypatch.setenv("DSSINET_CONFIG_DIR", str(cfg_dir))
    code, doc = run("ssim", *maps(tmp_path, x, x))
    assert code == 0 and len(doc["per_scale"]) == 3
    # an explicit bare name resolves inside the directory too
    (cfg_dir / "two.json").write_text(json.dumps({"m": 2, "dilations": [1, 2], "alphas": [0.5, 0.5]}))
    code, doc = run("ssim", *maps(tmp_path, x, x), "--config", "two.json")
    assert code == 0 and len(doc["per_scale"]) == 2


def test_ssim_bad_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"m": 5, "bogus": true}')
    x = np.zeros((32, 32))
    code, _ = run("ssim", *maps(tmp_path, x, x), "--config", str(tmp_path / "c.json"))
    assert code == 2 and "bogus" in capsys.readouterr().err


# ---------------------------------------------------------------- train / eval / inspect


def test_train_zero_steps_matches_fresh_init(tmp_path):
    code, doc = run("train", "--config", str(tiny_train_config(tmp_path)))
    assert code == 0 and doc["steps"] == 0 and doc["final_loss"] is None
    loaded, _ = load_checkpoint(doc["checkpoint"])
    init_seed = int(np.random.SeedSequence(5).generate_state(3)[0])
    fresh = ModelParams.init(loaded.config, seed=init_seed)
    for k, v in fresh.arrays().items():
        assert loaded.arrays()[k].tobytes() == v.tobytes()


def test_train_runs_and_logs(tmp_path):
    cfg = tiny_train_config(tmp_path, steps=2, val_every=1)
    code, doc = run("train", "--config", str(cfg), "--checkpoint-dir", str(tmp_path / "other"))
    assert code == 0 and doc["checkpoint"].startswith(str(tmp_path / "other"))
    lines = [json.loads(s) for s in (tmp_path / "other" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 1, 2, 2]
    assert math.isfinite(doc["final_loss"]) and doc["best_val_mae"] >= 0


def test_train_nan_exits_3(tmp_path, capsys):
    cfg = tiny_train_config(tmp_path, steps=2, optimizer={"lr": float("nan")})
    code, _ = run("train", "--config", str(cfg))
    assert code == 3 and "step 1" in capsys.readouterr().err
    assert (tmp_path / "ckpt" / "last_good.ntb").exists()


def test_train_needs_config(monkeypatch):
    monkeypatch.delenv("DSSINET_CONFIG_DIR", raising=False)
    assert run("train")[0] == 1


def test_eval_fixture(tmp_path):
    ckpt = fixture_model(tmp_path / "m.ntb", 10 / 256)
    data = dataset_dir(tmp_path / "data", [(16, 16, 12), (16, 32, 16)])
    code, doc = run("eval", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 0 and doc["n"] == 2
    assert round(doc["mae"], 6) == 3.0 and round(doc["mse"], 6) == round(math.sqrt(10), 6)
    assert doc["mae"] <= doc["mse"]


def test_eval_single_image(tmp_path):
    ckpt = fixture_model(tmp_path / "m.ntb", 3 / 256)
    data = dataset_dir(tmp_path / "data", [(16, 16, 7)])
    code, doc = run("eval", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 0 and doc["mae"] == doc["mse"] == pytest.approx(4.0)


def test_eval_hash_mismatch(tmp_path, capsys):
    ckpt = fixture_model(tmp_path / "m.ntb", 0.0)
    side = sidecar_path(ckpt)
    doc = json.loads(side.read_text())
    doc["backbone"]["sfem_iters"] = 3
    side.write_text(json.dumps(doc))
    code, _ = run("eval", "--checkpoint", str(ckpt), "--data", str(dataset_dir(tmp_path / "data", [(16, 16, 1)])))
    assert code == 2 and "hash mismatch" in capsys.readouterr().err


def test_eval_nan_weights_exit_3(tmp_path):
    ckpt = fixture_model(tmp_path / "m.ntb", float("nan"))
    code, _ = run("eval", "--checkpoint", str(ckpt), "--data", str(dataset_dir(tmp_path / "data", [(16, 16, 1)])))
    assert code == 3


def test_eval_bad_dataset(tmp_path, capsys):
    ckpt = fixture_model(tmp_path / "m.ntb", 0.0)
    assert run("eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "missing"))[0] == 2
    data = dataset_dir(tmp_path / "data", [(16, 16, 1)])
    (data / "s0.img").write_bytes(b"DMP1\x02")
    code, _ = run("eval", "--checkpoint", str(ckpt), "--data", str(data))
    assert code == 2 and "s0.img" in capsys.readouterr().err


def test_inspect_lists_sfem_tensors(tmp_path):
    ckpt = tmp_path / "m.ntb"
    save_checkpoint(ckpt, ModelParams.init(seed=1))
    code, doc = run("inspect", "--checkpoint", str(ckpt))
    assert code == 0
    names = [t["name"] for t in doc["tensors"]]
    sfem = [n for n in names if n.startswith("sfem")]
    assert len(sfem) == 16
    sizes = [2, 3, 3, 2]
    assert sorted(sfem) == sorted(f"sfem{g}.w_{i}_{j}" for g, n in enumerate(sizes) for i in range(n) for j in range(n) if i != j)
    assert doc["n_tensors"] == 57 and doc["n_params"] == 370658
    assert all(t["norm"] >= 0 for t in doc["tensors"])


def test_inspect_malformed_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "m.ntb"
    save_checkpoint(ckpt, ModelParams.init(seed=1))
    ckpt.write_bytes(b"NTB9" + ckpt.read_bytes()[4:])
    code, _ = run("inspect", "--checkpoint", str(ckpt))
    assert code == 2 and "offset 0" in capsys.readouterr().err


# ---------------------------------------------------------------- surface


@pytest.mark.parametrize("argv", [[], ["bogus"], ["ssim", "--a", "x"], ["gen-gt", "--k", "three", "--annotations", "a", "--out", "b"]])
def test_usage_errors_exit_1(argv):
    assert run(*argv)[0] == 1


def test_idempotent_outputs(ann_file, tmp_path):
    ann = ann_file([(5.0, 5.0), (12.5, 20.25), (30.0, 8.0)])
    docs = []
    for name in ("x.dmp", "y.dmp"):
        code, doc = run("--threads", "1", "gen-gt", "--annotations", str(ann), "--out", str(tmp_path / name))
        docs.append(doc)
    assert docs[0] == docs[1]
    assert (tmp_path / "x.dmp").read_bytes() == (tmp_path / "y.dmp").read_bytes()


def test_console_script_single_json_document(ann_file, tmp_path):
    ann = ann_file([(5.0, 5.0)])
    proc = subprocess.run(
        [sys.executable, "-m", "dssinet.cli", "-v", "gen-gt", "--annotations", str(ann), "--out", str(tmp_path / "d.dmp")],
        capture_output=True,
        text=True,
        env={**os.environ, "PYTHONWARNINGS": "ignore"},
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["count"] == 1
    assert proc.stdout.count("\n") == 1
