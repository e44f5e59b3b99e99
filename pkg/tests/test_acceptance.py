"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS|FAIL`` line, repeated in the
terminal summary.
"""

import contextlib
import io
import json
import math
import time

import numpy as np

from dssinet import tensor as T
from dssinet.cli import main
from dssinet.density import (
    AnnotationSet,
    decode_density,
    encode_density,
    render_density,
    write_annotations,
    write_density,
)
from dssinet.model import ModelParams, forward, save_checkpoint
from dssinet.ntb import decode_ntb, encode_ntb
from dssinet.sfem import SfemParams, mean_field_refine, mean_field_refine_reference
from dssinet.ssim import DmsSsimConfig, dms_ssim, dms_ssim_grad, dms_ssim_loss, receptive_fields
from dssinet.train import TrainConfig, evaluate, make_dataset, moving_average, report, train

from . import oracles as O
from .conftest import ACCEPTANCE_LINES
from . import test_density
from .test_ssim import fd_batched, pair


@contextlib.contextmanager
def criterion(n, budget_s, capsys):
    """Times the block, checks the budget and prints the verdict line."""
    notes = []
    t0 = time.perf_counter()
    ok = False
    try:
        yield notes
        ok = True
    finally:
        dt = time.perf_counter() - t0
        within = dt < budget_s
        verdict = "PASS" if ok and within else "FAIL"
        detail = "; ".join(notes)
        line = f"criterion {n}: {verdict} ({dt:.1f}s of {budget_s:g}s{'; ' + detail if detail else ''})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    assert within, f"criterion {n} took {dt:.1f}s, budget {budget_s}s"


def run_cli(*argv):
    out = io.StringIO()
    code = main(list(argv), stdout=out)
    return code, out.getvalue()


def test_criterion_1_receptive_fields(capsys):
    with criterion(1, 1.0, capsys) as notes:
        assert receptive_fields(5, [1, 2, 3, 6, 9]) == [5, 13, 25, 49, 85]
        assert receptive_fields(5, [1, 1, 1, 1, 1]) == [5, 9, 13, 17, 21]
        notes.append("[5, 13, 25, 49, 85] and [5, 9, 13, 17, 21]")


def test_criterion_2_dms_ssim_oracle(capsys):
    with criterion(2, 30.0, capsys) as notes:
        worst = worst_sym = worst_self = 0.0
        for seed in range(20):
            x, y = pair(2000 + seed, 96)
            loss, _ = dms_ssim_loss(x, y)
            ref, _ = O.dms_ssim_direct(x, y)
            worst = max(worst, abs(loss - ref))
            worst_sym = max(worst_sym, abs(loss - dms_ssim_loss(y, x)[0]))
            worst_self = max(worst_self, abs(dms_ssim_loss(x, x)[0]))
        notes.append(f"max |loss - oracle| {worst:.1e}, asymmetry {worst_sym:.1e}, self-loss {worst_self:.1e}")
        assert worst < 1e-9 and worst_sym < 1e-9 and worst_self < 1e-9


def test_criterion_3_gradient_fidelity(capsys):
    from .test_model import lively

    with criterion(3, 120.0, capsys) as notes:
        cfg = DmsSsimConfig()
        worst = 0.0
        for seed in range(20):
            x, y = pair(3000 + seed, 32)
            g = dms_ssim_grad(x, y, cfg)
            fd = fd_batched(x, y, cfg, list(np.ndindex(32, 32)), h=1e-5).reshape(32, 32)
            worst = max(worst, O.max_relative_error(g, fd))
        notes.append(f"map gradient max rel err {worst:.1e}")
        assert worst < 1e-4

        p = lively(seed=3)
        rng = np.random.default_rng(30)
        img = rng.uniform(size=(1, 32, 32))
        target = rng.uniform(0, 0.5, size=(32, 32))

        def loss_of():
            return dms_ssim(forward(img, p).scaled, target, cfg).loss

        with T.Tape() as tape:
            loss = loss_of()
        grads = tape.backward(loss, list(p.tensors.values()))
        names = p.names()
        analytic, numeric = [], []
        for name in (names[int(i)] for i in rng.choice(len(names), size=10, replace=False)):
            t = p[name]
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            old = t.data[idx]
            t.data[idx] = old + 1e-5
            up = loss_of().item()
            t.data[idx] = old - 1e-5
            down = loss_of().item()
            t.data[idx] = old
            analytic.append(grads[t][idx])
            numeric.append((up - down) / 2e-5)
        e2e = O.max_relative_error(analytic, numeric)
        notes.append(f"model parameters max rel err {e2e:.1e}")
        assert e2e < 1e-3


def test_criterion_4_density_conservation(capsys):
    with criterion(4, 600.0, capsys) as notes:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            ann, sig = test_density.in_frame_scene(rng, int(rng.integers(1, 60)))
            d = render_density(ann, sig).density
            worst = max(worst, abs(d.sum() - len(ann.points)) / len(ann.points))
        notes.append(f"max |integral - count| per point {worst:.1e}")
        assert worst < 1e-6
        test_density.test_translation_equivariance()
        test_density.test_adding_a_point_never_decreases()
        notes.append("translation and monotonicity properties hold")


def test_criterion_5_sfem_oracle(capsys):
    with criterion(5, 600.0, capsys) as notes:
        rng = np.random.default_rng(5)
        worst = 0.0
        for trial in range(50):
            channels = tuple(int(c) for c in rng.integers(1, 6, size=2 + trial % 2))
            hw = tuple(int(v) for v in rng.integers(1, 7, size=2))
            p = SfemParams.zeros(channels, n_iter=1 + trial % 3)
            for w in p.weights.values():
                w.data[...] = rng.normal(0, 0.5, size=w.shape)
            feats = [rng.normal(size=(c,) + hw) for c in channels]
            for a, b in zip(mean_field_refine(feats, p), mean_field_refine_reference(feats, p)):
                worst = max(worst, float(np.abs(a.data - b).max()))
        notes.append(f"fast vs reference max abs diff {worst:.1e}")
        assert worst < 1e-12
        feats = [rng.normal(size=(3, 4, 4)) for _ in range(3)]
        for a, b in zip(mean_field_refine(feats, SfemParams.zeros((3, 3, 3))), feats):
            assert np.array_equal(a.data, b)
        assert SfemParams.zeros((2, 2)).n_iter == 2
        assert ModelParams.init(seed=0).config.sfem_iters == 2
        notes.append("zero weights exact identity; default n_iter 2")


def test_criterion_6_shape_contract(capsys):
    with criterion(6, 600.0, capsys) as notes:
        p = ModelParams.init(seed=0)
        res = forward(np.random.default_rng(6).uniform(size=(1, 224, 224)), p)
        assert res.density.shape == (224, 224)
        assert [s.shape[-2:] for s in res.side_outputs] == [(224, 224), (112, 112), (56, 56), (28, 28)]
        assert res.top.shape[-2:] == (14, 14)
        backbone = [n for n in p.names() if n.startswith("backbone.")]
        assert len(backbone) == len(set(backbone)) == 16
        assert not any("level" in n for n in backbone)
        peak = float(np.abs(res.density.data).max())
        notes.append(f"max |M_0| at init {peak:.1e}")
        assert peak < 1e-3


SEEDS = (0, 1, 2)
TEST_SCENES = 32


def train_seed(seed):
    cfg = TrainConfig(seed=seed, steps=300, dtype="float32", val_every=25)
    t0 = time.perf_counter()
    res = train(cfg)
    return cfg, res, time.perf_counter() - t0


def test_criterion_7_training_smoke(capsys):
    with criterion(7, 3 * 600.0, capsys) as notes:
        beats = 0
        for seed in SEEDS:
            cfg, res, seconds = train_seed(seed)
            losses = [r["loss"] for r in res.log if "loss" in r]
            ma = moving_average(losses, 50)
            first_test = 7_000_000 + 1000 * seed
            train_first, val_first = res.scene_seeds
            for a, n in ((train_first, cfg.data.n_train), (val_first, cfg.data.n_val)):
                assert a + n <= first_test or first_test + TEST_SCENES <= a
            test = make_dataset(cfg.data.scene, TEST_SCENES, first_test)
            truth = [len(a.points) for _, a, _ in test]
            baseline = report([float(np.mean(res.train_counts))] * TEST_SCENES, truth).mae
            mae = evaluate(res.best_params, [(img, ann) for img, ann, _ in test]).mae
            beats += mae < 0.5 * baseline
            notes.append(
                f"seed {seed}: {seconds:.0f}s, loss MA {ma[0]:.3f}->{ma[-1]:.3f}, test MAE {mae:.2f} vs baseline {baseline:.2f}"
            )
            assert seconds < 600.0
            assert ma[-1] < ma[0]
        notes.append(f"{beats}/3 seeds under half the baseline")
        assert beats >= 2


def test_criterion_8_metric_arithmetic(capsys, tmp_path):
    with criterion(8, 600.0, capsys) as notes:
        r = report([10, 20], [12, 16])
        assert f"{r.mae:.6f}" == "3.000000" and f"{r.mse:.6f}" == f"{math.sqrt(10):.6f}"
        # a constant-output model predicting 10 and 20 heads, scored through the CLI
        p = ModelParams.init(seed=0)
        for t in p.tensors.values():
            t.data[...] = 0
        p["side0.regress.bias"].data[...] = 10 / 256 * p.config.density_scale
        p["fuse.w0"].data[0, 0, 1, 1] = 1.0
        save_checkpoint(tmp_path / "m.ntb", p)
        data = tmp_path / "data"
        data.mkdir()
        for stem, (h, w, n) in {"a": (16, 16, 12), "b": (16, 32, 16)}.items():
            write_annotations(data / f"{stem}.json", AnnotationSet(w, h, [(1.0, 1.0)] * n))
            write_density(data / f"{stem}.img", np.zeros((h, w)))
        code, out = run_cli("eval", "--checkpoint", str(tmp_path / "m.ntb"), "--data", str(data))
        doc = json.loads(out)
        assert code == 0 and f"{doc['mae']:.6f}" == "3.000000" and f"{doc['mse']:.6f}" == "3.162278"
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = int(rng.integers(1, 20))
            rep = report(rng.normal(30, 15, n), rng.integers(0, 60, n))
            assert rep.mae <= rep.mse
        notes.append(f"MAE {doc['mae']:.6f}, MSE {doc['mse']:.6f}; MAE <= MSE on 200 random reports")


def test_criterion_9_format_roundtrips(capsys, tmp_path):
    with criterion(9, 600.0, capsys) as notes:
        rng = np.random.default_rng(9)
        for _ in range(50):
            v = rng.normal(size=tuple(rng.integers(1, 30, size=2))) * 10.0 ** rng.integers(-300, 300)
            assert decode_density(encode_density(v)).tobytes() == v.tobytes()
        arrays = ModelParams.init(seed=9).arrays()
        back = decode_ntb(encode_ntb(arrays))
        assert list(back) == list(arrays) and all(back[k].tobytes() == arrays[k].tobytes() for k in arrays)

        good = tmp_path / "a.dmp"
        write_density(good, np.ones((24, 24)))
        cases = {
            "bad magic at offset 0": b"XMP1" + good.read_bytes()[4:],
            "truncated payload": good.read_bytes()[:100],
            "trailing bytes at offset": good.read_bytes() + b"\0",
        }
        for message, raw in cases.items():
            bad = tmp_path / "bad.dmp"
            bad.write_bytes(raw)
            err = io.StringIO()
            with contextlib.redirect_stderr(err):
                code, _ = run_cli("ssim", "--a", str(bad), "--b", str(good))
            assert code == 2 and message in err.getvalue() and str(bad) in err.getvalue()
        save_checkpoint(tmp_path / "m.ntb", ModelParams.init(seed=9))
        raw = (tmp_path / "m.ntb").read_bytes()
        (tmp_path / "m.ntb").write_bytes(raw[:-5])
        err = io.StringIO()
        with contextlib.redirect_stderr(err):
            code, _ = run_cli("inspect", "--checkpoint", str(tmp_path / "m.ntb"))
        assert code == 2 and "offset" in err.getvalue()
        notes.append("DMP1 and NTB1 bit-exact; malformed files exit 2 with offset")
