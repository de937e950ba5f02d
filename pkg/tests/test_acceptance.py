"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""
import contextlib
import itertools
import math
import re
import subprocess
import sys
import time

import numpy as np
import pytest

import reference as ref
from gradcheck import PRIMITIVE_CASES, check, rand
from shufflefac import build, load, model_cost, save
from shufflefac.blocks import FABlock, FASCBlock, fa_bias, fa_forward, fasc_forward
from shufflefac.frontend import log_mel
from shufflefac.model import ShuffleFACConfig, model_to_bytes
from shufflefac.ops import channel_shuffle
from shufflefac.profiler import estimate_energy, profile
from shufflefac.tensor import Tensor, save_tensor
from shufflefac.trainer import (Manifest, ManifestRow, TrainConfig, cross_entropy, evaluate_arrays, fit,
                                metrics_from_confusion)
from toy_data import make_split

GAMMAS = (8, 16, 32, 64)
REPORTED_PARAMS = {8: 11_000, 16: 39_000, 32: 143_000, 64: 546_000}
REPORTED_MACS = {8: 1.06e6, 16: 3.06e6, 32: 9.85e6, 64: 34.64e6}
TABLE_SHAPES = {  # per-stage (C, F, T) with C in units of gamma
    "expansion": (1, 64, 12), "fasc1": (2, 32, 6), "fasc2": (4, 16, 6), "fasc3": (8, 8, 6),
    "fasc4": (8, 4, 6), "fasc5": (8, 2, 6), "fasc6": (8, 1, 6),
}


@contextlib.contextmanager
def within(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.1f} s, budget {seconds} s"


def sweep():
    """Counting conventions: first kernel, depthwise kernel, and whether bias/BN scalars are counted."""
    for k_first, k_dw, counted in itertools.product((3, 5), (3, 5), (True, False)):
        reports = {g: model_cost(ShuffleFACConfig(gamma=g, k_first=k_first, k_dw=k_dw)) for g in GAMMAS}
        params = {g: r.total_params if counted else r.total_params_excl for g, r in reports.items()}
        yield (k_first, k_dw, counted), params, {g: r.total_macs for g, r in reports.items()}


def rel_dev(got, want):
    return max(abs(got[g] - want[g]) / want[g] for g in GAMMAS)


@pytest.mark.criterion(1, "stage shapes follow the architecture table for gamma 8/16/32/64")
def test_c01_shape_fidelity():
    with within(1):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 128, 24)))
        for g in GAMMAS:
            outs = build(ShuffleFACConfig(gamma=g)).stage_outputs(x, mode="infer")
            want = [(c * g, f, t) for c, f, t in TABLE_SHAPES.values()] + [(4,)]
            assert [o.shape for o in outs] == want, g


@pytest.mark.criterion(2, "MAC total equals an instrumented loop count; params equal stored scalars")
def test_c02_counting_consistency(record_property):
    with within(10):
        # gamma=2 cannot be built: its first FASC halves 2 channels to 1, which two groups cannot split
        with pytest.raises(ValueError):
            ShuffleFACConfig(gamma=2)
        m = build(ShuffleFACConfig(gamma=4), seed=0)
        rng = np.random.default_rng(0)
        for t in m.params.values():
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        logits, counter = ref.model_forward(m, rng.standard_normal((1, 128, 24)))
        assert counter.count == model_cost(m).total_macs
        for g in (4, *GAMMAS):
            model = build(ShuffleFACConfig(gamma=g))
            assert model_cost(model).total_params == sum(t.size for t in model.params.values())
        record_property("detail", f"smallest buildable model gamma=4: {counter.count} MACs counted")


@pytest.mark.criterion(3, "parameter totals within 15% for some convention; default within 20% at gamma=16")
def test_c03_param_calibration(record_property):
    with within(10):
        hits = [(conv, rel_dev(p, REPORTED_PARAMS)) for conv, p, _ in sweep() if rel_dev(p, REPORTED_PARAMS) <= 0.15]
        default = model_cost(ShuffleFACConfig(gamma=16)).total_params
        record_property("detail", f"default gamma=16: {default} params "
                                  f"({(default - 39_000) / 39_000:+.1%}); within 15%: "
                                  + ", ".join(f"k_first={c[0]} k_dw={c[1]} bias/BN={'yes' if c[2] else 'no'} "
                                              f"max dev {d:.1%}" for c, d in hits))
        assert hits
        assert abs(default - 39_000) / 39_000 <= 0.20


@pytest.mark.criterion(4, "MAC totals within 25% for some convention")
def test_c04_mac_calibration(record_property):
    with within(10):
        devs = {conv[:2]: rel_dev(m, REPORTED_MACS) for conv, _, m in sweep()}
        hits = {c: d for c, d in devs.items() if d <= 0.25}
        record_property("detail", "; ".join(f"k_first={k1} k_dw={k2} max dev {d:.1%}"
                                            for (k1, k2), d in sorted(devs.items())))
        assert hits


@pytest.mark.criterion(5, "finite-difference gradients: primitives < 1e-6, FASC < 1e-5, 5 seeds")
def test_c05_gradients(record_property):
    with within(120):
        worst_prim, worst_fasc = 0.0, 0.0
        for seed in range(5):
            for name, case in sorted(PRIMITIVE_CASES.items()):
                fn, inputs = case(np.random.default_rng(seed))
                err = check(fn, inputs, seed)
                assert err < 1e-6, (name, seed, err)
                worst_prim = max(worst_prim, err)
            r = np.random.default_rng(seed)
            blk = FASCBlock.init(8, 16, 6, r)
            for t in blk.parameters().values():
                t.data = r.uniform(-1, 1, t.shape)
            err = check(lambda x, *_: fasc_forward(x, blk), [rand(r, 2, 8, 6, 5), *blk.parameters().values()], seed)
            assert err < 1e-5, (seed, err)
            worst_fasc = max(worst_fasc, err)
        record_property("detail", f"worst primitive {worst_prim:.1e}, worst FASC {worst_fasc:.1e}")


@pytest.mark.criterion(6, "FA output minus input has exactly zero time variation; shuffle round-trips")
def test_c06_fa_invariant(record_property):
    with within(10):
        rng = np.random.default_rng(0)
        literal, injected = [], []
        for _ in range(100):
            c, f, t = rng.integers(1, 9), rng.integers(1, 17), rng.integers(2, 13)
            fa = FABlock.init(int(c), int(f), rng)
            for p in fa.parameters().values():
                p.data = rng.uniform(-1, 1, p.shape)
            x = rng.standard_normal((int(c), int(f), int(t)))
            d = fa_forward(Tensor(x), fa).data - x
            literal.append(float(np.ptp(d, axis=-1).max()))
            b = np.broadcast_to(fa_bias(Tensor(x), fa).data, x.shape)
            injected.append(float(np.ptp(b, axis=-1).max()))

            g = int(rng.choice([1, 2, 4]))
            xs = rng.standard_normal((4 * int(c), 3, 2))
            back = channel_shuffle(channel_shuffle(Tensor(xs), g), xs.shape[0] // g).data
            assert np.array_equal(back, xs)
        record_property("detail", f"injected bias variation max {max(injected):.0e}; literal y-x variation "
                                  f"max {max(literal):.1e}, nonzero in {sum(v > 0 for v in literal)}/100 "
                                  "cases from float addition rounding")
        assert max(injected) == 0.0
        assert max(literal) == 0.0


@pytest.mark.criterion(7, "energy estimate reproduces the reported pairs within 0.5%")
def test_c07_energy(record_property):
    with within(1):
        got = {ms: estimate_energy(ms) for ms in (6.05, 45.22)}
        record_property("detail", ", ".join(f"{ms} ms -> {e:.3f} uWh" for ms, e in got.items()))
        assert abs(got[6.05] - 15.14) / 15.14 <= 0.005
        assert abs(got[45.22] - 113.05) / 113.05 <= 0.005


@pytest.mark.criterion(8, "frontend shape, silence floor and 1 kHz tone peak")
def test_c08_frontend():
    with within(5):
        t = np.arange(48000) / 16000
        tone = log_mel(0.5 * np.sin(2 * np.pi * 1000 * t)).data
        assert tone.shape == (1, 128, 24)
        assert np.all(log_mel(np.zeros(48000)).data == math.log(1e-10))
        top = 2595 * np.log10(1 + 8000 / 700)
        centers = 700 * (10 ** (np.linspace(0, top, 130)[1:-1] / 2595) - 1)
        assert np.all(tone[0].argmax(axis=0) == np.argmin(np.abs(centers - 1000)))


@pytest.mark.criterion(9, "toy band-noise set: train acc >= 0.9 and test macro F1 >= 0.8, seeds 0-2")
def test_c09_toy_training(record_property):
    epochs = 30
    results = []
    with within(600):
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            x_tr, y_tr = make_split(rng, 200)
            x_te, y_te = make_split(rng, 80)
            model, _ = fit(build(ShuffleFACConfig(gamma=8), seed=seed), x_tr, y_tr,
                           cfg=TrainConfig(batch_size=48, lr=1e-3, max_epochs=epochs, seed=seed))
            acc = evaluate_arrays(model, x_tr, y_tr)[0].accuracy
            f1 = evaluate_arrays(model, x_te, y_te)[0].macro_f1
            results.append((seed, acc, f1))
    record_property("detail", f"{epochs} epochs; " + ", ".join(f"seed {s}: acc {a:.3f} F1 {f:.3f}"
                                                               for s, a, f in results))
    assert all(a >= 0.9 and f >= 0.8 for _, a, f in results)


@pytest.mark.criterion(10, "latency increases with gamma; attribution covers >= 90% of wall time")
def test_c10_latency_ordering(record_property):
    with within(120):
        reports = {g: profile(build(ShuffleFACConfig(gamma=g)), runs=100, warmup=10) for g in GAMMAS}
    means = [reports[g].mean_ms for g in GAMMAS]
    cover = [reports[g].attributed_fraction for g in GAMMAS]
    record_property("detail", "mean ms " + " < ".join(f"{m:.2f}" for m in means)
                    + "; coverage " + "/".join(f"{c:.2f}" for c in cover))
    assert all(a < b for a, b in zip(means, means[1:]))
    assert min(cover) >= 0.9


@pytest.mark.criterion(11, "train reproduces epoch-1 loss bitwise across invocations; save/load bitwise")
def test_c11_determinism(tmp_path, record_property):
    with within(60):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(12):
            save_tensor(Tensor(rng.standard_normal((1, 128, 24))), tmp_path / f"c{i}.sft")
            rows.append(ManifestRow(str(tmp_path / f"c{i}.sft"), i % 4, f"rec{i // 3}"))
        Manifest(rows).write_csv(tmp_path / "train.csv")
        losses, blobs = [], []
        for run in range(2):
            out = tmp_path / f"m{run}.sfac"
            proc = subprocess.run([sys.executable, "-m", "shufflefac.cli", "--seed", "3", "train", "--gamma", "8",
                                   "--manifest", str(tmp_path / "train.csv"), "--epochs", "1", "--batch-size", "5",
                                   "--out", str(out)], capture_output=True, text=True, check=True)
            losses.append(re.search(r"epoch-1 train_loss (\S+);", proc.stdout).group(1))
            blobs.append(out.read_bytes())
        assert losses[0] == losses[1]
        assert blobs[0] == blobs[1]

        m = load(tmp_path / "m0.sfac")
        save(m, tmp_path / "again.sfac")
        assert (tmp_path / "again.sfac").read_bytes() == blobs[0]
        assert model_to_bytes(load(tmp_path / "again.sfac")) == blobs[0]
        record_property("detail", f"epoch-1 loss {losses[0]} in both processes")


@pytest.mark.criterion(12, "hand-computed metrics to 1e-9; uniform-logit CE equals ln 4 to 1e-12")
def test_c12_metrics():
    with within(1):
        m = metrics_from_confusion([[1, 1], [0, 2]])
        assert abs(m.accuracy - 0.75) <= 1e-9
        assert abs(m.macro_f1 - 0.7333333333333333) <= 1e-9
        assert abs(float(cross_entropy(Tensor(np.zeros((4, 4))), [0, 1, 2, 3]).data) - math.log(4)) <= 1e-12


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
