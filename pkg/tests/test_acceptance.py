"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line. The adaptation experiment (ordering of
the four training modes across three seeds) trains twelve full models and
dominates the runtime; everything else finishes in a couple of minutes.
Run with `pytest tests/test_acceptance.py -v -s` to watch the lines appear.
"""
import time

import numpy as np
import pytest

from _oracles import (classify_pixels_ref, conv2d_ref, maxpool2_ref,
                      supervised_loss_ref, upsample2_ref)
from vmcr import cli
from vmcr.autodiff import Tensor, conv2d, maxpool2, upsample_nearest2
from vmcr.data import DomainConfig, LabelMap, make_dataset
from vmcr.losses import LossConfig, ema_update, supervised_loss
from vmcr.metrics import ConfusionCounts, compute_metrics, loss_map
from vmcr.model import UNetConfig, build, forward
from vmcr.perturb import (SpatialTransform, apply_spatial,
                          apply_spatial_to_prediction, gen_mask, mix_images,
                          mix_predictions)
from vmcr.trainer import TrainConfig, evaluate, restore_pair, train
from vmcr.verification import run_suite

SEEDS = (0, 1, 2)
SOURCE_DOMAIN = DomainConfig(intensity_gain=1.0, gamma=1.0)
TARGET_DOMAIN = DomainConfig(intensity_gain=0.6, gamma=1.8, noise_std=0.05)


def report(name, ok, detail):
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print("\n" + line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def adaptation_data():
    mk = make_dataset
    return {
        "src": mk(SOURCE_DOMAIN, 20, 64, 64, seed=10),
        "tgt": mk(TARGET_DOMAIN, 20, 64, 64, seed=11),
        "src_val": mk(SOURCE_DOMAIN, 8, 64, 64, seed=12),
        "tgt_val": mk(TARGET_DOMAIN, 8, 64, 64, seed=12),
        "tgt_test": mk(TARGET_DOMAIN, 10, 64, 64, seed=13),
    }


def run_mode(mode, seed, data, iterations=2000):
    cfg = TrainConfig(mode=mode, iterations=iterations, seed=seed)
    val = data["tgt_val"] if mode == "target-only" else data["src_val"]
    res = train(cfg, data["src"], data["tgt"], source_val=val)
    pair = restore_pair(res.checkpoint, cfg.unet, use_best=res.best_teacher)
    return res, float(evaluate(pair, data["tgt_test"]).aggregate.f1)


@pytest.fixture(scope="module")
def adaptation_runs(adaptation_data):
    f1 = {}
    for mode in ("source-only", "st-cr", "vm-cr", "target-only"):
        for seed in SEEDS:
            _, f1[mode, seed] = run_mode(mode, seed, adaptation_data)
            print(f"  [{mode} seed {seed}] target F1 {f1[mode, seed]:.4f}",
                  flush=True)
    return f1


def test_gradient_suite():
    t0 = time.perf_counter()
    entries = run_suite(seeds=10, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(e.max_rel_error for e in entries)
    ok = all(e.passed for e in entries) and elapsed < 120.0
    report("gradient-suite", ok,
           f"{len(entries)} checks, worst rel err {worst:.2e}, {elapsed:.0f}s")


def test_oracle_equivalence():
    rng = np.random.default_rng(0)
    exact = 0
    worst_loss_err = 0.0
    for _ in range(50):
        # integer-valued inputs keep float32 sums exact, so the structural
        # ops must agree with the scalar loops bit for bit
        x = rng.integers(-4, 5, (2, 3, 6, 6)).astype(np.float32)
        w = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.float32)
        b = rng.integers(-3, 4, 4).astype(np.float32)
        conv_ok = np.array_equal(
            conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data,
            conv2d_ref(x, w, b, pad=1))
        pool_ok = np.array_equal(maxpool2(Tensor(x)).data, maxpool2_ref(x))
        up_ok = np.array_equal(upsample_nearest2(Tensor(x)).data,
                               upsample2_ref(x))
        exact += conv_ok and pool_ok and up_ok

        z = rng.normal(0, 3, (2, 2, 5, 5))
        y = rng.integers(0, 2, z.shape).astype(np.float64)
        got = float(supervised_loss(Tensor(z), y).data)
        want = supervised_loss_ref(z, y, pos_weight=10.0)
        worst_loss_err = max(worst_loss_err,
                             abs(got - want) / max(abs(want), 1e-12))
    ok = exact == 50 and worst_loss_err < 1e-6
    report("oracle-equivalence", ok,
           f"{exact}/50 structural instances exact, "
           f"loss rel err {worst_loss_err:.2e}")


def test_mixing_identities_and_mask_balance():
    rng = np.random.default_rng(7)
    x1 = rng.random((3, 32, 32), dtype=np.float32)
    x2 = rng.random((3, 32, 32), dtype=np.float32)
    ones = np.ones((32, 32), dtype=np.uint8)
    zeros = np.zeros_like(ones)
    mask = gen_mask(32, 32, sigma=4.0, seed=0)
    identities = (
        np.array_equal(mix_images(x1, x2, ones), x1)
        and np.array_equal(mix_images(x1, x2, zeros), x2)
        and np.array_equal(mix_images(x1, x1, mask), x1)
        and np.array_equal(mix_predictions(x1, x2, mask)
                           + mix_predictions(x2, x1, mask), x1 + x2))

    fracs = [gen_mask(64, 64, sigma=8.0, seed=s).bits.mean()
             for s in range(1000)]
    mean_frac = float(np.mean(fracs))
    ok = identities and 0.48 <= mean_frac <= 0.52
    report("mixing-and-mask-balance", ok,
           f"identities {'hold' if identities else 'BROKEN'}, "
           f"mean ones fraction {mean_frac:.4f} over 1000 masks")


def test_ema_closed_form():
    alpha, k = 0.99, 10
    pair = build(UNetConfig(depth=2, base_channels=4), seed=0)
    teacher0 = {n: p.data.copy() for n, p in pair.teacher.items()}
    rng = np.random.default_rng(1)
    history = []
    for _ in range(k):
        step = {n: rng.normal(0, 0.1, p.data.shape).astype(p.data.dtype)
                for n, p in pair.student.items()}
        for n, p in pair.student.items():
            p.data = p.data + step[n]
        history.append({n: p.data.copy() for n, p in pair.student.items()})
        ema_update(pair.student, pair.teacher, alpha)

    worst = 0.0
    for n in teacher0:
        want = alpha ** k * teacher0[n].astype(np.float64)
        for i, snap in enumerate(history):
            want = want + (1 - alpha) * alpha ** (k - 1 - i) * snap[n]
        worst = max(worst, float(np.abs(pair.teacher[n].data - want).max()))
    ok = worst < 1e-6
    report("ema-closed-form", ok, f"k={k} max abs error {worst:.2e}")


def test_adaptation_ordering(adaptation_runs):
    mean = {m: float(np.mean([adaptation_runs[m, s] for s in SEEDS]))
            for m in ("source-only", "st-cr", "vm-cr", "target-only")}
    ordered = mean["target-only"] > mean["vm-cr"] > mean["source-only"]
    gap = mean["vm-cr"] - mean["source-only"]
    vs_stcr = mean["vm-cr"] - mean["st-cr"]
    ok = ordered and gap >= 0.03 and vs_stcr >= -0.01
    report("adaptation-ordering", ok,
           "mean target F1: " +
           ", ".join(f"{m} {v:.4f}" for m, v in mean.items()) +
           f"; vm-cr - source-only = {gap:+.4f}, "
           f"vm-cr - st-cr = {vs_stcr:+.4f}")


def test_early_perturbation_difficulty(adaptation_data):
    # early in training, a vessel-mixed input should be harder for the
    # student (larger consistency loss map) than a horizontal flip; averaged
    # over every disjoint pair of the 20 target training images to keep the
    # comparison low-variance
    hits = 0
    details = []
    tgt = adaptation_data["tgt"]
    for seed in SEEDS:
        cfg = TrainConfig(mode="vm-cr", iterations=200, seed=seed)
        res = train(cfg, adaptation_data["src"], tgt)
        with_t = lambda x: forward(res.pair.teacher, x, cfg.unet,
                                   with_grad=False).data
        with_s = lambda x: forward(res.pair.student, x, cfg.unet,
                                   with_grad=False).data
        flip = SpatialTransform("flip-h")
        vm_means, flip_means = [], []
        for k in range(0, len(tgt), 2):
            imgs = np.stack([tgt[k][0], tgt[k + 1][0]])
            teacher_post = 1.0 / (1.0 + np.exp(-with_t(imgs)))

            mask = gen_mask(64, 64, sigma=cfg.sigma, seed=1000 * seed + k)
            mixed = mix_images(imgs[0], imgs[1], mask)
            target_vm = mix_predictions(teacher_post[0], teacher_post[1],
                                        mask)
            vm_means.append(loss_map(with_s(mixed[None])[0], target_vm)[1])

            for img, post in zip(imgs, teacher_post):
                flipped = apply_spatial(img, flip)
                target_fl = apply_spatial_to_prediction(post, flip)
                flip_means.append(
                    loss_map(with_s(flipped[None])[0], target_fl)[1])
        mean_vm = float(np.mean(vm_means))
        mean_fl = float(np.mean(flip_means))
        hits += mean_vm > mean_fl
        details.append(f"seed {seed}: vm {mean_vm:.5f} vs flip {mean_fl:.5f}")
    ok = hits >= 2
    report("early-perturbation-difficulty", ok,
           f"{hits}/3 seeds harder under vessel mixing; " + "; ".join(details))


def test_run_determinism(tmp_path):
    src = tmp_path / "source.cfg"
    tgt = tmp_path / "target.cfg"
    src.write_text("intensity_gain = 1.0\ngamma = 1.0\n")
    tgt.write_text("intensity_gain = 0.6\ngamma = 1.8\nnoise_std = 0.05\n")
    exp = tmp_path / "exp.cfg"
    exp.write_text(
        "mode = vm-cr\niterations = 400\nimage_size = 64\nseed = 0\n"
        f"source = domain:{src}\ntarget = domain:{tgt}\n"
        "train_n = 8\nval_n = 4\ntest_n = 4\n")
    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        rc = cli.main(["train", "--config", str(exp), "--out", str(out)])
        assert rc == 0
        outs.append(out)
    blobs = [(o / "metrics.csv").read_bytes() for o in outs]
    cks = [(o / "checkpoint.vmcr").read_bytes() for o in outs]
    # train_log is deterministic except for the wall_time column
    logs = []
    for o in outs:
        rows = (o / "train_log.csv").read_text().splitlines()
        logs.append([r.rsplit(",", 1)[0] for r in rows])
    ok = blobs[0] == blobs[1] and logs[0] == logs[1] and cks[0] == cks[1]
    report("run-determinism", ok,
           f"metrics.csv {len(blobs[0])}B and checkpoint {len(cks[0])}B "
           f"byte-identical, train_log identical up to wall_time: "
           f"{blobs[0] == blobs[1]}/{cks[0] == cks[1]}/{logs[0] == logs[1]}")


def test_metrics_against_oracle():
    spot = compute_metrics(ConfusionCounts(
        artery_as_artery=80, artery_as_vein=20,
        vein_as_vein=90, vein_as_artery=10))
    spot_ok = (abs(spot.f1 - 16 / 19) < 1e-12 and abs(spot.acc - 0.85) < 1e-12
               and abs(spot.sen - 0.80) < 1e-12 and abs(spot.sp - 0.90) < 1e-12)

    rng = np.random.default_rng(11)
    agree = 0
    for _ in range(20):
        h = w = 16
        post = rng.random((2, h, w))
        artery = rng.random((h, w)) < 0.25
        vein = rng.random((h, w)) < 0.25
        labels = LabelMap(artery=artery, vein=vein)
        from vmcr.metrics import classify_pixels
        c = classify_pixels(post, labels)
        got = (c.artery_as_artery, c.artery_as_vein, c.vein_as_vein,
               c.vein_as_artery, c.excluded_crossings)
        agree += got == classify_pixels_ref(post, labels)
    ok = spot_ok and agree == 20
    report("metrics-oracle", ok,
           f"spot example {'matches' if spot_ok else 'WRONG'}, "
           f"{agree}/20 random confusion tuples agree")
