"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured values. The training-based criteria share a session-scoped
synthetic benchmark (300 train / 75 test, 64x64, size ratios 0.5%-5%).
"""

import time

import numpy as np
import pytest

from caranet import tensor as T
from caranet.data import SyntheticSpec, generate_synthetic, load_split
from caranet.metrics import (MetricReport, compute_sample, dice, e_phi_max,
                             evaluate_dataset, f_beta_w, iou, mae, s_alpha)
from caranet.model import (ARAStage, AxialAttention, CaraNet, CaraNetConfig,
                           CFPBlock, ParamStore, receptive_field_probe,
                           reverse_map)
from caranet.netpbm import read_pnm, write_image
from caranet.size_analysis import (SizePoint, compare_curves, filter_small,
                                   interval_average)
from caranet.tensor import Tensor, grad_check
from caranet.train import (Adam, TrainConfig, load_checkpoint, multiscale_step,
                           save_checkpoint, total_loss, train_model,
                           weight_map, weighted_bce, weighted_iou)

import reference_metrics as ref


def report(criterion, detail):
    print(f"\nACCEPTANCE {criterion}: PASS  [{detail}]")


# ---------------------------------------------------------------------------
# shared benchmark


BENCH_SPEC = SyntheticSpec(n_samples=375, extent=(64, 64), ratio_range=(0.005, 0.05),
                           blobs_per_image=(1, 2), noise=0.05, seed=0)
PROTOCOL = TrainConfig()  # learning rate 1e-4, scales {0.75, 1.0, 1.25}, Adam defaults


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    manifest, _ = generate_synthetic(BENCH_SPEC, out)
    _, images, masks = load_split(manifest, "train")
    return manifest, images, masks


def _train_variant(benchmark, seed, use_cfp, use_ara, epochs):
    manifest, images, masks = benchmark
    model = CaraNet(CaraNetConfig(input_size=(64, 64), base_channels=4,
                                  decoder_channels=8, use_cfp=use_cfp,
                                  use_ara=use_ara, seed=seed))
    cfg = TrainConfig(epochs=epochs, batch_size=PROTOCOL.batch_size, seed=seed)
    opt = Adam(model.parameters(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    epoch_means = train_model(model, opt, images, masks, cfg)
    return model, epoch_means


@pytest.fixture(scope="session")
def trained_full(benchmark):
    start = time.time()
    model, epoch_means = _train_variant(benchmark, seed=0, use_cfp=True,
                                        use_ara=True, epochs=PROTOCOL.epochs)
    elapsed = time.time() - start
    report_obj = evaluate_dataset(model, benchmark[0], split="test")
    return model, epoch_means, report_obj, elapsed


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradient_correctness():
    start = time.time()
    rng = np.random.default_rng(0)
    worst = {}

    # primitive operations
    ops = {
        "conv2d": lambda t: T.tsum(T.mul(T.conv2d(t, w3, b3, padding=2, dilation=2),
                                         T.conv2d(t, w3, b3, padding=2, dilation=2))),
        "matmul": lambda t: T.tsum(T.mul(T.matmul(t, m2), T.matmul(t, m2))),
        "sigmoid": lambda t: T.tsum(T.sigmoid(t)),
        "softplus": lambda t: T.tsum(T.softplus(t)),
        "softmax": lambda t: T.tsum(T.mul(T.softmax_axis(t, 1), T.softmax_axis(t, 1))),
        "upsample": lambda t: T.tsum(T.mul(T.bilinear_upsample(t, factor=2),
                                           T.bilinear_upsample(t, factor=2))),
        "avg_pool": lambda t: T.tsum(T.mul(T.avg_pool2d(t, 3, 1, 1), T.avg_pool2d(t, 3, 1, 1))),
        "mean": lambda t: T.tmean(T.mul(t, t)),
    }
    w3 = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
    b3 = Tensor(rng.uniform(-1, 1, (2,)))
    m2 = Tensor(rng.uniform(-1, 1, (4, 3)))
    shapes = {
        "conv2d": (1, 2, 6, 6), "matmul": (2, 4), "sigmoid": (3, 4),
        "softplus": (3, 4), "softmax": (3, 5), "upsample": (1, 2, 4, 4),
        "avg_pool": (1, 2, 5, 5), "mean": (4, 4),
    }
    for name, fn in ops.items():
        worst[name] = grad_check(fn, Tensor(rng.uniform(-2, 2, shapes[name])))

    # composite blocks at desk width
    cfp = CFPBlock(ParamStore(1), "cfp", 8, 8)
    worst["cfp"] = grad_check(lambda t: T.tsum(T.mul(cfp(t), cfp(t))),
                              Tensor(rng.uniform(-1, 1, (1, 8, 6, 6))))
    att = AxialAttention(ParamStore(2), "att", 4)
    worst["axial"] = grad_check(lambda t: T.tsum(T.mul(att(t), att(t))),
                                Tensor(rng.uniform(-1, 1, (1, 4, 5, 5))))
    stage = ARAStage(ParamStore(3), "st", 4)
    stage.head.w.value.data[:] = rng.uniform(-0.5, 0.5, stage.head.w.value.shape).astype(np.float32)
    s_prev = Tensor(rng.uniform(-1, 1, (1, 1, 6, 6)))

    def stage_loss(t):
        _, s = stage(t, s_prev)
        return T.tsum(T.mul(s, s))

    worst["ara_stage"] = grad_check(stage_loss, Tensor(rng.uniform(-1, 1, (1, 4, 6, 6))))

    # total loss through a 64x64 toy network, sampled parameter entries
    net = CaraNet(CaraNetConfig(input_size=(64, 64), base_channels=4,
                                decoder_channels=8, seed=0)).to_dtype(np.float64)
    image = rng.uniform(0, 1, (1, 3, 64, 64))
    mask = np.zeros((1, 1, 64, 64))
    mask[0, 0, 20:34, 24:40] = 1.0

    def loss_for(param):
        def f(t):
            param.value = t
            preds = net.forward(Tensor(image, dtype=np.float64))
            loss, _ = total_loss(preds, mask)
            return loss
        return f

    params = net.param_dict()
    picked = ["enc.l1.conv.w", "enc.l3.unit.g1.w", "enc.l5.unit.merge.w",
              "pd.fuse3.w", "pd.head.w", "cfp3.c3.s2.w", "stage3.att.h.q.w",
              "stage3.head.w", "stage4.head.b"]
    model_worst = 0.0
    for name in picked:
        p = params[name]
        k = min(3, p.value.size)
        idx = rng.choice(p.value.size, size=k, replace=False)
        err = grad_check(loss_for(p), p.value, indices=[int(i) for i in idx])
        model_worst = max(model_worst, err)
    worst["toy_model_loss"] = model_worst

    elapsed = time.time() - start
    for name, err in worst.items():
        assert err < 1e-3, f"{name}: max relative error {err}"
    assert elapsed < 300.0, f"gradient suite took {elapsed:.0f}s"
    report(1, f"max rel err {max(worst.values()):.2e} over {len(worst)} checks, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. shape algebra


def test_criterion_2_shape_algebra():
    rng = np.random.default_rng(0)
    for hw in (64, 96, 256, 352):
        net = CaraNet(CaraNetConfig(input_size=(hw, hw)))
        img = Tensor(rng.uniform(0, 1, (1, 3, hw, hw)).astype(np.float32))
        feats = net.encoder(img)
        for i, f in enumerate(feats.as_list(), 1):
            assert f.shape[2:] == (hw // 2 ** (i - 1), hw // 2 ** (i - 1))
        preds = net.forward(img)
        assert preds.s_g.shape[2:] == (hw // 4, hw // 4)
        assert preds.s5.shape[2:] == (hw // 16, hw // 16)
        assert preds.s4.shape[2:] == (hw // 8, hw // 8)
        assert preds.s3.shape[2:] == (hw // 4, hw // 4)
        assert preds.final.shape[2:] == (hw, hw)
    report(2, "levels and outputs exact for 64/96/256/352")


# ---------------------------------------------------------------------------
# 3. receptive field


def test_criterion_3_receptive_field():
    cfp = CFPBlock(ParamStore(3), "cfp", 8, rate=8)
    probe = receptive_field_probe(cfp, 8, 64, seed=0)
    assert not probe.truncated
    assert probe.height >= 3 and probe.width >= 3
    assert probe.height <= 55 and probe.width <= 55
    report(3, f"footprint {probe.height}x{probe.width} in [3,55]")


# ---------------------------------------------------------------------------
# 4. reverse-attention identities


def test_criterion_4_reverse_attention_identities():
    rng = np.random.default_rng(4)
    s = Tensor(rng.uniform(-30, 30, (2, 1, 8, 8)))
    total = T.add(reverse_map(s), T.sigmoid(s))
    np.testing.assert_allclose(total.data, 1.0, rtol=0, atol=1e-6)

    aa = rng.uniform(-2, 2, (1, 4, 6, 6))
    r = (rng.uniform(0, 1, (1, 1, 6, 6)) < 0.5).astype(np.float64)
    ara = T.mul(Tensor(aa), T.expand_axis(Tensor(r), 1, 4)).data
    np.testing.assert_array_equal(ara[:, :, r[0, 0] == 0.0], 0.0)
    np.testing.assert_array_equal(ara[:, :, r[0, 0] == 1.0], aa[:, :, r[0, 0] == 1.0])
    report(4, "R + sigmoid(S) = 1; gating exact on synthetic masks")


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_criterion_5_metric_oracles():
    # all 512 x 512 binary 3x3 pairs against counting oracles, exactly
    masks = np.array([[(k >> b) & 1 for b in range(9)] for k in range(512)], dtype=np.float64)
    inter = masks @ masks.T
    sums = masks.sum(axis=1)
    checked = 0
    for i in range(512):
        p = masks[i].reshape(3, 3).astype(bool)
        for j in range(512):
            g = masks[j].reshape(3, 3).astype(bool)
            denom = sums[i] + sums[j]
            want_dice = 1.0 if denom == 0 else 2.0 * inter[i, j] / denom
            union = denom - inter[i, j]
            want_iou = 1.0 if union == 0 else inter[i, j] / union
            ham = sums[i] + sums[j] - 2.0 * inter[i, j]
            assert dice(p, g) == want_dice
            assert iou(p, g) == want_iou
            assert mae(p.astype(float), g.astype(float)) == ham / 9.0
            checked += 1
    assert checked == 512 * 512

    # saliency-lineage measures vs independently transcribed pseudocode
    for seed in range(25):
        r = np.random.default_rng(seed)
        pred = r.uniform(0, 1, (8, 8))
        g = (r.uniform(0, 1, (8, 8)) < r.uniform(0.15, 0.6)).astype(np.float64)
        assert f_beta_w(pred, g) == pytest.approx(ref.f_beta_w_ref(pred, g), abs=1e-9)
        assert s_alpha(pred, g) == pytest.approx(ref.s_alpha_ref(pred, g), abs=1e-9)
        assert e_phi_max(pred, g) == pytest.approx(ref.e_phi_max_ref(pred, g), abs=1e-9)

    g = np.zeros((8, 8))
    g[2:6, 2:6] = 1.0
    m = compute_sample("perfect", g.copy(), g)
    assert (m.dice, m.iou, m.ephi, m.mae) == (1.0, 1.0, 1.0, 0.0)
    assert m.fbw == pytest.approx(1.0, abs=1e-9)
    assert m.salpha == pytest.approx(1.0, abs=1e-9)
    report(5, "262144 counting pairs exact; 25 oracle cases within 1e-9")


# ---------------------------------------------------------------------------
# 6. synthetic benchmark training


def test_criterion_6_benchmark_training(trained_full):
    model, epoch_means, rep, elapsed = trained_full
    m = rep.means()
    assert len(rep) == 75
    assert epoch_means[-1] <= 0.5 * epoch_means[0], \
        f"loss {epoch_means[0]:.3f} -> {epoch_means[-1]:.3f}"
    assert m["dice"] >= 0.70, f"test mDice {m['dice']:.4f}"
    assert elapsed < 1800.0, f"training took {elapsed:.0f}s"
    report(6, f"test mDice {m['dice']:.4f}, loss {epoch_means[0]:.3f}->{epoch_means[-1]:.3f}, "
              f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. ablation direction


def test_criterion_7_ablation_direction(benchmark):
    epochs = 8
    gaps = []
    for seed in (0, 1, 2):
        full, _ = _train_variant(benchmark, seed, True, True, epochs)
        base, _ = _train_variant(benchmark, seed, False, False, epochs)
        d_full = evaluate_dataset(full, benchmark[0], split="test").means()["dice"]
        d_base = evaluate_dataset(base, benchmark[0], split="test").means()["dice"]
        gaps.append(d_full - d_base)
    mean_gap = float(np.mean(gaps))
    assert mean_gap >= 0.02, f"per-seed gaps {[round(g, 4) for g in gaps]}"
    report(7, f"mean mDice gap {mean_gap:+.4f} over 3 seeds (per-seed "
              f"{[round(g, 4) for g in gaps]})")


# ---------------------------------------------------------------------------
# 8. size analysis


def test_criterion_8_size_analysis(benchmark):
    manifest, _, _ = benchmark
    curve = interval_average([SizePoint("a", 0.01, 0.2), SizePoint("b", 0.02, 0.4),
                              SizePoint("c", 0.06, 0.9)], 0.0, 0.1, 2)
    assert curve.means == [pytest.approx(0.3), pytest.approx(0.9)]
    assert curve.counts == [2, 1]

    rng = np.random.default_rng(8)
    mk = lambda seed: interval_average(
        [SizePoint(str(i), float(r), float(d))
         for i, (r, d) in enumerate(np.random.default_rng(seed).uniform(0, 1, (20, 2)))],
        0.0, 1.0, 5)
    a, b = mk(1), mk(2)
    ab, ba = compare_curves(a, b), compare_curves(b, a)
    assert ab.sum_positive == -ba.sum_negative
    assert ab.sum_negative == -ba.sum_positive
    recomputed_pos = sum(max(d, 0.0) for d in ab.diffs if d is not None)
    recomputed_neg = sum(min(d, 0.0) for d in ab.diffs if d is not None)
    assert ab.sum_positive == recomputed_pos and ab.sum_negative == recomputed_neg

    # filter at the 5% cutoff reproduces manifest ground truth membership
    rows = [compute_sample(e.id, np.zeros((4, 4)), np.zeros((4, 4))) for e in manifest.entries]
    rows = [type(r)(e.id, e.size_ratio, r.dice, r.iou, r.fbw, r.salpha, r.ephi, r.mae)
            for e, r in zip(manifest.entries, rows)]
    rep = MetricReport(rows)
    small = filter_small(rep, 0.05)
    want = {e.id for e in manifest.entries if e.size_ratio <= 0.05}
    assert {r.id for r in small.rows} == want
    report(8, f"fixtures exact; filter retains {len(small)}/{len(rep)} samples")


# ---------------------------------------------------------------------------
# 9. loss properties


def test_criterion_9_loss_properties():
    rng = np.random.default_rng(9)
    g = (rng.uniform(0, 1, (1, 1, 16, 16)) < 0.3).astype(np.float64)
    w = weight_map(g)
    logits = Tensor(rng.uniform(-5, 5, g.shape))
    iou_val = float(weighted_iou(logits, g, w).data)
    bce_val = float(weighted_bce(logits, g, w).data)
    assert 0.0 <= iou_val <= 1.0 and bce_val >= 0.0
    for fn in (weighted_iou, weighted_bce):
        a = float(fn(logits, g, w).data)
        b = float(fn(logits, g, 3.0 * w).data)
        assert abs(a - b) <= 1e-9

    confident = Tensor(np.where(g > 0, 40.0, -40.0).astype(np.float32))

    class Preds:
        s_g = s3 = s4 = s5 = confident
    loss, _ = total_loss(Preds(), g)
    assert 0.0 <= float(loss.data) < 1e-3
    report(9, f"ranges ok; weight-scaling drift < 1e-9; confident loss {float(loss.data):.2e}")


# ---------------------------------------------------------------------------
# 10. plumbing exactness


def test_criterion_10_plumbing(tmp_path):
    rng = np.random.default_rng(10)
    # image round trips
    img = (rng.integers(0, 256, (3, 12, 9)) / 255.0).astype(np.float32)
    write_image(img, tmp_path / "x.ppm")
    first = (tmp_path / "x.ppm").read_bytes()
    write_image((read_pnm(tmp_path / "x.ppm").astype(np.float32) / 255.0).transpose(2, 0, 1),
                tmp_path / "y.ppm")
    assert (tmp_path / "y.ppm").read_bytes() == first

    # checkpoint round trip
    model = CaraNet(CaraNetConfig(input_size=(32, 32)))
    opt = Adam(model.parameters())
    imgs = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    msks = (rng.uniform(0, 1, (2, 1, 32, 32)) < 0.1).astype(np.float32)
    multiscale_step(model, opt, imgs, msks, (1.0,))
    save_checkpoint(model, opt, tmp_path / "a.ckpt")
    loaded, lopt = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, lopt, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    # same-seed reruns of every command produce byte-identical CSVs
    from caranet.cli import main

    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.n_samples = 10\ndata.extent = 32\ndata.ratio_lo = 0.02\n"
                   "data.ratio_hi = 0.1\ndata.seed = 3\nmodel.input_h = 32\n"
                   "model.input_w = 32\ntrain.epochs = 1\ntrain.batch_size = 4\n"
                   "train.scales = 1.0\n")
    outputs = []
    for tag in ("r1", "r2"):
        d = tmp_path / tag
        assert main(["generate", "--spec", str(cfg), "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(d / "train"),
                     "--set", f"data.manifest={d / 'data' / 'manifest.tsv'}"]) == 0
        assert main(["eval", "--checkpoint", str(d / "train" / "final.ckpt"),
                     "--manifest", str(d / "data" / "manifest.tsv"),
                     "--split", "test", "--out", str(d / "eval")]) == 0
        assert main(["analyze", "--reports", str(d / "eval" / "report.csv"),
                     "--intervals", "5", "--out", str(d / "analysis")]) == 0
        outputs.append({
            "manifest": (d / "data" / "manifest.tsv").read_bytes(),
            "loss": (d / "train" / "loss.csv").read_bytes(),
            "report": (d / "eval" / "report.csv").read_bytes(),
            "curve": (d / "analysis" / "curve_report.csv").read_bytes(),
        })
    assert outputs[0] == outputs[1]
    report(10, "image/checkpoint round trips and rerun CSVs byte-identical")
