import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import F64, ConvModel, FcnModel, GlobalMeanModel, micro_model, separable_toy
from topgap.analysis import (
    CamResult,
    SweepReport,
    SweepRow,
    cam_iou,
    cam_sparsity,
    erf_distance,
    erf_gradient_map,
    erf_values,
    gradcam,
    iou_threshold_sweep,
    k_sweep,
    mean_cam_l1,
    output_location,
    topgap_cam,
)
from topgap.diffcore import Tensor, global_avg_pool, index, mul, numerical_grad, sum_all
from topgap.errors import ConfigurationError, DataError, NumericError
from topgap.experiment import RunConfig
from topgap.net import BackboneConfig, HeadConfig, TopGapNetwork, cam_mode, minmax


def images(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


# ---------------------------------------------------------------- ERF


def test_output_location():
    assert output_location(4, "center") == (2, 2)
    assert output_location(4, "corner") == (0, 0)
    assert output_location(4, (1, 3)) == (1, 3)


def test_global_mean_model_has_uniform_erf():
    x = images(size=8)
    g = erf_gradient_map(GlobalMeanModel(), x, "center")
    # each of 3 classes sees 1/64 of every pixel; |.| summed over 3 channels
    np.testing.assert_allclose(g.raw, np.full((2, 8, 8), 3 / 64))
    rep = erf_distance(GlobalMeanModel(), x)
    assert rep.distance == 0.0 and rep.n == 2


def test_conv_erf_is_local():
    k = np.ones((1, 3, 3, 3))
    g = erf_gradient_map(ConvModel(k, 1), images(size=8), "center")
    support = g.raw[0] > 0
    expect = np.zeros((8, 8), bool)
    expect[3:6, 3:6] = True
    np.testing.assert_array_equal(support, expect)
    np.testing.assert_allclose(g.raw[0][expect], 3.0)
    corner = erf_gradient_map(ConvModel(k, 1), images(size=8), "corner")
    assert (corner.raw[0] > 0).sum() == 4


def test_erf_matches_finite_differences():
    net = TopGapNetwork(micro_model(4, dtype=F64))
    x = Tensor(images(1, seed=3), requires_grad=True)
    for where in ("center", "corner"):
        g = erf_gradient_map(net, x.data, where)
        i, j = g.location

        def fn():
            return sum_all(index(net.feature_map(x), (slice(None), slice(None), i, j)))

        num = np.abs(numerical_grad(fn, x)).sum(axis=1)
        scale = np.abs(num).max()
        rel = np.abs(g.raw - num) / np.maximum(np.maximum(np.abs(num), np.abs(g.raw)), 1e-4 * scale)
        assert rel.max() < 1e-3


def test_centered_patch_beats_corner():
    # a wide kernel: the centre output sees 25 pixels, the padded corner only 9
    k = np.ones((1, 3, 5, 5))
    rep = erf_distance(ConvModel(k, 2), images(4, size=12))
    assert rep.distance > 0 and rep.center > rep.corner


def test_z_normalisation():
    g = erf_gradient_map(ConvModel(np.ones((1, 3, 3, 3)), 1), images(size=8))
    z = g.z
    np.testing.assert_allclose(z.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(1, 2)), 1, atol=1e-12)


def test_erf_values_joint_normalisation():
    a = np.zeros((1, 4, 4))
    b = np.zeros((1, 4, 4))
    a[0, 1, 1] = 1.0
    center, corner = erf_values(a, b)
    # 32 pooled entries, one of them 1: mean 1/32, std sqrt(31)/32
    mu, sd = 1 / 32, np.sqrt(31) / 32
    assert center[0] == pytest.approx((15 * mu + (1 - mu)) / sd / 16)
    assert corner[0] == pytest.approx(mu / sd)


def test_erf_empty():
    with pytest.raises(DataError):
        erf_distance(GlobalMeanModel(), np.zeros((0, 3, 8, 8)))


# ---------------------------------------------------------------- GradCAM


class SingleChannel:
    def __init__(self, w):
        self.w = w

    def forward_features(self, x):
        f = index(x, (slice(None), slice(0, 1)))
        return [f], mul(global_avg_pool(f), np.array([[self.w, 0.0]]))


def test_gradcam_single_channel_is_scaled_feature():
    x = images(3, size=8)
    res = gradcam(SingleChannel(2.0), x, 0)
    np.testing.assert_allclose(res.cam, minmax(x[:, 0]), atol=1e-12)
    np.testing.assert_allclose(res.channel_weights, 2.0 / 64)


def test_gradcam_zero_weights_give_zeros():
    res = gradcam(SingleChannel(0.0), images(2, size=8), 0)
    np.testing.assert_array_equal(res.cam, 0)


def test_gradcam_negative_evidence_clipped():
    res = gradcam(SingleChannel(-1.0), images(2, size=8), 0)
    np.testing.assert_array_equal(res.cam, 0)


def test_gradcam_chain_rule_weights():
    m = FcnModel(1, nonneg=False)
    x = images(2, size=8)
    res = gradcam(m, x, [0, 2])
    # logit_c = mean_hw sum_k wc[c,k] f_k  =>  d logit_c / d f_k = wc[c,k] / (H W)
    wc = m.wc.data[:, :, 0, 0]
    np.testing.assert_allclose(res.channel_weights, wc[[0, 2]] / 16, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_gradcam_equals_cam_on_fcn(seed, cls):
    m = FcnModel(seed)
    x = images(2, size=8, seed=seed)
    grad = gradcam(m, x, cls).cam
    standard = cam_mode(m.class_map(Tensor(x)), cls, 8)
    assert np.abs(grad - standard).max() < 1e-5


def test_gradcam_bad_inputs():
    m = FcnModel()
    with pytest.raises(ConfigurationError):
        gradcam(m, images(1, size=8), 3)
    with pytest.raises(ConfigurationError):
        gradcam(m, images(1, size=8), 0, layer=4)


def test_gradcam_on_network_shapes():
    net = TopGapNetwork(micro_model(2, dtype=np.float32))
    res = gradcam(net, images(3).astype(np.float32), [0, 1, 2])
    assert res.cam.shape == (3, 16, 16) and res.method == "gradcam"
    assert res.cam.min() >= 0 and res.cam.max() <= 1


def test_topgap_cam_is_class_channel():
    net = TopGapNetwork(micro_model(2))
    x = images(2)
    res = topgap_cam(net, x, 1)
    fmap = net.feature_map(Tensor(x)).data
    np.testing.assert_array_equal(res.cam, minmax(fmap[:, 1].repeat(4, -2).repeat(4, -1)))


# ---------------------------------------------------------------- sparsity and IoU


def test_sparsity_examples():
    assert cam_sparsity(np.zeros((4, 4))) == 0
    assert cam_sparsity(np.ones((2, 4, 4))) == 1
    half = np.zeros((4, 4))
    half[:2] = 1
    assert cam_sparsity(CamResult(half, "x", np.array([0]))) == 0.5
    with pytest.raises(NumericError):
        cam_sparsity(np.full((2, 2), 1.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_sparsity_monotone_in_support(seed):
    rng = np.random.default_rng(seed)
    cam = rng.random((6, 6)) * (rng.random((6, 6)) < 0.5)
    grown = np.maximum(cam, rng.random((6, 6)) * (rng.random((6, 6)) < 0.3))
    assert cam_sparsity(grown) >= cam_sparsity(cam)


def test_iou_examples():
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4, 2:4] = 1
    assert cam_iou(mask.astype(float), mask) == 1.0
    other = np.zeros((8, 8))
    other[5:, 5:] = 1
    assert cam_iou(other, mask) == 0.0
    halo = np.zeros((8, 8))
    halo[2:4, 1:5] = 0.7  # 8 pixels covering the 4-pixel object
    assert cam_iou(halo, mask) == 0.5
    assert cam_iou(halo, mask, threshold=0.8) == 0.0
    assert cam_iou(np.zeros((8, 8)), np.zeros((8, 8))) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_on_binary_maps(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((3, 5, 5)) < 0.4).astype(np.uint8)
    b = (rng.random((3, 5, 5)) < 0.4).astype(np.uint8)
    assert cam_iou(a.astype(float), b) == cam_iou(b.astype(float), a)
    per = cam_iou(a.astype(float), b, reduce=False)
    assert per.shape == (3,) and ((per >= 0) & (per <= 1)).all()


def test_iou_shape_mismatch_and_sweep():
    with pytest.raises(DataError):
        cam_iou(np.zeros((4, 4)), np.zeros((5, 5)))
    cam = np.linspace(0, 1, 16).reshape(4, 4)
    mask = (cam >= 0.5).astype(np.uint8)
    sweep = iou_threshold_sweep(cam, mask)
    assert len(sweep) == 9 and sweep[0.5] == 1.0
    assert all(v <= 1 for v in sweep.values())


# ---------------------------------------------------------------- k sweep


def rank_spearman(x, y):
    """Pearson correlation of tie-averaged ranks, computed by hand."""

    def ranks(v):
        v = np.asarray(v, float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2 + 1
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


def report(ks, l1s, accs=None, failed=()):
    accs = accs or [0.5] * len(ks)
    rows = [SweepRow(k, k / 16, a, l, failed="boom" if k in failed else None) for k, l, a in zip(ks, l1s, accs)]
    return SweepReport(rows, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=6))
def test_spearman_matches_hand_ranks(l1s):
    ks = [2**i for i in range(len(l1s))]
    if len(set(l1s)) == 1:
        return
    assert report(ks, l1s).spearman == pytest.approx(rank_spearman(ks, l1s))


def test_sweep_report_basics():
    r = report([4, 8, 16], [0.1, 0.2, 0.3], accs=[0.9, 0.95, 0.95])
    assert r.spearman == pytest.approx(1.0)
    assert r.best_k() == 8  # ties go to the smaller k
    assert np.isnan(report([4], [0.1]).spearman)
    assert r.to_csv().splitlines()[0].startswith("k,k_normalized")
    assert r.trend_csv().splitlines()[1] == "0.25,0.1"
    failed = report([4, 8, 16], [0.1, None, 0.3], failed=(8,))
    assert [row.k for row in failed.ok_rows] == [4, 16]
    with pytest.raises(NumericError):
        report([4], [None], failed=(4,)).best_k()


def micro_run(**kw):
    bb = BackboneConfig(input_size=16, stage_widths=(2, 3), feature_maps_used=2)
    return RunConfig(bb, HeadConfig(num_classes=2, k=4, fpn_channels=2), epochs=1, batch_size=16,
                     finetune_epochs=1, **kw)


def test_k_sweep_single_row_and_validation():
    d = separable_toy(32)
    cfg = micro_run()
    rep = k_sweep(cfg, d, [4])
    assert len(rep.rows) == 1 and rep.rows[0].failed is None and rep.fused_size == 4
    assert 0 <= rep.rows[0].cam_l1 <= 1
    with pytest.raises(ConfigurationError):
        k_sweep(cfg, d, [8, 4])
    with pytest.raises(ConfigurationError):
        k_sweep(cfg, d, [4, 17])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_k_sweep_finetune_records_failures():
    d = separable_toy(32)
    cfg = micro_run()
    base = micro_model(0, k=4, num_classes=2, dtype=np.float32)
    good = k_sweep(cfg, d, [1, 4, 16], val=d, base=base)
    assert [r.failed for r in good.rows] == [None] * 3
    assert base.head.k == 4  # fine-tuning works on copies
    base.tensors["cls.w"].data[:] = 1e38
    bad = k_sweep(cfg, d, [2, 4], val=d, base=base)
    assert all(r.failed and "epoch 0" in r.failed for r in bad.rows)
    assert bad.rows[0].val_accuracy is None


def test_mean_cam_l1_range():
    d = separable_toy(10)
    v = mean_cam_l1(micro_model(1, num_classes=2, dtype=np.float32), d, batch_size=4)
    assert 0 <= v <= 1
