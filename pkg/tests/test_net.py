import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import F64, micro_model, separable_toy
from topgap.diffcore import Tensor, backward, check_gradients, global_avg_pool, mul, sum_all
from topgap.errors import ConfigurationError, ConstraintError, DataError, NumericError
from topgap.net import (
    BackboneConfig,
    HeadConfig,
    TopGapNetwork,
    TrainHyper,
    backbone_forward,
    build_model,
    cam_mode,
    forward,
    fpn_head,
    model_loss,
    predict,
    top_gap_pool,
    train_model,
)


def desk_model(seed=0, **head):
    return build_model(BackboneConfig(), HeadConfig(fpn_channels=32, **head), seed=seed)


# ---------------------------------------------------------------- configs / build


def test_feature_sizes_for_desk_config():
    cfg = BackboneConfig(input_size=64, stage_widths=(8, 8, 8), feature_maps_used=3)
    assert cfg.feature_sizes() == [16, 8, 4]


def test_more_feature_maps_than_stages():
    with pytest.raises(ConfigurationError):
        build_model(BackboneConfig(stage_widths=(8, 8, 8), feature_maps_used=4), HeadConfig())


def test_input_size_divisibility():
    with pytest.raises(ConfigurationError):
        BackboneConfig(input_size=60).validate()


@pytest.mark.parametrize("k", [0, 257])
def test_head_k_range(k):
    with pytest.raises(ConstraintError):
        HeadConfig(k=k).validate(16)


def test_negative_lambda():
    with pytest.raises(ConfigurationError):
        HeadConfig(lam=-1).validate(16)


def test_same_seed_same_parameters():
    a, b = desk_model(3), desk_model(3)
    assert a.tensors.keys() == b.tensors.keys()
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    assert not np.array_equal(desk_model(4).tensors["stem.w"].data, a.tensors["stem.w"].data)


def test_head_and_backbone_parameter_counts_same_order():
    p = desk_model()
    head, body = p.head_parameter_count(), p.backbone_parameter_count()
    assert head + body == p.parameter_count()
    assert 0.1 < head / body < 10


def test_gap_baseline_head():
    h = HeadConfig.gap_baseline(16, num_classes=4)
    assert (h.k, h.lam) == (256, 0.0)


# ---------------------------------------------------------------- forward pieces


def test_backbone_shapes():
    p = desk_model()
    feats = backbone_forward(p, Tensor(np.random.default_rng(0).random((2, 3, 64, 64))), "train")
    assert [f.shape for f in feats] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 48, 4, 4)]


def test_backbone_zero_image_is_finite():
    feats = backbone_forward(desk_model(), Tensor(np.zeros((1, 3, 64, 64))), "eval")
    assert all(np.isfinite(f.data).all() for f in feats)


def test_backbone_wrong_input_size():
    with pytest.raises(DataError):
        backbone_forward(desk_model(), Tensor(np.zeros((1, 3, 32, 32))))


def test_micro_backbone_gradients():
    rng = np.random.default_rng(0)
    p = micro_model(1)
    x = Tensor(rng.random((2, 3, 16, 16)), requires_grad=True, dtype=F64)
    r = [rng.standard_normal(s) for s in [(2, 2, 4, 4), (2, 3, 2, 2)]]

    def fn():
        feats = backbone_forward(p, x, "train")
        return sum_all(mul(feats[0], r[0])) + sum_all(mul(feats[1], r[1]))

    assert check_gradients(fn, [x, p.tensors["s0.down.w"], p.tensors["s1.b0.w"]], max_entries=40) < 1e-4


def test_fpn_zero_features_give_class_bias():
    p = micro_model(2)
    p.tensors["cls.b"].data[:] = [0.5, -1.0, 2.0]
    feats = [Tensor(np.zeros((2, 2, 4, 4))), Tensor(np.zeros((2, 3, 2, 2)))]
    out = fpn_head(p, feats).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.5, -1.0, 2.0])[None, :, None, None], out.shape))


def test_fpn_output_matches_largest_map():
    p = desk_model()
    out = forward(p, Tensor(np.random.default_rng(1).random((2, 3, 64, 64))))
    assert out.feature_map.shape == (2, 4, 16, 16) and out.logits.shape == (2, 4)


def test_fpn_channel_mismatch():
    p = micro_model()
    with pytest.raises(ConfigurationError):
        fpn_head(p, [Tensor(np.zeros((1, 5, 4, 4))), Tensor(np.zeros((1, 3, 2, 2)))])


def test_micro_fpn_gradients():
    rng = np.random.default_rng(5)
    p = micro_model(3)
    p.tensors["fpn0.b"].data[:] = rng.standard_normal(2)
    f0 = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True, dtype=F64)
    f1 = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True, dtype=F64)
    r = rng.standard_normal((2, 3, 4, 4))
    fn = lambda: sum_all(mul(fpn_head(p, [f0, f1]), r))  # noqa: E731
    assert check_gradients(fn, [f0, f1, p.tensors["fpn0.w"], p.tensors["fpn0.b"], p.tensors["cls.w"]]) < 1e-4


# ---------------------------------------------------------------- pooling / loss


def test_top_gap_pool_examples():
    x = Tensor(np.array([[[[4.0, 1.0], [2.0, 3.0]]]]))
    assert top_gap_pool(x, 2)[0].data.item() == 3.5
    assert top_gap_pool(x, 1)[0].data.item() == 4.0
    assert top_gap_pool(x, 4)[0].data.item() == 2.5
    with pytest.raises(ConstraintError):
        top_gap_pool(x, 5)


def test_full_k_matches_gap_head():
    p = desk_model(k=256, lam=0.0)
    x = Tensor(np.random.default_rng(2).random((3, 3, 64, 64)))
    out = forward(p, x)
    np.testing.assert_allclose(out.logits.data, global_avg_pool(out.feature_map).data, atol=1e-6, rtol=0)


def test_recorded_indices_reproduce_logits():
    p = micro_model(k=5)
    out = forward(p, Tensor(np.random.default_rng(3).random((2, 3, 16, 16))))
    flat = out.feature_map.data.reshape(2, 3, -1)
    np.testing.assert_allclose(np.take_along_axis(flat, out.topk_index, -1).mean(-1), out.logits.data, rtol=1e-12)


def test_ce_gradient_support_is_k_positions():
    p = micro_model(k=5, lam=0.0)
    out = forward(p, Tensor(np.random.default_rng(4).random((3, 3, 16, 16))), "train")
    out.feature_map.retain_grad()
    backward(model_loss(out, [0, 1, 2], 0.0).total)
    nz = (out.feature_map.grad.reshape(3, 3, -1) != 0).sum(-1)
    assert (nz == 5).all()


def test_loss_of_zero_map_is_ln_c():
    p = build_model(BackboneConfig(), HeadConfig(num_classes=4, fpn_channels=8), seed=0)
    p.tensors["cls.w"].data[:] = 0
    out = forward(p, Tensor(np.random.default_rng(0).random((2, 3, 64, 64))))
    assert model_loss(out, [0, 3], 1.0).total.data == pytest.approx(np.log(4), rel=1e-6)


def test_lambda_zero_is_plain_ce():
    out = forward(micro_model(), Tensor(np.random.default_rng(0).random((2, 3, 16, 16))))
    terms = model_loss(out, [0, 1], 0.0)
    assert float(terms.total.data) == terms.ce


def test_negative_lambda_in_loss():
    out = forward(micro_model(), Tensor(np.zeros((2, 3, 16, 16))))
    with pytest.raises(ConfigurationError):
        model_loss(out, [0, 1], -0.5)


# ---------------------------------------------------------------- CAM mode


def test_cam_constant_channel_is_zero():
    np.testing.assert_array_equal(cam_mode(np.full((1, 2, 4, 4), 3.0), 1, 16), 0)


def test_cam_unique_max():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 2] = 5
    cam = cam_mode(x, 0, 8)
    assert cam.max() == 1 and (cam[0, 2:4, 4:6] == 1).all() and cam.sum() == 4


def test_cam_block_values():
    cam = cam_mode(np.array([[[[0.0, 1.0], [2.0, 4.0]]]]), 0, 4)
    np.testing.assert_array_equal(cam[0], np.kron([[0, 0.25], [0.5, 1]], np.ones((2, 2))))


def test_cam_bad_class():
    with pytest.raises(ConfigurationError):
        cam_mode(np.zeros((1, 2, 4, 4)), 2, 8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
def test_cam_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 4))
    c1, c2 = cam_mode(x, [0, 2], 16), cam_mode(a * x + b, [0, 2], 16)
    assert c1.shape == (2, 16, 16) and c1.min() >= 0 and c1.max() <= 1
    np.testing.assert_allclose(c1, c2, atol=1e-9)


# ---------------------------------------------------------------- training


def test_toy_is_linearly_separable():
    d = separable_toy()
    a = np.c_[d.images.reshape(len(d), -1), np.ones(len(d))]
    w, *_ = np.linalg.lstsq(a, 2.0 * d.labels - 1, rcond=None)
    assert ((a @ w > 0) == d.labels).mean() == 1.0


def test_training_fits_separable_toy():
    d = separable_toy()
    p = micro_model(0, k=4, num_classes=2, dtype=np.float32)
    best, log = train_model(p, d, 20, 32, TrainHyper(lr=5e-3), seed=0, val=d)
    assert len(log) == 20 and len(log.rows()) == 20
    assert max(log.train_acc) >= 0.95


def test_zero_epochs():
    p = micro_model()
    before = {k: t.data.copy() for k, t in p.tensors.items()}
    out, log = train_model(p, separable_toy(20), 0)
    assert out is p and len(log) == 0
    for k, t in p.tensors.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_training_is_deterministic():
    d = separable_toy(60)
    runs = [train_model(micro_model(1, num_classes=2, dtype=np.float32), d, 3, 16, seed=5) for _ in range(2)]
    assert runs[0][1].digest() == runs[1][1].digest()
    for k in runs[0][0].tensors:
        np.testing.assert_array_equal(runs[0][0].tensors[k].data, runs[1][0].tensors[k].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    d = separable_toy(40)
    p = micro_model(0, num_classes=2, dtype=np.float32)
    with pytest.raises(NumericError, match="epoch 0, batch"):
        p.tensors["cls.w"].data[:] = 1e38
        train_model(p, d, 2, 8, seed=0, val=d)


def test_empty_training_set():
    d = separable_toy(4).subset([])
    with pytest.raises(DataError):
        train_model(micro_model(), d, 1, val=separable_toy(4))


# ---------------------------------------------------------------- prediction


def test_predict_probabilities():
    p = micro_model(0)
    x = np.random.default_rng(6).random((5, 3, 16, 16)).astype(np.float32)
    x[3] = x[1]
    labels, probs = predict(p, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(probs[3], probs[1])
    perm = [4, 2, 0, 1, 3]
    np.testing.assert_array_equal(predict(p, x[perm])[1], probs[perm])


def test_predict_hand_set_head_picks_class_one():
    p = micro_model(0)
    p.tensors["cls.w"].data[:] = 0
    p.tensors["cls.b"].data[:] = [0.0, 3.0, -1.0]
    labels, _ = predict(p, np.random.default_rng(0).random((4, 3, 16, 16)))
    np.testing.assert_array_equal(labels, 1)


def test_predict_ties_go_to_lowest_class():
    p = micro_model(0)
    p.tensors["cls.w"].data[:] = 0
    p.tensors["cls.b"].data[:] = [1.0, 2.0, 2.0]
    assert predict(p, np.zeros((1, 3, 16, 16)))[0][0] == 1


def test_predict_k_out_of_range():
    with pytest.raises(ConstraintError):
        predict(micro_model(), np.zeros((1, 3, 16, 16)), k=17)


def test_network_view_does_not_track_weights():
    p = micro_model()
    net = TopGapNetwork(p)
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)), requires_grad=True)
    backward(sum_all(net.forward(x)))
    assert x.grad is not None and net.params.tensors["cls.w"].grad is None
    np.testing.assert_array_equal(net.logits(x.data), net.forward(Tensor(x.data)).data)
