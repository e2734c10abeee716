"""Acceptance gate: one verdict per criterion, printed in the terminal summary.

Criteria 5 and 6 train the full desk-scale comparison (several models on
8000 synthetic images) and take tens of minutes on one core.
"""

import json
import logging
import subprocess
import sys
import time

import numpy as np
import pytest

from acceptance_log import record
from oracles import F64, PRIMITIVE_CASES, FcnModel, composite_case, micro_model
from topgap.attacks import AttackConfig, fgsm, masked_fgsm, pgd, square_attack
from topgap.analysis import gradcam
from topgap.data import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from topgap.diffcore import Tensor, backward, check_gradients, global_avg_pool, softmax_ce, topk_mean
from topgap.experiment import ExperimentConfig, run_experiment
from topgap.net import BackboneConfig, HeadConfig, TopGapNetwork, build_model, cam_mode, forward

SEEDS = range(20)


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_oracles():
    t0 = time.perf_counter()
    worst_prim, worst_name = 0.0, ""
    for name, case in sorted(PRIMITIVE_CASES.items()):
        for s in SEEDS:
            err = check_gradients(*case(np.random.default_rng(s)))
            if err > worst_prim:
                worst_prim, worst_name = err, name
    worst_comp = 0.0
    for s in SEEDS:
        fn, ts = composite_case(np.random.default_rng(s))
        worst_comp = max(worst_comp, check_gradients(fn, ts, max_entries=24, seed=s))
    secs = time.perf_counter() - t0
    ok = worst_prim < 1e-5 and worst_comp < 1e-4 and secs < 60
    record("1", ok, f"{len(PRIMITIVE_CASES)} primitives x {len(SEEDS)} seeds worst {worst_prim:.2e} ({worst_name}); "
                    f"composite worst {worst_comp:.2e}; {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_pooling_identities():
    rng = np.random.default_rng(0)
    gap_diff, max_exact = 0.0, True
    for s in range(5):
        p = micro_model(s, k=16, lam=0.0)
        x = Tensor(rng.random((4, 3, 16, 16)))
        out = forward(p, x)
        plain = global_avg_pool(out.feature_map).data
        gap_diff = max(gap_diff, float(np.abs(out.logits.data - plain).max()))
        one = forward(p, x, k=1)
        max_exact &= bool(np.array_equal(one.logits.data, out.feature_map.data.max(axis=(2, 3))))
    maps = rng.standard_normal((1000, 1, 25))
    means = np.stack([topk_mean(Tensor(maps), k).data[:, 0] for k in range(1, 26)], axis=1)
    monotone = bool((np.diff(means, axis=1) <= 1e-12).all())
    ok = gap_diff <= 1e-6 and max_exact and monotone
    record("2", ok, f"GAP max abs diff {gap_diff:.1e}; k=1 equals spatial max: {max_exact}; "
                    f"monotone in k on 1000 maps: {monotone}")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_support():
    rng = np.random.default_rng(1)
    checked, bad = 0, 0
    for s in range(6):
        p = micro_model(s, num_classes=3)
        x = Tensor(rng.random((3, 3, 16, 16)), requires_grad=True)
        y = rng.integers(0, 3, 3)
        for k in range(1, 17):
            out = forward(p, x, mode="train", k=k)
            out.feature_map.retain_grad()
            backward(softmax_ce(out.logits, y))
            nz = (out.feature_map.grad != 0).reshape(3, 3, -1).sum(-1)
            bad += int((nz != k).sum())
            checked += nz.size
    ok = bad == 0
    record("3", ok, f"{checked} (sample, class) pairs over k=1..16: {bad} with support != k")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_attack_feasibility():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    net = TopGapNetwork(micro_model(7, k=4, dtype=np.float32))
    x = rng.random((200, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 3, 200)
    masks = (rng.random((200, 16, 16)) < 0.3).astype(np.uint8)
    eps = 8 / 255
    problems = []

    def feasible(name, adv):
        if np.abs(adv.astype(np.float64) - x).max() > eps + 1e-7:
            problems.append(f"{name} left the eps-ball")
        if adv.min() < 0 or adv.max() > 1:
            problems.append(f"{name} left [0, 1]")

    feasible("fgsm", fgsm(net, x, y, eps))
    feasible("pgd", pgd(net, x, y, AttackConfig("pgd", eps, steps=10, seed=3)))
    feasible("square", square_attack(net.logits, x, y, AttackConfig("square", eps, query_budget=40, seed=3)))
    for region in ("object", "background"):
        adv = masked_fgsm(net, x, y, masks, region, eps)
        feasible(f"masked {region}", adv)
        off = np.broadcast_to(((masks == 0) if region == "object" else (masks == 1))[:, None], x.shape)
        if not np.array_equal(adv[off], x[off]):
            problems.append(f"masked {region} changed off-mask pixels")
    one_step = pgd(net, x, y, AttackConfig("pgd", eps, steps=1, step_size=eps, random_start=False))
    if not np.array_equal(one_step, fgsm(net, x, y, eps)):
        problems.append("PGD(1 step) differs from FGSM")
    secs = time.perf_counter() - t0
    if secs >= 120:
        problems.append(f"took {secs:.0f}s")
    ok = not problems
    record("4", ok, f"200 images, FGSM/PGD/Square/masked, {secs:.1f}s" + ("" if ok else ": " + "; ".join(problems)))
    assert ok


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    logging.getLogger("topgap").setLevel(logging.INFO)
    report = run_experiment(ExperimentConfig())
    path = tmp_path_factory.mktemp("acceptance") / "experiment.json"
    path.write_text(report.to_json())
    b, o = report.medians("baseline"), report.medians("ours")
    print(f"experiment written to {path}")
    print("baseline medians", json.dumps(b))
    print(f"ours (k={report.best_k}) medians", json.dumps(o))
    return report


def _criterion_5(report, key, check_name):
    check = {c.name: c for c in report.checks()}[check_name]
    b, o = report.medians("baseline"), report.medians("ours")
    metric = {"clean_parity": "clean_accuracy", "erf_distance": "erf_distance",
              "attack_distance": "attack_distance", "fgsm_robustness": "fgsm_accuracy",
              "decorrelated": "decorrelated_accuracy", "cam_iou": "cam_iou"}[check_name]
    record(key, check.passed, f"{check.description}: baseline {b[metric]:.4f}, ours {o[metric]:.4f} "
                              f"(k={report.best_k}), difference {check.value:+.4f}")
    assert check.passed


@pytest.mark.slow
def test_criterion_5a_clean_parity(experiment):
    _criterion_5(experiment, "5a", "clean_parity")


@pytest.mark.slow
def test_criterion_5b_erf_distance(experiment):
    _criterion_5(experiment, "5b", "erf_distance")


@pytest.mark.slow
def test_criterion_5c_attack_distance(experiment):
    _criterion_5(experiment, "5c", "attack_distance")


@pytest.mark.slow
def test_criterion_5d_fgsm_robustness(experiment):
    _criterion_5(experiment, "5d", "fgsm_robustness")


@pytest.mark.slow
def test_criterion_5e_decorrelated_accuracy(experiment):
    _criterion_5(experiment, "5e", "decorrelated")


@pytest.mark.slow
def test_criterion_5f_cam_iou(experiment):
    _criterion_5(experiment, "5f", "cam_iou")


@pytest.mark.slow
def test_criterion_5_runtime_budget(experiment):
    ok = experiment.seconds <= 45 * 60
    record("5.runtime", ok, f"{experiment.seconds / 60:.1f} min for the whole comparison (budget 45 min)")
    assert ok


@pytest.mark.slow
def test_criterion_6_k_sweep_trend(experiment):
    rows = experiment.sweep.ok_rows
    rho = experiment.sweep.spearman
    ok = len(rows) == len(experiment.sweep.rows) and rho >= 0.9
    trend = ", ".join(f"k={r.k}: {r.cam_l1:.4f}" for r in rows)
    record("6", ok, f"Spearman(k, mean CAM l1) = {rho:.3f} (need >= 0.9); {trend}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_persistence_and_determinism(tmp_path):
    params = build_model(BackboneConfig(), HeadConfig(fpn_channels=32), seed=3)
    params.bn["stem"].mean[:] = np.random.default_rng(0).standard_normal(params.bn["stem"].mean.shape)
    path = save_checkpoint(params, tmp_path / "m.tgcp", {"note": "acceptance"})
    loaded = load_checkpoint(path)
    round_trip = all(np.array_equal(loaded.tensors[n].data, t.data) for n, t in params.tensors.items())
    round_trip &= all(np.array_equal(loaded.bn[n].mean, s.mean) and np.array_equal(loaded.bn[n].var, s.var)
                      for n, s in params.bn.items())
    round_trip &= encode_checkpoint(loaded, {"note": "acceptance"}) == path.read_bytes()
    round_trip &= encode_checkpoint(decode_checkpoint(path.read_bytes()), {"note": "acceptance"}) == path.read_bytes()

    cli = [sys.executable, "-m", "topgap.cli"]
    data = tmp_path / "data"
    subprocess.run(cli + ["gen-data", "--count", "96", "--test-count", "8", "--size", "32", "--seed", "1",
                          "--out", str(data)], check=True, capture_output=True)
    digests, models = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        subprocess.run(cli + ["train", "--threads", "1", "--data", str(data), "--k", "8", "--epochs", "2",
                              "--stage-widths", "8,12", "--feature-maps", "2", "--fpn-channels", "8",
                              "--batch-size", "32", "--seed", "4", "--out", str(out)],
                       check=True, capture_output=True)
        digests.append((out / "train_log.sha256").read_text().strip())
        models.append((out / "model.tgcp").read_bytes())
    same_log = digests[0] == digests[1]
    ok = round_trip and same_log and models[0] == models[1]
    record("7", ok, f"checkpoint round trip bit-exact: {round_trip}; two --threads 1 train runs share "
                    f"TrainLog hash {digests[0][:16]}: {same_log}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_gradcam_equals_cam_on_fcn():
    worst = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        m = FcnModel(s, channels=8, num_classes=4)
        x = rng.random((3, 3, 32, 32))
        for c in range(4):
            grad = gradcam(m, x, c).cam
            standard = cam_mode(m.class_map(Tensor(x, dtype=F64)), c, 32)
            worst = max(worst, float(np.abs(grad - standard).max()))
    ok = worst < 1e-5
    record("8", ok, f"FCN head (1x1 conv + GAP), {len(SEEDS)} nets x 4 classes: max abs diff {worst:.2e}")
    assert ok
