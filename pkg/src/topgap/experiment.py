"""Run configuration and the seeded baseline-vs-Top-GAP comparison.

The comparison trains a plain-GAP baseline (``k = H1*W1``, no l1 term) and
Top-GAP at the best k of a fine-tuned sweep, over several seeds, and reports
per-seed metrics, their medians and the directional checks.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import SweepReport, cam_iou, erf_distance, gradcam, k_sweep, topgap_cam
from .attacks import accuracy, attack_distance, fgsm
from .data.dataset import Dataset
from .data.shapes import ShapesConfig, gen_shapes
from .data.split import split
from .errors import ConfigurationError
from .net import BackboneConfig, HeadConfig, ModelParams, TopGapNetwork, TrainHyper, build_model, train_model

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything needed to train one model apart from the data."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(fpn_channels=32))
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seed: int = 0
    epochs: int = 12
    batch_size: int = 64
    finetune_epochs: int = 2

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.head.validate(self.backbone.feature_sizes()[0])
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.hyper.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in [0, 1), got {self.hyper.val_fraction}")
        return self

    @property
    def fused_size(self) -> int:
        return self.backbone.feature_sizes()[0]

    def head_for(self, k: int) -> HeadConfig:
        """Head for pixel constraint ``k``; ``k = 0`` selects the plain-GAP baseline."""
        h = self.head
        if k == 0:
            return HeadConfig.gap_baseline(self.fused_size, num_classes=h.num_classes,
                                           fpn_channels=h.fpn_channels, dropout_rate=h.dropout_rate)
        head = HeadConfig(num_classes=h.num_classes, k=int(k), lam=h.lam, fpn_channels=h.fpn_channels,
                          dropout_rate=h.dropout_rate)
        head.validate(self.fused_size)
        return head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")
        bb = d.pop("backbone", {})
        if "stage_widths" in bb:
            bb = dict(bb, stage_widths=tuple(bb["stage_widths"]))
        return cls(
            backbone=BackboneConfig(**bb),
            head=HeadConfig(**d.pop("head", {})),
            hyper=TrainHyper(**d.pop("hyper", {})),
            **d,
        )


def train_run(cfg: RunConfig, k: int, train: Dataset, val: Dataset, seed: int | None = None):
    """Build and train one model; returns ``(params, TrainLog)``."""
    seed = cfg.seed if seed is None else seed
    params = build_model(cfg.backbone, cfg.head_for(k), seed=seed)
    return train_model(params, train, cfg.epochs, cfg.batch_size, cfg.hyper, seed, val=val)


# --------------------------------------------------------------------------
# per-model metrics


@dataclass
class ModelMetrics:
    k: int
    seed: int
    clean_accuracy: float
    decorrelated_accuracy: float
    erf_distance: float
    attack_distance: float
    fgsm_accuracy: float
    cam_iou: float
    cam_method: str
    train_seconds: float = 0.0


def measure(params: ModelParams, val: Dataset, test: Dataset, probe: Dataset, *, is_baseline: bool,
            fgsm_eps: float = 2 / 255, ad_eps: float = 1 / 255, seed: int = 0,
            train_seconds: float = 0.0) -> ModelMetrics:
    """All comparison metrics for one trained model.

    ``probe`` (a masked, in-distribution subset) feeds the attacks, ERF and
    IoU. Baselines are explained with GradCAM, Top-GAP models with their own
    class map; both for the true class.
    """
    net = TopGapNetwork(params)
    if is_baseline:
        cam = gradcam(net, probe.images, probe.labels)
    else:
        cam = topgap_cam(net, probe.images, probe.labels)
    adv = fgsm(net, probe.images, probe.labels, fgsm_eps)
    return ModelMetrics(
        k=params.head.k,
        seed=seed,
        clean_accuracy=accuracy(net, val.images, val.labels),
        decorrelated_accuracy=accuracy(net, test.images, test.labels),
        erf_distance=erf_distance(net, probe.images).distance,
        attack_distance=attack_distance(net, probe, ad_eps),
        fgsm_accuracy=accuracy(net, adv, probe.labels),
        cam_iou=cam_iou(cam, probe.masks),
        cam_method=cam.method,
        train_seconds=train_seconds,
    )


# --------------------------------------------------------------------------
# the comparison


@dataclass
class ExperimentConfig:
    data: ShapesConfig = field(default_factory=lambda: ShapesConfig(count=8000, test_count=2000, bias=0.95, seed=7))
    run: RunConfig = field(default_factory=RunConfig)
    seeds: tuple = (0, 1, 2)
    k_list: tuple = (4, 8, 16, 32, 64)
    probe_count: int = 400
    fgsm_eps: float = 2 / 255
    ad_eps: float = 1 / 255

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    description: str


@dataclass
class ExperimentReport:
    config: dict
    best_k: int
    sweep: SweepReport
    baseline: list
    ours: list
    seconds: float = 0.0

    @staticmethod
    def _median(runs: list, key: str) -> float:
        return float(np.median([getattr(r, key) for r in runs]))

    def medians(self, which: str) -> dict:
        runs = self.baseline if which == "baseline" else self.ours
        keys = ("clean_accuracy", "decorrelated_accuracy", "erf_distance", "attack_distance",
                "fgsm_accuracy", "cam_iou")
        return {k: self._median(runs, k) for k in keys}

    def checks(self) -> list:
        b, o = self.medians("baseline"), self.medians("ours")
        gap = abs(o["clean_accuracy"] - b["clean_accuracy"])
        erf = o["erf_distance"] - b["erf_distance"]
        ad = o["attack_distance"] - b["attack_distance"]
        fg = o["fgsm_accuracy"] - b["fgsm_accuracy"]
        dec = o["decorrelated_accuracy"] - b["decorrelated_accuracy"]
        iou = o["cam_iou"] - b["cam_iou"]
        return [
            Check("clean_parity", gap, 0.03, gap <= 0.03, "|ours - baseline| clean accuracy <= 0.03"),
            Check("erf_distance", erf, 0.05, erf >= 0.05, "ERF distance ours - baseline >= 0.05"),
            Check("attack_distance", ad, 0.0, ad > 0, "attack distance ours - baseline > 0"),
            Check("fgsm_robustness", fg, 0.10, fg >= 0.10, "FGSM accuracy ours - baseline >= 0.10"),
            Check("decorrelated", dec, 0.0, dec >= 0, "decorrelated accuracy ours - baseline >= 0"),
            Check("cam_iou", iou, 0.05, iou >= 0.05, "CAM IoU ours - baseline GradCAM >= 0.05"),
            Check("k_sweep_spearman", self.sweep.spearman, 0.9, self.sweep.spearman >= 0.9,
                  "Spearman(k, mean CAM l1) >= 0.9"),
        ]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "best_k": self.best_k,
            "sweep": {"rows": [asdict(r) for r in self.sweep.rows], "spearman": self.sweep.spearman},
            "baseline": [asdict(r) for r in self.baseline],
            "ours": [asdict(r) for r in self.ours],
            "medians": {"baseline": self.medians("baseline"), "ours": self.medians("ours")},
            "checks": [asdict(c) for c in self.checks()],
            "seconds": self.seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)


def run_experiment(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """Sweep k by fine-tuning, then train both arms over ``cfg.seeds``."""
    cfg = cfg or ExperimentConfig()
    run = cfg.run.validate()
    if not cfg.seeds:
        raise ConfigurationError("at least one seed is required")
    t0 = time.perf_counter()
    train_all, test = gen_shapes(cfg.data)
    vf = run.hyper.val_fraction
    train, val = split(train_all, [1 - vf, vf], True, cfg.data.seed)
    probe = val.subset(np.arange(min(cfg.probe_count, len(val))))

    # shared Top-GAP base at the configured k, fine-tuned once per sweep k
    base_k = run.head.k
    t1 = time.perf_counter()
    base, _ = train_run(run, base_k, train, val, seed=cfg.seeds[0])
    base_seconds = time.perf_counter() - t1
    log.info("base model k=%d trained in %.0fs", base_k, base_seconds)
    sweep = k_sweep(run, train, cfg.k_list, val=val, base=base)
    best_k = sweep.best_k()
    log.info("sweep spearman %.3f, best k %d", sweep.spearman, best_k)

    ours, baseline = [], []
    for seed in cfg.seeds:
        for arm, k in (("baseline", 0), ("ours", best_k)):
            if arm == "ours" and k == base_k and seed == cfg.seeds[0]:
                params, secs = base, base_seconds
            else:
                t1 = time.perf_counter()
                params, _ = train_run(run, k, train, val, seed=seed)
                secs = time.perf_counter() - t1
            m = measure(params, val, test, probe, is_baseline=(k == 0), fgsm_eps=cfg.fgsm_eps,
                        ad_eps=cfg.ad_eps, seed=seed, train_seconds=secs)
            log.info("%s seed %d: %s", arm, seed, m)
            (baseline if k == 0 else ours).append(m)
    return ExperimentReport(cfg.to_dict(), best_k, sweep, baseline, ours, time.perf_counter() - t0)
