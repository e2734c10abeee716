"""Command-line interface: ``topgap gen-data | train | eval | sweep | experiment``.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import cam_iou, erf_distance, gradcam, iou_threshold_sweep, k_sweep, topgap_cam
from .attacks import AttackConfig, accuracy, attack_distance, evaluate_robustness, parse_epsilon
from .data import (
    ShapesConfig,
    export_folder,
    gen_shapes,
    load_checkpoint,
    load_folder,
    mask_root,
    save_checkpoint,
    write_gray,
)
from .errors import ConfigurationError, DataError, TopGapError
from .experiment import ExperimentConfig, RunConfig, run_experiment
from .net import BackboneConfig, HeadConfig, TopGapNetwork, TrainHyper, build_model, train_model

log = logging.getLogger("topgap")

EVAL_KINDS = ("clean", "robust", "erf", "cam", "iou", "ad")

DEFAULTS = {
    "gen-data": dict(count=8000, test_count=None, size=64, classes=4, bias=0.95, seed=0,
                     area_min=0.04, area_max=0.12, background="textures", out="data"),
    "train": dict(data=None, out="run", k=16, lam=1.0, epochs=15, batch_size=64, lr=2e-3, seed=0,
                  stage_widths="16,32,48", blocks=1, feature_maps=3, fpn_channels=32, dropout=0.0,
                  val_fraction=0.2, hflip=False),
    "eval": dict(checkpoint=None, data=None, out="eval", which="clean", attack="pgd", eps="8/255", steps=20,
                 step_size=None, no_random_start=False, queries=5000, p_init=0.8, seed=0, emit_cams=0,
                 limit=None, threshold=0.5, cam_method="auto", batch_size=128),
    "sweep": dict(data=None, out="sweep", k="4,8,16,32,64", lam=1.0, epochs=10, finetune_from=None,
                  batch_size=64, lr=2e-3, seed=0, stage_widths="16,32,48", blocks=1, feature_maps=3,
                  fpn_channels=32, dropout=0.0, val_fraction=0.2, hflip=False),
    "experiment": dict(out="experiment", count=8000, test_count=2000, bias=0.95, data_seed=7, seeds="0,1,2",
                       k="4,8,16,32,64", base_k=16, epochs=12, finetune_epochs=2, probe_count=400,
                       batch_size=64, lr=2e-3, fpn_channels=32),
}


# --------------------------------------------------------------------------
# manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"topgap-{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"topgap-{__version__}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    build_id: str = field(default_factory=build_id)
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def add(self, root: Path, paths) -> None:
        for p in paths:
            self.outputs[str(Path(p).relative_to(root))] = sha256_file(p)

    def write(self, root: Path) -> Path:
        self.finished = _now()
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --------------------------------------------------------------------------
# argument handling


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise ConfigurationError(f"expected a comma-separated integer list, got {text!r}") from exc


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then flags the user actually passed."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _thread_count(args) -> int | None:
    raw = args.threads if args.threads is not None else os.environ.get("TOPGAP_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"thread count must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    return n


def _split_root(path) -> tuple:
    """Dataset directory for training: ``<path>/train`` if it exists, else ``path``."""
    if path is None:
        raise ConfigurationError("--data is required")
    root = Path(path)
    if not root.exists():
        raise DataError(f"dataset path {root} does not exist")
    return root / "train" if (root / "train").is_dir() else root


def _run_config(cfg: dict, k: int) -> RunConfig:
    run = RunConfig(
        backbone=BackboneConfig(stage_widths=_ints(cfg["stage_widths"]), blocks_per_stage=int(cfg["blocks"]),
                                feature_maps_used=int(cfg["feature_maps"])),
        head=HeadConfig(k=max(int(k), 1), lam=float(cfg["lam"]), fpn_channels=int(cfg["fpn_channels"]),
                        dropout_rate=float(cfg["dropout"])),
        hyper=TrainHyper(lr=float(cfg["lr"]), val_fraction=float(cfg["val_fraction"]), hflip=bool(cfg["hflip"])),
        seed=int(cfg["seed"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
    )
    run.backbone.validate()
    return run


def _load_train_data(cfg: dict, run: RunConfig):
    data = load_folder(_split_root(cfg["data"]))
    if data.image_size != run.backbone.input_size:
        run.backbone.input_size = data.image_size
        run.backbone.validate()
    run.head.num_classes = data.num_classes
    return data


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, manifest: RunManifest) -> int:
    scfg = ShapesConfig(count=int(cfg["count"]), image_size=int(cfg["size"]), num_classes=int(cfg["classes"]),
                        area_fraction=(float(cfg["area_min"]), float(cfg["area_max"])),
                        background=cfg["background"], bias=float(cfg["bias"]), seed=int(cfg["seed"]),
                        test_count=None if cfg["test_count"] is None else int(cfg["test_count"]))
    scfg.validate()
    train, test = gen_shapes(scfg)
    out = Path(cfg["out"])
    written = export_folder(train, out / "train") + export_folder(test, out / "test")
    for name, ds in (("train", train), ("test", test)):
        p = out / f"{name}_manifest.json"
        p.write_text(json.dumps(ds.manifest(), indent=1, sort_keys=True, default=str) + "\n")
        written.append(p)
    manifest.seeds = [scfg.seed]
    manifest.add(out, written)
    manifest.write(out)
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return 0


def cmd_train(cfg: dict, manifest: RunManifest) -> int:
    k = int(cfg["k"])
    run = _run_config(cfg, k)
    data = _load_train_data(cfg, run)
    head = run.head_for(k)
    params = build_model(run.backbone, head, seed=run.seed)
    params, tlog = train_model(params, data, run.epochs, run.batch_size, run.hyper, run.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(params, out / "model.tgcp", {"train_log_digest": tlog.digest()})
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        rows = tlog.rows()
        wr = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "train_acc", "train_l1", "val_loss", "val_acc",
                                            "val_l1"])
        wr.writeheader()
        wr.writerows(rows)
    digest_path = out / "train_log.sha256"
    digest_path.write_text(tlog.digest() + "\n")
    manifest.seeds = [run.seed]
    manifest.config["resolved_head"] = head.to_dict()
    manifest.add(out, [ckpt, log_path, digest_path])
    manifest.write(out)
    best = params.metrics.get("best_val_acc", float("nan"))
    print(f"k={head.k} lambda={head.lam} best val acc {best:.4f}; log digest {tlog.digest()[:16]}")
    return 0


def _eval_data(cfg: dict, need_masks: bool):
    root = Path(cfg["data"]) if cfg["data"] else None
    if root is None:
        raise ConfigurationError("--data is required")
    if (root / "test").is_dir():
        root = root / "test"
    if need_masks and not mask_root(root).is_dir():
        raise DataError(f"this evaluation needs object masks, but {mask_root(root)} does not exist")
    data = load_folder(root, with_masks=need_masks)
    if cfg["limit"] is not None:
        data = data.subset(np.arange(min(int(cfg["limit"]), len(data))))
    return data


def cmd_eval(cfg: dict, manifest: RunManifest) -> int:
    which = [w.strip() for w in str(cfg["which"]).split(",") if w.strip()]
    bad = [w for w in which if w not in EVAL_KINDS]
    if bad or not which:
        raise ConfigurationError(f"--which must be drawn from {EVAL_KINDS}, got {cfg['which']!r}")
    if cfg["checkpoint"] is None:
        raise ConfigurationError("--checkpoint is required")
    params = load_checkpoint(cfg["checkpoint"])
    net = TopGapNetwork(params)
    need_masks = any(w in ("iou", "ad") for w in which)
    data = _eval_data(cfg, need_masks)
    if data.image_size != params.backbone.input_size:
        raise DataError(f"images are {data.image_size}px but the model expects {params.backbone.input_size}px")
    eps = parse_epsilon(cfg["eps"])
    fused = params.fused_size
    is_baseline = params.head.k == fused * fused and params.head.lam == 0
    method = cfg["cam_method"]
    if method == "auto":
        method = "gradcam" if is_baseline else "ours"
    if method not in ("ours", "gradcam"):
        raise ConfigurationError(f"--cam-method must be auto, ours or gradcam, got {method!r}")

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = {"n": len(data), "k": params.head.k, "lambda": params.head.lam, "epsilon": eps}
    rows = []
    cams = None

    def get_cams():
        nonlocal cams
        if cams is None:
            bs = int(cfg["batch_size"])
            parts = []
            for b in range(0, len(data), bs):
                x, y = data.images[b : b + bs], data.labels[b : b + bs]
                parts.append((gradcam if method == "gradcam" else topgap_cam)(net, x, y).cam)
            cams = np.concatenate(parts)
        return cams

    for w in which:
        if w == "clean":
            acc = accuracy(net, data.images, data.labels)
            report["clean_accuracy"] = acc
            rows.append({"metric": "clean_accuracy", "value": acc})
        elif w == "robust":
            acfg = AttackConfig(kind=cfg["attack"], epsilon=eps, steps=int(cfg["steps"]),
                                step_size=None if cfg["step_size"] is None else parse_epsilon(cfg["step_size"]),
                                random_start=not cfg["no_random_start"], query_budget=int(cfg["queries"]),
                                p_init=float(cfg["p_init"]), seed=int(cfg["seed"]))
            acfg.validate()
            rep = evaluate_robustness(net, data, [acfg], int(cfg["batch_size"]))
            report["robustness"] = asdict(rep)
            rows += [{"metric": f"accuracy:{r['attack']}", "value": r["accuracy"]} for r in rep.csv_rows()]
            rows += [{"metric": f"sar:{n}", "value": v} for n, v in rep.sar.items()]
        elif w == "erf":
            erf = erf_distance(net, data.images, int(cfg["batch_size"]))
            report["erf"] = asdict(erf)
            rows.append({"metric": "erf_distance", "value": erf.distance})
        elif w == "ad":
            ad = attack_distance(net, data, eps)
            report["attack_distance"] = ad
            rows.append({"metric": "attack_distance", "value": ad})
        elif w == "iou":
            c = get_cams()
            iou = cam_iou(c, data.masks, float(cfg["threshold"]))
            report["iou"] = {"method": method, "threshold": float(cfg["threshold"]), "value": iou,
                             "sweep": iou_threshold_sweep(c, data.masks)}
            rows.append({"metric": f"iou:{method}", "value": iou})
        elif w == "cam":
            c = get_cams()
            report["cam"] = {"method": method, "mean_l1": float(c.mean())}
            rows.append({"metric": f"cam_l1:{method}", "value": float(c.mean())})

    written = []
    n_emit = min(int(cfg["emit_cams"]), len(data))
    if n_emit > 0:
        c = get_cams()
        cam_dir = out / "cams"
        cam_dir.mkdir(exist_ok=True)
        for i in range(n_emit):
            stem = cam_dir / f"{data.ids[i]}_{method}"
            write_gray(stem.with_suffix(".pgm"), c[i])
            write_gray(stem.with_suffix(".png"), c[i])
            c[i].astype("<f4").tofile(stem.with_suffix(".f32"))
            written += [stem.with_suffix(s) for s in (".pgm", ".png", ".f32")]
    rp = out / "report.json"
    rp.write_text(json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")
    cp = out / "report.csv"
    with open(cp, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["metric", "value"])
        wr.writeheader()
        wr.writerows(rows)
    manifest.seeds = [int(cfg["seed"])]
    manifest.add(out, [rp, cp] + written)
    manifest.write(out)
    for r in rows:
        print(f"{r['metric']}: {r['value']:.6g}")
    return 0


def cmd_sweep(cfg: dict, manifest: RunManifest) -> int:
    ks = _ints(cfg["k"])
    if not ks:
        raise ConfigurationError("--k needs at least one value")
    run = _run_config(cfg, ks[0])
    data = _load_train_data(cfg, run)
    base = None
    if cfg["finetune_from"]:
        base = load_checkpoint(cfg["finetune_from"])
        run.finetune_epochs = run.epochs
    rep = k_sweep(run, data, ks, base=base)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    sp, tp = out / "sweep.csv", out / "trend.csv"
    sp.write_text(rep.to_csv())
    tp.write_text(rep.trend_csv())
    manifest.seeds = [run.seed]
    manifest.add(out, [sp, tp])
    manifest.write(out)
    for r in rep.rows:
        status = f"failed: {r.failed}" if r.failed else f"val acc {r.val_accuracy:.4f} cam l1 {r.cam_l1:.4f}"
        print(f"k={r.k} ({r.k_normalized:.4f}): {status}")
    print(f"spearman(k, cam l1) = {rep.spearman:.4f}")
    if not rep.ok_rows:
        log.error("every sweep run failed")
        return 4
    return 0


def cmd_experiment(cfg: dict, manifest: RunManifest) -> int:
    run = RunConfig(head=HeadConfig(k=int(cfg["base_k"]), lam=1.0, fpn_channels=int(cfg["fpn_channels"])),
                    hyper=TrainHyper(lr=float(cfg["lr"])), epochs=int(cfg["epochs"]),
                    finetune_epochs=int(cfg["finetune_epochs"]), batch_size=int(cfg["batch_size"]))
    ecfg = ExperimentConfig(
        data=ShapesConfig(count=int(cfg["count"]), test_count=int(cfg["test_count"]), bias=float(cfg["bias"]),
                          seed=int(cfg["data_seed"])),
        run=run, seeds=_ints(cfg["seeds"]), k_list=_ints(cfg["k"]), probe_count=int(cfg["probe_count"]),
    )
    ecfg.data.validate()
    rep = run_experiment(ecfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rp = out / "experiment.json"
    rp.write_text(rep.to_json() + "\n")
    manifest.seeds = list(ecfg.seeds)
    manifest.add(out, [rp])
    manifest.write(out)
    for c in rep.checks():
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:+.4f} ({c.description})")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "experiment": cmd_experiment}


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset folder (uses <data>/train when present)")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the class-map l1 term")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--stage-widths", help="comma-separated backbone widths, e.g. 16,32,48")
    p.add_argument("--blocks", type=int, help="residual blocks per stage")
    p.add_argument("--feature-maps", type=int, help="backbone maps fed to the FPN head")
    p.add_argument("--fpn-channels", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--hflip", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; explicit flags take precedence")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default: $TOPGAP_THREADS); 1 is bit-deterministic")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="topgap", description="Top-GAP training and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the biased shapes dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--bias", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--area-min", type=float)
    g.add_argument("--area-max", type=float)
    g.add_argument("--background", choices=("noise", "textures"))

    t = sub.add_parser("train", parents=[common], help="train one model")
    _model_flags(t)
    t.add_argument("--k", type=int, help="pixel constraint; 0 trains the plain-GAP baseline")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset folder (uses <data>/test when present)")
    e.add_argument("--which", help=f"comma-separated subset of {','.join(EVAL_KINDS)}")
    e.add_argument("--attack", choices=("fgsm", "pgd", "square"))
    e.add_argument("--eps", help="l-inf radius, e.g. 8/255")
    e.add_argument("--steps", type=int)
    e.add_argument("--step-size")
    e.add_argument("--no-random-start", action="store_true", default=None)
    e.add_argument("--queries", type=int, help="Square Attack query budget")
    e.add_argument("--p-init", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--emit-cams", type=int, help="write heatmaps for the first N samples")
    e.add_argument("--limit", type=int, help="evaluate only the first N samples")
    e.add_argument("--threshold", type=float, help="CAM binarisation threshold for IoU")
    e.add_argument("--cam-method", choices=("auto", "ours", "gradcam"))
    e.add_argument("--batch-size", type=int)

    s = sub.add_parser("sweep", parents=[common], help="train one model per k")
    _model_flags(s)
    s.add_argument("--k", help="comma-separated increasing k values")
    s.add_argument("--finetune-from", help="checkpoint to fine-tune for each k instead of training from scratch")

    x = sub.add_parser("experiment", parents=[common], help="baseline vs Top-GAP comparison over seeds")
    x.add_argument("--count", type=int)
    x.add_argument("--test-count", type=int)
    x.add_argument("--bias", type=float)
    x.add_argument("--data-seed", type=int)
    x.add_argument("--seeds")
    x.add_argument("--k")
    x.add_argument("--base-k", type=int)
    x.add_argument("--epochs", type=int)
    x.add_argument("--finetune-epochs", type=int)
    x.add_argument("--probe-count", type=int)
    x.add_argument("--batch-size", type=int)
    x.add_argument("--lr", type=float)
    x.add_argument("--fpn-channels", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        threads = _thread_count(args)
        manifest = RunManifest(args.command, dict(cfg, threads=threads), [], started=_now())
        if threads is None:
            return COMMANDS[args.command](cfg, manifest)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, manifest)
    except TopGapError as exc:
        print(f"topgap {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed values from a config file
        print(f"topgap {args.command}: error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
