"""l-inf adversarial attacks and successful-attack-rate statistics.

White-box attacks take a *model*: any object whose ``forward(Tensor)``
returns N x classes logits built from diffcore ops. Square Attack only gets
a logits callable (numpy in, numpy out) and never sees gradients.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .data.dataset import Dataset
from .diffcore import Tensor, backward, softmax_ce
from .errors import ConfigurationError, DataError, NumericError

ATTACK_DISTANCE_EPS = 1 / 255


def parse_epsilon(text) -> float:
    """``"8/255"`` -> 8/255 via an exact rational, converted once."""
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"cannot parse epsilon {text!r}") from exc


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float | None = None  # None -> epsilon / 4
    random_start: bool = True
    query_budget: int = 5000
    p_init: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("fgsm", "pgd", "square"):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not 0.0 < self.step_size <= max(self.epsilon, 0.0):
            raise ConfigurationError(f"step size must lie in (0, epsilon], got {self.step_size}")
        if self.query_budget < 0 or not 0.0 < self.p_init <= 1.0:
            raise ConfigurationError("query_budget must be >= 0 and p_init in (0, 1]")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    @property
    def name(self) -> str:
        eps = f"eps={self.epsilon:.6g}"
        if self.kind == "pgd":
            return f"pgd{self.steps}_{eps}"
        if self.kind == "square":
            return f"square{self.query_budget}_{eps}"
        return f"fgsm_{eps}"


# --------------------------------------------------------------------------
# gradient attacks


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d CE / d x for a batch (mean loss; per-sample signs are unaffected)."""
    xt = Tensor(np.array(x), requires_grad=True)
    loss = softmax_ce(model.forward(xt), y)
    backward(loss)
    g = xt.grad
    if g is None:
        return np.zeros_like(x)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient")
    return g


def _batched(fn, x, *rest, batch_size=256):
    out = np.empty_like(x)
    for i in range(0, len(x), batch_size):
        sl = slice(i, i + batch_size)
        out[sl] = fn(x[sl], *(r[sl] for r in rest), offset=i)
    return out


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float, batch_size: int = 256) -> np.ndarray:
    """``clip(x + eps * sign(grad CE), 0, 1)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    if epsilon == 0:
        return x.copy()

    def one(xb, yb, offset):
        g = loss_gradient(model, xb, yb)
        return np.clip(xb + np.asarray(epsilon, xb.dtype) * np.sign(g), 0, 1)

    return _batched(one, x, y, batch_size=batch_size)


def _region_mask(mask: np.ndarray, region: str) -> np.ndarray:
    if region not in ("object", "background"):
        raise ConfigurationError(f"region must be 'object' or 'background', got {region!r}")
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask must be binary")
    sel = mask.astype(bool)
    return sel if region == "object" else ~sel


def masked_fgsm(model, x: np.ndarray, y: np.ndarray, mask: np.ndarray, region: str,
                epsilon: float, batch_size: int = 256) -> np.ndarray:
    """FGSM restricted to the object (mask == 1) or background (mask == 0) pixels.

    ``mask`` is N x H x W; unselected pixels are returned bit-identical.
    """
    x = np.asarray(x)
    if mask.shape != (x.shape[0],) + x.shape[2:]:
        raise DataError(f"mask shape {mask.shape} does not match images {x.shape}")
    sel = _region_mask(mask, region)
    if not sel.any():
        warnings.warn(f"empty {region} region; images returned unchanged", stacklevel=2)
        return x.copy()
    adv = fgsm(model, x, y, epsilon, batch_size)
    return np.where(sel[:, None], adv, x)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, batch_size: int = 256) -> np.ndarray:
    """Projected sign-gradient ascent inside the eps-ball intersected with [0, 1].

    Random-start noise of sample ``i`` comes from ``seed + i``.
    """
    cfg.validate()
    x = np.asarray(x)
    y = np.asarray(y)
    if cfg.epsilon == 0:
        return x.copy()
    eps = np.asarray(cfg.epsilon, dtype=x.dtype)
    alpha = np.asarray(cfg.alpha, dtype=x.dtype)

    def one(x0, yb, offset):
        lo, hi = np.maximum(x0 - eps, 0), np.minimum(x0 + eps, 1)
        xa = x0.copy()
        if cfg.random_start:
            noise = np.stack([
                np.random.default_rng(cfg.seed + offset + j).uniform(-cfg.epsilon, cfg.epsilon, x0.shape[1:])
                for j in range(len(x0))
            ]).astype(x0.dtype)
            xa = np.clip(x0 + noise, lo, hi)
        for _ in range(cfg.steps):
            g = loss_gradient(model, xa, yb)
            xa = np.clip(xa + alpha * np.sign(g), lo, hi)
        return xa

    return _batched(one, x, y, batch_size=batch_size)


# --------------------------------------------------------------------------
# Square Attack (gradient-free random search)


def _p_selection(p_init: float, it: int, n_iters: int) -> float:
    it = int(it / max(n_iters, 1) * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32),
                       (4000, 64), (6000, 128), (8000, 256), (10000, 512)):
        if it <= bound:
            return p_init / div
    return p_init


def margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True-class logit minus the best other logit; <= 0 means misclassified."""
    rows = np.arange(len(y))
    true = logits[rows, y]
    other = logits.copy()
    other[rows, y] = -np.inf
    return true - other.max(axis=1)


def square_attack(logits_fn, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Random search over square +-eps patches, accepting margin decreases.

    ``logits_fn`` maps an image batch to logits. Each sample stops once
    misclassified or after ``cfg.query_budget`` queries (the initial
    vertical-stripe proposal counts as one).
    """
    cfg.validate()
    x = np.asarray(x)
    y = np.asarray(y)
    if cfg.query_budget == 0 or cfg.epsilon == 0 or len(x) == 0:
        return x.copy()
    n, c, h, w = x.shape
    eps = cfg.epsilon
    rngs = [np.random.default_rng(cfg.seed + i) for i in range(n)]
    stripes = np.stack([r.choice([-eps, eps], size=(c, 1, w)) for r in rngs]).astype(x.dtype)
    x_best = np.clip(x + stripes, 0, 1)
    m_best = margin(np.asarray(logits_fn(x_best)), y)
    n_iters = cfg.query_budget
    for it in range(n_iters - 1):
        active = np.flatnonzero(m_best > 0)
        if active.size == 0:
            break
        p = _p_selection(cfg.p_init, it, n_iters)
        s = int(round(math.sqrt(p * h * w)))
        s = min(max(s, 1), h - 1) if h > 1 else 1
        x_new = x_best[active].copy()
        for j, i in enumerate(active):
            r = rngs[i]
            top = int(r.integers(0, h - s + 1))
            left = int(r.integers(0, w - s + 1))
            win = (slice(None), slice(top, top + s), slice(left, left + s))
            cur = x_best[i][win]
            for _ in range(100):
                signs = r.choice([-eps, eps], size=(c, 1, 1)).astype(x.dtype)
                cand = np.clip(x[i][win] + signs, 0, 1)
                if np.any(np.abs(cand - cur) > 1e-7):
                    break
            x_new[j][win] = cand
        m_new = margin(np.asarray(logits_fn(x_new)), y[active])
        better = m_new < m_best[active]
        x_best[active[better]] = x_new[better]
        m_best[active[better]] = m_new[better]
    return x_best


# --------------------------------------------------------------------------
# evaluation


def _logits_callable(model):
    if hasattr(model, "logits"):
        return model.logits
    from .diffcore import no_grad

    def fn(images):
        with no_grad():
            return model.forward(Tensor(images)).data

    return fn


def run_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, batch_size: int = 256) -> np.ndarray:
    cfg.validate()
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon, batch_size)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg, batch_size)
    return square_attack(_logits_callable(model), x, y, cfg)


def accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.asarray(_logits_callable(model)(x)).argmax(axis=1)
    return float((pred == y).mean())


@dataclass
class RobustnessReport:
    clean_accuracy: float
    n: int
    robust_accuracy: dict = field(default_factory=dict)
    sar: dict = field(default_factory=dict)
    attack_distance: float | None = None
    configs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_rows(self) -> list:
        rows = [{"attack": "clean", "accuracy": self.clean_accuracy, "sar": 1 - self.clean_accuracy, "n": self.n}]
        for name, acc in self.robust_accuracy.items():
            rows.append({"attack": name, "accuracy": acc, "sar": self.sar[name], "n": self.n})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["attack", "accuracy", "sar", "n"])
        wr.writeheader()
        wr.writerows(self.csv_rows())
        return buf.getvalue()


def evaluate_robustness(model, dataset: Dataset, cfgs, batch_size: int = 256) -> RobustnessReport:
    """Clean and per-attack accuracy over the whole set; SAR = 1 - accuracy."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate robustness on an empty dataset")
    x, y = dataset.images, dataset.labels
    rep = RobustnessReport(clean_accuracy=accuracy(model, x, y), n=len(dataset))
    for cfg in cfgs:
        adv = run_attack(model, x, y, cfg, batch_size)
        acc = accuracy(model, adv, y)
        rep.robust_accuracy[cfg.name] = acc
        rep.sar[cfg.name] = 1 - acc
        rep.configs[cfg.name] = asdict(cfg) | {"alpha": cfg.alpha}
    return rep


def masked_sar(model, dataset: Dataset, region: str, epsilon: float, batch_size: int = 256) -> float:
    adv = masked_fgsm(model, dataset.images, dataset.labels, dataset.masks, region, epsilon, batch_size)
    return 1.0 - accuracy(model, adv, dataset.labels)


def attack_distance(model, dataset: Dataset, epsilon: float = ATTACK_DISTANCE_EPS, batch_size: int = 256) -> float:
    """SAR with only object pixels perturbed minus SAR with only background perturbed."""
    if dataset.masks is None:
        raise DataError(f"attack distance needs object masks; samples without masks: {dataset.ids}")
    return masked_sar(model, dataset, "object", epsilon, batch_size) - masked_sar(
        model, dataset, "background", epsilon, batch_size
    )
