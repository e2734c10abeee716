"""Model configuration and parameter containers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..diffcore import BatchNormStats, Tensor
from ..errors import ConfigurationError, ConstraintError


@dataclass
class BackboneConfig:
    input_size: int = 64
    input_channels: int = 3
    stage_widths: tuple = (16, 32, 48)
    blocks_per_stage: int = 1
    feature_maps_used: int = 3

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def validate(self) -> None:
        if self.num_stages < 1 or any(w < 1 for w in self.stage_widths):
            raise ConfigurationError(f"stage_widths must be positive, got {self.stage_widths}")
        if self.blocks_per_stage < 0:
            raise ConfigurationError("blocks_per_stage must be >= 0")
        if not 1 <= self.feature_maps_used <= self.num_stages:
            raise ConfigurationError(
                f"feature_maps_used={self.feature_maps_used} needs at least that many stages "
                f"(have {self.num_stages})"
            )
        div = 2 ** (self.num_stages + 1)
        if self.input_size < div or self.input_size % div:
            raise ConfigurationError(
                f"input_size {self.input_size} must be divisible by 2^(stages+1) = {div}"
            )

    def feature_sizes(self) -> list:
        """Spatial sizes of the used feature maps, largest first."""
        sizes = [self.input_size // 2 ** (s + 2) for s in range(self.num_stages)]
        return sizes[self.num_stages - self.feature_maps_used :]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


@dataclass
class HeadConfig:
    num_classes: int = 4
    k: int = 16
    lam: float = 1.0
    fpn_channels: int = 256
    dropout_rate: float = 0.0

    def validate(self, fused_size: int | None = None) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.fpn_channels < 1:
            raise ConfigurationError("fpn_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if fused_size is not None and not 1 <= self.k <= fused_size**2:
            raise ConstraintError(f"k must satisfy 1 <= k <= {fused_size**2}, got {self.k}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def gap_baseline(cls, fused_size: int, **kw) -> "HeadConfig":
        """Plain global-average head: k covers the whole map, no l1 term."""
        kw.update(k=fused_size * fused_size, lam=0.0)
        return cls(**kw)


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelParams:
    """Named parameter tensors, batch-norm running statistics and configs."""

    backbone: BackboneConfig
    head: HeadConfig
    tensors: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    seed: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def fused_size(self) -> int:
        return self.backbone.feature_sizes()[0]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def trainable(self) -> dict:
        return self.tensors

    def parameter_count(self, prefix: str | None = None) -> int:
        return int(sum(t.data.size for n, t in self.tensors.items() if prefix is None or n.startswith(prefix)))

    def head_parameter_count(self) -> int:
        return self.parameter_count("fpn") + self.parameter_count("cls")

    def backbone_parameter_count(self) -> int:
        return self.parameter_count() - self.head_parameter_count()

    def state_arrays(self) -> dict:
        out = {name: t.data for name, t in self.tensors.items()}
        for name, st in self.bn.items():
            out[f"bn:{name}.mean"] = st.mean
            out[f"bn:{name}.var"] = st.var
        return out

    def copy(self) -> "ModelParams":
        return ModelParams.from_state(
            {k: v.copy() for k, v in self.state_arrays().items()},
            self.backbone.to_dict(),
            self.head.to_dict(),
            seed=self.seed,
            metrics=dict(self.metrics),
        )

    def load_state(self, arrays: dict) -> None:
        for name, t in self.tensors.items():
            t.data[...] = arrays[name]
        for name, st in self.bn.items():
            st.mean[...] = arrays[f"bn:{name}.mean"]
            st.var[...] = arrays[f"bn:{name}.var"]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_state(
            {k: v.astype(dtype) for k, v in self.state_arrays().items()},
            self.backbone.to_dict(), self.head.to_dict(), seed=self.seed, metrics=dict(self.metrics),
        )

    @classmethod
    def from_state(cls, arrays: dict, backbone: dict, head: dict, seed: int = 0, metrics=None) -> "ModelParams":
        p = cls(_from_dict(BackboneConfig, backbone), _from_dict(HeadConfig, head), seed=seed, metrics=metrics or {})
        for name, arr in arrays.items():
            if name.startswith("bn:"):
                base, which = name[3:].rsplit(".", 1)
                st = p.bn.setdefault(base, BatchNormStats(len(arr), arr.dtype))
                setattr(st, which, arr)
            else:
                p.tensors[name] = Tensor(arr, requires_grad=True)
        return p


def _conv_init(rng, f: int, c: int, k: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (c * k * k))
    return (rng.standard_normal((f, c, k, k)) * std).astype(dtype)


def build_model(bcfg: BackboneConfig, hcfg: HeadConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-initialised backbone + FPN-lite head.

    Layer names: ``stem``, ``s{i}.down``, ``s{i}.b{j}`` (backbone convs with
    batch norm), ``fpn{l}`` (3x3, per used level) and ``cls`` (1x1).
    """
    bcfg.validate()
    hcfg.validate(bcfg.feature_sizes()[0])
    rng = np.random.default_rng(seed)
    p = ModelParams(bcfg, hcfg, seed=seed)

    def conv_bn(name, c_in, c_out):
        p.tensors[f"{name}.w"] = Tensor(_conv_init(rng, c_out, c_in, 3, dtype), requires_grad=True)
        p.tensors[f"{name}.g"] = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        p.tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        p.bn[name] = BatchNormStats(c_out, dtype)

    widths = bcfg.stage_widths
    conv_bn("stem", bcfg.input_channels, widths[0])
    prev = widths[0]
    for s, w in enumerate(widths):
        conv_bn(f"s{s}.down", prev, w)
        for j in range(bcfg.blocks_per_stage):
            conv_bn(f"s{s}.b{j}", w, w)
        prev = w
    used = widths[bcfg.num_stages - bcfg.feature_maps_used :]
    for lvl, w in enumerate(used):
        p.tensors[f"fpn{lvl}.w"] = Tensor(_conv_init(rng, hcfg.fpn_channels, w, 3, dtype), requires_grad=True)
        p.tensors[f"fpn{lvl}.b"] = Tensor(np.zeros(hcfg.fpn_channels, dtype=dtype), requires_grad=True)
    p.tensors["cls.w"] = Tensor(_conv_init(rng, hcfg.num_classes, hcfg.fpn_channels, 1, dtype), requires_grad=True)
    p.tensors["cls.b"] = Tensor(np.zeros(hcfg.num_classes, dtype=dtype), requires_grad=True)
    return p
