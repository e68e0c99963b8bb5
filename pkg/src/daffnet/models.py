"""Network assembly: EPSA-SA residual backbone, MAP, MAE and the fused DAFFNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attention import EPSA, EpsaSpec, SaSpec, SpatialAttention
from .nn import BatchNorm2d, Conv2d, ConvSpec, Linear, Module, global_avg_pool, max_pool2d
from .schema import AttributeSchema
from .tensor import ShapeError, Tensor, add, concat, no_grad, relu, reshape, sigmoid, softmax, stack


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    input_size: int = 56
    d_sem: int = 64
    epsa: bool = True
    sa: bool = True
    expansion: int = 4
    stem_width: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = True
    epsa_kernels: tuple = (3, 5, 7, 9)
    epsa_groups: tuple = (1, 4, 8, 16)
    epsa_reduction: int = 2
    sa_kernel: int = 7

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.epsa_kernels = tuple(self.epsa_kernels)
        self.epsa_groups = tuple(self.epsa_groups)
        if self.d_sem < 1:
            raise ShapeError("d_sem must be at least 1")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ShapeError("widths and blocks must be non-empty and of equal length")
        if self.epsa:
            for w in self.widths:
                if w % len(self.epsa_kernels):
                    raise ShapeError(
                        f"stage width {w} not divisible by {len(self.epsa_kernels)} EPSA branches")

    @classmethod
    def full_scale(cls, **overrides) -> "BackboneConfig":
        """ResNet50 geometry with a 1000-d semantic feature."""
        base = dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), input_size=224, d_sem=1000,
                    stem_width=64, stem_kernel=7, stem_stride=2, epsa_reduction=4)
        base.update(overrides)
        return cls(**base)


class Normalize(Module):
    """Per-channel standardization with stored dataset statistics."""

    _buffers = ("mean", "std")

    def __init__(self, channels: int = 3):
        super().__init__()
        self.mean = np.zeros(channels, dtype=np.float32)
        self.std = np.ones(channels, dtype=np.float32)

    def set_stats(self, mean, std) -> None:
        self.mean[...] = mean
        self.std[...] = std

    def forward(self, x: Tensor) -> Tensor:
        m = self.mean.astype(x.dtype).reshape(1, -1, 1, 1)
        s = self.std.astype(x.dtype).reshape(1, -1, 1, 1)
        return Tensor((x.data - m) / s) if not x.requires_grad else (x - Tensor(m)) / Tensor(s)


class Bottleneck(Module):
    """1x1 reduce -> EPSA (or 3x3 conv) -> SA -> 1x1 expand, plus skip."""

    def __init__(self, in_ch: int, mid: int, out_ch: int, stride: int, cfg: BackboneConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.reduce = Conv2d(ConvSpec(in_ch, mid, 1, stride, 0), rng, bias=False)
        self.bn1 = BatchNorm2d(mid)
        if cfg.epsa:
            self.middle = EPSA(EpsaSpec(mid, cfg.epsa_kernels, cfg.epsa_groups, cfg.epsa_reduction), rng)
        else:
            self.middle = Conv2d(ConvSpec(mid, mid, 3, 1, 1), rng, bias=False)
        self.bn2 = BatchNorm2d(mid)
        self.sa = SpatialAttention(SaSpec(cfg.sa_kernel), rng) if cfg.sa else None
        self.expand = Conv2d(ConvSpec(mid, out_ch, 1, 1, 0), rng, bias=False)
        self.bn3 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(ConvSpec(in_ch, out_ch, 1, stride, 0), rng, bias=False)
            self.shortcut_bn = BatchNorm2d(out_ch)
        else:
            self.shortcut = self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.reduce(x)))
        h = relu(self.bn2(self.middle(h)))
        if self.sa is not None:
            h = self.sa(h)
        h = self.bn3(self.expand(h))
        skip = self.shortcut_bn(self.shortcut(x)) if self.shortcut is not None else x
        return relu(add(h, skip))


class Backbone(Module):
    """Residual network of bottleneck blocks ending in a D_sem linear projection."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.norm = Normalize(3)
        k = cfg.stem_kernel
        self.stem = Conv2d(ConvSpec(3, cfg.stem_width, k, cfg.stem_stride, k // 2), rng, bias=False)
        self.stem_bn = BatchNorm2d(cfg.stem_width)
        blocks = []
        in_ch = cfg.stem_width
        for si, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            out_ch = width * cfg.expansion
            for bi in range(count):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(Bottleneck(in_ch, width, out_ch, stride, cfg, rng))
                in_ch = out_ch
        self.blocks = blocks
        self.out_channels = in_ch
        self.head = Linear(in_ch, cfg.d_sem, rng)

    def feature_map(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects [N, 3, H, W] images, got {x.shape}")
        h = relu(self.stem_bn(self.stem(self.norm(x))))
        if self.cfg.stem_pool:
            h = max_pool2d(h, 2, 2)
        for block in self.blocks:
            h = block(h)
        return h

    def forward(self, x: Tensor) -> Tensor:
        return self.head(global_avg_pool(self.feature_map(x)))


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Backbone:
    return Backbone(cfg, rng)


# --------------------------------------------------------------------------
@dataclass
class MapOutput:
    attr_logits: list
    aux_logits: Tensor
    feature: Tensor

    def attr_probs(self) -> list:
        return [softmax(z, axis=1) for z in self.attr_logits]

    def class_probs(self) -> Tensor:
        return softmax(self.aux_logits, axis=1)


def map_predict(out) -> np.ndarray:
    """Per-attribute argmax, ties to the lowest index. Accepts a MapOutput or logit arrays."""
    logits = out.attr_logits if isinstance(out, MapOutput) else out
    cols = [np.argmax(z.data if isinstance(z, Tensor) else np.asarray(z), axis=-1) for z in logits]
    return np.stack(cols, axis=-1)


@dataclass
class MapConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(epsa=False, sa=False))
    num_classes: int = 5


class MAP(Module):
    """Backbone + one linear head per attribute + the auxiliary class head."""

    def __init__(self, cfg: MapConfig, schema: AttributeSchema, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.schema = schema
        self.backbone = Backbone(cfg.backbone, rng)
        d = cfg.backbone.d_sem
        self.heads = [Linear(d, p, rng) for p in schema.sizes]
        self.aux_head = Linear(d, cfg.num_classes, rng)

    def forward(self, x: Tensor) -> MapOutput:
        feat = self.backbone(x)
        if len(self.heads) != len(self.schema):
            raise ShapeError(f"MAP has {len(self.heads)} heads for {len(self.schema)} attributes")
        return MapOutput([h(feat) for h in self.heads], self.aux_head(feat), feat)


@dataclass
class MaeConfig:
    squeeze: int = 11
    expand_factor: int = 10
    channels: tuple = (8, 64, 128)
    kernels: tuple = (1, 3, 5)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.kernels = tuple(self.kernels)

    @property
    def out_features(self) -> int:
        return self.channels[-1]


class MAE(Module):
    """Encodes per-attribute probability vectors into a continuous feature vector.

    Each attribute goes P -> 10P -> sigmoid -> 11; the stacked rows form an
    A x 11 single-channel map that passes through three conv+BN+relu stages
    and a global average pool.
    """

    def __init__(self, cfg: MaeConfig, schema: AttributeSchema, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.sizes = tuple(schema.sizes)
        self.expand = [Linear(p, cfg.expand_factor * p, rng) for p in self.sizes]
        self.squeeze = [Linear(cfg.expand_factor * p, cfg.squeeze, rng) for p in self.sizes]
        convs, bns = [], []
        in_ch = 1
        for ch, k in zip(cfg.channels, cfg.kernels):
            convs.append(Conv2d(ConvSpec(in_ch, ch, k, 1, k // 2), rng))
            bns.append(BatchNorm2d(ch))
            in_ch = ch
        self.convs = convs
        self.bns = bns

    def forward_with_map(self, probs: list):
        if len(probs) != len(self.sizes):
            raise ShapeError(f"MAE expects {len(self.sizes)} attribute vectors, got {len(probs)}")
        rows = []
        for m, (p, size) in enumerate(zip(probs, self.sizes)):
            if p.ndim != 2 or p.shape[1] != size:
                raise ShapeError(f"MAE attribute {m}: expected [N, {size}], got {p.shape}")
            rows.append(self.squeeze[m](sigmoid(self.expand[m](p))))
        fmap = stack(rows, axis=1)  # N, A, squeeze
        n = fmap.shape[0]
        h = reshape(fmap, (n, 1) + fmap.shape[1:])
        for conv, bn in zip(self.convs, self.bns):
            h = relu(bn(conv(h)))
        return global_avg_pool(h), fmap

    def forward(self, probs: list) -> Tensor:
        return self.forward_with_map(probs)[0]


@dataclass
class DaffnetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    map: MapConfig = field(default_factory=MapConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    num_classes: int = 5
    mfe: str = "full"  # full | map | none

    def __post_init__(self):
        if self.mfe not in ("full", "map", "none"):
            raise ValueError(f"mfe must be 'full', 'map' or 'none', got {self.mfe!r}")


class DAFFNet(Module):
    """Semantic backbone fused with morphological features, then a linear decoder.

    The MAP branch is frozen: it always runs in eval mode without recording,
    so no gradient reaches it.
    """

    def __init__(self, cfg: DaffnetConfig, schema: AttributeSchema, rng: np.random.Generator,
                 map_model: Optional[MAP] = None):
        super().__init__()
        self.cfg = cfg
        self.schema = schema
        self.backbone = Backbone(cfg.backbone, rng)
        self.map = None
        self.mae = None
        morph = 0
        if cfg.mfe != "none":
            self.map = map_model if map_model is not None else MAP(cfg.map, schema, rng)
            self.map.eval()
            if cfg.mfe == "full":
                self.mae = MAE(cfg.mae, schema, rng)
                morph = cfg.mae.out_features
            else:
                morph = len(schema) * max(schema.sizes)
        self.fused_features = cfg.backbone.d_sem + morph
        self.decoder = Linear(self.fused_features, cfg.num_classes, rng)

    def train(self, mode: bool = True) -> "DAFFNet":
        super().train(mode)
        if self.map is not None:
            self.map.eval()
        return self

    def morphological_feature(self, x: Tensor) -> Optional[Tensor]:
        if self.map is None:
            return None
        with no_grad():
            probs = [Tensor(p.data) for p in self.map(Tensor(x.data)).attr_probs()]
        if self.mae is not None:
            return self.mae(probs)
        width = max(self.schema.sizes)
        n = x.shape[0]
        padded = np.zeros((n, len(probs), width), dtype=x.dtype)
        for m, p in enumerate(probs):
            padded[:, m, : p.shape[1]] = p.data
        return Tensor(padded.reshape(n, -1))

    def fused(self, x: Tensor) -> Tensor:
        sem = self.backbone(x)
        morph = self.morphological_feature(x)
        fused = sem if morph is None else concat([sem, morph], axis=1)
        if fused.shape[1] != self.fused_features:
            raise ShapeError(f"fused feature has {fused.shape[1]} columns, decoder expects "
                             f"{self.fused_features}")
        return fused

    def logits(self, x: Tensor) -> Tensor:
        return self.decoder(self.fused(x))

    def forward(self, x: Tensor) -> Tensor:
        return softmax(self.logits(x), axis=1)

    def trainable_parameters(self) -> list:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("map.")]


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def backbone_config_from_dict(d: dict) -> BackboneConfig:
    return BackboneConfig(**d)


def map_config_from_dict(d: dict) -> MapConfig:
    return MapConfig(backbone=backbone_config_from_dict(d["backbone"]), num_classes=d["num_classes"])


def daffnet_config_from_dict(d: dict) -> DaffnetConfig:
    return DaffnetConfig(
        backbone=backbone_config_from_dict(d["backbone"]),
        map=map_config_from_dict(d["map"]),
        mae=MaeConfig(**d["mae"]),
        num_classes=d["num_classes"],
        mfe=d["mfe"],
    )
