"""Four-stage residual backbone and multi-resolution fusion.

The backbone keeps ResNet-50's stage geometry (channel doubling, last stage
stride 1) without being weight compatible with it. Fusion max-pools every
selected stage down to the stage-4 grid and stacks channels in stage order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import nn
from . import tensor as T
from .params import ParamStore, Scope
from .tensor import Tensor

# Table-9 style stage subsets, keyed by a short label.
STAGE_SUBSETS: dict[str, tuple[int, ...]] = {
    "stage1": (1,),
    "stage2": (2,),
    "stage3": (3,),
    "stage4": (4,),
    "stage1-2": (1, 2),
    "stage1-3": (1, 2, 3),
    "stage2-4": (2, 3, 4),
    "all": (1, 2, 3, 4),
}


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    stage_strides: tuple[int, int, int, int] = (2, 2, 2, 1)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    input_hw: tuple[int, int] = (48, 32)
    stem_channels: int = 8
    stem_stride: int = 1

    @classmethod
    def reference(cls) -> "BackboneConfig":
        """ResNet-50 stage geometry at 384×128 with the last stride set to 1."""
        return cls(stage_channels=(256, 512, 1024, 2048), stage_strides=(1, 2, 2, 1),
                   blocks_per_stage=(1, 1, 1, 1), input_hw=(384, 128),
                   stem_channels=64, stem_stride=4)

    @classmethod
    def mini(cls) -> "BackboneConfig":
        return cls()

    def cumulative_strides(self) -> tuple[int, ...]:
        out, r = [], self.stem_stride
        for s in self.stage_strides:
            r *= s
            out.append(r)
        return tuple(out)

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.input_hw
        return [(c, h // r, w // r) for c, r in zip(self.stage_channels, self.cumulative_strides())]

    def validate(self, k: int | None = None) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ValueError("backbone needs exactly four stages")
        if self.stage_strides[3] != 1:
            raise ValueError("stage-4 stride must be 1")
        if self.stem_stride not in (1, 2, 4):
            raise ValueError(f"stem_stride must be 1, 2 or 4, got {self.stem_stride}")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage channels and block counts must be positive")
        total = self.cumulative_strides()[-1]
        h, w = self.input_hw
        if h % total or w % total:
            raise ValueError(f"input {h}x{w} not divisible by total stride {total}")
        h4 = h // total
        if k is not None and h4 % k:
            raise ValueError(f"stage-4 height {h4} not divisible by stripe count {k}")


@dataclass(frozen=True)
class FusionConfig:
    included_stages: tuple[int, ...] = (1, 2, 3, 4)

    def validate(self, backbone: BackboneConfig) -> None:
        stages = self.included_stages
        if not stages or any(s not in (1, 2, 3, 4) for s in stages) or len(set(stages)) != len(stages):
            raise ValueError(f"invalid stage subset {stages}")
        shapes = backbone.stage_shapes()
        _, h4, w4 = shapes[3]
        for s in stages:
            _, h, w = shapes[s - 1]
            if h % h4 or w % w4 or h // h4 != w // w4:
                raise ValueError(f"stage {s} map {h}x{w} is not an integer multiple of {h4}x{w4}")

    def fused_channels(self, backbone: BackboneConfig) -> int:
        return sum(backbone.stage_channels[s - 1] for s in self.included_stages)


@dataclass(frozen=True)
class StageMaps:
    maps: tuple[Tensor, Tensor, Tensor, Tensor]

    def __getitem__(self, stage: int) -> Tensor:
        """1-based stage index."""
        return self.maps[stage - 1]


def init_backbone(cfg: BackboneConfig, rng, store: ParamStore) -> None:
    store.add_conv(rng, "stem.conv", cfg.stem_channels, 3, 3)
    store.add_bn("stem.bn", cfg.stem_channels)
    cin = cfg.stem_channels
    for si, (c, s) in enumerate(zip(cfg.stage_channels, cfg.stage_strides), start=1):
        for b in range(cfg.blocks_per_stage[si - 1]):
            stride = s if b == 0 else 1
            name = f"stage{si}.block{b}"
            store.add_conv(rng, f"{name}.conv1", c, cin, 3)
            store.add_bn(f"{name}.bn1", c)
            store.add_conv(rng, f"{name}.conv2", c, c, 3)
            store.add_bn(f"{name}.bn2", c)
            if stride != 1 or cin != c:
                store.add_conv(rng, f"{name}.down", c, cin, 1)
                store.add_bn(f"{name}.down_bn", c)
            cin = c


def _block(x: Tensor, scope: Scope, name: str, stride: int, train: bool, update: bool) -> Tensor:
    out = nn.conv2d(x, scope.conv(f"{name}.conv1", stride, 1))
    out = T.relu(nn.batchnorm(out, scope.bn(f"{name}.bn1"), train, update))
    out = nn.conv2d(out, scope.conv(f"{name}.conv2", 1, 1))
    out = nn.batchnorm(out, scope.bn(f"{name}.bn2"), train, update)
    if f"{name}.down.w" in scope.values:
        short = nn.batchnorm(nn.conv2d(x, scope.conv(f"{name}.down", stride, 0)),
                             scope.bn(f"{name}.down_bn"), train, update)
    else:
        short = x
    return T.relu(out + short)


def backbone_forward(x: Tensor, cfg: BackboneConfig, scope: Scope, train: bool = False,
                     update: bool = True) -> StageMaps:
    """``N×3×H₀×W₀`` images to the four stage maps."""
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.input_hw):
        raise ValueError(f"expected N×3×{cfg.input_hw[0]}×{cfg.input_hw[1]} input, got {x.shape}")
    first = min(cfg.stem_stride, 2)
    out = nn.conv2d(x, scope.conv("stem.conv", first, 1))
    out = T.relu(nn.batchnorm(out, scope.bn("stem.bn"), train, update))
    if cfg.stem_stride > first:
        out = nn.pool2d(out, "max", cfg.stem_stride // first)
    maps = []
    for si, s in enumerate(cfg.stage_strides, start=1):
        for b in range(cfg.blocks_per_stage[si - 1]):
            out = _block(out, scope, f"stage{si}.block{b}", s if b == 0 else 1, train, update)
        maps.append(out)
    return StageMaps(tuple(maps))


def equalize(f: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Max-pool ``f`` by its integer spatial ratio to ``target_hw``."""
    h, w = f.shape[-2:]
    th, tw = target_hw
    if h % th or w % tw:
        raise ValueError(f"cannot pool {h}x{w} to {th}x{tw} by an integer ratio")
    rh, rw = h // th, w // tw
    if rh == rw == 1:
        return f
    return nn.pool2d(f, "max", (rh, rw))


def fmr_fuse(maps: StageMaps | Sequence[Tensor], cfg: FusionConfig) -> Tensor:
    """Pool the selected stages to the stage-4 grid and concatenate channels."""
    maps = maps if isinstance(maps, StageMaps) else StageMaps(tuple(maps))
    target = maps[4].shape[-2:]
    return T.concat_channels([equalize(maps[s], target) for s in cfg.included_stages])
