"""Spatial and channel attention, and their wiring around stage concatenation."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import nn
from . import tensor as T
from .backbone import BackboneConfig, FusionConfig, StageMaps, fmr_fuse
from .nn import Conv2dParams, LinearParams
from .params import ParamStore, Scope
from .tensor import Tensor


class Ordering(enum.Enum):
    """Where SAM (S) and CAM (C) sit relative to the stage concatenation (©)."""

    S_CAT_C = "S+©+C"
    S_C_CAT = "S+C+©"
    C_S_CAT = "C+S+©"
    C_CAT_S = "C+©+S"
    CAT_S_C = "CAT+S+C"
    CAT_C_S = "CAT+C+S"

    @classmethod
    def parse(cls, text: str) -> "Ordering":
        key = text.strip().upper().replace(" ", "")
        for token in ("(C)", "©", "CAT"):
            key = key.replace(token, "#")
        for o in cls:
            if o.value.replace("©", "#").replace("CAT", "#") == key:
                return o
        raise ValueError(f"unknown attention ordering {text!r}")

    @property
    def label(self) -> str:
        return self.value.replace("CAT", "©")

    @property
    def steps(self) -> tuple[str, str, str]:
        return tuple(self.value.replace("©", "CAT").split("+"))

    def per_stage(self) -> tuple[str, ...]:
        """Attention modules applied to each stage before concatenation."""
        s = self.steps
        return s[: s.index("CAT")]

    def post_concat(self) -> tuple[str, ...]:
        s = self.steps
        return s[s.index("CAT") + 1 :]


@dataclass(frozen=True)
class AttentionConfig:
    ordering: Ordering = Ordering.S_CAT_C
    sam_kernel: int = 7
    cam_reduction: int = 4

    def validate(self, backbone: BackboneConfig, fusion: FusionConfig) -> None:
        if self.sam_kernel < 1 or self.sam_kernel % 2 == 0:
            raise ValueError(f"SAM kernel must be odd and positive, got {self.sam_kernel}")
        r = self.cam_reduction
        for c in self.cam_widths(backbone, fusion).values():
            if r < 1 or c % r:
                raise ValueError(f"CAM reduction {r} does not divide channel count {c}")

    def cam_widths(self, backbone: BackboneConfig, fusion: FusionConfig) -> dict[str, int]:
        out = {}
        if "C" in self.ordering.per_stage():
            for s in fusion.included_stages:
                out[f"s{s}"] = backbone.stage_channels[s - 1]
        if "C" in self.ordering.post_concat():
            out["fused"] = fusion.fused_channels(backbone)
        return out

    def sam_sites(self, fusion: FusionConfig) -> list[str]:
        if "S" in self.ordering.per_stage():
            return [f"s{s}" for s in fusion.included_stages]
        return ["fused"]


@dataclass(frozen=True)
class SamParams:
    conv: Conv2dParams  # 2 -> 1 channels, k×k, same padding


@dataclass(frozen=True)
class CamParams:
    fc1: LinearParams  # C -> C/r
    fc2: LinearParams  # C/r -> C
    reduction: int = 1


@dataclass
class AttentionMaps:
    sam: dict[str, Tensor] = field(default_factory=dict)  # site -> N×1×H×W
    cam: dict[str, Tensor] = field(default_factory=dict)  # site -> N×C


def init_attention(cfg: AttentionConfig, backbone: BackboneConfig, fusion: FusionConfig,
                   rng, store: ParamStore) -> None:
    for site in cfg.sam_sites(fusion):
        store.add_conv(rng, f"attn.sam.{site}", 1, 2, cfg.sam_kernel, bias=True)
    for site, c in cfg.cam_widths(backbone, fusion).items():
        hidden = c // cfg.cam_reduction
        store.add_linear(rng, f"attn.cam.{site}.fc1", hidden, c)
        store.add_linear(rng, f"attn.cam.{site}.fc2", c, hidden)


def sam_params(scope: Scope, site: str, kernel: int) -> SamParams:
    pad = (kernel - 1) // 2
    return SamParams(scope.conv(f"attn.sam.{site}", 1, pad))


def cam_params(scope: Scope, site: str, reduction: int) -> CamParams:
    return CamParams(scope.linear(f"attn.cam.{site}.fc1"), scope.linear(f"attn.cam.{site}.fc2"),
                     reduction)


def sam_forward(f: Tensor, p: SamParams) -> tuple[Tensor, Tensor]:
    """Spatial gate from the channelwise mean and max; returns (f ⊙ m, m)."""
    single = f.ndim == 3
    if single:
        f = T.reshape(f, (1,) + f.shape)
    n, _, h, w = f.shape
    avg = T.mean(f, 1, keepdims=True)
    mx = T.amax(f, 1, keepdims=True)
    m = T.sigmoid(nn.conv2d(T.concat_channels([avg, mx]), p.conv))
    if m.shape != (n, 1, h, w):
        raise ValueError(f"SAM conv changed the spatial size: {m.shape}")
    out = f * m
    if single:
        return T.reshape(out, out.shape[1:]), T.reshape(m, m.shape[1:])
    return out, m


def _mlp(v: Tensor, p: CamParams) -> Tensor:
    return nn.linear(T.relu(nn.linear(v, p.fc1)), p.fc2)


def cam_forward(f: Tensor, p: CamParams) -> tuple[Tensor, Tensor]:
    """Channel gate: shared MLP on the global mean and max, summed; returns (f ⊙ m, m)."""
    single = f.ndim == 3
    if single:
        f = T.reshape(f, (1,) + f.shape)
    mx, avg = nn.global_pools(f)
    m = T.sigmoid(_mlp(avg, p) + _mlp(mx, p))
    out = f * T.reshape(m, m.shape + (1, 1))
    if single:
        return T.reshape(out, out.shape[1:]), T.reshape(m, m.shape[1:])
    return out, m


def hybrid_attention(stage_maps: StageMaps, scope: Scope, fusion: FusionConfig,
                     cfg: AttentionConfig) -> tuple[Tensor, AttentionMaps]:
    """Attention-weighted fused map, wired per ``cfg.ordering``."""
    maps = AttentionMaps()

    def apply(step: str, f: Tensor, site: str) -> Tensor:
        if step == "S":
            f, m = sam_forward(f, sam_params(scope, site, cfg.sam_kernel))
            maps.sam[site] = m
        else:
            f, m = cam_forward(f, cam_params(scope, site, cfg.cam_reduction))
            maps.cam[site] = m
        return f

    weighted = list(stage_maps.maps)
    for s in fusion.included_stages:
        for step in cfg.ordering.per_stage():
            weighted[s - 1] = apply(step, weighted[s - 1], f"s{s}")
    fused = fmr_fuse(StageMaps(tuple(weighted)), fusion)
    for step in cfg.ordering.post_concat():
        fused = apply(step, fused, "fused")
    return fused, maps
