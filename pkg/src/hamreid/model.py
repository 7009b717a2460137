"""The full network: backbone, attention-weighted fusion, stripe branches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, AttentionMaps, hybrid_attention, init_attention
from .backbone import BackboneConfig, FusionConfig, StageMaps, backbone_forward, init_backbone
from .heads import (BranchOutput, BranchSpec, MgoConfig, MpfeConfig, branch_specs,
                    descriptor_extract, init_heads, mgo_partition, mpfe_forward, mpfe_params)
from .params import ParamStore, Scope
from .tensor import Tape, Tensor, make_rng


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mgo: MgoConfig = field(default_factory=MgoConfig)
    mpfe: MpfeConfig = field(default_factory=MpfeConfig)
    num_ids: int = 8

    @classmethod
    def reference(cls, num_ids: int = 751) -> "ModelConfig":
        return cls(backbone=BackboneConfig.reference(), attention=AttentionConfig(cam_reduction=16),
                   mpfe=MpfeConfig(reduce_channels=1024), num_ids=num_ids)

    def validate(self) -> None:
        self.backbone.validate(self.mgo.k)
        self.fusion.validate(self.backbone)
        self.attention.validate(self.backbone, self.fusion)
        self.mgo.validate(self.backbone.stage_shapes()[3][1])
        if self.num_ids < 2:
            raise ValueError(f"need at least 2 identities, got {self.num_ids}")
        if self.mpfe.reduce_channels < 1 or self.mpfe.feature_dim < 1:
            raise ValueError("MPFE widths must be positive")

    @property
    def fused_channels(self) -> int:
        return self.fusion.fused_channels(self.backbone)

    def branch_specs(self) -> list[BranchSpec]:
        return branch_specs(self.mgo, self.backbone.stage_shapes()[3][1])


@dataclass
class ForwardResult:
    stages: StageMaps
    fused: Tensor
    attention: AttentionMaps
    branches: list[tuple[BranchSpec, BranchOutput]]

    @property
    def outputs(self) -> list[BranchOutput]:
        return [o for _, o in self.branches]


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParamStore | None = None):
        cfg.validate()
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            rng = make_rng(seed, 1)
            init_backbone(cfg.backbone, rng, store)
            init_attention(cfg.attention, cfg.backbone, cfg.fusion, rng, store)
            init_heads(cfg.mgo, cfg.mpfe, cfg.fused_channels, cfg.backbone.stage_shapes()[3][1],
                       cfg.num_ids, rng, store)
        self.store = store

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.store.params

    def scope(self, tape: Tape | None = None) -> Scope:
        return Scope.of(self.store, tape)

    def forward(self, x, scope: Scope | None = None, train: bool = False,
                update: bool = True) -> ForwardResult:
        x = x if isinstance(x, Tensor) else Tensor(x)
        scope = scope or self.scope()
        cfg = self.cfg
        stages = backbone_forward(x, cfg.backbone, scope, train, update)
        fused, maps = hybrid_attention(stages, scope, cfg.fusion, cfg.attention)
        branches = [(spec, mpfe_forward(part, mpfe_params(scope, spec), train, update))
                    for spec, part in mgo_partition(fused, cfg.mgo)]
        return ForwardResult(stages, fused, maps, branches)

    def embed(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode retrieval descriptors, one row per image."""
        rows = []
        for i in range(0, len(images), batch_size):
            res = self.forward(images[i : i + batch_size], train=False)
            rows.append(descriptor_extract(res.outputs))
        return np.concatenate(rows, axis=0)
