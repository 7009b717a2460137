"""Multi-granularity stripe branches and the per-branch max+avg feature extractor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import BatchNormParams, Conv2dParams, LinearParams
from .params import ParamStore, Scope
from .tensor import Tensor


@dataclass(frozen=True)
class MgoConfig:
    k: int = 6
    levels: tuple[int, ...] = (1, 2, 3, 4, 5, 6)

    def validate(self, height: int | None = None) -> None:
        if self.k < 1:
            raise ValueError(f"stripe count must be positive, got {self.k}")
        if not self.levels or any(not 1 <= p <= self.k for p in self.levels):
            raise ValueError(f"levels {self.levels} must lie in [1, {self.k}]")
        if height is not None and height % self.k:
            raise ValueError(f"map height {height} not divisible by k={self.k}")

    def branch_count(self) -> int:
        return sum(self.levels)


@dataclass(frozen=True)
class BranchSpec:
    part: int
    offset: int  # 1-based
    row_lo: int
    row_hi: int

    @property
    def name(self) -> str:
        return f"p{self.part}o{self.offset}"


def branch_specs(cfg: MgoConfig, height: int) -> list[BranchSpec]:
    """Level-major, offset-minor. Branch (p, o) spans stripes o .. o + k - p."""
    cfg.validate(height)
    stripe = height // cfg.k
    specs = []
    for part in cfg.levels:
        span = cfg.k - part + 1
        for offset in range(1, part + 1):
            lo = (offset - 1) * stripe
            specs.append(BranchSpec(part, offset, lo, lo + span * stripe))
    return specs


def mgo_partition(f: Tensor, cfg: MgoConfig) -> list[tuple[BranchSpec, Tensor]]:
    return [(b, T.slice_rows(f, b.row_lo, b.row_hi)) for b in branch_specs(cfg, f.shape[-2])]


@dataclass(frozen=True)
class MpfeConfig:
    reduce_channels: int = 128
    feature_dim: int = 512


@dataclass(frozen=True)
class MpfeParams:
    reduce: Conv2dParams
    bn1: BatchNormParams
    fc512: LinearParams
    bn2: BatchNormParams
    classifier: LinearParams


@dataclass(frozen=True)
class BranchOutput:
    f_tri: Tensor  # N×D, before the BN neck
    f_id: Tensor  # N×D, after it
    logits: Tensor  # N×num_ids


def init_heads(mgo: MgoConfig, cfg: MpfeConfig, channels: int, height: int, num_ids: int,
               rng, store: ParamStore) -> None:
    for b in branch_specs(mgo, height):
        name = f"head.{b.name}"
        store.add_conv(rng, f"{name}.reduce", cfg.reduce_channels, 2 * channels, 1)
        store.add_bn(f"{name}.bn1", cfg.reduce_channels)
        store.add_linear(rng, f"{name}.fc", cfg.feature_dim, cfg.reduce_channels)
        store.add_bn(f"{name}.bn2", cfg.feature_dim)
        store.add_linear(rng, f"{name}.classifier", num_ids, cfg.feature_dim, bias=False)


def mpfe_params(scope: Scope, spec: BranchSpec) -> MpfeParams:
    name = f"head.{spec.name}"
    return MpfeParams(scope.conv(f"{name}.reduce"), scope.bn(f"{name}.bn1"),
                      scope.linear(f"{name}.fc"), scope.bn(f"{name}.bn2"),
                      scope.linear(f"{name}.classifier"))


def mpfe_forward(branch: Tensor, p: MpfeParams, train: bool = False,
                 update: bool = True) -> BranchOutput:
    """``N×C×h×W`` stripe union to triplet feature, BN-neck feature and logits."""
    mx, avg = nn.global_pools(branch)
    n, c = mx.shape
    pooled = T.reshape(T.concat([mx, avg], axis=1), (n, 2 * c, 1, 1))
    red = nn.batchnorm(nn.conv2d(pooled, p.reduce), p.bn1, train, update)
    red = T.reshape(T.relu(red), (n, -1))
    f_tri = nn.linear(red, p.fc512)
    f_id = nn.batchnorm(f_tri, p.bn2, train, update)
    return BranchOutput(f_tri, f_id, nn.linear(f_id, p.classifier))


def descriptor_extract(outputs: list[BranchOutput]) -> np.ndarray:
    """Concatenate the L2-normalized ``f_id`` of every branch; zero rows stay zero."""
    parts = []
    for o in outputs:
        v = o.f_id.data if isinstance(o, BranchOutput) else np.asarray(o, dtype=np.float64)
        v = v.reshape(-1, v.shape[-1])
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        parts.append(np.divide(v, norm, out=np.zeros_like(v), where=norm > 0))
    return np.concatenate(parts, axis=1)
