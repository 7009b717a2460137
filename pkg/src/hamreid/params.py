"""Named parameter storage and the per-forward view that turns it into layer params."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nn import BatchNormParams, Conv2dParams, LinearParams, kaiming_normal, uniform_fan_in
from .tensor import Tape, Tensor


@dataclass
class ParamStore:
    """Trainable ``params`` plus non-trainable ``buffers`` (BN running stats)."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def _put(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = np.ascontiguousarray(value, dtype=np.float64)

    def add_conv(self, rng, name: str, cout: int, cin: int, k: int, bias: bool = False) -> None:
        self._put(f"{name}.w", kaiming_normal(rng, (cout, cin, k, k)))
        if bias:
            self._put(f"{name}.b", np.zeros(cout))

    def add_bn(self, name: str, c: int) -> None:
        self._put(f"{name}.gamma", np.ones(c))
        self._put(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c)
        self.buffers[f"{name}.running_var"] = np.ones(c)

    def add_linear(self, rng, name: str, out: int, inp: int, bias: bool = True) -> None:
        self._put(f"{name}.w", uniform_fan_in(rng, (out, inp)))
        if bias:
            bound = 1.0 / np.sqrt(inp)
            self._put(f"{name}.b", rng.uniform(-bound, bound, size=out))

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})


class Scope:
    """Read-side view: resolves names to tensors (traced or constant)."""

    def __init__(self, values: Mapping[str, Tensor], buffers: dict[str, np.ndarray]):
        self.values = values
        self.buffers = buffers

    @classmethod
    def of(cls, store: ParamStore, tape: Tape | None = None) -> "Scope":
        if tape is None:
            values = {k: Tensor(v) for k, v in store.params.items()}
        else:
            values = {k: tape.watch(v, k) for k, v in store.params.items()}
        return cls(values, store.buffers)

    def __getitem__(self, name: str) -> Tensor:
        return self.values[name]

    def conv(self, name: str, stride=1, padding=0) -> Conv2dParams:
        s = stride if isinstance(stride, tuple) else (stride, stride)
        p = padding if isinstance(padding, tuple) else (padding, padding)
        return Conv2dParams(self.values[f"{name}.w"], self.values.get(f"{name}.b"), s, p)

    def bn(self, name: str) -> BatchNormParams:
        return BatchNormParams(self.values[f"{name}.gamma"], self.values[f"{name}.beta"],
                               self.buffers[f"{name}.running_mean"],
                               self.buffers[f"{name}.running_var"])

    def linear(self, name: str) -> LinearParams:
        return LinearParams(self.values[f"{name}.w"], self.values.get(f"{name}.b"))
