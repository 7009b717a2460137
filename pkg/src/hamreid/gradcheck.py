"""Central-difference checks for every differentiable primitive and the full model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .attention import CamParams, SamParams, cam_forward, hybrid_attention, sam_forward
from .backbone import FusionConfig, StageMaps
from .model import Model, ModelConfig
from .nn import BatchNormParams, Conv2dParams, LinearParams
from .params import Scope
from .tensor import Tensor, grad_check, grad_check_params, make_rng
from .training import SmoothingConfig, TripletConfig, id_loss, normalize, total_loss, triplet_loss

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-5
# whole-network checks sit downstream of ~1e5 ReLU/max units; a 1e-5 step flips some of them
MODEL_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _away_from_zero(rng, shape, lo=0.1):
    """Random values with |x| >= lo, so ReLU and max kinks stay out of reach."""
    v = rng.uniform(lo, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed, 0x6C)
    w = lambda *s: rng.normal(size=s)  # noqa: E731
    checks = {}
    b = w(4, 2)
    checks["matmul"] = (lambda x: T.sum(T.square(T.matmul(x, b))), w(3, 4))
    shift = w(1, 3, 1, 1)
    checks["add_broadcast"] = (lambda x: T.sum(T.square(x + shift)), w(2, 3, 2, 2))
    checks["mul_broadcast"] = (
        lambda x: T.sum(T.square(x * T.reshape(T.sum(x, (0, 2, 3)), (1, 3, 1, 1)))), w(2, 3, 2, 2))
    checks["exp_log"] = (lambda x: T.sum(T.log(T.exp(x) + 1.0)), w(5))
    checks["sqrt"] = (lambda x: T.sum(T.sqrt(T.square(x) + 0.5)), w(5))
    checks["reciprocal"] = (lambda x: T.sum(T.reciprocal(T.square(x) + 1.0)), w(5))
    checks["sigmoid"] = (lambda x: T.sum(T.square(T.sigmoid(x))), w(6))
    checks["relu"] = (lambda x: T.sum(T.square(T.relu(x))), _away_from_zero(rng, (6,)))
    checks["amax"] = (lambda x: T.sum(T.square(T.amax(x, (1, 2)))), w(3, 4, 5))
    weights = w(2, 6, 2, 2)
    checks["concat_channels"] = (
        lambda x: T.sum(T.square(T.concat_channels([x, T.square(x)])) * weights), w(2, 3, 2, 2))
    checks["slice_rows"] = (lambda x: T.sum(T.square(T.slice_rows(x, 1, 3))), w(2, 5, 3))
    checks["take_rows"] = (lambda x: T.sum(T.square(T.take_rows(x, [0, 2, 2]))), w(3, 4))
    conv = Conv2dParams(Tensor(w(4, 3, 3, 3)), Tensor(w(4)), (2, 1), (1, 1))
    checks["conv2d"] = (lambda x: T.sum(T.square(nn.conv2d(x, conv))), w(2, 3, 5, 4))
    checks["conv2d_weight"] = (lambda k: T.sum(T.square(nn.conv2d(
        Tensor(np.arange(40.0).reshape(1, 2, 5, 4) / 40), Conv2dParams(k, None, (1, 1), (1, 1))))),
        w(3, 2, 3, 3))
    checks["maxpool2d"] = (lambda x: T.sum(T.square(nn.pool2d(x, "max", 2))), w(2, 3, 4, 4))
    checks["avgpool2d"] = (lambda x: T.sum(T.square(nn.pool2d(x, "avg", (2, 2), (1, 1)))),
                           w(2, 3, 4, 4))
    checks["global_pools"] = (lambda x: T.sum(T.square(T.add(*nn.global_pools(x)))), w(2, 3, 3, 3))
    lin = LinearParams(Tensor(w(3, 5)), Tensor(w(3)))
    checks["linear"] = (lambda x: T.sum(T.square(nn.linear(x, lin))), w(4, 5))
    bn = BatchNormParams(Tensor(w(3)), Tensor(w(3)), np.zeros(3), np.ones(3))
    mix = w(6, 3, 2, 2)
    checks["batchnorm_train"] = (lambda x: T.sum(nn.batchnorm(x, bn, True, update=False) * mix),
                                 w(6, 3, 2, 2))
    checks["batchnorm_eval"] = (lambda x: T.sum(T.square(nn.batchnorm(x, bn, False))),
                                w(4, 3, 2, 2))
    labels = np.array([0, 0, 1, 1, 2, 2])
    checks["id_loss"] = (lambda x: id_loss(x, labels, SmoothingConfig(0.1)), w(6, 3))
    checks["triplet_loss"] = (lambda x: triplet_loss(x, labels, TripletConfig(5.0)), w(6, 4))
    sam = SamParams(Conv2dParams(Tensor(0.3 * w(1, 2, 7, 7)), Tensor(w(1)), (1, 1), (3, 3)))
    checks["sam_block"] = (lambda x: T.sum(T.square(sam_forward(x, sam)[0])), w(4, 6, 4))
    cam = CamParams(LinearParams(Tensor(w(2, 8)), Tensor(w(2))),
                    LinearParams(Tensor(w(8, 2)), Tensor(w(8))), 4)
    checks["cam_block"] = (lambda x: T.sum(T.square(cam_forward(x, cam)[0])), w(8, 3, 2))
    return [CheckResult(name, grad_check(fn, x, EPS), PRIMITIVE_TOL)
            for name, (fn, x) in checks.items()]


def mini_model(seed: int = 0, fusion=(1, 2, 3, 4)) -> Model:
    return Model(ModelConfig(fusion=FusionConfig(tuple(fusion)), num_ids=2), seed=seed)


def attention_check(seed: int = 0, per_tensor: int = 4) -> CheckResult:
    """Hybrid attention on mini-config stage maps w.r.t. the attention parameters."""
    model = mini_model(seed)
    rng = make_rng(seed, 0xA7)
    stages = model.forward(rng.normal(size=(2, 3, 48, 32))).stages
    stages = StageMaps(tuple(Tensor(m.data) for m in stages.maps))
    mix = rng.normal(size=(2, model.cfg.fused_channels, 6, 4))
    names = {k: v for k, v in model.params.items() if k.startswith("attn.")}

    def loss(leaves):
        scope = Scope({**{k: Tensor(v) for k, v in model.params.items()}, **leaves},
                      model.store.buffers)
        fused, _ = hybrid_attention(stages, scope, model.cfg.fusion, model.cfg.attention)
        return T.sum(fused * mix)

    errs = grad_check_params(loss, names, MODEL_EPS, per_tensor, rng)
    return CheckResult("hybrid_attention", max(errs.values()), MODEL_TOL)


def model_check(seed: int = 0, per_tensor: int = 2, model: Model | None = None) -> CheckResult:
    """Full 21-branch joint loss on a 2-identity × 2-image train-mode microbatch."""
    model = model or mini_model(seed)
    rng = make_rng(seed, 0xE2E)
    x = normalize(rng.uniform(size=(4, 3) + tuple(model.cfg.backbone.input_hw)))
    labels = np.array([0, 0, 1, 1])

    def loss(leaves):
        res = model.forward(x, Scope(leaves, model.store.buffers), train=True, update=False)
        return total_loss(res.outputs, labels, SmoothingConfig(0.1), TripletConfig(1.0)).total

    errs = grad_check_params(loss, model.params, MODEL_EPS, per_tensor, rng)
    return CheckResult("full_model_loss", max(errs.values()), MODEL_TOL)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + [attention_check(seed), model_check(seed)]
