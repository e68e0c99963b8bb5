"""Named gradient-check cases covering every layer, block and loss.

Each case builds a small float64 problem and runs :func:`gradcheck` over the
inputs and the parameters involved. Cases look their ops up through the
module objects at call time, so a patched op is picked up by the suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .attention import EPSA, EpsaSpec, SaSpec, SpatialAttention
from .gradcheck import GradcheckReport, gradcheck
from .models import MAE, Backbone, BackboneConfig, MaeConfig
from .schema import AttributeSchema

PROBES = 24  # finite-difference probes per input tensor
# the MAE has dozens of small parameter tensors, each costing a full forward per probe
PROBE_OVERRIDES = {"mae": 6}


@dataclass
class CaseResult:
    name: str
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _leaf(rng, *shape, scale=1.0) -> T.Tensor:
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _module_problem(module: nn.Module, x: T.Tensor, train: bool = True):
    module.to(np.float64)
    module.train(train)
    params = module.parameters()
    for p in params:
        p.requires_grad = True
    return (lambda xx, *ps: module(xx)), [x, *params]


def _conv(rng):
    spec = nn.ConvSpec(4, 6, 3, 2, 1, groups=2)
    x, w, b = _leaf(rng, 2, 4, 7, 7), _leaf(rng, *spec.weight_shape, scale=0.3), _leaf(rng, 6)
    return (lambda x, w, b: nn.conv2d(x, w, b, spec)), [x, w, b]


def _linear(rng):
    return (lambda x, w, b: nn.linear(x, w, b)), [_leaf(rng, 3, 5), _leaf(rng, 5, 4), _leaf(rng, 4)]


def _batchnorm_train(rng):
    rm, rv = np.zeros(3), np.ones(3)
    return ((lambda x, g, b: nn.batchnorm2d(x, g, b, rm, rv, training=True)),
            [_leaf(rng, 4, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)])


def _batchnorm_eval(rng):
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return ((lambda x, g, b: nn.batchnorm2d(x, g, b, rm, rv, training=False)),
            [_leaf(rng, 2, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)])


def _pools(rng):
    def f(x):
        return T.concat([T.reshape(nn.max_pool2d(x, 2, 2), (2, -1)),
                         T.reshape(nn.avg_pool2d(x, 2, 2), (2, -1)),
                         nn.global_avg_pool(x)], axis=1)
    return f, [_leaf(rng, 2, 3, 6, 6)]


def _elementwise(rng):
    def f(x):
        return T.softmax(T.sigmoid(x) * T.relu(x) + T.exp(x * 0.3) - T.log(T.sigmoid(x)), axis=1)
    return f, [_leaf(rng, 3, 5)]


def _epsa(rng):
    block = EPSA(EpsaSpec(8, kernels=(3, 5), groups=(1, 2), reduction=2), rng)
    return _module_problem(block, _leaf(rng, 2, 8, 5, 5))


def _sa(rng):
    return _module_problem(SpatialAttention(SaSpec(7), rng), _leaf(rng, 2, 4, 6, 6))


def _mae(rng):
    schema = AttributeSchema.default()
    mae = MAE(MaeConfig(), schema, rng).to(np.float64).train()
    probs = [T.Tensor(T.softmax(T.Tensor(rng.standard_normal((3, p))), axis=1).data,
                      requires_grad=True) for p in schema.sizes]
    params = mae.parameters()
    for p in params:
        p.requires_grad = True
    a = len(probs)
    return (lambda *ts: mae(list(ts[:a]))), [*probs, *params]


def _backbone(epsa: bool, sa: bool):
    def build(rng):
        cfg = BackboneConfig(widths=(4, 8), blocks=(1, 1), input_size=12, d_sem=6, epsa=epsa, sa=sa,
                             stem_width=4, stem_pool=False, epsa_kernels=(3, 5), epsa_groups=(1, 2),
                             expansion=2)
        return _module_problem(Backbone(cfg, rng), _leaf(rng, 2, 3, 12, 12))
    return build


def _deep_supervision_loss(rng):
    from .training import LabelBatch, LossWeights, deep_supervision_loss

    schema = AttributeSchema.default()
    labels = LabelBatch.from_indices([[int(rng.integers(p)) for p in schema.sizes] for _ in range(2)],
                                     [0, 3], schema, 5)
    a = len(schema)

    def f(*zs):
        probs = [T.softmax(z, axis=1) for z in zs]
        return deep_supervision_loss((probs[:a], probs[a]), labels, LossWeights())
    return f, [_leaf(rng, 2, p) for p in schema.sizes] + [_leaf(rng, 2, 5)]


def _cross_entropy(rng):
    from .training import cross_entropy

    onehot = np.eye(5)[[1, 4, 0]]
    return (lambda z: cross_entropy(T.softmax(z, axis=1), onehot)), [_leaf(rng, 3, 5)]


CASES: dict = {
    "conv2d": _conv,
    "linear": _linear,
    "batchnorm2d-train": _batchnorm_train,
    "batchnorm2d-eval": _batchnorm_eval,
    "pooling": _pools,
    "elementwise": _elementwise,
    "epsa": _epsa,
    "spatial-attention": _sa,
    "mae": _mae,
    "backbone-plain": _backbone(False, False),
    "backbone-epsa": _backbone(True, False),
    "backbone-sa": _backbone(False, True),
    "backbone-epsa-sa": _backbone(True, True),
    "deep-supervision-loss": _deep_supervision_loss,
    "cross-entropy": _cross_entropy,
}


def run_case(name: str, eps: float = 1e-4, tol: float = 1e-4, seed: int = 0,
             probes: int | None = None) -> CaseResult:
    build: Callable = CASES[name]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    f, inputs = build(rng)
    if probes is None:
        probes = PROBE_OVERRIDES.get(name, PROBES)
    report = gradcheck(f, inputs, eps=eps, tol=tol, max_elements=probes, seed=seed)
    return CaseResult(name, report, time.perf_counter() - start)


def run_suite(eps: float = 1e-4, tol: float = 1e-4, seed: int = 0, names=None) -> list:
    return [run_case(n, eps, tol, seed) for n in (names or CASES)]
