"""Finite-difference oracle suite over every autodiff primitive and three composite graphs."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cell as cellmod
from . import vitdec
from .autodiff import Tensor, grad_check
from .autodiff import functional as F
from .config import SupernetConfig
from .network import HybridSegNet
from .semisup import mean_teacher_losses

TOLERANCE = 1e-4

# A key bias shifts every score of a query row equally, and softmax ignores
# such shifts: its gradient is exactly zero, so a relative error is pure
# round-off. Composite checks leave it out (tests assert the zero directly).
ZERO_GRAD_SUFFIX = ".k.b"
ZERO_GRAD = ("vit.t0.k.b",)


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    eps: float = 1e-5
    samples: int = 32


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _t(rng, *shape, offset=0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def _probe(rng, shape) -> np.ndarray:
    # random projection turns any output into a scalar with dense gradients
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return F.sum(out * Tensor(w))


def _unary(fn, *shape, offset=0.0):
    def build(rng):
        x = _t(rng, *shape, offset=offset)
        w = _probe(rng, fn(x).shape)
        return (lambda: _scalar(fn(x), w)), [x]
    return build


def _binary(fn, sa, sb):
    def build(rng):
        a, b = _t(rng, *sa), _t(rng, *sb)
        w = _probe(rng, fn(a, b).shape)
        return (lambda: _scalar(fn(a, b), w)), [a, b]
    return build


def _away_from_zero(rng, *shape):
    # keeps ReLU/max inputs clear of kinks by more than the probe step
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12) + x, x)
    return Tensor(x, requires_grad=True)


def _relu(rng):
    x = _away_from_zero(rng, 3, 5)
    w = _probe(rng, (3, 5))
    return (lambda: _scalar(F.relu(x), w)), [x]


def _conv(stride=1, dilation=1, padding=1, groups=1, cin=4, cout=6):
    def build(rng):
        x = _t(rng, 2, cin, 7, 7)
        k = _t(rng, cout, cin // groups, 3, 3)
        b = _t(rng, cout)
        out = F.conv2d(x, k, stride, dilation, padding, groups, b)
        w = _probe(rng, out.shape)
        return (lambda: _scalar(F.conv2d(x, k, stride, dilation, padding, groups, b), w)), [x, k, b]
    return build


def _sepconv(rng):
    x, dw, pw = _t(rng, 2, 4, 6, 6), _t(rng, 4, 1, 3, 3), _t(rng, 5, 4, 1, 1)
    w = _probe(rng, (2, 5, 6, 6))
    return (lambda: _scalar(F.depthwise_separable_conv(x, dw, pw, dilation=2), w)), [x, dw, pw]


def _pool(mode):
    def build(rng):
        # distinct, well separated values so the max never switches under the probe
        vals = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01
        x = Tensor(vals.astype(np.float64), requires_grad=True)
        w = _probe(rng, (2, 3, 6, 6))
        return (lambda: _scalar(F.pool2d(x, mode, 3, 1, 1), w)), [x]
    return build


def _concat(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 2, 4)
    w = _probe(rng, (2, 5, 4))
    return (lambda: _scalar(F.concat([a, b], axis=1), w)), [a, b]


def _mix(rng):
    wts = _t(rng, 3)
    xs = [_t(rng, 2, 4) for _ in range(3)]
    w = _probe(rng, (2, 4))
    return (lambda: _scalar(F.mix(F.softmax(wts, axis=0), xs), w)), [wts] + xs


def _layer_norm(rng):
    z, g, b = _t(rng, 3, 5, 8), _t(rng, 8, offset=1.0), _t(rng, 8)
    w = _probe(rng, (3, 5, 8))
    return (lambda: _scalar(F.layer_norm(z, g, b), w)), [z, g, b]


def _linear(rng):
    x, wt, b = _t(rng, 3, 4, 5), _t(rng, 5, 6), _t(rng, 6)
    w = _probe(rng, (3, 4, 6))
    return (lambda: _scalar(F.linear(x, wt, b), w)), [x, wt, b]


def _patch_embed(rng):
    x, k, b, pos = _t(rng, 2, 1, 8, 8), _t(rng, 6, 1, 4, 4), _t(rng, 6), _t(rng, 4, 6)
    w = _probe(rng, (2, 4, 6))
    return (lambda: _scalar(vitdec.tokenize(x, 4, k, b, pos), w)), [x, k, b, pos]


def _cross_entropy(rng):
    logits = _t(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, (2, 3, 3))
    return (lambda: F.cross_entropy(logits, labels)), [logits]


def _mse(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return (lambda: F.mse(a, b)), [a, b]


def primitive_cases() -> list[Case]:
    return [
        Case("add", _binary(F.add, (3, 4), (4,))),
        Case("sub", _binary(F.sub, (3, 1), (3, 4))),
        Case("mul", _binary(F.mul, (2, 3, 4), (3, 1))),
        Case("scale", _unary(lambda x: x * 0.37 - x / 3.0, 3, 4)),
        Case("matmul", _binary(F.matmul, (2, 3, 4), (4, 5))),
        Case("linear", _linear),
        Case("relu", _relu),
        Case("gelu", _unary(F.gelu, 4, 5)),
        Case("sum", _unary(lambda x: F.sum(x) * 1.0, 3, 4)),
        Case("mean", _unary(lambda x: F.mean(x) * 1.0, 3, 4)),
        Case("reshape", _unary(lambda x: F.reshape(x, (4, 3)), 3, 4)),
        Case("transpose", _unary(lambda x: F.transpose(x, (2, 0, 1)), 2, 3, 4)),
        Case("concat", _concat),
        Case("take", _unary(lambda x: F.take(x, [0, 2], axis=1), 2, 4, 3)),
        Case("mix", _mix),
        Case("softmax", _unary(lambda x: F.softmax(x, axis=1), 3, 5)),
        Case("log_softmax", _unary(lambda x: F.log_softmax(x, axis=-1), 3, 5)),
        Case("layer_norm", _layer_norm),
        Case("conv2d", _conv()),
        Case("conv2d_stride2", _conv(stride=2)),
        Case("conv2d_dilated", _conv(dilation=2, padding=2)),
        Case("conv2d_depthwise", _conv(groups=4, cin=4, cout=4)),
        Case("sep_conv", _sepconv),
        Case("max_pool", _pool("max")),
        Case("avg_pool", _pool("avg")),
        Case("upsample", _unary(lambda x: F.upsample(x, 2), 2, 3, 4, 4)),
        Case("downsample", _unary(lambda x: F.downsample(x, 2), 2, 3, 4, 4)),
        Case("patch_embed_pos", _patch_embed),
        Case("cross_entropy", _cross_entropy),
        Case("mse", _mse),
    ]


# -- composite graphs -----------------------------------------------------------------------

def _cell_ce(rng):
    """Two-block cell with partial channels, classified by a 1x1 conv and cross-entropy."""
    blocks, c = 2, 8
    masks = {e: cellmod.PartialMask.random(c, 4, rng) for e in cellmod.edge_list(blocks)}
    weights, params = {}, []
    for e in cellmod.edge_list(blocks):
        weights[e] = {}
        for op in cellmod.OPS:
            shapes = cellmod.op_param_shapes(op, c // 4)
            weights[e][op] = {k: Tensor(0.5 * rng.standard_normal(s), requires_grad=True)
                              for k, s in shapes.items()}
            params += list(weights[e][op].values())
    alpha = Tensor(rng.standard_normal((cellmod.num_edges(blocks), len(cellmod.OPS))), requires_grad=True)
    h1, h2 = _t(rng, 2, c, 6, 6), _t(rng, 2, c, 6, 6)
    head = Tensor(0.3 * rng.standard_normal((3, blocks * c, 1, 1)), requires_grad=True)
    labels = rng.integers(0, 3, (2, 6, 6))

    def f():
        out = cellmod.cell_forward(h1, h2, alpha, masks, weights, blocks)
        return F.cross_entropy(F.conv2d(out, head), labels)
    return f, [alpha, h1, h2, head] + params


def _transformer_mse(rng):
    d = 8
    specs = vitdec.transformer_param_specs(SupernetConfig(
        layers=0, resolutions=(4,), input_size=(8, 8), patch_size=4, embed_dim=d, heads=2,
        depth=1, mlp_ratio=2, filter_multiplier=4, blocks=1))
    params = {k: Tensor(0.3 * rng.standard_normal(s) + (1.0 if k.endswith(".g") else 0.0),
                        requires_grad=True)
              for k, (s, _) in specs.items() if k.startswith("vit.t0")}
    z = _t(rng, 2, 5, d)
    target = Tensor(rng.standard_normal((2, 5, d)))

    def f():
        return F.mse(vitdec.transformer_layer(z, params, "vit.t0", 2), target)
    return f, [z] + [p for k, p in params.items() if k not in ZERO_GRAD]


def _supernet_total(rng):
    cfg = SupernetConfig(layers=2, filter_multiplier=4, blocks=2, resolutions=(4, 8),
                         input_size=(16, 16), patch_size=4, embed_dim=8, heads=2, depth=1,
                         mlp_ratio=2, num_classes=3)
    net = HybridSegNet(cfg)
    student = net.init_params(int(rng.integers(1 << 30)))
    for k, p in student.items():  # move every group off its init so no gradient is trivially zero
        scale = 0.3 if k.startswith("vit.t") else 0.05  # non-uniform attention
        p.assign(p.data + scale * rng.standard_normal(p.shape))
    teacher = {k: Tensor(v.data + 0.01 * rng.standard_normal(v.shape)) for k, v in student.items()}
    x = Tensor(rng.random((3, 1, 16, 16)))
    labels = rng.integers(0, 3, (1, 16, 16))
    with_t = net(teacher, x).data

    def f():
        return mean_teacher_losses(net(student, x), with_t, labels, 1, 2, 0.6).L_total
    return f, [p for k, p in student.items() if not k.endswith(ZERO_GRAD_SUFFIX)]


def composite_cases() -> list[Case]:
    # eps=1e-4 balances truncation against round-off on the O(1) losses
    return [
        Case("cell_B2_cross_entropy", _cell_ce, eps=1e-4),
        Case("transformer_layer_mse", _transformer_mse, eps=1e-4),
        Case("supernet_decoder_total_loss", _supernet_total, eps=1e-4),
    ]


def run_case(case: Case, seed: int = 0) -> CaseResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    f, params = case.build(rng)
    err = grad_check(f, params, eps=case.eps, samples=case.samples, seed=seed)
    return CaseResult(case.name, err, time.perf_counter() - t0)


def run_suite(composites: bool = True, seed: int = 0, report=None) -> list[CaseResult]:
    cases = primitive_cases() + (composite_cases() if composites else [])
    results = []
    for case in cases:
        res = run_case(case, seed)
        results.append(res)
        if report is not None:
            report(res)
    return results
