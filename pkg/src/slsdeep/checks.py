"""Finite-difference gradient suites for every operator, the losses and the network.

Each case projects the operator output onto a fixed random tensor so the
checked function is scalar. Everything runs in float64 on shapes no larger
than (2, 4, 8, 8), apart from the end-to-end network case, which runs in
extended precision (``np.longdouble``).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import loss as loss_mod
from . import ops
from .gradcheck import grad_check
from .network import build, desk_config
from .tensor import Tensor

REL_TOL = 1e-3
NETWORK_STEP = 1e-8


def _t(arr, name):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


def _projected(fn: Callable[..., Tensor], shape_probe: Callable[..., Tensor], rng, *inputs):
    out_shape = shape_probe(*inputs).shape
    r = rng.standard_normal(out_shape)
    return lambda *xs: ops.sum(ops.mul(fn(*xs), r))


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * (margin + rng.random(shape))


def _distinct(rng, shape):
    # Values on a 0.01 grid, all distinct: no ties within the FD step.
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.01 - n * 0.005).astype(np.float64)


def case_conv2d(rng):
    cases = []
    for stride, pad, dil, bias in [(1, 1, 1, True), (2, 1, 1, True), (1, 2, 2, False), (2, 0, 1, True)]:
        x = _t(rng.standard_normal((2, 3, 8, 8)), "x")
        w = _t(rng.standard_normal((4, 3, 3, 3)) * 0.3, "w")
        ins = [x, w]
        if bias:
            ins.append(_t(rng.standard_normal(4), "b"))

        def op(x, w, b=None, s=stride, p=pad, d=dil):
            return ops.conv2d(x, w, b, stride=s, padding=p, dilation=d)

        f = _projected(op, op, rng, *ins)
        cases.append((f"conv2d[s={stride},p={pad},d={dil},bias={bias}]", grad_check(f, ins, REL_TOL)))
    return cases


def case_maxpool2d(rng):
    x = _t(_distinct(rng, (2, 4, 8, 8)), "x")
    op = lambda x: ops.maxpool2d(x, 3, 2, 1)  # noqa: E731
    return [("maxpool2d", grad_check(_projected(op, op, rng, x), [x], REL_TOL))]


def case_bilinear_upsample(rng):
    out = []
    for factor in (2, 3):
        x = _t(rng.standard_normal((2, 4, 4, 4)), "x")
        op = lambda x, k=factor: ops.bilinear_upsample(x, k)  # noqa: E731
        out.append((f"bilinear_upsample[x{factor}]", grad_check(_projected(op, op, rng, x), [x], REL_TOL)))
    x = _t(rng.standard_normal((2, 4, 3, 3)), "x")
    op = lambda x: ops.bilinear_resize(x, (8, 8))  # noqa: E731
    out.append(("bilinear_resize[3->8]", grad_check(_projected(op, op, rng, x), [x], REL_TOL)))
    return out


def case_adaptive_avg_pool2d(rng):
    out = []
    for size in (1, 3, 6):
        x = _t(rng.standard_normal((2, 4, 8, 8)), "x")
        op = lambda x, s=size: ops.adaptive_avg_pool2d(x, s)  # noqa: E731
        out.append((f"adaptive_avg_pool2d[{size}]", grad_check(_projected(op, op, rng, x), [x], REL_TOL)))
    return out


def case_batchnorm2d(rng):
    out = []
    for training in (True, False):
        x = _t(rng.standard_normal((2, 4, 8, 8)) * 2 + 1, "x")
        gamma = _t(1 + 0.5 * rng.standard_normal(4), "gamma")
        beta = _t(rng.standard_normal(4), "beta")
        state = ops.BatchNormState(rng.standard_normal(4), 0.5 + rng.random(4))

        def op(x, g, b, tr=training, st=state):
            return ops.batchnorm2d(x, g, b, st, tr, update_running=False)

        mode = "train" if training else "eval"
        out.append((f"batchnorm2d[{mode}]", grad_check(_projected(op, op, rng, x, gamma, beta), [x, gamma, beta], REL_TOL)))
    return out


def case_relu(rng):
    x = _t(_away_from_zero(rng, (2, 4, 8, 8)), "x")
    return [("relu", grad_check(_projected(ops.relu, ops.relu, rng, x), [x], REL_TOL))]


def case_dropout(rng):
    x = _t(rng.standard_normal((2, 4, 8, 8)), "x")
    op = lambda x: ops.dropout(x, 0.5, True, seed=7, layer_id=1, step=3)  # noqa: E731
    return [("dropout[train]", grad_check(_projected(op, op, rng, x), [x], REL_TOL))]


def case_concat_channels(rng):
    a = _t(rng.standard_normal((2, 1, 8, 8)), "a")
    b = _t(rng.standard_normal((2, 3, 8, 8)), "b")
    op = lambda a, b: ops.concat_channels([a, b])  # noqa: E731
    return [("concat_channels", grad_check(_projected(op, op, rng, a, b), [a, b], REL_TOL))]


def case_slice_channels(rng):
    x = _t(rng.standard_normal((2, 4, 8, 8)), "x")
    op = lambda x: ops.slice_channels(x, 1, 3)  # noqa: E731
    return [("slice_channels", grad_check(_projected(op, op, rng, x), [x], REL_TOL))]


def case_softmax_channels(rng):
    x = _t(rng.standard_normal((2, 4, 8, 8)), "x")
    return [("softmax_channels", grad_check(_projected(ops.softmax_channels, ops.softmax_channels, rng, x), [x], REL_TOL))]


def case_elementwise(rng):
    a = _t(rng.standard_normal((2, 4, 8, 8)), "a")
    b = _t(rng.standard_normal((2, 4, 8, 8)), "b")
    pos = _t(0.5 + rng.random((2, 4, 8, 8)), "pos")
    out = []
    for name, op, ins in [
        ("add", ops.add, [a, b]),
        ("sub", ops.sub, [a, b]),
        ("mul", ops.mul, [a, b]),
        ("sqrt", ops.sqrt, [pos]),
        ("log", ops.log, [pos]),
        ("forward_diff_x", ops.forward_diff_x, [a]),
        ("forward_diff_y", ops.forward_diff_y, [a]),
    ]:
        out.append((name, grad_check(_projected(op, op, rng, *ins), ins, REL_TOL)))
    out.append(("mean", grad_check(lambda x: ops.mean(ops.mul(x, x)), [a], REL_TOL)))
    return out


def _probs(rng, shape):
    # Foreground probabilities kept away from the clamp boundaries.
    return 0.05 + 0.9 * rng.random(shape)


def _labels(rng, shape):
    return (rng.random(shape) < 0.4).astype(np.float64)


def case_nll_loss(rng):
    p = _t(_probs(rng, (2, 1, 8, 8)), "p")
    v = _labels(rng, (2, 1, 8, 8))
    return [("nll_loss", grad_check(lambda p: loss_mod.nll_loss(p, v), [p], REL_TOL))]


def case_epe_loss(rng):
    u = _t(_probs(rng, (2, 1, 8, 8)), "u")
    v = _labels(rng, (2, 1, 8, 8))
    return [("epe_loss", grad_check(lambda u: loss_mod.epe_loss(u, v), [u], REL_TOL))]


def case_total_loss(rng):
    logits = rng.standard_normal((2, 2, 8, 8))
    e = np.exp(logits)
    pred = _t(e / e.sum(axis=1, keepdims=True), "prediction")
    v = _labels(rng, (2, 1, 8, 8))
    cfg = loss_mod.LossConfig()
    return [("total_loss", grad_check(lambda p: loss_mod.total_loss(p, v, cfg).total, [pred], REL_TOL))]


def case_network(rng, checks_per_tensor: int = 2, input_checks: int = 24):
    """End-to-end check of the 1/16-width network (train mode, N=2, 96x96).

    Early-layer parameters move ~1e5 ReLU/max-pool switch points at once, so
    kinks sit ~1e-7 apart and the step must be smaller still. At that step
    float64 cancellation noise (~eps * |f| / h) reaches 1e-5, so the whole
    case runs in extended precision instead.
    """
    model = build(desk_config(), init_seed=int(rng.integers(1 << 31)), dtype=np.longdouble, dropout_seed=3)
    x = Tensor(rng.random((2, 3, 96, 96)).astype(np.longdouble), requires_grad=True, name="input")
    r = rng.standard_normal((2, 2, 96, 96))

    def f(x, *params):
        return ops.sum(ops.mul(model.forward(x, training=True, step=0, update_running=False), r))

    params = list(model.params.values())
    merged = grad_check(f, [x] + params, REL_TOL, max_checks=checks_per_tensor, seed=2,
                        names=["input"] + [p.name for p in params], step_scale=NETWORK_STEP)
    merged.inputs[0] = grad_check(f, [x], REL_TOL, max_checks=input_checks, seed=1,
                                  step_scale=NETWORK_STEP).inputs[0]
    return [("network[ws=1/16]", merged)]


OP_SUITES = {
    "conv2d": case_conv2d,
    "maxpool2d": case_maxpool2d,
    "bilinear_upsample": case_bilinear_upsample,
    "adaptive_avg_pool2d": case_adaptive_avg_pool2d,
    "batchnorm2d": case_batchnorm2d,
    "relu": case_relu,
    "dropout": case_dropout,
    "concat_channels": case_concat_channels,
    "slice_channels": case_slice_channels,
    "softmax_channels": case_softmax_channels,
    "elementwise": case_elementwise,
    "nll_loss": case_nll_loss,
    "epe_loss": case_epe_loss,
    "total_loss": case_total_loss,
}
SCOPES = tuple(OP_SUITES) + ("network", "ops", "all")


def run_scope(scope: str, seed: int = 0) -> list:
    """Run the named suite and return ``[(case name, GradCheckReport), ...]``."""
    if scope not in SCOPES:
        raise KeyError(scope)
    rng = np.random.default_rng(seed)
    if scope == "network":
        return case_network(rng)
    names = list(OP_SUITES) if scope in ("ops", "all") else [scope]
    results = []
    for name in names:
        results.extend(OP_SUITES[name](rng))
    if scope == "all":
        results.extend(case_network(rng))
    return results
