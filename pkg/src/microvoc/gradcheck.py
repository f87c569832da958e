"""Finite-difference verification of every analytic gradient.

Each check builds a scalar probe loss L from a layer's output (the sum
of output * R for a fixed random R, or the cross-entropy loss itself),
computes the analytic gradient through the backward pass, and compares
it elementwise against central differences (f(x+eps) - f(x-eps)) / 2eps
in double precision.

Relative error is |a - b| / max(1e-8, |a| + |b|), and a check passes
when its maximum over all components is below the threshold.
"""

from __future__ import annotations

import numpy as np

from . import archdsl, trainer
from .layers import (
    ConvConfig,
    DropoutConfig,
    LrnConfig,
    Mode,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    fc_backward,
    fc_forward,
    lrn_backward,
    lrn_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .tensor import Tensor4

EPS = 1e-5
THRESHOLD = 1e-4

LAYER_KINDS = ("conv", "relu", "maxpool", "lrn", "dropout", "fc", "softmax", "network")


def numerical_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float((np.abs(a - b) / denom).max())


def _probe(rng: np.random.Generator, dims) -> np.ndarray:
    return rng.standard_normal(dims)


def check_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    # shape-preserving and strided geometries
    cases = [
        ((2, 3, 5, 5), ConvConfig(4, (3, 3), 1, 1)),
        ((2, 2, 6, 6), ConvConfig(3, (2, 2), 2, 0)),
    ]
    for x_dims, cfg in cases:
        x = Tensor4(rng.standard_normal(x_dims))
        w = Tensor4(rng.standard_normal((cfg.filters, x_dims[1], *cfg.kernel)))
        b = Tensor4(rng.standard_normal((1, cfg.filters, 1, 1)))
        out, cache = conv2d_forward(x, w, b, cfg)
        r = _probe(rng, out.dims)

        def loss() -> float:
            o, _ = conv2d_forward(x, w, b, cfg)
            return float((o.data * r).sum())

        gx, gw, gb = conv2d_backward(cache, Tensor4(r))
        for got, arr in ((gx, x), (gw, w), (gb, b)):
            worst = max(worst, max_rel_error(got.data, numerical_grad(loss, arr.data)))
    return worst


def check_relu(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x_data = rng.standard_normal((2, 3, 5, 5))
    # keep every element away from the kink at 0
    x_data += np.sign(x_data) * 0.1
    x = Tensor4(x_data)
    out, cache = relu_forward(x)
    r = _probe(rng, out.dims)

    def loss() -> float:
        o, _ = relu_forward(x)
        return float((o.data * r).sum())

    gx = relu_backward(cache, Tensor4(r))
    return max_rel_error(gx.data, numerical_grad(loss, x.data))


def check_maxpool(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    # non-overlapping and overlapping window geometries
    for dims, k, s in (((2, 3, 6, 6), 2, 2), ((2, 2, 7, 7), 3, 2)):
        # distinct values with gaps far above eps, so no argmax flips
        vals = rng.permutation(np.prod(dims)).astype(np.float64) * 0.01
        x = Tensor4(vals.reshape(dims))
        out, cache = maxpool_forward(x, k, s)
        r = _probe(rng, out.dims)

        def loss() -> float:
            o, _ = maxpool_forward(x, k, s)
            return float((o.data * r).sum())

        gx = maxpool_backward(cache, Tensor4(r))
        worst = max(worst, max_rel_error(gx.data, numerical_grad(loss, x.data)))
    return worst


def check_lrn(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cfg = LrnConfig(k=2.0, n=5, alpha=0.05, beta=0.75)
    x = Tensor4(rng.standard_normal((2, 6, 4, 4)))
    out, cache = lrn_forward(x, cfg)
    r = _probe(rng, out.dims)

    def loss() -> float:
        o, _ = lrn_forward(x, cfg)
        return float((o.data * r).sum())

    gx = lrn_backward(cache, Tensor4(r))
    return max_rel_error(gx.data, numerical_grad(loss, x.data))


def check_dropout(seed: int = 0) -> float:
    """Backward against a fixed mask: the differentiable map is x * mask."""
    rng = np.random.default_rng(seed)
    x = Tensor4(rng.standard_normal((2, 3, 5, 5)))
    mask = rng.random(x.dims) >= DropoutConfig(0.5).p
    r = _probe(rng, x.dims)

    def loss() -> float:
        return float((x.data * mask * r).sum())

    gx = dropout_backward(mask, Tensor4(r))
    return max_rel_error(gx.data, numerical_grad(loss, x.data))


def check_fc(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor4(rng.standard_normal((2, 3, 4, 4)))
    w = Tensor4(rng.standard_normal((5, 48, 1, 1)))
    b = Tensor4(rng.standard_normal((1, 5, 1, 1)))
    out, cache = fc_forward(x, w, b)
    r = _probe(rng, out.dims)

    def loss() -> float:
        o, _ = fc_forward(x, w, b)
        return float((o.data * r).sum())

    gx, gw, gb = fc_backward(cache, Tensor4(r))
    worst = 0.0
    for got, arr in ((gx, x), (gw, w), (gb, b)):
        worst = max(worst, max_rel_error(got.data, numerical_grad(loss, arr.data)))
    return worst


def check_softmax(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    logits = Tensor4(rng.standard_normal((4, 7, 1, 1)))
    labels = rng.integers(0, 7, size=4)

    def loss() -> float:
        l, _, _ = softmax_cross_entropy(logits, labels)
        return l

    _, _, grad = softmax_cross_entropy(logits, labels)
    return max_rel_error(grad.data, numerical_grad(loss, logits.data))


TINY_ARCH = "IMG-(Conv2-ReLU-MaxPool)-(FC4-ReLU-FC3)-Softmax"


def check_network(seed: int = 0) -> float:
    """Whole-network check over a small conv/pool/fc stack on 8x8 input:
    every parameter gradient plus the input gradient against central
    differences of the cross-entropy loss."""
    rng = np.random.default_rng(seed)
    net = trainer.build(archdsl.parse(TINY_ARCH, (3, 8, 8)), seed=seed)
    x = Tensor4(rng.standard_normal((2, 3, 8, 8)))
    labels = rng.integers(0, 3, size=2)

    def loss() -> float:
        logits = net.forward(x, Mode.TEST)
        l, _, _ = softmax_cross_entropy(logits, labels)
        return l

    logits = net.forward(x, Mode.TRAIN)
    _, _, grad_logits = softmax_cross_entropy(logits, labels)
    grads = net.backward(grad_logits)

    worst = 0.0
    for key, p in net.param_dict().items():
        worst = max(worst, max_rel_error(grads[key].data, numerical_grad(loss, p.data)))
    worst = max(worst, max_rel_error(net._grad_input.data, numerical_grad(loss, x.data)))
    return worst


_CHECKS = {
    "conv": check_conv,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "lrn": check_lrn,
    "dropout": check_dropout,
    "fc": check_fc,
    "softmax": check_softmax,
    "network": check_network,
}


def run_checks(only: str | None = None, seed: int = 0) -> dict[str, float]:
    """Run one or all finite-difference suites; returns kind -> max
    relative error."""
    if only is not None:
        if only not in _CHECKS:
            raise ValueError(f"unknown check {only!r}; expected one of {LAYER_KINDS}")
        return {only: _CHECKS[only](seed)}
    return {kind: fn(seed) for kind, fn in _CHECKS.items()}
