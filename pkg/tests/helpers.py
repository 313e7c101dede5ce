"""Random instance builders shared by the unit and acceptance suites."""

import numpy as np

from secpnet import tensor as T
from secpnet.blocks import SECFuse
from secpnet.networks import NetworkConfig, VariantId, build_variant
from secpnet.tensor import Parameter, Tensor


def param(rng, shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, dtype=np.float64)


def weighted_sum(out, rng):
    """Scalar probe ``sum(out * R)`` so every output element matters."""
    r = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return T.tensor_sum(T.mul(out, r))


def _shape(rng, lo=1, hi=4, even=False):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(lo, hi + 1))
    if even:
        h, w = (2 * int(rng.integers(1, 5)) for _ in range(2))
    else:
        h, w = (int(rng.integers(2, 10)) for _ in range(2))
    return n, c, h, w


def op_instance(name: str, seed: int):
    """(fn, params) for one random instance of op ``name``; inputs stay
    within 2x4x9x9."""
    rng = np.random.default_rng(seed)
    if name == "conv2d":
        n, c, h, w = _shape(rng)
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = max(h, k), max(w, k)
        stride = 2 if (h + 2 * pad - k) % 2 == 0 and (w + 2 * pad - k) % 2 == 0 and rng.random() < 0.3 else 1
        x, wt = param(rng, (n, c, h, w)), param(rng, (int(rng.integers(1, 4)), c, k, k))
        b = param(rng, (wt.shape[0],))
        return lambda: weighted_sum(T.conv2d(x, wt, b, stride, pad), np.random.default_rng(seed)), [x, wt, b]
    if name == "max_pool2x2":
        x = param(rng, _shape(rng, even=True))
        return lambda: weighted_sum(T.max_pool2x2(x), np.random.default_rng(seed)), [x]
    if name == "upsample_bilinear2x":
        x = param(rng, _shape(rng))
        return lambda: weighted_sum(T.upsample_bilinear2x(x), np.random.default_rng(seed)), [x]
    if name == "relu":
        x = param(rng, _shape(rng))
        return lambda: weighted_sum(T.relu(x), np.random.default_rng(seed)), [x]
    if name == "sigmoid":
        x = param(rng, _shape(rng), 2.0)
        return lambda: weighted_sum(T.sigmoid(x), np.random.default_rng(seed)), [x]
    if name == "global_avg_pool":
        x = param(rng, _shape(rng))
        return lambda: weighted_sum(T.global_avg_pool(x), np.random.default_rng(seed)), [x]
    if name == "linear":
        n, f, g = (int(v) for v in rng.integers(1, 6, size=3))
        x, wt, b = param(rng, (n, f)), param(rng, (g, f)), param(rng, (g,))
        return lambda: weighted_sum(T.linear(x, wt, b), np.random.default_rng(seed)), [x, wt, b]
    if name == "concat_channels":
        n, c, h, w = _shape(rng)
        a, b = param(rng, (n, c, h, w)), param(rng, (n, int(rng.integers(1, 4)), h, w))
        return lambda: weighted_sum(T.concat_channels(a, b), np.random.default_rng(seed)), [a, b]
    if name == "channel_scale":
        n, c, h, w = _shape(rng)
        x, s = param(rng, (n, c, h, w)), param(rng, (n, c))
        return lambda: weighted_sum(T.channel_scale(x, s), np.random.default_rng(seed)), [x, s]
    if name == "softmax_channels":
        x = param(rng, _shape(rng, lo=2))
        return lambda: weighted_sum(T.softmax_channels(x), np.random.default_rng(seed)), [x]
    if name == "softmax_cross_entropy":
        n, k, h, w = _shape(rng, lo=2)
        x = param(rng, (n, k, h, w))
        target = rng.integers(0, k, size=(n, h, w))
        return lambda: T.softmax_cross_entropy(x, target), [x]
    raise KeyError(name)


OPS = (
    "conv2d",
    "max_pool2x2",
    "upsample_bilinear2x",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "linear",
    "concat_channels",
    "channel_scale",
    "softmax_channels",
    "softmax_cross_entropy",
)


def randomize_biases(module, rng, scale=0.1):
    # zero-initialised biases put many relus exactly on their kink
    for p in module.parameters():
        if p.ndim == 1:
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)


def variant_instance(variant: VariantId, seed: int, batch: int = 1):
    """Desk-scale end-to-end loss: 8x8 input, base_width 4, depth 2."""
    rng = np.random.default_rng(seed)
    net = build_variant(variant, NetworkConfig(1, 14, 4, 2, 16), seed=seed)
    randomize_biases(net, rng)
    x = Tensor(rng.random((batch, 1, 8, 8)), dtype=np.float64)
    target = rng.integers(0, 14, size=(batch, 8, 8))
    return lambda: T.softmax_cross_entropy(net.forward(x).final, target), net.parameters()


def sec_instance(seed: int):
    rng = np.random.default_rng(seed)
    c1, c2 = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    sec = SECFuse(c1, c2, 1, rng)
    randomize_biases(sec, rng)
    l1, l2 = param(rng, (1, c1, 4, 4)), param(rng, (1, c2, 2, 2))
    return lambda: weighted_sum(sec(l1, l2), np.random.default_rng(seed)), [l1, l2, *sec.parameters()]
