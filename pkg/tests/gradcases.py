"""Random gradient-check cases for every differentiable op.

Each case maps a seeded generator to ``(build, arrays)``; shapes never exceed
(2, 4, 6, 6).
"""

import numpy as np

from attresdunet import ops
from attresdunet.objective import dice_loss

from oracles import away_from_zero, distinct_values

N_SEEDS = 20


def _shape(rng, min_hw=2):
    return (
        int(rng.integers(1, 3)),
        int(rng.integers(1, 5)),
        int(rng.integers(min_hw, 7)),
        int(rng.integers(min_hw, 7)),
    )


def _normal(rng, shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def conv_case(rng):
    n, c, h, w = _shape(rng)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    # keep at least one output pixel
    while (min(h, w) + 2 * padding - dilation * (k - 1) - 1) < 0:
        padding += 1
    o = int(rng.integers(1, 5))
    arrays = [_normal(rng, (n, c, h, w)), _normal(rng, (o, c, k, k), 0.5), _normal(rng, (o,))]

    def build(t):
        return ops.conv2d(t[0], t[1], t[2], stride=stride, padding=padding, dilation=dilation)

    return build, arrays


def conv_nobias_case(rng):
    n, c, h, w = _shape(rng)
    arrays = [_normal(rng, (n, c, h, w)), _normal(rng, (3, c, 1, 1))]
    return (lambda t: ops.conv2d(t[0], t[1])), arrays


def maxpool_case(rng):
    shape = _shape(rng)
    return (lambda t: ops.maxpool2d(t[0])), [distinct_values(rng, shape)]


def upsample_case(rng):
    return (lambda t: ops.upsample_bilinear2x(t[0])), [_normal(rng, _shape(rng, 1))]


def broadcast_case(rng):
    n, c, h, w = _shape(rng)
    return (lambda t: ops.broadcast_spatial(t[0], h, w)), [_normal(rng, (n, c, 1, 1))]


def gap_case(rng):
    return (lambda t: ops.global_avg_pool(t[0])), [_normal(rng, _shape(rng, 1))]


def batchnorm_train_case(rng):
    n, c, h, w = _shape(rng)
    arrays = [_normal(rng, (n, c, h, w)), rng.uniform(0.5, 1.5, c).astype(np.float32), _normal(rng, (c,))]

    def build(t):
        return ops.batchnorm2d(t[0], t[1], t[2], ops.RunningStats.initial(c), training=True)

    return build, arrays


def batchnorm_eval_case(rng):
    n, c, h, w = _shape(rng)
    stats = ops.RunningStats(_normal(rng, (c,)), rng.uniform(0.5, 2.0, c).astype(np.float32))
    arrays = [_normal(rng, (n, c, h, w)), rng.uniform(0.5, 1.5, c).astype(np.float32), _normal(rng, (c,))]
    return (lambda t: ops.batchnorm2d(t[0], t[1], t[2], stats, training=False)), arrays


def relu_case(rng):
    return (lambda t: ops.relu(t[0])), [away_from_zero(_normal(rng, _shape(rng, 1)))]


def sigmoid_case(rng):
    return (lambda t: ops.sigmoid(t[0])), [_normal(rng, _shape(rng, 1), 2.0)]


def _binary_case(op, kind):
    def case(rng):
        n, c, h, w = _shape(rng, 1)
        other = {"same": (n, c, h, w), "spatial": (n, 1, h, w), "channel": (n, c, 1, 1)}[kind]
        return (lambda t: op(t[0], t[1])), [_normal(rng, (n, c, h, w)), _normal(rng, other)]

    return case


def scale_case(rng):
    factor = float(rng.uniform(-2, 2))
    return (lambda t: ops.scale(t[0], factor)), [_normal(rng, _shape(rng, 1))]


def concat_case(rng):
    n, _, h, w = _shape(rng, 1)
    arrays = [_normal(rng, (n, int(rng.integers(1, 3)), h, w)) for _ in range(3)]
    return (lambda t: ops.concat_channels(*t)), arrays


def slice_case(rng):
    n, c, h, w = _shape(rng, 1)
    c = max(c, 2)
    start = int(rng.integers(0, c - 1))
    stop = int(rng.integers(start + 1, c + 1))
    return (lambda t: ops.slice_channels(t[0], start, stop)), [_normal(rng, (n, c, h, w))]


def sum_case(rng):
    return (lambda t: ops.sum_all(t[0])), [_normal(rng, _shape(rng, 1))]


def dice_case(rng):
    n, _, h, w = _shape(rng)
    pred = rng.uniform(0.05, 0.95, (n, 1, h, w)).astype(np.float32)
    target = (rng.random((n, 1, h, w)) < 0.4).astype(np.float32)
    return (lambda t: dice_loss(t[0], target)), [pred]


CASES = {
    "conv2d": conv_case,
    "conv2d_1x1_nobias": conv_nobias_case,
    "maxpool2d": maxpool_case,
    "upsample_bilinear2x": upsample_case,
    "broadcast_spatial": broadcast_case,
    "global_avg_pool": gap_case,
    "batchnorm2d_train": batchnorm_train_case,
    "batchnorm2d_eval": batchnorm_eval_case,
    "relu": relu_case,
    "sigmoid": sigmoid_case,
    "add": _binary_case(ops.add, "same"),
    "add_spatial_broadcast": _binary_case(ops.add, "spatial"),
    "add_channel_broadcast": _binary_case(ops.add, "channel"),
    "mul": _binary_case(ops.mul, "same"),
    "mul_spatial_broadcast": _binary_case(ops.mul, "spatial"),
    "mul_channel_broadcast": _binary_case(ops.mul, "channel"),
    "scale": scale_case,
    "concat_channels": concat_case,
    "slice_channels": slice_case,
    "sum_all": sum_case,
    "dice_loss": dice_case,
}


def case_for(name, seed):
    return CASES[name](np.random.default_rng([seed, len(name)]))
