"""Brute-force reference implementations and finite-difference helpers.

Everything here is deliberately written as plain loops in float64 so it shares
no code path with the vectorized kernels under test.
"""

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy = y * stride - padding + i * dilation
                                ix = xx * stride - padding + j * dilation
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[ni, ci, iy, ix]) * float(w[oi, ci, i, j])
                    out[ni, oi, y, xx] = acc
    return out


def maxpool_loop(x, window=2, stride=2):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = -math.inf
                    for i in range(window):
                        for j in range(window):
                            best = max(best, float(x[ni, ci, y * stride + i, xx * stride + j]))
                    out[ni, ci, y, xx] = best
    return out


def upsample_loop(x):
    """Bilinear 2x with half-pixel centers and clamped borders, pixel by pixel."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for oy in range(2 * h):
        sy = min(max((oy + 0.5) / 2 - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(2 * w):
            sx = min(max((ox + 0.5) / 2 - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for ni in range(n):
                for ci in range(c):
                    v = x[ni, ci]
                    out[ni, ci, oy, ox] = (
                        (1 - fy) * ((1 - fx) * v[y0, x0] + fx * v[y0, x1])
                        + fy * ((1 - fx) * v[y1, x0] + fx * v[y1, x1])
                    )
    return out


def gap_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for ni in range(n):
        for ci in range(c):
            total = 0.0
            for y in range(h):
                for xx in range(w):
                    total += float(x[ni, ci, y, xx])
            out[ni, ci, 0, 0] = total / (h * w)
    return out


def batchnorm_loop(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm with biased variance, one channel at a time."""
    n, c, h, w = x.shape
    out = np.zeros(x.shape)
    means, variances = [], []
    for ci in range(c):
        vals = [float(v) for v in x[:, ci].ravel()]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        means.append(mean)
        variances.append(var)
        out[:, ci] = (x[:, ci] - mean) / math.sqrt(var + eps) * gamma[ci] + beta[ci]
    return out, np.array(means), np.array(variances)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def numeric_grad(f, arrays, index, step=1e-3):
    """Central difference of scalar ``f(arrays)`` with respect to ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros(base.shape, dtype=np.float64)
    for pos in np.ndindex(base.shape):
        orig = base[pos]
        base[pos] = orig + step
        up = f(arrays)
        base[pos] = orig - step
        down = f(arrays)
        base[pos] = orig
        grad[pos] = (up - down) / (2 * step)
    return grad


def rel_err(a, b):
    """Norm-wise relative error, symmetric and safe at zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def worst_sample_err(a, b):
    """Largest per-entry error ``|a - b| / max(|a|, |b|)``; one bad entry cannot hide behind a large one."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def gradient_errors(build, arrays, seed, step=1e-3):
    """Relative error of autodiff vs central differences for each input.

    ``build`` maps a list of Tensors to an output Tensor; the scalar checked is
    ``sum(out * R)`` for a fixed random ``R`` of the output's shape.
    """
    from attresdunet.tensor import Tensor

    arrays = [np.array(a, dtype=np.float32) for a in arrays]
    out = build([Tensor(a) for a in arrays])
    weights = np.random.default_rng(10_000 + seed).standard_normal(out.shape)

    def scalar(arrs):
        return float(np.sum(build([Tensor(a) for a in arrs]).data.astype(np.float64) * weights))

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(inputs).backward(weights.astype(np.float32))
    return [rel_err(t.grad, numeric_grad(scalar, arrays, i, step)) for i, t in enumerate(inputs)]


def away_from_zero(x, margin=0.05):
    """Push values out of ``(-margin, margin)`` so a relu kink is never straddled."""
    return np.where(np.abs(x) < margin, x + np.where(x >= 0, margin, -margin), x)


def distinct_values(rng, shape, gap=0.01):
    """Random array whose entries differ pairwise by at least ``gap``."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * gap - size * gap / 2).reshape(shape).astype(np.float32)


class BranchRecorder:
    """Records every relu sign pattern and 2x2 pooling argmax during a forward.

    A central difference is only a valid derivative estimate when the
    piecewise-linear branch taken is the same at both probe points.
    """

    def __init__(self):
        self.log = []

    def __enter__(self):
        from attresdunet import ops

        self._ops, self._relu, self._pool = ops, ops.relu, ops.maxpool2d

        def relu(x):
            self.log.append(x.data > 0)
            return self._relu(x)

        def maxpool2d(x, window=2, stride=None):
            assert window == 2 and stride in (None, 2)
            n, c, h, w = x.shape
            win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            self.log.append(win.reshape(n, c, h // 2, w // 2, 4).argmax(-1))
            return self._pool(x)

        ops.relu, ops.maxpool2d = relu, maxpool2d
        return self

    def __exit__(self, *exc):
        self._ops.relu, self._ops.maxpool2d = self._relu, self._pool

    def take(self):
        out, self.log = self.log, []
        return out


def bn_cancelled_biases(model):
    """Conv biases that feed straight into a batch norm.

    With batch statistics the bias is subtracted again with the mean, so its
    exact gradient is zero and only rounding residue remains to compare.
    """
    from attresdunet.nn import BatchNorm2d, Conv2d

    pairs = {"bn": "conv", "bn1": "conv1", "bn2": "conv2", "shortcut_bn": "shortcut"}
    out = []
    for m in model.modules():
        for bn_name, conv_name in pairs.items():
            bn, conv = getattr(m, bn_name, None), getattr(m, conv_name, None)
            if isinstance(bn, BatchNorm2d) and isinstance(conv, Conv2d) and conv.bias is not None:
                out.append(conv.bias)
    return out


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def model_spot_check(model, x, target, rng, samples=10, step=3e-2, floor=3e-5, skip=(), max_draws=5000):
    """Analytic vs central-difference gradients of the dice loss on random scalar parameters.

    A drawn scalar is redrawn when a probe point switches a relu or pooling
    branch, or when both estimates sit below ``floor``, the float32 resolution
    of the loss difference quotient. Parameters in ``skip`` are never drawn.
    Returns ``(analytic, numeric, draws)``.
    """
    from attresdunet.objective import dice_loss
    from attresdunet.tensor import Tensor

    xt = Tensor(x)
    t64 = target.astype(np.float64)

    def loss():
        # dice accumulated in float64 so the scalar is not quantized to float32
        p = model(xt)[2].data.astype(np.float64)
        return 1.0 - (2.0 * np.sum(p * t64) + 1.0) / (np.sum(p) + np.sum(t64) + 1.0)

    skipped = {id(p) for p in skip}
    params = [p for p in model.parameters() if id(p) not in skipped]
    analytic, numeric, labels = [], [], []
    with BranchRecorder() as rec:
        model.zero_grad()
        dice_loss(model(xt)[2], target).backward()
        base = rec.take()
        draws = 0
        while len(analytic) < samples:
            draws += 1
            if draws > max_draws:
                raise RuntimeError(f"only {len(analytic)} usable samples in {max_draws} draws")
            p = params[int(rng.integers(len(params)))]
            pos = tuple(int(rng.integers(s)) for s in p.shape)
            label = f"{p.name}{list(pos)}"
            if label in labels:
                continue
            orig = p.data[pos]
            p.data[pos] = orig + step
            up, up_branches = loss(), rec.take()
            p.data[pos] = orig - step
            down, down_branches = loss(), rec.take()
            p.data[pos] = orig
            fd = (up - down) / (2 * step)
            if not (_same_branches(up_branches, base) and _same_branches(down_branches, base)):
                continue
            if max(abs(float(p.grad[pos])), abs(fd)) < floor:
                continue
            analytic.append(float(p.grad[pos]))
            numeric.append(fd)
            labels.append(label)
    return analytic, numeric, labels


# --------------------------------------------------------------------------
# composite blocks in float64, built only from the loop primitives above


def randomize(module, rng):
    """Replace every parameter with random values (gammas kept positive)."""
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape).astype(np.float32)
        else:
            p.data = (rng.standard_normal(p.shape) * 0.5).astype(np.float32)
    return module


def conv_ref(conv, x, stride=None):
    b = None if conv.bias is None else conv.bias.data
    return conv2d_loop(x, conv.weight.data, b, conv.stride if stride is None else stride, conv.padding, conv.dilation)


def bn_ref(bn, x):
    return batchnorm_loop(x, bn.gamma.data, bn.beta.data, bn.eps)[0]


def relu(x):
    return np.maximum(x, 0.0)


def se_ref(se, x):
    s = gap_loop(x)
    s = sigmoid(conv_ref(se.fc2, relu(conv_ref(se.fc1, s))))
    return x * s


def conv_block_ref(block, x):
    y = relu(bn_ref(block.bn1, conv_ref(block.conv1, x)))
    y = bn_ref(block.bn2, conv_ref(block.conv2, y))
    if block.residual:
        y = y + bn_ref(block.shortcut_bn, conv_ref(block.shortcut, x))
    return se_ref(block.se, relu(y))


def gate_alpha_ref(gate, skip, g):
    halving = g.shape[2] * 2 == skip.shape[2]
    theta = conv_ref(gate.theta_x, skip, stride=2 if halving else 1)
    a = sigmoid(conv_ref(gate.psi, relu(theta + conv_ref(gate.phi_g, g))))
    return upsample_loop(a) if halving else a


def gate_ref(gate, skip, g):
    return skip * gate_alpha_ref(gate, skip, g)


def aspp_ref(aspp, x):
    h, w = x.shape[2:]
    outs = [relu(bn_ref(b.bn, conv_ref(b.conv, x))) for b in aspp.branches]
    pooled = relu(bn_ref(aspp.pool_branch.bn, conv_ref(aspp.pool_branch.conv, gap_loop(x))))
    outs.append(np.broadcast_to(pooled, pooled.shape[:2] + (h, w)))
    fuse = aspp.fuse
    return relu(bn_ref(fuse.bn, conv_ref(fuse.conv, np.concatenate(outs, axis=1))))


def maxpool2(x):
    return maxpool_loop(x, 2, 2)


def encoder_ref(encoder, x):
    skips = []
    for i, stage in enumerate(encoder.stages):
        for conv in stage.convs:
            x = relu(conv_ref(conv, x))
        if i < 4:
            skips.append(x)
            x = maxpool2(x)
    return x, skips


def decoder_ref(block, x, skips):
    parts = [upsample_loop(x)]
    for skip, gate in zip(skips, block.gates):
        parts.append(skip if gate is None else gate_ref(gate, skip, x))
    return conv_block_ref(block.block, np.concatenate(parts, axis=1))
