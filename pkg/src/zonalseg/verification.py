"""Finite-difference checks of every layer, the Dice loss and a whole network."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import array_core as ac
from .architectures import ModelSpec, build_model, forward, se_block_forward
from .training import dice_loss

GRADCHECK_TOL = 1e-4


def _dot(t, w):
    """sum(t * w) for a fixed array ``w``, built from recorded ops."""
    return ac.sum_all(ac.dense(ac.reshape(t, (1, -1)), w.reshape(-1, 1)))


def layer_checks(seed=0, eps=1e-5):
    """Max relative gradient error per layer, in a fixed order."""
    rng = np.random.default_rng(seed)
    proj = {}

    def project(t):
        w = proj.setdefault(t.shape, rng.standard_normal(t.shape))
        return _dot(t, w)

    T = lambda *shape: ac.Tensor(rng.standard_normal(shape))  # noqa: E731
    results = OrderedDict()

    x, k, b = T(2, 3, 6, 5), T(4, 3, 3, 3), T(4)
    results["conv2d"] = ac.gradient_check(lambda p: project(ac.conv2d(p[0], p[1], p[2])), [x, k, b], eps)
    x, k = T(2, 3, 6, 5), T(2, 3, 3, 3)
    results["conv2d_valid"] = ac.gradient_check(lambda p: project(ac.conv2d(p[0], p[1], padding="valid")), [x, k], eps)
    x = T(2, 3, 6, 4)
    results["max_pool_2x2"] = ac.gradient_check(lambda p: project(ac.max_pool_2x2(p)), x, eps)
    x, k, b = T(2, 4, 3, 3), T(4, 2, 2, 2), T(2)
    results["upsample_block"] = ac.gradient_check(lambda p: project(ac.upsample_block(p[0], p[1], p[2])), [x, k, b], eps)
    x = T(2, 3, 4, 5)
    results["global_avg_pool"] = ac.gradient_check(lambda p: project(ac.global_avg_pool(p)), x, eps)
    x, w = T(4, 6), T(6, 3)
    results["dense"] = ac.gradient_check(lambda p: project(ac.dense(p[0], p[1])), [x, w], eps)
    x = T(3, 7)
    results["relu"] = ac.gradient_check(lambda p: project(ac.relu(p)), x, eps)
    x = T(3, 7)
    results["sigmoid"] = ac.gradient_check(lambda p: project(ac.sigmoid(p)), x, eps)
    x, s = T(2, 3, 4, 4), T(2, 3)
    results["channel_scale"] = ac.gradient_check(lambda p: project(ac.channel_scale(p[0], p[1])), [x, s], eps)
    a, c = T(2, 2, 3, 3), T(2, 3, 3, 3)
    results["concat_channels"] = ac.gradient_check(lambda p: project(ac.concat_channels(p[0], p[1])), [a, c], eps)
    u, w1, w2 = T(2, 16, 4, 4), T(16, 2), T(2, 16)
    results["se_block"] = ac.gradient_check(lambda p: project(se_block_forward(p[0], p[1], p[2])[0]), [u, w1, w2], eps)
    s = ac.Tensor(rng.uniform(0.05, 0.95, (2, 1, 6, 6)))
    r = rng.random((2, 1, 6, 6)) < 0.4
    results["dice_loss"] = ac.gradient_check(lambda p: dice_loss(p, r), s, eps)
    # three-layer stack: conv -> relu -> pool -> sigmoid
    x, k = T(1, 2, 6, 6), T(3, 2, 3, 3)
    results["stack"] = ac.gradient_check(
        lambda p: project(ac.sigmoid(ac.max_pool_2x2(ac.relu(ac.conv2d(p[0], p[1]))))), [x, k], eps
    )
    return results


def model_check(seed=0, eps=1e-5, variant="enc_dec_use", depth=2, width=4, reduction=2, size=16, coords=None):
    """Gradient check of the Dice loss over every weight of a small network."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(variant, depth, width, reduction)
    state = build_model(spec, seed)
    # non-zero biases so no unit sits exactly at a ReLU kink
    for name, t in state.weights.items():
        if name.endswith("bias"):
            t.data = rng.normal(0, 0.05, t.shape)
    x = rng.random((2, 1, size, size))
    y = rng.random((2, 1, size, size)) < 0.3
    return ac.gradient_check(lambda p: dice_loss(forward(state, x), y), state.parameters(), eps, coords=coords, rng=rng)
