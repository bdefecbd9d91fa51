"""The gradient-check suite run by ``msdc gradcheck`` and the acceptance tests."""
from __future__ import annotations

import time

import numpy as np

from . import ops
from .gradcheck import grad_check
from .metrics import smooth_l1_loss
from .model import (ModelConfig, ModelParams, build_cost_volume, forward, match_features,
                    recover_scale, soft_argmin)
from .tensor import Tensor

E2E_CONFIG = dict(base_channels=4, max_disparity=8, levels_3d=2, dtype="float64")


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.05 + np.abs(x))
    return Tensor(x)


def _op_cases(rng):
    cases = {}

    x, w, b = _rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    cases["convolve2d"] = (lambda x, w, b: ops.convolve(x, w, b, stride=1, zero_pad=1), [x, w, b])
    x, w, b = _rand(rng, 2, 2, 7, 6), _rand(rng, 3, 2, 5, 5), _rand(rng, 3)
    cases["convolve2d_stride2_k5"] = (lambda x, w, b: ops.convolve(x, w, b, stride=2, zero_pad=2), [x, w, b])
    x, w, b = _rand(rng, 1, 2, 4, 4, 6), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
    cases["convolve3d_stride2"] = (lambda x, w, b: ops.convolve(x, w, b, stride=2, zero_pad=1), [x, w, b])
    x, w, b = _rand(rng, 1, 2, 3, 3, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)
    cases["convolve3d"] = (lambda x, w, b: ops.convolve(x, w, b, stride=1, zero_pad=1), [x, w, b])
    x, w, b = _rand(rng, 1, 3, 3, 4), _rand(rng, 3, 2, 3, 3), _rand(rng, 2)
    cases["transposed_convolve2d"] = (lambda x, w, b: ops.transposed_convolve(x, w, b), [x, w, b])
    x, w, b = _rand(rng, 2, 2, 2, 2, 3), _rand(rng, 2, 3, 3, 3, 3), _rand(rng, 3)
    cases["transposed_convolve3d"] = (lambda x, w, b: ops.transposed_convolve(x, w, b), [x, w, b])
    x, g, b = _rand(rng, 2, 3, 4, 5), _rand(rng, 3), _rand(rng, 3)
    cases["batch_norm_train"] = (lambda x, g, b: ops.batch_norm(x, g, b), [x, g, b])
    stats = ops.RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    x, g, b = _rand(rng, 2, 3, 2, 2, 3), _rand(rng, 3), _rand(rng, 3)
    cases["batch_norm_infer"] = (lambda x, g, b: ops.batch_norm(x, g, b, stats, training=False), [x, g, b])
    cases["relu"] = (ops.relu, [_rand(rng, 3, 4, 5, away_from_zero=True)])
    cases["softmax_along"] = (lambda x: ops.softmax_along(x, 1), [_rand(rng, 2, 5, 3, 4)])
    cases["concat"] = (lambda a, c: ops.concat([a, c], 1), [_rand(rng, 2, 3, 4), _rand(rng, 2, 2, 4)])
    cases["resize_bilinear"] = (lambda x: ops.resize_bilinear(x, 8, 12), [_rand(rng, 1, 2, 2, 3)])
    cases["build_cost_volume"] = (lambda a, c: build_cost_volume(a, c, 16),
                                  [_rand(rng, 1, 3, 3, 6), _rand(rng, 1, 3, 3, 6)])
    cases["soft_argmin"] = (soft_argmin, [_rand(rng, 2, 6, 3, 4)])
    gt = rng.uniform(1.0, 20.0, (2, 4, 5))
    gt[0, 0, :2] = 0.0
    # residuals straddle the |x| = 3 critical point but stay clear of it
    resid = rng.choice([-1, 1], gt.shape) * np.concatenate(
        [rng.uniform(0.2, 2.8, 20), rng.uniform(3.2, 6.0, 20)]).reshape(gt.shape)
    cases["smooth_l1_loss"] = (lambda p: smooth_l1_loss(p, gt), [Tensor(gt + resid)])
    return cases


def _module_cases(rng):
    cases = {}
    cfg = ModelConfig(base_channels=2, max_disparity=16, levels_3d=2, dtype="float64")
    net = ModelParams.initialize(cfg, seed=1)
    params = [p for k, p in net.named() if k.startswith("m3d.")]
    vol = _rand(rng, 1, 4, 4, 8, 8)
    cases["match_features"] = (lambda v, *ps: match_features(v, net), [vol] + params, 3)
    rparams = [p for k, p in net.named() if k.startswith("rec.")]
    cases["recover_scale"] = (lambda v, *ps: recover_scale(v, net), [_rand(rng, 1, 4, 2, 4, 4)] + rparams, 6)
    return cases


def end_to_end_case(seed=0):
    cfg = ModelConfig(**E2E_CONFIG)
    net = ModelParams.initialize(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    left = rng.random((1, 3, 16, 32))
    right = np.roll(left, -2, axis=3)
    gt = rng.uniform(0.5, 7.0, (1, 16, 32))

    def loss(*ps):
        return smooth_l1_loss(forward(left, right, net, training=True), gt)

    return loss, [p for _, p in net.named()]


def gradient_suite(tolerance=1e-4, e2e_tolerance=1e-3, seed=0, e2e_entries=2, include_e2e=True):
    """Run every gradient check; returns a list of (name, report, seconds, tolerance)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in _op_cases(rng).items():
        t0 = time.perf_counter()
        rep = grad_check(fn, inputs, tolerance=tolerance)
        results.append((name, rep, time.perf_counter() - t0, tolerance))
    for name, (fn, inputs, entries) in _module_cases(rng).items():
        t0 = time.perf_counter()
        rep = grad_check(fn, inputs, tolerance=tolerance, max_entries=entries,
                         names=[t.name or "volume" for t in inputs])
        results.append((name, rep, time.perf_counter() - t0, tolerance))
    if include_e2e:
        fn, params = end_to_end_case(seed)
        t0 = time.perf_counter()
        rep = grad_check(fn, params, tolerance=e2e_tolerance, max_entries=e2e_entries)
        results.append(("end_to_end", rep, time.perf_counter() - t0, e2e_tolerance))
    return results
