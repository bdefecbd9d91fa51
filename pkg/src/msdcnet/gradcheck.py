"""Central finite-difference verification of backward rules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import pin_branches
from .tensor import Tensor

STEP = 1e-5


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        lines = [f"{k}: {v:.3e}" for k, v in self.max_rel_error.items()]
        lines += [f"FAIL {f}" for f in self.failures]
        return "\n".join(lines)


def _scalar(out, projection):
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    if projection is None:
        return float(data.sum())
    return float((data * projection).sum())


def _evaluate(function, inputs, projection, branches):
    with pin_branches(branches):
        return _scalar(function(*inputs), projection)


def grad_check(function, inputs, tolerance=1e-4, step=STEP, max_entries=None, seed=0,
               names=None, abs_floor=1e-7) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``function(*inputs)``.

    Non-scalar outputs are reduced with a fixed random projection so that
    every output element contributes.  ``max_entries`` caps the number of
    coordinates probed per input (chosen at random); the analytic gradient
    is always computed in full.

    Piecewise ops (ReLU, the loss's critical point) keep the branch pattern
    of the unperturbed point during the perturbed evaluations, so both
    differences see the same smooth piece the backward pass differentiates.
    Without this a deep ReLU network flips some unit on nearly every probe.

    The relative error of each coordinate is |a - n| / max(|a|, |n|, floor)
    with floor = max(1e-3 * largest gradient, ``abs_floor``), so entries far
    below the gradient's scale or below the round-off level of the
    differences are judged absolutely.
    """
    report = GradCheckReport(tolerance)
    names = names or [t.name or f"input{i}" for i, t in enumerate(inputs)]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs 64-bit inputs, got {t.dtype} for {t.name or t.shape}")
        t.requires_grad = True
        t.grad = None

    with pin_branches() as branches:
        out = function(*inputs)
    if not np.all(np.isfinite(out.data)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out.data))[0])
        report.failures.append(f"non-finite forward output at index {bad}")
        return report
    rng = np.random.default_rng(seed)
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    seed_grad = np.ones_like(out.data) if projection is None else projection
    out.backward(seed_grad)

    for name, t in zip(names, inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            report.failures.append(f"non-finite analytic gradient for {name} at {bad}")
            continue
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = _evaluate(function, inputs, projection, branches)
            flat[i] = orig - step
            fm = _evaluate(function, inputs, projection, branches)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            report.failures.append(f"non-finite finite difference for {name}")
            continue
        a = analytic.reshape(-1)[idx]
        floor = max(1e-3 * max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0)), abs_floor)
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(rel.max(initial=0.0))
    for t in inputs:
        t.grad = None
    return report
