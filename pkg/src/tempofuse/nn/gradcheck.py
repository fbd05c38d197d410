"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .layers import Dropout, Module
from .tensor import Tensor

# Central differences in float64 carry roundoff of about eps * |f| / h ~ 1e-11.
# Gradients that are exactly zero (a conv bias feeding train-mode batchnorm)
# would turn that noise into a large relative error without a floor.
ABS_FLOOR = 1e-6
# A kink of a piecewise-linear op within +-h shows up as disagreeing one-sided
# slopes and biases the central difference by up to half the disagreement.
# Coordinates whose disagreement exceeds the tolerance (relative to the
# tensor's gradient scale) are re-measured with steps ten times smaller.
KINK_RETRIES = 3
# Roundoff in a difference of loss values, in units of eps * |f|.
ROUNDOFF_ULPS = 16.0


@dataclass
class TensorCheck:
    name: str
    n_checked: int
    max_abs_error: float
    rel_error: float
    n_refined: int = 0
    n_skipped: int = 0


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"{c.name:<40s} n={c.n_checked:<5d} rel_err={c.rel_error:.3e}"
                 + (f" refined={c.n_refined} skipped={c.n_skipped}" if c.n_refined else "")
                 for c in self.checks]
        lines.append(f"max rel error {self.max_rel_error:.3e} "
                     f"({'PASS' if self.ok else 'FAIL'} at tol {self.tolerance:g})")
        return "\n".join(lines)


@contextlib.contextmanager
def dropout_disabled(model: Module):
    """Make every Dropout in ``model`` the identity for the duration of the block."""
    drops = [m for m in model.modules() if isinstance(m, Dropout)]
    saved = [d.enabled for d in drops]
    for d in drops:
        d.enabled = False
    try:
        yield
    finally:
        for d, flag in zip(drops, saved):
            d.enabled = flag


@contextlib.contextmanager
def frozen_buffers(model: Module | None):
    """Restore batchnorm running statistics after repeated train-mode forwards."""
    if model is None:
        yield
        return
    saved = [(buf, buf.copy()) for _, buf in model.named_buffers()]
    try:
        yield
    finally:
        for buf, copy in saved:
            buf[...] = copy


def finite_difference_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                            names: Sequence[str] | None = None, h: float = 1e-5,
                            tolerance: float = 1e-4, max_coords: int | None = None,
                            rng: np.random.Generator | None = None,
                            model: Module | None = None,
                            abs_floor: float = ABS_FLOOR) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the forward graph on every call and return a
    scalar. For each tensor the error is normwise,
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, abs_floor)``, over
    the checked coordinates. ``max_coords`` limits the coordinates sampled per
    tensor (all of them when ``None``). Dropout layers of ``model`` are
    switched off and its running statistics restored afterwards.

    A coordinate whose forward and backward one-sided slopes disagree by more
    than the tolerance is re-measured with smaller steps (counted in
    ``n_refined``) and left out (``n_skipped``) if the disagreement persists,
    which only happens right at a kink of a piecewise-linear op. The test uses
    numeric values only, so a wrong analytic gradient cannot trigger it.
    """
    rng = rng or np.random.default_rng(0)
    names = list(names) if names is not None else [t.name or f"t{i}" for i, t in enumerate(tensors)]
    report = GradCheckReport(tolerance=tolerance)
    ctx_drop = dropout_disabled(model) if model is not None else contextlib.nullcontext()
    with ctx_drop, frozen_buffers(model):
        for t in tensors:
            t.grad = None
        loss = loss_fn()
        f0 = loss.item()
        loss.backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        for t in tensors:
            t.grad = None
        for name, t, a in zip(names, tensors, analytic):
            flat = t.data.reshape(-1)
            if max_coords is None or max_coords >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            eps = np.finfo(t.data.dtype).eps
            # An undetected kink biases the estimate by half the slope mismatch.
            a_checked = a.reshape(-1)[coords]
            kink_scale = 0.5 * tolerance * max(np.abs(a_checked).max(initial=0.0), abs_floor)
            numeric = np.empty(len(coords))
            keep = np.ones(len(coords), dtype=bool)
            refined = 0
            for j, i in enumerate(coords):
                orig = flat[i]
                step = h
                for attempt in range(KINK_RETRIES + 1):
                    flat[i] = orig + step
                    f_plus = loss_fn().item()
                    flat[i] = orig - step
                    f_minus = loss_fn().item()
                    flat[i] = orig
                    numeric[j] = (f_plus - f_minus) / (2 * step)
                    noise = ROUNDOFF_ULPS * eps * max(abs(f0), abs(f_plus), abs(f_minus)) / step
                    if abs((f_plus - f0) - (f0 - f_minus)) / step <= max(kink_scale, noise):
                        break
                    refined += attempt == 0
                    step /= 10
                    # Stop once a smaller step would be swamped by roundoff.
                    if ROUNDOFF_ULPS * eps * abs(f0) / step > kink_scale:
                        keep[j] = False
                        break
                else:
                    keep[j] = False
            a_sel = a.reshape(-1)[coords][keep]
            num = numeric[keep]
            err = np.abs(a_sel - num).max(initial=0.0)
            scale = max(np.abs(a_sel).max(initial=0.0), np.abs(num).max(initial=0.0), abs_floor)
            report.checks.append(TensorCheck(name, int(keep.sum()), float(err), float(err / scale),
                                             refined, int((~keep).sum())))
    return report


def check_module(model: Module, inputs: Sequence[Tensor], loss_of_output: Callable[[Tensor], Tensor],
                 h: float = 1e-5, tolerance: float = 1e-4, max_coords: int | None = None,
                 rng: np.random.Generator | None = None, check_inputs: bool = True) -> GradCheckReport:
    """Gradient-check every parameter of ``model`` (and optionally its inputs)."""
    named = list(model.named_parameters())
    tensors = [p for _, p in named]
    names = [n for n, _ in named]
    if check_inputs:
        for i, x in enumerate(inputs):
            x.requires_grad = True
            tensors.append(x)
            names.append(f"input{i}")
    return finite_difference_check(lambda: loss_of_output(model(*inputs)), tensors, names, h=h,
                                   tolerance=tolerance, max_coords=max_coords, rng=rng, model=model)
