"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import UsageError
from .tensor import Tensor, backward

STEP_32 = 1e-3
STEP_64 = 1e-5


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    step: float
    checked: int
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel. error {self.max_rel_error:.3e} over {self.checked} "
            f"coordinates (tol {self.tol:g}, step {self.step:g})"
        )


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def nudge_from_zero(values: np.ndarray, margin: float) -> np.ndarray:
    """Push entries with ``|v| < margin`` out to ``±margin`` (keeps relu off its kink)."""
    values = np.array(values, copy=True)
    small = np.abs(values) < margin
    values[small] = np.where(values[small] >= 0, margin, -margin)
    return values


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise UsageError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(()))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    tol: float = 1e-4,
    step: Optional[float] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f(*inputs)``.

    Every input tensor must already have ``requires_grad`` set. With
    ``max_coords`` only a seeded random subset of coordinates per input is
    perturbed, which keeps checks of whole networks affordable.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if not tensors:
        raise UsageError("grad_check needs at least one input tensor")
    if step is None:
        step = STEP_64 if tensors[0].dtype == np.float64 else STEP_32

    for t in tensors:
        t.zero_grad()
    out = f(*tensors)
    _scalar(out)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    per_input = []
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        errs = np.empty(coords.size)
        for n, idx in enumerate(coords):
            original = flat[idx]
            flat[idx] = original + step
            plus = _scalar(f(*tensors))
            flat[idx] = original - step
            minus = _scalar(f(*tensors))
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            errs[n] = rel_error(ga.reshape(-1)[idx], numeric)
        input_worst = float(errs.max()) if errs.size else 0.0
        per_input.append(input_worst)
        worst = max(worst, input_worst)
        checked += coords.size
    for t in tensors:
        t.zero_grad()
    return GradCheckReport(worst < tol, worst, tol, step, checked, per_input)
