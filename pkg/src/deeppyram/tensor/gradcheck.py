"""Central finite-difference gradient checking.

The analytic gradient comes from a float32 forward/backward pass; the
numeric estimate re-runs the same function with every input and
parameter promoted to float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, default_dtype


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    per_input: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(|a|_inf, |n|_inf)``, guarded against all-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale < 1e-12:
        return float(np.abs(a - n).max(initial=0.0))
    return float(np.abs(a - n).max(initial=0.0) / scale)


@contextlib.contextmanager
def _promoted(params: Sequence[Tensor]):
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        yield
    finally:
        for p, d in zip(params, saved):
            p.data = d


def numeric_grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    params: Sequence[Tensor] = (),
    max_coords: Optional[int] = None,
    seed: int = 0,
    analytic_dtype=np.float32,
    name: str = "",
) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    ``f`` receives one :class:`Tensor` per entry of ``inputs``.  Gradients
    are also checked for ``params`` (tensors captured by ``f``).  When
    ``max_coords`` is given, only that many randomly chosen coordinates
    of each checked array are perturbed.
    """
    rng = np.random.default_rng(seed)

    # analytic pass
    ts = [Tensor(np.asarray(x, dtype=analytic_dtype), requires_grad=True) for x in inputs]
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(analytic_dtype)
        p.grad = None
    try:
        with default_dtype(analytic_dtype):
            out = f(*ts)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]
        analytic += [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None

    # numeric pass in float64
    xs64 = [np.array(x, dtype=np.float64) for x in inputs]
    errors = []
    with _promoted(params), default_dtype(np.float64):

        def evaluate() -> float:
            return float(f(*[Tensor(x) for x in xs64]).data.sum())

        targets = xs64 + [p.data for p in params]
        for arr, ana in zip(targets, analytic):
            flat = arr.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            num = np.empty(coords.size)
            for k, ci in enumerate(coords):
                orig = flat[ci]
                flat[ci] = orig + step
                fp = evaluate()
                flat[ci] = orig - step
                fm = evaluate()
                flat[ci] = orig
                num[k] = (fp - fm) / (2 * step)
            errors.append(relative_error(np.asarray(ana).reshape(-1)[coords], num))
    return GradCheckResult(name=name, max_rel_error=max(errors) if errors else 0.0, per_input=errors)
