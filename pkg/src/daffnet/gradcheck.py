"""Central-difference gradient oracle.

The numeric side never touches the tape: every probe is a plain forward pass
under ``no_grad``. Probes whose +eps or -eps evaluation flips a relu mask or a
max/argmax selection relative to the base point are skipped, since the
function is not differentiable there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, trace_kinks

DENOM_FLOOR = 1e-4


class GradcheckError(RuntimeError):
    pass


@dataclass
class InputReport:
    index: int
    shape: tuple
    checked: int
    skipped: int
    max_rel_err: float
    worst_element: Optional[int]


@dataclass
class GradcheckReport:
    eps: float
    tol: float
    inputs: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.inputs)

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.inputs)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        return (f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} eps={self.eps:.0e} "
                f"checked={self.checked} skipped={self.skipped}")


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalarize(out: Tensor, cotangent: Optional[np.ndarray]) -> Tensor:
    if out.size == 1:
        return out.sum()
    return (out * Tensor(cotangent)).sum()


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    ``inputs`` must be float64 tensors with ``requires_grad`` set; they are
    perturbed in place and restored. Non-scalar outputs are reduced with a
    fixed random cotangent. ``max_elements`` caps the probes per input
    (sampled without replacement, deterministic under ``seed``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck input {i} has dtype {t.dtype}; float64 required")
        t.grad = None
    rng = np.random.default_rng(seed)

    with trace_kinks() as base_trace:
        out = f(*inputs)
    cotangent = None if out.size == 1 else rng.standard_normal(out.shape)
    if not np.all(np.isfinite(out.data)):
        raise GradcheckError("non-finite output at the base point")
    backward(_scalarize(out, cotangent))
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]
    base_trace = list(base_trace)

    def probe(i: int, flat: int, delta: float) -> tuple:
        buf = inputs[i].data.reshape(-1)
        old = buf[flat]
        buf[flat] = old + delta
        try:
            with no_grad(), trace_kinks() as tr:
                val = float(_scalarize(f(*inputs), cotangent).data)
        finally:
            buf[flat] = old
        if not np.isfinite(val):
            raise GradcheckError(f"non-finite output when perturbing input {i}, element {flat}")
        return val, tr == base_trace

    report = GradcheckReport(eps=eps, tol=tol)
    for i, t in enumerate(inputs):
        n = t.size
        if max_elements is not None and n > max_elements:
            elements = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            elements = np.arange(n)
        a_flat = analytic[i].reshape(-1)
        worst, worst_el, checked, skipped = 0.0, None, 0, 0
        for el in elements:
            fp, smooth_p = probe(i, int(el), eps)
            fm, smooth_m = probe(i, int(el), -eps)
            if not (smooth_p and smooth_m):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            err = float(relative_error(a_flat[el], num))
            checked += 1
            if err > worst:
                worst, worst_el = err, int(el)
        report.inputs.append(InputReport(i, t.shape, checked, skipped, worst, worst_el))
    return report
