"""Finite-difference verification of backward passes.

The analytic side runs the production path at the inputs' own precision.
The numeric side re-evaluates the function on float64 copies with central
differences, which keeps the difference quotient itself far below the
tolerances being tested (the kernels dispatch float64 to the numpy backend
automatically). The function is evaluated twice up front and must reproduce
itself byte-for-byte, otherwise comparing it against anything is moot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, GradientError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    h: float
    per_input: list = field(default_factory=list)  # rel-err arrays

    def __str__(self):
        return (f"gradcheck: max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tol:.1e} -> {'ok' if self.passed else 'FAIL'}")


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor],
                   inputs: Sequence[Tensor], h: float = 1e-3,
                   tol: float = 1e-3, floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar-valued f against central differences.

    f receives the input list and must return a scalar Tensor. Relative
    error per element is |a - n| / max(|a|, |n|, floor).
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractViolation("gradient_check: inputs must be Tensors")
        t.requires_grad = True
        t.grad = None

    out_a = f(inputs)
    out_b = f(inputs)
    if out_a.data.tobytes() != out_b.data.tobytes():
        raise ContractViolation(
            "gradient_check: f is not deterministic, two evaluations differ")
    if out_a.data.size != 1:
        raise ContractViolation("gradient_check: f must return a scalar")

    with Tape() as tape:
        out = f(inputs)
        if not out.requires_grad:
            raise GradientError(
                "gradient_check: output does not depend on any input")
    tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    inputs64 = [Tensor(t.data.astype(np.float64), dtype=np.float64)
                for t in inputs]

    def eval64():
        return float(f(inputs64).data.reshape(()))

    max_rel = 0.0
    reports = []
    for t64, ga in zip(inputs64, analytic):
        flat = t64.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            fp = eval64()
            flat[j] = keep - h
            fm = eval64()
            flat[j] = keep
            numeric[j] = (fp - fm) / (2.0 * h)
        a = ga.astype(np.float64).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        rel = np.abs(a - numeric) / denom
        reports.append(rel.reshape(t64.shape))
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))

    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol,
                           tol=tol, h=h, per_input=reports)
