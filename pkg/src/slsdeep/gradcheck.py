"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class InputCheck:
    name: str
    checked: int
    max_rel_err: float
    max_abs_err: float


@dataclass
class GradCheckReport:
    rel_tol: float
    abs_tol: float
    inputs: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err <= self.rel_tol for c in self.inputs)

    def lines(self) -> list:
        return [
            f"{c.name}: checked={c.checked} max_rel_err={c.max_rel_err:.3e} max_abs_err={c.max_abs_err:.3e}"
            for c in self.inputs
        ]


def fd_step(value: float, scale: float = 1e-4) -> float:
    return max(scale, scale * abs(value))


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], rel_tol: float = 1e-3,
               abs_tol: float = 1e-6, max_checks: Optional[int] = None, seed: int = 0,
               names: Optional[Sequence[str]] = None, step_scale: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, abs_tol)``
    so gradients that are both ~0 do not blow up the ratio. ``max_checks``
    limits each input to a random subset of coordinates (needed for whole
    networks); ``None`` checks every coordinate. The step for coordinate
    value ``x`` is ``max(step_scale, step_scale * |x|)``.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    tape.backward(out)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(rel_tol, abs_tol)
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        worst_rel = worst_abs = 0.0
        for i in idx:
            orig = flat[i]
            h = fd_step(orig, step_scale)
            flat[i] = orig + h
            plus = f(*inputs).data.reshape(())
            flat[i] = orig - h
            minus = f(*inputs).data.reshape(())
            flat[i] = orig
            # difference in the input dtype; only the quotient is rounded to float
            numeric = float((plus - minus) / (2 * h))
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(a), abs(numeric), abs_tol))
        name = names[k] if names else (t.name or f"input{k}")
        report.inputs.append(InputCheck(name, len(idx), worst_rel, worst_abs))
    return report
