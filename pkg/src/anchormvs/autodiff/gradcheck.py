"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_input: dict[str, float] = field(default_factory=dict)
    message: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        return f"[{status}] {self.name}: max rel err {self.max_rel_error:.3e} < {self.tolerance:.0e}{extra}"


def _scalarize(out: Tensor, rng: np.random.Generator):
    """Reduce a non-scalar output to a scalar with fixed random weights."""
    if out.size == 1:
        return None
    return rng.standard_normal(out.shape)


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-6,
               step: float = 1e-5, max_entries: int | None = None, seed: int = 0,
               name: str = "op") -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` is re-evaluated with perturbed ``inputs`` (mutated in place and
    restored).  Non-scalar outputs are contracted with a fixed random
    tensor.  The error per input is ``max|a - n| / max(max|a|, max|n|, floor)``
    over the checked entries, where ``floor`` is 1e-4 of the largest gradient
    magnitude over all inputs (so inputs whose true gradient vanishes, such
    as attention key biases, are judged against the global scale).  The
    report keeps the largest error.
    ``max_entries`` bounds the number of entries probed per input.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    weights = _scalarize(out, rng)
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(name, math.inf, tolerance, message="non-finite forward output")
    tape.backward(out, None if weights is None else weights)

    def value() -> float:
        y = fn().data
        return float(y) if weights is None else float((y * weights).sum())

    probes = []
    for idx, t in enumerate(inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(entries.size)
        for n, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + step
            fp = value()
            flat[e] = orig - step
            fm = value()
            flat[e] = orig
            numeric[n] = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[entries]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            return GradCheckReport(name, math.inf, tolerance,
                                   message=f"non-finite gradient for input {idx}")
        probes.append((t.name or f"input{idx}", a, numeric))
    global_scale = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
                        for _, a, n in probes), default=0.0)
    worst = 0.0
    per_input: dict[str, float] = {}
    for label, a, numeric in probes:
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-4 * global_scale)
        err = 0.0 if scale == 0.0 else float(np.abs(a - numeric).max(initial=0.0) / scale)
        per_input[label] = err
        worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return GradCheckReport(name, worst, tolerance, per_input)
