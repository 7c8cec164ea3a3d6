"""Central-difference verification of analytic gradients.

Runs in the engine's 64-bit mode: build the parameters (and any inputs the
closure captures) as float64 before checking.  Elements whose finite-
difference evaluations cross a branch point (a ReLU sign flip or a bilinear
sampling cell change) are excluded from the comparison and reported, as are
near-kink preactivations seen in the baseline forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    n_excluded: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    passed: bool = True
    kink_points: int = 0
    params: list = field(default_factory=list)

    def __str__(self):
        lines = [f"grad check (rtol={self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        if self.kink_points:
            lines.append(f"  near-kink ReLU preactivations in baseline: {self.kink_points}")
        for p in self.params:
            status = "ok" if p.passed else "FAIL"
            lines.append(
                f"  {p.name:40s} rel={p.max_rel_err:.3e} abs={p.max_abs_err:.3e} "
                f"checked={p.n_checked} excluded={p.n_excluded} {status}"
            )
        return "\n".join(lines)


def _run(closure):
    ad.guard.begin()
    loss = closure()
    if loss.data.size != 1:
        raise ValueError("grad_check: closure must return a scalar loss")
    return float(loss.data), ad.guard.signature(), loss


def grad_check(closure, params, tolerance, h=1e-5, atol=1e-9, max_elems=8, seed=0):
    """Compare analytic gradients of `closure()` against central differences.

    closure: nullary callable returning a scalar loss Tensor built from
    `params` (a ParamSet).  At most `max_elems` elements per parameter are
    perturbed (seeded choice); pass rule per element is
    |analytic - numeric| <= atol + tolerance * max(|analytic|, |numeric|).
    Raises NumericError if two baseline forward passes disagree.
    """
    rng = np.random.default_rng(seed)
    ad.guard.active = True
    try:
        v1, sig1, loss = _run(closure)
        kinks = ad.guard.kink_points
        v2, sig2, _ = _run(closure)
        if v1 != v2 or sig1 != sig2:
            raise NumericError("grad_check: closure is not deterministic")

        params.zero_grad()
        tape = ad.GradTape(params)
        grads = tape.backward(loss)

        report = GradCheckReport(tolerance=tolerance, kink_points=kinks)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            if n <= max_elems:
                idxs = np.arange(n)
            else:
                idxs = rng.choice(n, size=max_elems, replace=False)
            analytic = grads[name].reshape(-1)
            max_rel = 0.0
            max_abs = 0.0
            excluded = 0
            ok = True
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                vp, sp, _ = _run(closure)
                flat[i] = orig - h
                vm, sm, _ = _run(closure)
                flat[i] = orig
                if sp != sig1 or sm != sig1:
                    excluded += 1
                    continue
                numeric = (vp - vm) / (2.0 * h)
                a = float(analytic[i])
                err = abs(a - numeric)
                denom = max(abs(a), abs(numeric))
                max_abs = max(max_abs, err)
                if err > atol:
                    max_rel = max(max_rel, err / max(denom, 1e-300))
                if err > atol + tolerance * denom:
                    ok = False
            report.params.append(
                ParamReport(name, max_rel, max_abs, len(idxs) - excluded, excluded, ok)
            )
            report.passed = report.passed and ok
        return report
    finally:
        ad.guard.active = False
        ad.guard.begin()
