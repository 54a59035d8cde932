"""Finite-difference gradient oracle.

Central differences in float64, compared against tape gradients coordinate
by coordinate. This is the independent route against which backward() is
validated; it must never be replaced by a call into the tape itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckResult:
    ok: bool
    max_rel_err: float
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)
    analytic: float = 0.0
    numeric: float = 0.0
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def finite_diff_check(
    build_loss,
    inputs: list[np.ndarray],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords: int | None = None,
) -> GradCheckResult:
    """Compare tape gradients of ``build_loss`` against central differences.

    ``build_loss(graph, tensors)`` must construct a scalar loss from the
    given leaf tensors on the given graph. All arithmetic runs in float64.
    Relative error uses max(1, |analytic|) in the denominator so tiny
    gradients are judged absolutely. Non-finite values anywhere fail.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    g = Graph(dtype=np.float64)
    loss = build_loss(g, leaves)
    if loss.data.size != 1:
        raise ValueError("finite_diff_check: loss must be scalar")
    g.backward(loss)

    worst = None
    max_rel = 0.0
    worst_pair = (0.0, 0.0)
    failures = []
    for i, leaf in enumerate(leaves):
        an = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.all(np.isfinite(an)):
            return GradCheckResult(False, np.inf, (i, -1), np.nan, np.nan,
                                   [(i, -1, np.nan, np.nan)])
        flat = leaf.data.reshape(-1)
        coords = range(flat.size) if max_coords is None else range(min(flat.size, max_coords))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            lp = _eval_loss(build_loss, inputs, leaves)
            flat[c] = orig - step
            lm = _eval_loss(build_loss, inputs, leaves)
            flat[c] = orig
            num = (lp - lm) / (2.0 * step)
            ana = an.reshape(-1)[c]
            if not (np.isfinite(num) and np.isfinite(ana)):
                return GradCheckResult(False, np.inf, (i, c), float(ana), float(num),
                                       [(i, c, float(ana), float(num))])
            rel = abs(ana - num) / max(1.0, abs(ana))
            if rel > max_rel:
                max_rel, worst, worst_pair = rel, (i, c), (float(ana), float(num))
            if rel > tol:
                failures.append((i, c, float(ana), float(num)))
    return GradCheckResult(
        ok=not failures,
        max_rel_err=float(max_rel),
        worst=worst,
        analytic=worst_pair[0],
        numeric=worst_pair[1],
        failures=failures,
    )


def _eval_loss(build_loss, inputs, leaves) -> float:
    """Forward-only evaluation at the leaves' current (perturbed) data."""
    fresh = [Tensor(leaf.data.copy(), requires_grad=True) for leaf in leaves]
    g = Graph(dtype=np.float64, grad_enabled=False)
    return build_loss(g, fresh).item()


def finite_diff_check_params(
    make_loss,
    params: list[Tensor],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords_per_param: int | None = None,
    coord_seed: int = 0,
) -> GradCheckResult:
    """Whole-model oracle: the leaves are live module parameters.

    ``make_loss()`` must build a fresh graph over the modules owning
    ``params`` and return (graph, scalar loss); it must be deterministic so
    repeated calls at perturbed parameter values are comparable (fix any rng
    inside). Parameters must be float64. Coordinates may be subsampled
    deterministically for large tensors.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite_diff_check_params requires float64 parameters")
        p.zero_grad()
    g, loss = make_loss()
    g.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    for p in params:
        p.zero_grad()

    pick = np.random.default_rng(coord_seed)
    worst, max_rel, worst_pair, failures = None, 0.0, (0.0, 0.0), []
    for i, p in enumerate(params):
        an = analytic[i]
        if not np.all(np.isfinite(an)):
            return GradCheckResult(False, np.inf, (i, -1), np.nan, np.nan,
                                   [(i, -1, np.nan, np.nan)])
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            idx = np.sort(pick.choice(flat.size, size=max_coords_per_param, replace=False))
        for c in idx:
            orig = flat[c]
            flat[c] = orig + step
            _, lp = make_loss()
            flat[c] = orig - step
            _, lm = make_loss()
            flat[c] = orig
            num = (lp.item() - lm.item()) / (2.0 * step)
            ana = an.reshape(-1)[c]
            if not (np.isfinite(num) and np.isfinite(ana)):
                return GradCheckResult(False, np.inf, (i, int(c)), float(ana), float(num),
                                       [(i, int(c), float(ana), float(num))])
            rel = abs(ana - num) / max(1.0, abs(ana))
            if rel > max_rel:
                max_rel, worst, worst_pair = rel, (i, int(c)), (float(ana), float(num))
            if rel > tol:
                failures.append((i, int(c), float(ana), float(num)))
    return GradCheckResult(ok=not failures, max_rel_err=float(max_rel), worst=worst,
                           analytic=worst_pair[0], numeric=worst_pair[1],
                           failures=failures)
