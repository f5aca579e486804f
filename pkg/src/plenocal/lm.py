"""Dense Levenberg-Marquardt with Jacobi scaling and a pluggable update rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

CONVERGED = "converged"
MAX_ITER = "max_iterations"
FAILED = "failed"


@dataclass
class LMResult:
    x: Any
    cost: float
    status: str
    message: str
    n_iter: int
    cost_history: list = field(default_factory=list)
    min_eigenvalue: float = float("nan")

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _add(x, delta):
    return x + delta


def levenberg_marquardt(
    residuals: Callable,
    jacobian: Callable,
    x0,
    *,
    update: Callable = _add,
    max_iter: int = 500,
    ftol: float = 1e-10,
    gtol: float = 1e-12,
    xtol: float = 1e-12,
    damping: float = 1e-3,
    mask=None,
) -> LMResult:
    """Minimise ``0.5 * |r(x)|^2``.

    Parameters
    ----------
    residuals, jacobian
        ``r(x)`` returning a 1-D array and ``J(x)`` returning ``(m, n)``.
    update
        ``update(x, delta) -> x_new``; defaults to vector addition, so ``x`` may
        be any object as long as ``update`` knows how to move it.
    damping
        Initial damping relative to the mean diagonal of the column-scaled
        normal matrix (which is 1 after scaling).
    mask
        Boolean array of length ``n``; ``False`` entries are held fixed.

    Notes
    -----
    Steps are accepted only if they decrease the cost, so ``cost_history`` is
    non-increasing.  Damping is multiplied by 10 on rejection and divided by 10
    on acceptance.
    """
    x = x0
    r = np.asarray(residuals(x), dtype=float)
    cost = 0.5 * float(r @ r)
    history = [cost]
    if not np.isfinite(cost):
        return LMResult(x, cost, FAILED, "non-finite cost at start", 0, history)
    if max_iter <= 0:
        return LMResult(x, cost, MAX_ITER, "zero iterations requested", 0, history)

    mu = damping
    status, message = MAX_ITER, f"no convergence after {max_iter} iterations"
    it = 0
    J = None
    for it in range(1, max_iter + 1):
        J = np.asarray(jacobian(x), dtype=float)
        if mask is not None:
            J = J * np.asarray(mask, dtype=float)
        g = J.T @ r
        if np.max(np.abs(g)) < gtol:
            status, message = CONVERGED, "gradient below tolerance"
            it -= 1
            break
        A = J.T @ J
        scale = np.sqrt(np.diag(A))
        scale[scale == 0] = 1.0
        As = A / np.outer(scale, scale)
        gs = g / scale
        accepted = False
        while mu < 1e20:
            try:
                step_s = np.linalg.solve(As + mu * np.eye(len(As)), -gs)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            delta = step_s / scale
            x_new = update(x, delta)
            r_new = np.asarray(residuals(x_new), dtype=float)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            status, message = CONVERGED, "no decreasing step found"
            break
        rel = (cost - cost_new) / max(cost, np.finfo(float).tiny)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        mu = max(mu / 10.0, 1e-15)
        if rel < ftol:
            status, message = CONVERGED, "relative cost change below tolerance"
            break
        if np.max(np.abs(step_s)) < xtol:
            status, message = CONVERGED, "step below tolerance"
            break

    min_eig = float("nan")
    if J is not None:
        J = np.asarray(jacobian(x), dtype=float)
        if mask is not None:
            J = J[:, np.asarray(mask, dtype=bool)]
        A = J.T @ J
        scale = np.sqrt(np.diag(A))
        scale[scale == 0] = 1.0
        min_eig = float(np.linalg.eigvalsh(A / np.outer(scale, scale))[0])
    return LMResult(x, cost, status, message, it, history, min_eig)
