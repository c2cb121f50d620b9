"""Levenberg-Marquardt damped least squares with a finite-difference Jacobian.

Steps are accepted only when they lower the cost, so the accepted cost
history is non-increasing. Box bounds are enforced by clipping trial points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LsqError(RuntimeError):
    pass


@dataclass
class LsqResult:
    x: np.ndarray
    cost: float                 # 0.5 * ||r||^2
    residuals: np.ndarray
    jac: np.ndarray
    n_iter: int
    n_fev: int
    converged: bool
    message: str
    history: list = field(default_factory=list)   # cost after each accepted step

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residuals))

    def covariance(self, rcond: float = 1e-10) -> np.ndarray:
        """sigma^2 (J^T J)^-1 with sigma^2 from the residual sum of squares.

        Built from the SVD of J; parameters touching a direction whose singular
        value falls below ``rcond`` times the largest get infinite variance.
        """
        m, n = self.jac.shape
        dof = max(m - n, 1)
        s2 = 2.0 * self.cost / dof
        _, sv, vt = np.linalg.svd(self.jac, full_matrices=False)
        keep = sv > rcond * (sv[0] if sv.size else 0.0)
        v = vt.T
        cov = s2 * (v[:, keep] / sv[keep] ** 2) @ v[:, keep].T
        if not np.all(keep):
            weak = np.any(np.abs(v[:, ~keep]) > 1e-6, axis=1)
            cov[weak, :] = np.inf
            cov[:, weak] = np.inf
        return cov


def numerical_jacobian(fun, x, r0=None, rel_step=1e-7, central=False, lower=None, upper=None):
    x = np.asarray(x, dtype=float)
    if r0 is None and not central:
        r0 = fun(x)
    cols = []
    for k in range(x.size):
        h = rel_step * max(abs(x[k]), 1.0)
        xp = x.copy()
        xp[k] += h
        if upper is not None and xp[k] > upper[k]:
            h = -h
            xp[k] = x[k] + h
        if central:
            xm = x.copy()
            xm[k] -= h
            cols.append((fun(xp) - fun(xm)) / (2 * h))
        else:
            cols.append((fun(xp) - r0) / h)
    return np.column_stack(cols)


def damped_least_squares(fun, x0, lower=None, upper=None, *, max_iter: int = 200,
                         ftol: float = 1e-14, xtol: float = 1e-12, gtol: float = 1e-14,
                         rel_step: float = 1e-7, central: bool = False,
                         damping: float = 1e-3) -> LsqResult:
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if np.any(lower >= upper):
        raise LsqError("bounds must satisfy lower < upper")
    x = np.clip(x, lower, upper)

    r = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise LsqError("residuals are not finite at the initial point")
    nfev = 1
    cost = 0.5 * float(r @ r)
    history = [cost]
    jac = numerical_jacobian(fun, x, r, rel_step, central, lower, upper)
    nfev += n * (2 if central else 1)
    lam = damping
    converged, message = False, "maximum iterations reached"

    it = 0
    for it in range(1, max_iter + 1):
        a = jac.T @ jac
        g = jac.T @ r
        if np.max(np.abs(g)) <= gtol * max(cost, 1e-300) ** 0.5 or cost == 0.0:
            converged, message = True, "gradient below tolerance"
            break
        diag = np.maximum(np.diag(a), 1e-12 * max(np.max(np.diag(a)), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            x_new = np.clip(x + step, lower, upper)
            r_new = np.asarray(fun(x_new), dtype=float)
            nfev += 1
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            converged, message = True, "no further decrease possible"
            break
        dx = np.linalg.norm(x_new - x)
        rel_drop = (cost - cost_new) / max(cost, 1e-300)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-15)
        jac = numerical_jacobian(fun, x, r, rel_step, central, lower, upper)
        nfev += n * (2 if central else 1)
        if rel_drop < ftol or dx <= xtol * (np.linalg.norm(x) + xtol):
            converged, message = True, "step or cost change below tolerance"
            break

    return LsqResult(x, cost, r, jac, it, nfev, converged, message, history)
