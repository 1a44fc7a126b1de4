"""Levenberg-Marquardt for small weighted least-squares problems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    residuals: np.ndarray
    jac: np.ndarray
    chi2: float
    iterations: int
    grad_norm: float
    converged: bool
    message: str
    chi2_history: list = field(default_factory=list)


def numerical_jacobian(fun, x, scale, step=1e-6, f0=None):
    """Central differences with per-parameter step ``step * scale``.

    Falls back to a one-sided difference where one of the two probes leaves
    the model's domain (e.g. a rate pushed below zero).
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = step * scale[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        try:
            cols.append((fun(xp) - fun(xm)) / (2.0 * h))
            continue
        except (ValueError, ArithmeticError):
            pass
        f0 = fun(x) if f0 is None else f0
        try:
            cols.append((fun(xp) - f0) / h)
        except (ValueError, ArithmeticError):
            cols.append((f0 - fun(xm)) / h)
    return np.column_stack(cols)


def levenberg_marquardt(fun, x0, scale=None, *, lower=None, upper=None, max_iter=200,
                        ftol=1e-12, xtol=1e-12, gtol=1e-12, step=1e-6,
                        lam0=1e-3) -> LMResult:
    """Minimize sum(fun(x)**2), optionally inside the box [lower, upper].

    Marquardt's diagonal scaling of the normal equations; the damping is
    divided by 10 on an accepted step and multiplied by 10 on a rejected one,
    so the recorded chi^2 of accepted iterates never increases.  Trial points
    are projected onto the box.
    """
    x = np.asarray(x0, dtype=float).copy()
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    lower = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full_like(x, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = np.clip(x, lower, upper)
    r = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("residuals are not finite at the initial point")
    chi2 = float(r @ r)
    history = [chi2]
    lam = lam0
    J = numerical_jacobian(fun, x, scale, step)
    message = "maximum number of iterations reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        # components pushing against an active bound do not count
        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        grad_norm = float(np.linalg.norm((g * scale)[free]))
        if grad_norm <= gtol * max(chi2, 1e-300) or chi2 == 0.0:
            converged, message = True, "gradient below tolerance"
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                dx = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + dx, lower, upper)
            dx = x_new - x
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    r_new = np.asarray(fun(x_new), dtype=float)
                    chi2_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            except (ValueError, ArithmeticError):
                r_new = np.full_like(r, np.inf)
                chi2_new = np.inf
            if chi2_new <= chi2:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged, message = True, "no further decrease possible (damping saturated)"
            break
        small_step = np.linalg.norm(dx / scale) <= xtol * (np.linalg.norm(x / scale) + xtol)
        small_drop = chi2 - chi2_new <= ftol * chi2
        x, r, chi2 = x_new, r_new, chi2_new
        history.append(chi2)
        lam = max(lam / 10.0, 1e-12)
        J = numerical_jacobian(fun, x, scale, step)
        if small_step or small_drop:
            converged = True
            message = "step below tolerance" if small_step else "chi^2 decrease below tolerance"
            break
    grad_norm = float(np.linalg.norm((J.T @ r) * scale))
    return LMResult(x, r, J, chi2, it, grad_norm, converged, message, history)


def covariance_from_jacobian(J: np.ndarray, rcond: float = 1e-9):
    """(J^T J)^+ via SVD and the indices of unidentifiable parameters."""
    _, s, Vt = np.linalg.svd(J, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        n = J.shape[1]
        return np.full((n, n), np.inf), list(range(n))
    keep = s > rcond * s[0]
    V = Vt.T
    cov = (V[:, keep] / s[keep] ** 2) @ V[:, keep].T
    null = V[:, ~keep]
    degenerate = sorted({int(i) for i in np.nonzero(np.abs(null) > 0.1)[0]})
    for i in degenerate:
        cov[i, :] = cov[:, i] = np.nan
        cov[i, i] = np.inf
    # SVD cutoff can miss near-null columns of vastly different scale
    col = np.linalg.norm(J, axis=0)
    for i in np.nonzero(col <= rcond * col.max())[0]:
        if i not in degenerate:
            degenerate.append(int(i))
            cov[i, :] = cov[:, i] = np.nan
            cov[i, i] = np.inf
    return cov, sorted(degenerate)
