"""Limited-memory BFGS with Armijo backtracking.

Kept in-house rather than delegating to scipy so that the stopping rule
(sup-norm of the gradient), rejection of non-finite trial points and the
monotone objective trace are exactly what :func:`caseval.training.fit`
promises.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def _two_loop(g: np.ndarray, memory: deque, h0: np.ndarray | None) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if h0 is not None:
        q = h0 @ q
    elif memory:
        s, y, _ = memory[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def inverse_hessian_guess(fun: Objective, x: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Positive-definite inverse of a finite-difference Hessian at ``x``.

    Eigenvalues are replaced by their magnitude and floored relative to the
    largest, so the result is usable as the initial L-BFGS metric even where
    the objective is not convex.
    """
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        h = 1e-4 * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (fun(x + e)[1] - fun(x - e)[1]) / (2 * h)
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.abs(w)
    w = np.maximum(w, floor * max(w.max(initial=0.0), 1e-12))
    return (V / w) @ V.T


def minimize(
    fun: Objective,
    x0: np.ndarray,
    max_iter: int = 500,
    gtol: float = 1e-6,
    memory: int = 10,
    c1: float = 1e-4,
    max_backtracks: int = 60,
    stall_iters: int = 20,
    h0: np.ndarray | None = None,
) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) starting from ``x0``.

    ``h0`` is an optional initial inverse-Hessian matrix; without it the usual
    scalar scaling from the latest curvature pair is used. When ``h0`` is given
    and progress stalls, it is recomputed once at the current point: close to
    the optimum that step is nearly Newton and reduces the gradient even where
    the objective can no longer resolve the change.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return LbfgsResult(x, f, g, 0, False, "non-finite objective at starting point", [f])
    mem: deque = deque(maxlen=memory)
    trace = [f]
    stalled = 0
    best_gnorm = np.max(np.abs(g), initial=0.0)
    refreshed = h0 is None
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) <= gtol:
            return LbfgsResult(x, f, g, it - 1, True, "gradient tolerance reached", trace)

        d = _two_loop(g, mem, h0)
        slope = np.dot(g, d)
        if not slope < 0:
            mem.clear()
            d = -g
            slope = -np.dot(g, g)
        t = 1.0 if (mem or h0 is not None) else min(1.0, 1.0 / np.linalg.norm(g))

        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
                t *= 0.5
                continue
            if f_new <= f + c1 * t * slope:
                accepted = True
                break
            # predicted decrease below float resolution of f: the value can no
            # longer rank the points, so accept when the gradient shrinks
            noise = 1e-14 * max(1.0, abs(f))
            flat = abs(t * slope) <= 1e3 * noise and f_new <= f + noise
            if flat and np.max(np.abs(g_new)) < np.max(np.abs(g)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if mem:
                mem.clear()
                continue
            if not refreshed:
                h0, refreshed = inverse_hessian_guess(fun, x), True
                continue
            return LbfgsResult(x, f, g, it, False, "line search failed", trace)

        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            mem.append((s, y, 1.0 / sy))

        gnorm = np.max(np.abs(g_new))
        if f - f_new <= 1e-15 * max(1.0, abs(f)) and gnorm >= best_gnorm:
            stalled += 1
        else:
            stalled = 0
        best_gnorm = min(best_gnorm, gnorm)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if stalled >= stall_iters and not refreshed:
            h0, refreshed, stalled = inverse_hessian_guess(fun, x), True, 0
            mem.clear()
        elif stalled >= stall_iters:
            converged = np.max(np.abs(g)) <= gtol
            return LbfgsResult(x, f, g, it, converged, "no further progress", trace)

    converged = np.max(np.abs(g), initial=0.0) <= gtol
    return LbfgsResult(x, f, g, max_iter, converged, "iteration limit reached", trace)
