"""Small non-negative QP: minimize ``1/2 mu'S mu - lin'mu`` over ``mu >= 0``.

Used for the duals of the recovery QP and the feasibility probe. ``S`` is a
``K x K`` PSD Gram matrix with ``K`` small, so dense linear algebra is fine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class QPResult:
    mu: np.ndarray
    iterations: int
    kkt: float
    converged: bool
    stopped: bool = False  # early exit requested by the caller


def objective(S, lin, mu) -> float:
    return float(0.5 * mu @ S @ mu - lin @ mu)


def kkt_residual(S, lin, mu) -> float:
    """Infinity norm of the projected gradient."""
    grad = S @ mu - lin
    pg = np.where(mu > 0, grad, np.minimum(grad, 0.0))
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def _polish(S, lin, mu, tol):
    """Solve the equality system on the current support; keep it if it is a better KKT point."""
    active = mu > tol * max(1.0, float(np.max(mu)) if mu.size else 1.0)
    best, best_kkt = mu, kkt_residual(S, lin, mu)
    for _ in range(len(mu) + 1):
        cand = np.zeros_like(mu)
        if active.any():
            sub = np.linalg.lstsq(S[np.ix_(active, active)], lin[active], rcond=None)[0]
            cand[active] = sub
        if np.any(cand < 0):
            active &= cand > 0
            continue
        kkt = kkt_residual(S, lin, cand)
        if kkt <= best_kkt:
            best, best_kkt = cand, kkt
        # add the most violated inactive coordinate and try again
        grad = S @ cand - lin
        viol = np.where(~active, -grad, 0.0)
        j = int(np.argmax(viol))
        if viol[j] <= 0:
            break
        active[j] = True
    return best, best_kkt


def solve_nnqp(S, lin, tol: float = 1e-8, max_iter: int = 10_000,
               stop: Optional[Callable[[np.ndarray], bool]] = None,
               mu0: Optional[np.ndarray] = None) -> QPResult:
    """Projected gradient with Nesterov momentum and function-value restarts.

    ``tol`` applies to the KKT residual relative to ``max(1, |lin|_inf)``. ``stop(mu)`` is
    checked every iteration and ends the solve early when it returns True.
    """
    S = np.asarray(S, dtype=np.float64)
    lin = np.asarray(lin, dtype=np.float64)
    k = lin.size
    if k == 0:
        return QPResult(np.zeros(0), 0, 0.0, True)
    scale = max(1.0, float(np.max(np.abs(lin))))
    L = float(np.max(np.linalg.eigvalsh(0.5 * (S + S.T))))
    if L <= 0:
        L = 1.0
    mu = np.zeros(k) if mu0 is None else np.maximum(np.asarray(mu0, dtype=np.float64), 0.0)
    y = mu.copy()
    t = 1.0
    f_prev = objective(S, lin, mu)
    it = 0
    for it in range(1, max_iter + 1):
        nxt = np.maximum(y - (S @ y - lin) / L, 0.0)
        f = objective(S, lin, nxt)
        if f > f_prev:  # restart momentum
            t = 1.0
            y = mu.copy()
            nxt = np.maximum(y - (S @ y - lin) / L, 0.0)
            f = objective(S, lin, nxt)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + ((t - 1.0) / t_next) * (nxt - mu)
        mu, t, f_prev = nxt, t_next, f
        if stop is not None and stop(mu):
            return QPResult(mu, it, kkt_residual(S, lin, mu), False, True)
        if not np.all(np.isfinite(mu)) or np.max(mu) > 1e15:
            return QPResult(mu, it, float("inf"), False)
        if it % 10 == 0 or it < 10:
            kkt = kkt_residual(S, lin, mu)
            if kkt <= tol * scale:
                break
            if it % 50 == 0:
                pol, pkkt = _polish(S, lin, mu, 1e-12)
                if pkkt <= tol * scale:
                    mu = pol
                    break
    mu, kkt = _polish(S, lin, mu, 1e-12)
    if stop is not None and stop(mu):
        return QPResult(mu, it, kkt, kkt <= tol * scale, True)
    return QPResult(mu, it, kkt, kkt <= tol * scale)
