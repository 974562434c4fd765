"""Trust-region subproblem with linearised constraints.

    maximize   g'x
    subject to 1/2 x'Hx <= eps,   b_k'x + c_k <= 0

``H`` is only reachable through a Hessian-vector product oracle, so ``H^-1``
products come from conjugate gradients. The problem is solved in the dual
``(lam, nu)``; with ``K`` constraints only ``K + 1`` CG solves are needed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from ._qp import solve_nnqp

log = logging.getLogger(__name__)

HVP = Callable[[np.ndarray], np.ndarray]


class CGResult(NamedTuple):
    x: np.ndarray
    residual: float  # relative residual norm
    iterations: int
    converged: bool


def cg_solve(hvp: HVP, rhs, iters: int = 64, tol: float = 1e-10) -> CGResult:
    """Conjugate gradients for ``A x = rhs`` with ``A`` given by ``hvp``."""
    b = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(x, 0.0, 0, True)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for k in range(1, iters + 1):
        ap = np.asarray(hvp(p), dtype=np.float64)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0.0:
            if not np.isfinite(pap):
                raise FloatingPointError("non-finite value in conjugate gradients")
            raise FloatingPointError("operator is not positive definite along a CG direction")
        a = rr / pap
        x = x + a * p
        r = r - a * ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise FloatingPointError("non-finite residual in conjugate gradients")
        if np.sqrt(rr_new) <= tol * bnorm:
            return CGResult(x, np.sqrt(rr_new) / bnorm, k, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(b - hvp(x))) / bnorm
    if res > tol:
        log.debug("CG stopped after %d iterations at relative residual %.3g", iters, res)
    return CGResult(x, res, iters, res <= tol)


@dataclass
class TrustRegionProblem:
    """``g``, constraint rows ``B`` (``K x n``) with offsets ``c``, the ``hvp`` oracle and radius ``eps``."""

    g: np.ndarray
    B: np.ndarray
    c: np.ndarray
    hvp: HVP
    eps: float
    cg_iters: int = 64
    cg_tol: float = 1e-10
    _hinv: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        n = self.g.size
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1, n)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if self.c.size != self.B.shape[0]:
            raise ValueError("one offset per constraint row")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def n_constraints(self) -> int:
        return self.B.shape[0]

    def h_inv(self, key: str, v: np.ndarray) -> np.ndarray:
        if key not in self._hinv:
            self._hinv[key] = cg_solve(self.hvp, v, self.cg_iters, self.cg_tol).x
        return self._hinv[key]

    def hinv_g(self) -> np.ndarray:
        return self.h_inv("g", self.g)

    def hinv_B(self) -> np.ndarray:
        if self.n_constraints == 0:
            return np.zeros((0, self.g.size))
        return np.array([self.h_inv(f"b{k}", self.B[k]) for k in range(self.n_constraints)])

    def gram(self):
        """``q = g'H^-1 g``, ``r = B H^-1 g`` and ``S = B H^-1 B'``."""
        hg, hb = self.hinv_g(), self.hinv_B()
        S = self.B @ hb.T
        return float(self.g @ hg), self.B @ hg, 0.5 * (S + S.T)


@dataclass(frozen=True)
class DualSolution:
    lam: np.ndarray
    nu: float
    q: float
    r: np.ndarray
    S: np.ndarray
    c: np.ndarray
    eps: float

    def value(self) -> float:
        """``g(lam, nu)``; its negative bounds the primal optimum from above."""
        return dual_value(self.lam, self.nu, self.q, self.r, self.S, self.c, self.eps)


@dataclass(frozen=True)
class Feasible:
    witness: np.ndarray


@dataclass(frozen=True)
class Infeasible:
    max_violation: float
    witness: Optional[np.ndarray] = None


def dual_value(lam, nu, q, r, S, c, eps) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    quad = q - 2.0 * r @ lam + lam @ S @ lam
    if nu <= 0.0:
        # limit nu -> 0+: finite only when g - B'lam vanishes
        return float(lam @ c) if quad <= 1e-12 * max(1.0, q) else -np.inf
    return float(-quad / (2.0 * nu) + lam @ c - nu * eps)


def _quad(lam, q, r, S) -> float:
    return max(float(q - 2.0 * r @ lam + lam @ S @ lam), 0.0)


# -- feasibility --------------------------------------------------------------

def _level_qp(S, c, t, eps, tol):
    """Is ``{x : Bx + c <= t}`` within H-norm reach ``sqrt(2 eps)``? Returns (answer, mu)."""
    shifted = c - t
    if np.all(shifted <= 0):
        return True, np.zeros_like(c)

    def dual_above(mu):
        # weak duality: the dual value lower-bounds min 1/2 x'Hx on the level set
        return -0.5 * mu @ S @ mu + shifted @ mu > eps * (1.0 + 1e-9)

    res = solve_nnqp(S, shifted, tol=tol, stop=dual_above)
    if res.stopped and dual_above(res.mu):
        return False, res.mu
    mu = res.mu
    if not np.all(np.isfinite(mu)):
        return False, mu
    # x(mu) = -H^-1 B'mu must satisfy the level constraints and sit inside the region
    slack = shifted - S @ mu
    scale = max(1.0, float(np.max(np.abs(shifted))))
    inside = 0.5 * float(mu @ S @ mu) <= eps * (1.0 + 1e-9)
    return bool(inside and np.max(slack) <= 1e-9 * scale), mu


def feasibility_probe(p: TrustRegionProblem, tol: float = 1e-10) -> Union[Feasible, Infeasible]:
    """Certify whether the linearised constraint set meets the trust region.

    Solves ``min_x max_k (b_k'x + c_k)`` over the trust region by bisection on the
    level ``t``: each level is a min-H-norm QP whose dual gives an early exit.
    """
    K = p.n_constraints
    n = p.g.size
    if K == 0 or np.all(p.c <= 0):
        return Feasible(np.zeros(n))
    _, _, S = p.gram()
    hb = p.hinv_B()
    ok, mu = _level_qp(S, p.c, 0.0, p.eps, tol)
    if ok:
        return Feasible(-hb.T @ mu)
    lo, hi = 0.0, float(np.max(p.c))
    scale = max(1.0, hi)
    best_mu = np.zeros(K)
    while hi - lo > 1e-10 * scale:
        mid = 0.5 * (lo + hi)
        ok, mu = _level_qp(S, p.c, mid, p.eps, tol)
        if ok:
            hi, best_mu = mid, mu
        else:
            lo = mid
    return Infeasible(hi, -hb.T @ best_mu)


# -- dual solve -----------------------------------------------------------------

def _best_lambda(S, r, c, nu, lam0, sweeps=500, tol=1e-13):
    """Projected coordinate ascent for ``max_{lam >= 0} g(lam, nu)``."""
    lam = lam0.copy()
    lin = r + nu * c
    diag = np.diag(S)
    for _ in range(sweeps):
        delta = 0.0
        for k in range(lam.size):
            if diag[k] <= 0:
                continue
            new = max(0.0, (lin[k] - S[k] @ lam + diag[k] * lam[k]) / diag[k])
            delta = max(delta, abs(new - lam[k]))
            lam[k] = new
        if delta <= tol * max(1.0, float(np.max(lam))):
            break
    return lam


def _active_set_polish(q, r, S, c, eps, active):
    """Closed-form ``(lam, nu)`` when the active set and the trust region bind."""
    idx = np.flatnonzero(active)
    lam = np.zeros(r.size)
    if idx.size == 0:
        return lam, np.sqrt(q / (2.0 * eps)) if q > 0 else 0.0
    Sa = S[np.ix_(idx, idx)]
    try:
        Sinv_r = np.linalg.solve(Sa, r[idx])
        Sinv_c = np.linalg.solve(Sa, c[idx])
    except np.linalg.LinAlgError:
        return None
    num = q - r[idx] @ Sinv_r
    den = 2.0 * eps - c[idx] @ Sinv_c
    if num <= 0 or den <= 0:
        return None
    nu = float(np.sqrt(num / den))
    lam[idx] = Sinv_r + nu * Sinv_c
    if np.any(lam < 0):
        return None
    return lam, nu


def solve_dual(p: TrustRegionProblem, max_rounds: int = 500, tol: float = 1e-12):
    """Solve the trust-region subproblem; returns ``(x, DualSolution)`` or :class:`Infeasible`."""
    probe = feasibility_probe(p)
    if isinstance(probe, Infeasible):
        return probe
    q, r, S = p.gram()
    if not q > 0:
        raise ValueError("objective gradient has zero H-norm")
    hg, hb = p.hinv_g(), p.hinv_B()
    K = p.n_constraints
    c, eps = p.c, p.eps
    lam = np.zeros(K)
    nu = np.sqrt(q / (2.0 * eps))
    if K:
        for _ in range(max_rounds):
            lam_new = _best_lambda(S, r, c, nu, lam)
            nu_new = np.sqrt(_quad(lam_new, q, r, S) / (2.0 * eps))
            change = max(float(np.max(np.abs(lam_new - lam))), abs(nu_new - nu))
            lam, nu = lam_new, nu_new
            if change <= tol * max(1.0, nu, float(np.max(lam))) or nu <= 1e-12 * np.sqrt(q):
                break
        active = lam > 1e-10 * max(1.0, float(np.max(lam)))
        polished = _active_set_polish(q, r, S, c, eps, active)
        if polished is not None and dual_value(*polished, q, r, S, c, eps) >= dual_value(lam, nu, q, r, S, c, eps) - 1e-12 * max(1.0, abs(dual_value(lam, nu, q, r, S, c, eps))):
            lam, nu = polished
    if nu > 1e-12 * np.sqrt(q):
        x = (hg - hb.T @ lam) / nu
    else:
        # g lies in the span of the active rows: every point on them is optimal
        active = lam > 0
        x = probe.witness if not active.any() else _min_norm_point(hb, S, c, active)
    # guard the trust region against round-off
    xhx = float(x @ p.hvp(x))
    if xhx > 2.0 * eps:
        x = x * np.sqrt(2.0 * eps / xhx)
    return x, DualSolution(lam, float(nu), q, r, S, c, eps)


def _min_norm_point(hb, S, c, active):
    mu = np.linalg.lstsq(S[np.ix_(active, active)], -c[active], rcond=None)[0]
    return hb[active].T @ mu


# -- line search ------------------------------------------------------------------

@dataclass(frozen=True)
class LineSearchResult:
    params: np.ndarray
    beta: float
    kl: float
    objective: float
    constraints: np.ndarray
    accepted: bool


def line_search(params, direction, evaluate: Callable[[np.ndarray], tuple[float, np.ndarray]],
                kl: Callable[[np.ndarray], float], eps: float, thresholds: Sequence[float],
                max_backtracks: int = 10, kl_factor: float = 1.5, tol: float = 0.0) -> LineSearchResult:
    """Backtrack ``beta = 1, 1/2, 1/4, ...`` along ``direction``.

    ``evaluate(params)`` returns the surrogate objective and constraint values; ``kl(params)``
    the measured KL from the old policy. A step is accepted when the KL is within
    ``kl_factor * eps``, every constraint satisfied at the start stays within its threshold
    plus ``tol``, and the objective improves (required only when all constraints held at the
    start). If nothing is accepted the old parameters are returned.
    """
    params = np.asarray(params, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(direction)):
        raise FloatingPointError("non-finite search direction")
    d = np.asarray(thresholds, dtype=np.float64)
    obj0, cons0 = evaluate(params)
    cons0 = np.asarray(cons0, dtype=np.float64)
    if not np.any(direction):
        return LineSearchResult(params, 1.0, 0.0, obj0, cons0, True)
    satisfied = cons0 <= d
    need_improvement = bool(np.all(satisfied))
    beta = 1.0
    for _ in range(max_backtracks + 1):
        cand = params + beta * direction
        kl_val = float(kl(cand))
        if np.isfinite(kl_val) and kl_val <= kl_factor * eps:
            obj, cons = evaluate(cand)
            cons = np.asarray(cons, dtype=np.float64)
            ok = np.isfinite(obj) and np.all(np.isfinite(cons))
            ok = ok and np.all(cons[satisfied] <= d[satisfied] + tol)
            if ok and (obj > obj0 or not need_improvement):
                return LineSearchResult(cand, beta, kl_val, float(obj), cons, True)
        beta *= 0.5
    log.info("line search found no acceptable step; keeping the old parameters")
    return LineSearchResult(params, 0.0, 0.0, obj0, cons0, False)
