"""Feasibility recovery by gradient integration.

When the linearised trust-region problem has no solution, all constraints are
combined into one direction

    g* = argmin 1/2 g'Hg   s.t.   g_k'g + c_k <= 0  for every k,
    c_k = min(sqrt(2 eps g_k'H^-1 g_k), F_k - d_k + zeta),

and the parameters move by ``min(1, sqrt(2 eps / g*'Hg*)) g*``. Truncating ``c_k``
keeps constraints with large gradients from dominating the direction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._qp import solve_nnqp
from .trsolver import HVP, cg_solve


class RecoveryError(RuntimeError):
    """The dual of the recovery QP did not converge."""


@dataclass
class RecoveryProblem:
    """Constraint gradients ``G`` (``K x n``), values ``F``, thresholds ``d``, slack ``zeta``."""

    G: np.ndarray
    F: np.ndarray
    d: np.ndarray
    zeta: float
    hvp: HVP
    eps: float
    cg_iters: int = 64
    cg_tol: float = 1e-10
    hinv_G: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        self.F = np.asarray(self.F, dtype=np.float64).reshape(-1)
        self.d = np.asarray(self.d, dtype=np.float64).reshape(-1)
        if not (self.G.shape[0] == self.F.size == self.d.size):
            raise ValueError("one gradient, value and threshold per constraint")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        self.hinv_G = np.array([cg_solve(self.hvp, gk, self.cg_iters, self.cg_tol).x for gk in self.G])

    @property
    def gram(self) -> np.ndarray:
        S = self.G @ self.hinv_G.T
        return 0.5 * (S + S.T)

    @property
    def gradient_norms(self) -> np.ndarray:
        """``sqrt(g_k'H^-1 g_k)``."""
        return np.sqrt(np.maximum(np.einsum("kn,kn->k", self.G, self.hinv_G), 0.0))

    def offsets(self) -> np.ndarray:
        """Truncated offsets ``c_k``."""
        reach = np.sqrt(2.0 * self.eps) * self.gradient_norms
        return np.minimum(reach, self.F - self.d + self.zeta)


def qp_direction(S, c, hinv_G, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """``g* = -H^-1 G'mu*`` with ``mu*`` minimising ``1/2 mu'S mu - c'mu`` over ``mu >= 0``."""
    c = np.asarray(c, dtype=np.float64)
    n = hinv_G.shape[1]
    if np.all(c <= 0):
        return np.zeros(n)  # zero already satisfies every row
    res = solve_nnqp(S, c, tol=tol, max_iter=max_iter)
    if not res.converged:
        raise RecoveryError(f"recovery dual did not converge: KKT residual {res.kkt:.3g} "
                            f"after {res.iterations} iterations, mu = {res.mu}")
    return -hinv_G.T @ res.mu


def recovery_direction(p: RecoveryProblem) -> np.ndarray:
    return qp_direction(p.gram, p.offsets(), p.hinv_G)


def clip_factor(direction, hvp: HVP, eps: float) -> float:
    """``min(1, sqrt(2 eps / g'Hg))``, or 0 for a (numerically) zero direction."""
    ghg = float(direction @ hvp(direction))
    if ghg <= 1e-12:
        return 0.0
    return min(1.0, float(np.sqrt(2.0 * eps / ghg)))


def recovery_step(params, p: RecoveryProblem, direction: Optional[np.ndarray] = None) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    g = recovery_direction(p) if direction is None else np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite recovery direction")
    scale = clip_factor(g, p.hvp, p.eps)
    if scale == 0.0:
        return params.copy()
    return params + scale * g


# -- convex test problems -------------------------------------------------------

@dataclass
class ConvexProblem:
    """Constraints ``F_k(x) <= d_k`` given by ``constraints(x) -> (F, dF/dx)``."""

    constraints: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    thresholds: np.ndarray
    objective: Optional[Callable[[np.ndarray], float]] = None

    def feasible(self, x) -> bool:
        F, _ = self.constraints(x)
        return bool(np.all(F <= self.thresholds))


def linear_problem(A, b, objective=None) -> ConvexProblem:
    """Constraints ``A x <= b``."""
    A = np.asarray(A, dtype=np.float64)
    return ConvexProblem(lambda x: (A @ x, A.copy()), np.asarray(b, dtype=np.float64), objective)


def toy_objective(x) -> float:
    """Plotting objective of the two-constraint toy."""
    x1, x2 = x
    return float(np.sqrt((np.sqrt(3) * x1 + x2 + 2) ** 2 + 4 * (x1 - np.sqrt(3) * x2 + 4) ** 2))


def toy_problem() -> ConvexProblem:
    """``x1 >= 0`` and ``x1 - 2 x2 <= 0``, written as ``-x1 <= 0`` and ``x1 - 2 x2 <= 0``."""
    return linear_problem([[-1.0, 0.0], [1.0, -2.0]], [0.0, 0.0], toy_objective)


TOY_START = (-2.5, -3.0)


@dataclass(frozen=True)
class TracePoint:
    x: np.ndarray
    F: np.ndarray
    feasible: bool


def _point(problem, x):
    F, _ = problem.constraints(x)
    return TracePoint(np.array(x, dtype=np.float64), np.asarray(F, dtype=np.float64),
                      bool(np.all(F <= problem.thresholds)))


def recover_until_feasible(problem: ConvexProblem, start, eps: float, zeta: float,
                           max_iters: int = 50, hessian=None) -> list[TracePoint]:
    """Iterate recovery steps from ``start``; the trace includes the start point."""
    x = np.asarray(start, dtype=np.float64)
    H = np.eye(x.size) if hessian is None else np.asarray(hessian, dtype=np.float64)
    hvp = lambda v: H @ v  # noqa: E731
    trace = [_point(problem, x)]
    for _ in range(max_iters):
        if trace[-1].feasible:
            break
        F, G = problem.constraints(x)
        p = RecoveryProblem(G, F, problem.thresholds, zeta, hvp, eps)
        x = recovery_step(x, p)
        trace.append(_point(problem, x))
    return trace


def naive_recovery(problem: ConvexProblem, start, eps: float, zeta: float,
                   max_iters: int = 50, hessian=None) -> list[TracePoint]:
    """Baseline: each step reduces only the first violated constraint, with the same truncation and clip."""
    x = np.asarray(start, dtype=np.float64)
    H = np.eye(x.size) if hessian is None else np.asarray(hessian, dtype=np.float64)
    hvp = lambda v: H @ v  # noqa: E731
    trace = [_point(problem, x)]
    for _ in range(max_iters):
        if trace[-1].feasible:
            break
        F, G = problem.constraints(x)
        k = int(np.flatnonzero(F > problem.thresholds)[0])
        p = RecoveryProblem(G[k:k + 1], F[k:k + 1], problem.thresholds[k:k + 1], zeta, hvp, eps)
        x = recovery_step(x, p)
        trace.append(_point(problem, x))
    return trace


def write_trace_csv(path, trace: Sequence[TracePoint]) -> None:
    """Columns ``iter, x1..xn, F_1..F_K, feasible``."""
    n = trace[0].x.size
    K = trace[0].F.size
    with open(path, "w", newline="") as fh:
        fh.write("# sdac-trace v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter"] + [f"x{i + 1}" for i in range(n)] + [f"F_{k + 1}" for k in range(K)] + ["feasible"])
        for i, pt in enumerate(trace):
            w.writerow([i] + [repr(float(v)) for v in pt.x] + [repr(float(v)) for v in pt.F] + [int(pt.feasible)])
