"""Brute-force cross-checks runnable from the command line.

Each check compares a fast routine with a slow independent computation:
dense SLSQP solves for the QP duals, exact enumeration for the TD(lambda)
operator, and central finite differences for the hand-written gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import critic as critic_mod
from . import envs, numgrad, qdist, tdtarget
from .gradinteg import RecoveryProblem, recovery_direction
from .numgrad import NetSpec
from .policy import GaussianPolicy
from .surrogate import ConstraintSpec, SurrogateSample, evaluate
from .trsolver import Infeasible, TrustRegionProblem, solve_dual


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


# -- random dense instances ---------------------------------------------------------

def random_instance(rng: np.random.Generator, n_max: int = 10, k_max: int = 3):
    """``(H, g, B, c, eps)`` with ``H`` SPD and ``K <= n``."""
    n = int(rng.integers(2, n_max + 1))
    K = int(rng.integers(1, min(k_max, n) + 1))
    A = rng.standard_normal((n, n))
    H = A @ A.T / n + 0.1 * np.eye(n)
    g = rng.standard_normal(n)
    B = rng.standard_normal((K, n))
    c = rng.normal(-0.3, 0.5, size=K)
    eps = float(rng.uniform(0.05, 1.0))
    return H, g, B, c, eps


def slsqp_trust_region(H, g, B, c, eps) -> np.ndarray:
    """``argmax g'x`` s.t. ``Bx + c <= 0`` and ``x'Hx / 2 <= eps``."""
    cons = [{"type": "ineq", "fun": lambda x: -(B @ x + c), "jac": lambda x: -B},
            {"type": "ineq", "fun": lambda x: np.array([eps - 0.5 * x @ H @ x]),
             "jac": lambda x: -(H @ x)[None, :]}]
    res = minimize(lambda x: -g @ x, np.zeros(g.size), jac=lambda x: -g, constraints=cons,
                   method="SLSQP", options={"ftol": 1e-15, "maxiter": 1000})
    return res.x


def slsqp_recovery(H, G, c) -> np.ndarray:
    """``argmin g'Hg / 2`` s.t. ``G g + c <= 0``."""
    cons = [{"type": "ineq", "fun": lambda x: -(G @ x + c), "jac": lambda x: -G}]
    res = minimize(lambda x: 0.5 * x @ H @ x, np.zeros(G.shape[1]), jac=lambda x: H @ x,
                   constraints=cons, method="SLSQP", options={"ftol": 1e-15, "maxiter": 1000})
    return res.x


def check_trust_region(n_instances: int = 30, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, solved = 0.0, 0
    for _ in range(n_instances):
        H, g, B, c, eps = random_instance(rng)
        sol = solve_dual(TrustRegionProblem(g, B, c, lambda v, H=H: H @ v, eps))
        if isinstance(sol, Infeasible):
            continue
        x, _ = sol
        ref = slsqp_trust_region(H, g, B, c, eps)
        worst = max(worst, float(np.linalg.norm(x - ref) / max(1.0, np.linalg.norm(ref))))
        solved += 1
    return CheckResult("dense QP: trust-region dual", solved > 0 and worst <= tol,
                       f"{solved} feasible instances, max relative error {worst:.2e}")


def check_recovery(n_instances: int = 30, seed: int = 1, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        H, _, G, _, eps = random_instance(rng)
        F = rng.normal(1.0, 1.0, size=G.shape[0])
        d = np.zeros_like(F)
        p = RecoveryProblem(G, F, d, 0.1, lambda v, H=H: H @ v, eps)
        ref = slsqp_recovery(H, G, p.offsets())
        worst = max(worst, float(np.linalg.norm(recovery_direction(p) - ref) / max(1.0, np.linalg.norm(ref))))
    return CheckResult("dense QP: recovery direction", worst <= tol,
                       f"{n_instances} instances, max relative error {worst:.2e}")


# -- exact operator -----------------------------------------------------------------

def tabular_policies():
    mu = np.array([[0.5, 0.5], [0.3, 0.7], [0.5, 0.5], [0.5, 0.5]])
    pi = np.array([[0.2, 0.8], [0.9, 0.1], [1.0, 0.0], [0.5, 0.5]])
    return mu, pi


def fixed_point_iteration(gamma: float = 0.9, lam: float = 0.5, iterations: int = 50,
                          horizon_cut: int = 100, tol: float = 1e-9):
    """Iterate the exact operator from Dirac(0); returns the W1 history and the certified bound."""
    mdp = envs.absorbing_cmdp(gamma=gamma)
    mu, pi = tabular_policies()
    truth = envs.exact_return_distribution(mdp, pi, horizon_cut=horizon_cut)
    bound = envs.truncation_bound(mdp, "reward", horizon_cut)
    table = [[qdist.WeightedAtomSet.dirac(0.0) for _ in range(mdp.n_actions)] for _ in range(mdp.n_states)]
    history = []
    for _ in range(iterations):
        table = tdtarget.apply_operator_exact(mdp, table, mu, pi, lam, tol=tol)
        history.append(tdtarget.sup_distance(table, truth))
    return np.array(history), bound


def random_table(rng, n_states: int, n_actions: int, n_atoms: int = 4):
    return [[qdist.WeightedAtomSet(rng.normal(0.0, 2.0, n_atoms), rng.dirichlet(np.ones(n_atoms)))
             for _ in range(n_actions)] for _ in range(n_states)]


def contraction_ratios(n_pairs: int, gamma: float, p: int, lam: float = 0.5, seed: int = 0):
    """``(before, after)`` sup distances for random table pairs on the 4-state CMDP."""
    rng = np.random.default_rng(seed)
    mdp = envs.absorbing_cmdp(gamma=gamma)
    mu, pi = tabular_policies()
    out = []
    for _ in range(n_pairs):
        t1, t2 = random_table(rng, 4, 2), random_table(rng, 4, 2)
        before = tdtarget.sup_distance(t1, t2, p)
        o1 = tdtarget.apply_operator_exact(mdp, t1, mu, pi, lam)
        o2 = tdtarget.apply_operator_exact(mdp, t2, mu, pi, lam)
        out.append((before, tdtarget.sup_distance(o1, o2, p)))
    return out


def check_fixed_point() -> CheckResult:
    hist, bound = fixed_point_iteration()
    return CheckResult("exact operator: fixed point", bool(hist[-1] <= 2.0 * bound),
                       f"W1 after {hist.size} iterations {hist[-1]:.3e}, 2x truncation bound {2 * bound:.3e}")


def check_contraction(n_pairs: int = 5) -> CheckResult:
    worst = -np.inf
    for gamma in (0.5, 0.9):
        for p in (1, 2):
            for before, after in contraction_ratios(n_pairs, gamma, p):
                worst = max(worst, after - gamma ** (1.0 / p) * before)
    return CheckResult("exact operator: contraction", worst <= 1e-6,
                       f"max excess over gamma^(1/p) * before: {worst:.2e}")


# -- finite differences -------------------------------------------------------------

def _central(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, float(np.max(np.abs(b)))))


def check_finite_differences(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs = {}

    spec = NetSpec(3, (5, 4), 2, "tanh")
    w = numgrad.init_params(spec, rng)
    x = rng.standard_normal((6, 3))
    cot = rng.standard_normal((6, 2))
    errs["mlp gradient"] = (_rel(numgrad.gradient(spec, w, x, cot),
                                 _central(lambda p: np.sum(cot * numgrad.forward(spec, p, x)), w, 1e-6)), 1e-6)

    pol = GaussianPolicy(3, 2, (6,))
    th = pol.init_params(rng, out_scale=0.5)
    s = rng.standard_normal((5, 3))
    noise = rng.standard_normal((5, 2))
    errs["policy log-prob gradient"] = (
        _rel(pol.sample_vjp(th, s, noise, np.zeros((5, 2)), np.ones(5)),
             _central(lambda p: np.sum(pol.sample(p, s, noise).log_prob), th, 1e-6)), 1e-5)
    th2 = th + 0.05 * rng.standard_normal(th.size)
    errs["KL gradient"] = (_rel(pol.kl_grad(th, th2, s), _central(lambda p: pol.kl(th, p, s), th2, 1e-6)), 1e-5)
    v = rng.standard_normal(th.size)
    h = 1e-5
    fd_hvp = (pol.kl_grad(th, th + h * v, s) - pol.kl_grad(th, th - h * v, s)) / (2 * h)
    errs["KL Hessian-vector product"] = (_rel(pol.kl_hvp(th, s, v, damping=0.0), fd_hvp), 1e-4)

    rc = critic_mod.make_critic(3, 2, 5, rng, (6,), 1, activation="tanh")
    cc = critic_mod.make_critic(3, 2, 5, rng, (6,), 1, activation="tanh")
    sample = SurrogateSample(s, noise, rng.standard_normal((4, 3)), rng.standard_normal((4, 2)))
    specs = [ConstraintSpec(1.0, 0.5)]

    def rep(p):
        return evaluate(sample, pol, p, th, rc, [cc], specs, 0.1, 0.9)

    r = rep(th2)
    errs["surrogate objective gradient"] = (_rel(r.objective_grad, _central(lambda p: rep(p).objective, th2, 1e-6)), 1e-3)
    errs["surrogate constraint gradient"] = (_rel(r.grads[0], _central(lambda p: rep(p).values[0], th2, 1e-6)), 1e-3)

    atoms = rng.normal(size=4)
    target = qdist.QuantileDistribution.from_unsorted(rng.normal(size=6))
    grad = critic_mod.quantile_loss(atoms, target)[1]
    fd = _central(lambda a: critic_mod.quantile_loss(a, target)[0], atoms, 1e-7)
    errs["quantile loss subgradient"] = (_rel(grad, fd), 1e-6)

    bad = {k: e for k, (e, tol) in errs.items() if not e <= tol}
    detail = "; ".join(f"{k} {e:.1e}" for k, (e, _) in errs.items())
    return CheckResult("finite differences", not bad, detail)


def run_all() -> list[CheckResult]:
    return [check_trust_region(), check_recovery(), check_fixed_point(), check_contraction(),
            check_finite_differences()]
