"""Objective and mean-std constraint surrogates estimated from buffer states.

For a candidate policy ``pi'`` and the snapshot ``pi`` whose critics are frozen:

    J(pi')   = V0 + 1/(1-g)   * mean_s [Q_R(s, a') - beta log pi'(a'|s) - (same at the snapshot)]
    J_C(pi') = C0 + 1/(1-g)   * mean_s [Q_C(s, a') - Q_C(s, a)]
    J_S(pi') = S0 + 1/(1-g^2) * mean_s [S_C(s, a') - S_C(s, a)]
    F(pi')   = J_C + coef(alpha) * sqrt(max(0, J_S - J_C^2))

``a' = tanh(mean' + std' * noise)`` and ``a`` uses the snapshot with the same noise,
so every surrogate equals its start-state baseline at ``pi' = pi``. The baselines
``V0, C0, S0`` average the snapshot critics over episode-start states.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from . import critic as critic_mod
from .critic import CriticEnsemble
from .policy import GaussianPolicy


def risk_coefficient(alpha: float) -> float:
    """``phi(Phi^-1(alpha)) / alpha``; zero at ``alpha = 1``."""
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1.0:
        return 0.0
    return float(norm.pdf(norm.ppf(alpha)) / alpha)


@dataclass(frozen=True)
class ConstraintSpec:
    threshold: float
    alpha: float = 1.0
    channel: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    @property
    def coefficient(self) -> float:
        return risk_coefficient(self.alpha)


@dataclass(frozen=True)
class SurrogateSample:
    """Buffer states with their reparameterisation noise, plus episode-start states."""

    states: np.ndarray
    noise: np.ndarray
    start_states: np.ndarray
    start_noise: np.ndarray

    def __post_init__(self):
        if np.asarray(self.states).shape[0] == 0:
            raise ValueError("empty state sample")
        if np.asarray(self.start_states).shape[0] == 0:
            raise ValueError("empty start-state sample")


@dataclass(frozen=True)
class SurrogateReport:
    objective: float
    objective_grad: np.ndarray
    values: np.ndarray        # F_k
    residuals: np.ndarray     # F_k - d_k
    grads: np.ndarray         # (K, n) rows dF_k/dparams
    mean_costs: np.ndarray    # J_Ck
    second_moments: np.ndarray  # J_Sk
    q_mean: float             # mean_s Q_R(s, a') before scaling and centring


def mean_std(jc: float, js: float, coef: float):
    """``F = jc + coef sqrt(max(0, js - jc^2))`` with ``dF/djc`` and ``dF/djs``."""
    var = js - jc * jc
    if coef == 0.0 or var <= 0.0:
        return jc, 1.0, 0.0
    sd = np.sqrt(var)
    return float(jc + coef * sd), float(1.0 - coef * jc / sd), float(0.5 * coef / sd)


def evaluate(sample: SurrogateSample, policy: GaussianPolicy, params, old_params,
             reward_critic: CriticEnsemble, cost_critics: Sequence[CriticEnsemble],
             specs: Sequence[ConstraintSpec], beta: float, gamma: float) -> SurrogateReport:
    if len(cost_critics) != len(specs):
        raise ValueError("one cost critic per constraint")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    states = np.asarray(sample.states, dtype=np.float64)
    noise = np.asarray(sample.noise, dtype=np.float64)
    n = states.shape[0]
    new = policy.sample(params, states, noise)
    old = policy.sample(old_params, states, noise)
    start_act = policy.sample(old_params, sample.start_states, sample.start_noise)
    s1 = 1.0 / (1.0 - gamma)
    s2 = 1.0 / (1.0 - gamma * gamma)

    # objective
    q_new, _, dq_new, _ = critic_mod.moments_with_action_grad(reward_critic, states, new.action)
    q_old = critic_mod.q_value(reward_critic, states, old.action)
    v0 = np.mean(critic_mod.q_value(reward_critic, sample.start_states, start_act.action)
                 - beta * start_act.log_prob)
    soft_new = q_new - beta * new.log_prob
    soft_old = q_old - beta * old.log_prob
    objective = float(v0 + s1 * np.mean(soft_new - soft_old))
    obj_grad = policy.sample_vjp(params, states, noise, dq_new * (s1 / n), np.full(n, -beta * s1 / n))

    K = len(specs)
    values, jcs, jss = np.empty(K), np.empty(K), np.empty(K)
    grads = np.empty((K, obj_grad.size))
    for k, (c, spec) in enumerate(zip(cost_critics, specs)):
        qc, sc, dqc, dsc = critic_mod.moments_with_action_grad(c, states, new.action)
        qc_old = critic_mod.q_value(c, states, old.action)
        sc_old = critic_mod.s_value(c, states, old.action)
        c0 = np.mean(critic_mod.q_value(c, sample.start_states, start_act.action))
        sq0 = np.mean(critic_mod.s_value(c, sample.start_states, start_act.action))
        jc = float(c0 + s1 * np.mean(qc - qc_old))
        js = float(sq0 + s2 * np.mean(sc - sc_old))
        f, dfc, dfs = mean_std(jc, js, spec.coefficient)
        cot = (dfc * s1 / n) * dqc + (dfs * s2 / n) * dsc
        grads[k] = policy.sample_vjp(params, states, noise, cot, np.zeros(n))
        values[k], jcs[k], jss[k] = f, jc, js
    thresholds = np.array([s.threshold for s in specs])
    report = SurrogateReport(objective, obj_grad, values, values - thresholds, grads, jcs, jss,
                             float(np.mean(q_new)))
    if not (np.isfinite(objective) and np.all(np.isfinite(obj_grad)) and np.all(np.isfinite(values))
            and np.all(np.isfinite(grads))):
        raise FloatingPointError("non-finite surrogate value or gradient")
    return report
