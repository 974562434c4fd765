"""TD(lambda) target distributions.

:func:`td_lambda_targets` runs the backward recursion over one trajectory:
the one-step target (weight ``1 - lam``) is mixed with the shifted running
target (weight ``w_tot``), projected to ``m_proj`` equal-weight atoms, and the
result is shifted by the previous reward to become the next running target.

:func:`apply_operator_exact` is the non-sampled operator on a tabular CMDP,
used as an oracle for contraction and fixed-point checks.
"""
from __future__ import annotations

import math
from typing import Protocol, Sequence

import numpy as np

from . import _kernels
from .envs import Channel, TabularCMDP, Transition, _advance, _first_step, _merge
from .qdist import QuantileDistribution, WeightedAtomSet, as_weighted, wasserstein


class TargetPolicy(Protocol):
    def prob(self, state, action) -> float: ...

    def sample(self, state, rng: np.random.Generator): ...


class AtomCritic(Protocol):
    def atoms(self, state, action) -> np.ndarray: ...


class TabularPolicy:
    """Action table ``pi[s, a]`` for integer states."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def prob(self, state, action) -> float:
        return float(self.table[int(np.ravel(state)[0]), int(np.ravel(action)[0])])

    def sample(self, state, rng):
        row = self.table[int(np.ravel(state)[0])]
        return np.array([rng.choice(row.size, p=row)])


class TableCritic:
    """Atom arrays looked up by integer ``(s, a)``."""

    def __init__(self, table):
        self.table = table

    def atoms(self, state, action) -> np.ndarray:
        return np.asarray(self.table[int(np.ravel(state)[0])][int(np.ravel(action)[0])], dtype=np.float64)


def horizon_for(lam: float, tol: float = 1e-8) -> int:
    """Smallest ``n`` with ``lam ** n < tol``."""
    if not 0.0 <= lam < 1.0:
        raise ValueError("a finite horizon needs 0 <= lam < 1")
    if lam == 0.0:
        return 1
    return int(math.floor(math.log(tol) / math.log(lam))) + 1


def importance_ratios(target_logp, behavior_logp, ratio_cap: float = 1e6) -> np.ndarray:
    ratios = np.exp(np.asarray(target_logp, dtype=np.float64) - np.asarray(behavior_logp, dtype=np.float64))
    if not np.all(np.isfinite(ratios)):
        raise FloatingPointError("non-finite importance ratio")
    return np.minimum(ratios, ratio_cap)


def td_lambda_targets(rewards, dones, ratios, boot_atoms, gamma: float, lam: float,
                      m_proj: int) -> np.ndarray:
    """Targets for one trajectory as an array of shape ``(T, m_proj)``.

    ``boot_atoms[t]`` holds the critic atoms at ``(s_{t+1}, a'_{t+1})`` with
    ``a'`` drawn from the current policy; ``ratios[t]`` is ``pi(a_t|s_t) / mu(a_t|s_t)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if m_proj < 1:
        raise ValueError("m_proj must be >= 1")
    rewards = np.asarray(rewards, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    n = rewards.shape[0]
    boot = np.asarray(boot_atoms, dtype=np.float64).reshape(n, -1)
    if ratios.shape != (n,) or np.asarray(dones).shape != (n,):
        raise ValueError("rewards, dones and ratios must share one length")
    if np.any(ratios < 0) or not np.all(np.isfinite(ratios)):
        raise ValueError("ratios must be finite and non-negative")
    return _kernels.td_lambda_targets(rewards, np.asarray(dones, dtype=np.float64), ratios, boot,
                                      gamma, lam, int(m_proj))


def trace_normalizers(dones, ratios, lam: float) -> np.ndarray:
    """Total mixture weight ``N_t`` that the recursion divides by at each step.

    ``N_T = 1`` and ``N_{t-1} = (1 - lam) + lam * ratio_t * (1 - d_{t-1}) * N_t``. A target
    scaled by ``N_t`` is the unnormalised importance-weighted mixture, whose expectation
    is the exact operator.
    """
    dones = np.asarray(dones, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    n = dones.shape[0]
    out = np.empty(n)
    if n == 0:
        return out
    out[-1] = 1.0
    for t in range(n - 1, 0, -1):
        out[t - 1] = (1.0 - lam) + lam * ratios[t] * (1.0 - dones[t - 1]) * out[t]
    return out


def build_targets(traj: Sequence[Transition], policy: TargetPolicy, critic: AtomCritic,
                  gamma: float, lam: float, m_proj: int, rng: np.random.Generator,
                  ratio_cap: float = 1e6, channel: Channel = "reward",
                  n_action_samples: int = 1) -> list[QuantileDistribution]:
    """TD(lambda) targets for every step of ``traj``, one bootstrap action per step by default.

    With ``n_action_samples > 1`` the bootstrap pools the atoms of several sampled actions.
    """
    if not traj:
        return []
    rewards = np.array([tr.reward if channel == "reward" else tr.costs[int(channel)] for tr in traj])
    dones = np.array([float(tr.done) for tr in traj])
    ratios = []
    for tr in traj:
        if not tr.behavior_prob > 0:
            raise ValueError("behavior probability must be positive")
        ratios.append(policy.prob(tr.state, tr.action) / tr.behavior_prob)
    ratios = np.array(ratios)
    if not np.all(np.isfinite(ratios)):
        raise FloatingPointError("non-finite importance ratio")
    ratios = np.minimum(ratios, ratio_cap)
    boot = []
    for tr in traj:
        acts = [policy.sample(tr.next_state, rng) for _ in range(n_action_samples)]
        boot.append(np.concatenate([np.asarray(critic.atoms(tr.next_state, a), dtype=np.float64)
                                    for a in acts]))
    out = td_lambda_targets(rewards, dones, ratios, np.array(boot), gamma, lam, m_proj)
    return [QuantileDistribution(row) for row in out]


# -- exact operator on a tabular CMDP -----------------------------------------

def apply_operator_exact(mdp: TabularCMDP, dists, mu, pi, lam: float, gamma: float | None = None,
                         horizon_cut: int | None = None, channel: Channel = "reward",
                         budget: int = 10 ** 7, tol: float = 1e-12):
    """Exact TD(lambda) distributional operator, truncated to ``horizon_cut`` terms and renormalised.

    Term ``i`` pushes ``dists[s_{i+1}][a']`` through ``z -> sum_{t<=i} gamma^t r_t + gamma^{i+1} z``,
    weighted by ``(1 - lam) lam^i``, the behaviour path probability, the importance product over
    steps ``1..i`` and ``pi(a'|s_{i+1})``.
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    if not 0.0 <= lam < 1.0:
        raise ValueError("the exact operator needs 0 <= lam < 1")
    horizon_cut = horizon_for(lam) if horizon_cut is None else int(horizon_cut)
    mu = np.asarray(mu, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any((mu == 0) & (pi > 0)):
        raise ValueError("behaviour policy must cover the target policy")
    eta = np.divide(pi, mu, out=np.zeros_like(pi), where=mu > 0)
    step_w = mu * eta
    R = mdp.channel_table(channel)
    out = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            layers = _first_step(mdp, R, s, a)
            pos, wts = [], []
            work = 0
            for i in range(horizon_cut):
                coef = (1.0 - lam) * lam ** i
                scale = gamma ** (i + 1)
                for s1, (g, w) in enumerate(layers):
                    if g.size == 0:
                        continue
                    for a1 in range(mdp.n_actions):
                        if pi[s1, a1] == 0.0:
                            continue
                        d = as_weighted(dists[s1][a1])
                        pos.append((g[:, None] + scale * d.positions[None, :]).ravel())
                        wts.append((w[:, None] * (coef * pi[s1, a1]) * (d.weights / d.weights.sum())[None, :]).ravel())
                        work += pos[-1].size
                if work > budget:
                    raise RuntimeError(f"enumeration budget of {budget} entries exceeded")
                if i + 1 < horizon_cut:
                    layers = _advance(layers, mdp.P, R, step_w, gamma ** (i + 1), tol)
            p, w = _merge(pos, wts, tol)
            row.append(WeightedAtomSet(p, w / w.sum()))
        out.append(row)
    return out


def sup_distance(table1, table2, p: int = 1) -> float:
    return max(wasserstein(d1, d2, p) for r1, r2 in zip(table1, table2) for d1, d2 in zip(r1, r2))
