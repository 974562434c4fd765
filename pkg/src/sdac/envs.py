"""Seeded desk-scale environments and exact return-distribution oracles.

* :class:`TabularCMDP` - finite CMDP with transition/reward/cost tables.
* :class:`PointMassTask` - 2-D point mass reaching goals, with a hazard-proximity
  cost and a speed-limit cost.
* :class:`TwoStateRewardToy` - two states visited uniformly with Gaussian rewards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .qdist import WeightedAtomSet, merge_close

log = logging.getLogger(__name__)

Channel = Union[str, int]


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    behavior_prob: float
    reward: float
    costs: np.ndarray
    done: bool
    next_state: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        if not self.behavior_prob > 0:
            raise ValueError("behavior probability must be positive")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- tabular ----------------------------------------------------------------

class TabularCMDP:
    """Finite CMDP. ``rewards`` and ``costs[k]`` broadcast to ``(S, A, S')``."""

    def __init__(self, P, rewards, costs=(), rho=None, gamma: float = 0.9,
                 episode_length: Optional[int] = None, terminal_states: Sequence[int] = ()):
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("P must have shape (S, A, S)")
        n_s, n_a, _ = P.shape
        if n_s > 64 or n_a > 64:
            raise ValueError("tabular CMDP limited to 64 states and 64 actions")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be distributions")
        self.P = P
        self.rewards = np.broadcast_to(self._expand(rewards, n_s, n_a), P.shape).astype(np.float64)
        self.costs = np.array([np.broadcast_to(self._expand(c, n_s, n_a), P.shape) for c in costs],
                              dtype=np.float64).reshape(len(costs), *P.shape)
        if np.any(self.costs < 0):
            raise ValueError("costs must be non-negative")
        self.rho = np.full(n_s, 1.0 / n_s) if rho is None else np.asarray(rho, dtype=np.float64)
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.gamma = float(gamma)
        self.episode_length = episode_length
        self.terminal_states = frozenset(int(s) for s in terminal_states)
        self._s = 0
        self._t = 0

    @staticmethod
    def _expand(table, n_s, n_a):
        t = np.asarray(table, dtype=np.float64)
        if t.ndim == 1:  # state-only: reward for the state being left
            return t[:, None, None]
        if t.ndim == 2:
            return t[:, :, None]
        return t

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def n_costs(self) -> int:
        return self.costs.shape[0]

    def channel_table(self, channel: Channel) -> np.ndarray:
        if channel == "reward":
            return self.rewards
        return self.costs[int(channel)]

    def reset(self, rng: np.random.Generator) -> int:
        self._s = int(rng.choice(self.n_states, p=self.rho))
        self._t = 0
        return self._s

    def step(self, action: int, rng: np.random.Generator, behavior_prob: float = 1.0) -> Transition:
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {a} out of range")
        s = self._s
        s2 = int(rng.choice(self.n_states, p=self.P[s, a]))
        self._t += 1
        done = s2 in self.terminal_states
        truncated = self.episode_length is not None and self._t >= self.episode_length and not done
        tr = Transition(np.array([s]), np.array([a]), behavior_prob, float(self.rewards[s, a, s2]),
                        self.costs[:, s, a, s2].copy(), bool(done), np.array([s2]), bool(truncated))
        self._s = s2
        return tr


def chain_cmdp(rewards=(1.0, 2.0, 3.0), gamma: float = 0.9) -> TabularCMDP:
    """Deterministic chain ``0 -> 1 -> ... -> n-1 -> n-1``; one action, reward for the state left."""
    n = len(rewards)
    P = np.zeros((n, 1, n))
    for s in range(n):
        P[s, 0, min(s + 1, n - 1)] = 1.0
    return TabularCMDP(P, np.asarray(rewards, dtype=np.float64), gamma=gamma)


def absorbing_cmdp(gamma: float = 0.9) -> TabularCMDP:
    """Four states: two transient, a zero-reward sink and a rewarding sink.

    Both transient states pay the same reward and cost, so a return depends only on
    the absorption time and the sink and the enumeration grows linearly with the horizon.
    """
    P = np.zeros((4, 2, 4))
    # state 0: action 0 tends to stay, action 1 moves on
    P[0, 0] = [0.6, 0.3, 0.1, 0.0]
    P[0, 1] = [0.1, 0.6, 0.0, 0.3]
    # state 1
    P[1, 0] = [0.0, 0.5, 0.2, 0.3]
    P[1, 1] = [0.2, 0.2, 0.0, 0.6]
    P[2, :, 2] = 1.0
    P[3, :, 3] = 1.0
    rewards = np.array([-0.2, -0.2, 0.0, 1.0])
    costs = [np.array([0.5, 0.5, 0.0, 1.0])]
    return TabularCMDP(P, rewards, costs, rho=np.array([0.5, 0.5, 0.0, 0.0]), gamma=gamma)


def _advance(layers, P, R, action_w, discount, tol):
    """Push ``[(G, w)]`` per state one step forward under per-state action weights."""
    n_s, n_a, _ = P.shape
    parts = [([], []) for _ in range(n_s)]
    for s, (g, w) in enumerate(layers):
        if g.size == 0:
            continue
        for a in range(n_a):
            if action_w[s, a] == 0.0:
                continue
            for s2 in np.flatnonzero(P[s, a]):
                parts[s2][0].append(g + discount * R[s, a, s2])
                parts[s2][1].append(w * (action_w[s, a] * P[s, a, s2]))
    return [_merge(pg, pw, tol) for pg, pw in parts]


def _merge(pos_list, w_list, tol):
    if not pos_list:
        return np.empty(0), np.empty(0)
    merged = merge_close(WeightedAtomSet(np.concatenate(pos_list), np.concatenate(w_list)), tol)
    keep = merged.weights > 0
    return np.asarray(merged.positions[keep]), np.asarray(merged.weights[keep])


def _first_step(mdp: TabularCMDP, R, s, a):
    layers = []
    for s2 in range(mdp.n_states):
        p = mdp.P[s, a, s2]
        layers.append((np.array([R[s, a, s2]]), np.array([p])) if p > 0 else (np.empty(0), np.empty(0)))
    return layers


def _count(layers):
    return sum(g.size for g, _ in layers)


def truncation_bound(mdp: TabularCMDP, channel: Channel, horizon_cut: int) -> float:
    """W1 bound on the return mass beyond ``horizon_cut`` steps."""
    r_max = float(np.max(np.abs(mdp.channel_table(channel))))
    return mdp.gamma ** horizon_cut * r_max / (1.0 - mdp.gamma)


def exact_return_distribution(mdp: TabularCMDP, pi, channel: Channel = "reward",
                              horizon_cut: int = 100, budget: int = 10 ** 7, tol: float = 1e-12):
    """Distribution of ``sum_{t < horizon_cut} gamma^t C_t`` from every ``(s, a)``, by enumeration.

    Paths sharing a state and (to ``tol``) a partial return are merged. Returns
    ``table[s][a]`` of :class:`WeightedAtomSet`; see :func:`truncation_bound` for the tail.
    """
    pi = np.asarray(pi, dtype=np.float64)
    R = mdp.channel_table(channel)
    table = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            layers = _first_step(mdp, R, s, a)
            work = _count(layers)
            for t in range(1, horizon_cut):
                layers = _advance(layers, mdp.P, R, pi, mdp.gamma ** t, tol)
                work += _count(layers)
                if work > budget:
                    raise RuntimeError(f"enumeration budget of {budget} paths exceeded")
            g = [x for x, _ in layers]
            w = [y for _, y in layers]
            pos, wts = _merge(g, w, tol)
            row.append(WeightedAtomSet(pos, wts))
        table.append(row)
    return table


# -- point mass ---------------------------------------------------------------

@dataclass
class PointMassTask:
    """Point mass pushed by a bounded force toward goals that respawn when reached.

    Observation: ``position(2) ++ velocity(2) ++ (goal - position)(2)``.
    Costs: ``sigmoid(10 * (hazard_radius - |p - hazard|))`` and ``1[|v| > v_max]``.
    Reward: decrease in goal distance plus a bonus when the goal is reached.
    """

    hazard_center: tuple[float, float] = (0.0, 0.0)
    hazard_radius: float = 0.2
    v_max: float = 0.5
    arena: float = 1.5
    goal_radius: float = 0.3
    goal_bonus: float = 1.0
    dt: float = 0.1
    drag: float = 0.1
    accel: float = 1.0
    episode_length: int = 200
    _pos: np.ndarray = field(default_factory=lambda: np.zeros(2), repr=False)
    _vel: np.ndarray = field(default_factory=lambda: np.zeros(2), repr=False)
    _goal: np.ndarray = field(default_factory=lambda: np.ones(2), repr=False)
    _t: int = field(default=0, repr=False)

    state_dim = 6
    action_dim = 2
    n_costs = 2

    def _spawn(self, rng, keep_off: float) -> np.ndarray:
        center = np.asarray(self.hazard_center)
        while True:
            p = rng.uniform(-self.arena, self.arena, size=2)
            if np.linalg.norm(p - center) > keep_off:
                return p

    def observe(self) -> np.ndarray:
        return np.concatenate([self._pos, self._vel, self._goal - self._pos])

    def hazard_cost(self, pos) -> float:
        d = np.linalg.norm(np.asarray(pos) - np.asarray(self.hazard_center))
        return float(sigmoid(10.0 * (self.hazard_radius - d)))

    def speed_cost(self, vel) -> float:
        return float(np.linalg.norm(vel) > self.v_max)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._pos = self._spawn(rng, 2 * self.hazard_radius)
        self._vel = np.zeros(2)
        self._goal = self._spawn(rng, 2 * self.hazard_radius)
        self._t = 0
        return self.observe()

    def place(self, pos, vel=(0.0, 0.0), goal=(1.0, 1.0)) -> np.ndarray:
        """Set the state directly (tests and scripted starts)."""
        self._pos = np.array(pos, dtype=np.float64)
        self._vel = np.array(vel, dtype=np.float64)
        self._goal = np.array(goal, dtype=np.float64)
        self._t = 0
        return self.observe()

    def step(self, action, rng: np.random.Generator, behavior_prob: float = 1.0) -> Transition:
        a = np.asarray(action, dtype=np.float64).reshape(2)
        if np.any(np.abs(a) > 1.0):
            log.warning("action %s outside [-1, 1]; clamping", a)
            a = np.clip(a, -1.0, 1.0)
        s = self.observe()
        d_before = np.linalg.norm(self._goal - self._pos)
        self._vel = (1.0 - self.drag) * self._vel + self.dt * self.accel * a
        pos = self._pos + self.dt * self._vel
        # inelastic walls
        hit = np.abs(pos) > self.arena
        self._vel[hit] = 0.0
        self._pos = np.clip(pos, -self.arena, self.arena)
        d_after = np.linalg.norm(self._goal - self._pos)
        reward = d_before - d_after
        if d_after <= self.goal_radius:
            reward += self.goal_bonus
            self._goal = self._spawn(rng, 2 * self.hazard_radius)
        costs = np.array([self.hazard_cost(self._pos), self.speed_cost(self._vel)])
        self._t += 1
        truncated = self._t >= self.episode_length
        return Transition(s, a, behavior_prob, float(reward), costs, False, self.observe(), truncated)


# -- two-state reward toy -----------------------------------------------------

@dataclass
class TwoStateRewardToy:
    """Two states visited uniformly at random; reward ~ N(mean[s], std[s]) on leaving ``s``."""

    means: tuple[float, float] = (-0.005, 0.005)
    stds: tuple[float, float] = (0.02, 0.03)
    gamma: float = 0.99

    def sample_trajectory(self, length: int, rng: np.random.Generator):
        """States ``s_0..s_length`` and rewards ``r_0..r_{length-1}``."""
        states = rng.integers(0, 2, size=length + 1)
        mu = np.asarray(self.means)[states[:-1]]
        sd = np.asarray(self.stds)[states[:-1]]
        return states, rng.normal(mu, sd)

    def sample_returns(self, start_state: int, n: int, rng: np.random.Generator,
                       horizon: Optional[int] = None) -> np.ndarray:
        """Monte Carlo returns from ``start_state``; horizon defaults to gamma^H < 1e-6."""
        if horizon is None:
            horizon = int(np.ceil(np.log(1e-6) / np.log(self.gamma)))
        states = rng.integers(0, 2, size=(n, horizon))
        states[:, 0] = start_state
        mu = np.asarray(self.means)[states]
        sd = np.asarray(self.stds)[states]
        rewards = mu + sd * rng.normal(size=(n, horizon))
        return rewards @ (self.gamma ** np.arange(horizon))


# -- continuous-action chain ---------------------------------------------------

@dataclass
class ChainTask:
    """Chain of ``n_states`` cells with a one-hot observation and one action in [-1, 1].

    The agent moves right with probability ``(1 + a) / 2`` and left otherwise; it
    earns 1 per step spent in the last cell. Costs are all zero.
    """

    n_states: int = 5
    episode_length: int = 20
    n_costs: int = 1
    _s: int = field(default=0, repr=False)
    _t: int = field(default=0, repr=False)

    action_dim = 1

    @property
    def state_dim(self) -> int:
        return self.n_states

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.n_states)
        obs[self._s] = 1.0
        return obs

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._s = 0
        self._t = 0
        return self.observe()

    def step(self, action, rng: np.random.Generator, behavior_prob: float = 1.0) -> Transition:
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        s = self.observe()
        right = rng.random() < 0.5 * (1.0 + a)
        self._s = min(self._s + 1, self.n_states - 1) if right else max(self._s - 1, 0)
        self._t += 1
        reward = float(self._s == self.n_states - 1)
        return Transition(s, np.array([a]), behavior_prob, reward, np.zeros(self.n_costs), False,
                          self.observe(), self._t >= self.episode_length)
