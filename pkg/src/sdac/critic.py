"""Quantile critic ensemble trained with the pinball loss.

Each member maps ``state ++ action`` to ``M`` raw atom positions. Output slot
``m`` is trained toward the ``(m + 1/2) / M`` quantile of the target. Raw
outputs are not forced to be sorted; :func:`predict` pools the members and sorts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, numgrad
from .numgrad import DimensionError, NetSpec
from .qdist import QuantileDistribution, WeightedAtomSet, as_weighted


@dataclass(frozen=True, eq=False)
class CriticEnsemble:
    spec: NetSpec
    state_dim: int
    members: tuple[np.ndarray, ...]
    velocities: tuple[np.ndarray, ...] = field(default=())
    last_loss: float = float("nan")

    def __post_init__(self):
        if self.spec.input_dim <= self.state_dim:
            raise ValueError("critic input must include at least one action dimension")
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        members = tuple(np.asarray(p, dtype=np.float64) for p in self.members)
        for p in members:
            if p.size != self.spec.n_params:
                raise DimensionError("critic params", self.spec.n_params, p.size)
        object.__setattr__(self, "members", members)
        if not self.velocities:
            object.__setattr__(self, "velocities", tuple(np.zeros_like(p) for p in members))

    @property
    def n_atoms(self) -> int:
        """Atoms per member."""
        return self.spec.output_dim

    @property
    def action_dim(self) -> int:
        return self.spec.input_dim - self.state_dim

    @property
    def size(self) -> int:
        return len(self.members)


def make_critic(state_dim: int, action_dim: int, n_atoms: int, rng: np.random.Generator,
                hidden_dims=(64, 64), n_members: int = 2, activation: str = "relu") -> CriticEnsemble:
    spec = NetSpec(state_dim + action_dim, tuple(hidden_dims), n_atoms, activation)
    members = tuple(numgrad.init_params(spec, rng) for _ in range(n_members))
    return CriticEnsemble(spec, state_dim, members)


def _inputs(c: CriticEnsemble, states, actions):
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    single = s.ndim == 1
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    if s2.shape[1] != c.state_dim:
        raise DimensionError("state", c.state_dim, s2.shape[1])
    if a2.shape[1] != c.action_dim:
        raise DimensionError("action", c.action_dim, a2.shape[1])
    if s2.shape[0] != a2.shape[0]:
        raise DimensionError("action rows", s2.shape[0], a2.shape[0])
    return np.hstack([s2, a2]), single


def raw_outputs(c: CriticEnsemble, states, actions) -> np.ndarray:
    """Member outputs, shape ``(E, N, M)``."""
    x, _ = _inputs(c, states, actions)
    return np.stack([numgrad.forward(c.spec, p, x) for p in c.members])


def pooled_atoms(c: CriticEnsemble, states, actions) -> np.ndarray:
    """Pooled sorted atoms, shape ``(N, E*M)``."""
    raw = raw_outputs(c, states, actions)
    n = raw.shape[1]
    return np.sort(np.moveaxis(raw, 0, 1).reshape(n, -1), axis=1)


def predict(c: CriticEnsemble, state, action) -> QuantileDistribution:
    return QuantileDistribution(pooled_atoms(c, state, action)[0])


def q_value(c: CriticEnsemble, states, actions):
    x, single = _inputs(c, states, actions)
    q = raw_outputs(c, states, actions).mean(axis=(0, 2))
    return float(q[0]) if single else q


def s_value(c: CriticEnsemble, states, actions):
    x, single = _inputs(c, states, actions)
    raw = raw_outputs(c, states, actions)
    s = (raw * raw).mean(axis=(0, 2))
    return float(s[0]) if single else s


def moments_with_action_grad(c: CriticEnsemble, states, actions):
    """``(q, s, dq/da, ds/da)`` per row; used to push policy gradients through a frozen critic."""
    x, _ = _inputs(c, states, actions)
    n = x.shape[0]
    scale = 1.0 / (c.size * c.n_atoms)
    q = np.zeros(n)
    s = np.zeros(n)
    dq = np.zeros((n, c.action_dim))
    ds = np.zeros((n, c.action_dim))
    for p in c.members:
        out = numgrad.forward(c.spec, p, x)
        q += out.sum(axis=1) * scale
        s += (out * out).sum(axis=1) * scale
        _, gx = numgrad.vjp(c.spec, p, x, np.full_like(out, scale))
        dq += gx[:, c.state_dim:]
        _, gx = numgrad.vjp(c.spec, p, x, 2.0 * out * scale)
        ds += gx[:, c.state_dim:]
    return q, s, dq, ds


def quantile_loss(pred_atoms, target) -> tuple[float, np.ndarray]:
    """Pinball loss of ``pred_atoms`` against a (normalised) weighted target, with its subgradient."""
    pred = np.asarray(pred_atoms, dtype=np.float64).ravel()
    t = as_weighted(target).normalized()
    if t.size == 0:
        raise ValueError("empty target")
    loss, grad = _kernels.quantile_loss_grad(pred[None, :], t.positions[None, :], t.weights[None, :])
    return float(loss[0]), grad[0]


def batch_loss(c: CriticEnsemble, states, actions, targets, target_weights=None) -> float:
    """Mean pinball loss over rows, averaged over members."""
    targets, tw = _target_arrays(targets, target_weights)
    raw = raw_outputs(c, states, actions)
    return float(np.mean([_kernels.quantile_loss_grad(r, targets, tw)[0].mean() for r in raw]))


def _target_arrays(targets, target_weights):
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if target_weights is None:
        tw = np.full(targets.shape, 1.0 / targets.shape[1])
    else:
        tw = np.atleast_2d(np.asarray(target_weights, dtype=np.float64))
        tw = tw / tw.sum(axis=1, keepdims=True)
    return np.ascontiguousarray(targets), np.ascontiguousarray(tw)


def fit_step(c: CriticEnsemble, states, actions, targets, learning_rate: float,
             target_weights=None, momentum: float = 0.9) -> CriticEnsemble:
    """One SGD-with-momentum step per member on the mean pinball loss of the batch.

    ``targets`` is ``(N, J)``; rows are equal-weight atoms unless ``target_weights``
    is given. Returns a new ensemble; the input is left untouched.
    """
    x, _ = _inputs(c, states, actions)
    targets, tw = _target_arrays(targets, target_weights)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if targets.shape[0] != n:
        raise DimensionError("target rows", n, targets.shape[0])
    new_members, new_vel, losses = [], [], []
    for p, v in zip(c.members, c.velocities):
        out = numgrad.forward(c.spec, p, x)
        loss, grad_out = _kernels.quantile_loss_grad(out, targets, tw)
        losses.append(loss.mean())
        g = numgrad.gradient(c.spec, p, x, grad_out / n)
        v_next = momentum * v + g
        new_members.append(p - learning_rate * v_next)
        new_vel.append(v_next)
    return replace(c, members=tuple(new_members), velocities=tuple(new_vel),
                   last_loss=float(np.mean(losses)))


def checkpoint_blocks(c: CriticEnsemble):
    return [(c.spec, p) for p in c.members]


def from_checkpoint_blocks(blocks, state_dim: int) -> CriticEnsemble:
    specs = {b[0] for b in blocks}
    if len(specs) != 1:
        raise ValueError("ensemble members must share one net spec")
    return CriticEnsemble(blocks[0][0], state_dim, tuple(p for _, p in blocks))
