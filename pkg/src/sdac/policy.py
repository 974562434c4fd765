"""Tanh-squashed diagonal Gaussian policy.

The network maps a state to ``2 * action_dim`` numbers: the pre-squash mean
followed by the raw log standard deviation, which is clamped to
``[LOG_STD_MIN, LOG_STD_MAX]``. Actions are ``tanh(mean + std * noise)``.

KL divergences and the Fisher product are taken in pre-squash coordinates.
KL is invariant under the shared invertible squashing map, so this is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad
from .numgrad import NetSpec

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
LOG2 = np.log(2.0)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    u = np.abs(u)
    return 2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class PolicyEvaluation:
    action: np.ndarray
    log_prob: np.ndarray
    pre_squash: np.ndarray


@dataclass(frozen=True)
class GaussianPolicy:
    state_dim: int
    action_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    @property
    def net(self) -> NetSpec:
        return NetSpec(self.state_dim, tuple(self.hidden_dims), 2 * self.action_dim, self.activation)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def init_params(self, rng: np.random.Generator, log_std: float = -0.5,
                    out_scale: float = 0.01) -> np.ndarray:
        """Glorot init with a shrunken output layer so the initial policy is nearly state-independent."""
        spec = self.net
        params = numgrad.init_params(spec, rng)
        w, b = numgrad._unpack(spec, params)[-1]
        w *= out_scale
        b[self.action_dim:] = log_std
        return params

    # -- heads -------------------------------------------------------------

    def _raw(self, params, states):
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 1
        out = numgrad.forward(self.net, params, states[None, :] if single else states)
        return out, single

    def head(self, params, states):
        """``(mean, log_std)`` arrays of shape ``(N, action_dim)``."""
        out, _ = self._raw(params, states)
        a = self.action_dim
        return out[:, :a], np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX)

    def _clamp_mask(self, out):
        raw = out[:, self.action_dim:]
        return ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)

    # -- sampling and densities ---------------------------------------------

    def sample(self, params, states, noise) -> PolicyEvaluation:
        out, single = self._raw(params, states)
        a = self.action_dim
        noise = np.asarray(noise, dtype=np.float64).reshape(out.shape[0], a)
        mean, log_std = out[:, :a], np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX)
        u = mean + np.exp(log_std) * noise
        logp = np.sum(-0.5 * noise * noise - log_std - HALF_LOG_2PI - log1m_tanh_sq(u), axis=1)
        ev = PolicyEvaluation(np.tanh(u), logp, u)
        if single:
            return PolicyEvaluation(ev.action[0], ev.log_prob[0], ev.pre_squash[0])
        return ev

    def gaussian_log_prob(self, params, states, pre_squash) -> np.ndarray:
        """Log-density of the pre-squash point under the unsquashed Gaussian.

        Ratios of squashed densities equal ratios of these, since the tanh
        Jacobian is shared.
        """
        mean, log_std = self.head(params, states)
        u = np.asarray(pre_squash, dtype=np.float64).reshape(mean.shape)
        z = (u - mean) * np.exp(-log_std)
        return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=1)

    def log_prob(self, params, states, pre_squash) -> np.ndarray:
        u = np.asarray(pre_squash, dtype=np.float64)
        mean, _ = self.head(params, states)
        u = u.reshape(mean.shape)
        return self.gaussian_log_prob(params, states, u) - np.sum(log1m_tanh_sq(u), axis=1)

    def sample_vjp(self, params, states, noise, action_cot, logp_cot) -> np.ndarray:
        """Parameter gradient of ``sum(action_cot * action) + sum(logp_cot * log_prob)``.

        Differentiates through the reparameterised sample with the noise held fixed.
        ``action_cot`` has shape ``(N, action_dim)`` and ``logp_cot`` shape ``(N,)``.
        """
        out, _ = self._raw(params, states)
        a = self.action_dim
        n = out.shape[0]
        noise = np.asarray(noise, dtype=np.float64).reshape(n, a)
        action_cot = np.asarray(action_cot, dtype=np.float64).reshape(n, a)
        logp_cot = np.asarray(logp_cot, dtype=np.float64).reshape(n, 1)
        mean, log_std = out[:, :a], np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * noise
        th = np.tanh(u)
        # d action/du = 1 - tanh^2; d(-log(1 - tanh^2))/du = 2 tanh
        du = action_cot * (1.0 - th * th) + logp_cot * 2.0 * th
        d_mean = du
        d_log_std = (du * std * noise - logp_cot) * self._clamp_mask(out)
        states2 = np.asarray(states, dtype=np.float64).reshape(n, -1)
        return numgrad.gradient(self.net, params, states2, np.hstack([d_mean, d_log_std]))

    def entropy_estimate(self, params, states, noises) -> float:
        states = np.asarray(states, dtype=np.float64)
        if states.size == 0 or (states.ndim == 2 and states.shape[0] == 0):
            raise ValueError("entropy estimate needs at least one state")
        return float(-np.mean(self.sample(params, np.atleast_2d(states), noises).log_prob))

    # -- KL geometry --------------------------------------------------------

    def kl_per_state(self, params_old, params_new, states) -> np.ndarray:
        m1, l1 = self.head(params_old, states)
        m2, l2 = self.head(params_new, states)
        var_ratio = np.exp(2.0 * (l1 - l2))
        dm = (m1 - m2) * np.exp(-l2)
        return np.sum(l2 - l1 + 0.5 * (var_ratio + dm * dm) - 0.5, axis=1)

    def kl(self, params_old, params_new, states) -> float:
        """Mean over states of ``KL(pi_old(.|s) || pi_new(.|s))``."""
        return float(np.mean(self.kl_per_state(params_old, params_new, states)))

    def kl_grad(self, params_old, params_new, states) -> np.ndarray:
        """Gradient of :meth:`kl` with respect to ``params_new``."""
        out, _ = self._raw(params_new, states)
        a = self.action_dim
        n = out.shape[0]
        m1, l1 = self.head(params_old, states)
        m2, l2 = out[:, :a], np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX)
        inv_var2 = np.exp(-2.0 * l2)
        d_mean = (m2 - m1) * inv_var2
        d_log_std = (1.0 - (np.exp(2.0 * l1) + (m1 - m2) ** 2) * inv_var2) * self._clamp_mask(out)
        states2 = np.asarray(states, dtype=np.float64).reshape(n, -1)
        return numgrad.gradient(self.net, params_new, states2, np.hstack([d_mean, d_log_std]) / n)

    def kl_hvp(self, params, states, v, damping: float = 1e-2) -> np.ndarray:
        """``(mean_s J^T F J + damping I) v`` with the diagonal-Gaussian Fisher ``F``."""
        if damping < 0:
            raise ValueError("damping must be non-negative")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        n = states.shape[0]
        a = self.action_dim
        out = numgrad.forward(self.net, params, states)
        mask = self._clamp_mask(out)
        jv = numgrad.jvp(self.net, params, states, v)
        log_std = np.clip(out[:, a:], LOG_STD_MIN, LOG_STD_MAX)
        fjv = np.hstack([jv[:, :a] * np.exp(-2.0 * log_std), 2.0 * jv[:, a:] * mask * mask])
        return numgrad.gradient(self.net, params, states, fjv) / n + damping * np.asarray(v)

    def hvp_oracle(self, params, states, damping: float = 1e-2):
        params = np.array(params, dtype=np.float64)
        states = np.array(states, dtype=np.float64)
        return lambda v: self.kl_hvp(params, states, v, damping)
