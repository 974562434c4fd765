"""Outer training loop: collect, fit critics on TD(lambda) targets, update the policy.

Each epoch collects ``steps_per_epoch`` transitions into a FIFO replay buffer,
recomputes distributional TD(lambda) targets for sampled buffer segments with the
current policy and critics, takes critic SGD steps, and then updates the policy
with one of three step kinds:

    trust-region  feasibility probe succeeded and the line search accepted a step
    recovery      probe reported the linearised problem infeasible
    no-step       anything else (zero gradient, rejected line search)

Metrics go to a versioned CSV (one row per epoch, columns in ``metric_columns``).
"""
from __future__ import annotations

import csv
from collections import deque
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import critic as critic_mod
from . import numgrad
from .critic import CriticEnsemble
from .envs import PointMassTask
from .gradinteg import RecoveryError, RecoveryProblem, clip_factor, recovery_direction
from .policy import GaussianPolicy, log1m_tanh_sq
from .surrogate import ConstraintSpec, SurrogateSample, evaluate
from .tdtarget import importance_ratios, td_lambda_targets
from .trsolver import Infeasible, TrustRegionProblem, feasibility_probe, line_search, solve_dual

log = logging.getLogger(__name__)

METRICS_HEADER = "# sdac-metrics v1"
STEP_KINDS = ("trust-region", "recovery", "no-step")


class ConfigError(ValueError):
    """Invalid training configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class TrainingAbort(RuntimeError):
    """Non-finite quantity during training."""

    def __init__(self, message: str, epoch: int, checkpoint: Optional[str]):
        super().__init__(f"epoch {epoch}: {message}; last checkpoint: {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.97
    eps: float = 0.001
    beta: float = 0.0
    alphas: tuple[float, ...] = (1.0, 1.0)
    cost_rates: tuple[float, ...] = (0.025, 0.1)  # thresholds are rate / (1 - gamma)
    zeta: float = 0.0                             # 0 means min threshold
    n_atoms: int = 25
    n_target_atoms: int = 50
    n_members: int = 2
    buffer_capacity: int = 100_000
    steps_per_epoch: int = 1000
    epochs: int = 300
    seed: int = 0
    critic_lr: float = 3e-4
    critic_momentum: float = 0.9
    critic_batch: int = 256
    critic_updates: int = 0   # 0 means buffer size / batch
    segment_length: int = 64
    ratio_cap: float = 1e6
    policy_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    policy_batch: int = 1000
    hvp_batch: int = 1000
    start_batch: int = 64      # recent episode-start states kept for the baselines
    damping: float = 1e-2
    cg_iters: int = 64
    max_backtracks: int = 10
    kl_factor: float = 1.5
    init_log_std: float = -0.5
    init_action_bias: float = 0.0
    checkpoint_every: int = 0  # 0 means only initial and final
    warmup_epochs: int = 0     # epochs that only collect data and fit critics

    @property
    def thresholds(self) -> np.ndarray:
        return np.asarray(self.cost_rates, dtype=np.float64) / (1.0 - self.gamma)

    @property
    def slack(self) -> float:
        if self.zeta > 0:
            return self.zeta
        return float(np.min(self.thresholds)) if len(self.cost_rates) else 1.0

    def validate(self) -> "TrainConfig":
        def check(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        check("gamma", 0.0 < self.gamma < 1.0, "must lie in (0, 1)")
        check("lam", 0.0 <= self.lam <= 1.0, "must lie in [0, 1]")
        check("eps", self.eps > 0, "must be positive")
        check("beta", self.beta >= 0, "must be non-negative")
        check("alphas", len(self.alphas) == len(self.cost_rates), "one risk level per cost channel")
        check("alphas", all(0.0 < a <= 1.0 for a in self.alphas), "each must lie in (0, 1]")
        check("cost_rates", all(r > 0 for r in self.cost_rates), "must be positive")
        check("zeta", self.zeta >= 0, "must be non-negative")
        for key in ("n_atoms", "n_target_atoms", "n_members", "buffer_capacity", "steps_per_epoch",
                    "critic_batch", "segment_length", "policy_batch", "hvp_batch", "start_batch",
                    "cg_iters"):
            check(key, getattr(self, key) >= 1, "must be >= 1")
        for key in ("epochs", "critic_updates", "max_backtracks", "checkpoint_every", "warmup_epochs"):
            check(key, getattr(self, key) >= 0, "must be >= 0")
        check("critic_lr", self.critic_lr > 0, "must be positive")
        check("critic_momentum", 0.0 <= self.critic_momentum < 1.0, "must lie in [0, 1)")
        check("ratio_cap", self.ratio_cap >= 1.0, "must be >= 1")
        check("damping", self.damping > 0, "must be positive")
        check("kl_factor", self.kl_factor >= 1.0, "must be >= 1")
        check("policy_hidden", all(h >= 1 for h in self.policy_hidden), "layer widths must be >= 1")
        check("critic_hidden", all(h >= 1 for h in self.critic_hidden), "layer widths must be >= 1")
        return self


def config_fields() -> dict[str, type]:
    """Field name to the type of its default (used by config parsers)."""
    return {f.name: type(f.default) for f in fields(TrainConfig)}


# -- replay buffer --------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO of transitions kept in collection order.

    Besides the transition itself each slot keeps the pre-squash action and the
    behaviour log-density, so importance ratios can be recomputed later, and two
    flags: ``end`` (episode terminated or truncated after this step) and
    ``start`` (first step of an episode).
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int, n_costs: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.pre_squash = np.zeros((capacity, action_dim))
        self.behavior_logp = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros((capacity, n_costs))
        self.dones = np.zeros(capacity, dtype=bool)
        self.ends = np.zeros(capacity, dtype=bool)
        self.starts = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    def add(self, state, pre_squash, action, behavior_logp, reward, costs, done, end, start,
            next_state) -> None:
        if not np.isfinite(behavior_logp):
            raise ValueError("behaviour density must be positive and finite")
        i = self._next
        self.states[i] = state
        self.pre_squash[i] = pre_squash
        self.actions[i] = action
        self.behavior_logp[i] = behavior_logp
        self.rewards[i] = reward
        self.costs[i] = costs
        self.dones[i] = done
        self.ends[i] = end or done
        self.starts[i] = start
        self.next_states[i] = next_state
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.total_added += 1

    def slots(self, logical) -> np.ndarray:
        """Storage slots of logical positions (0 = oldest)."""
        oldest = (self._next - self._size) % self.capacity
        return (oldest + np.asarray(logical)) % self.capacity

    def segment(self, first: int, length: int) -> np.ndarray:
        """Slots of up to ``length`` consecutive steps from logical position ``first``,
        stopping after an episode end or at the newest entry."""
        last = min(first + length, self._size)
        slots = self.slots(np.arange(first, last))
        ends = np.flatnonzero(self.ends[slots])
        if ends.size:
            slots = slots[: ends[0] + 1]
        return slots

    def sample_segments(self, rng: np.random.Generator, n_steps: int, length: int) -> list[np.ndarray]:
        """Random segments covering at least ``n_steps`` steps in total (fewer if the buffer is small)."""
        segs, total = [], 0
        budget = min(n_steps, self._size)
        while total < budget:
            seg = self.segment(int(rng.integers(self._size)), length)
            segs.append(seg)
            total += seg.size
        return segs

    def start_slots(self) -> np.ndarray:
        return self.slots(np.flatnonzero(self.starts[self.slots(np.arange(self._size))]))


# -- agent state ------------------------------------------------------------------

@dataclass
class Agent:
    policy: GaussianPolicy
    params: np.ndarray
    reward_critic: CriticEnsemble
    cost_critics: list[CriticEnsemble]

    def checkpoint_blocks(self):
        blocks = [(self.policy.net, self.params)]
        for c in [self.reward_critic, *self.cost_critics]:
            blocks.extend(critic_mod.checkpoint_blocks(c))
        return blocks

    def save(self, path) -> None:
        numgrad.save_checkpoint(path, self.checkpoint_blocks())


def make_agent(config: TrainConfig, env, rng: np.random.Generator) -> Agent:
    policy = GaussianPolicy(env.state_dim, env.action_dim, tuple(config.policy_hidden))
    params = policy.init_params(rng, log_std=config.init_log_std)
    if config.init_action_bias:
        w, b = numgrad._unpack(policy.net, params)[-1]
        b[: env.action_dim] = config.init_action_bias
    mk = lambda: critic_mod.make_critic(env.state_dim, env.action_dim, config.n_atoms, rng,  # noqa: E731
                                        config.critic_hidden, config.n_members)
    reward = mk()
    costs = [mk() for _ in range(env.n_costs)]
    return Agent(policy, params, reward, costs)


def load_agent(path, config: TrainConfig, env) -> Agent:
    """Inverse of ``Agent.save`` for an agent built with ``config`` on ``env``."""
    blocks = numgrad.load_checkpoint(path)
    E = config.n_members
    if len(blocks) != 1 + E * (1 + env.n_costs):
        raise ValueError("checkpoint does not match the configuration")
    policy = GaussianPolicy(env.state_dim, env.action_dim, tuple(config.policy_hidden))
    if blocks[0][0] != policy.net:
        raise ValueError("policy network in checkpoint does not match the configuration")
    critics = [critic_mod.from_checkpoint_blocks(blocks[1 + i * E: 1 + (i + 1) * E], env.state_dim)
               for i in range(1 + env.n_costs)]
    return Agent(policy, blocks[0][1], critics[0], critics[1:])


# -- metrics ----------------------------------------------------------------------

def metric_columns(n_costs: int) -> list[str]:
    cols = ["epoch", "env_steps", "episodes", "episode_return", "return_estimate"]
    cols += [f"F_{k + 1}" for k in range(n_costs)]
    cols += [f"cost_rate_{k + 1}" for k in range(n_costs)]
    cols += ["kl", "step_kind", "beta", "critic_loss"]
    return cols


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    def __init__(self, path, n_costs: int):
        self.path = path
        self.columns = metric_columns(n_costs)
        self._fh = open(path, "w", newline="")
        self._fh.write(METRICS_HEADER + "\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._w.writerow([_fmt(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    """Rows of a metrics file; numeric columns become floats."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise ValueError(f"not a metrics file: {header!r}")
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (v if k == "step_kind" else float(v)) for k, v in r.items()})
    return rows


# -- update pieces ----------------------------------------------------------------

@dataclass(frozen=True)
class PolicyStep:
    params: np.ndarray
    kind: str
    kl: float
    beta: float
    report: object


def _critic_targets(cfg: TrainConfig, agent: Agent, buf: ReplayBuffer, segs, rng):
    """Targets for every step of every segment, one array per critic (reward first)."""
    slots = np.concatenate(segs)
    pol = agent.policy
    logp_now = pol.gaussian_log_prob(agent.params, buf.states[slots], buf.pre_squash[slots])
    ratios = importance_ratios(logp_now, buf.behavior_logp[slots], cfg.ratio_cap)
    noise = rng.standard_normal((slots.size, pol.action_dim))
    boot_action = pol.sample(agent.params, buf.next_states[slots], noise).action
    critics = [agent.reward_critic, *agent.cost_critics]
    signals = [buf.rewards[slots]] + [buf.costs[slots, k] for k in range(len(agent.cost_critics))]
    dones = buf.dones[slots].astype(np.float64)
    out = []
    for c, sig in zip(critics, signals):
        boot = critic_mod.pooled_atoms(c, buf.next_states[slots], boot_action)
        parts, i = [], 0
        for seg in segs:
            j = i + seg.size
            parts.append(td_lambda_targets(sig[i:j], dones[i:j], ratios[i:j], boot[i:j], cfg.gamma,
                                           cfg.lam, cfg.n_target_atoms))
            i = j
        out.append(np.concatenate(parts))
    return slots, out


def _fit_critics(cfg: TrainConfig, agent: Agent, buf: ReplayBuffer, rng) -> float:
    n_updates = cfg.critic_updates or max(1, len(buf) // cfg.critic_batch)
    segs = buf.sample_segments(rng, n_updates * cfg.critic_batch, cfg.segment_length)
    slots, targets = _critic_targets(cfg, agent, buf, segs, rng)
    critics = [agent.reward_critic, *agent.cost_critics]
    losses = np.zeros(len(critics))
    for _ in range(n_updates):
        pick = rng.integers(slots.size, size=min(cfg.critic_batch, slots.size))
        s, a = buf.states[slots[pick]], buf.actions[slots[pick]]
        for i, c in enumerate(critics):
            critics[i] = critic_mod.fit_step(c, s, a, targets[i][pick], cfg.critic_lr,
                                             momentum=cfg.critic_momentum)
            losses[i] += critics[i].last_loss
    agent.reward_critic, agent.cost_critics = critics[0], critics[1:]
    return float(np.sum(losses) / n_updates)


def _policy_step(cfg: TrainConfig, agent: Agent, buf: ReplayBuffer, start_states, specs, rng,
                 frozen: bool = False) -> PolicyStep:
    pol = agent.policy
    old = agent.params.copy()
    n = len(buf)
    slots = buf.slots(rng.integers(n, size=min(cfg.policy_batch, n)))
    states = buf.states[slots]
    starts = np.asarray(start_states)
    sample = SurrogateSample(states, rng.standard_normal((states.shape[0], pol.action_dim)),
                             starts, rng.standard_normal((starts.shape[0], pol.action_dim)))

    def surrogate(p):
        return evaluate(sample, pol, p, old, agent.reward_critic, agent.cost_critics, specs,
                        cfg.beta, cfg.gamma)

    report = surrogate(old)
    if frozen:
        return PolicyStep(old, "no-step", 0.0, 0.0, report)
    hvp = pol.hvp_oracle(old, states[: cfg.hvp_batch], cfg.damping)
    kl = lambda p: pol.kl(old, p, states)  # noqa: E731
    thresholds = np.array([s.threshold for s in specs])

    if specs:
        trp = TrustRegionProblem(report.objective_grad, report.grads, report.residuals, hvp, cfg.eps,
                                 cfg.cg_iters)
        probe = feasibility_probe(trp)
    else:
        trp = TrustRegionProblem(report.objective_grad, np.zeros((0, old.size)), np.zeros(0), hvp,
                                 cfg.eps, cfg.cg_iters)
        probe = None

    if isinstance(probe, Infeasible):
        prob = RecoveryProblem(report.grads, report.values, thresholds, cfg.slack, hvp, cfg.eps,
                               cfg.cg_iters)
        try:
            g = recovery_direction(prob)
        except RecoveryError as exc:
            log.warning("recovery direction failed: %s", exc)
            return PolicyStep(old, "recovery", 0.0, 0.0, report)
        step = clip_factor(g, hvp, cfg.eps)
        # the clip bounds the quadratic model of KL; measured KL is checked too
        for _ in range(cfg.max_backtracks + 1):
            cand = old + step * g
            d = kl(cand)
            if d <= cfg.kl_factor * cfg.eps:
                return PolicyStep(cand, "recovery", d, step, report)
            step *= 0.5
        return PolicyStep(old, "recovery", 0.0, 0.0, report)

    if float(report.objective_grad @ trp.hinv_g()) <= 1e-14:
        return PolicyStep(old, "no-step", 0.0, 0.0, report)
    sol = solve_dual(trp)
    if isinstance(sol, Infeasible):  # probe and solver disagree at round-off
        return PolicyStep(old, "no-step", 0.0, 0.0, report)
    x, _ = sol

    def objective_and_constraints(p):
        r = surrogate(p)
        return r.objective, r.values

    ls = line_search(old, x, objective_and_constraints, kl, cfg.eps, thresholds,
                     max_backtracks=cfg.max_backtracks, kl_factor=cfg.kl_factor)
    if not ls.accepted or not np.any(ls.params != old):
        return PolicyStep(old, "no-step", 0.0, 0.0, report)
    return PolicyStep(ls.params, "trust-region", ls.kl, ls.beta, report)


# -- main loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    agent: Agent
    rows: list[dict] = field(default_factory=list)
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


def _check_finite(agent: Agent, what: str) -> Optional[str]:
    if not np.all(np.isfinite(agent.params)):
        return f"non-finite policy parameters after {what}"
    for c in [agent.reward_critic, *agent.cost_critics]:
        if not (np.isfinite(c.last_loss) and all(np.all(np.isfinite(p)) for p in c.members)):
            return f"non-finite critic loss or parameters after {what}"
    return None


def train(config: TrainConfig, env=None, out_dir=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``config.epochs`` epochs. With ``out_dir`` the metrics CSV and the
    checkpoints (``initial.ckpt``, ``checkpoint.ckpt``, ``final.ckpt``) land there."""
    cfg = config.validate()
    env = PointMassTask() if env is None else env
    if env.n_costs != len(cfg.cost_rates):
        raise ConfigError("cost_rates", f"environment has {env.n_costs} cost channels")
    specs = [ConstraintSpec(float(d), float(a), k)
             for k, (d, a) in enumerate(zip(cfg.thresholds, cfg.alphas))]

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, env_rng, act_rng, upd_rng = (np.random.default_rng(s) for s in seeds)
    agent = make_agent(cfg, env, init_rng)
    buf = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim, env.n_costs)
    result = TrainResult(agent)

    writer = None
    last_ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        last_ckpt = os.path.join(out_dir, "initial.ckpt")
        agent.save(last_ckpt)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        writer = MetricsWriter(result.metrics_path, env.n_costs)

    obs = env.reset(env_rng)
    start = True
    starts = deque([obs], maxlen=cfg.start_batch)  # recent episode-start states
    ep_ret, ep_done = 0.0, []
    try:
        for epoch in range(1, cfg.epochs + 1):
            cost_sum = np.zeros(env.n_costs)
            for _ in range(cfg.steps_per_epoch):
                ev = agent.policy.sample(agent.params, obs, act_rng.standard_normal(env.action_dim))
                logp = float(ev.log_prob + np.sum(log1m_tanh_sq(ev.pre_squash)))  # undo the squash
                tr = env.step(ev.action, env_rng, math.exp(min(max(ev.log_prob, -700.0), 700.0)))
                buf.add(tr.state, ev.pre_squash, ev.action, logp, tr.reward, tr.costs, tr.done,
                        tr.done or tr.truncated, start, tr.next_state)
                ep_ret += tr.reward
                cost_sum += tr.costs
                start = False
                if tr.done or tr.truncated:
                    ep_done.append(ep_ret)
                    ep_ret = 0.0
                    obs = env.reset(env_rng)
                    starts.append(obs)
                    start = True
                else:
                    obs = tr.next_state

            with np.errstate(over="raise", invalid="raise", divide="raise"):
                try:
                    loss = _fit_critics(cfg, agent, buf, upd_rng)
                except FloatingPointError as exc:
                    raise TrainingAbort(f"critic update: {exc}", epoch, last_ckpt) from exc
            msg = _check_finite(agent, "critic update")
            if msg:
                raise TrainingAbort(msg, epoch, last_ckpt)
            try:
                step = _policy_step(cfg, agent, buf, starts, specs, upd_rng, epoch <= cfg.warmup_epochs)
            except FloatingPointError as exc:
                raise TrainingAbort(f"policy update: {exc}", epoch, last_ckpt) from exc
            agent.params = step.params
            msg = _check_finite(agent, "policy update")
            if msg:
                raise TrainingAbort(msg, epoch, last_ckpt)

            row = {"epoch": epoch, "env_steps": buf.total_added, "episodes": len(ep_done),
                   "episode_return": float(np.mean(ep_done[-10:])) if ep_done else float("nan"),
                   "return_estimate": step.report.objective, "kl": step.kl, "step_kind": step.kind,
                   "beta": step.beta, "critic_loss": loss}
            for k in range(env.n_costs):
                row[f"F_{k + 1}"] = step.report.values[k]
                row[f"cost_rate_{k + 1}"] = cost_sum[k] / cfg.steps_per_epoch
            result.rows.append(row)
            if writer is not None:
                writer.write(row)
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    last_ckpt = os.path.join(out_dir, "checkpoint.ckpt")
                    agent.save(last_ckpt)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        result.checkpoint_path = os.path.join(out_dir, "final.ckpt")
        agent.save(result.checkpoint_path)
    return result


def desk_config(**overrides) -> TrainConfig:
    """Smaller networks and critic budget sized for a single-core desk run."""
    base = TrainConfig(policy_hidden=(32, 32), critic_hidden=(32, 32), critic_updates=32,
                       critic_lr=2e-3, buffer_capacity=20_000, policy_batch=500, hvp_batch=250,
                       start_batch=1000, cg_iters=20)
    return replace(base, **overrides)
