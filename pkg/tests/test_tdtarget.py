import numpy as np
import pytest

from sdac import envs, qdist, tdtarget
from sdac.envs import TabularCMDP, Transition
from sdac.qdist import QuantileDistribution, WeightedAtomSet


def test_horizon_for():
    assert tdtarget.horizon_for(0.0) == 1
    assert tdtarget.horizon_for(0.5) == 27
    assert 0.9 ** tdtarget.horizon_for(0.9) < 1e-8 <= 0.9 ** (tdtarget.horizon_for(0.9) - 1)
    with pytest.raises(ValueError):
        tdtarget.horizon_for(1.0)


def test_importance_ratios_are_capped():
    r = tdtarget.importance_ratios([0.0, 20.0], [0.0, 0.0], ratio_cap=100.0)
    np.testing.assert_allclose(r, [1.0, 100.0])
    with pytest.raises(FloatingPointError):
        tdtarget.importance_ratios([np.inf], [0.0])


def random_traj(seed, T=7, K=5, done_at=None):
    rng = np.random.default_rng(seed)
    rewards = rng.normal(size=T)
    dones = np.zeros(T)
    if done_at is not None:
        dones[done_at] = 1.0
    ratios = rng.uniform(0.2, 2.0, size=T)
    boot = np.sort(rng.normal(size=(T, K)), axis=1)
    return rewards, dones, ratios, boot


@pytest.mark.parametrize("seed", range(5))
def test_lambda_zero_gives_one_step_targets(seed):
    r, d, rho, boot = random_traj(seed, done_at=3)
    out = tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, 0.0, 5)
    for t in range(len(r)):
        one = r[t] + (1 - d[t]) * 0.9 * boot[t]
        np.testing.assert_allclose(out[t], np.sort(one), rtol=0, atol=1e-14)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_single_step_trajectory(lam):
    r, d, rho, boot = random_traj(1, T=1)
    out = tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, lam, 5)
    np.testing.assert_allclose(out[0], r[0] + 0.9 * boot[0], atol=1e-14)


def brute_force_chain_target(rewards, gamma, lam, c0):
    """Mixture over n-step returns with the tail weight on the longest one."""
    T = len(rewards)
    pos, wts = [], []
    for i in range(1, T + 1):
        g = sum(gamma ** k * rewards[k] for k in range(i)) + gamma ** i * c0
        w = (1 - lam) * lam ** (i - 1) if i < T else lam ** (T - 1)
        pos.append(g)
        wts.append(w)
    return WeightedAtomSet(pos, wts)


def chain_trajectory(T, c0):
    mdp = envs.chain_cmdp((1.0, 2.0, 3.0), gamma=0.9)
    rng = np.random.default_rng(0)
    mdp.reset(rng)
    mdp._s = 0
    traj = [mdp.step(0, rng) for _ in range(T)]
    pol = tdtarget.TabularPolicy(np.ones((3, 1)))
    crit = tdtarget.TableCritic([[np.full(4, c0)] for _ in range(3)])
    return traj, pol, crit


@pytest.mark.parametrize("T", [1, 2, 3, 4, 5, 6])
def test_chain_matches_brute_force_mixture_exactly(T):
    c0 = 0.7
    traj, pol, crit = chain_trajectory(T, c0)
    targets = tdtarget.build_targets(traj, pol, crit, 0.9, 0.5, 64, np.random.default_rng(0))
    want = qdist.project(brute_force_chain_target([tr.reward for tr in traj], 0.9, 0.5, c0), 64)
    np.testing.assert_allclose(targets[0].atoms, want.atoms, rtol=0, atol=1e-13)


@pytest.mark.parametrize("lam", [0.3, 0.9])
def test_chain_matches_brute_force_mixture_within_projection_error(lam):
    T, m = 8, 64
    traj, pol, crit = chain_trajectory(T, 0.7)
    targets = tdtarget.build_targets(traj, pol, crit, 0.9, lam, m, np.random.default_rng(0))
    want = brute_force_chain_target([tr.reward for tr in traj], 0.9, lam, 0.7)
    spread = np.ptp(want.positions)
    assert qdist.wasserstein(targets[0], want) <= T * spread / m


def terminal_chain():
    P = np.zeros((4, 1, 4))
    for s in range(3):
        P[s, 0, s + 1] = 1.0
    P[3, 0, 3] = 1.0
    return TabularCMDP(P, np.array([1.0, -2.0, 0.5, 0.0]), gamma=0.9, terminal_states=(3,))


def test_lambda_one_on_policy_gives_monte_carlo_return():
    mdp = terminal_chain()
    rng = np.random.default_rng(0)
    mdp.reset(rng)
    mdp._s = 0
    traj = [mdp.step(0, rng) for _ in range(3)]
    assert traj[-1].done
    crit = tdtarget.TableCritic([[rng.normal(size=6)] for _ in range(4)])
    targets = tdtarget.build_targets(traj, tdtarget.TabularPolicy(np.ones((4, 1))), crit, 0.9, 1.0, 16, rng)
    g = 1.0 - 0.9 * 2.0 + 0.81 * 0.5
    assert qdist.mean(targets[0]) == pytest.approx(g, abs=1e-14)
    np.testing.assert_allclose(targets[0].atoms, g, atol=1e-14)


def test_lambda_one_after_terminal_falls_back_to_one_step():
    r, d, rho, boot = random_traj(2, T=6, done_at=2)
    out = tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, 1.0, 5)
    np.testing.assert_allclose(out[2], r[2], atol=1e-14)
    assert np.all(np.isfinite(out))


def perturb_after(r, rho, boot, cut, seed):
    rng = np.random.default_rng(seed)
    r, rho, boot = r.copy(), rho.copy(), boot.copy()
    r[cut:] = rng.normal(size=r.size - cut)
    rho[cut:] = rng.uniform(0.2, 2.0, size=r.size - cut)
    boot[cut:] = np.sort(rng.normal(size=boot[cut:].shape), axis=1)
    return r, rho, boot


def test_terminal_cuts_the_trace():
    r, d, rho, boot = random_traj(3, T=6, done_at=2)
    full = tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, 0.7, 5)
    r2, rho2, boot2 = perturb_after(r, rho, boot, 3, 99)
    other = tdtarget.td_lambda_targets(r2, d, rho2, boot2, 0.9, 0.7, 5)
    np.testing.assert_array_equal(full[:3], other[:3])
    assert not np.array_equal(full[3:], other[3:])
    np.testing.assert_allclose(full[2], r[2], atol=1e-14)


def test_zero_ratio_cuts_the_trace():
    r, d, rho, boot = random_traj(4, T=6)
    rho[3] = 0.0
    full = tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, 0.7, 5)
    r2, rho2, boot2 = perturb_after(r, rho, boot, 3, 98)
    rho2[3] = 0.0
    other = tdtarget.td_lambda_targets(r2, d, rho2, boot2, 0.9, 0.7, 5)
    np.testing.assert_array_equal(full[:3], other[:3])
    # the step before the cut is left with only its one-step target
    np.testing.assert_allclose(full[2], np.sort(r[2] + 0.9 * boot[2]), atol=1e-14)


def test_transitions_need_positive_behavior_prob():
    with pytest.raises(ValueError):
        Transition(np.zeros(1), np.zeros(1), 0.0, 0.0, np.zeros(0), False, np.zeros(1))


def test_invalid_arguments():
    r, d, rho, boot = random_traj(5)
    with pytest.raises(ValueError):
        tdtarget.td_lambda_targets(r, d, rho, boot, 0.9, 1.5, 5)
    with pytest.raises(ValueError):
        tdtarget.td_lambda_targets(r, d, -rho, boot, 0.9, 0.5, 5)
    with pytest.raises(ValueError):
        tdtarget.td_lambda_targets(r, d[:-1], rho, boot, 0.9, 0.5, 5)


def test_trace_normalizers_on_policy():
    n = tdtarget.trace_normalizers(np.zeros(4), np.ones(4), 0.6)
    np.testing.assert_allclose(n, 1.0)
    n = tdtarget.trace_normalizers(np.zeros(3), np.array([1.0, 2.0, 0.5]), 0.5)
    np.testing.assert_allclose(n, [0.5 + 0.5 * 2.0 * (0.5 + 0.25), 0.5 + 0.25, 1.0])


# -- exact operator -----------------------------------------------------------

def random_table(mdp, rng, k=3, scale=1.0):
    return [[WeightedAtomSet(scale * rng.normal(size=k), rng.dirichlet(np.ones(k)))
             for _ in range(mdp.n_actions)] for _ in range(mdp.n_states)]


def policies():
    mu = np.array([[0.5, 0.5], [0.3, 0.7], [0.5, 0.5], [0.5, 0.5]])
    pi = np.array([[0.2, 0.8], [0.9, 0.1], [1.0, 0.0], [0.5, 0.5]])
    return mu, pi


def test_single_state_operator_mean():
    r, z, gamma, lam = 1.0, 3.0, 0.9, 0.6
    mdp = TabularCMDP(np.ones((1, 1, 1)), np.array([r]), gamma=gamma)
    out = tdtarget.apply_operator_exact(mdp, [[WeightedAtomSet.dirac(z)]], np.ones((1, 1)),
                                        np.ones((1, 1)), lam)[0][0]
    v = r / (1 - gamma)
    expect = v + (z - v) * (1 - lam) * gamma / (1 - lam * gamma)
    assert qdist.mean(out) == pytest.approx(expect, abs=1e-6)
    assert out.weights.sum() == pytest.approx(1.0)


def test_lambda_zero_operator_is_one_step_bellman():
    mdp = envs.absorbing_cmdp(gamma=0.8)
    mu, pi = policies()
    table = random_table(mdp, np.random.default_rng(0))
    out = tdtarget.apply_operator_exact(mdp, table, mu, pi, 0.0)
    s, a = 1, 0
    parts = []
    for s2 in np.flatnonzero(mdp.P[s, a]):
        for a2 in range(2):
            if pi[s2, a2] > 0:
                d = qdist.affine(table[s2][a2], 0.8, mdp.rewards[s, a, s2])
                parts.append((d, mdp.P[s, a, s2] * pi[s2, a2]))
    want = qdist.mix(parts)
    assert qdist.wasserstein(out[s][a], want) < 1e-12


def test_operator_does_not_depend_on_behaviour_policy():
    mdp = envs.absorbing_cmdp(gamma=0.8)
    _, pi = policies()
    table = random_table(mdp, np.random.default_rng(1))
    a = tdtarget.apply_operator_exact(mdp, table, np.full((4, 2), 0.5), pi, 0.5)
    b = tdtarget.apply_operator_exact(mdp, table, np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [0.1, 0.9]]), pi, 0.5)
    assert tdtarget.sup_distance(a, b) < 1e-10


def test_operator_requires_coverage():
    mdp = envs.absorbing_cmdp()
    _, pi = policies()
    mu = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        tdtarget.apply_operator_exact(mdp, random_table(mdp, np.random.default_rng(0)), mu, pi, 0.5)


@pytest.mark.parametrize("gamma", [0.5, 0.9])
@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("seed", range(3))
def test_operator_contracts(gamma, p, seed):
    mdp = envs.absorbing_cmdp(gamma=gamma)
    mu, pi = policies()
    rng = np.random.default_rng(seed)
    t1, t2 = random_table(mdp, rng), random_table(mdp, rng, scale=2.0)
    before = tdtarget.sup_distance(t1, t2, p)
    a = tdtarget.apply_operator_exact(mdp, t1, mu, pi, 0.5)
    b = tdtarget.apply_operator_exact(mdp, t2, mu, pi, 0.5)
    assert tdtarget.sup_distance(a, b, p) <= gamma ** (1 / p) * before + 1e-12


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.8])
def test_return_distribution_is_a_fixed_point(lam):
    mdp = envs.absorbing_cmdp(gamma=0.5)
    mu, pi = policies()
    nu = envs.exact_return_distribution(mdp, pi, horizon_cut=80)
    out = tdtarget.apply_operator_exact(mdp, nu, mu, pi, lam)
    assert tdtarget.sup_distance(out, nu) < 1e-9


def sample_targets(mdp, mu, pi, critic, s0, a0, n, lam, m_proj, T, rng):
    """Targets at ``(s0, a0)`` from ``n`` behaviour trajectories, with their normalisers."""
    S = mdp.n_states
    states = np.full(n, s0)
    actions = np.full(n, a0)
    rewards = np.empty((n, T))
    ratios = np.empty((n, T))
    boot = np.empty((n, T, critic.shape[2]))
    for t in range(T):
        ratios[:, t] = pi[states, actions] / mu[states, actions]
        u = rng.random(n)
        nxt = np.minimum((u[:, None] > np.cumsum(mdp.P[states, actions], axis=1)).sum(axis=1), S - 1)
        rewards[:, t] = mdp.rewards[states, actions, nxt]
        a_boot = np.minimum((rng.random(n)[:, None] > np.cumsum(pi[nxt], axis=1)).sum(axis=1), 1)
        boot[:, t] = critic[nxt, a_boot]
        actions = np.minimum((rng.random(n)[:, None] > np.cumsum(mu[nxt], axis=1)).sum(axis=1), 1)
        states = nxt
    dones = np.zeros(T)
    targets, norms = [], []
    for i in range(n):
        out = tdtarget.td_lambda_targets(rewards[i], dones, ratios[i], boot[i], mdp.gamma, lam, m_proj)
        targets.append(out[0])
        norms.append(tdtarget.trace_normalizers(dones, ratios[i], lam)[0])
    return np.array(targets), np.array(norms)


@pytest.mark.parametrize("off_policy", [False, True])
def test_sampled_targets_approach_exact_operator(off_policy):
    mdp = envs.absorbing_cmdp(gamma=0.8)
    mu, pi = policies()
    if not off_policy:
        mu = pi
    rng = np.random.default_rng(7)
    critic = np.sort(rng.normal(size=(4, 2, 4)), axis=2)
    table = [[QuantileDistribution(critic[s, a]) for a in range(2)] for s in range(4)]
    lam, s0, a0 = 0.5, 0, 1
    exact = tdtarget.apply_operator_exact(mdp, table, mu, pi, lam)[s0][a0]
    targets, norms = sample_targets(mdp, mu, pi, critic, s0, a0, 10_000, lam, 800, 30, rng)
    if not off_policy:
        np.testing.assert_allclose(norms, 1.0)
    dists = []
    for n in (100, 1_000, 10_000):
        # weighting by the normalisers undoes the per-trajectory self-normalisation
        w = np.repeat(norms[:n], targets.shape[1])
        est = WeightedAtomSet(targets[:n].ravel(), w / w.sum())
        dists.append(qdist.wasserstein(est, exact))
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 0.02
