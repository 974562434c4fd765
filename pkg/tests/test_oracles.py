import numpy as np
import pytest

from sdac import oracles


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_are_well_formed(seed):
    H, g, B, c, eps = oracles.random_instance(np.random.default_rng(seed))
    n = g.size
    assert 1 <= B.shape[0] <= min(3, n) and B.shape[1] == n
    assert np.min(np.linalg.eigvalsh(H)) > 0 and eps > 0


def test_slsqp_trust_region_known_solution():
    # maximize x1 in the unit ball with x1 <= 0.5
    x = oracles.slsqp_trust_region(np.eye(2), np.array([1.0, 0.0]), np.array([[1.0, 0.0]]),
                                   np.array([-0.5]), 0.5)
    np.testing.assert_allclose(x, [0.5, 0.0], atol=1e-6)


def test_slsqp_recovery_known_solution():
    x = oracles.slsqp_recovery(np.eye(2), np.array([[1.0, 1.0]]), np.array([1.0]))
    np.testing.assert_allclose(x, [-0.5, -0.5], atol=1e-8)


def test_dense_checks_pass():
    assert oracles.check_trust_region(10).passed
    assert oracles.check_recovery(10).passed
    assert oracles.check_contraction(2).passed
    assert oracles.check_finite_differences().passed


def test_contraction_ratio_pairs():
    pairs = oracles.contraction_ratios(3, 0.5, 1)
    assert len(pairs) == 3
    assert all(after <= 0.5 * before + 1e-6 for before, after in pairs)
