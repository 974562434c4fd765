import numpy as np

from sdac import toys
from sdac.envs import TwoStateRewardToy

SHORT = toys.ToyProtocol(iterations=6, truth_samples=2000)


def test_distance_zero_for_matching_sample():
    rng = np.random.default_rng(0)
    truth = [rng.normal(size=50), rng.normal(size=50)]
    assert toys.distance(np.vstack(truth), truth) == 0.0


def test_run_is_deterministic_and_shaped():
    a = toys.run(0.5, 3, SHORT)
    b = toys.run(0.5, 3, SHORT)
    assert a.shape == (6,)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a)) and np.all(a >= 0)


def test_training_reduces_distance():
    d = toys.run(0.9, 0, SHORT)
    zero_table = toys.distance(np.zeros((2, SHORT.n_atoms)),
                               toys.true_returns(TwoStateRewardToy(), 2000, np.random.default_rng(10_000)))
    assert d[-1] < 0.5 * zero_table


def test_summarize_uses_trailing_window():
    dist = np.arange(2 * 3 * 10, dtype=float).reshape(2, 3, 10)
    means, stds = toys.summarize(dist, checkpoints=(5, 10), window=5)
    np.testing.assert_allclose(means[:, 0], dist[:, :, :5].mean(axis=(1, 2)))
    np.testing.assert_allclose(means[:, 1], dist[:, :, 5:].mean(axis=(1, 2)))
    np.testing.assert_allclose(stds, np.full((2, 2), np.std(np.arange(5.0))))


def test_csv_writers(tmp_path):
    dist = toys.run_grid((0.0, 1.0), range(2), SHORT)
    assert dist.shape == (2, 2, 6)
    toys.write_distances_csv(tmp_path / "d.csv", (0.0, 1.0), dist)
    means, stds = toys.summarize(dist, checkpoints=(5,))
    toys.write_summary_csv(tmp_path / "s.csv", (0.0, 1.0), means, stds, checkpoints=(5,))
    assert (tmp_path / "d.csv").read_text().startswith("# sdac-tdlambda v1\n")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 2 + 2 * 2 * 6  # one row per (lambda, seed, iteration)
