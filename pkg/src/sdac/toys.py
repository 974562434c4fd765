"""Two-state TD(lambda) toy: how lambda trades bias against variance.

A quantile table (one row of atoms per state) is trained by pinball-loss SGD on
TD(lambda) targets built from freshly sampled trajectories. After every iteration
the 1-Wasserstein distance to Monte Carlo returns is recorded; checkpoints report
the mean and standard deviation of the last ``window`` recorded distances.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .envs import TwoStateRewardToy
from .qdist import QuantileDistribution, wasserstein
from .tdtarget import td_lambda_targets

LAMBDAS = (0.0, 0.5, 0.9, 1.0)
CHECKPOINTS = (5, 10, 15, 20, 25)


@dataclass(frozen=True)
class ToyProtocol:
    iterations: int = 25
    trajectories: int = 4        # sampled per iteration
    length: int = 200            # steps per trajectory
    sgd_steps: int = 40          # per iteration
    batch: int = 64
    learning_rate: float = 0.05
    n_atoms: int = 25
    n_target_atoms: int = 50
    truth_samples: int = 20_000
    window: int = 5


def true_returns(toy: TwoStateRewardToy, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [toy.sample_returns(s, n, rng) for s in (0, 1)]


def distance(table: np.ndarray, truth: list[np.ndarray]) -> float:
    """Mean over states of W1 between the table row and the Monte Carlo sample."""
    return float(np.mean([wasserstein(QuantileDistribution.from_unsorted(table[s]),
                                      QuantileDistribution.from_unsorted(truth[s]))
                          for s in range(len(truth))]))


def run(lam: float, seed: int, proto: ToyProtocol = ToyProtocol(),
        toy: TwoStateRewardToy = TwoStateRewardToy(), truth=None) -> np.ndarray:
    """W1 after each iteration for one ``(lam, seed)`` run."""
    rng = np.random.default_rng(seed)
    if truth is None:
        truth = true_returns(toy, proto.truth_samples, np.random.default_rng(10_000 + seed))
    table = np.zeros((2, proto.n_atoms))
    ones = np.ones(proto.length)
    zeros = np.zeros(proto.length)
    weights = np.full((proto.batch, proto.n_target_atoms), 1.0 / proto.n_target_atoms)
    out = np.empty(proto.iterations)
    for it in range(proto.iterations):
        states, targets = [], []
        for _ in range(proto.trajectories):
            s, r = toy.sample_trajectory(proto.length, rng)
            boot = table[s[1:]]
            targets.append(td_lambda_targets(r, zeros, ones, boot, toy.gamma, lam, proto.n_target_atoms))
            states.append(s[:-1])
        states = np.concatenate(states)
        targets = np.concatenate(targets)
        for _ in range(proto.sgd_steps):
            pick = rng.integers(states.size, size=proto.batch)
            _, grad = _kernels.quantile_loss_grad(table[states[pick]], targets[pick], weights)
            step = np.zeros_like(table)
            np.add.at(step, states[pick], grad)
            table -= proto.learning_rate * step / proto.batch
        out[it] = distance(table, truth)
    return out


def run_grid(lams=LAMBDAS, seeds=range(5), proto: ToyProtocol = ToyProtocol(),
             toy: TwoStateRewardToy = TwoStateRewardToy()) -> np.ndarray:
    """Distances of shape ``(len(lams), len(seeds), iterations)``."""
    seeds = list(seeds)
    truths = {s: true_returns(toy, proto.truth_samples, np.random.default_rng(10_000 + s)) for s in seeds}
    return np.array([[run(lam, s, proto, toy, truths[s]) for s in seeds] for lam in lams])


def summarize(dist: np.ndarray, checkpoints=CHECKPOINTS, window: int = 5):
    """Per lambda and checkpoint: seed-averaged mean and std of the last ``window`` values.

    Returns two arrays of shape ``(n_lambdas, n_checkpoints)``.
    """
    means = np.empty((dist.shape[0], len(checkpoints)))
    stds = np.empty_like(means)
    for j, c in enumerate(checkpoints):
        recent = dist[:, :, max(0, c - window):c]
        means[:, j] = recent.mean(axis=2).mean(axis=1)
        stds[:, j] = recent.std(axis=2).mean(axis=1)
    return means, stds


def write_distances_csv(path, lams, dist: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# sdac-tdlambda v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "seed", "iteration", "w1"])
        for i, lam in enumerate(lams):
            for s in range(dist.shape[1]):
                for it in range(dist.shape[2]):
                    w.writerow([repr(float(lam)), s, it + 1, repr(float(dist[i, s, it]))])


def write_summary_csv(path, lams, means, stds, checkpoints=CHECKPOINTS) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# sdac-tdlambda-summary v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda"] + [f"mean_{c}" for c in checkpoints] + [f"std_{c}" for c in checkpoints])
        for i, lam in enumerate(lams):
            w.writerow([repr(float(lam))] + [repr(float(v)) for v in means[i]] + [repr(float(v)) for v in stds[i]])
