"""Quantile distributions and weighted atom sets.

A :class:`QuantileDistribution` is ``M`` sorted atoms of weight ``1/M`` each.
A :class:`WeightedAtomSet` is an arbitrary list of ``(position, weight)``
pairs, the intermediate form used while shifting and mixing targets before
they are projected back to equal-weight atoms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import _kernels


@dataclass(frozen=True, eq=False)
class QuantileDistribution:
    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64).ravel()
        if atoms.size < 1:
            raise ValueError("a quantile distribution needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if np.any(np.diff(atoms) < 0):
            raise ValueError("atoms must be sorted")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def from_unsorted(cls, values) -> "QuantileDistribution":
        return cls(np.sort(np.asarray(values, dtype=np.float64).ravel()))

    @property
    def size(self) -> int:
        return self.atoms.size

    def as_weighted(self) -> "WeightedAtomSet":
        n = self.atoms.size
        return WeightedAtomSet(self.atoms, np.full(n, 1.0 / n))

    def __repr__(self):
        return f"QuantileDistribution({self.atoms.tolist()})"


@dataclass(frozen=True, eq=False)
class WeightedAtomSet:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if pos.shape != w.shape:
            raise ValueError("positions and weights differ in length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        pos.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, at: float) -> "WeightedAtomSet":
        return cls(np.array([float(at)]), np.array([1.0]))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "WeightedAtomSet":
        pairs = list(pairs)
        return cls(np.array([p for p, _ in pairs], dtype=np.float64),
                   np.array([w for _, w in pairs], dtype=np.float64))

    @property
    def size(self) -> int:
        return self.positions.size

    def normalized(self) -> "WeightedAtomSet":
        total = self.weights.sum()
        if not total > 0:
            raise ValueError("weights sum to zero")
        return WeightedAtomSet(self.positions, self.weights / total)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.weights.tolist()))

    def __repr__(self):
        return f"WeightedAtomSet({self.pairs()})"


Distribution = Union[QuantileDistribution, WeightedAtomSet]


def as_weighted(d: Distribution) -> WeightedAtomSet:
    if isinstance(d, QuantileDistribution):
        return d.as_weighted()
    return d


def affine(d: Distribution, scale: float, shift: float) -> WeightedAtomSet:
    """Push ``d`` forward through ``z -> scale * z + shift``."""
    d = as_weighted(d)
    return WeightedAtomSet(scale * d.positions + shift, d.weights)


def mix(parts: Iterable[tuple[Distribution, float]]) -> WeightedAtomSet:
    """Union of the parts, each part's (normalised) mass scaled by its share of the part weights."""
    parts = [(as_weighted(d), float(w)) for d, w in parts]
    if not parts:
        raise ValueError("nothing to mix")
    weights = np.array([w for _, w in parts])
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("part weights must be non-negative and not all zero")
    weights = weights / weights.sum()
    pos, wts = [], []
    for (d, _), share in zip(parts, weights):
        if share == 0.0:
            continue
        inner = d.weights.sum()
        if not inner > 0:
            raise ValueError("cannot mix an empty part with positive weight")
        pos.append(d.positions)
        wts.append(d.weights * (share / inner))
    return WeightedAtomSet(np.concatenate(pos), np.concatenate(wts))


def restore_cdf(d: Distribution) -> tuple[np.ndarray, np.ndarray]:
    """Sorted positions and the accumulated (normalised) weight at each."""
    d = as_weighted(d).normalized()
    order = np.argsort(d.positions, kind="stable")
    return d.positions[order], np.cumsum(d.weights[order])


def project(d: Distribution, m_out: int) -> QuantileDistribution:
    """Equal-weight ``m_out``-atom distribution closest to ``d`` in 1-Wasserstein.

    Atom ``i`` is the left-continuous inverse CDF at level ``(i + 1/2) / m_out``.
    """
    if m_out < 1:
        raise ValueError("m_out must be >= 1")
    d = as_weighted(d)
    if d.size == 0:
        raise ValueError("cannot project an empty atom set")
    return QuantileDistribution(_kernels.project_weighted(d.positions, d.weights, int(m_out)))


def mean(d: Distribution) -> float:
    d = as_weighted(d)
    return float(d.weights @ d.positions / d.weights.sum())


def second_moment(d: Distribution) -> float:
    d = as_weighted(d)
    return float(d.weights @ (d.positions * d.positions) / d.weights.sum())


def wasserstein(d1: Distribution, d2: Distribution, p: int = 1) -> float:
    """``(integral |F1 - F2|^p dx)^(1/p)`` computed exactly between breakpoints.

    For ``p = 1`` this is the 1-Wasserstein distance; for ``p = 2`` it is the
    Cramer (l2 CDF) distance under which the TD(lambda) operator contracts.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    x1, f1 = restore_cdf(d1)
    x2, f2 = restore_cdf(d2)
    if x1.size == 0 or x2.size == 0:
        raise ValueError("distributions must be non-empty")
    grid = np.union1d(x1, x2)
    # right-continuous step CDFs evaluated on each interval [grid[i], grid[i+1])
    c1 = np.concatenate([[0.0], f1])[np.searchsorted(x1, grid, side="right")]
    c2 = np.concatenate([[0.0], f2])[np.searchsorted(x2, grid, side="right")]
    widths = np.diff(grid)
    gap = np.abs(c1[:-1] - c2[:-1])
    return float(np.sum(widths * gap ** p) ** (1.0 / p))


def merge_close(d: Distribution, tol: float = 1e-12) -> WeightedAtomSet:
    """Combine atoms whose positions differ by at most ``tol`` (relative to scale)."""
    d = as_weighted(d)
    if d.size == 0:
        return d
    order = np.argsort(d.positions, kind="stable")
    pos = d.positions[order]
    w = d.weights[order]
    scale = max(1.0, float(np.max(np.abs(pos))))
    new_group = np.concatenate([[True], np.diff(pos) > tol * scale])
    ids = np.cumsum(new_group) - 1
    merged_w = np.bincount(ids, weights=w)
    return WeightedAtomSet(pos[new_group], merged_w)
