"""Empirical measures on the real line.

Atomic probability measures stand in for elements of P_2(R) throughout the
package.  Everything here is one-dimensional: Wasserstein distances are
computed exactly through the sorted (quantile) coupling.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "EmpiricalMeasure",
    "DiscretizationSpec",
    "wasserstein_1d",
    "cell_index",
    "discretize_grid",
    "moment",
    "read_measure",
    "write_measure",
]


class EmpiricalMeasure:
    """Weighted atom list.  Weights default to uniform.

    The object is immutable by convention; moments and the sorted
    representation are computed lazily and cached.
    """

    __slots__ = ("atoms", "_weights", "__dict__")

    def __init__(self, atoms, weights=None):
        atoms = np.asarray(atoms, dtype=float).reshape(-1)
        if atoms.size == 0:
            raise ValueError("empirical measure needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        self.atoms = atoms
        if weights is not None:
            weights = np.asarray(weights, dtype=float).reshape(-1)
            if weights.shape != atoms.shape:
                raise ValueError("weights and atoms differ in length")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be finite and nonnegative")
            total = weights.sum()
            if abs(total - 1.0) > 1e-12:
                if total <= 0:
                    raise ValueError("weights sum to zero")
                weights = weights / total
        self._weights = weights

    @classmethod
    def dirac(cls, c: float) -> "EmpiricalMeasure":
        return cls([c])

    @property
    def size(self) -> int:
        return self.atoms.size

    @property
    def uniform(self) -> bool:
        return self._weights is None

    @property
    def weights(self) -> np.ndarray:
        if self._weights is None:
            return np.full(self.atoms.size, 1.0 / self.atoms.size)
        return self._weights

    def expect(self, fn) -> float:
        """E_mu[fn(X)] for a vectorised ``fn``."""
        vals = fn(self.atoms)
        if self._weights is None:
            return float(np.mean(vals))
        return float(np.dot(self._weights, vals))

    @cached_property
    def mean(self) -> float:
        if self._weights is None:
            return float(np.mean(self.atoms))
        return float(np.dot(self._weights, self.atoms))

    @cached_property
    def variance(self) -> float:
        return max(self.expect(lambda a: (a - self.mean) ** 2), 0.0)

    @cached_property
    def sorted(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.atoms, kind="stable")
        return self.atoms[order], self.weights[order]

    def quantile(self, u) -> np.ndarray:
        """Left-continuous quantile function evaluated at u in (0, 1]."""
        xs, ws = self.sorted
        cdf = np.cumsum(ws)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, np.asarray(u, dtype=float), side="left")
        return xs[np.clip(idx, 0, xs.size - 1)]

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n={self.size}, mean={self.mean:.6g})"


def moment(mu: EmpiricalMeasure, k: int) -> float:
    """Weighted k-th raw moment."""
    if k < 1:
        raise ValueError("moment order must be >= 1")
    return mu.expect(lambda a: a**k)


def _merged_quantiles(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    # Quantile coupling: both quantile functions are step functions, so the
    # transport cost is an exact sum over the merged breakpoints.
    _, wa = mu.sorted
    _, wb = nu.sorted
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    breaks = breaks[breaks > 0]
    lengths = np.diff(np.concatenate(([0.0], breaks)))
    mids = breaks - 0.5 * lengths
    return mu.quantile(mids), nu.quantile(mids), lengths


def wasserstein_1d(order: int, mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W_1 or W_2 distance between two atomic measures on R."""
    if order not in (1, 2):
        raise ValueError(f"unsupported Wasserstein order {order!r}; use 1 or 2")
    if mu.uniform and nu.uniform and mu.size == nu.size:
        a = np.sort(mu.atoms)
        b = np.sort(nu.atoms)
        gap = np.abs(a - b)
        if order == 1:
            return float(np.mean(gap))
        return float(np.sqrt(np.mean(gap * gap)))
    qa, qb, lengths = _merged_quantiles(mu, nu)
    gap = np.abs(qa - qb)
    if order == 1:
        return float(np.dot(lengths, gap))
    return float(np.sqrt(np.dot(lengths, gap * gap)))


@dataclass(frozen=True)
class DiscretizationSpec:
    """Grid x_i = i/n with cells [i/n, (i+1)/n), i = -n^2 .. n^2-1."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("grid resolution n must be a positive integer")

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.n**2, self.n**2)

    @property
    def points(self) -> np.ndarray:
        return self.indices / self.n

    def cell(self, i: int) -> tuple[float, float]:
        return i / self.n, (i + 1) / self.n


def cell_index(x: float, n: int) -> int:
    """Index i with i/n <= x < (i+1)/n, for x in the covered range [-n, n)."""
    DiscretizationSpec(n)
    if not (-n <= x < n):
        raise ValueError(f"x={x!r} outside the covered range [{-n}, {n})")
    i = int(np.floor(x * n))
    # floor(x*n) can land one cell off when x*n rounds across an integer
    if (i + 1) / n <= x:
        i += 1
    elif i / n > x:
        i -= 1
    return i


def discretize_grid(samples, n: int) -> np.ndarray:
    """Map samples to the finite-atom approximation xi_n.

    Values in [-n, n) go to the left end of their cell, values below -n^2 to
    -n^2 and values at or above n^2 to n^2.  Everything else (the bands
    [n, n^2) and [-n^2, -n)) is hit by none of the indicators and maps to 0.
    """
    DiscretizationSpec(n)
    s = np.asarray(samples, dtype=float)
    out = np.zeros_like(s)
    covered = (s >= -n) & (s < n)
    idx = np.floor(s[covered] * n)
    left = idx / n
    # same rounding guard as cell_index
    left = np.where(left + 1.0 / n <= s[covered], left + 1.0 / n, left)
    left = np.where(left > s[covered], left - 1.0 / n, left)
    out[covered] = left
    out[s < -(n**2)] = -float(n**2)
    out[s >= n**2] = float(n**2)
    return out


def read_measure(path) -> EmpiricalMeasure:
    """Read a measure from a text column of atoms or an ``atom,weight`` CSV."""
    atoms, weights = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            row = [c.strip() for c in row if c.strip()]
            if not row or row[0].startswith("#"):
                continue
            try:
                atoms.append(float(row[0]))
            except ValueError:
                continue  # header line
            if len(row) > 1:
                weights.append(float(row[1]))
    if weights and len(weights) != len(atoms):
        raise ValueError(f"{path}: mixed weighted and unweighted rows")
    return EmpiricalMeasure(atoms, weights or None)


def write_measure(mu: EmpiricalMeasure, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if mu.uniform:
            for a in mu.atoms:
                w.writerow([repr(float(a))])
        else:
            w.writerow(["atom", "weight"])
            for a, p in zip(mu.atoms, mu.weights):
                w.writerow([repr(float(a)), repr(float(p))])
