"""Equal-weight empirical measures and transport distances between them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_ASSIGNMENT_CAP = 2048


class MeasureError(ValueError):
    pass


class DimensionError(MeasureError):
    pass


class ShapeError(MeasureError):
    pass


class CapacityError(MeasureError):
    pass


class EmpiricalMeasure:
    """N equally weighted atoms in R^dim.

    ``points`` is stored as a read-only float array of shape (N, dim).
    """

    __slots__ = ("points",)

    def __init__(self, points, dim: int | None = None):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if dim in (None, 1) else pts.reshape(-1, dim)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ShapeError(f"expected a non-empty (N, dim) array, got shape {pts.shape}")
        if dim is not None and pts.shape[1] != dim:
            raise DimensionError(f"points have dimension {pts.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("empirical measure contains non-finite coordinates")
        pts.setflags(write=False)
        self.points = pts

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, dim={self.dim})"

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def first_moment(self) -> float:
        return float(np.linalg.norm(self.points, axis=1).mean())

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """(1/N) sum_i g(x_i) for a vectorized g acting on the (N, dim) array."""
        return np.asarray(g(self.points), dtype=float).mean(axis=0)

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header != [f"x{i}" for i in range(len(header))]:
            raise ShapeError(f"unexpected cloud header {header!r}")
        return cls(np.array(body, dtype=float).reshape(-1, len(header)))


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.dim != nu.dim:
        raise ShapeError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.n != nu.n:
        raise ShapeError(f"unequal particle counts are not supported: {mu.n} vs {nu.n}")


def w1_exact_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W1 on the line by pairing order statistics."""
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionError("w1_exact_1d needs one-dimensional measures")
    _check_pair(mu, nu)
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.abs(a - b).mean())


def cost_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cost=None) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return r if cost is None else np.asarray(cost(r), dtype=float)


def optimal_assignment(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cost=None,
                       cap: int = DEFAULT_ASSIGNMENT_CAP) -> np.ndarray:
    """Permutation ``perm`` minimizing sum_i cost(|x_i - y_perm[i]|).

    One-dimensional problems with the plain distance cost are solved by
    sorting; everything else goes through an exact linear assignment.
    """
    _check_pair(mu, nu)
    if mu.dim == 1 and cost is None:
        ia = np.argsort(mu.points[:, 0], kind="stable")
        ib = np.argsort(nu.points[:, 0], kind="stable")
        perm = np.empty(mu.n, dtype=int)
        perm[ia] = ib
        return perm
    if mu.n > cap:
        raise CapacityError(f"assignment size {mu.n} exceeds cap {cap}")
    rows, cols = linear_sum_assignment(cost_matrix(mu, nu, cost))
    perm = np.empty(mu.n, dtype=int)
    perm[rows] = cols
    return perm


def ot_assignment(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                  cost: Callable[[np.ndarray], np.ndarray] | None = None,
                  cap: int = DEFAULT_ASSIGNMENT_CAP) -> float:
    """Exact transport cost min_pi (1/N) sum_i cost(|x_i - y_pi(i)|).

    ``cost`` must be vectorized, vanish at 0 and be nondecreasing; ``None``
    means cost(r) = r, i.e. W1.  Concave costs are never solved by sorting.
    """
    _check_pair(mu, nu)
    if mu.n > cap:
        raise CapacityError(f"assignment size {mu.n} exceeds cap {cap}")
    c = cost_matrix(mu, nu, cost)
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum() / mu.n)


def w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = DEFAULT_ASSIGNMENT_CAP) -> float:
    """Exact W1: sorting on the line, assignment otherwise."""
    if mu.dim == 1:
        return w1_exact_1d(mu, nu)
    return ot_assignment(mu, nu, cap=cap)


def coupling_cost(x, y, cost=None) -> float:
    """Mean cost of an explicit pairing; an upper bound for the transport cost."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), axis=-1)
    return float(np.mean(r if cost is None else cost(r)))


def sliced_w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, n_directions: int = 64,
              seed: int = 0) -> float:
    """Average 1-D W1 over fixed random projections.  Diagnostic only."""
    _check_pair(mu, nu)
    dirs = np.random.default_rng(seed).standard_normal((n_directions, mu.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(mu.points @ dirs.T, axis=0)
    pb = np.sort(nu.points @ dirs.T, axis=0)
    return float(np.abs(pa - pb).mean())
