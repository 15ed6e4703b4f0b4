"""Increments on a grid: the delta operator, Hölder seminorms and
compensated Riemann sums."""

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class Partition:
    """Strictly increasing times t_0 < ... < t_n."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).ravel()
        if pts.size < 2:
            raise ValueError("partition needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("partition points must be strictly increasing")
        pts.setflags(write=False)
        self.points = pts

    @classmethod
    def uniform(cls, n, T=1.0, start=0.0):
        return cls(np.linspace(start, T, n + 1))

    @classmethod
    def dyadic(cls, level, T=1.0, start=0.0):
        return cls.uniform(2 ** level, T, start)

    @property
    def n(self):
        return self.points.size - 1

    @property
    def mesh(self):
        return float(np.max(np.diff(self.points)))

    @property
    def start(self):
        return float(self.points[0])

    @property
    def end(self):
        return float(self.points[-1])

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"Partition(n={self.n}, [{self.start}, {self.end}], mesh={self.mesh:.3g})"

    def index_of(self, t):
        """Index of the grid point equal to t (to 1e-12 relative)."""
        i = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid point")
        return i

    def sub_indices(self, coarse):
        """Indices of the points of `coarse` inside this partition."""
        idx = np.searchsorted(self.points, coarse.points)
        idx = np.clip(idx, 0, self.n)
        if not np.allclose(self.points[idx], coarse.points, rtol=0, atol=1e-12):
            raise ValueError("partition is not a refinement of the coarse one")
        return idx

    def restrict(self, step):
        """Every `step`-th point; `step` must divide n."""
        if self.n % step:
            raise ValueError("step must divide the number of intervals")
        return Partition(self.points[::step])

    def refine(self):
        mid = 0.5 * (self.points[:-1] + self.points[1:])
        out = np.empty(2 * self.n + 1)
        out[0::2] = self.points
        out[1::2] = mid
        return Partition(out)


def dyadic_family(base, levels):
    """Nested refinements base, base.refine(), ... (levels partitions)."""
    fam = [base]
    for _ in range(levels - 1):
        fam.append(fam[-1].refine())
    return fam


def _as_matrix(values, rows):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {v.shape[0]}")
    return v


class GridFunction1:
    """A vector in R^m at every partition point."""

    def __init__(self, partition, values):
        self.partition = partition
        self.values = _as_matrix(values, len(partition))

    @property
    def m(self):
        return self.values.shape[1]

    def __getitem__(self, i):
        return self.values[i]

    def __add__(self, other):
        return GridFunction1(self.partition, self.values + other.values)

    def __sub__(self, other):
        return GridFunction1(self.partition, self.values - other.values)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "t_i"] + [f"v_{k + 1}" for k in range(self.m)])
            for i, t in enumerate(self.partition.points):
                w.writerow([i, repr(float(t))] + [repr(float(v)) for v in self.values[i]])


class GridFunction2:
    """Values on index pairs i <= j, stored densely; entries with i >= j are zero."""

    def __init__(self, partition, values):
        v = np.asarray(values, dtype=float)
        p = len(partition)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.shape[:2] != (p, p):
            raise ValueError(f"expected shape ({p}, {p}, m), got {v.shape}")
        self.partition = partition
        self.values = v * _upper_mask(p)[:, :, None]

    @property
    def m(self):
        return self.values.shape[2]

    def __call__(self, i, j):
        return self.values[i, j]

    def __add__(self, other):
        return GridFunction2(self.partition, self.values + other.values)

    def __sub__(self, other):
        return GridFunction2(self.partition, self.values - other.values)

    def restrict(self, idx):
        idx = np.asarray(idx)
        return GridFunction2(Partition(self.partition.points[idx]), self.values[np.ix_(idx, idx)])

    def adjacent(self):
        i = np.arange(self.partition.n)
        return self.values[i, i + 1]

    def to_csv(self, path):
        pts = self.partition.points
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "t_i", "t_j"] + [f"v_{k + 1}" for k in range(self.m)])
            for i in range(len(pts)):
                for j in range(i, len(pts)):
                    w.writerow([i, j, repr(float(pts[i])), repr(float(pts[j]))]
                               + [repr(float(v)) for v in self.values[i, j]])


class GridFunction3:
    """Values on index triples i <= j <= k, evaluated lazily from `evaluate(i, j, k)`."""

    def __init__(self, partition, evaluate, m):
        self.partition = partition
        self._evaluate = evaluate
        self.m = m

    def __call__(self, i, j, k):
        i, j, k = np.broadcast_arrays(*(np.asarray(a) for a in (i, j, k)))
        return self._evaluate(i, j, k)

    def __add__(self, other):
        return GridFunction3(self.partition, lambda i, j, k: self(i, j, k) + other(i, j, k), self.m)

    def __sub__(self, other):
        return GridFunction3(self.partition, lambda i, j, k: self(i, j, k) - other(i, j, k), self.m)

    def adjacent(self):
        i = np.arange(self.partition.n - 1)
        return self(i, i + 1, i + 2)

    def max_abs(self):
        """max |value| over all triples i <= j <= k, swept one middle index at a time."""
        p = len(self.partition)
        best = 0.0
        for j in range(p):
            i, k = np.meshgrid(np.arange(j + 1), np.arange(j, p), indexing="ij")
            v = self(i, np.full_like(i, j), k)
            if v.size:
                best = max(best, float(np.max(np.abs(v))))
        return best


def _upper_mask(p):
    return np.triu(np.ones((p, p)), k=1)


def delta1(g):
    """(delta g)_{ij} = g_j - g_i."""
    v = g.values
    return GridFunction2(g.partition, v[None, :, :] - v[:, None, :])


def delta2(h):
    """(delta h)_{ijk} = h_{ik} - h_{ij} - h_{jk}."""
    v = h.values
    return GridFunction3(h.partition, lambda i, j, k: v[i, k] - v[i, j] - v[j, k], h.m)


def cup(a, b):
    """Product of increments sharing the junction point.

    (g h)_{st} = g_s h_{st} for g of order 1 and h of order 2, (g h)_{st} = g_{st} h_t
    for the reverse, (g h)_{sut} = g_{su} h_{ut} for two 2-increments, and likewise
    with 3-increments. Components multiply elementwise.
    """
    kinds = (_order(a), _order(b))
    part = a.partition
    if kinds == (1, 1):
        return GridFunction1(part, a.values * b.values)
    if kinds == (1, 2):
        return GridFunction2(part, a.values[:, None, :] * b.values)
    if kinds == (2, 1):
        return GridFunction2(part, a.values * b.values[None, :, :])
    if kinds == (2, 2):
        return GridFunction3(part, lambda i, j, k: a.values[i, j] * b.values[j, k], max(a.m, b.m))
    if kinds == (1, 3):
        return GridFunction3(part, lambda i, j, k: a.values[i] * b(i, j, k), max(a.m, b.m))
    if kinds == (3, 1):
        return GridFunction3(part, lambda i, j, k: a(i, j, k) * b.values[k], max(a.m, b.m))
    raise ValueError(f"unsupported product of orders {kinds}")


def _order(g):
    for cls, k in ((GridFunction1, 1), (GridFunction2, 2), (GridFunction3, 3)):
        if isinstance(g, cls):
            return k
    raise TypeError(type(g))


@dataclass(frozen=True)
class HolderEstimate:
    exponent: float
    norm: float
    pairs_used: int


def holder_seminorm(h, mu):
    """max over i < j of |h_ij|_inf / (t_j - t_i)^mu."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    p = len(h.partition)
    if p < 2:
        raise ValueError("empty increment set")
    i, j = np.triu_indices(p, k=1)
    t = h.partition.points
    mag = np.max(np.abs(h.values[i, j]), axis=-1)
    ratio = mag / (t[j] - t[i]) ** mu
    return HolderEstimate(float(mu), float(np.max(ratio)), int(i.size))


def loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class ConvergenceTable:
    """Sums S_k over refinement levels, with errors and the observed order.

    Without a reference the errors are measured against the extrapolated limit and
    the order is fitted on |S_k - S_{k+1}|; with a reference both use |S_k - ref|.
    """

    levels: np.ndarray
    meshes: np.ndarray
    values: np.ndarray
    reference: Optional[float]
    extrapolated: float
    order: float

    @property
    def errors(self):
        target = self.extrapolated if self.reference is None else self.reference
        return np.abs(self.values - target)

    @property
    def local_orders(self):
        e, h = self.errors, self.meshes
        out = np.full(e.size, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[1:] = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
        out[~np.isfinite(out)] = np.nan
        return out

    def rows(self):
        return list(zip(self.levels.tolist(), self.meshes.tolist(), self.values.tolist(),
                        self.errors.tolist(), self.local_orders.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.reference is None:
                w.writerow(["level", "mesh", "sum", "abs_err_vs_extrapolated"])
                for lev, h, v, e, _ in self.rows():
                    w.writerow([lev, _fmt(h), _fmt(v), _fmt(e)])
            else:
                w.writerow(["level", "mesh", "value", "ref", "abs_err", "observed_order"])
                for lev, h, v, e, o in self.rows():
                    w.writerow([lev, _fmt(h), _fmt(v), _fmt(self.reference), _fmt(e), _fmt(o)])


def _fmt(x):
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def fit_order(meshes, errors):
    """Slope of log error against log mesh over the last ceil(L/2) entries.

    Exact zeros are dropped; nan when fewer than two usable points remain.
    """
    meshes, errors = np.asarray(meshes, float), np.asarray(errors, float)
    tail = int(math.ceil(meshes.size / 2))
    h, e = meshes[-tail:], errors[-tail:]
    keep = e > 0
    if keep.sum() < 2:
        return float("nan")
    return loglog_slope(h[keep], e[keep])


def table_from_values(levels, meshes, values, reference=None):
    levels = np.asarray(levels)
    meshes = np.asarray(meshes, float)
    values = np.asarray(values, float)
    if values.size < 3:
        raise ValueError("insufficient refinement for order estimate")
    if reference is None:
        # successive differences share the error's rate without the bias of |S_k - S_K|
        order = fit_order(meshes[:-1], np.abs(np.diff(values)))
        extrap = float(values[-1])
        # Richardson step with the order read off the last three sums
        d1, d2 = values[-2] - values[-3], values[-1] - values[-2]
        ratio = meshes[-2] / meshes[-1]
        if d1 * d2 > 0 and abs(d1) > abs(d2) and ratio > 1:
            local = math.log(d1 / d2) / math.log(meshes[-3] / meshes[-2])
            extrap = float(values[-1] + d2 / (ratio ** local - 1.0))
    else:
        order = fit_order(meshes, np.abs(values - reference))
        extrap = float(values[-1])
    return ConvergenceTable(levels, meshes, values, reference, extrap, order)


def compensated_integral(summand: Callable, partitions: Sequence[Partition]):
    """Riemann sums S_k = sum_i g(t_i, t_{i+1}) over a nested family of partitions.

    `summand(s, t)` takes arrays of left and right endpoints and returns the
    2-increment g_{st} at each consecutive pair.
    """
    if len(partitions) < 3:
        raise ValueError("insufficient refinement for order estimate")
    for coarse, fine in zip(partitions[:-1], partitions[1:]):
        fine.sub_indices(coarse)
    values = []
    for part in partitions:
        pts = part.points
        values.append(float(np.sum(np.asarray(summand(pts[:-1], pts[1:]), dtype=float))))
    return table_from_values(np.arange(len(partitions)), [p.mesh for p in partitions], values)
