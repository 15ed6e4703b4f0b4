"""Rough-path lifts of grid paths by piecewise-linear iterated integrals.

Level n of a lift is stored flattened: the component (i_1, ..., i_n) sits at
flat index i_1 d^{n-1} + ... + i_n. In "adjacent" mode a level is an array of
shape (n_segments, d^n); in "all" mode it has shape (p, p, d^n) over every pair
of grid points (zero on and below the diagonal).
"""

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid_increments import HolderEstimate, Partition, holder_seminorm, GridFunction2, loglog_slope

DEFAULT_BUDGET = {"N": 4, "d": 3, "n": 1024}
MEMORY_BUDGET = 2 ** 30


@dataclass(frozen=True)
class GridPath:
    partition: Partition
    values: np.ndarray  # (p, d)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != len(self.partition):
            raise ValueError("one value per partition point is required")
        object.__setattr__(self, "values", v)

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def increments(self):
        return np.diff(self.values, axis=0)

    def restrict(self, idx):
        idx = np.asarray(idx)
        return GridPath(Partition(self.partition.points[idx]), self.values[idx])

    @classmethod
    def from_function(cls, fn, partition):
        """Path t -> fn(t) sampled on the partition; fn returns (p, d) or (p,)."""
        return cls(partition, fn(partition.points))


def tensor_product(a, b):
    """Flattened outer product over the last axis, broadcasting leading axes."""
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(out.shape[:-2] + (-1,))


def segment_signature(dx, N):
    """Levels of the signature of straight segments: (dx)^{(x) n} / n!."""
    levels = [np.array(dx, dtype=float)]
    for n in range(2, N + 1):
        levels.append(tensor_product(levels[-1], dx) / n)
    return levels


def chen_product(a, b):
    """Levels of the concatenation: c^n = a^n + b^n + sum_{k=1}^{n-1} a^k (x) b^{n-k}."""
    out = []
    for n in range(1, len(a) + 1):
        c = a[n - 1] + b[n - 1]
        for k in range(1, n):
            c = c + tensor_product(a[k - 1], b[n - k - 1])
        out.append(c)
    return out


class RoughLift:
    """Stack of lift levels x^1 .. x^N over a partition."""

    def __init__(self, partition, d, levels, pairs="all"):
        if pairs not in ("all", "adjacent"):
            raise ValueError("pairs must be 'all' or 'adjacent'")
        p = len(partition)
        for n, lev in enumerate(levels, start=1):
            want = (p, p, d ** n) if pairs == "all" else (p - 1, d ** n)
            if lev.shape != want:
                raise ValueError(f"level {n} has shape {lev.shape}, expected {want}")
        self.partition = partition
        self.d = d
        self.levels = [np.asarray(lev, dtype=float) for lev in levels]
        self.pairs = pairs

    @property
    def N(self):
        return len(self.levels)

    def adjacent(self, n):
        """Level n on consecutive pairs, shape (n_segments, d^n)."""
        lev = self.levels[n - 1]
        if self.pairs == "adjacent":
            return lev
        i = np.arange(self.partition.n)
        return lev[i, i + 1]

    def tensors(self, i, j):
        """Levels at the pair (i, j) with i <= j."""
        if not 0 <= i <= j < len(self.partition):
            raise ValueError("need 0 <= i <= j < p")
        if self.pairs == "all":
            return [lev[i, j] for lev in self.levels]
        out = [np.zeros(self.d ** n) for n in range(1, self.N + 1)]
        for q in range(i, j):
            out = chen_product(out, [lev[q] for lev in self.levels])
        return out

    def tensor(self, n, i, j):
        return self.tensors(i, j)[n - 1]

    def restrict(self, idx):
        """Lift on the sub-partition given by sorted indices (all mode)."""
        idx = np.asarray(idx)
        part = Partition(self.partition.points[idx])
        if self.pairs == "all":
            return RoughLift(part, self.d, [lev[np.ix_(idx, idx)] for lev in self.levels], "all")
        segs = [self.tensors(int(a), int(b)) for a, b in zip(idx[:-1], idx[1:])]
        return RoughLift(part, self.d, [np.array([s[n] for s in segs]) for n in range(self.N)], "adjacent")

    def level_function(self, n):
        """Level n as a GridFunction2 (all mode)."""
        if self.pairs != "all":
            raise ValueError("level_function needs a lift over all pairs")
        return GridFunction2(self.partition, self.levels[n - 1])

    def to_json(self):
        return json.dumps({
            "N": self.N, "d": self.d, "n": self.partition.n, "pairs": self.pairs,
            "points": self.partition.points.tolist(),
            "levels": [lev.ravel().tolist() for lev in self.levels],
        })

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        part = Partition(data["points"])
        p, d = len(part), data["d"]
        levels = []
        for n, flat in enumerate(data["levels"], start=1):
            shape = (p, p, d ** n) if data["pairs"] == "all" else (p - 1, d ** n)
            levels.append(np.array(flat, dtype=float).reshape(shape))
        return cls(part, d, levels, data["pairs"])

    def __repr__(self):
        return f"RoughLift(N={self.N}, d={self.d}, n={self.partition.n}, pairs={self.pairs!r})"


def check_budget(N, d, n, pairs, budget=None):
    b = dict(DEFAULT_BUDGET, **(budget or {}))
    if N < 1:
        raise ValueError("lift level must be at least 1")
    for name, val in (("N", N), ("d", d), ("n", n)):
        if val > b[name]:
            raise ValueError(f"lift budget exceeded: {name}={val} > {b[name]}")
    p = n + 1
    entries = sum(d ** k for k in range(1, N + 1)) * (p * p if pairs == "all" else n)
    if 8 * entries > b.get("memory", MEMORY_BUDGET):
        raise ValueError(f"lift budget exceeded: memory {8 * entries} bytes > {b.get('memory', MEMORY_BUDGET)}")


def lift_piecewise_linear(path, N, pairs="all", budget=None):
    """Signature lift of the piecewise-linear interpolation of a grid path."""
    n, d = path.partition.n, path.d
    check_budget(N, d, n, pairs, budget)
    seg = segment_signature(path.increments, N)
    if pairs == "adjacent":
        return RoughLift(path.partition, d, seg, "adjacent")
    p = n + 1
    levels = [np.zeros((p, p, d ** k)) for k in range(1, N + 1)]
    for k in range(1, p):
        # rows 0..k-1 of column k from column k-1 extended by segment k-1
        left = [lev[:k, k - 1] for lev in levels]
        right = [s[k - 1][None, :] for s in seg]
        comb = chen_product(left, right)
        for lev, c in zip(levels, comb):
            lev[:k, k] = c
    # level 1 is the raw increment, without accumulated round-off
    levels[0] = np.triu(np.ones((p, p)), k=1)[:, :, None] * (path.values[None, :, :] - path.values[:, None, :])
    return RoughLift(path.partition, d, levels, "all")


def chen_combine(lift, i, j, k):
    """Levels at (i, k) assembled from the pairs (i, j) and (j, k)."""
    if not i <= j <= k:
        raise ValueError("need i <= j <= k")
    return chen_product(lift.tensors(i, j), lift.tensors(j, k))


@dataclass(frozen=True)
class IdentityResidualReport:
    max_abs: float
    max_rel: float
    location: tuple  # grid indices of the worst triple or pair
    level: int
    component: tuple

    def to_dict(self):
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "location": list(self.location),
                "level": self.level, "component": list(self.component)}


def _unflatten(flat, d, n):
    return tuple(int(v) for v in np.unravel_index(flat, (d,) * n)) if n else ()


class _Worst:
    def __init__(self):
        self.rel, self.abs, self.where = -1.0, 0.0, ((), 0, ())

    def update(self, resid, scale, locs, level, d, comp_order):
        if resid.size == 0:
            return
        flat = int(np.argmax(np.abs(resid)))
        row, col = np.unravel_index(flat, resid.shape)
        a = float(abs(resid[row, col]))
        rel = a / scale if scale > 0 else (0.0 if a == 0 else math.inf)
        if rel > self.rel:
            self.rel, self.abs = rel, a
            self.where = (tuple(int(v) for v in locs[row]), level, _unflatten(col, d, comp_order))

    def report(self):
        return IdentityResidualReport(self.abs, max(self.rel, 0.0), *self.where)


def _scale(lev):
    return float(np.max(np.abs(lev))) if lev.size else 0.0


def check_multiplicativity(lift, triples="adjacent"):
    """Largest Chen residual x^n_{ik} - chen(x_{ij}, x_{jk}) over triples and levels.

    `triples` is "adjacent" for (i, i+1, i+2), or "all" for every i < j < k
    (all mode only).
    """
    p = len(lift.partition)
    worst = _Worst()
    if lift.pairs == "adjacent" or p < 3:
        # adjacent storage is generated by Chen's relation itself
        return IdentityResidualReport(0.0, 0.0, (), 1, ())
    if triples == "adjacent":
        trip = np.array([(i, i + 1, i + 2) for i in range(p - 2)])
    else:
        trip = np.array(list(itertools.combinations(range(p), 3)))
    i, j, k = trip.T
    left = [lev[i, j] for lev in lift.levels]
    right = [lev[j, k] for lev in lift.levels]
    comb = chen_product(left, right)
    for n, lev in enumerate(lift.levels, start=1):
        resid = lev[i, k] - comb[n - 1]
        worst.update(resid, _scale(lev), trip, n, lift.d, n)
    return worst.report()


def shuffle_set(i_tuple, j_tuple):
    """All order-preserving interleavings of two index tuples (one per position choice)."""
    i_tuple, j_tuple = tuple(i_tuple), tuple(j_tuple)
    n, m = len(i_tuple), len(j_tuple)
    if n + m > 8:
        raise ValueError("shuffle length budget exceeded: n + m > 8")
    out = []
    for pos in itertools.combinations(range(n + m), n):
        word, a, b = [], iter(i_tuple), iter(j_tuple)
        chosen = set(pos)
        for q in range(n + m):
            word.append(next(a) if q in chosen else next(b))
        out.append(tuple(word))
    return out


@lru_cache(maxsize=None)
def shuffle_matrix(d, n, m):
    """Counts M[(a, b), c] of shuffles of words a (length n) and b (length m) equal to c."""
    M = np.zeros((d ** n * d ** m, d ** (n + m)))
    for a_flat, a in enumerate(itertools.product(range(d), repeat=n)):
        for b_flat, b in enumerate(itertools.product(range(d), repeat=m)):
            for w in shuffle_set(a, b):
                M[a_flat * d ** m + b_flat, np.ravel_multi_index(w, (d,) * (n + m))] += 1
    return M


def check_geometricity(lift):
    """Largest shuffle residual x^n (x) x^m - sum over shuffles of x^{n+m}, over pairs."""
    if lift.N < 2:
        raise ValueError("geometricity needs a lift of level at least 2")
    d = lift.d
    if lift.pairs == "all":
        i, j = np.triu_indices(len(lift.partition), k=1)
        locs = np.stack([i, j], axis=1)
        levels = [lev[i, j] for lev in lift.levels]
    else:
        q = np.arange(lift.partition.n)
        locs = np.stack([q, q + 1], axis=1)
        levels = lift.levels
    worst = _Worst()
    for n in range(1, lift.N):
        for m in range(1, lift.N - n + 1):
            lhs = tensor_product(levels[n - 1], levels[m - 1])
            rhs = levels[n + m - 1] @ shuffle_matrix(d, n, m).T
            scale = max(_scale(lhs), _scale(levels[n + m - 1]))
            worst.update(lhs - rhs, scale, locs, n + m, d, n + m)
    return worst.report()


def holder_profile(lift, min_points=8):
    """Per-level Hölder exponent estimates from dyadic lags.

    For lags k = 1, 2, 4, ... the statistic max_i |x^n_{i, i+k}| is regressed on the
    mean time span in log-log scale. The seminorm of level n is then taken at the
    exponent n times the level-1 estimate.
    """
    if lift.pairs != "all":
        raise ValueError("holder_profile needs a lift over all pairs")
    p = len(lift.partition)
    if p < min_points:
        raise ValueError(f"too few grid points for a Hölder profile: {p} < {min_points}")
    t = lift.partition.points
    lags = [2 ** e for e in range(int(math.log2(p - 1)) + 1) if 2 ** e <= (p - 1) // 2]
    if len(lags) < 2:
        raise ValueError("too few pairs for a Hölder profile")
    exps = []
    for lev in lift.levels:
        spans, stats = [], []
        for k in lags:
            i = np.arange(p - k)
            spans.append(float(np.mean(t[i + k] - t[i])))
            stats.append(float(np.max(np.abs(lev[i, i + k]))))
        stats = np.array(stats)
        exps.append(loglog_slope(spans, stats) if np.all(stats > 0) else float("nan"))
    gamma1 = exps[0]
    out = []
    for n, (lev, e) in enumerate(zip(lift.levels, exps), start=1):
        mu = n * gamma1 if np.isfinite(gamma1) and gamma1 > 0 else float(n)
        est = holder_seminorm(GridFunction2(lift.partition, lev), mu)
        out.append(HolderEstimate(e, est.norm, est.pairs_used))
    return out
