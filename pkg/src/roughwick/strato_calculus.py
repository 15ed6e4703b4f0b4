"""Controlled expansions of f(x), modified Riemann sums for the pathwise
(Stratonovich-type) integral and change-of-variable residuals."""

import math
from dataclasses import dataclass

import numpy as np

from .grid_increments import GridFunction2, table_from_values
from .rough_lift import GridPath, lift_piecewise_linear, tensor_product


def _powers(dx, k):
    """Flattened k-fold tensor power of increments dx (rows), shape (rows, d^k)."""
    out = np.ones(dx.shape[:-1] + (1,))
    for _ in range(k):
        out = tensor_product(out, dx)
    return out


def _pairs(path, pairs):
    p = len(path.partition)
    if pairs == "adjacent":
        i = np.arange(p - 1)
        return i, i + 1
    if pairs == "all":
        return np.triu_indices(p, k=1)
    raise ValueError("pairs must be 'adjacent' or 'all'")


@dataclass
class ControlledDecomposition:
    """Coefficients zeta^k (k = 1..N-1) at grid points and Taylor remainders r^k on pairs.

    zeta[k - 1] has shape (p, d^k); remainders[k] has shape (pairs, d^k) with
    remainders[0] of shape (pairs, 1). `pair_index` lists the (i, j) pairs used.
    """

    path: GridPath
    N: int
    zeta: list
    remainders: list
    pair_index: tuple

    def remainder_function(self, k=0):
        """r^k as a GridFunction2 (zero off the stored pairs)."""
        p = len(self.path.partition)
        r = self.remainders[k]
        vals = np.zeros((p, p, r.shape[1]))
        vals[self.pair_index] = r
        return GridFunction2(self.path.partition, vals)


def controlled_decomposition(f, path, N, pairs="adjacent"):
    """zeta^k_s = d^k f(x_s) and r^k_st = delta[d^k f(x)]_st - sum_p d^{k+p} f(x_s) (dx)^p / p!."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if f.max_order < N:
        raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {N}")
    if f.d != path.d:
        raise ValueError("function and path dimensions differ")
    x = path.values
    zeta = [f.derivative_tensor(k, x) for k in range(1, N)]
    i, j = _pairs(path, pairs)
    dx = x[j] - x[i]
    rem = []
    for k in [0] + list(range(1, N - 1)):
        val = f.derivative_tensor(k, x) if k else f(x)[:, None]
        r = val[j] - val[i]
        for q in range(1, N - k):
            dk = f.derivative_tensor(k + q, x[i]).reshape(len(i), -1, f.d ** q)
            r = r - np.einsum("rab,rb->ra", dk, _powers(dx, q)) / math.factorial(q)
        rem.append(r)
    return ControlledDecomposition(path, N, zeta, rem, (i, j))


@dataclass
class ControlledIntegrand:
    """Integrand m with coefficients mu^k, k = 1..N-1, at grid points.

    m has shape (p, d); mu[k - 1] has shape (p, d^{k+1}) indexed by (i, i_1, ..., i_k)
    and pairs with the lift component x^{k+1}(i_k, ..., i_1, i).
    """

    m: np.ndarray
    mu: list

    @property
    def N(self):
        return len(self.mu) + 1


def gradient_integrand(f, path, N):
    """m = grad f(x) with mu^k = d^{k+1} f(x)."""
    if f.max_order < N:
        raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {N}")
    x = path.values
    return ControlledIntegrand(f.gradient(x), [f.derivative_tensor(k + 1, x) for k in range(1, N)])


def _reverse_axes(t, d, k):
    """Reorder flattened (i, i_1, ..., i_k) components to (i_k, ..., i_1, i)."""
    shape = t.shape[:-1]
    arr = t.reshape(shape + (d,) * (k + 1))
    lead = len(shape)
    arr = np.transpose(arr, tuple(range(lead)) + tuple(range(lead + k, lead - 1, -1)))
    return arr.reshape(shape + (-1,))


def integrand_summands(integrand, lift, path=None):
    """Per-segment terms m(i) x^1(i) + sum_k mu^k x^{k+1} at left endpoints."""
    N = integrand.N
    if lift.N < N:
        raise ValueError(f"lift level {lift.N} is below the required {N}")
    d = lift.d
    q = lift.partition.n
    terms = np.sum(integrand.m[:q] * lift.adjacent(1), axis=1)
    for k, mu in enumerate(integrand.mu, start=1):
        terms = terms + np.sum(_reverse_axes(mu[:q], d, k) * lift.adjacent(k + 1), axis=1)
    return terms


def integrate_controlled(integrand, lift):
    """Compensated sums over every pair of grid points, as a GridFunction2."""
    terms = integrand_summands(integrand, lift)
    cum = np.concatenate([[0.0], np.cumsum(terms)])
    return GridFunction2(lift.partition, cum[None, :] - cum[:, None])


def strato_summands(f, path, lift=None, N=None, variant="levels"):
    """Per-segment terms of the modified Riemann sum for int <grad f(x), dx>."""
    x = path.values
    if variant == "levels":
        if lift is None:
            raise ValueError("the levels variant needs a lift")
        N = lift.N if N is None else N
        if lift.N < N:
            raise ValueError(f"lift level {lift.N} is below the required {N}")
        if f.max_order < N:
            raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {N}")
        xl = x[:-1]
        return sum(np.sum(f.derivative_tensor(k, xl) * lift.adjacent(k), axis=1) for k in range(1, N + 1))
    if variant == "powers":
        if N is None:
            N = lift.N if lift is not None else 1
        if f.max_order < N:
            raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {N}")
        return taylor_summands(f, x[:-1], np.diff(x, axis=0), N)
    raise ValueError("variant must be 'levels' or 'powers'")


def taylor_summands(f, x, dx, order):
    """sum_{1 <= |alpha| <= order} d^alpha f(x) dx^alpha / alpha! over segments."""
    total = np.zeros(x.shape[0])
    for k in range(1, order + 1):
        total = total + np.sum(f.derivative_tensor(k, x) * _powers(dx, k), axis=1) / math.factorial(k)
    return total


def strato_sum(f, path, lift=None, N=None, variant="levels"):
    """Single-partition modified Riemann sum over the whole path."""
    return float(np.sum(strato_summands(f, path, lift, N, variant)))


def order2_sums(f, path, lift):
    """Order-2 sums written out with explicit indices: (levels, products)."""
    x = path.values[:-1]
    dx = np.diff(path.values, axis=0)
    d = path.d
    x2 = lift.adjacent(2).reshape(-1, d, d)
    first = np.zeros(x.shape[0])
    lev = np.zeros(x.shape[0])
    prod = np.zeros(x.shape[0])
    for i in range(d):
        first += f.partial((i,), x) * dx[:, i]
        for j in range(d):
            dij = f.partial((i, j), x)
            lev += dij * x2[:, i, j]
            prod += 0.5 * dij * dx[:, i] * dx[:, j]
    return float(np.sum(first + lev)), float(np.sum(first + prod))


def change_of_variable_residual(f, path, N, step_levels, variant="levels", reference=None, budget=None):
    """Convergence table of |f(x_T) - f(x_0) - strato_sum| over sub-partitions.

    `step_levels` lists strides into the path's grid, coarse to fine (e.g. 2^L .. 1);
    each sum uses the sub-path at that stride and its piecewise-linear lift.
    """
    ref = float(f(path.values[-1]) - f(path.values[0])) if reference is None else reference
    meshes, values = [], []
    for step in step_levels:
        idx = np.arange(0, len(path.partition), step)
        if idx[-1] != len(path.partition) - 1:
            raise ValueError("stride must divide the number of intervals")
        sub = path.restrict(idx)
        lift = lift_piecewise_linear(sub, N, pairs="adjacent", budget=budget) if variant == "levels" else None
        values.append(strato_sum(f, sub, lift, N, variant))
        meshes.append(sub.partition.mesh)
    return table_from_values(np.arange(len(step_levels)), meshes, values, reference=ref)
