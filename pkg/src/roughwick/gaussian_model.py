"""Covariance models for centered Gaussian processes with i.i.d. coordinates,
exact-covariance sampling, smooth bump test functions and the operator A."""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .grid_increments import Partition

BLOCK = 256


class QuadratureError(RuntimeError):
    pass


def fbm_covariance(s, t, H):
    """R_st = (t^2H + s^2H - |t - s|^2H) / 2."""
    if not 0 < H < 1:
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {H}")
    s, t = np.asarray(s, float), np.asarray(t, float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("times must be nonnegative")
    h2 = 2 * H
    return 0.5 * (t ** h2 + s ** h2 - np.abs(t - s) ** h2)


class GaussianModel:
    """Covariance R_st of each coordinate of a centered process on [0, T]."""

    T: float
    d: int

    def covariance(self, s, t):
        raise NotImplementedError

    def variance(self, t):
        t = np.asarray(t, float)
        return self.covariance(t, t)

    def variance_derivative(self, t):
        raise NotImplementedError

    def partial_s_covariance(self, s, y):
        raise NotImplementedError

    def a_kernel(self, s, y, offset=None):
        """Kernel k(s, y) with A beta(s) = int k(s, y) beta'(y) dy.

        `offset`, when given, is s - y computed without cancellation.
        """
        return -self.partial_s_covariance(s, y)

    def max_variance(self):
        t = np.linspace(0.0, self.T, 2049)
        return float(np.max(self.variance(t)))

    def covariance_matrix(self, points):
        p = np.asarray(points, float)
        c = self.covariance(p[:, None], p[None, :])
        return 0.5 * (c + c.T)

    def describe(self):
        return {"model": type(self).__name__, "T": self.T, "d": self.d}


@dataclass(frozen=True)
class FbmModel(GaussianModel):
    H: float
    T: float = 1.0
    d: int = 1

    def __post_init__(self):
        if not 0 < self.H < 1:
            raise ValueError(f"Hurst parameter must lie in (0, 1), got {self.H}")

    def covariance(self, s, t):
        return fbm_covariance(s, t, self.H)

    def variance(self, t):
        return np.asarray(t, float) ** (2 * self.H)

    def variance_derivative(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore"):
            return 2 * self.H * t ** (2 * self.H - 1)

    def partial_s_covariance(self, s, y):
        s, y = np.asarray(s, float), np.asarray(y, float)
        e = 2 * self.H - 1
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.H * (s ** e - np.abs(s - y) ** e * np.sign(s - y))

    def a_kernel(self, s, y, offset=None):
        # the s^{2H-1} part of the derivative integrates to zero against beta'
        r = np.asarray(s, float) - np.asarray(y, float) if offset is None else np.asarray(offset, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = self.H * np.abs(r) ** (2 * self.H - 1) * np.sign(r)
        return np.where(r == 0, 0.0, k)

    def max_variance(self):
        return self.T ** (2 * self.H)

    def describe(self):
        return {"model": "fbm", "H": self.H, "T": self.T, "d": self.d}


@dataclass(frozen=True, eq=False)
class CovarianceModel(GaussianModel):
    """A model given by user callables; ties are broken by object identity."""

    cov: Callable
    var_deriv: Callable
    partial_s: Callable
    T: float = 1.0
    d: int = 1
    name: str = "custom"

    def covariance(self, s, t):
        return np.asarray(self.cov(np.asarray(s, float), np.asarray(t, float)), float)

    def variance_derivative(self, t):
        return np.asarray(self.var_deriv(np.asarray(t, float)), float)

    def partial_s_covariance(self, s, y):
        return np.asarray(self.partial_s(np.asarray(s, float), np.asarray(y, float)), float)

    def describe(self):
        return {"model": self.name, "T": self.T, "d": self.d}


def constant_model(c=0.0, T=1.0, d=1):
    """R_st = c for all s, t: a degenerate model whose variance never changes."""
    return CovarianceModel(
        cov=lambda s, t: np.full(np.broadcast(s, t).shape, float(c)),
        var_deriv=lambda t: np.zeros_like(t),
        partial_s=lambda s, y: np.zeros(np.broadcast(s, y).shape),
        T=T, d=d, name="constant")


# ---------------------------------------------------------------- bumps

@dataclass(frozen=True)
class Bump:
    """scale * exp(-1 / (1 - u^2)) with u = (t - center) / width, zero for |u| >= 1."""

    center: float
    width: float
    scale: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("bump width must be positive")

    @property
    def support(self):
        return (self.center - self.width, self.center + self.width)

    def value(self, t):
        u = (np.asarray(t, float) - self.center) / self.width
        inside = np.abs(u) < 1
        q = np.where(inside, 1 - u * u, 1.0)
        return np.where(inside, self.scale * np.exp(-1.0 / q), 0.0)

    def derivative(self, t):
        u = (np.asarray(t, float) - self.center) / self.width
        inside = np.abs(u) < 1
        q = np.where(inside, 1 - u * u, 1.0)
        val = np.where(inside, self.scale * np.exp(-1.0 / q), 0.0)
        return val * (-2 * u / q ** 2) / self.width

    def __call__(self, t):
        return self.value(t)


@dataclass(frozen=True)
class BumpSum:
    """Linear combination sum_k coeff_k * bump_k."""

    terms: tuple = ()

    @property
    def support(self):
        if not self.terms:
            return (0.0, 0.0)
        return (min(b.support[0] for _, b in self.terms), max(b.support[1] for _, b in self.terms))

    def value(self, t):
        return sum((c * b.value(t) for c, b in self.terms), np.zeros(np.shape(t)))

    def derivative(self, t):
        return sum((c * b.derivative(t) for c, b in self.terms), np.zeros(np.shape(t)))

    def __call__(self, t):
        return self.value(t)


ZERO_BUMP = BumpSum(())


def is_zero(beta):
    return beta is None or (isinstance(beta, BumpSum) and not beta.terms)


def check_support(beta, T):
    lo, hi = beta.support
    if not is_zero(beta) and not (0 < lo and hi < T):
        raise ValueError(f"bump support {beta.support} must lie inside (0, {T})")


# ---------------------------------------------------------------- quadrature

@lru_cache(maxsize=None)
def _gauss(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1), 0.5 * w


@lru_cache(maxsize=None)
def graded_rule(level, base_panels=8, q=8, ratio=0.35):
    """Composite Gauss-Legendre rule on [0, 1], geometrically graded toward 0.

    The first of base_panels * 2^level uniform panels is split into 60 + 20 level
    geometric layers so integrable endpoint singularities are resolved.
    """
    n_panels = base_panels * 2 ** level
    h = 1.0 / n_panels
    layers = 60 + 20 * level
    edges = np.concatenate(([0.0], h * ratio ** np.arange(layers, 0, -1), h * np.arange(1, n_panels + 1)))
    x, w = _gauss(q)
    a, b = edges[:-1], edges[1:]
    nodes = (a[:, None] + (b - a)[:, None] * x[None, :]).ravel()
    weights = ((b - a)[:, None] * w[None, :]).ravel()
    return nodes, weights


@lru_cache(maxsize=None)
def uniform_rule(level, base_panels=8, q=8):
    n_panels = base_panels * 2 ** level
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    x, w = _gauss(q)
    a, b = edges[:-1], edges[1:]
    return (a[:, None] + (b - a)[:, None] * x).ravel(), ((b - a)[:, None] * w).ravel()


def converge(estimate, rtol=1e-8, atol=1e-14, max_level=9, start=0):
    """Evaluate estimate(level) for increasing levels until successive results agree."""
    prev = np.asarray(estimate(start), float)
    for level in range(start + 1, max_level + 1):
        cur = np.asarray(estimate(level), float)
        diff = np.max(np.abs(cur - prev)) if cur.size else 0.0
        scale = np.max(np.abs(cur)) if cur.size else 0.0
        if diff <= rtol * scale + atol:
            return cur
        prev = cur
    raise QuadratureError(f"quadrature did not converge: last two estimates {prev!r} and {cur!r}")


def split_integral(kernel, s, lo, hi, fn, level, base_panels=8):
    """int_lo^hi kernel(s, y) fn(y) dy for each s, split at y = s and graded toward it."""
    s = np.atleast_1d(np.asarray(s, float))
    u, w = graded_rule(level, base_panels)
    c = np.clip(s, lo, hi)[:, None]
    total = np.zeros(s.shape)
    for length, sign in ((c - lo, -1.0), (hi - c, 1.0)):
        step = sign * length * u[None, :]
        y = c + step
        offset = (s[:, None] - c) - step
        total += np.sum(kernel(s[:, None], y, offset) * fn(y) * (length * w[None, :]), axis=1)
    return total


def _bump_eval(model, beta, s, quadrature_n, rtol):
    s = np.atleast_1d(np.asarray(s, float))
    if is_zero(beta):
        return np.zeros(s.shape)
    lo, hi = beta.support
    base = max(quadrature_n // 8, 1)
    return converge(lambda lev: split_integral(model.a_kernel, s, lo, hi, beta.derivative, lev, base),
                    rtol=rtol)


def operator_A(model, beta, s, quadrature_n=64, rtol=1e-8):
    """A beta(s) = -int_0^T d_s R(s, y) beta'(y) dy, vectorized over s."""
    if quadrature_n < 64:
        raise ValueError("quadrature_n must be at least 64")
    check_support(beta, model.T)
    scalar = np.ndim(s) == 0
    s_arr = np.atleast_1d(np.asarray(s, float))
    if np.any(s_arr < 0) or np.any(s_arr > model.T):
        raise ValueError("s must lie in [0, T]")
    out = _bump_eval(model, beta, s_arr, quadrature_n, rtol)
    return float(out[0]) if scalar else out


def integrate_A(model, beta, a, b, rtol=1e-8):
    """int_a^b A beta(s) ds by composite Gauss-Legendre with doubling."""
    if a == b or is_zero(beta):
        return 0.0
    check_support(beta, model.T)
    lo, hi = beta.support
    cuts = np.unique(np.clip([a, lo, hi, b], a, b))

    def estimate(level):
        u, w = uniform_rule(level)
        total = 0.0
        for x0, x1 in zip(cuts[:-1], cuts[1:]):
            nodes = x0 + (x1 - x0) * u
            total += float(np.sum(operator_A(model, beta, nodes, rtol=rtol * 0.1) * w) * (x1 - x0))
        return total

    return float(converge(estimate, rtol=rtol, start=1))


def inner_product_indicator_bump(model, a, b, beta, j, l):
    """<1_[a,b) e_l, beta e_j> in the reproducing space: 1_{j=l} int_a^b A beta."""
    if not 0 <= a <= b <= model.T:
        raise ValueError("need 0 <= a <= b <= T")
    if j != l:
        return 0.0
    return integrate_A(model, beta, a, b)


def accumulated_A(model, beta, rho):
    """int_0^rho A beta(s) ds."""
    if not 0 <= rho <= model.T:
        raise ValueError("rho must lie in [0, T]")
    return integrate_A(model, beta, 0.0, rho)


def h_norm_sq(model, phis, rtol=1e-8):
    """sum_j int int phi_j'(u) phi_j'(v) R_uv du dv, the squared norm of x(phi)."""
    total = 0.0
    for beta in phis:
        if is_zero(beta):
            continue
        check_support(beta, model.T)
        lo, hi = beta.support

        def estimate(level, beta=beta, lo=lo, hi=hi):
            u, w = uniform_rule(level)
            nodes = lo + (hi - lo) * u
            inner = converge(lambda lev: split_integral(lambda a, b, _: model.covariance(a, b),
                                                        nodes, lo, hi, beta.derivative, lev),
                             rtol=rtol * 0.1)
            return float(np.sum(beta.derivative(nodes) * inner * w) * (hi - lo))

        total += float(converge(estimate, rtol=rtol, start=1))
    return total


def path_functional_weights(partition, beta):
    """Weights w with x(beta) = -int x_u beta'(u) du ~ sum_i w_i x_{t_i} (trapezoid)."""
    t = partition.points
    trap = np.zeros(t.size)
    dt = np.diff(t)
    trap[:-1] += 0.5 * dt
    trap[1:] += 0.5 * dt
    if is_zero(beta):
        return np.zeros(t.size)
    return -beta.derivative(t) * trap


# ---------------------------------------------------------------- sampling

@dataclass
class PathEnsemble:
    partition: Partition
    paths: np.ndarray  # (n_samples, n + 1, d)
    seed: int
    model: Optional[GaussianModel] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.paths.shape[0]

    @property
    def d(self):
        return self.paths.shape[2]

    def sidecar(self):
        info = self.model.describe() if self.model is not None else {"model": "unknown"}
        return {"model": info.get("model"), "H": info.get("H"), "T": info.get("T"),
                "d": self.d, "seed": self.seed, "n": self.partition.n, "n_samples": self.n_samples}

    def to_csv(self, path, sidecar_path=None):
        t = self.partition.points
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "i", "t"] + [f"x_{k + 1}" for k in range(self.d)])
            for s in range(self.n_samples):
                for i in range(t.size):
                    w.writerow([s, i, repr(float(t[i]))] + [repr(float(v)) for v in self.paths[s, i]])
        if sidecar_path is not None:
            with open(sidecar_path, "w") as fh:
                json.dump(self.sidecar(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, sidecar_path):
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        n, d, ns = meta["n"], meta["d"], meta["n_samples"]
        paths = np.zeros((ns, n + 1, d))
        times = np.zeros(n + 1)
        with open(path) as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                s, i = int(row[0]), int(row[1])
                times[i] = float(row[2])
                paths[s, i] = [float(v) for v in row[3:]]
        return cls(Partition(times), paths, meta["seed"], None, meta)


@lru_cache(maxsize=32)
def covariance_factor(model, partition):
    """(free indices, L) with L L^T the covariance restricted to nonzero-variance points."""
    cov = model.covariance_matrix(partition.points)
    diag = np.diag(cov)
    free = np.flatnonzero(diag > 0)
    c = cov[np.ix_(free, free)]
    if free.size == 0:
        return free, np.zeros((0, 0))
    try:
        return free, np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(c)
    trace = float(np.trace(c))
    if vals.min() < -1e-10 * trace:
        raise ValueError("covariance not PSD on grid")
    floor = 1e-13 * trace / c.shape[0]
    c2 = (vecs * np.maximum(vals, floor)) @ vecs.T
    try:
        return free, np.linalg.cholesky(0.5 * (c2 + c2.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance not PSD on grid") from exc


def block_rng(seed, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def sample_block(model, partition, seed, block, count):
    """Paths with sample indices block * BLOCK ... block * BLOCK + count - 1."""
    free, L = covariance_factor(model, partition)
    rng = block_rng(seed, block)
    xi = rng.standard_normal((count, model.d, free.size))
    out = np.zeros((count, len(partition), model.d))
    if free.size:
        out[:, free, :] = np.transpose(xi @ L.T, (0, 2, 1))
    return out


def map_ensemble(fn, model, partition, n_samples, seed, workers=1):
    """Apply fn to blocks of sampled paths and concatenate results in sample order.

    Block b always holds samples b * BLOCK onward drawn from the stream keyed by
    (seed, b), so results do not depend on the number of workers.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    covariance_factor(model, partition)
    blocks = [(b, min(BLOCK, n_samples - b * BLOCK)) for b in range(math.ceil(n_samples / BLOCK))]

    def run(item):
        b, count = item
        return fn(sample_block(model, partition, seed, b, count))

    if workers <= 1:
        parts = [run(item) for item in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    return np.concatenate(parts, axis=0)


def sample_ensemble(model, partition, n_samples, seed, workers=1, memory_budget=2 ** 31):
    """Exact-law samples of the d-dimensional process on the partition."""
    need = 8 * n_samples * len(partition) * model.d
    if need > memory_budget:
        raise ValueError(f"ensemble needs {need} bytes, over the budget of {memory_budget}")
    if partition.end > model.T * (1 + 1e-12) or partition.start < 0:
        raise ValueError("partition must lie inside [0, T]")
    paths = map_ensemble(lambda p: p, model, partition, n_samples, seed, workers)
    return PathEnsemble(partition, paths, seed, model)
