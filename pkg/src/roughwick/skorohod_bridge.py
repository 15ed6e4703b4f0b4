"""Wick-Riemann sums for the Skorohod integral of grad f(x), the Itô-type
closed form they converge to, a Monte-Carlo duality test of that closed form,
and weighted power-variation diagnostics.

Functions that act on paths accept value arrays of shape (..., p, d), so one
call can process a whole block of sampled paths.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .functions import multi_indices
from .gaussian_model import (
    accumulated_A, h_norm_sq, is_zero, map_ensemble, operator_A, path_functional_weights,
    check_support,
)
from .grid_increments import Partition, fit_order
from .wick_chaos import hermite, power_correction_terms


def _values(path):
    v = getattr(path, "values", getattr(path, "paths", path))
    v = np.asarray(v, dtype=float)
    return v[..., None] if v.ndim == 1 else v


def _grid_covariances(model, t):
    """Per cell: E(x_{t_i} dx) = R(t_i, t_i+1) - R(t_i), E(dx^2), and dR = R(t_i+1) - R(t_i)."""
    r_left = model.variance(t[:-1])
    r_right = model.variance(t[1:])
    r_cross = model.covariance(t[:-1], t[1:])
    cov_xy = r_cross - r_left
    var_y = r_right - 2 * r_cross + r_left
    return cov_xy, var_y, r_right - r_left


def _check_growth(f, model):
    try:
        f.check_growth(model.max_variance())
    except ValueError as exc:
        raise ValueError(f"growth condition: {exc}") from None


# ---------------------------------------------------------------- Wick sums

@dataclass
class WickSumBreakdown:
    """Buckets of the expanded Wick-Riemann sum, per path (arrays over leading axes).

    theta1: no covariance factor, orders 1..N; theta2: no covariance factor,
    orders N+1..2N; theta3[k]: the single-factor terms -1/2 d_kk f dR; theta_tilde:
    all other terms carrying covariance factors.
    """

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray  # (d, ...)
    theta_tilde: np.ndarray

    @property
    def total(self):
        return self.theta1 + self.theta2 + self.theta3.sum(axis=0) + self.theta_tilde


def _q_factor(q, u, half_dr, dx):
    """prod_k (-1)^u_k / (u_k! (q_k - 2u_k)!) (dR/2)^u_k dx_k^(q_k - 2u_k)."""
    out = np.ones(dx.shape[:-1])
    for k, (qk, uk) in enumerate(zip(q, u)):
        c = (-1) ** uk / (math.factorial(uk) * math.factorial(qk - 2 * uk))
        out = out * c * half_dr ** uk * dx[..., k] ** (qk - 2 * uk)
    return out


def riemann_wick_sum(f, path, model, N, start=0, stop=None, check_growth=True):
    """Expanded Wick-Riemann sum over cells start..stop-1, binned into buckets.

    Each cell contributes, for 1 <= |q| <= 2N and u <= q/2, the term
    d^q f(x_{t_i}) prod_k (-1)^{u_k} / (u_k! (q_k - 2u_k)!) (dR/2)^{u_k} dx_k^{q_k - 2u_k}.
    """
    if check_growth:
        _check_growth(f, model)
    if f.max_order < 2 * N:
        raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {2 * N}")
    x = _values(path)
    t = path.partition.points if hasattr(path, "partition") else None
    if t is None:
        raise ValueError("a GridPath (with partition) is required")
    stop = len(t) - 1 if stop is None else stop
    d = x.shape[-1]
    xl = x[..., start:stop, :]
    dx = x[..., start + 1:stop + 1, :] - xl
    _, _, dr = _grid_covariances(model, t[start:stop + 1])
    half_dr = 0.5 * dr
    lead = x.shape[:-2]
    theta1 = np.zeros(lead)
    theta2 = np.zeros(lead)
    theta3 = np.zeros((d,) + lead)
    tilde = np.zeros(lead)
    for order in range(1, 2 * N + 1):
        for q in multi_indices(d, order):
            deriv = f.derivative(q, xl)
            for u in itertools.product(*(range(qk // 2 + 1) for qk in q)):
                term = np.sum(deriv * _q_factor(q, u, half_dr, dx), axis=-1)
                if not any(u):
                    if order <= N:
                        theta1 = theta1 + term
                    else:
                        theta2 = theta2 + term
                elif order == 2:
                    # u != 0 at order 2 forces q = 2 e_k, u = e_k
                    theta3[int(np.argmax(u))] += term
                else:
                    tilde = tilde + term
    return WickSumBreakdown(theta1, theta2, theta3, tilde)


def literal_wick_sum(f, path, model, N, start=0, stop=None):
    """sum_i sum_{1 <= |p| <= N} d^p f(x_{t_i}) <> prod_k dx_k^{<>p_k} / p!, rewritten
    with the correction formula as ordinary products."""
    if f.max_order < 2 * N:
        raise ValueError(f"insufficient derivative order: f has {f.max_order}, need {2 * N}")
    x = _values(path)
    t = path.partition.points
    stop = len(t) - 1 if stop is None else stop
    d = x.shape[-1]
    xl = x[..., start:stop, :]
    dx = x[..., start + 1:stop + 1, :] - xl
    cov_xy, var_y, _ = _grid_covariances(model, t[start:stop + 1])
    total = np.zeros(x.shape[:-2])
    for order in range(1, N + 1):
        for p in multi_indices(d, order):
            pfact = math.prod(math.factorial(v) for v in p)
            for combo in itertools.product(*(power_correction_terms(pk) for pk in p)):
                l = tuple(c[0] for c in combo)
                m = tuple(c[1] for c in combo)
                # coordinates are i.i.d., so every coordinate shares the cell covariances
                cell = math.prod(c[2] for c in combo) * cov_xy ** sum(l) * var_y ** sum(m)
                term = f.derivative(tuple(a + b for a, b in zip(p, l)), xl) * cell
                for k in range(d):
                    e = p[k] - 2 * m[k] - l[k]
                    if e:
                        term = term * dx[..., k] ** e
                total = total + np.sum(term, axis=-1) / pfact
    return total


def taylor_left_sum(f, path, order, start=0, stop=None):
    """sum_i sum_{1 <= |a| <= order} d^a f(x_{t_i}) dx^a / a!."""
    x = _values(path)
    stop = x.shape[-2] - 1 if stop is None else stop
    xl = x[..., start:stop, :]
    dx = x[..., start + 1:stop + 1, :] - xl
    total = np.zeros(x.shape[:-2])
    for k in range(1, order + 1):
        for a in multi_indices(x.shape[-1], k):
            afact = math.prod(math.factorial(v) for v in a)
            term = f.derivative(a, xl)
            for j, e in enumerate(a):
                if e:
                    term = term * dx[..., j] ** e
            total = total + np.sum(term, axis=-1) / afact
    return total


# ---------------------------------------------------------------- closed form

def ito_skorohod_rhs(f, path, model, start=0, stop=None, rule="gauss", check_growth=True):
    """f(x_t) - f(x_s) - 1/2 int_s^t Lap f(x_rho) R'_rho d rho along the linear interpolation.

    rule "gauss": per cell, integrate by parts against R and apply 8-point
    Gauss-Legendre to the smooth remainder, which avoids the singular R' near 0.
    rule "trapezoid": per cell, (Lap f(x_i) + Lap f(x_{i+1})) / 2 * (R_{i+1} - R_i).
    """
    if check_growth:
        _check_growth(f, model)
    x = _values(path)
    t = path.partition.points
    stop = len(t) - 1 if stop is None else stop
    xs, xt = x[..., start, :], x[..., stop, :]
    tt = t[start:stop + 1]
    xx = x[..., start:stop + 1, :]
    R = model.variance(tt)
    lap = f.laplacian(xx)
    if rule == "trapezoid":
        integral = np.sum(0.5 * (lap[..., :-1] + lap[..., 1:]) * np.diff(R), axis=-1)
    elif rule == "gauss":
        if f.max_order < 3:
            raise ValueError("insufficient derivative order: need 3 for the gauss rule")
        u, w = np.polynomial.legendre.leggauss(8)
        u, w = 0.5 * (u + 1), 0.5 * w
        h = np.diff(tt)
        dx = np.diff(xx, axis=-2)
        boundary = lap[..., 1:] * R[1:] - lap[..., :-1] * R[:-1]
        inner = np.zeros(boundary.shape)
        for uk, wk in zip(u, w):
            pts = xx[..., :-1, :] + uk * dx
            rho = tt[:-1] + uk * h
            # d/du of Lap f along the segment
            slope = sum(f.partial((j, j, i), pts) * dx[..., i] for i in range(f.d) for j in range(f.d))
            inner = inner + wk * slope * model.variance(rho)
        integral = np.sum(boundary - inner, axis=-1)
    else:
        raise ValueError("rule must be 'gauss' or 'trapezoid'")
    return f(xt) - f(xs) - 0.5 * integral


# ---------------------------------------------------------------- convergence

@dataclass
class SkorohodTable:
    levels: np.ndarray
    meshes: np.ndarray
    residuals: np.ndarray  # (n_paths, n_levels)
    breakdowns: list = field(default_factory=list)
    rhs: np.ndarray = None

    @property
    def median(self):
        return np.median(self.residuals, axis=0)

    def quantiles(self, qs=(0.1, 0.5, 0.9)):
        return {q: np.quantile(self.residuals, q, axis=0) for q in qs}

    @property
    def order(self):
        return fit_order(self.meshes, self.median)

    def to_csv(self, path):
        """Breakdown rows per path and level."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "level", "theta1", "theta2", "theta3", "theta_tilde", "total", "rhs", "abs_err"])
            for lev, br in zip(self.levels, self.breakdowns):
                th3 = br.theta3.sum(axis=0)
                for pid in range(self.residuals.shape[0]):
                    w.writerow([pid, int(lev)] + [repr(float(v)) for v in (
                        br.theta1[pid], br.theta2[pid], th3[pid], br.theta_tilde[pid], br.total[pid],
                        self.rhs[pid], self.residuals[pid, list(self.levels).index(lev)])])


def skorohod_convergence(f, ensemble, model, N, strides, variant="literal"):
    """Residuals |S_Wick - closed form| per path across sub-partitions.

    The closed form is evaluated on the full (finest) grid. `variant` selects the
    literal Wick sum or the expanded bucket sum.
    """
    _check_growth(f, model)
    part = ensemble.partition
    paths = ensemble.paths
    rule = "gauss" if f.max_order >= 3 else "trapezoid"
    rhs = ito_skorohod_rhs(f, _Batch(part, paths), model, rule=rule, check_growth=False)
    residuals, meshes, breakdowns = [], [], []
    for step in strides:
        idx = np.arange(0, len(part), step)
        if idx[-1] != len(part) - 1:
            raise ValueError("stride must divide the number of intervals")
        sub = _Batch(Partition(part.points[idx]), paths[:, idx, :])
        br = riemann_wick_sum(f, sub, model, N, check_growth=False)
        total = literal_wick_sum(f, sub, model, N) if variant == "literal" else br.total
        residuals.append(np.abs(total - rhs))
        meshes.append(sub.partition.mesh)
        breakdowns.append(br)
    return SkorohodTable(np.arange(len(strides)), np.array(meshes), np.stack(residuals, axis=1), breakdowns, rhs)


@dataclass
class _Batch:
    """A block of paths sharing a partition; values has shape (n_paths, p, d)."""

    partition: object
    values: np.ndarray


def batch(partition, values):
    return _Batch(partition, np.asarray(values, dtype=float))


# ---------------------------------------------------------------- duality

def hermite_normalized(n, y, sigma):
    """F_n(y) = sigma^n He_n(y / sigma) / n!, so that F_n' = F_{n-1} and F_{-1} = 0."""
    if n < 0:
        return np.zeros(np.shape(y))
    return sigma ** n * hermite(n, np.asarray(y, float) / sigma) / math.factorial(n)


@dataclass
class DualityReport:
    status: str
    n: int
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    diff_se: float
    z: float
    sigma: float
    n_samples: int
    seed: int
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "status", "n", "lhs", "lhs_se", "rhs", "rhs_se", "diff_se", "z", "sigma", "n_samples", "seed")} | {
            "meta": self.meta}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def duality_check(f, phis, n, model, partition, s, t, n_samples, seed, workers=1):
    """Monte-Carlo test of E[div(u) F_n(x(phi))] = int_s^t <E[F_{n-1}(x(phi)) grad f(x_rho)], A phi(rho)> d rho
    for u = 1_[s,t) grad f(x), with div(u) given by the closed form."""
    _check_growth(f, model)
    d = model.d
    if len(phis) != d:
        raise ValueError("one bump per coordinate is required")
    for b in phis:
        check_support(b, model.T)
    i0, i1 = partition.index_of(s), partition.index_of(t)
    meta = {"grid_n": partition.n, "s": s, "t": t}
    if all(is_zero(b) for b in phis):
        return DualityReport("degenerate", n, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, n_samples, seed, meta)
    sigma = math.sqrt(h_norm_sq(model, phis))
    weights = np.stack([path_functional_weights(partition, b) for b in phis], axis=-1)  # (p, d)
    tt = partition.points[i0:i1 + 1]
    trap = np.zeros(tt.size)
    trap[:-1] += 0.5 * np.diff(tt)
    trap[1:] += 0.5 * np.diff(tt)
    a_phi = np.stack([np.zeros(tt.size) if is_zero(b) else operator_A(model, b, tt) for b in phis], axis=-1)
    pairing = trap[:, None] * a_phi  # (nodes, d)
    meta["h_norm_sq"] = sigma ** 2

    def block(paths):
        w = np.einsum("spd,pd->s", paths, weights)
        div = ito_skorohod_rhs(f, _Batch(partition, paths), model, i0, i1, rule="trapezoid", check_growth=False)
        grad = f.gradient(paths[:, i0:i1 + 1, :])
        inner = np.einsum("snd,nd->s", grad, pairing)
        lhs = div * hermite_normalized(n, w, sigma)
        rhs = hermite_normalized(n - 1, w, sigma) * inner
        return np.stack([lhs, rhs], axis=1)

    vals = map_ensemble(block, model, partition, n_samples, seed, workers)
    lhs, rhs = vals[:, 0], vals[:, 1]
    diff = lhs - rhs
    root = math.sqrt(n_samples)
    lhs_se, rhs_se = float(lhs.std(ddof=1) / root), float(rhs.std(ddof=1) / root)
    diff_se = float(diff.std(ddof=1) / root)
    z = float(diff.mean() / diff_se) if diff_se > 0 else 0.0
    return DualityReport("ok", n, float(lhs.mean()), lhs_se, float(rhs.mean()), rhs_se, diff_se, z, sigma,
                         n_samples, seed, meta)


def linear_duality_oracle(coeffs, phis, model, s, t):
    """E[<c, x_t - x_s> x(phi)] = -sum_j c_j int (R_tu - R_su) phi_j'(u) du, by adaptive quadrature."""
    from scipy.integrate import quad

    total = 0.0
    for c, b in zip(coeffs, phis):
        if is_zero(b) or c == 0:
            continue
        lo, hi = b.support
        g = lambda u: -(model.covariance(t, u) - model.covariance(s, u)) * b.derivative(u)
        brk = [v for v in (s, t) if lo < v < hi]
        val, _ = quad(g, lo, hi, points=brk or None, epsabs=1e-13, epsrel=1e-11, limit=200)
        total += c * val
    return total


def linear_duality_rhs(coeffs, phis, model, s, t):
    """sum_j c_j int_s^t A phi_j, by the quadrature behind the inner products."""
    return sum(c * (accumulated_A(model, b, t) - accumulated_A(model, b, s))
               for c, b in zip(coeffs, phis) if not is_zero(b))


# ---------------------------------------------------------------- weighted sums

@dataclass
class WeightedSumDiagnostics:
    levels: list
    v2: list  # per level, array over paths of V^(2)(g)
    v3: list  # per level, array over paths of V^(3)(g)
    scaled_v2_var: np.ndarray  # Var((2^n)^{2H-1/2} V^(2)(1))
    scaled_v3_mean: np.ndarray  # mean of mesh^{1-4H} V^(3)(g)
    v3_target: float  # mean over paths of -(3/2) int g'(B)
    identity_residual: float


def weighted_sums(g, values, t, model):
    """V^(2)(g) = sum g(B_i)[dB^2 - E dB^2] and V^(3)(g) = sum g(B_i) dB^3 per path."""
    b = values[..., 0]
    db = np.diff(b, axis=-1)
    _, var_y, _ = _grid_covariances(model, t)
    gb = g(b[..., :-1, None])
    return np.sum(gb * (db ** 2 - var_y), axis=-1), np.sum(gb * db ** 3, axis=-1)


def variance_v2_isserlis(model, t):
    """Var(sum_i (dB_i^2 - E dB_i^2)) = 2 sum_{i,j} Cov(dB_i, dB_j)^2."""
    R = model.covariance_matrix(t)
    D = np.diff(np.diff(R, axis=0), axis=1)
    return float(2.0 * np.sum(D ** 2))


def variance_v2_brownian(t):
    """Same variance for Brownian motion: 2 sum dt_i^2."""
    return float(2.0 * np.sum(np.diff(t) ** 2))


def tilde_identity(f, values, t, model):
    """Residual of the split: literal first-order Wick sum versus
    Taylor-3 left sum - 1/2 sum f'' dR - 1/2 V^(2)(f'') - 1/6 V^(3)(f''')."""
    b = values[..., 0]
    db = np.diff(b, axis=-1)
    bl = b[..., :-1, None]
    cov_xy, var_y, dr = _grid_covariances(model, t)
    d1 = f.derivative((1,), bl)
    d2 = f.derivative((2,), bl)
    d3 = f.derivative((3,), bl)
    direct = np.sum(d1 * db - d2 * cov_xy, axis=-1)
    taylor = np.sum(d1 * db + 0.5 * d2 * db ** 2 + d3 * db ** 3 / 6.0, axis=-1)
    v2 = np.sum(d2 * (db ** 2 - var_y), axis=-1)
    v3 = np.sum(d3 * db ** 3, axis=-1)
    assembled = taylor - 0.5 * np.sum(d2 * dr, axis=-1) - 0.5 * v2 - v3 / 6.0
    return direct, assembled


def weighted_sum_diagnostics(g, f, ensemble, model, strides):
    """V^(2), V^(3) over sub-grids, scaled moments and the per-path split residual."""
    H = getattr(model, "H", None)
    if H is None or not 0 < H < 1:
        raise ValueError("an fBm model with H in (0, 1) is required")
    if ensemble.d != 1:
        raise ValueError("weighted sums are one-dimensional")
    part = ensemble.partition
    one = _Const()
    v2s, v3s, scaled_var, scaled_mean, levels = [], [], [], [], []
    resid = 0.0
    for step in strides:
        idx = np.arange(0, len(part), step)
        t = part.points[idx]
        vals = ensemble.paths[:, idx, :]
        v2_one, _ = weighted_sums(one, vals, t, model)
        v2, v3 = weighted_sums(g, vals, t, model)
        mesh = float(np.max(np.diff(t)))
        scaled_var.append(float(np.var(v2_one * mesh ** (0.5 - 2 * H), ddof=1)))
        scaled_mean.append(float(np.mean(v3 * mesh ** (1 - 4 * H))))
        v2s.append(v2)
        v3s.append(v3)
        levels.append(int(round(math.log2((len(t) - 1)))))
        direct, assembled = tilde_identity(f, vals, t, model)
        resid = max(resid, float(np.max(np.abs(direct - assembled))))
    # pathwise target on the finest grid: -(3/2) int_0^T g'(B_s) ds, trapezoid
    fine = ensemble.paths[..., 0]
    gp = g.derivative((1,), fine[..., None])
    target = -1.5 * np.sum(0.5 * (gp[:, :-1] + gp[:, 1:]) * np.diff(part.points), axis=-1)
    return WeightedSumDiagnostics(levels, v2s, v3s, np.array(scaled_var), np.array(scaled_mean),
                                  float(np.mean(target)), resid)


class _Const:
    def __call__(self, x):
        return np.ones(np.shape(x)[:-1])
