"""Finite Wiener chaos over a jointly Gaussian family.

A random variable F is stored as coefficients c_alpha on products of Hermite
polynomials: F = sum_alpha c_alpha prod_j He_{alpha_j}(xi_j), where xi are the
i.i.d. standard normals behind the family and alpha ranges over multi-indices
(equivalently, multisets of basis directions). The term with |alpha| = n is the
n-th multiple integral of the symmetrized tensor c_alpha e^{(x) alpha}.
"""

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .functions import multi_indices
from .polynomial import Polynomial

MAX_RANK = 8
MAX_ORDER = 16


def hermite(k, x):
    """Probabilists' Hermite polynomial He_k by He_{k+1} = x He_k - k He_{k-1}."""
    if k < 0:
        raise ValueError("order must be nonnegative")
    x = np.asarray(x, dtype=float)
    prev, cur = np.zeros_like(x), np.ones_like(x)
    for j in range(k):
        prev, cur = cur, x * cur - j * prev
    return cur if cur.ndim else float(cur)


def hermite_explicit(k, x):
    """He_k(x) = sum_{j <= k/2} (-1)^j k! / (2^j j! (k - 2j)!) x^{k - 2j}."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for j in range(k // 2 + 1):
        c = (-1) ** j * math.factorial(k) / (2 ** j * math.factorial(j) * math.factorial(k - 2 * j))
        out = out + c * x ** (k - 2 * j)
    return out if out.ndim else float(out)


def hermite_table(kmax, x):
    """Array of He_0 .. He_kmax at x, stacked on a new leading axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for j in range(1, kmax):
        out[j + 1] = x * out[j] - j * out[j - 1]
    return out


def monomial_in_hermite(k):
    """x^k = sum_j k! / (2^j j! (k - 2j)!) He_{k - 2j}(x), as {order: coeff}."""
    return {k - 2 * j: math.factorial(k) / (2 ** j * math.factorial(j) * math.factorial(k - 2 * j))
            for j in range(k // 2 + 1)}


class GaussianFamily:
    """Base variables X = L xi with Sigma = L L^T and xi i.i.d. standard normal."""

    def __init__(self, covariance, rank_tol=1e-12):
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be a symmetric square matrix")
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        trace = float(np.trace(cov))
        if vals.size and vals.min() < -1e-10 * max(trace, 1e-300):
            raise ValueError("covariance is not positive semidefinite")
        keep = vals > rank_tol * trace if trace > 0 else np.zeros(vals.size, bool)
        if keep.sum() > MAX_RANK:
            raise ValueError(f"rank {keep.sum()} exceeds the cap {MAX_RANK}")
        self.covariance = cov
        self.L = vecs[:, keep] * np.sqrt(vals[keep])

    @property
    def m(self):
        return self.covariance.shape[0]

    @property
    def r(self):
        return self.L.shape[1]

    def variable(self, a):
        """Chaos expansion of the base variable X_a."""
        coeffs = {}
        for j in range(self.r):
            if self.L[a, j] != 0:
                e = [0] * self.r
                e[j] = 1
                coeffs[tuple(e)] = self.L[a, j]
        return ChaosExpansion(self.r, 1, coeffs)

    def solve(self, values, tol=1e-9):
        """A realization xi with L xi = values; raises when values are off the support."""
        values = np.asarray(values, dtype=float)
        xi, *_ = np.linalg.lstsq(self.L, values, rcond=None)
        resid = np.max(np.abs(self.L @ xi - values)) if values.size else 0.0
        if resid > tol * max(1.0, np.max(np.abs(values))):
            raise ValueError("sample lies outside the support of the family")
        return xi

    def sample(self, n, rng):
        xi = rng.standard_normal((n, self.r))
        return xi, xi @ self.L.T


class ChaosExpansion:
    """F = sum_alpha coeffs[alpha] prod_j He_{alpha_j}(xi_j), with |alpha| <= n_max."""

    def __init__(self, r, n_max, coeffs=None):
        if r > MAX_RANK:
            raise ValueError(f"rank {r} exceeds the cap {MAX_RANK}")
        if n_max > MAX_ORDER:
            raise ValueError(f"chaos order {n_max} exceeds the cap {MAX_ORDER}")
        self.r = r
        self.n_max = n_max
        self.coeffs = {}
        for alpha, c in (coeffs or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != r:
                raise ValueError("multi-index length must equal the rank")
            if sum(alpha) > n_max:
                raise ValueError(f"term of order {sum(alpha)} exceeds n_max={n_max}")
            if c != 0:
                self.coeffs[alpha] = self.coeffs.get(alpha, 0.0) + float(c)

    @classmethod
    def constant(cls, r, c):
        return cls(r, 0, {(0,) * r: c})

    @property
    def degree(self):
        return max((sum(a) for a in self.coeffs), default=0)

    def kernel(self, n):
        return {a: c for a, c in self.coeffs.items() if sum(a) == n}

    def __add__(self, other):
        out = dict(self.coeffs)
        for a, c in other.coeffs.items():
            out[a] = out.get(a, 0.0) + c
        return ChaosExpansion(self.r, max(self.n_max, other.n_max), out)

    def __sub__(self, other):
        return self + other * -1.0

    def __mul__(self, scalar):
        return ChaosExpansion(self.r, self.n_max, {a: c * scalar for a, c in self.coeffs.items()})

    __rmul__ = __mul__

    def truncate(self, n):
        return ChaosExpansion(self.r, min(n, self.n_max), {a: c for a, c in self.coeffs.items() if sum(a) <= n})

    def evaluate(self, xi):
        """Value at realizations xi of shape (..., r)."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.r:
            raise ValueError(f"expected last axis {self.r}")
        table = hermite_table(max(self.degree, 1), xi)  # (k, ..., r)
        out = np.zeros(xi.shape[:-1])
        for alpha, c in self.coeffs.items():
            term = np.full(xi.shape[:-1], c)
            for j, k in enumerate(alpha):
                if k:
                    term = term * table[k, ..., j]
            out = out + term
        return out

    def expectation(self):
        return self.coeffs.get((0,) * self.r, 0.0)

    def second_moment(self):
        """sum_n n! |f_n|^2, which on this basis is sum_alpha c_alpha^2 alpha!."""
        return float(sum(c * c * math.prod(math.factorial(k) for k in a) for a, c in self.coeffs.items()))

    def kernel_norm_sq(self, n):
        """|f_n|^2 of the symmetric tensor kernel of order n."""
        return float(sum(c * c * math.prod(math.factorial(k) for k in a)
                         for a, c in self.kernel(n).items()) / math.factorial(n))

    def directional_derivative(self, h):
        """Malliavin derivative paired with the element sum_j h_j e_j."""
        out = {}
        for alpha, c in self.coeffs.items():
            for j, k in enumerate(alpha):
                if k and h[j] != 0:
                    beta = list(alpha)
                    beta[j] -= 1
                    beta = tuple(beta)
                    out[beta] = out.get(beta, 0.0) + c * k * h[j]
        return ChaosExpansion(self.r, max(self.n_max - 1, 0), out)

    def max_abs_diff(self, other):
        keys = set(self.coeffs) | set(other.coeffs)
        return max((abs(self.coeffs.get(k, 0.0) - other.coeffs.get(k, 0.0)) for k in keys), default=0.0)

    def to_json(self):
        kernels = []
        for n in range(self.n_max + 1):
            entries = [{"multiset": [j for j, k in enumerate(a) for _ in range(k)], "coeff": c}
                       for a, c in sorted(self.kernel(n).items(), reverse=True)]
            kernels.append({"order": n, "entries": entries})
        return json.dumps({"r": self.r, "n_max": self.n_max, "kernels": kernels})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        r = data["r"]
        coeffs = {}
        for kern in data["kernels"]:
            for entry in kern["entries"]:
                alpha = [0] * r
                for j in entry["multiset"]:
                    alpha[j] += 1
                coeffs[tuple(alpha)] = entry["coeff"]
        return cls(r, data["n_max"], coeffs)

    def __repr__(self):
        return f"ChaosExpansion(r={self.r}, n_max={self.n_max}, terms={len(self.coeffs)})"


def multiple_integral_eval(family, kernel, xi):
    """I_n of a kernel given as {multi-index: coeff} on the multiset basis, at xi."""
    orders = {sum(a) for a in kernel}
    if len(orders) > 1:
        raise ValueError("kernel entries must share one order")
    n = orders.pop() if orders else 0
    return ChaosExpansion(family.r, n, kernel).evaluate(xi)


def expectation(a):
    return a.expectation()


def second_moment(a):
    return a.second_moment()


def wick_product(a, b):
    """a <> b: on this basis He_alpha <> He_beta = He_{alpha + beta}."""
    if a.r != b.r:
        raise ValueError("rank mismatch")
    n_max = a.n_max + b.n_max
    if n_max > MAX_ORDER:
        raise ValueError(f"Wick product order {n_max} exceeds the cap {MAX_ORDER}")
    out = {}
    for al, ca in a.coeffs.items():
        for be, cb in b.coeffs.items():
            g = tuple(x + y for x, y in zip(al, be))
            out[g] = out.get(g, 0.0) + ca * cb
    return ChaosExpansion(a.r, n_max, out)


def wick_power(a, p):
    out = ChaosExpansion.constant(a.r, 1.0)
    for _ in range(p):
        out = wick_product(out, a)
    return out


def hermite_polynomial_to_chaos(poly):
    """Chaos expansion of a polynomial in the standard normals xi themselves."""
    r = poly.nvars
    out = {}
    for exps, c in poly.terms.items():
        factors = [monomial_in_hermite(k) for k in exps]
        for combo in itertools.product(*(f.items() for f in factors)):
            alpha = tuple(k for k, _ in combo)
            coeff = c * math.prod(v for _, v in combo)
            out[alpha] = out.get(alpha, 0.0) + coeff
    return ChaosExpansion(r, poly.degree, out)


def polynomial_to_chaos(family, poly):
    """Chaos expansion of poly(X) for base variables X = L xi."""
    if poly.nvars != family.m:
        raise ValueError("polynomial variable count must equal the family size")
    if poly.degree > MAX_ORDER:
        raise ValueError(f"degree {poly.degree} exceeds the cap {MAX_ORDER}")
    return hermite_polynomial_to_chaos(poly.substitute(family.L))


def exponential_vector(a, order):
    """Truncation of sum_n a^{<>n} / n! at chaos order `order` (a of first order)."""
    out = ChaosExpansion.constant(a.r, 1.0)
    power = ChaosExpansion.constant(a.r, 1.0)
    for n in range(1, order + 1):
        power = wick_product(power, a)
        out = out + power * (1.0 / math.factorial(n))
    return out.truncate(order)


def tensor_chaos(r, vectors):
    """I_n of the symmetrization of v_1 (x) ... (x) v_n, by summing over index tuples."""
    out = {}
    n = len(vectors)
    for tup in itertools.product(range(r), repeat=n):
        val = math.prod(v[i] for v, i in zip(vectors, tup))
        if val != 0:
            alpha = [0] * r
            for i in tup:
                alpha[i] += 1
            alpha = tuple(alpha)
            out[alpha] = out.get(alpha, 0.0) + val
    return ChaosExpansion(r, n, out)


# ---------------------------------------------------------------- correction formulas

def power_correction_terms(p):
    """(l, m, coeff) with coeff = (-1)^{l+m} p! / (2^m m! l! (p - 2m - l)!), l + 2m <= p."""
    out = []
    for m in range(p // 2 + 1):
        for l in range(p - 2 * m + 1):
            coeff = (-1) ** (l + m) * math.factorial(p) / (
                2 ** m * math.factorial(m) * math.factorial(l) * math.factorial(p - 2 * m - l))
            out.append((l, m, coeff))
    return out


def wick_correction_terms(p, cov_xy, var_y):
    """Expansion of G(X) <> prod_k Y_k^{<>p_k} as ordinary products.

    Yields (l, coeff, powers): the term is coeff * d^l G(X) * prod_k Y_k^{powers_k}.
    """
    per = [power_correction_terms(pk) for pk in p]
    for combo in itertools.product(*per):
        l = tuple(t[0] for t in combo)
        coeff = 1.0
        powers = []
        for k, (lk, mk, ck) in enumerate(combo):
            coeff *= ck * cov_xy[k] ** lk * var_y[k] ** mk
            powers.append(p[k] - 2 * mk - lk)
        if coeff != 0:
            yield l, coeff, tuple(powers)


def correction_value(G, p, cov_xy, var_y, x, y):
    """Closed-form right side evaluated at x, y of shape (..., d)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    total = np.zeros(np.broadcast(x[..., 0], y[..., 0]).shape)
    for l, coeff, powers in wick_correction_terms(p, cov_xy, var_y):
        term = coeff * G.derivative(l, x)
        for k, e in enumerate(powers):
            if e:
                term = term * y[..., k] ** e
        total = total + term
    return total


def correction_polynomial(G, p, cov_xy, var_y):
    """Closed-form right side as a polynomial in (X_1..X_d, Y_1..Y_d)."""
    if G.polynomial is None:
        raise ValueError("a polynomial G is required for the exact oracle")
    d = G.d
    out = Polynomial(2 * d)
    for l, coeff, powers in wick_correction_terms(p, cov_xy, var_y):
        dg = G.polynomial.derivative(l)
        lifted = Polynomial(2 * d, {e + (0,) * d: c for e, c in dg.terms.items()})
        mono = Polynomial(2 * d, {(0,) * d + tuple(powers): coeff})
        out = out + lifted * mono
    return out


@dataclass
class WickCorrectionReport:
    lhs: float
    rhs: float
    max_coefficient_deviation: float
    value_deviation: float

    @property
    def deviation(self):
        return max(self.max_coefficient_deviation, self.value_deviation)

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "max_coefficient_deviation": self.max_coefficient_deviation,
                "value_deviation": self.value_deviation}


def check_independence_pattern(cov, d, tol=1e-14):
    """Y's mutually independent and X_j independent of Y_k for j != k."""
    scale = max(1.0, float(np.abs(cov).max()))
    for j in range(d):
        for k in range(d):
            if j != k and (abs(cov[d + j, d + k]) > tol * scale or abs(cov[j, d + k]) > tol * scale):
                raise ValueError("independence pattern required for the multivariate Wick correction: "
                                 "Y_j, Y_k independent and X_j independent of Y_k for j != k")


def _oracle_report(G, family, p, sample_x, sample_y):
    d = G.d
    cov = family.covariance
    cov_xy = [cov[k, d + k] for k in range(d)]
    var_y = [cov[d + k, d + k] for k in range(d)]
    g_poly = Polynomial(2 * d, {e + (0,) * d: c for e, c in G.polynomial.terms.items()})
    lhs = polynomial_to_chaos(family, g_poly)
    for k in range(d):
        lhs = wick_product(lhs, wick_power(family.variable(d + k), p[k]))
    rhs_chaos = polynomial_to_chaos(family, correction_polynomial(G, p, cov_xy, var_y))
    xi = family.solve(np.concatenate([sample_x, sample_y]))
    lhs_val = float(lhs.evaluate(xi))
    rhs_val = float(correction_value(G, p, cov_xy, var_y, sample_x, sample_y))
    return WickCorrectionReport(lhs_val, rhs_val, lhs.max_abs_diff(rhs_chaos), abs(lhs_val - rhs_val))


def wick_correction_1d(G, var_x, var_y, cov_xy, p, sample):
    """Check G(X) <> Y^{<>p} against its ordinary-product expansion at (x, y)."""
    if G.d != 1:
        raise ValueError("G must be a function of one variable")
    if G.polynomial is None:
        raise ValueError("a polynomial G is required for the exact oracle; use wick_correction_mc")
    family = GaussianFamily([[var_x, cov_xy], [cov_xy, var_y]])
    x, y = sample
    return _oracle_report(G, family, (p,), np.array([x], float), np.array([y], float))


def wick_correction_multi(G, covariance, p, sample):
    """Multivariate version; covariance is the joint matrix of (X_1..X_d, Y_1..Y_d)."""
    d = G.d
    cov = np.asarray(covariance, float)
    if cov.shape != (2 * d, 2 * d):
        raise ValueError(f"covariance must be {2 * d}x{2 * d}")
    if len(p) != d or sum(p) > 8:
        raise ValueError("p must be a multi-index of length d with |p| <= 8")
    check_independence_pattern(cov, d)
    if G.polynomial is None:
        raise ValueError("a polynomial G is required for the exact oracle; use wick_correction_mc")
    family = GaussianFamily(cov)
    x, y = sample
    return _oracle_report(G, family, tuple(p), np.asarray(x, float), np.asarray(y, float))


@dataclass
class MomentMatch:
    probe: tuple
    mean: float
    se: float

    @property
    def z(self):
        return self.mean / self.se if self.se > 0 else 0.0


def wick_correction_mc(G, covariance, p, probes, n_samples, seed):
    """Moment matching for non-polynomial G.

    For a probe F = prod_j He_{a_j}(xi_j), duality gives E[(G(X) <> Y^{<>p}) F] =
    E[G(X) D^p F], where D^p differentiates along the directions of the Y's.
    The estimate of E[G(X) D^p F - rhs(X, Y) F] should vanish.
    """
    d = G.d
    cov = np.asarray(covariance, float)
    check_independence_pattern(cov, d)
    family = GaussianFamily(cov)
    cov_xy = [cov[k, d + k] for k in range(d)]
    var_y = [cov[d + k, d + k] for k in range(d)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    xi, z = family.sample(n_samples, rng)
    x, y = z[:, :d], z[:, d:]
    gx = G(x)
    rhs = correction_value(G, p, cov_xy, var_y, x, y)
    out = []
    for probe in probes:
        f = ChaosExpansion(family.r, sum(probe), {tuple(probe): 1.0})
        df = f
        for k in range(d):
            for _ in range(p[k]):
                df = df.directional_derivative(family.L[d + k])
        diff = gx * df.evaluate(xi) - rhs * f.evaluate(xi)
        out.append(MomentMatch(tuple(probe), float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_samples))))
    return out


def random_pattern_covariance(d, rng):
    """Random joint covariance of (X, Y) obeying the independence pattern."""
    a = rng.standard_normal((d, d))
    s = rng.uniform(0.3, 1.5, d)
    coupling = rng.uniform(-1.0, 1.0, d)
    cov_x = a @ a.T / d + np.diag(coupling ** 2 * s ** 2)
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = cov_x
    for k in range(d):
        cov[k, d + k] = cov[d + k, k] = coupling[k] * s[k] ** 2
        cov[d + k, d + k] = s[k] ** 2
    return cov
