"""Sparse multivariate polynomials with float coefficients."""

import math

import numpy as np


class Polynomial:
    """sum of coeff * prod_k x_k^{a_k}, keyed by exponent tuples a."""

    def __init__(self, nvars, terms=None):
        self.nvars = nvars
        self.terms = {}
        for exps, c in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != nvars or min(exps, default=0) < 0:
                raise ValueError(f"bad exponent tuple {exps}")
            if c != 0:
                self.terms[exps] = self.terms.get(exps, 0.0) + float(c)

    @classmethod
    def constant(cls, nvars, c):
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars, k):
        e = [0] * nvars
        e[k] = 1
        return cls(nvars, {tuple(e): 1.0})

    @classmethod
    def linear(cls, coeffs):
        n = len(coeffs)
        return sum((c * cls.variable(n, k) for k, c in enumerate(coeffs)), cls(n))

    @property
    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def _lift(self, other):
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("variable count mismatch")
            return other
        return Polynomial.constant(self.nvars, other)

    def __add__(self, other):
        other = self._lift(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            return Polynomial(self.nvars, {e: c * other for e, c in self.terms.items()})
        self._lift(other)
        out = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Polynomial(self.nvars, out)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / c)

    def __pow__(self, k):
        out = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def derivative(self, alpha):
        out = {}
        for e, c in self.terms.items():
            if all(a >= b for a, b in zip(e, alpha)):
                f = c
                for a, b in zip(e, alpha):
                    f *= math.perm(a, b)
                e2 = tuple(a - b for a, b in zip(e, alpha))
                out[e2] = out.get(e2, 0.0) + f
        return Polynomial(self.nvars, out)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for e, c in self.terms.items():
            term = np.full(x.shape[:-1], c)
            for k, a in enumerate(e):
                if a:
                    term = term * x[..., k] ** a
            out = out + term
        return out

    def substitute(self, matrix):
        """Replace x_a by sum_j matrix[a, j] y_j."""
        matrix = np.asarray(matrix, dtype=float)
        r = matrix.shape[1]
        unit = (0,) * r
        lin = []
        for a in range(self.nvars):
            lin.append({tuple(int(i == j) for i in range(r)): matrix[a, j] for j in range(r) if matrix[a, j] != 0})
        cache = {}

        def power(a, k):
            if (a, k) not in cache:
                cache[(a, k)] = {unit: 1.0} if k == 0 else _mul(power(a, k - 1), lin[a])
            return cache[(a, k)]

        out = {}
        for e, c in self.terms.items():
            term = {unit: c}
            for a, k in enumerate(e):
                if k:
                    term = _mul(term, power(a, k))
            for key, v in term.items():
                out[key] = out.get(key, 0.0) + v
        return Polynomial(r, out)

    def max_abs_diff(self, other):
        keys = set(self.terms) | set(other.terms)
        return max((abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) for k in keys), default=0.0)

    def __repr__(self):
        return f"Polynomial({self.nvars}, {self.terms})"


def _mul(p, q):
    """Product of two exponent-keyed coefficient dicts."""
    out = {}
    for e1, c1 in p.items():
        for e2, c2 in q.items():
            e = tuple(a + b for a, b in zip(e1, e2))
            out[e] = out.get(e, 0.0) + c1 * c2
    return out
