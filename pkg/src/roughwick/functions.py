"""Scalar test functions on R^d with exact partial derivatives.

Each function is a finite sum of separable products c * prod_k a_k(x_k) of
one-dimensional atoms whose derivatives of every order are known in closed form,
so mixed partials are exact and symmetric by construction.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial as P1

from .polynomial import Polynomial


class Atom:
    def derivative(self, k, x):
        raise NotImplementedError

    def growth_constant(self, lam):
        """C with |a(x)| <= C exp(lam x^2)."""
        raise NotImplementedError


@dataclass(frozen=True)
class PolyAtom(Atom):
    coeffs: tuple

    def derivative(self, k, x):
        return P1(self.coeffs).deriv(k)(x) if k else P1(self.coeffs)(x)

    def growth_constant(self, lam):
        total = 0.0
        for a, c in enumerate(self.coeffs):
            total += abs(c) * (1.0 if a == 0 else (a / (2 * lam * math.e)) ** (a / 2))
        return total


@dataclass(frozen=True)
class SinAtom(Atom):
    """sin(freq * x + phase)."""

    freq: float = 1.0
    phase: float = 0.0

    def derivative(self, k, x):
        return self.freq ** k * np.sin(self.freq * x + self.phase + k * np.pi / 2)

    def growth_constant(self, lam):
        return 1.0


@dataclass(frozen=True)
class ExpAtom(Atom):
    """exp(rate * x)."""

    rate: float

    def derivative(self, k, x):
        return self.rate ** k * np.exp(self.rate * x)

    def growth_constant(self, lam):
        return math.exp(self.rate ** 2 / (4 * lam))


@dataclass(frozen=True)
class GaussAtom(Atom):
    """exp(-a x^2); the k-th derivative is p_k(x) exp(-a x^2) with p_{k+1} = p_k' - 2 a x p_k."""

    a: float

    def derivative(self, k, x):
        p = P1([1.0])
        for _ in range(k):
            p = p.deriv() - P1([0.0, 2 * self.a]) * p
        return p(x) * np.exp(-self.a * np.asarray(x) ** 2)

    def growth_constant(self, lam):
        return 1.0


@dataclass(frozen=True)
class SquareExpAtom(Atom):
    """exp(c x^2): the growth certificate needs lam >= c."""

    c: float

    def derivative(self, k, x):
        p = P1([1.0])
        for _ in range(k):
            p = p.deriv() + P1([0.0, 2 * self.c]) * p
        return p(x) * np.exp(self.c * np.asarray(x) ** 2)

    def growth_constant(self, lam):
        return 1.0 if lam >= self.c else math.inf


@dataclass(frozen=True)
class ProductAtom(Atom):
    left: Atom
    right: Atom

    def derivative(self, k, x):
        return sum(math.comb(k, j) * self.left.derivative(j, x) * self.right.derivative(k - j, x)
                   for j in range(k + 1))

    def growth_constant(self, lam):
        return self.left.growth_constant(lam / 2) * self.right.growth_constant(lam / 2)


ONE = PolyAtom((1.0,))


def multi_indices(d, k):
    """All alpha in N^d with |alpha| = k, in lexicographic order."""
    if d == 1:
        return [(k,)]
    out = []
    for first in range(k, -1, -1):
        out.extend((first,) + rest for rest in multi_indices(d - 1, k - first))
    return out


def tuples_to_multi_index(d, tup):
    alpha = [0] * d
    for i in tup:
        alpha[i] += 1
    return tuple(alpha)


class TestFunction:
    """f(x) = sum_t coeff_t prod_k atom_{t,k}(x_k) with growth certificate (C, lam)."""

    __test__ = False

    def __init__(self, name, d, terms, max_order=8, lam=0.01, polynomial=None):
        self.name = name
        self.d = d
        self.terms = [(float(c), tuple(atoms)) for c, atoms in terms]
        for _, atoms in self.terms:
            if len(atoms) != d:
                raise ValueError("each term needs one atom per coordinate")
        self.max_order = max_order
        self.lam = float(lam)
        self.polynomial = polynomial

    @classmethod
    def from_polynomial(cls, name, poly, max_order=8, lam=0.01):
        terms = []
        for exps, c in poly.terms.items():
            terms.append((c, [PolyAtom((0.0,) * e + (1.0,)) for e in exps]))
        if not terms:
            terms = [(0.0, [ONE] * poly.nvars)]
        return cls(name, poly.nvars, terms, max_order, lam, polynomial=poly)

    @property
    def growth_constant(self):
        return sum(abs(c) * math.prod(a.growth_constant(self.lam) for a in atoms)
                   for c, atoms in self.terms)

    def check_growth(self, max_variance):
        """Raise unless lam < 1 / (4 d max_t R_t)."""
        bound = 1.0 / (4 * self.d * max_variance) if max_variance > 0 else math.inf
        if not self.lam < bound or not math.isfinite(self.growth_constant):
            raise ValueError(f"growth condition violated for {self.name}: "
                             f"lambda={self.lam} must be < 1/(4 d max R)={bound}")

    def derivative(self, alpha, x):
        """Partial derivative d^alpha f at points x of shape (..., d)."""
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != self.d:
            raise ValueError("multi-index length must equal d")
        if sum(alpha) > self.max_order:
            raise ValueError(f"insufficient derivative order: {sum(alpha)} > {self.max_order}")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"points must have last axis {self.d}")
        out = np.zeros(x.shape[:-1])
        for c, atoms in self.terms:
            term = c
            for k, (atom, a) in enumerate(zip(atoms, alpha)):
                term = term * atom.derivative(a, x[..., k])
            out = out + term
        return out

    def __call__(self, x):
        return self.derivative((0,) * self.d, x)

    def partial(self, indices, x):
        """d^k f / dx_{i_1} ... dx_{i_k} for an index tuple."""
        return self.derivative(tuples_to_multi_index(self.d, indices), x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([self.partial((k,), x) for k in range(self.d)], axis=-1)

    def laplacian(self, x):
        return sum(self.partial((k, k), x) for k in range(self.d))

    def derivative_table(self, k, x):
        """{alpha: d^alpha f(x)} over all |alpha| = k."""
        return {alpha: self.derivative(alpha, x) for alpha in multi_indices(self.d, k)}

    def derivative_tensor(self, k, x):
        """Full symmetric tensor of k-th partials, flattened to shape (..., d^k)."""
        x = np.asarray(x, dtype=float)
        table = self.derivative_table(k, x)
        cols = [table[tuples_to_multi_index(self.d, tup)]
                for tup in itertools.product(range(self.d), repeat=k)]
        if not cols:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack(cols, axis=-1)

    def __repr__(self):
        return f"TestFunction({self.name!r}, d={self.d})"


def _poly_fn(name, poly):
    return TestFunction.from_polynomial(name, poly)


def _var(d, k):
    return Polynomial.variable(d, k)


def constant(d, c=1.0):
    return _poly_fn("constant", Polynomial.constant(d, c))


def linear(d, coeffs=None):
    coeffs = coeffs if coeffs is not None else [1.0 + k for k in range(d)]
    return _poly_fn("linear", Polynomial.linear(coeffs))


def half_square(d):
    return _poly_fn("half_square", sum((0.5 * _var(d, k) ** 2 for k in range(d)), Polynomial(d)))


def square(d):
    return _poly_fn("square", sum((_var(d, k) ** 2 for k in range(d)), Polynomial(d)))


def product(d):
    if d < 2:
        return _poly_fn("product", _var(1, 0) ** 2)
    return _poly_fn("product", _var(d, 0) * _var(d, 1))


def cubic(d):
    p = sum((_var(d, k) ** 3 / 6.0 for k in range(d)), Polynomial(d))
    if d >= 2:
        p = p + _var(d, 0) ** 2 * _var(d, 1) - 0.5 * _var(d, 1)
    return _poly_fn("cubic", p)


def quartic(d):
    p = sum((_var(d, k) ** 4 / 24.0 - _var(d, k) ** 2 for k in range(d)), Polynomial(d))
    if d >= 2:
        p = p + 0.5 * _var(d, 0) ** 2 * _var(d, 1) ** 2 + _var(d, 0) * _var(d, 1)
    return _poly_fn("quartic", p + 1.0)


def sin_plus_square(d):
    terms = [(1.0, [SinAtom()] + [ONE] * (d - 1))]
    for k in range(1, d):
        atoms = [ONE] * d
        atoms[k] = PolyAtom((0.0, 0.0, 1.0))
        terms.append((1.0, atoms))
    return TestFunction("sin_plus_square", d, terms)


def trig_exp(d):
    atoms = [SinAtom(1.0, 0.3)] + [ExpAtom(0.5 / k) for k in range(1, d)]
    terms = [(1.0, atoms), (0.5, [SinAtom(2.0, 1.0)] * d)]
    return TestFunction("trig_exp", d, terms)


def gauss_poly(d):
    atoms = [ProductAtom(PolyAtom((1.0, 0.0, 1.0)), GaussAtom(0.5))] + [GaussAtom(0.25)] * (d - 1)
    return TestFunction("gauss_poly", d, [(1.0, atoms)])


def exp_square(d, c=0.5):
    """exp(c |x|^2), certificate lam = c; useful to exercise the growth check."""
    return TestFunction("exp_square", d, [(1.0, [SquareExpAtom(c)] * d)], lam=c)


REGISTRY = {
    "constant": constant,
    "linear": linear,
    "half_square": half_square,
    "square": square,
    "product": product,
    "cubic": cubic,
    "quartic": quartic,
    "sin_plus_square": sin_plus_square,
    "trig_exp": trig_exp,
    "gauss_poly": gauss_poly,
    "exp_square": exp_square,
}


def get_function(name, d):
    if name not in REGISTRY:
        raise KeyError(f"unknown function id {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name](d)
