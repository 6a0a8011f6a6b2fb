"""Smooth expression trees and their Taylor expansion into polynomials.

Node kinds are restricted to {constant, variable, sum, product, integer power,
sin, cos}.  Negative integer powers are allowed as long as the base does not
vanish where the tree is evaluated or expanded (used for mass-matrix
inverses).

Taylor expansion propagates truncated polynomial jets through the tree, which
yields exactly the coefficients that symbolic differentiation would produce
(no numeric differencing anywhere).
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .poly import Monomial, Polynomial, Variable, _as_poly


class Expr:
    """Base class for expression-tree nodes."""

    __slots__ = ()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return Sum([self, as_expr(other)])

    def __radd__(self, other):
        return Sum([as_expr(other), self])

    def __sub__(self, other):
        return Sum([self, Prod([Const(-1.0), as_expr(other)])])

    def __rsub__(self, other):
        return Sum([as_expr(other), Prod([Const(-1.0), self])])

    def __mul__(self, other):
        return Prod([self, as_expr(other)])

    def __rmul__(self, other):
        return Prod([as_expr(other), self])

    def __truediv__(self, other):
        return Prod([self, Pow(as_expr(other), -1)])

    def __rtruediv__(self, other):
        return Prod([as_expr(other), Pow(self, -1)])

    def __neg__(self):
        return Prod([Const(-1.0), self])

    def __pow__(self, k: int):
        return Pow(self, k)

    # -- interface -----------------------------------------------------------

    def evaluate(self, env: Mapping[Variable, float]):
        raise NotImplementedError

    def jet(self, center: Mapping[Variable, float], degree: int) -> Polynomial:
        """Truncated Taylor polynomial about ``center`` in displacement coordinates."""
        raise NotImplementedError

    def variables(self) -> set[Variable]:
        raise NotImplementedError

    def _codegen(self, names: Mapping[Variable, str]) -> str:
        raise NotImplementedError


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("non-finite constant")
        self.value = value

    def evaluate(self, env):
        return self.value

    def jet(self, center, degree):
        return Polynomial.constant(self.value)

    def variables(self):
        return set()

    def _codegen(self, names):
        return repr(self.value)

    def __repr__(self):
        return repr(self.value)


class Var(Expr):
    __slots__ = ("var",)

    def __init__(self, var: Variable):
        self.var = var

    def evaluate(self, env):
        return env[self.var]

    def jet(self, center, degree):
        # Displacement coordinates: the polynomial variable stands for x - c.
        c = float(center.get(self.var, 0.0))
        p = Polynomial.constant(c)
        if degree >= 1:
            p = p + Polynomial.from_var(self.var)
        return p

    def variables(self):
        return {self.var}

    def _codegen(self, names):
        return names[self.var]

    def __repr__(self):
        return self.var.name


class Sum(Expr):
    __slots__ = ("children",)

    def __init__(self, children: Sequence[Expr]):
        flat: list[Expr] = []
        for ch in children:
            if isinstance(ch, Sum):
                flat.extend(ch.children)
            else:
                flat.append(ch)
        self.children = tuple(flat)

    def evaluate(self, env):
        total = self.children[0].evaluate(env)
        for ch in self.children[1:]:
            total = total + ch.evaluate(env)
        return total

    def jet(self, center, degree):
        p = Polynomial.zero()
        for ch in self.children:
            p = p + ch.jet(center, degree)
        return p

    def variables(self):
        out: set[Variable] = set()
        for ch in self.children:
            out |= ch.variables()
        return out

    def _codegen(self, names):
        return "(" + " + ".join(ch._codegen(names) for ch in self.children) + ")"

    def __repr__(self):
        return "(" + " + ".join(map(repr, self.children)) + ")"


class Prod(Expr):
    __slots__ = ("children",)

    def __init__(self, children: Sequence[Expr]):
        flat: list[Expr] = []
        for ch in children:
            if isinstance(ch, Prod):
                flat.extend(ch.children)
            else:
                flat.append(ch)
        self.children = tuple(flat)

    def evaluate(self, env):
        total = self.children[0].evaluate(env)
        for ch in self.children[1:]:
            total = total * ch.evaluate(env)
        return total

    def jet(self, center, degree):
        p = Polynomial.constant(1.0)
        for ch in self.children:
            p = p.mul_truncated(ch.jet(center, degree), degree)
        return p

    def variables(self):
        out: set[Variable] = set()
        for ch in self.children:
            out |= ch.variables()
        return out

    def _codegen(self, names):
        return "(" + " * ".join(ch._codegen(names) for ch in self.children) + ")"

    def __repr__(self):
        return "(" + " * ".join(map(repr, self.children)) + ")"


def _jet_reciprocal(p: Polynomial, degree: int) -> Polynomial:
    """Truncated series of 1/p; requires a nonzero constant term."""
    a0 = p.constant_term()
    if a0 == 0.0:
        raise ZeroDivisionError("reciprocal of an expression vanishing at the expansion point")
    q = (p - a0).scaled(1.0 / a0)  # 1/p = (1/a0) * 1/(1+q)
    inv = Polynomial.constant(1.0)
    qk = Polynomial.constant(1.0)
    for k in range(1, degree + 1):
        qk = qk.mul_truncated(q, degree)
        if qk.is_zero():
            break
        inv = inv + qk.scaled((-1.0) ** k)
    return inv.scaled(1.0 / a0)


class Pow(Expr):
    """Integer power; exponent may be negative (base must not vanish there)."""

    __slots__ = ("base", "exponent")

    def __init__(self, base: Expr, exponent: int):
        if not isinstance(exponent, int):
            raise ValueError("power exponent must be an integer")
        self.base = base
        self.exponent = exponent

    def evaluate(self, env):
        b = self.base.evaluate(env)
        if self.exponent < 0:
            return 1.0 / (b ** (-self.exponent))
        return b ** self.exponent

    def jet(self, center, degree):
        p = self.base.jet(center, degree)
        k = self.exponent
        if k == 0:
            return Polynomial.constant(1.0)
        if k < 0:
            p = _jet_reciprocal(p, degree)
            k = -k
        result = Polynomial.constant(1.0)
        base = p
        while k:
            if k & 1:
                result = result.mul_truncated(base, degree)
            k >>= 1
            if k:
                base = base.mul_truncated(base, degree)
        return result

    def variables(self):
        return self.base.variables()

    def _codegen(self, names):
        return f"({self.base._codegen(names)} ** ({self.exponent}))" if self.exponent >= 0 \
            else f"((1.0 / {self.base._codegen(names)}) ** ({-self.exponent}))"

    def __repr__(self):
        return f"({self.base!r})**{self.exponent}"


class Sin(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self.arg = arg

    def evaluate(self, env):
        return np.sin(self.arg.evaluate(env))

    def jet(self, center, degree):
        p = self.arg.jet(center, degree)
        a0 = p.constant_term()
        q = p - a0
        return _sin_series(q, degree).scaled(math.cos(a0)) + \
            _cos_series(q, degree).scaled(math.sin(a0))

    def variables(self):
        return self.arg.variables()

    def _codegen(self, names):
        return f"_sin({self.arg._codegen(names)})"

    def __repr__(self):
        return f"sin({self.arg!r})"


class Cos(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self.arg = arg

    def evaluate(self, env):
        return np.cos(self.arg.evaluate(env))

    def jet(self, center, degree):
        p = self.arg.jet(center, degree)
        a0 = p.constant_term()
        q = p - a0
        return _cos_series(q, degree).scaled(math.cos(a0)) - \
            _sin_series(q, degree).scaled(math.sin(a0))

    def variables(self):
        return self.arg.variables()

    def _codegen(self, names):
        return f"_cos({self.arg._codegen(names)})"

    def __repr__(self):
        return f"cos({self.arg!r})"


def _sin_series(q: Polynomial, degree: int) -> Polynomial:
    """sin(q) truncated, where q has zero constant term."""
    result = Polynomial.zero()
    qk = Polynomial.constant(1.0)
    k = 0
    while k <= degree:
        if k % 2 == 1:
            result = result + qk.scaled((-1.0) ** ((k - 1) // 2) / math.factorial(k))
        k += 1
        qk = qk.mul_truncated(q, degree)
        if qk.is_zero():
            break
    return result


def _cos_series(q: Polynomial, degree: int) -> Polynomial:
    """cos(q) truncated, where q has zero constant term."""
    result = Polynomial.zero()
    qk = Polynomial.constant(1.0)
    k = 0
    while k <= degree:
        if k % 2 == 0:
            result = result + qk.scaled((-1.0) ** (k // 2) / math.factorial(k))
        k += 1
        qk = qk.mul_truncated(q, degree)
        if qk.is_zero():
            break
    return result


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, Variable):
        return Var(value)
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Const(float(value))
    if isinstance(value, Polynomial):
        return expr_from_polynomial(value)
    raise TypeError(f"cannot interpret {value!r} as an expression")


def sin(arg) -> Sin:
    return Sin(as_expr(arg))


def cos(arg) -> Cos:
    return Cos(as_expr(arg))


def expr_from_polynomial(p: Polynomial) -> Expr:
    """Lift a polynomial into an expression tree."""
    terms: list[Expr] = []
    for m, c in p.sorted_terms():
        factors: list[Expr] = [Const(c)]
        for v, e in m.exps:
            factors.append(Pow(Var(v), e) if e != 1 else Var(v))
        terms.append(Prod(factors) if len(factors) > 1 else factors[0])
    if not terms:
        return Const(0.0)
    return Sum(terms) if len(terms) > 1 else terms[0]


def taylor(expr: Expr, center: Mapping[Variable, float], degree: int) -> Polynomial:
    """Multivariate Taylor polynomial of ``expr`` about ``center``.

    The result is expressed in displacement coordinates: each variable of the
    returned polynomial stands for (original variable - center value).
    """
    if degree < 0:
        raise ValueError("taylor degree must be nonnegative")
    if not isinstance(expr, Expr):
        expr = as_expr(expr)
    return expr.jet(center, degree)


def compile_vector(exprs: Sequence[Expr], var_order: Sequence[Variable]):
    """Compile expression trees into one vectorized numpy callable.

    Returns f with f(points[..., nvars]) -> values[..., len(exprs)].
    """
    names = {v: f"_x[..., {i}]" for i, v in enumerate(var_order)}
    for e in exprs:
        missing = e.variables() - set(var_order)
        if missing:
            raise KeyError(f"expressions use variables outside var_order: {missing}")
    # Multiplying by _one broadcasts constant components to the batch shape.
    body = ", ".join(f"_one * ({e._codegen(names)})" for e in exprs)
    src = (
        "def _f(_x):\n"
        "    _one = _np.ones(_x.shape[:-1])\n"
        f"    return _np.stack([{body}], axis=-1)\n"
    )
    namespace = {"_np": np, "_sin": np.sin, "_cos": np.cos}
    exec(src, namespace)  # codegen from our own trees only
    return namespace["_f"]
