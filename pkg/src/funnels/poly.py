"""Sparse multivariate polynomials over named indeterminates.

A Polynomial maps monomials to double-precision coefficients.  Terms whose
magnitude falls below CANON_EPS times the largest coefficient are dropped on
construction, so every Polynomial is in canonical form.  Monomials are ordered
graded-lexicographically with indeterminates ordered by name; this ordering is
fixed globally so that everything compiled downstream (Gram bases, SDP
equality rows) is deterministic across runs.

Values are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

import math
import re
from typing import Iterable, Mapping, Sequence

import numpy as np

# Relative magnitude below which a term is dropped during canonicalization.
CANON_EPS = 1e-14


class Variable:
    """An interned, name-ordered indeterminate."""

    __slots__ = ("name",)
    _registry: dict[str, "Variable"] = {}

    def __new__(cls, name: str) -> "Variable":
        if not name or not isinstance(name, str):
            raise ValueError(f"invalid variable name: {name!r}")
        existing = cls._registry.get(name)
        if existing is not None:
            return existing
        obj = object.__new__(cls)
        obj.name = name
        cls._registry[name] = obj
        return obj

    def __repr__(self) -> str:
        return self.name

    def __lt__(self, other: "Variable") -> bool:
        return self.name < other.name

    def __hash__(self) -> int:
        return hash(self.name)

    def __eq__(self, other: object) -> bool:
        return self is other

    # Arithmetic promotes to Polynomial so tests can write x**2 + 2*x*y + 1.
    def _poly(self) -> "Polynomial":
        return Polynomial({Monomial({self: 1}): 1.0})

    def __add__(self, other):
        return self._poly() + other

    def __radd__(self, other):
        return self._poly() + other

    def __sub__(self, other):
        return self._poly() - other

    def __rsub__(self, other):
        return (-self._poly()) + other

    def __mul__(self, other):
        return self._poly() * other

    def __rmul__(self, other):
        return self._poly() * other

    def __neg__(self):
        return -self._poly()

    def __pow__(self, k: int):
        return self._poly() ** k


def variables(names: str | Iterable[str]) -> tuple[Variable, ...]:
    """Create (or look up) a tuple of variables from space-separated names."""
    if isinstance(names, str):
        names = names.split()
    return tuple(Variable(n) for n in names)


class Monomial:
    """A product of indeterminate powers; zero exponents are never stored."""

    __slots__ = ("exps", "_hash")

    def __init__(self, exponents: Mapping[Variable, int] | Iterable[tuple[Variable, int]] = ()):
        items = exponents.items() if isinstance(exponents, Mapping) else exponents
        cleaned = []
        for var, e in items:
            if not isinstance(e, int) or e < 0:
                raise ValueError(f"exponent of {var} must be a nonnegative int, got {e!r}")
            if e > 0:
                cleaned.append((var, e))
        cleaned.sort(key=lambda ve: ve[0].name)
        self.exps: tuple[tuple[Variable, int], ...] = tuple(cleaned)
        self._hash = hash(self.exps)

    def degree(self) -> int:
        return sum(e for _, e in self.exps)

    def degree_in(self, var: Variable) -> int:
        for v, e in self.exps:
            if v is var:
                return e
        return 0

    def variables(self) -> tuple[Variable, ...]:
        return tuple(v for v, _ in self.exps)

    def mul(self, other: "Monomial") -> "Monomial":
        merged = dict(self.exps)
        for v, e in other.exps:
            merged[v] = merged.get(v, 0) + e
        return Monomial(merged)

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Monomial) and self.exps == other.exps

    def sort_key(self) -> tuple:
        # Graded lex: total degree first, then exponents compared variable by
        # variable in global name order (higher exponent on an earlier
        # variable ranks first).  Negating exponents makes plain tuple
        # comparison produce that order with ascending sort.
        return (self.degree(), tuple((v.name, -e) for v, e in self.exps))

    def __lt__(self, other: "Monomial") -> bool:
        return self.sort_key() < other.sort_key()

    def __repr__(self) -> str:
        if not self.exps:
            return "1"
        return " ".join(f"{v.name}^{e}" if e != 1 else v.name for v, e in self.exps)


ONE = Monomial()


def _as_poly(value) -> "Polynomial":
    if isinstance(value, Polynomial):
        return value
    if isinstance(value, Variable):
        return value._poly()
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Polynomial({ONE: float(value)})
    raise TypeError(f"cannot interpret {value!r} as a polynomial")


class Polynomial:
    """Sparse polynomial with real coefficients, canonical after construction."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[Monomial, float] | None = None):
        if terms is None:
            terms = {}
        max_abs = 0.0
        for c in terms.values():
            a = abs(c)
            if a > max_abs:
                max_abs = a
        if max_abs > 0.0 and not math.isfinite(max_abs):
            raise ValueError("non-finite coefficient in polynomial")
        cutoff = CANON_EPS * max_abs
        self.terms: dict[Monomial, float] = {
            m: float(c) for m, c in terms.items() if abs(c) > cutoff
        }

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zero() -> "Polynomial":
        return Polynomial({})

    @staticmethod
    def constant(c: float) -> "Polynomial":
        return Polynomial({ONE: float(c)})

    @staticmethod
    def from_var(v: Variable) -> "Polynomial":
        return Polynomial({Monomial({v: 1}): 1.0})

    # -- inspection ----------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        return max((m.degree() for m in self.terms), default=0)

    def degree_in(self, var: Variable) -> int:
        return max((m.degree_in(var) for m in self.terms), default=0)

    def variables(self) -> tuple[Variable, ...]:
        seen = set()
        for m in self.terms:
            seen.update(m.variables())
        return tuple(sorted(seen, key=lambda v: v.name))

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m, 0.0)

    def constant_term(self) -> float:
        return self.terms.get(ONE, 0.0)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self.terms.items(), key=lambda mc: mc[0].sort_key())

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Polynomial":
        other = _as_poly(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-_as_poly(other))

    def __rsub__(self, other) -> "Polynomial":
        return _as_poly(other) + (-self)

    def __mul__(self, other) -> "Polynomial":
        other = _as_poly(other)
        return self.mul_truncated(other, None)

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "Polynomial":
        return self * (1.0 / float(scalar))

    def __pow__(self, k: int) -> "Polynomial":
        if not isinstance(k, int) or k < 0:
            raise ValueError("polynomial power must be a nonnegative integer")
        result = Polynomial.constant(1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    def mul_truncated(self, other: "Polynomial", max_degree: int | None) -> "Polynomial":
        """Distributive product, optionally dropping terms above max_degree."""
        out: dict[Monomial, float] = {}
        for ma, ca in self.terms.items():
            da = ma.degree()
            for mb, cb in other.terms.items():
                if max_degree is not None and da + mb.degree() > max_degree:
                    continue
                m = ma.mul(mb)
                out[m] = out.get(m, 0.0) + ca * cb
        return Polynomial(out)

    def truncated(self, max_degree: int) -> "Polynomial":
        return Polynomial({m: c for m, c in self.terms.items() if m.degree() <= max_degree})

    def scaled(self, s: float) -> "Polynomial":
        return Polynomial({m: c * s for m, c in self.terms.items()})

    # -- calculus ------------------------------------------------------------

    def differentiate(self, var: Variable) -> "Polynomial":
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            e = m.degree_in(var)
            if e == 0:
                continue
            reduced = dict(m.exps)
            if e == 1:
                del reduced[var]
            else:
                reduced[var] = e - 1
            dm = Monomial(reduced)
            out[dm] = out.get(dm, 0.0) + c * e
        return Polynomial(out)

    def gradient(self, vars: Sequence[Variable]) -> list["Polynomial"]:
        return [self.differentiate(v) for v in vars]

    # -- evaluation and substitution ------------------------------------------

    def evaluate(self, point: Mapping[Variable, float]) -> float:
        """Evaluate at a point given as a {variable: value} mapping.

        Raises KeyError if a variable of the polynomial is missing from the
        point (dimension mismatch).
        """
        total = 0.0
        for m, c in self.terms.items():
            term = c
            for v, e in m.exps:
                if v not in point:
                    raise KeyError(f"no value supplied for indeterminate {v}")
                term *= point[v] ** e
            total += term
        return total

    def substitute(self, var: Variable, replacement) -> "Polynomial":
        """Replace ``var`` by a polynomial and expand."""
        replacement = _as_poly(replacement)
        # Group by the exponent of var, then build powers of the replacement.
        by_exp: dict[int, dict[Monomial, float]] = {}
        for m, c in self.terms.items():
            e = m.degree_in(var)
            rest = Monomial([(v, k) for v, k in m.exps if v is not var])
            bucket = by_exp.setdefault(e, {})
            bucket[rest] = bucket.get(rest, 0.0) + c
        result = Polynomial.zero()
        power = Polynomial.constant(1.0)
        for e in range(0, max(by_exp) + 1 if by_exp else 0):
            if e > 0:
                power = power * replacement
            if e in by_exp:
                result = result + Polynomial(by_exp[e]) * power
        return result

    def shift(self, offsets: Mapping[Variable, float]) -> "Polynomial":
        """Substitute x <- x + offset for every (variable, offset) pair."""
        out = self
        for v, d in offsets.items():
            if d != 0.0:
                out = out.substitute(v, Polynomial.from_var(v) + d)
        return out

    # -- quadratic structure ---------------------------------------------------

    def quadratic_form(self, vars: Sequence[Variable]) -> tuple[np.ndarray, np.ndarray, float]:
        """Split a degree-<=2 polynomial into (P, q, c) with p = x'Px + q'x + c."""
        if self.degree() > 2:
            raise ValueError("polynomial has degree > 2")
        n = len(vars)
        index = {v: i for i, v in enumerate(vars)}
        P = np.zeros((n, n))
        q = np.zeros(n)
        c = 0.0
        for m, coeff in self.terms.items():
            d = m.degree()
            if d == 0:
                c = coeff
            elif d == 1:
                v, _ = m.exps[0]
                q[index[v]] += coeff
            else:
                if len(m.exps) == 1:
                    v, _ = m.exps[0]
                    P[index[v], index[v]] += coeff
                else:
                    (v1, _), (v2, _) = m.exps
                    i, j = index[v1], index[v2]
                    P[i, j] += coeff / 2.0
                    P[j, i] += coeff / 2.0
        return P, q, c

    @staticmethod
    def from_quadratic_form(P: np.ndarray, vars: Sequence[Variable]) -> "Polynomial":
        """Build x'Px from a symmetric matrix."""
        n = len(vars)
        terms: dict[Monomial, float] = {}
        for i in range(n):
            for j in range(i, n):
                coeff = P[i, i] if i == j else P[i, j] + P[j, i]
                if coeff != 0.0:
                    m = Monomial({vars[i]: 2}) if i == j else Monomial({vars[i]: 1, vars[j]: 1})
                    terms[m] = terms.get(m, 0.0) + float(coeff)
        return Polynomial(terms)

    # -- text serialization -----------------------------------------------------

    def to_text(self) -> str:
        """Serialize as a sorted 'coeff * x^a y^b' term list, 17 significant digits."""
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.sorted_terms():
            if m is ONE or not m.exps:
                parts.append(format(c, ".17g"))
            else:
                mono = " ".join(f"{v.name}^{e}" for v, e in m.exps)
                parts.append(f"{format(c, '.17g')} * {mono}")
        return " + ".join(parts)

    @staticmethod
    def from_text(text: str) -> "Polynomial":
        text = text.strip()
        if text == "0" or not text:
            return Polynomial.zero()
        terms: dict[Monomial, float] = {}
        for part in text.split(" + "):
            if "*" in part:
                coeff_str, mono_str = part.split("*", 1)
                coeff = float(coeff_str.strip())
                exps = {}
                for factor in mono_str.split():
                    mobj = re.fullmatch(r"([A-Za-z_][A-Za-z_0-9]*)\^(\d+)", factor)
                    if not mobj:
                        raise ValueError(f"malformed monomial factor: {factor!r}")
                    exps[Variable(mobj.group(1))] = int(mobj.group(2))
                m = Monomial(exps)
            else:
                coeff = float(part.strip())
                m = ONE
            terms[m] = terms.get(m, 0.0) + coeff
        return Polynomial(terms)

    def __repr__(self) -> str:
        return f"Polynomial({self.to_text()})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, (Polynomial, Variable, int, float)):
            return NotImplemented
        return (self - _as_poly(other)).is_zero()

    def __hash__(self):
        raise TypeError("Polynomial is not hashable")


def monomials_up_to(vars: Sequence[Variable], degree: int, min_degree: int = 0) -> list[Monomial]:
    """All monomials in the given variables with min_degree <= total degree <= degree,
    in graded-lex order."""
    vars = sorted(vars, key=lambda v: v.name)
    out: list[Monomial] = []

    def rec(idx: int, remaining: int, current: list[tuple[Variable, int]]):
        if idx == len(vars):
            deg = degree - remaining
            if deg >= min_degree:
                out.append(Monomial(current))
            return
        for e in range(remaining + 1):
            rec(idx + 1, remaining - e, current + ([(vars[idx], e)] if e else []))

    rec(0, degree, [])
    out.sort(key=lambda m: m.sort_key())
    return out


class PolyVecEvaluator:
    """Vectorized evaluator for a fixed list of polynomials over fixed variables.

    Precomputes exponent/coefficient arrays so repeated evaluation inside
    integrators stays cheap.
    """

    def __init__(self, polys: Sequence[Polynomial], var_order: Sequence[Variable]):
        self.var_order = tuple(var_order)
        index = {v: i for i, v in enumerate(self.var_order)}
        self.n_out = len(polys)
        self._entries = []
        for p in polys:
            if p.is_zero():
                self._entries.append((np.zeros((1, len(self.var_order)), dtype=np.int64),
                                      np.zeros(1)))
                continue
            for v in p.variables():
                if v not in index:
                    raise KeyError(f"polynomial uses {v} outside the evaluator's variables")
            ms = p.sorted_terms()
            exps = np.zeros((len(ms), len(self.var_order)), dtype=np.int64)
            coeffs = np.zeros(len(ms))
            for k, (m, c) in enumerate(ms):
                coeffs[k] = c
                for v, e in m.exps:
                    exps[k, index[v]] = e
            self._entries.append((exps, coeffs))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """points: (..., nvars) -> values (..., n_out)."""
        points = np.asarray(points, dtype=float)
        out = np.empty(points.shape[:-1] + (self.n_out,))
        for k, (exps, coeffs) in enumerate(self._entries):
            # (..., nterms) monomial values
            mono = np.prod(points[..., None, :] ** exps[None, :, :], axis=-1) \
                if points.ndim > 1 else np.prod(points[None, :] ** exps, axis=-1)
            out[..., k] = mono @ coeffs
        return out
