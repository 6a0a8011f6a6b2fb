"""Sums-of-squares programs over decision-coefficient polynomials.

A program owns scalar decision variables; polynomials whose coefficients are
affine in those variables (AffinePoly) can be constrained to be SOS, tied by
linear equalities/inequalities, and a linear objective maximized.  compile()
lowers the program to a block SdpProblem: one Gram (PSD) block per SOS
constraint and one equality per monomial matching the Gram expansion against
the decision-affine coefficients.

Decision variables enter only affinely.  Products of two decision-dependent
polynomials are rejected; callers must fix one side to numbers first, which
keeps the bilinear alternation structure of the synthesis loops explicit.

Gram bases are the monomials of half the constraint degree, trimmed to half
of the Newton polytope of the constraint's support (an exponent e is kept
only when 2e lies in the convex hull of the support), which shrinks the SDP
without changing feasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import sdp as sdp_mod
from .poly import Monomial, ONE, Polynomial, Variable, monomials_up_to

DEFAULT_RESIDUAL_TOL = 1e-7
DEFAULT_EIG_TOL = 1e-7


class LinExpr:
    """Affine expression c0 + sum_k a_k d_k over scalar decision variables."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs: dict[int, float] | None = None, const: float = 0.0):
        self.coeffs = {k: float(v) for k, v in (coeffs or {}).items() if v != 0.0}
        self.const = float(const)

    @staticmethod
    def variable(idx: int) -> "LinExpr":
        return LinExpr({idx: 1.0})

    @staticmethod
    def constant(c: float) -> "LinExpr":
        return LinExpr({}, c)

    def is_constant(self) -> bool:
        return not self.coeffs

    def is_zero(self) -> bool:
        return not self.coeffs and self.const == 0.0

    def __add__(self, other):
        other = _as_linexpr(other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return LinExpr(out, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return LinExpr({k: -v for k, v in self.coeffs.items()}, -self.const)

    def __sub__(self, other):
        return self + (-_as_linexpr(other))

    def __rsub__(self, other):
        return _as_linexpr(other) + (-self)

    def __mul__(self, scalar):
        if isinstance(scalar, LinExpr):
            if scalar.is_constant():
                scalar = scalar.const
            elif self.is_constant():
                return scalar * self.const
            else:
                raise ValueError("product of two decision expressions is bilinear; "
                                 "fix one side to numbers first")
        s = float(scalar)
        return LinExpr({k: v * s for k, v in self.coeffs.items()}, self.const * s)

    __rmul__ = __mul__

    def evaluate(self, assignment: np.ndarray) -> float:
        return self.const + sum(v * assignment[k] for k, v in self.coeffs.items())

    def __repr__(self):
        parts = [f"{v:g}*d{k}" for k, v in sorted(self.coeffs.items())]
        if self.const or not parts:
            parts.append(f"{self.const:g}")
        return " + ".join(parts)


def _as_linexpr(value) -> LinExpr:
    if isinstance(value, LinExpr):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return LinExpr.constant(float(value))
    raise TypeError(f"cannot interpret {value!r} as a linear expression")


class AffinePoly:
    """Polynomial whose coefficients are LinExpr in the program's decision vars."""

    __slots__ = ("terms",)

    def __init__(self, terms: dict[Monomial, LinExpr] | None = None):
        self.terms = {m: e for m, e in (terms or {}).items() if not e.is_zero()}

    @staticmethod
    def from_poly(p: Polynomial) -> "AffinePoly":
        return AffinePoly({m: LinExpr.constant(c) for m, c in p.terms.items()})

    def is_numeric(self) -> bool:
        return all(e.is_constant() for e in self.terms.values())

    def degree(self) -> int:
        return max((m.degree() for m in self.terms), default=0)

    def variables(self) -> tuple[Variable, ...]:
        seen = set()
        for m in self.terms:
            seen.update(m.variables())
        return tuple(sorted(seen, key=lambda v: v.name))

    def decision_indices(self) -> set[int]:
        out: set[int] = set()
        for e in self.terms.values():
            out.update(e.coeffs)
        return out

    def __add__(self, other):
        other = _as_affine(other)
        out = dict(self.terms)
        for m, e in other.terms.items():
            out[m] = out.get(m, LinExpr()) + e
        return AffinePoly(out)

    __radd__ = __add__

    def __neg__(self):
        return AffinePoly({m: -e for m, e in self.terms.items()})

    def __sub__(self, other):
        return self + (-_as_affine(other))

    def __rsub__(self, other):
        return _as_affine(other) + (-self)

    def __mul__(self, other):
        """Multiply by a numeric polynomial, scalar, or LinExpr scale.

        Products that would be bilinear in decision variables are rejected.
        """
        if isinstance(other, (int, float, np.integer, np.floating)):
            s = float(other)
            return AffinePoly({m: e * s for m, e in self.terms.items()})
        if isinstance(other, LinExpr):
            if other.is_constant():
                return self * other.const
            if self.is_numeric():
                return AffinePoly({m: other * e.const for m, e in self.terms.items()})
            raise ValueError("bilinear product of decision quantities rejected")
        if isinstance(other, Variable):
            other = Polynomial.from_var(other)
        if isinstance(other, AffinePoly):
            if other.is_numeric():
                other = other.to_poly_numeric()
            elif self.is_numeric():
                return other * self.to_poly_numeric()
            else:
                raise ValueError("bilinear product of decision polynomials rejected; "
                                 "fix one factor to numbers first")
        if not isinstance(other, Polynomial):
            raise TypeError(f"cannot multiply AffinePoly by {other!r}")
        out: dict[Monomial, LinExpr] = {}
        for m, e in self.terms.items():
            for mq, cq in other.terms.items():
                mm = m.mul(mq)
                out[mm] = out.get(mm, LinExpr()) + e * cq
        return AffinePoly(out)

    __rmul__ = __mul__

    def differentiate(self, var: Variable) -> "AffinePoly":
        out: dict[Monomial, LinExpr] = {}
        for m, e in self.terms.items():
            k = m.degree_in(var)
            if k == 0:
                continue
            reduced = dict(m.exps)
            if k == 1:
                del reduced[var]
            else:
                reduced[var] = k - 1
            dm = Monomial(reduced)
            out[dm] = out.get(dm, LinExpr()) + e * float(k)
        return AffinePoly(out)

    def eval_at_point(self, point: dict[Variable, float]) -> LinExpr:
        """Evaluate the indeterminates at a point; result is affine in decisions."""
        total = LinExpr()
        for m, e in self.terms.items():
            scale = 1.0
            for v, k in m.exps:
                scale *= point[v] ** k
            total = total + e * scale
        return total

    def to_poly_numeric(self) -> Polynomial:
        if not self.is_numeric():
            raise ValueError("polynomial still contains decision variables")
        return Polynomial({m: e.const for m, e in self.terms.items()})

    def subs_decisions(self, assignment: np.ndarray) -> Polynomial:
        return Polynomial({m: e.evaluate(assignment) for m, e in self.terms.items()})

    def __repr__(self):
        parts = [f"({e!r})*{m!r}" for m, e in sorted(self.terms.items(),
                                                     key=lambda me: me[0].sort_key())]
        return " + ".join(parts) if parts else "0"


def _as_affine(value) -> AffinePoly:
    if isinstance(value, AffinePoly):
        return value
    if isinstance(value, Polynomial):
        return AffinePoly.from_poly(value)
    if isinstance(value, Variable):
        return AffinePoly.from_poly(Polynomial.from_var(value))
    if isinstance(value, (int, float, np.integer, np.floating)):
        return AffinePoly.from_poly(Polynomial.constant(float(value)))
    if isinstance(value, LinExpr):
        return AffinePoly({ONE: value})
    raise TypeError(f"cannot interpret {value!r} as an affine polynomial")


def half_newton_basis(support: list[Monomial], vars: tuple[Variable, ...],
                      half_degree: int) -> list[Monomial]:
    """Monomials of degree <= half_degree whose doubles lie in conv(support)."""
    if not support:
        return [ONE]
    candidates = monomials_up_to(vars, half_degree)
    pts = np.array([[m.degree_in(v) for v in vars] for m in support], dtype=float)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    deg_lo, deg_hi = pts.sum(axis=1).min(), pts.sum(axis=1).max()
    kept = []
    for cand in candidates:
        e2 = np.array([2.0 * cand.degree_in(v) for v in vars])
        if np.any(e2 < lo - 1e-9) or np.any(e2 > hi + 1e-9):
            continue
        d2 = e2.sum()
        if d2 < deg_lo - 1e-9 or d2 > deg_hi + 1e-9:
            continue
        if len(support) == 1:
            if np.allclose(e2, pts[0]):
                kept.append(cand)
            continue
        A_eq = np.vstack([pts.T, np.ones(len(support))])
        b_eq = np.concatenate([e2, [1.0]])
        res = scipy.optimize.linprog(np.zeros(len(support)), A_eq=A_eq, b_eq=b_eq,
                                     bounds=[(0, None)] * len(support), method="highs")
        if res.status == 0:
            kept.append(cand)
    return kept


@dataclass
class SosConstraint:
    poly: AffinePoly
    basis: list[Monomial]
    name: str


@dataclass
class Certificate:
    """Gram-matrix proof that one constraint polynomial is a sum of squares."""

    name: str
    basis: tuple[Monomial, ...]
    gram: np.ndarray
    constraint_index: int

    def reconstruct(self) -> Polynomial:
        """Expand basis' * Gram * basis into a plain polynomial."""
        out: dict[Monomial, float] = {}
        k = len(self.basis)
        for i in range(k):
            for j in range(i, k):
                m = self.basis[i].mul(self.basis[j])
                w = self.gram[i, j] * (1.0 if i == j else 2.0)
                out[m] = out.get(m, 0.0) + w
        return Polynomial(out)

    def to_text(self) -> str:
        lines = [f"basis {len(self.basis)}"]
        lines += [repr(m) for m in self.basis]
        lines.append("gram row-major")
        for row in self.gram:
            lines.append(" ".join(format(v, ".17g") for v in row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str, name: str = "", constraint_index: int = -1) -> "Certificate":
        lines = [ln for ln in text.strip().splitlines()]
        k = int(lines[0].split()[1])
        basis = []
        for ln in lines[1:1 + k]:
            exps = {}
            if ln.strip() != "1":
                for factor in ln.split():
                    if "^" in factor:
                        nm, e = factor.split("^")
                        exps[Variable(nm)] = int(e)
                    else:
                        exps[Variable(factor)] = 1
            basis.append(Monomial(exps))
        gram = np.array([[float(v) for v in ln.split()] for ln in lines[2 + k:2 + 2 * k]])
        return Certificate(name, tuple(basis), gram, constraint_index)


@dataclass
class CertReport:
    passed: bool
    residual: float
    min_eig: float
    residual_tol: float
    eig_tol: float


def refine_certificate(cert: Certificate, target: Polynomial) -> Certificate:
    """Least-norm correction of the Gram matrix so that the reconstruction
    matches the target polynomial exactly (up to round-off).

    The correction is the projection of the residual onto the affine
    coefficient-matching subspace; positive semidefiniteness is then judged by
    the independent check, so this cannot manufacture an invalid proof.
    """
    basis = cert.basis
    k = len(basis)
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    pair_index: dict[Monomial, list[int]] = {}
    for idx, (i, j) in enumerate(pairs):
        pair_index.setdefault(basis[i].mul(basis[j]), []).append(idx)
    monos = sorted(set(pair_index) | set(target.terms.keys()),
                   key=lambda m: m.sort_key())
    L = np.zeros((len(monos), len(pairs)))
    rhs = np.zeros(len(monos))
    g = np.array([cert.gram[i, j] for (i, j) in pairs])
    for r, mono in enumerate(monos):
        for idx in pair_index.get(mono, []):
            i, j = pairs[idx]
            L[r, idx] = 1.0 if i == j else 2.0
        rhs[r] = target.coefficient(mono) - L[r] @ g
    delta, *_ = np.linalg.lstsq(L, rhs, rcond=None)
    G = cert.gram.copy()
    for idx, (i, j) in enumerate(pairs):
        G[i, j] += delta[idx]
        if i != j:
            G[j, i] += delta[idx]
    return Certificate(cert.name, cert.basis, G, cert.constraint_index)


def check_certificate(cert: Certificate, target: Polynomial,
                      residual_tol: float = DEFAULT_RESIDUAL_TOL,
                      eig_tol: float = DEFAULT_EIG_TOL) -> CertReport:
    """Independently verify a certificate against the claimed polynomial.

    Recomputes the Gram expansion and minimum eigenvalue with no solver
    involvement.  The residual is coefficient-wise, relative to the largest
    coefficient of the target.
    """
    G = 0.5 * (cert.gram + cert.gram.T)
    min_eig = float(np.linalg.eigvalsh(G)[0]) if G.size else 0.0
    recon = cert.reconstruct()
    diff = recon - target
    scale = max(target.max_abs_coeff(), recon.max_abs_coeff(), 1.0)
    residual = diff.max_abs_coeff() / scale
    passed = (min_eig >= -eig_tol) and (residual <= residual_tol)
    return CertReport(passed, residual, min_eig, residual_tol, eig_tol)


@dataclass
class SosResult:
    status: str  # optimal | infeasible | unbounded | stalled
    assignment: np.ndarray | None
    objective: float | None
    certificates: list[Certificate] = field(default_factory=list)
    cert_reports: list[CertReport] = field(default_factory=list)
    dual_certificate: dict | None = None
    sdp_solution: sdp_mod.SdpSolution | None = None

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


class SosProgram:
    """Container for decision variables, SOS constraints, and linear structure."""

    def __init__(self):
        self.var_names: list[str] = []
        self.sos_constraints: list[SosConstraint] = []
        self.linear_eqs: list[tuple[LinExpr, float]] = []
        self.linear_ineqs: list[tuple[LinExpr, float]] = []  # expr >= rhs
        self.objective: LinExpr | None = None  # maximized

    # -- decision variables -----------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def new_var(self, name: str | None = None) -> LinExpr:
        idx = len(self.var_names)
        self.var_names.append(name or f"d{idx}")
        return LinExpr.variable(idx)

    def new_decision_poly(self, vars, degree: int, min_degree: int = 0,
                          name: str = "p") -> AffinePoly:
        """Fresh decision polynomial: one new scalar variable per monomial with
        min_degree <= total degree <= degree."""
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        terms = {}
        for m in monomials_up_to(tuple(vars), degree, min_degree):
            terms[m] = self.new_var(f"{name}[{m!r}]")
        return AffinePoly(terms)

    # -- constraints --------------------------------------------------------------

    def add_sos(self, p, name: str | None = None) -> int:
        """Constrain p (decision-affine) to be a sum of squares."""
        p = _as_affine(p)
        deg = p.degree()
        if deg % 2 != 0:
            raise ValueError(f"odd-degree polynomial (degree {deg}) cannot be SOS")
        support = sorted(p.terms.keys(), key=lambda m: m.sort_key())
        basis = half_newton_basis(support, p.variables(), deg // 2)
        if not basis:
            basis = [ONE]
        self.sos_constraints.append(SosConstraint(p, basis, name or f"sos{len(self.sos_constraints)}"))
        return len(self.sos_constraints) - 1

    def add_linear_eq(self, expr: LinExpr, rhs: float = 0.0):
        expr = _as_linexpr(expr)
        self.linear_eqs.append((expr, float(rhs)))

    def add_linear_ineq_ge(self, expr: LinExpr, rhs: float = 0.0):
        """expr >= rhs, realized with a 1x1 PSD slack block at compile time."""
        expr = _as_linexpr(expr)
        self.linear_ineqs.append((expr, float(rhs)))

    def set_objective_max(self, expr: LinExpr):
        self.objective = _as_linexpr(expr)

    # -- compilation ----------------------------------------------------------------

    def compile(self) -> sdp_mod.SdpProblem:
        """Lower to a block SDP; ordering is deterministic (graded-lex)."""
        prob = sdp_mod.SdpProblem()
        if self.n_vars:
            prob.add_free(self.n_vars)
        for con in self.sos_constraints:
            bi = prob.add_block(len(con.basis))
            # map gamma -> list of (i, j) with basis_i*basis_j = gamma
            pair_map: dict[Monomial, list[tuple[int, int]]] = {}
            for i in range(len(con.basis)):
                for j in range(i, len(con.basis)):
                    g = con.basis[i].mul(con.basis[j])
                    pair_map.setdefault(g, []).append((i, j))
            all_monos = set(pair_map) | set(con.poly.terms.keys())
            for g in sorted(all_monos, key=lambda m: m.sort_key()):
                entries = [(bi, i, j, 1.0) for (i, j) in pair_map.get(g, [])]
                e = con.poly.terms.get(g, LinExpr())
                free_entries = [(k, -v) for k, v in sorted(e.coeffs.items())]
                prob.add_equality(e.const, block_entries=entries, free_entries=free_entries)
        for expr, rhs in self.linear_eqs:
            prob.add_equality(rhs - expr.const,
                              free_entries=[(k, v) for k, v in sorted(expr.coeffs.items())])
        for expr, rhs in self.linear_ineqs:
            slack = prob.add_block(1)
            prob.add_equality(rhs - expr.const,
                              block_entries=[(slack, 0, 0, -1.0)],
                              free_entries=[(k, v) for k, v in sorted(expr.coeffs.items())])
        if self.objective is not None and self.objective.coeffs:
            prob.set_objective(free_entries=[(k, v) for k, v
                                             in sorted(self.objective.coeffs.items())])
        return prob

    # -- solving ---------------------------------------------------------------------

    def solve(self, opts: sdp_mod.SolverOptions | None = None,
              residual_tol: float = DEFAULT_RESIDUAL_TOL,
              eig_tol: float = DEFAULT_EIG_TOL) -> SosResult:
        prob = self.compile()
        if prob.n_eq == 0 and not prob.block_dims and not self.n_vars:
            return SosResult("optimal", np.zeros(0), 0.0)
        sol = sdp_mod.solve(prob, opts)
        if sol.status in ("optimal", "stalled") and sol.block_values:
            # Certificates are what matters: a near-optimal iterate whose Gram
            # matrices verify independently is a perfectly valid proof, even
            # when the interior-point run stops short of its own tolerances
            # (typical for feasibility problems with degenerate duals).
            assignment = sol.free_values[:self.n_vars] if self.n_vars else np.zeros(0)
            certs = []
            reports = []
            for ci, con in enumerate(self.sos_constraints):
                G = sol.block_values[ci]
                cert = Certificate(con.name, tuple(con.basis), 0.5 * (G + G.T), ci)
                target = con.poly.subs_decisions(assignment)
                report = check_certificate(cert, target, residual_tol, eig_tol)
                if report.residual > 0.1 * residual_tol:
                    refined = refine_certificate(cert, target)
                    refined_report = check_certificate(refined, target,
                                                       residual_tol, eig_tol)
                    if refined_report.residual <= report.residual:
                        cert, report = refined, refined_report
                certs.append(cert)
                reports.append(report)
            objective = (self.objective.evaluate(assignment)
                         if self.objective is not None else 0.0)
            if not all(r.passed for r in reports):
                return SosResult("stalled", assignment, objective, certs, reports,
                                 None, sol)
            return SosResult("optimal", assignment, objective, certs, reports, None, sol)
        if sol.status == "infeasible":
            return SosResult("infeasible", None, None, [], [],
                             sol.certificate, sol)
        if sol.status == "unbounded":
            return SosResult("unbounded", None, None, [], [], sol.certificate, sol)
        return SosResult("stalled", None, None, [], [], None, sol)
