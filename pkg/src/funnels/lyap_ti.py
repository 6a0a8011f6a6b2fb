"""Time-invariant controller design maximizing a certified region of attraction.

The bilinear program over (V, u, L, rho) is solved by coordinate alternation:
with V fixed, the conditions are linear in the controller and multipliers and
rho is maximized by bisection; with the multipliers fixed, rho enters linearly
and is maximized directly while searching V.  Dropping the sign constraint on
the multiplier L turns the region-of-attraction certificate into an
invariant-set certificate (conditions checked only on the boundary V = rho).

Input saturation is handled either by a piecewise analysis of Vdot (one SOS
condition per saturation cell, with extra multipliers and a three-step
alternation, since multiplier-times-controller products are bilinear) or
conservatively by certifying that the commanded input never leaves its bounds
inside the certified set.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import sos as sos_mod
from .poly import Monomial, Polynomial, Variable
from .sdp import SolverOptions
from .sos import AffinePoly, LinExpr, SosProgram


class SynthesisError(RuntimeError):
    pass


class InfeasibleError(SynthesisError):
    pass


@dataclass
class TiOptions:
    deg_V: int = 2
    deg_u: int = 3
    deg_L: int | None = None      # default balances the main condition's degree
    deg_Mu: int = 2
    epsilon: float = 1e-2         # relative rho improvement to declare convergence
    max_iters: int = 50
    bisect_tol: float = 1e-3      # relative window width
    rho_min: float = 1e-6
    rho_cap: float = 100.0
    mode: str = "roa"             # roa | invariant
    search_controller: bool = True
    search_V: bool = True
    saturation_mode: str = "auto"  # auto | none | piecewise | conservative
    solver: SolverOptions = dc_field(default_factory=SolverOptions)

    def resolved_saturation(self, system) -> str:
        if self.saturation_mode != "auto":
            return self.saturation_mode
        return "piecewise" if system.has_input_bounds() else "none"


@dataclass
class CertEntry:
    """A certificate together with the numeric polynomial it certifies."""

    name: str
    certificate: sos_mod.Certificate
    target: Polynomial

    def verify(self, residual_tol=sos_mod.DEFAULT_RESIDUAL_TOL,
               eig_tol=sos_mod.DEFAULT_EIG_TOL) -> sos_mod.CertReport:
        return sos_mod.check_certificate(self.certificate, self.target,
                                         residual_tol, eig_tol)


@dataclass
class RoaResult:
    V: Polynomial
    u: list[Polynomial]
    rho: float
    certificates: list[CertEntry]
    history: list[float]
    mode: str
    warning: str | None = None
    normalization_fallback: bool = False

    def verify_all(self) -> bool:
        return all(e.verify().passed for e in self.certificates)


def _collect_certs(prog: SosProgram, result: sos_mod.SosResult,
                   skip: set[str] | None = None) -> list[CertEntry]:
    out = []
    for cert in result.certificates:
        con = prog.sos_constraints[cert.constraint_index]
        if skip and con.name in skip:
            continue
        out.append(CertEntry(con.name, cert,
                             con.poly.subs_decisions(result.assignment)))
    return out


def _require_polynomial(system):
    if not system.is_polynomial():
        raise ValueError("time-invariant design needs polynomial dynamics; "
                         "polynomialize the system first")
    f0 = np.array([fi.constant_term() for fi in system.f])
    if np.linalg.norm(f0) > 1e-8:
        raise ValueError(f"dynamics do not vanish at the origin (|f(0)| = "
                         f"{np.linalg.norm(f0):.2e}); shift the equilibrium first")


def _closed_loop_vdot(system, V, u_polys):
    """Vdot = grad(V) . (f + g u) for V or u decision-affine (at most one)."""
    xs = system.state_vars
    vdot = None
    for i, xi in enumerate(xs):
        dV = V.differentiate(xi) if isinstance(V, AffinePoly) else \
            AffinePoly.from_poly(V.differentiate(xi))
        field_i = AffinePoly.from_poly(system.f[i])
        for k in range(system.m):
            gik = system.g[i][k]
            uk = u_polys[k]
            if isinstance(uk, AffinePoly):
                field_i = field_i + uk * gik
            else:
                field_i = field_i + AffinePoly.from_poly(gik * uk)
        if dV.is_numeric():
            term = field_i * dV.to_poly_numeric()
        elif field_i.is_numeric():
            term = dV * field_i.to_poly_numeric()
        else:
            raise ValueError("both V and the closed loop are decision quantities")
        vdot = term if vdot is None else vdot + term
    return vdot


def _branch_vdot(system, V, pinned):
    """Vdot with inputs pinned to numeric deviations (saturated branches)."""
    consts = [Polynomial.constant(float(c)) for c in pinned]
    return _closed_loop_vdot(system, V, consts)


def _sat_deviation_bounds(system) -> tuple[np.ndarray, np.ndarray]:
    """Input bounds expressed as deviations from the folded-in nominal input."""
    if not system.has_input_bounds():
        raise ValueError("system declares no input bounds")
    off = system.origin_u if system.origin_u is not None else np.zeros(system.m)
    lo = system.u_min - off
    hi = system.u_max - off
    if np.any(lo >= 0) or np.any(hi <= 0):
        raise ValueError("nominal input must lie strictly inside the bounds")
    return lo, hi


def _even_up(d: int) -> int:
    return d if d % 2 == 0 else d + 1


def _default_deg_L(system, deg_V: int, deg_u: int, extra_degs=()) -> int:
    deg_g = max((gij.degree() for row in system.g for gij in row), default=0)
    deg_f = max(fi.degree() for fi in system.f)
    deg_vdot = (deg_V - 1) + max(deg_f, deg_g + deg_u)
    target = max((deg_vdot, *extra_degs))
    return max(_even_up(target - deg_V), 0)


def _all_ones_point(xs) -> dict:
    return {v: 1.0 for v in xs}


def normalize_candidate(V: Polynomial, xs) -> tuple[Polynomial, bool]:
    """Scale V so V(1,..,1) = 1, or normalize trace of the quadratic part when
    the all-ones value degenerates (fallback recorded)."""
    val = V.evaluate(_all_ones_point(xs))
    scale_ref = max(V.max_abs_coeff(), 1e-30)
    if val > 1e-8 * scale_ref:
        return V * (1.0 / val), False
    P, _, _ = V.quadratic_form(xs) if V.degree() <= 2 else (None, None, None)
    tr = float(np.trace(P)) if P is not None else 0.0
    if tr <= 0:
        raise ValueError("cannot normalize V: both V(1,..,1) and the quadratic "
                         "trace are degenerate")
    return V * (1.0 / tr), True


# -- saturation cells -----------------------------------------------------------

def saturation_cells(m: int) -> list[tuple[str, ...]]:
    """All 3^m input saturation cells, each component lo|mid|hi."""
    return list(itertools.product(("lo", "mid", "hi"), repeat=m))


def _build_cell_condition(system, V, u_polys, rho, L, Ms, cell, lo, hi,
                          deg_slack=None):
    """-Vdot_cell + L (V - rho) + sum multiplier * branch terms.

    cell pins saturated inputs at their bounds; multipliers Ms is a list
    matching _cell_multiplier_count(cell).
    """
    pinned = []
    for k, tag in enumerate(cell):
        if tag == "lo":
            pinned.append(lo[k])
        elif tag == "hi":
            pinned.append(hi[k])
        else:
            pinned.append(None)
    if all(p is None for p in pinned):
        vdot = _closed_loop_vdot(system, V, u_polys)
    else:
        # saturated components frozen numeric; mid components keep u_k
        effective = []
        for k, p in enumerate(pinned):
            effective.append(u_polys[k] if p is None else Polynomial.constant(p))
        if any(isinstance(e, AffinePoly) for e in effective) and isinstance(V, AffinePoly):
            raise ValueError("bilinear V-u combination in cell condition")
        vdot = _closed_loop_vdot(system, V, effective)
    cond = -vdot + _mul_marker(L, _vr(V, rho))
    mi = 0
    for k, tag in enumerate(cell):
        uk = u_polys[k]
        if tag == "hi":
            # active branch u_k >= hi_k: add M * (hi_k - u_k) <= 0 there
            cond = cond + _mul_marker(Ms[mi], _minus_u(uk, hi[k]))
            mi += 1
        elif tag == "lo":
            cond = cond + _mul_marker(Ms[mi], _u_minus(uk, lo[k]))
            mi += 1
        else:
            cond = cond + _mul_marker(Ms[mi], _u_minus(uk, hi[k]))
            mi += 1
            cond = cond + _mul_marker(Ms[mi], _minus_u(uk, lo[k]))
            mi += 1
    return cond


def _cell_multiplier_count(cell) -> int:
    return sum(2 if tag == "mid" else 1 for tag in cell)


def _vr(V, rho):
    """V - rho as an affine polynomial (either side may be decision)."""
    V_a = V if isinstance(V, AffinePoly) else AffinePoly.from_poly(V)
    if isinstance(rho, LinExpr):
        return V_a - AffinePoly({Monomial(): rho})
    return V_a - float(rho)


def _minus_u(uk, bound):
    u_a = uk if isinstance(uk, AffinePoly) else AffinePoly.from_poly(uk)
    return AffinePoly.from_poly(Polynomial.constant(float(bound))) - u_a


def _u_minus(uk, bound):
    u_a = uk if isinstance(uk, AffinePoly) else AffinePoly.from_poly(uk)
    return u_a - float(bound)


def _mul_marker(a, b):
    """Product where exactly one factor may be decision-affine."""
    a_aff = a if isinstance(a, AffinePoly) else AffinePoly.from_poly(
        a if isinstance(a, Polynomial) else Polynomial.constant(float(a)))
    b_aff = b if isinstance(b, AffinePoly) else AffinePoly.from_poly(
        b if isinstance(b, Polynomial) else Polynomial.constant(float(b)))
    if a_aff.is_numeric():
        return b_aff * a_aff.to_poly_numeric()
    return a_aff * b_aff.to_poly_numeric()


def _conservative_bound_constraints(prog, V, rho, u_polys, lo, hi, deg_mu, name):
    """(hi_k - u_k) + mu(V - rho) SOS and (u_k - lo_k) + mu'(V - rho) SOS."""
    xs_all = set()
    for uk in u_polys:
        xs_all.update(uk.variables() if isinstance(uk, Polynomial) else uk.variables())
    vr = _vr(V, rho)
    mus = []
    for k, uk in enumerate(u_polys):
        mu_hi = prog.new_decision_poly(sorted(xs_all, key=lambda v: v.name),
                                       deg_mu, name=f"{name}_muhi{k}")
        mu_lo = prog.new_decision_poly(sorted(xs_all, key=lambda v: v.name),
                                       deg_mu, name=f"{name}_mulo{k}")
        prog.add_sos(mu_hi, name=f"{name}_muhi{k}")
        prog.add_sos(mu_lo, name=f"{name}_mulo{k}")
        if vr.is_numeric():
            hi_cond = _minus_u(uk, hi[k]) + mu_hi * vr.to_poly_numeric()
            lo_cond = _u_minus(uk, lo[k]) + mu_lo * vr.to_poly_numeric()
        else:
            hi_cond = _minus_u(uk, hi[k]) + _mul_marker(mu_hi, vr)
            lo_cond = _u_minus(uk, lo[k]) + _mul_marker(mu_lo, vr)
        prog.add_sos(hi_cond, name=f"{name}_sathi{k}")
        prog.add_sos(lo_cond, name=f"{name}_satlo{k}")
        mus.append((mu_hi, mu_lo))
    return mus


def _conservative_bound_constraints_fixed_mu(prog, V, rho, u_polys, mus_numeric,
                                             lo, hi, name):
    """As above with the mu multipliers frozen numeric (used in the V step)."""
    for k, uk in enumerate(u_polys):
        mu_hi, mu_lo = mus_numeric[k]
        vr = _vr(V, rho)
        hi_cond = _minus_u(uk, hi[k]) + _mul_marker(mu_hi, vr)
        lo_cond = _u_minus(uk, lo[k]) + _mul_marker(mu_lo, vr)
        prog.add_sos(hi_cond, name=f"{name}_sathi{k}")
        prog.add_sos(lo_cond, name=f"{name}_satlo{k}")


# -- alternation steps ------------------------------------------------------------

def _probe_multiplier_step(system, V, u_fixed, rho_val, opts: TiOptions,
                           search_u: bool, sat_mode: str):
    """One feasibility solve at fixed V and rho.

    Searches multipliers (L per cell, saturation M's) and, when the structure
    stays linear (no piecewise M*u products), also the controller.
    Returns None when infeasible, else a dict with numeric values + certs.
    """
    xs = system.state_vars
    prog = SosProgram()
    m = system.m
    deg_L = opts.deg_L if opts.deg_L is not None else \
        _default_deg_L(system, opts.deg_V, opts.deg_u if (search_u or u_fixed is None)
                       else max((u.degree() for u in u_fixed), default=1),
                       extra_degs=_sat_extra_degs(system, opts, sat_mode, u_fixed, search_u))
    if search_u and sat_mode != "piecewise":
        u_polys = [prog.new_decision_poly(xs, opts.deg_u, min_degree=1, name=f"u{k}")
                   for k in range(m)]
    else:
        u_polys = list(u_fixed)

    mdeg = 2 if opts.mode == "roa" else 0  # multipliers vanish at 0 in roa mode
    if sat_mode == "piecewise":
        lo, hi = _sat_deviation_bounds(system)
        cells = saturation_cells(m)
        Ls, Mss = [], []
        for ci, cell in enumerate(cells):
            L = prog.new_decision_poly(xs, deg_L, min_degree=mdeg, name=f"L{ci}")
            if opts.mode == "roa":
                prog.add_sos(L, name=f"L{ci}")
            Ms = [prog.new_decision_poly(
                xs, opts.deg_Mu,
                min_degree=mdeg if all(t == "mid" for t in cell) else 0,
                name=f"M{ci}_{j}")
                for j in range(_cell_multiplier_count(cell))]
            for j, M in enumerate(Ms):
                prog.add_sos(M, name=f"M{ci}_{j}")
            cond = _build_cell_condition(system, V, u_polys, rho_val, L, Ms,
                                         cell, lo, hi)
            prog.add_sos(cond, name=f"cond{ci}")
            Ls.append(L)
            Mss.append(Ms)
        res = prog.solve(opts.solver)
        if not res.feasible:
            return None
        return {
            "L": [L.subs_decisions(res.assignment) for L in Ls],
            "M": [[M.subs_decisions(res.assignment) for M in Ms] for Ms in Mss],
            "u": [uk if isinstance(uk, Polynomial) else uk.subs_decisions(res.assignment)
                  for uk in u_polys],
            "mu": None,
            "certs": _collect_certs(prog, res),
        }

    L = prog.new_decision_poly(xs, deg_L, min_degree=mdeg, name="L")
    if opts.mode == "roa":
        prog.add_sos(L, name="L")
    # main condition: -Vdot + L (V - rho), with V and rho numeric here
    vdot = _closed_loop_vdot(system, V, u_polys)
    cond = -vdot + _mul_marker(L, _vr(V, rho_val))
    prog.add_sos(cond, name="cond")
    mus = None
    if sat_mode == "conservative":
        lo, hi = _sat_deviation_bounds(system)
        mus = _conservative_bound_constraints(prog, V, rho_val, u_polys, lo, hi,
                                              opts.deg_Mu, "c")
    res = prog.solve(opts.solver)
    if not res.feasible:
        return None
    return {
        "L": [L.subs_decisions(res.assignment)],
        "M": None,
        "u": [uk if isinstance(uk, Polynomial) else uk.subs_decisions(res.assignment)
              for uk in u_polys],
        "mu": None if mus is None else [
            (mh.subs_decisions(res.assignment), ml.subs_decisions(res.assignment))
            for mh, ml in mus],
        "certs": _collect_certs(prog, res),
    }


def _sat_extra_degs(system, opts, sat_mode, u_fixed, search_u):
    if sat_mode != "piecewise":
        return ()
    deg_u = opts.deg_u if (search_u or u_fixed is None) else \
        max((u.degree() for u in u_fixed if u is not None), default=1)
    return (opts.deg_Mu + deg_u,)


def _bisect_rho(system, V, u_fixed, window, opts: TiOptions, search_u: bool,
                sat_mode: str):
    """Largest certified-feasible rho in the window; paper-style binary search."""
    lo_w, hi_w = window
    if lo_w <= 0 or hi_w <= lo_w:
        raise ValueError("rho window must satisfy 0 < lo < hi")
    best = _probe_multiplier_step(system, V, u_fixed, hi_w, opts, search_u, sat_mode)
    if best is not None:
        return hi_w, best
    best = _probe_multiplier_step(system, V, u_fixed, lo_w, opts, search_u, sat_mode)
    if best is None:
        raise InfeasibleError(
            f"conditions infeasible at the window lower bound rho = {lo_w:g}; "
            "try a different V_init or a smaller window")
    lo, hi = lo_w, hi_w
    rho_best = lo
    while (hi - lo) > opts.bisect_tol * hi:
        mid = 0.5 * (lo + hi)
        sol = _probe_multiplier_step(system, V, u_fixed, mid, opts, search_u, sat_mode)
        if sol is not None:
            lo, rho_best, best = mid, mid, sol
        else:
            hi = mid
    return rho_best, best


def step_Lu(system, V: Polynomial, rho_window, deg_u: int, deg_L: int | None = None,
            opts: TiOptions | None = None, controller=None):
    """Fix V; search multipliers (and the controller) with a binary search on
    rho.  Returns (L, u, rho)."""
    opts = opts or TiOptions()
    opts = _with(opts, deg_u=deg_u, deg_L=deg_L)
    sat_mode = opts.resolved_saturation(system)
    search_u = controller is None and opts.search_controller
    u_fixed = controller if controller is not None else \
        ([None] * system.m if search_u and sat_mode != "piecewise"
         else _init_controller(system, opts))
    rho, sol = _bisect_rho(system, V, u_fixed, rho_window, opts, search_u, sat_mode)
    return sol["L"], sol["u"], rho, sol


def _step_controller(system, V, L_list, M_list, mu_list, rho_seed, opts: TiOptions,
                     sat_mode: str):
    """Piecewise-mode step: multipliers and V fixed; search (u, rho), max rho."""
    xs = system.state_vars
    prog = SosProgram()
    rho = prog.new_var("rho")
    u_polys = [prog.new_decision_poly(xs, opts.deg_u, min_degree=1, name=f"u{k}")
               for k in range(system.m)]
    lo, hi = _sat_deviation_bounds(system)
    cells = saturation_cells(system.m)
    for ci, cell in enumerate(cells):
        cond = _build_cell_condition(system, V, u_polys, rho, L_list[ci],
                                     M_list[ci], cell, lo, hi)
        prog.add_sos(cond, name=f"cond{ci}")
    prog.add_linear_ineq_ge(rho, opts.rho_min)
    prog.add_linear_ineq_ge(-1.0 * rho, -opts.rho_cap)
    prog.set_objective_max(rho)
    res = prog.solve(opts.solver)
    if not res.feasible:
        return None
    return {
        "u": [uk.subs_decisions(res.assignment) for uk in u_polys],
        "rho": float(res.objective),
        "certs": _collect_certs(prog, res),
    }


def step_V(system, L, u, V_degree: int = 2, opts: TiOptions | None = None,
           M_list=None, mu_list=None, rho_seed: float | None = None,
           norm_fallback: bool = False):
    """Fix the multipliers and controller; search V and maximize rho directly.

    Returns (V, rho) plus the solve record.  L may be a single multiplier or a
    per-cell list in piecewise mode.
    """
    opts = opts or TiOptions()
    xs = system.state_vars
    sat_mode = opts.resolved_saturation(system)
    prog = SosProgram()
    rho = prog.new_var("rho")
    V = prog.new_decision_poly(xs, V_degree, min_degree=2, name="V")
    prog.add_sos(V, name="V")
    if norm_fallback:
        tr = LinExpr()
        for v in xs:
            tr = tr + V.terms.get(Monomial({v: 2}), LinExpr())
        prog.add_linear_eq(tr, 1.0)
    else:
        prog.add_linear_eq(V.eval_at_point(_all_ones_point(xs)), 1.0)

    u_list = list(u)
    mdeg = 2 if opts.mode == "roa" else 0
    if sat_mode == "piecewise":
        lo, hi = _sat_deviation_bounds(system)
        cells = saturation_cells(system.m)
        Ms_new = []
        for ci, cell in enumerate(cells):
            Ms = [prog.new_decision_poly(
                xs, opts.deg_Mu,
                min_degree=mdeg if all(t == "mid" for t in cell) else 0,
                name=f"M{ci}_{j}")
                  for j in range(_cell_multiplier_count(cell))]
            for j, M in enumerate(Ms):
                prog.add_sos(M, name=f"M{ci}_{j}")
            cond = _build_cell_condition(system, V, u_list, rho, L[ci], Ms,
                                         cell, lo, hi)
            prog.add_sos(cond, name=f"cond{ci}")
            Ms_new.append(Ms)
    else:
        L_single = L[0] if isinstance(L, list) else L
        vdot = _closed_loop_vdot(system, V, u_list)
        cond = -vdot + _mul_marker(L_single, _vr(V, rho))
        prog.add_sos(cond, name="cond")
        if sat_mode == "conservative":
            lo, hi = _sat_deviation_bounds(system)
            _conservative_bound_constraints_fixed_mu(prog, V, rho, u_list,
                                                     mu_list, lo, hi, "c")
    prog.add_linear_ineq_ge(rho, opts.rho_min)
    prog.add_linear_ineq_ge(-1.0 * rho, -opts.rho_cap)
    prog.set_objective_max(rho)
    res = prog.solve(opts.solver)
    if not res.feasible:
        raise InfeasibleError("V-step infeasible; this should not happen when "
                              "seeded from a feasible multiplier step")
    V_num = V.subs_decisions(res.assignment)
    rho_num = float(res.objective)
    return V_num, rho_num, {"certs": _collect_certs(prog, res), "res": res}


def _init_controller(system, opts: TiOptions) -> list[Polynomial]:
    """Linear LQR seed controller (zero when m = 0)."""
    from .lqr import care_gain, linearize
    if system.m == 0:
        return []
    A, B = linearize(system, np.zeros(system.n), np.zeros(system.m))
    try:
        _, K = care_gain(A, B, np.eye(system.n), np.eye(system.m))
    except ValueError as e:
        raise SynthesisError(f"no LQR seed controller at the origin: {e}") from None
    out = []
    for k in range(system.m):
        p = Polynomial.zero()
        for j, v in enumerate(system.state_vars):
            p = p + Polynomial({Monomial({v: 1}): -float(K[k, j])})
        out.append(p)
    return out


def _with(opts: TiOptions, **kw) -> TiOptions:
    from dataclasses import replace
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(opts, **kw)


def design_ti(system, V_init: Polynomial, deg_u: int | None = None,
              deg_L: int | None = None, opts: TiOptions | None = None,
              controller=None) -> RoaResult:
    """Alternation maximizing the certified region of attraction B_rho.

    With search_controller/search_V disabled in the options this degrades to
    verification of a fixed controller and/or fixed V (rho by bisection only).
    """
    opts = _with(opts or TiOptions(), deg_u=deg_u, deg_L=deg_L)
    _require_polynomial(system)
    sat_mode = opts.resolved_saturation(system)
    if sat_mode == "piecewise" and system.m > 3:
        raise ValueError("piecewise saturation enumerates 3^m cells; use "
                         "conservative mode for m > 3")
    xs = system.state_vars
    V, norm_fallback = normalize_candidate(V_init, xs)

    u_cur = list(controller) if controller is not None else None
    if u_cur is None and (sat_mode == "piecewise" or not opts.search_controller):
        u_cur = _init_controller(system, opts)
    search_u = opts.search_controller and controller is None

    history: list[float] = []
    warning = None
    best = None  # (V, u, rho, certs)
    rho_prev = 0.0
    window = (opts.rho_min, opts.rho_cap)

    for it in range(opts.max_iters):
        # Step 1: multipliers (and controller when linear), bisection on rho.
        try:
            rho1, solA = _bisect_rho(system, V, u_cur if u_cur is not None
                                     else [None] * system.m,
                                     window, opts, search_u, sat_mode)
        except InfeasibleError:
            if best is None:
                raise
            warning = "multiplier step became infeasible; keeping last verified iterate"
            break
        u_cur = solA["u"]
        iter_certs = list(solA["certs"])
        rho_new = rho1

        # Step 2 (piecewise only): controller + rho with multipliers fixed.
        if sat_mode == "piecewise" and search_u:
            solB = _step_controller(system, V, solA["L"], solA["M"], None,
                                    rho1, opts, sat_mode)
            if solB is not None and solB["rho"] >= rho_new:
                u_cur = solB["u"]
                rho_new = solB["rho"]

        # Step 3: V and rho (multipliers, controller fixed).
        if opts.search_V:
            try:
                V_new, rho3, solC = step_V(system, solA["L"], u_cur, opts.deg_V,
                                           opts, M_list=solA["M"], mu_list=solA["mu"],
                                           norm_fallback=norm_fallback)
            except InfeasibleError:
                warning = "V step infeasible; keeping last verified iterate"
                V_new, rho3, solC = V, rho_new, None
            if rho3 >= rho_new:
                V, rho_new = V_new, rho3
                if solC is not None:
                    # Certificates for cond/V/M come from the V step; keep the
                    # multiplier SOS proofs (L in roa mode) from step 1.
                    keep = [e for e in iter_certs
                            if e.name.startswith("L") or e.name.startswith("c_mu")]
                    iter_certs = solC["certs"] + keep
        if rho_new < rho_prev * (1 - 1e-9):
            warning = "rho decreased numerically; stopping at last verified iterate"
            break
        history.append(rho_new)
        best = (V, [p for p in u_cur], rho_new, iter_certs)
        if rho_prev > 0 and (rho_new - rho_prev) / rho_prev < opts.epsilon:
            break
        rho_prev = rho_new
        if not opts.search_V and not search_u:
            break  # pure verification: single pass

    if best is None:
        raise SynthesisError("no verified iterate produced")
    V_fin, u_fin, rho_fin, certs = best
    result = RoaResult(V_fin, u_fin, rho_fin, certs, history,
                       opts.mode, warning, norm_fallback)
    bad = [e.name for e in certs if not e.verify().passed]
    if bad:
        result.warning = (result.warning or "") + f" unverified certificates: {bad}"
    return result


def design_ti_invariant(system, V_init: Polynomial, deg_u: int | None = None,
                        deg_L: int | None = None, opts: TiOptions | None = None,
                        controller=None) -> RoaResult:
    """Same pipeline with the multiplier sign constraint dropped, certifying an
    invariant set (Vdot < 0 only on the boundary V = rho)."""
    opts = _with(opts or TiOptions(), deg_u=deg_u, deg_L=deg_L)
    opts = _with(opts, mode="invariant")
    return design_ti(system, V_init, opts=opts, controller=controller)
