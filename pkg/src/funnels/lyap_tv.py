"""Time-varying controller and funnel synthesis along a nominal trajectory.

The funnel is a time-indexed family of sublevel sets B(t) = {xbar :
V(xbar,t) <= rho(t)} in trajectory-deviation coordinates, certified by
per-knot SOS conditions

    -Vdot_i + rhodot_i + L_i (V_i - rho_i)  is SOS,

with rho piecewise linear (rhodot_i a forward difference) and dV/dt
approximated by the forward difference of the knot Lyapunov functions.  The
sum of rho over the knots is maximized by a three-step coordinate alternation:
(1) multipliers at fixed V, rho, u (per-knot feasibility problems); (2)
controllers and rho jointly; (3) V and rho jointly.  Each step keeps the
previous iterate feasible, so the objective history is non-decreasing.

Input saturation is handled by a piecewise analysis of Vdot over all 3^m
saturation cells (extra SOS multipliers; the controller then cannot be
searched together with those multipliers, which is what forces the three-step
structure), or conservatively by certifying the commanded input stays inside
its bounds everywhere in the funnel.  Bounded disturbances entering
polynomially and polytopic obstacle avoidance add further multiplier terms.

The terminal knot is frozen to the goal set: V_N = xbar' S_f xbar and
rho(t_N) = rho_f.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import sos as sos_mod
from .lqr import linearize_trajectory, solve_riccati_ode
from .lyap_ti import CertEntry, InfeasibleError, SynthesisError, saturation_cells, \
    _cell_multiplier_count
from .models import ControlAffineSystem, KnotDynamics, NominalTrajectory, \
    polynomialize_trajectory
from .poly import Monomial, ONE, Polynomial, Variable, variables
from .sdp import SolverOptions
from .sos import AffinePoly, LinExpr, SosProgram


@dataclass
class SaturationSpec:
    """Per-input bounds and the analysis mode used to respect them."""

    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    mode: str = "none"  # none | piecewise | conservative

    def active(self) -> bool:
        return self.mode != "none"

    def validate(self, traj: NominalTrajectory):
        if not self.active():
            return
        if self.u_min is None or self.u_max is None:
            raise ValueError("saturation mode set but bounds missing")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("need u_min < u_max componentwise")
        for i in range(len(traj.times)):
            if np.any(traj.inputs[i] <= self.u_min) or np.any(traj.inputs[i] >= self.u_max):
                raise ValueError(
                    f"nominal input at knot {i} is not strictly inside the bounds")

    @staticmethod
    def from_system(system: ControlAffineSystem, mode: str) -> "SaturationSpec":
        return SaturationSpec(system.u_min, system.u_max, mode)


@dataclass
class DisturbanceSpec:
    """Box-bounded disturbance w entering the dynamics polynomially.

    entry is an n-tuple of polynomials over (absolute state vars, w vars)
    added to the drift: xdot = f(x) + g(x)u + entry(x, w).
    """

    w_vars: tuple[Variable, ...]
    lo: np.ndarray
    hi: np.ndarray
    entry: tuple
    deg_Q: int = 2

    def validate(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if len(self.w_vars) != len(self.lo) or len(self.lo) != len(self.hi):
            raise ValueError("disturbance bounds must match w dimension")
        if np.any(self.lo > self.hi):
            raise ValueError("disturbance box is empty")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("disturbance box must be bounded")


@dataclass
class Obstacle:
    """Polytope {x : A x + c >= 0 rowwise} (absolute coordinates) to avoid."""

    A: np.ndarray
    c: np.ndarray
    deg_T: int = 2

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(self.A @ x + self.c >= 0))


@dataclass
class TvOptions:
    deg_V: int = 2
    deg_u: int = 1
    deg_L: int = 2
    deg_Mu: int = 2
    epsilon: float = 1e-2
    max_iters: int = 50
    rho_floor: float = 1e-8
    rho_cap: float = 100.0
    shrink: float = 0.5
    max_shrinks: int = 10
    feas_warn: float = 1e-3
    taylor_degree: int = 3
    search_controller: bool = True
    # extra certified contraction rate on the boundary (1/s): conditions use
    # rhodot - boundary_decay*rho, buying margin against inter-knot drift
    boundary_decay: float = 0.0
    obstacles: list[Obstacle] = dc_field(default_factory=list)
    solver: SolverOptions = dc_field(default_factory=SolverOptions)


@dataclass
class Funnel:
    times: np.ndarray
    V: list[Polynomial]          # per knot, in deviation coordinates
    rho: np.ndarray
    controllers: list[list[Polynomial]]   # per knot, deviation feedback
    S_f: np.ndarray
    rho_f: float
    traj: NominalTrajectory
    sat: SaturationSpec
    certificates: list[CertEntry]
    history: list[float]
    norm_values: np.ndarray
    warning: str | None = None

    @property
    def N(self) -> int:
        return len(self.times)

    @property
    def n(self) -> int:
        return self.traj.n

    def state_vars(self) -> tuple[Variable, ...]:
        from .models import state_vars
        return state_vars(self.n)

    def sum_rho(self) -> float:
        return float(np.sum(self.rho))

    def rho_at(self, t: float) -> float:
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"time {t} outside funnel range [{ts[0]}, {ts[-1]}]")
        t = float(np.clip(t, ts[0], ts[-1]))
        k = min(int(np.searchsorted(ts, t, side="right") - 1), len(ts) - 2)
        k = max(k, 0)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return float((1 - w) * self.rho[k] + w * self.rho[k + 1])

    def V_at(self, t: float) -> Polynomial:
        """Linear interpolation of the V coefficients between knots."""
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"time {t} outside funnel range [{ts[0]}, {ts[-1]}]")
        t = float(np.clip(t, ts[0], ts[-1]))
        k = min(int(np.searchsorted(ts, t, side="right") - 1), len(ts) - 2)
        k = max(k, 0)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return self.V[k] * (1 - w) + self.V[k + 1] * w

    def controller_at(self, t: float) -> list[Polynomial]:
        """First-order hold on the controller coefficients."""
        ts = self.times
        t = float(np.clip(t, ts[0], ts[-1]))
        k = min(int(np.searchsorted(ts, t, side="right") - 1), len(ts) - 2)
        k = max(k, 0)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return [a * (1 - w) + b * w
                for a, b in zip(self.controllers[k], self.controllers[k + 1])]

    def command(self, t: float, x_abs: np.ndarray) -> np.ndarray:
        """Saturated total input at absolute state x and time t."""
        xbar = np.asarray(x_abs, dtype=float) - self.traj.x0(t)
        point = dict(zip(self.state_vars(), xbar))
        du = np.array([p.evaluate(point) for p in self.controller_at(t)])
        u = self.traj.u0(t) + du
        if self.sat.u_min is not None:
            u = np.clip(u, self.sat.u_min, self.sat.u_max)
        return u

    def membership(self, t: float, x_abs: np.ndarray):
        return funnel_membership(self, t, x_abs)

    def verify_all(self) -> bool:
        return all(e.verify().passed for e in self.certificates)


def funnel_membership(funnel: Funnel, t: float, x_abs) -> dict:
    """Evaluate V(xbar, t) and rho(t); inside iff V <= rho (closed set)."""
    ts = funnel.times
    if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
        raise ValueError(f"time {t} outside funnel range [{ts[0]}, {ts[-1]}]")
    xbar = np.asarray(x_abs, dtype=float) - funnel.traj.x0(t)
    point = dict(zip(funnel.state_vars(), xbar))
    V = funnel.V_at(t).evaluate(point)
    rho = funnel.rho_at(t)
    return {"inside": bool(V <= rho), "V": float(V), "rho": float(rho)}


# -- error dynamics -----------------------------------------------------------------

def error_dynamics(system: ControlAffineSystem, traj: NominalTrajectory, index: int,
                   degree: int = 3, feas_warn: float = 1e-3):
    """Deviation-coordinate dynamics at knot `index`.

    Returns (a, G, r): drift polynomials a(xbar) with a(0) = r the dynamic
    residual f(x0)+g(x0)u0 - xdot0, input map G(xbar), and r itself.
    """
    knots = polynomialize_trajectory(system, traj, degree)
    return _knot_error_dynamics(knots[index], traj, index, feas_warn)


def _knot_error_dynamics(kd: KnotDynamics, traj: NominalTrajectory, index: int,
                         feas_warn: float):
    slope = traj.effective_slopes()[index]
    a = tuple(kd.drift[r] - float(slope[r]) for r in range(len(kd.drift)))
    r = np.array([ai.constant_term() for ai in a])
    warn = None
    if np.linalg.norm(r) > feas_warn:
        warn = (f"knot {index}: dynamic residual |r| = {np.linalg.norm(r):.3e} "
                f"exceeds {feas_warn:g}")
    return a, kd.input_map, r, warn


# -- initialization -----------------------------------------------------------------

@dataclass
class TvInit:
    V_series: list[Polynomial]
    rho_series: np.ndarray
    norm_values: np.ndarray
    gains: np.ndarray              # TVLQR gains K(t_i), shape (N, m, n)
    S: np.ndarray                  # Riccati matrices per knot


def init_from_tvlqr(system: ControlAffineSystem, traj: NominalTrajectory, Q, R,
                    S_f, rho_f: float, c_init: float = 0.1) -> TvInit:
    """Riccati-ODE initialization: V_guess_i = xbar' S(t_i) xbar, rho constant
    c_init * rho_f before the final knot, and normalization values recorded."""
    if rho_f <= 0:
        raise ValueError("rho_f must be positive")
    lin = linearize_trajectory(system, traj)
    rs = solve_riccati_ode(lin, Q, R, S_f)
    xs = _state_vars_of(system)
    V_series = []
    for i, S in enumerate(rs.S):
        if np.linalg.eigvalsh(0.5 * (S + S.T))[0] < -1e-10:
            raise ValueError(f"Riccati matrix at knot {i} is not PSD")
        V_series.append(Polynomial.from_quadratic_form(S, xs))
    N = len(traj.times)
    rho_series = np.full(N, c_init * rho_f)
    rho_series[-1] = rho_f
    ones = {v: 1.0 for v in xs}
    norm_values = np.array([V.evaluate(ones) for V in V_series])
    return TvInit(V_series, rho_series, norm_values, rs.K, rs.S)


def _state_vars_of(system) -> tuple[Variable, ...]:
    return system.state_vars


def sampled_lyapunov_init(system: ControlAffineSystem, traj: NominalTrajectory,
                          Q, R, S_f, rho_f: float, c_init: float = 0.1,
                          margin: float = 0.5, decay: float = 0.0) -> TvInit:
    """Initialization consistent with the sampled-time conditions.

    The continuous Riccati solution can vary so quickly along aggressive
    maneuvers that its forward differences violate the knot conditions at any
    rho.  This variant keeps the TVLQR gains but builds V from an
    implicit-Euler closed-loop Lyapunov recursion backward from S_f,

        (S_i - S_{i+1})/dt = margin*I + S_i Acl_i + Acl_i' S_i + decay*S_i,

    which satisfies the forward-difference decrease condition (including any
    requested boundary decay rate) with the given margin at every knot by
    construction.
    """
    import scipy.linalg

    if rho_f <= 0:
        raise ValueError("rho_f must be positive")
    lin = linearize_trajectory(system, traj)
    rs = solve_riccati_ode(lin, Q, R, S_f)
    n = system.n
    N = len(traj.times)
    S = [None] * N
    S[N - 1] = 0.5 * (np.atleast_2d(np.asarray(S_f, dtype=float))
                      + np.atleast_2d(np.asarray(S_f, dtype=float)).T)
    for i in range(N - 2, -1, -1):
        dt = float(traj.times[i + 1] - traj.times[i])
        Acl = lin.A[i] - lin.B[i] @ rs.K[i]
        Ash = Acl + (0.5 * decay - 1.0 / (2.0 * dt)) * np.eye(n)
        Si = scipy.linalg.solve_sylvester(Ash.T, Ash,
                                          -margin * np.eye(n) - S[i + 1] / dt)
        S[i] = 0.5 * (Si + Si.T)
        if np.linalg.eigvalsh(S[i])[0] <= 0:
            raise ValueError(f"sampled Lyapunov recursion lost definiteness at knot {i}")
    xs = _state_vars_of(system)
    V_series = [Polynomial.from_quadratic_form(Si, xs) for Si in S]
    rho_series = np.full(N, c_init * rho_f)
    rho_series[-1] = rho_f
    ones = {v: 1.0 for v in xs}
    norm_values = np.array([V.evaluate(ones) for V in V_series])
    return TvInit(V_series, rho_series, norm_values, rs.K, np.array(S))


def tvlqr_controllers(init: TvInit, system) -> list[list[Polynomial]]:
    """Linear deviation feedback ubar_i = -K_i xbar from the Riccati gains."""
    xs = _state_vars_of(system)
    out = []
    for K in init.gains:
        row = []
        for k in range(K.shape[0]):
            p = Polynomial.zero()
            for j, v in enumerate(xs):
                p = p + Polynomial({Monomial({v: 1}): -float(K[k, j])})
            row.append(p)
        out.append(row)
    return out


# -- condition assembly ---------------------------------------------------------------

class _KnotContext:
    """Everything needed to build the SOS conditions at one knot interval."""

    def __init__(self, i, a, G, dt, x0, u0, norm_value):
        self.i = i
        self.a = a            # drift polynomials (xbar), includes residual
        self.G = G            # input map polynomials
        self.dt = dt
        self.x0 = x0
        self.u0 = u0
        self.norm_value = norm_value


def _vdot(ctx: _KnotContext, xs, V_i, V_next, u_eff, dist_terms=None):
    """Vdot = grad(V_i) . (a + G u_eff [+ h_w]) + (V_next - V_i)/dt.

    At most one of {V_i, u_eff entries} may be decision-affine.
    """
    total = None
    for j, xj in enumerate(xs):
        dV = V_i.differentiate(xj) if isinstance(V_i, AffinePoly) else \
            AffinePoly.from_poly(V_i.differentiate(xj))
        field_j = AffinePoly.from_poly(ctx.a[j])
        for k, uk in enumerate(u_eff):
            gjk = ctx.G[j][k]
            if isinstance(uk, AffinePoly):
                field_j = field_j + uk * gjk
            else:
                field_j = field_j + AffinePoly.from_poly(gjk * uk)
        if dist_terms is not None:
            field_j = field_j + AffinePoly.from_poly(dist_terms[j])
        if dV.is_numeric():
            term = field_j * dV.to_poly_numeric()
        elif field_j.is_numeric():
            term = dV * field_j.to_poly_numeric()
        else:
            raise ValueError("V and the closed-loop field cannot both be decisions")
        total = term if total is None else total + term
    dVdt = (_as_aff(V_next) - _as_aff(V_i)) * (1.0 / ctx.dt)
    return total + dVdt


def _as_aff(p) -> AffinePoly:
    return p if isinstance(p, AffinePoly) else AffinePoly.from_poly(p)


def _rho_expr(rho_i, rho_next, dt):
    """(rhodot, V-rho offset) contributions as LinExpr-valued quantities."""
    r_i = rho_i if isinstance(rho_i, LinExpr) else LinExpr.constant(float(rho_i))
    r_n = rho_next if isinstance(rho_next, LinExpr) else LinExpr.constant(float(rho_next))
    rhodot = (r_n - r_i) * (1.0 / dt)
    return r_i, rhodot


def _aff_const(e: LinExpr) -> AffinePoly:
    return AffinePoly({ONE: e})


def _mul_fixed(mult, poly_aff):
    """multiplier (decision or numeric) times a polynomial quantity where at
    most one side carries decisions."""
    m_aff = _as_aff(mult) if not isinstance(mult, AffinePoly) else mult
    p_aff = _as_aff(poly_aff) if not isinstance(poly_aff, AffinePoly) else poly_aff
    if m_aff.is_numeric():
        return p_aff * m_aff.to_poly_numeric()
    return m_aff * p_aff.to_poly_numeric()


def _build_knot_conditions(prog: SosProgram, ctx: _KnotContext, xs,
                           V_i, V_next, rho_i, rho_next, u_list,
                           sat: SaturationSpec, opts: TvOptions,
                           search: str, fixed_mults=None,
                           dist: DisturbanceSpec | None = None,
                           dist_knot_entry=None):
    """Add all SOS conditions for the interval [t_i, t_{i+1}].

    `search` is one of "multipliers", "controller", "lyapunov" and governs
    which quantities are decision variables (prepared by the caller) and
    which multiplier blocks get created here vs taken from `fixed_mults`.
    Returns the dict of multiplier handles created (decision AffinePolys).
    """
    created = {"L": [], "M": [], "mu": [], "T": [], "Q": []}
    r_i, rhodot = _rho_expr(rho_i, rho_next, ctx.dt)
    if opts.boundary_decay:
        rhodot = rhodot - r_i * float(opts.boundary_decay)
    vr = _as_aff(V_i) - _aff_const(r_i)

    cond_vars = list(xs)
    dvars = ()
    if dist is not None:
        dvars = dist.w_vars
        cond_vars = list(xs) + list(dvars)

    def new_mult(deg, name, min_degree=0, sos=True, over=None):
        p = prog.new_decision_poly(over or cond_vars, deg, min_degree=min_degree,
                                   name=name)
        if sos:
            prog.add_sos(p, name=name)
        return p

    def box_terms(cond, tag):
        """Disturbance box multipliers; one SOS pair per bound."""
        if dist is None:
            return cond
        for k, wv in enumerate(dvars):
            lo_k, hi_k = float(dist.lo[k]), float(dist.hi[k])
            if lo_k == hi_k:
                continue  # degenerate direction was substituted away
            wpoly = Polynomial.from_var(wv)
            if search in ("multipliers", "lyapunov") or fixed_mults is None:
                q_lo = new_mult(dist.deg_Q, f"{tag}_Qlo{k}")
                q_hi = new_mult(dist.deg_Q, f"{tag}_Qhi{k}")
                created["Q"].append((q_lo, q_hi))
            else:
                q_lo, q_hi = fixed_mults["Q"][len(created["Q"])]
                created["Q"].append((q_lo, q_hi))
            cond = cond - _mul_fixed(q_lo, wpoly - lo_k) - _mul_fixed(q_hi, -wpoly + hi_k)
        return cond

    def obstacle_conditions(tag):
        for oi, obs in enumerate(opts.obstacles):
            if obs.contains(ctx.x0):
                raise InfeasibleError(
                    f"obstacle {oi} contains the nominal state at knot {ctx.i}")
            cond_o = _as_aff(V_i) - _aff_const(r_i)
            for j in range(obs.A.shape[0]):
                plane = Polynomial.constant(float(obs.A[j] @ ctx.x0 + obs.c[j]))
                for col, v in enumerate(xs):
                    plane = plane + Polynomial({Monomial({v: 1}): float(obs.A[j, col])})
                if search in ("multipliers", "lyapunov") or fixed_mults is None:
                    T = new_mult(obs.deg_T, f"{tag}_T{oi}_{j}", over=xs)
                    created["T"].append(T)
                else:
                    T = fixed_mults["T"][len(created["T"])]
                    created["T"].append(T)
                cond_o = cond_o - _mul_fixed(T, plane)
            prog.add_sos(cond_o, name=f"{tag}_obs{oi}")

    dist_entry = dist_knot_entry

    if not sat.active():
        if search == "multipliers" or fixed_mults is None:
            L = new_mult(opts.deg_L, f"k{ctx.i}_L", sos=False)
            created["L"].append(L)
        else:
            L = fixed_mults["L"][0]
            created["L"].append(L)
        vdot = _vdot(ctx, xs, V_i, V_next, u_list, dist_entry)
        cond = -vdot + _aff_const(rhodot) + _mul_fixed(L, vr)
        cond = box_terms(cond, f"k{ctx.i}")
        prog.add_sos(cond, name=f"k{ctx.i}_cond")
        obstacle_conditions(f"k{ctx.i}")
        return created

    lo_dev = sat.u_min - ctx.u0
    hi_dev = sat.u_max - ctx.u0
    m = len(u_list)

    if sat.mode == "conservative":
        if search == "multipliers" or fixed_mults is None:
            L = new_mult(opts.deg_L, f"k{ctx.i}_L", sos=False)
            created["L"].append(L)
        else:
            L = fixed_mults["L"][0]
            created["L"].append(L)
        vdot = _vdot(ctx, xs, V_i, V_next, u_list, dist_entry)
        cond = -vdot + _aff_const(rhodot) + _mul_fixed(L, vr)
        cond = box_terms(cond, f"k{ctx.i}")
        prog.add_sos(cond, name=f"k{ctx.i}_cond")
        for k in range(m):
            uk = _as_aff(u_list[k])
            hi_c = _as_aff(Polynomial.constant(float(hi_dev[k]))) - uk
            lo_c = uk - float(lo_dev[k])
            if search in ("multipliers",) or fixed_mults is None:
                mu_hi = new_mult(opts.deg_Mu, f"k{ctx.i}_muhi{k}", over=xs)
                mu_lo = new_mult(opts.deg_Mu, f"k{ctx.i}_mulo{k}", over=xs)
                created["mu"].append((mu_hi, mu_lo))
            else:
                mu_hi, mu_lo = fixed_mults["mu"][k]
                created["mu"].append((mu_hi, mu_lo))
            prog.add_sos(hi_c + _mul_fixed(mu_hi, vr), name=f"k{ctx.i}_sathi{k}")
            prog.add_sos(lo_c + _mul_fixed(mu_lo, vr), name=f"k{ctx.i}_satlo{k}")
        obstacle_conditions(f"k{ctx.i}")
        return created

    # piecewise mode: one condition per saturation cell
    cells = saturation_cells(m)
    mult_idx = 0
    for ci, cell in enumerate(cells):
        u_eff = []
        for k, tag in enumerate(cell):
            if tag == "lo":
                u_eff.append(Polynomial.constant(float(lo_dev[k])))
            elif tag == "hi":
                u_eff.append(Polynomial.constant(float(hi_dev[k])))
            else:
                u_eff.append(u_list[k])
        if search == "multipliers" or fixed_mults is None:
            L = new_mult(opts.deg_L, f"k{ctx.i}_L{ci}", sos=False)
            created["L"].append(L)
        else:
            L = fixed_mults["L"][ci]
            created["L"].append(L)
        vdot = _vdot(ctx, xs, V_i, V_next, u_eff, dist_entry)
        cond = -vdot + _aff_const(rhodot) + _mul_fixed(L, vr)
        for k, tag in enumerate(cell):
            uk = _as_aff(u_list[k])
            sides = []
            if tag == "hi":
                sides.append(_as_aff(Polynomial.constant(float(hi_dev[k]))) - uk)
            elif tag == "lo":
                sides.append(uk - float(lo_dev[k]))
            else:
                sides.append(uk - float(hi_dev[k]))
                sides.append(_as_aff(Polynomial.constant(float(lo_dev[k]))) - uk)
            for side in sides:
                if search in ("multipliers", "lyapunov") or fixed_mults is None:
                    M = new_mult(opts.deg_Mu, f"k{ctx.i}_M{ci}_{mult_idx}")
                    created["M"].append(M)
                else:
                    M = fixed_mults["M"][mult_idx]
                    created["M"].append(M)
                mult_idx += 1
                cond = cond + _mul_fixed(M, side)
        cond = box_terms(cond, f"k{ctx.i}c{ci}")
        prog.add_sos(cond, name=f"k{ctx.i}_cond{ci}")
    obstacle_conditions(f"k{ctx.i}")
    return created


def _subs_mults(created, assignment):
    out = {}
    for key, vals in created.items():
        subbed = []
        for v in vals:
            if isinstance(v, tuple):
                subbed.append(tuple(x.subs_decisions(assignment) for x in v))
            else:
                subbed.append(v.subs_decisions(assignment))
        out[key] = subbed
    return out


# -- alternation steps ------------------------------------------------------------------

def _prepare_contexts(system, traj, opts: TvOptions):
    degree = opts.taylor_degree
    if system.is_polynomial():
        deg_f = max(fi.degree() for fi in system.f)
        deg_g = max((gij.degree() for row in system.g for gij in row), default=0)
        degree = max(degree, deg_f, deg_g + 1)
    knots = polynomialize_trajectory(system, traj, degree)
    slopes = traj.effective_slopes()
    ctxs = []
    warnings = []
    times = traj.times
    for i in range(len(times) - 1):
        kd = knots[i]
        a, G, r, warn = _knot_error_dynamics(kd, traj, i, opts.feas_warn)
        if warn:
            warnings.append(warn)
        ctxs.append(_KnotContext(i, a, G, float(times[i + 1] - times[i]),
                                 kd.x0, kd.u0, None))
    return ctxs, warnings


def _prepare_disturbance(dist: DisturbanceSpec | None, traj, xs):
    """Shift the disturbance entry to each knot; substitute pinned components."""
    if dist is None:
        return None, None
    dist.validate()
    entries = []
    for i in range(len(traj.times) - 1):
        shift_map = {v: float(traj.states[i][j]) for j, v in enumerate(xs)}
        row = []
        for comp in dist.entry:
            p = comp.shift({v: shift_map.get(v, 0.0) for v in comp.variables()
                            if v in shift_map})
            for k, wv in enumerate(dist.w_vars):
                if dist.lo[k] == dist.hi[k]:
                    p = p.substitute(wv, Polynomial.constant(float(dist.lo[k])))
            row.append(p)
        entries.append(tuple(row))
    return dist, entries


def _step1_multipliers(ctxs, xs, V_series, rho_series, u_series, sat, opts,
                       dist=None, dist_entries=None):
    """Per-knot feasibility searching all multipliers (Algorithm step 1).

    Returns (mults, extra_certs) or raises InfeasibleError naming the knot.
    """
    mults = []
    extra_certs = []
    for i, ctx in enumerate(ctxs):
        prog = SosProgram()
        created = _build_knot_conditions(
            prog, ctx, xs, V_series[i], V_series[i + 1],
            float(rho_series[i]), float(rho_series[i + 1]), u_series[i],
            sat, opts, search="multipliers", fixed_mults=None,
            dist=dist, dist_knot_entry=None if dist_entries is None else dist_entries[i])
        res = prog.solve(opts.solver)
        if not res.feasible:
            raise InfeasibleError(
                f"multiplier step infeasible at knot {i}; "
                "try a smaller rho(t_N) or denser knots")
        mults.append(_subs_mults(created, res.assignment))
        for entry in _collect_entries(prog, res):
            if "_mu" in entry.name:
                extra_certs.append(entry)
    return mults, extra_certs


def _collect_entries(prog: SosProgram, res) -> list[CertEntry]:
    out = []
    for cert in res.certificates:
        con = prog.sos_constraints[cert.constraint_index]
        out.append(CertEntry(con.name, cert, con.poly.subs_decisions(res.assignment)))
    return out


def _joint_step_once(ctxs, xs, V_series, rho_series, u_series, mults, sat, opts,
                     which: str, goal_V, rho_f, norm_spec=None,
                     dist=None, dist_entries=None, rho_fixed=None):
    """One joint program over all knots: step 2 (controllers) or step 3 (V).

    With rho_fixed given, the levels are pinned numerically and the solve is a
    pure feasibility problem (used to retreat into the interior when the
    maximizing solve stops on the PSD boundary).
    """
    N = len(ctxs) + 1
    prog = SosProgram()
    if rho_fixed is None:
        rho_vars = [prog.new_var(f"rho{i}") for i in range(N - 1)]
    else:
        rho_vars = [LinExpr.constant(float(rho_fixed[i])) for i in range(N - 1)]

    if which == "controller":
        m = len(u_series[0]) if u_series and u_series[0] is not None else 0
        u_vars = [[prog.new_decision_poly(xs, opts.deg_u, name=f"u{i}_{k}")
                   for k in range(m)] for i in range(N - 1)]
        V_list = list(V_series)
    else:
        u_vars = None
        # V vanishes at the nominal point (positive definite in xbar), so the
        # funnel cross-sections stay centered on the trajectory
        V_list = [prog.new_decision_poly(xs, opts.deg_V, min_degree=2, name=f"V{i}")
                  for i in range(N - 1)] + [goal_V]
        for i in range(N - 1):
            prog.add_sos(V_list[i], name=f"V{i}")
            mode, value = norm_spec[i]
            if mode == "ones":
                prog.add_linear_eq(V_list[i].eval_at_point({v: 1.0 for v in xs}), value)
            else:
                tr = LinExpr()
                for v in xs:
                    tr = tr + V_list[i].terms.get(Monomial({v: 2}), LinExpr())
                prog.add_linear_eq(tr, value)

    for i, ctx in enumerate(ctxs):
        rho_i = rho_vars[i]
        rho_next = rho_vars[i + 1] if i + 1 < N - 1 else LinExpr.constant(rho_f)
        V_i = V_list[i] if which == "lyapunov" else V_series[i]
        V_next = V_list[i + 1] if which == "lyapunov" else V_series[i + 1]
        u_list = u_vars[i] if which == "controller" else u_series[i]
        _build_knot_conditions(
            prog, ctx, xs, V_i, V_next, rho_i, rho_next, u_list, sat, opts,
            search=which if which != "controller" else "controller",
            fixed_mults=mults[i], dist=dist,
            dist_knot_entry=None if dist_entries is None else dist_entries[i])
        if rho_fixed is None:
            prog.add_linear_ineq_ge(rho_i, opts.rho_floor)
            prog.add_linear_ineq_ge(rho_i * -1.0, -opts.rho_cap)

    if rho_fixed is None:
        objective = LinExpr()
        for rv in rho_vars:
            objective = objective + rv
        prog.set_objective_max(objective)
    res = prog.solve(opts.solver)
    probe_rho = None
    if res.assignment is not None:
        probe_rho = np.array([max(rv.evaluate(res.assignment), opts.rho_floor)
                              for rv in rho_vars] + [rho_f])
    if not res.feasible:
        return None, probe_rho
    out = {
        "rho": probe_rho,
        "certs": _collect_entries(prog, res),
        "objective": float(np.sum(probe_rho)),
    }
    if which == "controller":
        out["u"] = [[uk.subs_decisions(res.assignment) for uk in row]
                    for row in u_vars]
    else:
        out["V"] = [V_list[i].subs_decisions(res.assignment) for i in range(N - 1)] \
            + [goal_V]
    return out, probe_rho


def _joint_step(ctxs, xs, V_series, rho_series, u_series, mults, sat, opts,
                which: str, goal_V, rho_f, norm_spec=None,
                dist=None, dist_entries=None, rho_retreat_base=None):
    """Joint step with interior retreat.

    Maximizing sum rho drives the optimal point onto the PSD boundary, where
    certificates are numerically marginal and the next step is left with no
    interior to work in.  So the maximizing solve is used as a probe, and the
    step is certified at levels backed off slightly toward the iteration's
    starting point (a feasibility problem with strict interior).
    """
    base = np.asarray(rho_retreat_base if rho_retreat_base is not None
                      else rho_series, dtype=float)[:-1]
    sol_max, probe = _joint_step_once(ctxs, xs, V_series, rho_series, u_series,
                                      mults, sat, opts, which, goal_V, rho_f,
                                      norm_spec, dist, dist_entries)
    if probe is None:
        return None
    rho_star = probe[:-1]
    for beta in (0.02, 0.1, 0.3, 0.6):
        target = base + (1.0 - beta) * (rho_star - base)
        target = np.maximum(target, opts.rho_floor)
        sol, _ = _joint_step_once(ctxs, xs, V_series, rho_series, u_series,
                                  mults, sat, opts, which, goal_V, rho_f,
                                  norm_spec, dist, dist_entries, rho_fixed=target)
        if sol is not None:
            return sol
    return sol_max


def _norm_spec_from(init: TvInit, xs) -> list[tuple[str, float]]:
    ones = {v: 1.0 for v in xs}
    out = []
    for V in init.V_series[:-1]:
        val = V.evaluate(ones)
        scale = max(V.max_abs_coeff(), 1e-30)
        if abs(val) > 1e-8 * scale:
            out.append(("ones", float(val)))
        else:
            P, _, _ = V.quadratic_form(xs)
            out.append(("trace", float(np.trace(P))))
    return out


def _design_tv_core(system, traj, goal, init: TvInit, sat: SaturationSpec,
                    opts: TvOptions, controllers=None, search_controller=True,
                    dist: DisturbanceSpec | None = None,
                    fallback_init_builder=None) -> Funnel:
    S_f, rho_f = goal
    S_f = np.atleast_2d(np.asarray(S_f, dtype=float))
    rho_f = float(rho_f)
    if rho_f <= 0:
        raise ValueError("goal level rho_f must be positive")
    if len(traj.times) < 2:
        raise ValueError("need at least two knots")
    sat.validate(traj)
    xs = _state_vars_of(system)
    ctxs, warnings = _prepare_contexts(system, traj, opts)
    dist, dist_entries = _prepare_disturbance(dist, traj, xs)
    N = len(traj.times)
    goal_V = Polynomial.from_quadratic_form(S_f, xs)

    # -- initialization feasibility: shrink rho, then fall back to the
    #    sampled-consistent Lyapunov init if the Riccati guess cannot work ----
    init_candidates = [init]
    mults = extra_step1_certs = None
    V_series = rho_series = norm_spec = u_series = None
    last_err = None
    for cand_idx in range(2):
        if cand_idx == 1:
            if fallback_init_builder is None:
                break
            try:
                init_candidates.append(fallback_init_builder())
            except (ValueError, np.linalg.LinAlgError) as e:
                last_err = InfeasibleError(f"fallback initialization failed: {e}")
                break
        cand = init_candidates[cand_idx]
        V_series = [v for v in cand.V_series]
        V_series[N - 1] = goal_V
        rho_series = np.asarray(cand.rho_series, dtype=float).copy()
        rho_series[N - 1] = rho_f
        norm_spec = _norm_spec_from(cand, xs)
        u_series = [list(row) for row in
                    (controllers if controllers is not None
                     else tvlqr_controllers(cand, system))]
        for attempt in range(opts.max_shrinks + 1):
            try:
                mults, extra_step1_certs = _step1_multipliers(
                    ctxs, xs, V_series, rho_series, u_series, sat, opts,
                    dist, dist_entries)
                break
            except InfeasibleError as err:
                last_err = err
                if attempt == opts.max_shrinks:
                    break
                rho_series[:-1] *= opts.shrink
        if mults is not None:
            break
    if mults is None:
        raise InfeasibleError(
            f"{last_err} (after {opts.max_shrinks} rho shrinks"
            + (" and the sampled-consistent fallback initialization"
               if fallback_init_builder is not None else "") + ")")

    history: list[float] = []
    warning = "; ".join(warnings) if warnings else None
    sum_prev = 0.0
    state_certs: list[CertEntry] = list(extra_step1_certs)
    best = None

    for it in range(opts.max_iters):
        if it > 0:
            try:
                mults, extra_step1_certs = _step1_multipliers(
                    ctxs, xs, V_series, rho_series, u_series, sat, opts,
                    dist, dist_entries)
            except InfeasibleError:
                warning = ((warning + "; ") if warning else "") + \
                    "multiplier step became infeasible; stopped at last verified iterate"
                break

        rho_iter_start = rho_series.copy()
        if search_controller and system.m > 0:
            sol2 = _joint_step(ctxs, xs, V_series, rho_series, u_series, mults,
                               sat, opts, "controller", goal_V, rho_f,
                               dist=dist, dist_entries=dist_entries,
                               rho_retreat_base=rho_iter_start)
            if sol2 is not None and sol2["objective"] >= float(np.sum(rho_series)) - 1e-12:
                # the terminal knot's controller is not constrained by any
                # condition; keep its seed value for interpolation
                u_series = sol2["u"] + [u_series[N - 1]]
                rho_series = sol2["rho"]

        sol3 = _joint_step(ctxs, xs, V_series, rho_series, u_series, mults,
                           sat, opts, "lyapunov", goal_V, rho_f,
                           norm_spec=norm_spec, dist=dist, dist_entries=dist_entries,
                           rho_retreat_base=rho_iter_start)
        if sol3 is None:
            warning = ((warning + "; ") if warning else "") + \
                "Lyapunov step infeasible/stalled; stopped at last verified iterate"
            break
        sum_new = sol3["objective"]
        if sum_new < sum_prev * (1 - 1e-9):
            warning = ((warning + "; ") if warning else "") + \
                "objective decreased numerically; stopped at last verified iterate"
            break
        V_series = sol3["V"]
        rho_series = sol3["rho"]
        state_certs = sol3["certs"] + extra_step1_certs
        history.append(sum_new)
        best = (list(V_series), rho_series.copy(),
                [list(r) for r in u_series], list(state_certs))
        if sum_prev > 0 and (sum_new - sum_prev) / sum_prev < opts.epsilon:
            break
        sum_prev = sum_new

    if best is None:
        raise SynthesisError("no verified funnel iterate produced")
    V_fin, rho_fin, u_fin, certs = best
    funnel = Funnel(traj.times.copy(), V_fin, rho_fin, u_fin, S_f, rho_f, traj,
                    sat, certs, history,
                    np.array([v for _, v in norm_spec]
                             + [goal_V.evaluate({v: 1.0 for v in xs})]),
                    warning)
    bad = [e.name for e in certs if not e.verify().passed]
    if bad:
        funnel.warning = ((funnel.warning + "; ") if funnel.warning else "") + \
            f"unverified certificates: {bad}"
    return funnel


def design_tv(system, traj: NominalTrajectory, goal, V_guess_init: TvInit | None = None,
              sat: SaturationSpec | None = None, opts: TvOptions | None = None,
              Q=None, R=None) -> Funnel:
    """Synthesize a time-varying controller and funnel along the trajectory,
    maximizing sum_i rho(t_i).  goal = (S_f, rho_f)."""
    opts = opts or TvOptions()
    sat = sat or SaturationSpec()
    S_f, rho_f = goal
    if V_guess_init is None:
        n = system.n
        V_guess_init = init_from_tvlqr(system, traj,
                                       np.eye(n) if Q is None else Q,
                                       np.eye(system.m) if R is None else R,
                                       S_f, rho_f)
    n = system.n
    Qm = np.eye(n) if Q is None else Q
    Rm = np.eye(system.m) if R is None else R
    fallback = lambda: sampled_lyapunov_init(system, traj, Qm, Rm, S_f, rho_f,
                                              decay=opts.boundary_decay)
    return _design_tv_core(system, traj, goal, V_guess_init, sat, opts,
                           controllers=None,
                           search_controller=opts.search_controller,
                           fallback_init_builder=fallback)


def verify_tv(system, traj: NominalTrajectory, controller_series, goal,
              sat: SaturationSpec | None = None, opts: TvOptions | None = None,
              V_guess_init: TvInit | None = None, Q=None, R=None) -> Funnel:
    """Certify a funnel for a FIXED controller series (e.g. TVLQR gains); the
    Lyapunov functions and rho are still optimized."""
    opts = opts or TvOptions()
    sat = sat or SaturationSpec()
    S_f, rho_f = goal
    if V_guess_init is None:
        n = system.n
        V_guess_init = init_from_tvlqr(system, traj,
                                       np.eye(n) if Q is None else Q,
                                       np.eye(system.m) if R is None else R,
                                       S_f, rho_f)
    n = system.n
    Qm = np.eye(n) if Q is None else Q
    Rm = np.eye(system.m) if R is None else R
    fallback = lambda: sampled_lyapunov_init(system, traj, Qm, Rm, S_f, rho_f,
                                              decay=opts.boundary_decay)
    return _design_tv_core(system, traj, goal, V_guess_init, sat, opts,
                           controllers=controller_series, search_controller=False,
                           fallback_init_builder=fallback)


def design_tv_robust(system, traj: NominalTrajectory, goal, dist: DisturbanceSpec,
                     sat: SaturationSpec | None = None,
                     opts: TvOptions | None = None,
                     V_guess_init: TvInit | None = None, Q=None, R=None) -> Funnel:
    """Funnel synthesis under a box-bounded disturbance entering polynomially.

    On infeasibility, reports the largest uniform shrink of the box for which
    the initialization is feasible (found by bisection).
    """
    opts = opts or TvOptions()
    sat = sat or SaturationSpec()
    S_f, rho_f = goal
    if V_guess_init is None:
        n = system.n
        V_guess_init = init_from_tvlqr(system, traj,
                                       np.eye(n) if Q is None else Q,
                                       np.eye(system.m) if R is None else R,
                                       S_f, rho_f)
    n = system.n
    Qm = np.eye(n) if Q is None else Q
    Rm = np.eye(system.m) if R is None else R
    fallback = lambda: sampled_lyapunov_init(system, traj, Qm, Rm, S_f, rho_f,
                                              decay=opts.boundary_decay)
    try:
        return _design_tv_core(system, traj, goal, V_guess_init, sat, opts,
                               controllers=None,
                               search_controller=opts.search_controller, dist=dist,
                               fallback_init_builder=fallback)
    except InfeasibleError as err:
        s_ok = _max_feasible_box_shrink(system, traj, goal, V_guess_init, sat,
                                        opts, dist)
        raise InfeasibleError(
            f"{err}; largest feasible uniform disturbance-box shrink factor "
            f"is about {s_ok:.3g}") from None


def _max_feasible_box_shrink(system, traj, goal, init, sat, opts, dist) -> float:
    mid = 0.5 * (dist.lo + dist.hi)
    half = 0.5 * (dist.hi - dist.lo)

    def feasible(s: float) -> bool:
        d2 = replace(dist, lo=mid - s * half, hi=mid + s * half)
        try:
            _design_tv_core(system, traj, goal, init, sat,
                            replace(opts, max_iters=1),
                            controllers=None, search_controller=False, dist=d2)
            return True
        except (InfeasibleError, SynthesisError):
            return False

    lo_s, hi_s = 0.0, 1.0
    if not feasible(0.0):
        return 0.0
    for _ in range(8):
        mid_s = 0.5 * (lo_s + hi_s)
        if feasible(mid_s):
            lo_s = mid_s
        else:
            hi_s = mid_s
    return lo_s


# -- containment and refinement ------------------------------------------------------

def containment_certificate(V_inner: Polynomial, rho_inner: float,
                            V_outer: Polynomial, rho_outer: float,
                            deg_lambda: int = 2,
                            solver: SolverOptions | None = None):
    """SOS proof that {V_inner <= rho_inner} is contained in {V_outer <= rho_outer}.

    Returns (certified, entries); certified=False means the certificate search
    failed, not that containment is disproved.
    """
    vars_all = tuple(sorted(set(V_inner.variables()) | set(V_outer.variables()),
                            key=lambda v: v.name))
    prog = SosProgram()
    lam = prog.new_decision_poly(vars_all, deg_lambda, name="lambda")
    prog.add_sos(lam, name="lambda")
    cond = AffinePoly.from_poly(rho_outer - V_outer) - \
        lam * (Polynomial.constant(rho_inner) - V_inner)
    prog.add_sos(cond, name="containment")
    res = prog.solve(solver or SolverOptions())
    if not res.feasible:
        return False, []
    return True, _collect_entries(prog, res)


@dataclass
class RefinementReport:
    times: np.ndarray
    feasible: list[bool]
    all_ok: bool


def refine_and_verify(funnel: Funnel, system, opts: TvOptions | None = None) -> RefinementReport:
    """Double the knot density, interpolate (V, rho, u), and re-run the
    multiplier feasibility at every refined knot."""
    opts = opts or TvOptions()
    t_old = funnel.times
    mids = 0.5 * (t_old[:-1] + t_old[1:])
    t_new = np.sort(np.concatenate([t_old, mids]))
    traj = funnel.traj
    states = np.array([traj.x0(t) for t in t_new])
    inputs = np.array([traj.u0(t) for t in t_new])
    slopes = np.array([system.dynamics(states[i], inputs[i])
                       for i in range(len(t_new))])
    traj_new = NominalTrajectory(t_new, states, inputs, slopes)
    V_new = [funnel.V_at(t) for t in t_new]
    rho_new = np.array([funnel.rho_at(t) for t in t_new])
    u_new = [funnel.controller_at(t) for t in t_new]
    ctxs, _ = _prepare_contexts(system, traj_new, opts)
    xs = _state_vars_of(system)
    feas = []
    for i, ctx in enumerate(ctxs):
        prog = SosProgram()
        try:
            _build_knot_conditions(prog, ctx, xs, V_new[i], V_new[i + 1],
                                   float(rho_new[i]), float(rho_new[i + 1]),
                                   u_new[i], funnel.sat, opts,
                                   search="multipliers", fixed_mults=None)
            res = prog.solve(opts.solver)
            feas.append(bool(res.feasible))
        except InfeasibleError:
            feas.append(False)
    return RefinementReport(t_new, feas, all(feas))


# -- funnel files ----------------------------------------------------------------------

FUNNEL_SCHEMA_VERSION = 1


def save_funnel(funnel: Funnel, path: str, cert_dir: str | None = None):
    """Write the funnel as versioned JSON; certificates go to cert_dir (one
    text file each) when given, referenced by relative name."""
    cert_refs = []
    if cert_dir is not None:
        os.makedirs(cert_dir, exist_ok=True)
        for idx, entry in enumerate(funnel.certificates):
            fname = f"cert_{idx:04d}_{entry.name}.txt"
            with open(os.path.join(cert_dir, fname), "w", encoding="utf-8") as fh:
                fh.write(f"name {entry.name}\n")
                fh.write(f"target {entry.target.to_text()}\n")
                fh.write(entry.certificate.to_text())
            cert_refs.append(fname)
    data = {
        "version": FUNNEL_SCHEMA_VERSION,
        "times": funnel.times.tolist(),
        "rho": funnel.rho.tolist(),
        "rho_f": funnel.rho_f,
        "S_f": funnel.S_f.tolist(),
        "V": [p.to_text() for p in funnel.V],
        "controllers": [[p.to_text() for p in row] for row in funnel.controllers],
        "norm_values": funnel.norm_values.tolist(),
        "history": list(funnel.history),
        "saturation": {
            "mode": funnel.sat.mode,
            "u_min": None if funnel.sat.u_min is None else funnel.sat.u_min.tolist(),
            "u_max": None if funnel.sat.u_max is None else funnel.sat.u_max.tolist(),
        },
        "trajectory": {
            "times": funnel.traj.times.tolist(),
            "states": funnel.traj.states.tolist(),
            "inputs": funnel.traj.inputs.tolist(),
            "slopes": None if funnel.traj.slopes is None else funnel.traj.slopes.tolist(),
        },
        "certificates": cert_refs,
        "warning": funnel.warning,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_funnel(path: str) -> Funnel:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != FUNNEL_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported funnel schema version")
    tr = data["trajectory"]
    traj = NominalTrajectory(np.array(tr["times"]), np.array(tr["states"]),
                             np.array(tr["inputs"]),
                             None if tr["slopes"] is None else np.array(tr["slopes"]))
    sat = SaturationSpec(
        None if data["saturation"]["u_min"] is None else np.array(data["saturation"]["u_min"]),
        None if data["saturation"]["u_max"] is None else np.array(data["saturation"]["u_max"]),
        data["saturation"]["mode"])
    certs = []
    cert_dir = os.path.join(os.path.dirname(os.path.abspath(path)), "certificates")
    for fname in data.get("certificates", []):
        full = os.path.join(cert_dir, fname)
        if os.path.exists(full):
            certs.append(load_cert_entry(full))
    funnel = Funnel(
        np.array(data["times"]),
        [Polynomial.from_text(s) for s in data["V"]],
        np.array(data["rho"]),
        [[Polynomial.from_text(s) for s in row] for row in data["controllers"]],
        np.array(data["S_f"]),
        float(data["rho_f"]),
        traj, sat, certs, list(data.get("history", [])),
        np.array(data.get("norm_values", [])),
        data.get("warning"),
    )
    return funnel


def load_cert_entry(path: str) -> CertEntry:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("name "):
        raise ValueError(f"{path}: missing certificate name header")
    name = lines[0][5:]
    if not lines[1].startswith("target "):
        raise ValueError(f"{path}: missing certificate target header")
    target = Polynomial.from_text(lines[1][7:])
    cert = sos_mod.Certificate.from_text("\n".join(lines[2:]), name=name)
    return CertEntry(name, cert, target)
