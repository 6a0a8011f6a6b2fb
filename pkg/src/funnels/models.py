"""Benchmark control-affine systems, Taylor polynomialization, and nominal
trajectory handling.

Systems are control-affine, xdot = f(x) + g(x) u, with f and g stored as
expression trees (or polynomials, after Taylor expansion).  State variables
are named x0..x{n-1} and inputs u0..u{m-1}.

polynomialize() expands f to the requested degree and g to degree-1 less, so
that the joint degree of f(x) + g(x)u in (x, u) is bounded by the requested
degree; with the linear time-varying controllers used downstream this keeps
the closed-loop vector field at the stated Taylor degree.

Trajectory files are UTF-8: a single JSON header line, then one
comma-separated numeric record per knot (t, x, u, and optionally stored
slopes), all at 17 significant digits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .expr import Const, Cos, Expr, Pow, Prod, Sin, Sum, Var, as_expr, compile_vector, taylor
from .poly import Polynomial, Variable, variables


def state_vars(n: int) -> tuple[Variable, ...]:
    return variables([f"x{i}" for i in range(n)])

def input_vars(m: int) -> tuple[Variable, ...]:
    return variables([f"u{i}" for i in range(m)])


@dataclass
class ControlAffineSystem:
    """Dynamics xdot = f(x) + g(x) u with optional element-wise input bounds."""

    name: str
    state_vars: tuple[Variable, ...]
    input_vars: tuple[Variable, ...]
    f: tuple  # n entries, Expr or Polynomial
    g: tuple  # n rows of m entries, Expr or Polynomial
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    # set by polynomialize(): the absolute point the displacement coords refer to
    origin_x: np.ndarray | None = None
    origin_u: np.ndarray | None = None
    _f_eval: object = field(default=None, repr=False, compare=False)
    _g_eval: object = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.state_vars)

    @property
    def m(self) -> int:
        return len(self.input_vars)

    def is_polynomial(self) -> bool:
        entries = list(self.f) + [gij for row in self.g for gij in row]
        return all(isinstance(e, Polynomial) for e in entries)

    def has_input_bounds(self) -> bool:
        return self.u_min is not None and self.u_max is not None

    def _compiled(self):
        if self._f_eval is None:
            f_exprs = [as_expr(fi) for fi in self.f]
            g_exprs = [as_expr(gij) for row in self.g for gij in row]
            object.__setattr__(self, "_f_eval", compile_vector(f_exprs, self.state_vars))
            object.__setattr__(self, "_g_eval", compile_vector(g_exprs, self.state_vars))
        return self._f_eval, self._g_eval

    def eval_f(self, x: np.ndarray) -> np.ndarray:
        fe, _ = self._compiled()
        return fe(np.asarray(x, dtype=float))

    def eval_g(self, x: np.ndarray) -> np.ndarray:
        _, ge = self._compiled()
        flat = ge(np.asarray(x, dtype=float))
        return flat.reshape(flat.shape[:-1] + (self.n, self.m))

    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """xdot at (batches of) states and inputs."""
        gu = np.einsum("...ij,...j->...i", self.eval_g(x), np.asarray(u, dtype=float))
        return self.eval_f(x) + gu


def pendulum(mass: float = 1.0, length: float = 1.0, gravity: float = 9.81,
             damping: float = 0.1, torque_limit: float | None = None) -> ControlAffineSystem:
    """Damped torque-actuated pendulum: m l^2 thdd = u - b thd - m g l sin(th).

    State (theta, thetadot) with theta measured from the hanging position.
    """
    xs = state_vars(2)
    us = input_vars(1)
    ml2 = mass * length ** 2
    mgl = mass * gravity * length
    th, thd = Var(xs[0]), Var(xs[1])
    f = (thd, (Const(-damping) * thd - Const(mgl) * Sin(th)) * Const(1.0 / ml2))
    g = ((Const(0.0),), (Const(1.0 / ml2),))
    u_min = u_max = None
    if torque_limit is not None:
        u_min = np.array([-float(torque_limit)])
        u_max = np.array([float(torque_limit)])
    return ControlAffineSystem("pendulum", xs, us, f, g, u_min, u_max)


@dataclass
class AcrobotParams:
    """Two-link underactuated pendulum parameters (uniform-rod textbook values;
    NOT identified hardware values, which are unpublished)."""

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 2.0
    lc1: float = 0.5
    lc2: float = 1.0
    I1: float = 1.0 / 12.0
    I2: float = 4.0 / 12.0
    b1: float = 0.0
    b2: float = 0.0
    gravity: float = 9.8

    def validate(self):
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"acrobot parameter {name} must be positive")
        if self.b1 < 0 or self.b2 < 0:
            raise ValueError("acrobot damping must be nonnegative")


def acrobot(params: AcrobotParams | None = None,
            torque_limit: float | None = None) -> ControlAffineSystem:
    """Standard two-link manipulator with torque only at the elbow joint.

    State (th1, th2, th1d, th2d); th1 from the downward vertical at the
    shoulder, th2 relative at the elbow.  Upright is (pi, 0, 0, 0).
    """
    p = params or AcrobotParams()
    p.validate()
    xs = state_vars(4)
    us = input_vars(1)
    th1, th2, w1, w2 = (Var(v) for v in xs)
    s1, s2, c2 = Sin(th1), Sin(th2), Cos(th2)
    s12 = Sin(th1 + th2)
    gacc = p.gravity

    m11 = Const(p.I1 + p.I2 + p.m1 * p.lc1 ** 2
                + p.m2 * (p.l1 ** 2 + p.lc2 ** 2)) + Const(2 * p.m2 * p.l1 * p.lc2) * c2
    m12 = Const(p.I2 + p.m2 * p.lc2 ** 2) + Const(p.m2 * p.l1 * p.lc2) * c2
    m22 = Const(p.I2 + p.m2 * p.lc2 ** 2)
    det = m11 * m22 - m12 * m12
    inv_det = Pow(det, -1)

    # Coriolis/centripetal + gravity + damping, lumped as h(q, qdot)
    a = Const(p.m2 * p.l1 * p.lc2)
    h1 = (Const(-2.0) * a * s2 * w1 * w2 - a * s2 * w2 * w2
          + Const((p.m1 * p.lc1 + p.m2 * p.l1) * gacc) * s1
          + Const(p.m2 * p.lc2 * gacc) * s12 + Const(p.b1) * w1)
    h2 = (a * s2 * w1 * w1 + Const(p.m2 * p.lc2 * gacc) * s12 + Const(p.b2) * w2)

    # qdd = M^{-1} (B u - h), B = [0; 1]
    f3 = (m12 * h2 - m22 * h1) * inv_det
    f4 = (m12 * h1 - m11 * h2) * inv_det
    g3 = Const(-1.0) * m12 * inv_det
    g4 = m11 * inv_det

    f = (w1, w2, f3, f4)
    g = ((Const(0.0),), (Const(0.0),), (g3,), (g4,))
    u_min = u_max = None
    if torque_limit is not None:
        u_min = np.array([-float(torque_limit)])
        u_max = np.array([float(torque_limit)])
    return ControlAffineSystem("acrobot", xs, us, f, g, u_min, u_max)


def acrobot_mass_matrix(params: AcrobotParams, x: np.ndarray) -> np.ndarray:
    p = params
    c2 = math.cos(x[1])
    m11 = p.I1 + p.I2 + p.m1 * p.lc1 ** 2 + p.m2 * (p.l1 ** 2 + p.lc2 ** 2) \
        + 2 * p.m2 * p.l1 * p.lc2 * c2
    m12 = p.I2 + p.m2 * p.lc2 ** 2 + p.m2 * p.l1 * p.lc2 * c2
    m22 = p.I2 + p.m2 * p.lc2 ** 2
    return np.array([[m11, m12], [m12, m22]])


def acrobot_energy(params: AcrobotParams, x: np.ndarray) -> float:
    """Total mechanical energy; potential referenced to the hanging position."""
    p = params
    qd = np.asarray(x[2:], dtype=float)
    M = acrobot_mass_matrix(params, x)
    kinetic = 0.5 * qd @ M @ qd
    potential = -(p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity * math.cos(x[0]) \
        - p.m2 * p.lc2 * p.gravity * math.cos(x[0] + x[1])
    potential0 = -(p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity - p.m2 * p.lc2 * p.gravity
    return float(kinetic + potential - potential0)


def _component_taylor(comp, center: dict, degree: int) -> Polynomial:
    if isinstance(comp, Polynomial):
        shifted = comp.shift({v: center.get(v, 0.0) for v in comp.variables()})
        return shifted.truncated(degree)
    return taylor(comp, center, degree)


def polynomialize(system: ControlAffineSystem, about, degree: int) -> ControlAffineSystem:
    """Taylor-expand the dynamics about an (x, u) point into displacement
    coordinates.

    f is expanded to `degree` and g to `degree - 1`, bounding the joint degree
    of f(x) + g(x)u by `degree`.  The nominal input is folded into the drift,
    so the returned system is in deviation coordinates for both state and
    input; the expansion point is recorded in origin_x / origin_u and input
    bounds stay absolute.
    """
    if degree < 1:
        raise ValueError("polynomialization degree must be >= 1")
    x_point, u_point = about
    x_point = np.asarray(x_point, dtype=float)
    u_point = np.asarray(u_point, dtype=float)
    center = dict(zip(system.state_vars, x_point))
    g_deg = max(degree - 1, 0)
    g_poly = tuple(tuple(_component_taylor(gij, center, g_deg) for gij in row)
                   for row in system.g)
    f_poly = []
    for i in range(system.n):
        drift = _component_taylor(system.f[i], center, degree)
        for k in range(system.m):
            drift = drift + g_poly[i][k] * float(u_point[k])
        f_poly.append(drift)
    return ControlAffineSystem(
        name=f"{system.name}-taylor{degree}",
        state_vars=system.state_vars,
        input_vars=system.input_vars,
        f=tuple(f_poly),
        g=g_poly,
        u_min=None if system.u_min is None else system.u_min.copy(),
        u_max=None if system.u_max is None else system.u_max.copy(),
        origin_x=x_point.copy(),
        origin_u=u_point.copy(),
    )


@dataclass
class KnotDynamics:
    """Per-knot Taylor expansion along a trajectory, in displacement coords."""

    time: float
    x0: np.ndarray
    u0: np.ndarray
    drift: tuple          # f(x0+xbar) + g(x0+xbar)u0, tuple of Polynomial in xbar
    input_map: tuple      # g(x0+xbar), rows of tuples of Polynomial


def polynomialize_trajectory(system: ControlAffineSystem, traj: "NominalTrajectory",
                             degree: int) -> list[KnotDynamics]:
    """Expand f, g about every knot's (x0, u0); see polynomialize for degrees."""
    if degree < 1:
        raise ValueError("polynomialization degree must be >= 1")
    out = []
    g_deg = max(degree - 1, 0)
    for i in range(len(traj.times)):
        center = dict(zip(system.state_vars, traj.states[i]))
        g_poly = tuple(tuple(_component_taylor(gij, center, g_deg) for gij in row)
                       for row in system.g)
        drift = []
        for r in range(system.n):
            d = _component_taylor(system.f[r], center, degree)
            for k in range(system.m):
                d = d + g_poly[r][k] * float(traj.inputs[i][k])
            drift.append(d)
        out.append(KnotDynamics(float(traj.times[i]), traj.states[i].copy(),
                                traj.inputs[i].copy(), tuple(drift), g_poly))
    return out


@dataclass
class NominalTrajectory:
    """Sampled nominal motion: knot times, states, inputs, optional slopes.

    x0(t) interpolates cubic-Hermite using the stored slopes (falling back to
    three-point finite differences when none were recorded); u0(t) is
    first-order hold.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    slopes: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.slopes is not None:
            self.slopes = np.asarray(self.slopes, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 2:
            raise ValueError("trajectory needs at least two knot times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if self.states.shape[0] != len(self.times) or self.inputs.shape[0] != len(self.times):
            raise ValueError("states/inputs rows must match the number of knots")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def effective_slopes(self) -> np.ndarray:
        if self.slopes is not None:
            return self.slopes
        return _fd_slopes(self.times, self.states)

    def _segment(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return min(max(k, 0), len(self.times) - 2)

    def x0(self, t: float) -> np.ndarray:
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = self._segment(t)
        h = self.times[k + 1] - self.times[k]
        s = (t - self.times[k]) / h
        d = self.effective_slopes()
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        return (h00 * self.states[k] + h10 * h * d[k]
                + h01 * self.states[k + 1] + h11 * h * d[k + 1])

    def u0(self, t: float) -> np.ndarray:
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = self._segment(t)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.inputs[k] + w * self.inputs[k + 1]


def _fd_slopes(times: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Three-point parabolic slope estimates at the knots."""
    N = len(times)
    d = np.zeros_like(states)
    for i in range(N):
        if i == 0:
            d[i] = (states[1] - states[0]) / (times[1] - times[0])
        elif i == N - 1:
            d[i] = (states[-1] - states[-2]) / (times[-1] - times[-2])
        else:
            h0 = times[i] - times[i - 1]
            h1 = times[i + 1] - times[i]
            d[i] = (h1 * (states[i] - states[i - 1]) / h0
                    + h0 * (states[i + 1] - states[i]) / h1) / (h0 + h1)
    return d


def check_feasibility(system: ControlAffineSystem, traj: NominalTrajectory) -> np.ndarray:
    """Per-knot dynamic residual ||f(x0) + g(x0)u0 - xdot0||_2."""
    slopes = traj.effective_slopes()
    res = np.zeros(len(traj.times))
    for i in range(len(traj.times)):
        xdot = system.dynamics(traj.states[i], traj.inputs[i])
        res[i] = np.linalg.norm(xdot - slopes[i])
    return res


# -- trajectory file I/O ----------------------------------------------------------

TRAJ_SCHEMA_VERSION = 1


def save_trajectory(traj: NominalTrajectory, path: str):
    header = {
        "version": TRAJ_SCHEMA_VERSION,
        "n": traj.n,
        "m": traj.m,
        "T": traj.T,
        "has_slopes": traj.slopes is not None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(traj.times)):
            row = [traj.times[i], *traj.states[i], *traj.inputs[i]]
            if traj.slopes is not None:
                row += list(traj.slopes[i])
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def load_trajectory(path: str) -> NominalTrajectory:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:1: bad JSON header: {e}") from None
    for key in ("version", "n", "m", "T"):
        if key not in header:
            raise ValueError(f"{path}:1: header missing field '{key}'")
    if header["version"] != TRAJ_SCHEMA_VERSION:
        raise ValueError(f"{path}:1: unsupported schema version {header['version']}")
    n, m = int(header["n"]), int(header["m"])
    has_slopes = bool(header.get("has_slopes", False))
    want = 1 + n + m + (n if has_slopes else 0)
    times, states, inputs, slopes = [], [], [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != want:
            raise ValueError(f"{path}:{ln}: expected {want} fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as e:
            raise ValueError(f"{path}:{ln}: {e}") from None
        times.append(vals[0])
        states.append(vals[1:1 + n])
        inputs.append(vals[1 + n:1 + n + m])
        if has_slopes:
            slopes.append(vals[1 + n + m:])
    try:
        return NominalTrajectory(np.array(times), np.array(states), np.array(inputs),
                                 np.array(slopes) if has_slopes else None)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


# -- simple trajectory generators ---------------------------------------------------

def generate_rollout(system: ControlAffineSystem, policy, x_init, T: float,
                     n_knots: int, dt: float = 1e-3) -> NominalTrajectory:
    """Forward-simulate a state-feedback policy and resample to n_knots.

    Knot inputs are re-evaluated from the policy at the knot states, so the
    stored (x0, u0, slope) triples are exactly dynamically consistent.
    """
    steps = max(int(round(T / dt)), n_knots)
    dt = T / steps
    x = np.asarray(x_init, dtype=float).copy()
    xs = [x.copy()]
    for k in range(steps):
        t = k * dt

        def field_(xv, tv):
            return system.dynamics(xv, np.atleast_1d(policy(tv, xv)))

        k1 = field_(x, t)
        k2 = field_(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = field_(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = field_(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise ArithmeticError(f"rollout diverged at t={t:.4g}")
        xs.append(x.copy())
    xs = np.array(xs)
    tgrid = np.linspace(0.0, T, steps + 1)
    knot_t = np.linspace(0.0, T, n_knots)
    idx = np.searchsorted(tgrid, knot_t).clip(0, steps)
    states = xs[idx]
    inputs = np.array([np.atleast_1d(policy(t, s)) for t, s in zip(knot_t, states)])
    slopes = np.array([system.dynamics(s, u) for s, u in zip(states, inputs)])
    return NominalTrajectory(knot_t, states, inputs, slopes)


def generate_pendulum_swingup(system: ControlAffineSystem | None = None,
                              energy_gain: float = 1.0,
                              capture_radius: float = 1.2,
                              torque_limit: float = 8.0,
                              horizon: float = 10.0,
                              n_knots: int = 25,
                              dt: float = 1e-3,
                              x_init=(0.0, 0.3)) -> NominalTrajectory:
    """Swing-up trajectory for the pendulum via energy shaping blended into an
    LQR capture controller near the upright, resampled to n_knots.

    The policy is continuous in the state (smooth blend instead of a switching
    capture, start from a small initial velocity instead of a torque kick), so
    the sampled open-loop input is slowly varying and friendly to the
    first-order-hold assumption made downstream.  Raises if the policy fails
    to bring the state within 1e-2 of upright within the horizon.  Inputs are
    clamped strictly inside the torque limit so saturation specs hold with
    margin.
    """
    from .lqr import care_gain, linearize

    system = system or pendulum()
    if energy_gain <= 0:
        raise ValueError("energy swing-up needs a positive energy gain")
    grav = 9.81
    target = np.array([math.pi, 0.0])
    A, B = linearize(system, target, np.zeros(1))
    _, K = care_gain(A, B, np.eye(2), np.eye(1) * 1.0)
    clamp = 0.95 * torque_limit

    def energy(x):
        return 0.5 * x[1] ** 2 - grav * math.cos(x[0])

    e_up = grav

    def policy(t, x):
        err = np.array([_wrap_angle(x[0] - math.pi), x[1]])
        d = np.linalg.norm(err)
        u_pump = energy_gain * (e_up - energy(x)) * x[1] + 0.1 * x[1]
        u_lqr = -(K @ err)[0]
        blend = np.clip((capture_radius - d) / (0.5 * capture_radius), 0.0, 1.0)
        u = (1.0 - blend) * u_pump + blend * u_lqr
        return np.array([np.clip(u, -clamp, clamp)])

    # Dense forward simulation until the capture controller has settled.
    steps = int(round(horizon / dt))
    x = np.asarray(x_init, dtype=float).copy()
    xs = [x.copy()]
    settle_index = None
    for k in range(steps):
        t = k * dt

        def field_(xv, tv):
            return system.dynamics(xv, policy(tv, xv))

        k1 = field_(x, t)
        k2 = field_(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = field_(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = field_(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs.append(x.copy())
        err = np.linalg.norm([_wrap_angle(x[0] - math.pi), x[1]])
        if err < 2e-3:
            settle_index = k + 1
            break
    if settle_index is None:
        raise RuntimeError("swing-up policy failed to reach the upright within the horizon")
    xs = np.array(xs[:settle_index + 1])
    T = settle_index * dt
    tgrid = np.linspace(0.0, T, settle_index + 1)
    knot_t = np.linspace(0.0, T, n_knots)
    idx = np.searchsorted(tgrid, knot_t).clip(0, settle_index)
    states = xs[idx]
    inputs = np.array([policy(t, s) for t, s in zip(knot_t, states)])
    slopes = np.array([system.dynamics(s, u) for s, u in zip(states, inputs)])
    final_err = np.linalg.norm([_wrap_angle(states[-1][0] - math.pi), states[-1][1]])
    if final_err > 1e-2:
        raise RuntimeError(f"swing-up end state {final_err:.3g} from upright")
    return NominalTrajectory(knot_t, states, inputs, slopes)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi
