"""Closed-loop simulation, Monte Carlo funnel validation, and plot-data export.

Integration is fixed-step RK4 for determinism.  Monte Carlo draws use the
counter-based Philox generator seeded explicitly, so reports are reproducible
bit-for-bit across platforms; trials are indexed and aggregated by trial
number.

Monte Carlo containment runs on the certification dynamics by default: the
per-knot Taylor error dynamics with the funnel's interpolated, saturated
controller (the same vector fields the SOS conditions were imposed on).
Simulation against the true non-polynomial dynamics is also available for
model-gap studies; violations there are reported, not errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .lyap_tv import Funnel
from .models import ControlAffineSystem, polynomialize_trajectory
from .poly import PolyVecEvaluator, Polynomial

DEFAULT_VIOLATION_MARGIN = 1e-6


@dataclass
class SimResult:
    times: np.ndarray
    states: np.ndarray          # absolute states, or deviation states for
                                # certification-dynamics runs (see `frame`)
    inputs: np.ndarray          # post-saturation commanded inputs
    V: np.ndarray | None
    rho: np.ndarray | None
    exit_time: float | None     # first time V - rho exceeded the margin
    frame: str = "absolute"     # absolute | deviation

    @property
    def stayed_inside(self) -> bool:
        return self.exit_time is None


def rng_stream(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) for cross-platform reproducibility."""
    return np.random.Generator(np.random.Philox(seed))


def simulate(system: ControlAffineSystem, controller, x_init, dt: float | None = None,
             horizon: tuple[float, float] | None = None,
             funnel: Funnel | None = None,
             margin: float = DEFAULT_VIOLATION_MARGIN) -> SimResult:
    """RK4 simulation of the true dynamics under a controller.

    controller may be a Funnel (its saturated, interpolated command is used
    and V/rho traces are recorded) or a callable u(t, x).
    """
    if isinstance(controller, Funnel) and funnel is None:
        funnel = controller
    if funnel is not None:
        t0, t1 = float(funnel.times[0]), float(funnel.times[-1])
        u_of = funnel.command
    else:
        if horizon is None:
            raise ValueError("horizon required when no funnel is given")
        t0, t1 = horizon
        u_of = controller
    if dt is None:
        dt = (t1 - t0) / 2000.0
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = max(1, int(round((t1 - t0) / dt)))
    dt = (t1 - t0) / steps
    x = np.asarray(x_init, dtype=float).copy()
    times = [t0]
    states = [x.copy()]
    inputs = []

    def field_(t, xv):
        u = np.atleast_1d(u_of(t, xv))
        if system.u_min is not None:
            u = np.clip(u, system.u_min, system.u_max)
        return system.dynamics(xv, u), u

    for k in range(steps):
        t = t0 + k * dt
        k1, u_now = field_(t, x)
        k2, _ = field_(t + dt / 2, x + dt / 2 * k1)
        k3, _ = field_(t + dt / 2, x + dt / 2 * k2)
        k4, _ = field_(t + dt, x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise ArithmeticError(f"state became non-finite at t = {t + dt:.6g} "
                                  f"(last finite time {t:.6g})")
        inputs.append(u_now)
        times.append(t + dt)
        states.append(x.copy())
    inputs.append(inputs[-1] if inputs else np.zeros(system.m))
    times = np.array(times)
    states = np.array(states)
    inputs = np.array(inputs)

    V_tr = rho_tr = None
    exit_time = None
    if funnel is not None:
        V_tr = np.empty(len(times))
        rho_tr = np.empty(len(times))
        for i, t in enumerate(times):
            mem = funnel.membership(t, states[i])
            V_tr[i] = mem["V"]
            rho_tr[i] = mem["rho"]
            if exit_time is None and mem["V"] - mem["rho"] > margin * mem["rho"]:
                exit_time = float(t)
    return SimResult(times, states, inputs, V_tr, rho_tr, exit_time)


def sample_level_set(S: np.ndarray, rho: float, count: int, mode: str = "boundary",
                     seed: int = 0) -> np.ndarray:
    """Sample {x : x'Sx = rho} (boundary) or uniformly from its interior.

    Directions are normalized Gaussians mapped through S^{-1/2}; interior
    samples use the radial CDF correction for uniformity on the ellipsoid.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = S.shape[0]
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    if w[0] <= 0:
        raise ValueError("level-set matrix must be positive definite")
    L = np.linalg.cholesky(0.5 * (S + S.T))
    gen = rng_stream(seed)
    z = gen.normal(size=(count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    if mode == "interior":
        r = gen.uniform(size=(count, 1)) ** (1.0 / n)
        z = z * r
    elif mode != "boundary":
        raise ValueError("mode must be 'boundary' or 'interior'")
    return np.sqrt(rho) * np.linalg.solve(L.T, z.T).T


def _certification_fields(system: ControlAffineSystem, funnel: Funnel):
    """Per-knot evaluators of the Taylor error dynamics (a_i, G_i)."""
    opts_deg = 3
    if system.is_polynomial():
        deg_f = max(fi.degree() for fi in system.f)
        deg_g = max((gij.degree() for row in system.g for gij in row), default=0)
        opts_deg = max(opts_deg, deg_f, deg_g + 1)
    knots = polynomialize_trajectory(system, funnel.traj, opts_deg)
    slopes = funnel.traj.effective_slopes()
    xs = funnel.state_vars()
    fields = []
    for i, kd in enumerate(knots):
        a = [kd.drift[r] - float(slopes[i][r]) for r in range(len(kd.drift))]
        polys = list(a)
        for r in range(len(a)):
            polys.extend(kd.input_map[r])
        fields.append(PolyVecEvaluator(polys, xs))
    return fields


def monte_carlo_funnel(system: ControlAffineSystem, funnel: Funnel, trials: int,
                       seed: int = 0, dynamics: str = "taylor",
                       dt: float | None = None,
                       margin: float = DEFAULT_VIOLATION_MARGIN) -> dict:
    """Simulate `trials` initial states drawn uniformly from the interior of
    B_rho(0) under the funnel controller; count containment violations.

    dynamics="taylor" uses the per-knot certification dynamics (deviation
    coordinates, saturated first-order-hold controller); dynamics="true" uses
    the original vector field.  The report is a JSON-serializable dict,
    deterministic for a fixed seed.
    """
    if dynamics not in ("taylor", "true"):
        raise ValueError("dynamics must be 'taylor' or 'true'")
    N = funnel.N
    n = funnel.n
    xs = funnel.state_vars()
    times = funnel.times
    if dt is None:
        dt = (times[-1] - times[0]) / 2000.0

    # rejection-sample the interior of {V_0 <= rho_0} from its quadratic hull
    P0, q0, c0 = funnel.V[0].quadratic_form(xs)
    gen_seed = seed
    samples = []
    attempts = 0
    V0 = funnel.V[0]
    while len(samples) < trials and attempts < 50:
        cand = sample_level_set(P0, 1.2 * funnel.rho[0], trials,
                                mode="interior", seed=gen_seed + 7919 * attempts)
        for row in cand:
            if len(samples) >= trials:
                break
            point = dict(zip(xs, row))
            if V0.evaluate(point) <= funnel.rho[0]:
                samples.append(row)
        attempts += 1
    if len(samples) < trials:
        raise RuntimeError("rejection sampling of the initial set failed")
    samples = np.array(samples)

    u_min, u_max = funnel.sat.u_min, funnel.sat.u_max
    m = system.m
    # precompute controller coefficient evaluators per knot
    ctrl_evals = [PolyVecEvaluator(row, xs) if m else None
                  for row in funnel.controllers]
    V_evals = [PolyVecEvaluator([V], xs) for V in funnel.V]

    def u_dev(t, Xb):
        """interpolated deviation controller at batch of deviation states"""
        k = min(int(np.searchsorted(times, t, side="right") - 1), N - 2)
        k = max(k, 0)
        w = (t - times[k]) / (times[k + 1] - times[k])
        ua = ctrl_evals[k](Xb)
        ub = ctrl_evals[k + 1](Xb)
        return (1 - w) * ua + w * ub

    def V_interp(t, Xb):
        k = min(int(np.searchsorted(times, t, side="right") - 1), N - 2)
        k = max(k, 0)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return ((1 - w) * V_evals[k](Xb) + w * V_evals[k + 1](Xb))[:, 0]

    def rho_interp(t):
        k = min(int(np.searchsorted(times, t, side="right") - 1), N - 2)
        k = max(k, 0)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1 - w) * funnel.rho[k] + w * funnel.rho[k + 1]

    traj = funnel.traj
    if dynamics == "taylor":
        fields = _certification_fields(system, funnel)

        def rhs(t, Xb):
            k = min(int(np.searchsorted(times, t, side="right") - 1), N - 2)
            k = max(k, 0)
            vals = fields[k](Xb)  # (batch, n + n*m)
            a = vals[:, :n]
            G = vals[:, n:].reshape(-1, n, m) if m else None
            du = u_dev(t, Xb) if m else None
            if m:
                u_tot = traj.u0(t)[None, :] + du
                if u_min is not None:
                    u_tot = np.clip(u_tot, u_min, u_max)
                u_arg = u_tot - traj.inputs[k][None, :]
                return a + np.einsum("bij,bj->bi", G, u_arg)
            return a
    else:
        def rhs(t, Xb):
            x_abs = Xb + traj.x0(t)[None, :]
            if m:
                du = u_dev(t, Xb)
                u_tot = traj.u0(t)[None, :] + du
                if u_min is not None:
                    u_tot = np.clip(u_tot, u_min, u_max)
            else:
                u_tot = np.zeros((Xb.shape[0], 0))
            xdot = system.dynamics(x_abs, u_tot)
            # deviation derivative uses the interpolant slope of the nominal
            eps = 1e-6 * max(1.0, times[-1] - times[0])
            x0dot = (traj.x0(min(t + eps, times[-1])) - traj.x0(max(t - eps, times[0]))) \
                / (min(t + eps, times[-1]) - max(t - eps, times[0]))
            return xdot - x0dot[None, :]

    steps = max(1, int(round((times[-1] - times[0]) / dt)))
    dt = (times[-1] - times[0]) / steps
    Xb = samples.copy()
    t = float(times[0])
    excess = np.full(trials, -np.inf)
    first_violation_time = np.full(trials, np.nan)
    for k in range(steps + 1):
        Vv = V_interp(t, Xb)
        rr = rho_interp(t)
        e = (Vv - rr) / max(rr, 1e-300)
        newly = (e > margin) & ~np.isfinite(first_violation_time)
        first_violation_time[newly] = t
        excess = np.maximum(excess, e)
        if k == steps:
            break
        k1 = rhs(t, Xb)
        k2 = rhs(t + dt / 2, Xb + dt / 2 * k1)
        k3 = rhs(t + dt / 2, Xb + dt / 2 * k2)
        k4 = rhs(t + dt, Xb + dt * k3)
        Xb = Xb + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = float(times[0]) + (k + 1) * dt

    violations = [
        {"trial": int(i), "time": float(first_violation_time[i]),
         "max_excess": float(excess[i])}
        for i in range(trials) if np.isfinite(first_violation_time[i])
    ]
    return {
        "trials": int(trials),
        "seed": int(seed),
        "dynamics": dynamics,
        "margin": float(margin),
        "violation_count": len(violations),
        "violations": violations,
        "per_trial_max_excess": [float(v) for v in excess],
    }


def project_funnel(funnel: Funnel, coords: tuple[int, int],
                   times: np.ndarray | list) -> list[dict]:
    """Exact 2-D projections of quadratic funnel cross-sections.

    Each record holds the absolute-center, semi-axes, and orientation of the
    projected ellipse at one time.  Degree > 2 V is rejected (use a
    sampling-based outline instead).
    """
    i, j = coords
    xs = funnel.state_vars()
    out = []
    for t in np.asarray(times, dtype=float):
        Vt = funnel.V_at(float(t))
        if Vt.degree() > 2:
            raise ValueError("projection needs quadratic V; sample an outline "
                             "for higher-degree funnels")
        P, q, c = Vt.quadratic_form(xs)
        rho = funnel.rho_at(float(t))
        center_dev = -0.5 * np.linalg.solve(P, q)
        level = rho - c + center_dev @ P @ center_dev
        if level <= 0:
            out.append({"t": float(t), "empty": True})
            continue
        Pinv = np.linalg.inv(P)
        shape2 = np.linalg.inv(Pinv[np.ix_([i, j], [i, j])]) / level
        w, Vecs = np.linalg.eigh(shape2)
        axes = 1.0 / np.sqrt(w)
        angle = float(np.arctan2(Vecs[1, 0], Vecs[0, 0]))
        center_abs = funnel.traj.x0(float(t)) + center_dev
        out.append({
            "t": float(t), "empty": False,
            "cx": float(center_abs[i]), "cy": float(center_abs[j]),
            "a": float(axes[0]), "b": float(axes[1]), "angle": angle,
        })
    return out


# -- plot-data CSV export ----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def export_plot_data(data: dict, out_dir: str) -> list[str]:
    """Write CSV series into out_dir; returns the files written.

    Recognized keys:
      "v_traces": (times, traces[ntrial, ntime]) -> v_traces.csv with a time
          column followed by one column per trace;
      "trajectory": (times, states[ntime, n]) -> trajectory.csv;
      "ellipses": list of project_funnel records -> ellipses.csv;
      "rho": (times, rho values) -> rho.csv.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    if "v_traces" in data:
        times, traces = data["v_traces"]
        traces = np.atleast_2d(np.asarray(traces, dtype=float))
        with open(path("v_traces.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(["t"] + [f"trial{k}" for k in range(traces.shape[0])]) + "\n")
            for r, t in enumerate(times):
                fh.write(",".join([_fmt(t)] + [_fmt(traces[k, r])
                                               for k in range(traces.shape[0])]) + "\n")
    if "trajectory" in data:
        times, states = data["trajectory"]
        states = np.atleast_2d(np.asarray(states, dtype=float))
        with open(path("trajectory.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(["t"] + [f"x{k}" for k in range(states.shape[1])]) + "\n")
            for r, t in enumerate(times):
                fh.write(",".join([_fmt(t)] + [_fmt(v) for v in states[r]]) + "\n")
    if "rho" in data:
        times, rho = data["rho"]
        with open(path("rho.csv"), "w", encoding="utf-8") as fh:
            fh.write("t,rho\n")
            for t, r in zip(times, rho):
                fh.write(f"{_fmt(t)},{_fmt(r)}\n")
    if "ellipses" in data:
        with open(path("ellipses.csv"), "w", encoding="utf-8") as fh:
            fh.write("t,empty,cx,cy,a,b,angle\n")
            for rec in data["ellipses"]:
                if rec.get("empty"):
                    fh.write(f"{_fmt(rec['t'])},1,,,,,\n")
                else:
                    fh.write(",".join([_fmt(rec["t"]), "0", _fmt(rec["cx"]),
                                       _fmt(rec["cy"]), _fmt(rec["a"]),
                                       _fmt(rec["b"]), _fmt(rec["angle"])]) + "\n")
    return written


def load_csv(path: str) -> tuple[list[str], np.ndarray]:
    """Parse a CSV written by export_plot_data back into (header, array)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        rows.append([float(v) if v != "" else np.nan for v in ln.split(",")])
    return header, np.array(rows)


def write_report(report: dict, path: str):
    """Deterministic JSON report (sorted keys, fixed separators)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
