"""Linearization, continuous algebraic Riccati equations, and the backward
Riccati differential equation used to initialize funnel synthesis.

The CARE is solved by the Hamiltonian invariant-subspace method over a dense
eigendecomposition; results are residual-checked.  The Riccati ODE is
integrated backward with fixed-step RK4 (deterministic), interpolating A(t)
and B(t) linearly between knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import taylor
from .poly import Polynomial, Variable


@dataclass
class Linearization:
    """State/input Jacobians sampled along knot times."""

    times: np.ndarray          # (N,)
    A: np.ndarray              # (N, n, n)
    B: np.ndarray              # (N, n, m)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite linearization entries")
        if self.A.shape[0] != len(self.times) or self.B.shape[0] != len(self.times):
            raise ValueError("linearization sample counts inconsistent")

    def interpolate(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        ts = self.times
        if t <= ts[0]:
            return self.A[0], self.B[0]
        if t >= ts[-1]:
            return self.A[-1], self.B[-1]
        k = int(np.searchsorted(ts, t) - 1)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return ((1 - w) * self.A[k] + w * self.A[k + 1],
                (1 - w) * self.B[k] + w * self.B[k + 1])


@dataclass
class RiccatiSolution:
    times: np.ndarray
    S: np.ndarray             # (N, n, n), symmetric PSD at each knot
    K: np.ndarray             # (N, m, n), gains R^{-1} B' S

    def S_at(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.S[0]
        if t >= ts[-1]:
            return self.S[-1]
        k = int(np.searchsorted(ts, t) - 1)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1 - w) * self.S[k] + w * self.S[k + 1]


def linearize(system, x_point, u_point) -> tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians (A, B) of f(x) + g(x)u at a point.

    Works for expression-tree or polynomial dynamics; derivatives come from
    degree-1 truncated jets, not numeric differencing.
    """
    x_point = np.asarray(x_point, dtype=float)
    u_point = np.asarray(u_point, dtype=float)
    n, m = system.n, system.m
    if len(x_point) != n or len(u_point) != m:
        raise ValueError("point dimensions do not match the system")
    center = dict(zip(system.state_vars, x_point))
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i in range(n):
        jet_f = taylor(system.f[i], center, 1)
        row = jet_f
        for k in range(m):
            jet_g = taylor(system.g[i][k], center, 1)
            row = row + jet_g * float(u_point[k])
            B[i, k] = jet_g.constant_term()
        for j, v in enumerate(system.state_vars):
            A[i, j] = row.coefficient(_lin_mono(v))
    return A, B


def _lin_mono(v: Variable):
    from .poly import Monomial
    return Monomial({v: 1})


def linearize_trajectory(system, traj) -> Linearization:
    """Sample (A(t), B(t)) at every knot of a nominal trajectory."""
    As, Bs = [], []
    for i in range(len(traj.times)):
        A, B = linearize(system, traj.states[i], traj.inputs[i])
        As.append(A)
        Bs.append(B)
    return Linearization(traj.times.copy(), np.array(As), np.array(Bs))


def solve_care(A, B, Q, R) -> np.ndarray:
    """Solve A'S + SA - SBR^{-1}B'S + Q = 0 for symmetric PSD S.

    Uses the stable invariant subspace of the Hamiltonian matrix; raises with
    diagnostics when the pair is not stabilizable (wrong stable eigencount or
    residual check failure).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    Rinv = np.linalg.inv(R)
    H = np.block([[A, -B @ Rinv @ B.T], [-Q, -A.T]])
    w, V = np.linalg.eig(H)
    order = np.argsort(w.real)
    stable = [i for i in order if w[i].real < 0]
    if len(stable) != n:
        raise ValueError(
            f"CARE: expected {n} stable Hamiltonian eigenvalues, found {len(stable)}; "
            f"the pair (A, B) is likely not stabilizable (eigs {np.sort(w.real)})")
    Vs = V[:, stable]
    U1 = Vs[:n, :]
    U2 = Vs[n:, :]
    if np.linalg.cond(U1) > 1e12:
        raise ValueError("CARE: stable subspace is degenerate (U1 singular)")
    S = np.real(U2 @ np.linalg.inv(U1))
    S = 0.5 * (S + S.T)
    res = np.linalg.norm(A.T @ S + S @ A - S @ B @ Rinv @ B.T @ S + Q, "fro")
    if res > 1e-8 * max(1.0, np.linalg.norm(S, "fro")):
        raise ValueError(f"CARE: residual {res:.3e} exceeds tolerance")
    return S


def care_gain(A, B, Q, R) -> tuple[np.ndarray, np.ndarray]:
    """Convenience: (S, K) with K = R^{-1} B' S."""
    S = solve_care(A, B, Q, R)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    K = np.linalg.solve(np.atleast_2d(np.asarray(R, dtype=float)), B.T @ S)
    return S, K


def solve_riccati_ode(lin: Linearization, Q, R, S_f, knots=None,
                      substeps: int = 10) -> RiccatiSolution:
    """Integrate -dS/dt = Q - S B R^{-1} B' S + S A + A'S backward from S(T)=S_f.

    Fixed-step RK4 with `substeps` steps per knot interval; S is symmetrized
    after every step.  Returns S and gains at each knot time.
    """
    times = np.asarray(knots if knots is not None else lin.times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    S_f = np.atleast_2d(np.asarray(S_f, dtype=float))
    if np.linalg.eigvalsh(0.5 * (S_f + S_f.T))[0] < -1e-10:
        raise ValueError("final value S_f must be PSD")
    Rinv = np.linalg.inv(R)
    N = len(times)
    S_list = [None] * N
    S = 0.5 * (S_f + S_f.T)
    S_list[N - 1] = S

    def rhs(t, S):
        A, B = lin.interpolate(t)
        # backward equation: dS/dt = -(Q - S B R^{-1} B' S + S A + A' S)
        return -(Q - S @ B @ Rinv @ B.T @ S + S @ A + A.T @ S)

    for k in range(N - 1, 0, -1):
        t1, t0 = times[k], times[k - 1]
        h = (t0 - t1) / substeps  # negative: integrating backward
        t = t1
        for _ in range(substeps):
            k1 = rhs(t, S)
            k2 = rhs(t + h / 2, S + h / 2 * k1)
            k3 = rhs(t + h / 2, S + h / 2 * k2)
            k4 = rhs(t + h, S + h * k3)
            S = S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            S = 0.5 * (S + S.T)
            t += h
            if not np.all(np.isfinite(S)):
                raise ArithmeticError(
                    f"Riccati ODE blew up integrating over [{t0:.6g}, {t1:.6g}]")
        S_list[k - 1] = S

    S_arr = np.array(S_list)
    K_arr = np.empty((N, R.shape[0], S_f.shape[0]))
    for k in range(N):
        _, B = lin.interpolate(times[k])
        K_arr[k] = Rinv @ B.T @ S_arr[k]
    return RiccatiSolution(times, S_arr, K_arr)
