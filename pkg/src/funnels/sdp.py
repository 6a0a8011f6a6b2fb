"""Dense semidefinite programming for block-structured problems.

Problems are stated as

    maximize   <C, X> + d'f
    subject to <A_j, X> + F_j'f = b_j   (j = 1..m)
               X  block-diagonal PSD,  f free

with symmetric coefficient matrices.  The solver is a primal-dual
path-following interior point method with Nesterov-Todd scaling and
Mehrotra-style predictor-corrector steps, run on the homogeneous self-dual
embedding so that infeasibility is detected with a certificate instead of by
divergence.  Free scalar variables are carried natively in the KKT system.

Everything is dense numpy; the intended problem sizes are blocks up to about
60x60 and up to a couple thousand equality constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

_SQRT2 = np.sqrt(2.0)


def _svec_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def svec(M: np.ndarray) -> np.ndarray:
    """Isometric vectorization of a symmetric matrix (off-diagonals x sqrt2)."""
    n = M.shape[0]
    iu = np.triu_indices(n)
    v = M[iu].copy()
    v[iu[0] != iu[1]] *= _SQRT2
    return v


def smat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of svec."""
    M = np.zeros((n, n))
    iu = np.triu_indices(n)
    vals = v.copy()
    off = iu[0] != iu[1]
    vals[off] /= _SQRT2
    M[iu] = vals
    M.T[iu] = vals
    return M


def _svec_batch(T: np.ndarray) -> np.ndarray:
    """svec applied along the last two axes of a (k, n, n) array -> (k, svdim)."""
    n = T.shape[-1]
    iu = np.triu_indices(n)
    out = T[:, iu[0], iu[1]].copy()
    out[:, iu[0] != iu[1]] *= _SQRT2
    return out


@dataclass
class SolverOptions:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    eig_tol: float = 1e-9
    max_iters: int = 200
    # declare infeasible/unbounded only when the certificate passes at this tol
    cert_tol: float = 1e-7
    verbose: bool = False


@dataclass
class SdpSolution:
    status: str  # optimal | infeasible | unbounded | stalled
    block_values: list[np.ndarray]
    free_values: np.ndarray
    objective_value: float
    residuals: dict[str, float]
    iterations: int
    certificate: dict | None = None
    trace: list[tuple] = field(default_factory=list)


class SdpProblem:
    """Block-structured SDP in equality form; see module docstring.

    Equality coefficients are given as upper-triangle entries (i <= j) of
    symmetric matrices: an entry (block, i, j, v) with i != j stands for both
    A_ij = A_ji = v, contributing 2*v*X_ij to the functional.
    """

    def __init__(self):
        self.block_dims: list[int] = []
        self.n_free: int = 0
        self._eq_block_entries: list[list[tuple[int, int, int, float]]] = []
        self._eq_free_entries: list[list[tuple[int, float]]] = []
        self._rhs: list[float] = []
        self._obj_block_entries: list[tuple[int, int, int, float]] = []
        self._obj_free_entries: list[tuple[int, float]] = []

    # -- construction ----------------------------------------------------------

    def add_block(self, dim: int) -> int:
        if dim < 1:
            raise ValueError("block dimension must be >= 1")
        self.block_dims.append(dim)
        return len(self.block_dims) - 1

    def add_free(self, count: int = 1) -> int:
        first = self.n_free
        self.n_free += count
        return first

    def _check_entries(self, block_entries, free_entries):
        for bi, i, j, _ in block_entries:
            if not (0 <= bi < len(self.block_dims)):
                raise IndexError(f"unknown block {bi}")
            n = self.block_dims[bi]
            if not (0 <= i <= j < n):
                raise IndexError(f"entry ({i},{j}) outside upper triangle of {n}x{n} block")
        for k, _ in free_entries:
            if not (0 <= k < self.n_free):
                raise IndexError(f"unknown free variable {k}")

    def add_equality(self, rhs: float, block_entries=(), free_entries=()) -> int:
        block_entries = [(int(b), int(i), int(j), float(v)) for b, i, j, v in block_entries]
        free_entries = [(int(k), float(v)) for k, v in free_entries]
        self._check_entries(block_entries, free_entries)
        self._eq_block_entries.append(block_entries)
        self._eq_free_entries.append(free_entries)
        self._rhs.append(float(rhs))
        return len(self._rhs) - 1

    def set_objective(self, block_entries=(), free_entries=()):
        """Objective to MAXIMIZE."""
        block_entries = [(int(b), int(i), int(j), float(v)) for b, i, j, v in block_entries]
        free_entries = [(int(k), float(v)) for k, v in free_entries]
        self._check_entries(block_entries, free_entries)
        self._obj_block_entries = block_entries
        self._obj_free_entries = free_entries

    @property
    def n_eq(self) -> int:
        return len(self._rhs)

    # -- assembled arrays -------------------------------------------------------

    def _svec_layout(self):
        dims = self.block_dims
        svdims = [n * (n + 1) // 2 for n in dims]
        offsets = np.concatenate([[0], np.cumsum(svdims)]).astype(int)
        return svdims, offsets

    def _entry_to_svec(self, bi, i, j, v, offsets):
        n = self.block_dims[bi]
        idx = i * n - i * (i - 1) // 2 + (j - i)
        return offsets[bi] + idx, v * (_SQRT2 if i != j else 1.0)

    def build_arrays(self):
        """Return (A csr, F csr, b, c_sv, c_f) with the maximize objective."""
        svdims, offsets = self._svec_layout()
        sv_total = int(offsets[-1])
        m = self.n_eq
        rows, cols, vals = [], [], []
        frows, fcols, fvals = [], [], []
        for r in range(m):
            for bi, i, j, v in self._eq_block_entries[r]:
                cidx, cval = self._entry_to_svec(bi, i, j, v, offsets)
                rows.append(r)
                cols.append(cidx)
                vals.append(cval)
            for k, v in self._eq_free_entries[r]:
                frows.append(r)
                fcols.append(k)
                fvals.append(v)
        A = scipy.sparse.csr_matrix(
            (vals, (rows, cols)), shape=(m, sv_total))
        A.sum_duplicates()
        F = scipy.sparse.csr_matrix(
            (fvals, (frows, fcols)), shape=(m, self.n_free))
        F.sum_duplicates()
        b = np.array(self._rhs, dtype=float)
        c_sv = np.zeros(sv_total)
        for bi, i, j, v in self._obj_block_entries:
            cidx, cval = self._entry_to_svec(bi, i, j, v, offsets)
            c_sv[cidx] += cval
        c_f = np.zeros(self.n_free)
        for k, v in self._obj_free_entries:
            c_f[k] += v
        return A, F, b, c_sv, c_f


def _nt_scaling(X: np.ndarray, S: np.ndarray):
    """Nesterov-Todd scaling with diagonal scaled point.

    Returns (R, lam) with R^{-1} X R^{-T} = R^T S R = diag(lam).
    """
    Lx = np.linalg.cholesky(X)
    Ls = np.linalg.cholesky(S)
    U, sig, Vt = np.linalg.svd(Ls.T @ Lx)
    sig = np.maximum(sig, 1e-300)
    d = 1.0 / np.sqrt(sig)
    R = Lx @ Vt.T * d  # columns scaled by sig^{-1/2}
    return R, sig


def _max_step(lam: np.ndarray, D: np.ndarray) -> float:
    """Largest alpha with diag(lam) + alpha*D >= 0 (D symmetric, scaled space)."""
    rs = 1.0 / np.sqrt(lam)
    N = rs[:, None] * D * rs[None, :]
    emin = float(np.linalg.eigvalsh(N)[0])
    if emin >= 0.0:
        return np.inf
    return 1.0 / (-emin)


class _Workspace:
    """Per-solve precomputed structure for the IPM."""

    def __init__(self, prob: SdpProblem, A, F, b, c_sv, c_f, row_scale):
        self.dims = list(prob.block_dims)
        self.svdims, self.offsets = prob._svec_layout()
        self.A = A
        self.AT = A.T.tocsr()
        self.F = F
        self.FT = F.T.tocsr()
        self.F_dense = np.asarray(F.todense())
        self.b = b
        self.c = c_sv
        self.cf = c_f
        self.row_scale = row_scale
        self.m = A.shape[0]
        self.p = F.shape[1]
        self.nu = sum(self.dims)
        # per-block dense constraint data for Schur assembly
        self.block_rows: list[np.ndarray] = []
        self.block_A_dense: list[np.ndarray] = []
        self.block_A_mats: list[np.ndarray] = []
        A_csc = A.tocsc()
        for bi, n in enumerate(self.dims):
            lo, hi = self.offsets[bi], self.offsets[bi + 1]
            sub = A_csc[:, lo:hi].tocsr()
            rows = np.unique(sub.nonzero()[0])
            self.block_rows.append(rows)
            dense = np.asarray(sub[rows].todense())
            self.block_A_dense.append(dense)
            iu = np.triu_indices(n)
            mats = np.zeros((len(rows), n, n))
            vals = dense.copy()
            off = iu[0] != iu[1]
            vals[:, off] /= _SQRT2
            mats[:, iu[0], iu[1]] = vals
            mats[:, iu[1], iu[0]] = vals
            self.block_A_mats.append(mats)

    def split(self, v: np.ndarray) -> list[np.ndarray]:
        return [v[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.dims))]


def solve(prob: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve the SDP; see module docstring for the model and method."""
    opts = opts or SolverOptions()
    A, F, b, c_max_sv, c_max_f = prob.build_arrays()

    # Row equilibration: unit inf-norm rows keep the KKT system well scaled.
    m = A.shape[0]
    row_scale = np.ones(m)
    for r in range(m):
        nrm = 0.0
        if A.indptr[r] < A.indptr[r + 1]:
            nrm = max(nrm, np.max(np.abs(A.data[A.indptr[r]:A.indptr[r + 1]])))
        if F.indptr[r] < F.indptr[r + 1]:
            nrm = max(nrm, np.max(np.abs(F.data[F.indptr[r]:F.indptr[r + 1]])))
        row_scale[r] = nrm if nrm > 0 else 1.0
    D_r = scipy.sparse.diags(1.0 / row_scale)
    A_s = (D_r @ A).tocsr()
    F_s = (D_r @ F).tocsr()
    b_s = b / row_scale

    # Internal convention: minimize c.x, so negate the maximize objective.
    c_sv = -c_max_sv
    c_f = -c_max_f

    if not prob.block_dims:
        return _solve_free_only(prob, F_s, b_s, c_f, row_scale, opts)
    if m == 0:
        return _solve_no_equalities(prob, c_max_sv, c_max_f, opts)

    ws = _Workspace(prob, A_s, F_s, b_s, c_sv, c_f, row_scale)
    return _ipm(prob, ws, opts, orig=(A, F, b, c_max_sv, c_max_f))


def _solve_no_equalities(prob, c_max_sv, c_max_f, opts) -> SdpSolution:
    """No equality constraints: the maximum is 0 at X=0, f=0 unless a direction
    of objective increase exists, in which case the problem is unbounded."""
    svdims, offsets = prob._svec_layout()
    if np.max(np.abs(c_max_f), initial=0.0) > 0:
        ray = np.sign(c_max_f)
        return SdpSolution("unbounded", [np.zeros((n, n)) for n in prob.block_dims],
                           np.zeros(prob.n_free), np.nan,
                           {"primal": 0.0, "dual": np.inf, "gap": np.inf}, 0,
                           certificate={"free_ray": ray})
    for bi, n in enumerate(prob.block_dims):
        C = smat(c_max_sv[offsets[bi]:offsets[bi + 1]], n)
        w, V = np.linalg.eigh(C)
        if w[-1] > opts.eig_tol:
            ray = np.outer(V[:, -1], V[:, -1])
            blocks = [np.zeros((d, d)) for d in prob.block_dims]
            blocks[bi] = ray
            return SdpSolution("unbounded", blocks, np.zeros(prob.n_free), np.nan,
                               {"primal": 0.0, "dual": np.inf, "gap": np.inf}, 0,
                               certificate={"x_blocks": blocks})
    return SdpSolution("optimal", [np.zeros((n, n)) for n in prob.block_dims],
                       np.zeros(prob.n_free), 0.0,
                       {"primal": 0.0, "dual": 0.0, "gap": 0.0}, 0)


def _solve_free_only(prob, F, b, c_f, row_scale, opts) -> SdpSolution:
    """Degenerate path: no PSD blocks, just linear equalities in free vars."""
    Fd = np.asarray(F.todense()) if scipy.sparse.issparse(F) else np.asarray(F)
    m, p = Fd.shape
    if m == 0 and p == 0:
        return SdpSolution("optimal", [], np.zeros(0), 0.0,
                           {"primal": 0.0, "dual": 0.0, "gap": 0.0}, 0)
    if p == 0:
        if np.max(np.abs(b), initial=0.0) <= opts.feas_tol:
            return SdpSolution("optimal", [], np.zeros(0), 0.0,
                               {"primal": float(np.max(np.abs(b), initial=0.0)),
                                "dual": 0.0, "gap": 0.0}, 0)
        ray = b / np.linalg.norm(b)
        return SdpSolution("infeasible", [], np.zeros(0), np.nan,
                           {"primal": np.inf, "dual": 0.0, "gap": np.inf}, 0,
                           certificate={"y": ray / max(ray @ b, 1e-300) / row_scale})
    xf, _, _, _ = np.linalg.lstsq(Fd, b, rcond=None)
    res = Fd @ xf - b
    if np.max(np.abs(res), initial=0.0) > opts.feas_tol * (1.0 + np.max(np.abs(b), initial=0.0)):
        y = res / max(res @ b, 1e-300)
        return SdpSolution("infeasible", [], xf, np.nan,
                           {"primal": float(np.max(np.abs(res))), "dual": 0.0, "gap": np.inf},
                           0, certificate={"y": y / row_scale})
    # bounded iff c_f lies in the row space of F
    w, _, _, _ = np.linalg.lstsq(Fd.T, c_f, rcond=None)
    ray = c_f - Fd.T @ w
    if np.linalg.norm(ray) > opts.feas_tol * (1.0 + np.linalg.norm(c_f)):
        d = -ray / np.linalg.norm(ray)  # descent direction for min c.x
        return SdpSolution("unbounded", [], xf, np.nan,
                           {"primal": 0.0, "dual": np.inf, "gap": np.inf}, 0,
                           certificate={"free_ray": d})
    obj = float(-c_f @ xf)  # back to maximize sign
    return SdpSolution("optimal", [], xf, obj,
                       {"primal": float(np.max(np.abs(res), initial=0.0)),
                        "dual": float(np.linalg.norm(ray)), "gap": 0.0}, 0)


def _ipm(prob, ws: _Workspace, opts: SolverOptions, orig) -> SdpSolution:
    A, F, b, c, cf = ws.A, ws.F, ws.b, ws.c, ws.cf
    A_orig, F_orig, b_orig, cmax_orig, cmaxf_orig = orig
    m, p, nu = ws.m, ws.p, ws.nu
    dims = ws.dims

    X = [np.eye(n) for n in dims]
    S = [np.eye(n) for n in dims]
    xf = np.zeros(p)
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0

    norm_b = 1.0 + np.linalg.norm(b_orig)
    norm_c_inf = 1.0 + max(np.max(np.abs(cmax_orig), initial=0.0),
                           np.max(np.abs(cmaxf_orig), initial=0.0))
    trace_log: list[tuple] = []
    status = "stalled"
    certificate = None
    residuals = {"primal": np.inf, "dual": np.inf, "gap": np.inf}
    small_steps = 0
    it = 0
    best_merit = np.inf
    best_state = None  # (X, S, xf, y, tau, kappa, pres, dres, relgap)
    stagnant = 0

    def pack(blocks):
        return np.concatenate([svec(B) for B in blocks]) if blocks else np.zeros(0)

    for it in range(1, opts.max_iters + 1):
        x_sv = pack(X)
        s_sv = pack(S)
        # residuals of the self-dual embedding (minimize form)
        res1 = -(A @ x_sv + F @ xf - b * tau)
        res2 = -(-(ws.AT @ y) + c * tau - s_sv)
        res3 = -(-(ws.FT @ y) + cf * tau)
        res4 = -(float(b @ y - c @ x_sv - cf @ xf) - kappa)
        xs = float(x_sv @ s_sv)
        mu = (xs + tau * kappa) / (nu + 1)

        # -- stopping tests on the original (unscaled, maximize) problem -----
        # Residuals are checked per constraint (inf-norm, relative), matching
        # the independent verification done by check_solution.
        xs_orig = x_sv / tau
        xf_orig = xf / tau
        y_orig = (y / tau) / ws.row_scale
        s_orig = s_sv / tau
        p_rows = np.abs(A_orig @ xs_orig + F_orig @ xf_orig - b_orig)
        pres = float(np.max(p_rows / (1.0 + np.abs(b_orig)), initial=0.0))
        d_rows = np.abs(-(A_orig.T @ y_orig) + (-cmax_orig) - s_orig)
        dres = float(np.max(d_rows, initial=0.0))
        if p:
            dres = max(dres, float(np.max(np.abs(-(F_orig.T @ y_orig) + (-cmaxf_orig)),
                                          initial=0.0)))
        dres /= norm_c_inf
        pobj_min = float((-cmax_orig) @ xs_orig + (-cmaxf_orig) @ xf_orig)
        dobj_min = float(b_orig @ y_orig)
        gap = xs / tau ** 2
        relgap = gap / (1.0 + abs(pobj_min) + abs(dobj_min))
        trace_log.append((it, mu, pres, dres, relgap, tau, kappa))
        if opts.verbose:
            print(f"  it {it:3d}  mu {mu:9.2e}  pres {pres:8.1e}  dres {dres:8.1e}"
                  f"  gap {relgap:8.1e}  tau {tau:7.1e}")

        merit = max(pres / opts.feas_tol, dres / opts.feas_tol, relgap / opts.gap_tol)
        if merit < 0.99 * best_merit:
            stagnant = 0
        else:
            stagnant += 1
        if merit < best_merit:
            best_merit = merit
            best_state = ([Xb.copy() for Xb in X], [Sb.copy() for Sb in S],
                          xf.copy(), y.copy(), tau, kappa,
                          float(pres), float(dres), float(relgap))
        if pres <= opts.feas_tol and dres <= opts.feas_tol and relgap <= opts.gap_tol:
            status = "optimal"
            residuals = {"primal": float(pres), "dual": float(dres), "gap": float(relgap)}
            break
        if stagnant >= 8:
            break  # no measurable progress; report the best iterate

        # -- infeasibility certificates --------------------------------------
        y_unscaled = y / ws.row_scale
        by_ray = float(b_orig @ y_unscaled)
        if by_ray > 0:
            yc = y_unscaled / by_ray
            sc = -(A_orig.T @ yc)
            eig_ok = all(
                np.linalg.eigvalsh(smat(sb, n))[0] >= -opts.cert_tol
                for sb, n in zip(ws.split(sc), dims) if n > 0
            )
            free_ok = (p == 0) or (np.max(np.abs(F_orig.T @ yc), initial=0.0)
                                   <= opts.cert_tol * (1.0 + np.linalg.norm(yc)))
            if eig_ok and free_ok and tau <= 1e-4 * max(1.0, kappa):
                status = "infeasible"
                certificate = {"y": yc}
                residuals = {"primal": np.inf, "dual": float(dres), "gap": np.inf}
                break
        obj_ray = float((-cmax_orig) @ x_sv + (-cmaxf_orig) @ xf)
        if obj_ray < 0:
            scale = -obj_ray
            xc = x_sv / scale
            xfc = xf / scale
            lin_ok = np.linalg.norm(A_orig @ xc + F_orig @ xfc) <= opts.cert_tol * (
                1.0 + np.linalg.norm(xc))
            if lin_ok and tau <= 1e-4 * max(1.0, kappa):
                status = "unbounded"
                certificate = {"x_blocks": [smat(v, n) for v, n in zip(ws.split(xc), dims)],
                               "free_ray": xfc}
                residuals = {"primal": float(pres), "dual": np.inf, "gap": np.inf}
                break

        # -- Nesterov-Todd scaling -------------------------------------------
        try:
            Rs, lams = [], []
            for Xb, Sb in zip(X, S):
                R, lam = _nt_scaling(Xb, Sb)
                Rs.append(R)
                lams.append(lam)
        except np.linalg.LinAlgError:
            break

        Ws = [R @ R.T for R in Rs]

        # Schur complement M = A W A' and related quantities.
        M = np.zeros((m, m))
        Wc_sv = np.zeros_like(c)
        for bi, n in enumerate(dims):
            W = Ws[bi]
            rows = ws.block_rows[bi]
            if len(rows):
                T = W @ ws.block_A_mats[bi] @ W
                At = _svec_batch(T)
                M[np.ix_(rows, rows)] += ws.block_A_dense[bi] @ At.T
            lo, hi = ws.offsets[bi], ws.offsets[bi + 1]
            Wc_sv[lo:hi] = svec(W @ smat(c[lo:hi], n) @ W)
        M = 0.5 * (M + M.T)
        u_c = A @ Wc_sv
        gamma = float(c @ Wc_sv)

        K = np.zeros((m + p, m + p))
        K[:m, :m] = M
        if p:
            K[:m, m:] = ws.F_dense
            K[m:, :m] = ws.F_dense.T
        delta0 = 1e-11 * max(1.0, float(np.max(np.abs(np.diag(M)), initial=0.0)))

        lu = None

        def refactor(delta):
            Kreg = K.copy()
            Kreg[np.arange(m), np.arange(m)] += delta
            if p:
                Kreg[np.arange(m, m + p), np.arange(m, m + p)] -= delta
            return scipy.linalg.lu_factor(Kreg)

        def ksolve(rhs):
            z = scipy.linalg.lu_solve(lu, rhs)
            # refinement passes against the unregularized matrix
            z += scipy.linalg.lu_solve(lu, rhs - K @ z)
            z += scipy.linalg.lu_solve(lu, rhs - K @ z)
            return z

        def wop(v_sv):
            out = np.empty_like(v_sv)
            for bi, n in enumerate(dims):
                lo, hi = ws.offsets[bi], ws.offsets[bi + 1]
                out[lo:hi] = svec(Ws[bi] @ smat(v_sv[lo:hi], n) @ Ws[bi])
            return out

        def direction(R1, R2, R3, R4, Dmats, Rkappa, refine=2):
            Dt = [2.0 * D / (lam[:, None] + lam[None, :]) for D, lam in zip(Dmats, lams)]
            e_D = np.concatenate([svec(R @ Dt_b @ R.T) for R, Dt_b in zip(Rs, Dt)])
            WR2 = wop(R2)
            rhs_top = R1 - A @ (e_D + WR2)
            g2 = ksolve(np.concatenate([rhs_top, -R3]))
            R4p = R4 + float(c @ e_D) + float(Wc_sv @ R2) + Rkappa / tau
            denom = float((b - u_c) @ g1[:m]) - float(cf @ g1[m:]) + gamma + kappa / tau
            if not np.isfinite(denom) or abs(denom) < 1e-300:
                raise FloatingPointError("singular tau pivot")
            dtau = (R4p - float((b - u_c) @ g2[:m]) + float(cf @ g2[m:])) / denom
            dy = g2[:m] + dtau * g1[:m]
            dxf = g2[m:] + dtau * g1[m:]
            ds = -(ws.AT @ dy) + c * dtau - R2
            dx = e_D - wop(ds)
            dkappa = (Rkappa - kappa * dtau) / tau
            if refine > 0:
                # Residual-correct the direction: the Schur-complement route
                # loses accuracy in eq. (1) once the scaling gets extreme.
                E1 = R1 - (A @ dx + F @ dxf - b * dtau)
                E3 = R3 - (-(ws.FT @ dy) + cf * dtau)
                E4 = R4 - (float(b @ dy - c @ dx - cf @ dxf) - dkappa)
                err = max(np.max(np.abs(E1), initial=0.0),
                          np.max(np.abs(E3), initial=0.0), abs(E4))
                scale = max(np.max(np.abs(R1), initial=0.0), abs(R4), mu, 1e-12)
                if err > 1e-11 * scale:
                    zeros_sv = np.zeros_like(R2)
                    zeros_D = [np.zeros((len(lam), len(lam))) for lam in lams]
                    corr = direction(E1, zeros_sv, E3, E4, zeros_D, 0.0,
                                     refine=refine - 1)
                    dx = dx + corr[0]
                    dxf = dxf + corr[1]
                    dy = dy + corr[2]
                    dtau = dtau + corr[3]
                    ds = ds + corr[4]
                    dkappa = dkappa + corr[5]
            # scaled directions for the line search and corrector; the
            # refinement preserves du + dv = Lop^{-1}(D), so du follows from dv
            dv = [R.T @ smat(dsb, n) @ R
                  for R, dsb, n in zip(Rs, ws.split(ds), dims)]
            du = [Dtb - dvb for Dtb, dvb in zip(Dt, dv)]
            return dx, dxf, dy, dtau, ds, dkappa, du, dv

        def cone_step(du, dv, dtau, dkappa):
            amax = np.inf
            for lam, dub, dvb in zip(lams, du, dv):
                amax = min(amax, _max_step(lam, dub), _max_step(lam, dvb))
            if dtau < 0:
                amax = min(amax, tau / -dtau)
            if dkappa < 0:
                amax = min(amax, kappa / -dkappa)
            return amax

        def _finite(direction_tuple):
            dx_, dxf_, dy_, dtau_, ds_, dkap_ = direction_tuple[:6]
            return (np.all(np.isfinite(dx_)) and np.all(np.isfinite(ds_))
                    and np.all(np.isfinite(dy_)) and np.isfinite(dtau_)
                    and np.isfinite(dkap_) and np.all(np.isfinite(dxf_)))

        # Predictor and corrector, re-trying with stronger regularization if
        # the KKT factorization has gone numerically singular.
        comb = None
        delta = delta0
        for _attempt in range(3):
            try:
                lu = refactor(delta)
                g1 = ksolve(np.concatenate([u_c + b, cf]))
                D_aff = [np.diag(-lam ** 2) for lam in lams]
                aff = direction(res1, res2, res3, res4, D_aff, -tau * kappa)
                if not _finite(aff):
                    raise FloatingPointError("non-finite predictor")
                dx_a, dxf_a, dy_a, dtau_a, ds_a, dkap_a, du_a, dv_a = aff
                alpha_aff = min(1.0, 0.99 * cone_step(du_a, dv_a, dtau_a, dkap_a))
                x_aff = x_sv + alpha_aff * dx_a
                s_aff = s_sv + alpha_aff * ds_a
                mu_aff = (float(x_aff @ s_aff)
                          + (tau + alpha_aff * dtau_a)
                          * (kappa + alpha_aff * dkap_a)) / (nu + 1)
                sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))
                D_comb = [sigma * mu * np.eye(len(lam)) - np.diag(lam ** 2)
                          - 0.5 * (dub @ dvb + dvb @ dub)
                          for lam, dub, dvb in zip(lams, du_a, dv_a)]
                Rk_comb = sigma * mu - tau * kappa - dtau_a * dkap_a
                cand = direction((1 - sigma) * res1, (1 - sigma) * res2,
                                 (1 - sigma) * res3, (1 - sigma) * res4,
                                 D_comb, Rk_comb)
                if not _finite(cand):
                    raise FloatingPointError("non-finite corrector")
                comb = cand
                break
            except (FloatingPointError, np.linalg.LinAlgError, ValueError):
                delta *= 1e4
        if comb is None:
            break
        dx_c, dxf_c, dy_c, dtau_c, ds_c, dkap_c, du_c, dv_c = comb
        alpha = min(1.0, 0.99 * cone_step(du_c, dv_c, dtau_c, dkap_c))

        # Step safeguard: back off until both cones accept the step (the 0.99
        # boundary factor is not airtight in floating point) and the
        # complementarity measure does not blow up, which otherwise happens on
        # feasibility problems whose dual slack degenerates to zero.
        accepted = False
        for _ in range(40):
            Xn, Sn = [], []
            ok = True
            for bi, n in enumerate(dims):
                lo, hi = ws.offsets[bi], ws.offsets[bi + 1]
                Xb = X[bi] + alpha * smat(dx_c[lo:hi], n)
                Sb = S[bi] + alpha * smat(ds_c[lo:hi], n)
                Xb = 0.5 * (Xb + Xb.T)
                Sb = 0.5 * (Sb + Sb.T)
                try:
                    np.linalg.cholesky(Xb)
                    np.linalg.cholesky(Sb)
                except np.linalg.LinAlgError:
                    ok = False
                    break
                Xn.append(Xb)
                Sn.append(Sb)
            taun = tau + alpha * dtau_c
            kapn = kappa + alpha * dkap_c
            if ok and np.isfinite(taun) and np.isfinite(kapn) and taun > 0 and kapn > 0:
                mu_new = (float((x_sv + alpha * dx_c) @ (s_sv + alpha * ds_c))
                          + taun * kapn) / (nu + 1)
                if np.isfinite(mu_new) and mu_new <= mu * 1.001:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted or alpha < 1e-10:
            break
        if alpha < 1e-7:
            small_steps += 1
            if small_steps >= 3:
                break
        else:
            small_steps = 0
        X, S = Xn, Sn
        xf = xf + alpha * dxf_c
        y = y + alpha * dy_c
        tau, kappa = taun, kapn

    # -- pack the result ---------------------------------------------------------
    if status == "optimal":
        blocks = [0.5 * (Xb / tau + (Xb / tau).T) for Xb in X]
        free = xf / tau
        obj = float(cmax_orig @ np.concatenate([svec(B) for B in blocks])
                    + cmaxf_orig @ free)
        return SdpSolution("optimal", blocks, free, obj, residuals, it,
                           None, trace_log)
    if status in ("infeasible", "unbounded"):
        return SdpSolution(status, [Xb / max(tau, 1e-300) for Xb in X],
                           xf / max(tau, 1e-300), np.nan, residuals, it,
                           certificate, trace_log)
    # Stalled: fall back to the best iterate seen (it may even satisfy the
    # tolerances if the last step degraded an already-converged point).
    if best_state is not None:
        Xb_, Sb_, xf_, y_, tau_, kappa_, pres_, dres_, gap_ = best_state
        blocks = [0.5 * (B / tau_ + (B / tau_).T) for B in Xb_]
        free = xf_ / tau_
        obj = float(cmax_orig @ np.concatenate([svec(B) for B in blocks])
                    + cmaxf_orig @ free)
        stat = "optimal" if (pres_ <= opts.feas_tol and dres_ <= opts.feas_tol
                             and gap_ <= opts.gap_tol) else "stalled"
        return SdpSolution(stat, blocks, free, obj,
                           {"primal": pres_, "dual": dres_, "gap": gap_},
                           it, None, trace_log)
    blocks = [Xb / max(tau, 1e-300) for Xb in X]
    free = xf / max(tau, 1e-300)
    obj = float(cmax_orig @ np.concatenate([svec(B) for B in blocks])
                + cmaxf_orig @ free)
    x_sv = np.concatenate([svec(B) for B in blocks])
    pres = float(np.linalg.norm(A_orig @ x_sv + F_orig @ free - b_orig) / norm_b)
    return SdpSolution("stalled", blocks, free, obj,
                       {"primal": pres, "dual": np.inf, "gap": np.inf},
                       it, None, trace_log)


@dataclass
class SolutionReport:
    passed: bool
    eig_failures: list[tuple[int, float]]
    eq_failures: list[tuple[int, float]]
    min_eigs: list[float]
    max_eq_residual: float


def check_solution(prob: SdpProblem, sol: SdpSolution, feas_tol: float = 1e-6,
                   eig_tol: float = 1e-7) -> SolutionReport:
    """Independently recompute eigenvalue floors and equality residuals."""
    min_eigs = []
    eig_failures = []
    for bi, B in enumerate(sol.block_values):
        emin = float(np.linalg.eigvalsh(0.5 * (B + B.T))[0]) if B.size else 0.0
        min_eigs.append(emin)
        if emin < -eig_tol:
            eig_failures.append((bi, emin))
    eq_failures = []
    max_res = 0.0
    for r in range(prob.n_eq):
        total = 0.0
        for bi, i, j, v in prob._eq_block_entries[r]:
            B = sol.block_values[bi]
            total += v * B[i, j] + (v * B[j, i] if i != j else 0.0)
        for k, v in prob._eq_free_entries[r]:
            total += v * sol.free_values[k]
        res = abs(total - prob._rhs[r])
        scale = 1.0 + abs(prob._rhs[r])
        max_res = max(max_res, res / scale)
        if res > feas_tol * scale:
            eq_failures.append((r, res))
    return SolutionReport(not eig_failures and not eq_failures,
                          eig_failures, eq_failures, min_eigs, max_res)


def write_sdpa(prob: SdpProblem, path: str):
    """Dump the problem in sparse SDPA format for external cross-checking.

    Field ordering is fixed: constraints in insertion order; within a matrix,
    entries sorted by (block, i, j).  Free variables are encoded as the
    difference of paired entries in a trailing diagonal block (documented in
    the README), since the .dat-s format has no native free variables.
    Values are written with 17 significant digits.
    """
    nblocks = len(prob.block_dims) + (1 if prob.n_free else 0)
    lines = [f"{prob.n_eq} = mDIM", f"{nblocks} = nBLOCK"]
    dims = [str(d) for d in prob.block_dims]
    if prob.n_free:
        dims.append(str(-2 * prob.n_free))  # negative = diagonal block
    lines.append(" ".join(dims) + " = bLOCKsTRUCT")
    lines.append(" ".join(format(v, ".17g") for v in prob._rhs))

    def emit(matno, block_entries, free_entries):
        out = []
        for bi, i, j, v in sorted(block_entries):
            out.append(f"{matno} {bi + 1} {i + 1} {j + 1} {format(v, '.17g')}")
        fb = len(prob.block_dims) + 1
        for k, v in sorted(free_entries):
            out.append(f"{matno} {fb} {2 * k + 1} {2 * k + 1} {format(v, '.17g')}")
            out.append(f"{matno} {fb} {2 * k + 2} {2 * k + 2} {format(-v, '.17g')}")
        return out

    lines.extend(emit(0, prob._obj_block_entries, prob._obj_free_entries))
    for r in range(prob.n_eq):
        lines.extend(emit(r + 1, prob._eq_block_entries[r], prob._eq_free_entries[r]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
