"""Dense semidefinite-program solver for small LMI problems.

Solves  min c'x  subject to  F0_b + sum_i x_i F_bi < 0  over a list of
symmetric constraint blocks, with a Nesterov-Todd primal-dual interior-point
iteration (Mehrotra-style adaptive centering).  A feasibility phase bounds
the best achievable margin, so infeasibility is reported as a phase-1
objective bound rather than a dual ray.

Scale: dense blocks up to ~100 rows and a few hundred scalar variables; no
sparsity exploitation beyond per-constraint coefficient storage.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

DEFAULT_VAR_CAP = 500
DEFAULT_BLOCK_CAP = 100


class SdpError(RuntimeError):
    pass


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True)
class SymmetricIndexer:
    """Bijection between symmetric n x n matrices and n(n+1)/2 scalars."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise SdpError(f"symmetric_vectorize needs n >= 1, got {self.n}")

    @property
    def size(self) -> int:
        return self.n * (self.n + 1) // 2

    def pack(self, M: np.ndarray) -> np.ndarray:
        M = np.asarray(M, dtype=float)
        return M[np.triu_indices(self.n)]

    def unpack(self, v: np.ndarray) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n)
        M[iu] = v
        M.T[iu] = v
        return M

    def entry_pairs(self):
        """(flat index, row, col) triples for the packed upper triangle."""
        iu = np.triu_indices(self.n)
        return [(k, int(i), int(j)) for k, (i, j) in enumerate(zip(*iu))]


def symmetric_vectorize(n: int) -> SymmetricIndexer:
    return SymmetricIndexer(n)


@dataclass
class LmiConstraint:
    """Affine matrix inequality  F0 + sum_i x_i F_i  (sense) 0.

    coeff holds vec'd per-variable coefficient matrices as a sparse
    (n_vars, n*n) matrix; sense is "neg" (< 0) or "pos" (> 0).
    """

    name: str
    F0: np.ndarray
    coeff: sp.spmatrix
    sense: str = "neg"
    strict_eps: float | None = None   # strictness shift; None = solver default

    def __post_init__(self):
        self.F0 = np.asarray(self.F0, dtype=float)
        n = self.F0.shape[0]
        if self.F0.shape != (n, n):
            raise SdpError(f"{self.name}: constant block must be square")
        if not np.allclose(self.F0, self.F0.T, atol=1e-10):
            raise SdpError(f"{self.name}: constant block not symmetric")
        self.coeff = sp.csr_matrix(self.coeff)
        if self.coeff.shape[1] != n * n:
            raise SdpError(f"{self.name}: coefficient width {self.coeff.shape[1]} != {n*n}")
        if self.sense not in ("neg", "pos"):
            raise SdpError(f"{self.name}: sense must be 'neg' or 'pos'")

    @property
    def dim(self) -> int:
        return self.F0.shape[0]

    def normalized(self) -> "LmiConstraint":
        """Return the constraint in '< 0' sense."""
        if self.sense == "neg":
            return self
        return LmiConstraint(name=self.name, F0=-self.F0, coeff=-self.coeff,
                             sense="neg", strict_eps=self.strict_eps)

    def matrix_at(self, x: np.ndarray) -> np.ndarray:
        n = self.dim
        M = self.F0 + (self.coeff.T @ x).reshape(n, n)
        return 0.5 * (M + M.T)


def constraint_from_mats(name: str, F0: np.ndarray, mats: dict[int, np.ndarray],
                         n_vars: int, sense: str = "neg",
                         strict_eps: float | None = None) -> LmiConstraint:
    """Build an LmiConstraint from a {var index: symmetric matrix} mapping."""
    n = np.asarray(F0).shape[0]
    rows, cols, vals = [], [], []
    for i, M in mats.items():
        M = np.asarray(M, dtype=float)
        if not np.allclose(M, M.T, atol=1e-10):
            raise SdpError(f"{name}: coefficient for variable {i} not symmetric")
        r, c = np.nonzero(M)
        rows.extend([i] * len(r))
        cols.extend(r * n + c)
        vals.extend(M[r, c])
    coeff = sp.csr_matrix((vals, (rows, cols)), shape=(n_vars, n * n))
    return LmiConstraint(name=name, F0=F0, coeff=coeff, sense=sense,
                         strict_eps=strict_eps)


@dataclass
class LmiProblem:
    n_vars: int
    constraints: list[LmiConstraint]
    objective: np.ndarray | None = None   # None => feasibility (min 0)

    def __post_init__(self):
        if self.n_vars > DEFAULT_VAR_CAP:
            raise SdpError(f"{self.n_vars} scalar variables exceeds cap {DEFAULT_VAR_CAP}")
        for c in self.constraints:
            if c.dim > DEFAULT_BLOCK_CAP:
                raise SdpError(f"block {c.name} of size {c.dim} exceeds cap {DEFAULT_BLOCK_CAP}")
            if c.coeff.shape[0] != self.n_vars:
                raise SdpError(f"block {c.name}: coefficient rows != n_vars")
        if self.objective is not None:
            self.objective = np.asarray(self.objective, dtype=float).reshape(self.n_vars)


@dataclass
class SolverOptions:
    max_iter: int = 100
    tol_gap: float = 1e-9
    tol_feas: float = 1e-9
    # soft acceptance when the iteration stalls short of the target
    # tolerances: the decision vector must be essentially dual-feasible
    # (that is what the eigenvalue certificates check), while looser gap /
    # primal-residual bounds only widen the reported optimality gap
    tol_gap_soft: float = 2e-3
    tol_dual_soft: float = 1e-6
    tol_primal_soft: float = 5e-3
    stall_iters: int = 10
    sigma_min: float = 0.0      # floor on the centering parameter
    classify_infeasible: bool = True   # run phase 1 to label failed solves
    cert_tol: float = 1e-7
    # strict inequalities M < 0 are realized internally as M <= -eps I;
    # margins are reported for the caller's unshifted matrices
    strict_eps: float = 1e-6
    step_frac: float = 0.98
    feas_margin: float = 1e-9   # phase-1 margin proving strict feasibility


@dataclass
class LmiSolution:
    x: np.ndarray
    objective: float
    margins: list[float]           # per-constraint max eigenvalue in '< 0' sense
    status: Status
    iterations: int
    mu: float
    phase1_bound: float | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class CertificateReport:
    passed: bool
    margins: list[float]
    names: list[str]
    tol: float

    def __str__(self):
        lines = [f"certificate check (tol={self.tol:g}): "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, mgn in zip(self.names, self.margins):
            lines.append(f"  {name:<28s} max-eig {mgn: .3e}")
        return "\n".join(lines)


class _Block:
    """Workspace for one normalized constraint block."""

    def __init__(self, con: LmiConstraint, n_vars: int):
        self.name = con.name
        self.n = con.dim
        self.F0 = con.F0
        self.coeff = con.coeff                      # (n_vars, n*n) CSR
        rows = np.unique(con.coeff.nonzero()[0])
        self.active = rows
        dense = con.coeff[rows].toarray().reshape(len(rows), self.n, self.n)
        dense = 0.5 * (dense + np.transpose(dense, (0, 2, 1)))
        self.stack = dense                          # cached dense coefficient stack

    def A_of(self, y: np.ndarray) -> np.ndarray:
        M = (self.coeff.T @ y).reshape(self.n, self.n)
        return 0.5 * (M + M.T)

    def inner_all(self, X: np.ndarray) -> np.ndarray:
        """<F_i, X> for all variables (zeros for inactive)."""
        out = np.zeros(self.coeff.shape[0])
        if len(self.active):
            out[self.active] = np.tensordot(self.stack, X, axes=([1, 2], [0, 1]))
        return out


def _chol(M: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


def _inv_sqrt_psd(M: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh(0.5 * (M + M.T))
    w = np.maximum(w, 1e-300)
    return (Q * (1.0 / np.sqrt(w))) @ Q.T


def _max_step(L: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha with X + alpha dX >= 0, given X = L L'."""
    Li = scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    S = Li @ dX @ Li.T
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    wmin = w.min()
    if wmin >= -1e-14:
        return 1.0
    return min(1.0, -1.0 / wmin)


def _ipm(blocks: list[_Block], b_vec: np.ndarray, opts: SolverOptions,
         y0: np.ndarray | None = None, stop_early=None, feas_thr=None):
    """Core NT predictor-corrector iteration on
        (D) max b'y  s.t.  sum_i y_i F_bi + S_b = -F0_b, S_b >= 0.

    stop_early(y) may end the run once the iterate satisfies an external
    goal (used by the feasibility phase, whose objective is unbounded on
    feasible problems).  Returns (y, status, iterations, mu, metrics)."""
    m = b_vec.size
    C = [-blk.F0 for blk in blocks]
    y = np.zeros(m) if y0 is None else y0.copy()
    S = []
    Z = []
    for blk, Cb in zip(blocks, C):
        Sb = Cb - blk.A_of(y)
        wmin = float(np.linalg.eigvalsh(Sb).min())
        if wmin < 1e-8:
            Sb = Sb + (1.0 + abs(wmin)) * np.eye(blk.n)
        S.append(Sb)
        Z.append(np.eye(blk.n) * (1.0 + np.linalg.norm(b_vec) / max(1.0, m)))
    n_total = sum(blk.n for blk in blocks)
    norm_C = 1.0 + max(np.linalg.norm(Cb) for Cb in C)
    norm_b = 1.0 + np.linalg.norm(b_vec)

    status = Status.ITERATION_LIMIT
    it = 0
    mu = np.inf
    best = None        # (score, y, metrics, mu) by combined residual score
    best_feas = None   # (obj, y, metrics, mu) among certified-feasible iterates
    since_best = 0
    for it in range(1, opts.max_iter + 1):
        Rd = [Cb - Sb - blk.A_of(y) for blk, Cb, Sb in zip(blocks, C, S)]
        rp = b_vec.copy()
        for blk, Zb in zip(blocks, Z):
            rp -= blk.inner_all(Zb)
        gap = sum(np.tensordot(Zb, Sb) for Zb, Sb in zip(Z, S))
        mu = gap / n_total
        obj = float(b_vec @ y)
        rel_gap = gap / (1.0 + abs(obj))
        feas_d = max(np.linalg.norm(R) for R in Rd) / norm_C
        feas_p = np.linalg.norm(rp) / norm_b
        # true per-block margins of the current decision vector (the dual
        # slack corrected by the dual residual)
        if feas_thr is not None and (best_feas is None or obj > best_feas[0]):
            certified = all(
                -np.linalg.eigvalsh(Sb + Rdb).min() <= thr
                for Sb, Rdb, thr in zip(S, Rd, feas_thr))
            if certified:
                best_feas = (obj, y.copy(), (feas_d, feas_p, rel_gap), mu)
        score = max(rel_gap / opts.tol_gap_soft,
                    feas_d / opts.tol_dual_soft, feas_p / opts.tol_primal_soft)
        if best is None or score < 0.99 * best[0]:
            best = (score, y.copy(), (feas_d, feas_p, rel_gap), mu)
            since_best = 0
        else:
            since_best += 1
        if rel_gap < opts.tol_gap and feas_d < opts.tol_feas and feas_p < opts.tol_feas:
            status = Status.OPTIMAL
            break
        if stop_early is not None and feas_d < opts.tol_feas and stop_early(y):
            status = Status.OPTIMAL
            break
        if since_best >= opts.stall_iters:
            # end-game numerical drift; keep the best iterate
            status = Status.ITERATION_LIMIT
            break

        # NT scaling and Schur complement
        try:
            Ls = [np.linalg.cholesky(Sb) for Sb in S]
            Lz = [np.linalg.cholesky(Zb) for Zb in Z]
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_FAILURE
            break
        W, Rw, Rw_inv, Veig = [], [], [], []
        for Sb, Lzb in zip(S, Lz):
            Q = _inv_sqrt_psd(Lzb.T @ Sb @ Lzb)
            Wb = Lzb @ Q @ Lzb.T
            W.append(Wb)
            try:
                R = np.linalg.cholesky(Wb)
            except np.linalg.LinAlgError:
                R = None
            Rw.append(R)
            if R is not None:
                Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]), lower=True)
                Rw_inv.append(Rinv)
                V = R.T @ Sb @ R
                Veig.append(np.linalg.eigh(0.5 * (V + V.T)))
            else:
                Rw_inv.append(None)
                Veig.append(None)
        M = np.zeros((m, m))
        for blk, Wb in zip(blocks, W):
            if not len(blk.active):
                continue
            WFW = Wb @ blk.stack @ Wb
            flat = blk.stack.reshape(len(blk.active), -1)
            M[np.ix_(blk.active, blk.active)] += flat @ WFW.reshape(len(blk.active), -1).T
        M = 0.5 * (M + M.T)
        # Jacobi-equilibrated Cholesky with a regularization ladder; the
        # Schur complement gets ill-conditioned near the optimum
        dscale = np.sqrt(np.maximum(np.diag(M), 1e-300))
        Ms = M / dscale[:, None] / dscale[None, :]
        Mf = None
        for reg in (1e-14, 1e-12, 1e-9, 1e-6):
            try:
                Mf = scipy.linalg.cho_factor(Ms + reg * np.eye(m))
                break
            except (scipy.linalg.LinAlgError, ValueError):
                continue
        if Mf is None:
            status = Status.NUMERICAL_FAILURE
            break

        Sinv = []
        for Lsb in Ls:
            Li = scipy.linalg.solve_triangular(Lsb, np.eye(Lsb.shape[0]), lower=True)
            Sinv.append(Li.T @ Li)

        def schur_solve(rhs: np.ndarray) -> np.ndarray:
            v = scipy.linalg.cho_solve(Mf, rhs / dscale) / dscale
            # one round of iterative refinement
            res = rhs - M @ v
            v += scipy.linalg.cho_solve(Mf, res / dscale) / dscale
            return v

        def second_order(bi: int, dSb: np.ndarray, dZb: np.ndarray) -> np.ndarray:
            """Mehrotra correction term in original coordinates: the scaled
            cross product pushed through the NT Lyapunov solve."""
            R, Rinv = Rw[bi], Rw_inv[bi]
            if R is None:
                return np.zeros_like(dSb)
            w, Qv = Veig[bi]
            dSt = R.T @ dSb @ R
            dZt = Rinv @ dZb @ Rinv.T
            H2 = dZt @ dSt
            H2 = H2 + H2.T
            Y = Qv.T @ H2 @ Qv
            Y = Y / (w[:, None] + w[None, :])
            corr_t = Qv @ Y @ Qv.T
            return R @ corr_t @ R.T

        def solve_direction(sigma_mu: float, corr: list | None = None):
            rhs = rp.copy()
            for bi, (blk, Wb, Rdb, Zb, Sib) in enumerate(zip(blocks, W, Rd, Z, Sinv)):
                X = sigma_mu * Sib - Zb - Wb @ Rdb @ Wb
                if corr is not None:
                    X = X - corr[bi]
                rhs -= blk.inner_all(X)
            dy = schur_solve(rhs)
            dS = [Rdb - blk.A_of(dy) for blk, Rdb in zip(blocks, Rd)]
            dZ = []
            for bi, (Wb, dSb, Zb, Sib) in enumerate(zip(W, dS, Z, Sinv)):
                X = sigma_mu * Sib - Zb - Wb @ dSb @ Wb
                if corr is not None:
                    X = X - corr[bi]
                dZ.append(X)
            dZ = [0.5 * (d + d.T) for d in dZ]
            dS = [0.5 * (d + d.T) for d in dS]
            return dy, dS, dZ

        # predictor
        dy_a, dS_a, dZ_a = solve_direction(0.0)
        a_p = min(_max_step(Lzb, dZb) for Lzb, dZb in zip(Lz, dZ_a))
        a_d = min(_max_step(Lsb, dSb) for Lsb, dSb in zip(Ls, dS_a))
        gap_aff = sum(np.tensordot(Zb + a_p * dZb, Sb + a_d * dSb)
                      for Zb, dZb, Sb, dSb in zip(Z, dZ_a, S, dS_a))
        sigma = min(1.0, max(opts.sigma_min, max(0.0, (gap_aff / gap)) ** 3))

        # corrector with the second-order term
        corr = [second_order(bi, dS_a[bi], dZ_a[bi]) for bi in range(len(blocks))]
        dy, dS, dZ = solve_direction(sigma * mu, corr)
        a_p = opts.step_frac * min(_max_step(Lzb, dZb) for Lzb, dZb in zip(Lz, dZ))
        a_d = opts.step_frac * min(_max_step(Lsb, dSb) for Lsb, dSb in zip(Ls, dS))
        a_p, a_d = min(a_p, 1.0), min(a_d, 1.0)
        # growth cap keeps iterates finite when the objective is unbounded
        # (feasibility phase) without affecting bounded solves
        dy_norm = np.linalg.norm(dy)
        max_growth = 1e3 * (1.0 + np.linalg.norm(y))
        if a_d * dy_norm > max_growth:
            a_d = max_growth / dy_norm
        if max(a_p, a_d) < 1e-10:
            status = Status.NUMERICAL_FAILURE
            break
        y = y + a_d * dy
        S = [Sb + a_d * dSb for Sb, dSb in zip(S, dS)]
        Z = [Zb + a_p * dZb for Zb, dZb in zip(Z, dZ)]

    if status is not Status.OPTIMAL and best_feas is not None:
        # stalled short of the optimality tolerances, but a strictly
        # feasible (certifiable) point was found; its objective remains a
        # valid bound, merely suboptimal
        return best_feas[1], Status.OPTIMAL, it, best_feas[3], best_feas[2]
    if status is not Status.OPTIMAL and best is not None and best[0] <= 1.0:
        # stalled, but the best iterate met the soft tolerances
        return best[1], Status.OPTIMAL, it, best[3], best[2]
    return y, status, it, mu, (feas_d, feas_p, rel_gap)


def _margins(constraints: list[LmiConstraint], x: np.ndarray) -> list[float]:
    out = []
    for con in constraints:
        M = con.normalized().matrix_at(x)
        out.append(float(np.linalg.eigvalsh(M).max()))
    return out


def _polish_to(cons: list[LmiConstraint], y: np.ndarray, thr: np.ndarray,
               max_steps: int = 30) -> np.ndarray:
    """Push residual violations of per-constraint margin targets down with
    least-norm first-order corrections.  Intended for near-feasible
    iterates; the correction is O(violation)."""
    y = y.copy()

    def excess(yv):
        return max(float(np.linalg.eigvalsh(c.matrix_at(yv)).max()) - t
                   for c, t in zip(cons, thr))

    for _ in range(max_steps):
        rows, rhs = [], []
        for con, t in zip(cons, thr):
            n = con.dim
            w, V = np.linalg.eigh(con.matrix_at(y))
            for k in range(n - 1, -1, -1):
                if w[k] <= t - 2.0 * abs(t):
                    break
                v = V[:, k]
                rows.append(con.coeff @ np.outer(v, v).reshape(n * n))
                rhs.append(min(w[k], t - 0.5 * abs(t)) - w[k])
        worst = excess(y)
        if worst <= 0 or not rows:
            return y
        G = np.asarray(rows)
        r = np.asarray(rhs)
        dy = np.linalg.lstsq(G, r, rcond=1e-6)[0]
        # backtrack: eigenvalue curvature can defeat the linear model
        improved = False
        for scale in (1.0, 0.5, 0.25, 0.1):
            if excess(y + scale * dy) < worst - 1e-16:
                y = y + scale * dy
                improved = True
                break
        if not improved:
            return y
    return y


def solve(problem: LmiProblem, opts: SolverOptions | None = None) -> LmiSolution:
    """Two-phase solve: objective descent, feasibility phase for diagnosis.

    Strict inequalities are realized internally as F(x) <= -eps I and the
    blocks are normalized to comparable magnitude (exact reformulations);
    margins are reported for the caller's unshifted matrices in original
    scale."""
    opts = opts or SolverOptions()
    cons_orig = [c.normalized() for c in problem.constraints]
    cons = []
    feas_thr = []
    for c in cons_orig:
        eps = c.strict_eps if c.strict_eps is not None else opts.strict_eps
        s = max(1.0, np.abs(c.F0).max(),
                np.abs(c.coeff.data).max() if c.coeff.nnz else 0.0)
        cons.append(LmiConstraint(name=c.name, F0=(c.F0 + eps * np.eye(c.dim)) / s,
                                  coeff=c.coeff / s))
        # shifted-normalized margin below this threshold certifies the
        # unshifted margin below -cert_tol
        feas_thr.append((eps - opts.cert_tol) / s)
    feas_thr = np.asarray(feas_thr)
    m = problem.n_vars

    def run_phase1():
        """min t s.t. F_b(x) - t I < 0; bounds the best achievable margin.
        The objective is unbounded below on strictly feasible problems, so
        stop as soon as the margin is convincingly negative.  An
        infeasibility verdict is only trusted when this run reaches full
        optimality tolerances; a stalled crawl proves nothing."""
        p1_cons = []
        for c in cons:
            coeff = sp.vstack([c.coeff,
                               sp.csr_matrix(-np.eye(c.dim).reshape(1, -1))]).tocsr()
            p1_cons.append(LmiConstraint(name=c.name, F0=c.F0, coeff=coeff))
        p1_blocks = [_Block(c, m + 1) for c in p1_cons]
        b1 = np.zeros(m + 1)
        b1[m] = -1.0   # max -t == min t
        y1_init = np.zeros(m + 1)
        y1_init[m] = 1.0 + max(0.0, max(float(np.linalg.eigvalsh(c.F0).max())
                                        for c in cons))
        return _ipm(p1_blocks, b1, opts, y0=y1_init,
                    stop_early=lambda y: y[m] < -1e3 * opts.feas_margin)

    if problem.objective is None:
        y1, st1, it1, mu1, met1 = run_phase1()
        t_star = float(y1[m])
        if st1 is Status.NUMERICAL_FAILURE:
            return LmiSolution(x=y1[:m], objective=np.nan,
                               margins=_margins(cons_orig, y1[:m]),
                               status=Status.NUMERICAL_FAILURE, iterations=it1,
                               mu=mu1, message="feasibility phase failed numerically")
        gap_abs = met1[2] * (1.0 + abs(t_star))
        converged1 = (st1 is Status.OPTIMAL and met1[0] < opts.tol_feas
                      and t_star - gap_abs > -opts.feas_margin)
        if t_star > -opts.feas_margin and not converged1:
            return LmiSolution(x=y1[:m], objective=np.nan,
                               margins=_margins(cons_orig, y1[:m]),
                               status=Status.NUMERICAL_FAILURE, iterations=it1,
                               mu=mu1,
                               message="feasibility phase stalled without a verdict "
                                       f"(margin bound {t_star:.3e})")
        if t_star > -opts.feas_margin:
            return LmiSolution(
                x=y1[:m], objective=np.nan, margins=_margins(cons_orig, y1[:m]),
                status=Status.INFEASIBLE, iterations=it1, mu=mu1,
                phase1_bound=t_star,
                message=(f"phase-1 bound: best achievable normalized margin "
                         f"{t_star:.3e} cannot reach below -{opts.feas_margin:g}"))
        return LmiSolution(x=y1[:m], objective=0.0,
                           margins=_margins(cons_orig, y1[:m]),
                           status=Status.OPTIMAL, iterations=it1, mu=mu1,
                           phase1_bound=t_star)

    # optimize directly (infeasible start); classify failures with phase 1
    blocks = [_Block(c, m) for c in cons]
    y, st, it2, mu, metrics = _ipm(blocks, -problem.objective, opts,
                                   feas_thr=feas_thr)
    if st is not Status.OPTIMAL:
        # conservative retry: hug the central path on degenerate problems
        from dataclasses import replace as _replace
        opts2 = _replace(opts, sigma_min=0.2, step_frac=0.9,
                         max_iter=max(opts.max_iter, 250), stall_iters=25)
        y2, st2, it2b, mu2, metrics2 = _ipm(blocks, -problem.objective, opts2,
                                            feas_thr=feas_thr)
        it2 += it2b
        if st2 is Status.OPTIMAL or (
                st is Status.NUMERICAL_FAILURE and st2 is not Status.NUMERICAL_FAILURE):
            y, st, mu, metrics = y2, st2, mu2, metrics2
    polish_note = ""
    margins = _margins(cons_orig, y)
    if max(margins) > -opts.cert_tol and max(margins) < 1e-2:
        # residual violation is tiny; restore certified strictness without
        # moving the objective (works on the shifted normalized system)
        y2 = _polish_to(cons, y, feas_thr)
        margins2 = _margins(cons_orig, y2)
        if max(margins2) < max(margins):
            y, margins = y2, margins2
            polish_note = "; margins polished"
    certified = max(margins) <= -opts.cert_tol
    if certified and st is Status.ITERATION_LIMIT:
        st = Status.OPTIMAL
        polish_note += " (suboptimal but strictly feasible iterate)"
    if st is Status.OPTIMAL and not certified:
        st = Status.NUMERICAL_FAILURE
    obj = float(problem.objective @ y)
    it_total = it2
    t_star = None
    if st is not Status.OPTIMAL and opts.classify_infeasible:
        y1, st1, it1, mu1, met1 = run_phase1()
        it_total += it1
        t_star = float(y1[m])
        gap_abs = met1[2] * (1.0 + abs(t_star))
        converged1 = (st1 is Status.OPTIMAL and met1[0] < opts.tol_feas
                      and t_star - gap_abs > -opts.feas_margin)
        if converged1 and t_star > -opts.feas_margin:
            return LmiSolution(
                x=y1[:m], objective=np.nan, margins=_margins(cons_orig, y1[:m]),
                status=Status.INFEASIBLE, iterations=it_total, mu=mu1,
                phase1_bound=t_star,
                message=(f"phase-1 bound: best achievable normalized margin "
                         f"{t_star:.3e} cannot reach below -{opts.feas_margin:g}"))
        if st1 is Status.OPTIMAL and t_star < -opts.feas_margin:
            # strictly feasible point found although optimization stalled:
            # fall through and report the stalled phase-2 state
            pass
    return LmiSolution(x=y, objective=obj, margins=margins, status=st,
                       iterations=it_total, mu=mu, phase1_bound=t_star,
                       message=f"residuals (dual, primal, gap) = {metrics}{polish_note}")


def verify(problem: LmiProblem, solution: LmiSolution,
           tol: float = 1e-7) -> CertificateReport:
    """Recompute every constraint margin with an independent eigensolver
    path (LAPACK evr driver via scipy, vs the solver's eigvalsh)."""
    margins, names = [], []
    for con in problem.constraints:
        M = con.normalized().matrix_at(solution.x)
        w = scipy.linalg.eigh(M, eigvals_only=True, driver="evr")
        margins.append(float(w.max()))
        names.append(con.name)
    passed = all(mg <= tol for mg in margins)
    return CertificateReport(passed=passed, margins=margins, names=names, tol=tol)
