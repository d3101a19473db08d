"""Tracking-controller synthesis for the diesel-wind plant.

Assembles the 4-state physical plant (diesel chain + first-order WTG
surrogate), augments it with the reference model and a bounded time-varying
feedback delay, and poses the delay-dependent H-infinity state-feedback
design as one multi-objective LMI system solved by the sdp module.
Polytopic parameter uncertainty is handled by imposing the same certificate
at every vertex plant.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import sdp
from .models import DieselModel, ModelError, ReferenceModel, reference_state_space
from .sma import ReducedModel

PLANT_STATES = ("d_omega_d", "dP_m", "dP_v", "d_omega_r")
REF_STATES = ("d_omega_hat", "dP_m_hat", "dP_v_hat")


class InfeasibleError(RuntimeError):
    """LMI synthesis infeasible; message carries diagnostics."""


@dataclass(frozen=True)
class PlantModel:
    """Reduced-order physical plant x_p = [d_omega_d, dP_m, dP_v, d_omega_r]."""

    A_p: np.ndarray
    B_p: np.ndarray
    E_p: np.ndarray
    C_p: np.ndarray
    D_p: np.ndarray
    diesel: DieselModel | None = None
    reduced: ReducedModel | None = None


@dataclass(frozen=True)
class AugmentedSystem:
    """Closed-loop carrier: block-diagonal plant/reference with delayed input."""

    A_bar: np.ndarray        # 7x7
    B_tilde: np.ndarray      # 7x1, delayed channel is B_tilde @ K
    E_bar: np.ndarray        # 7x2
    C_bar: np.ndarray        # 1x7
    D_p: float
    eta_m: float
    kappa: float
    plant: PlantModel | None = None
    reference: ReferenceModel | None = None

    @property
    def delay_free(self) -> bool:
        return self.kappa == 0.0


@dataclass(frozen=True)
class PolytopeSpec:
    """Relative parameter bounds; theta maps parameter name to
    (fraction below, fraction above) the nominal value."""

    theta: dict = field(default_factory=dict)
    include_delta: bool = True

    def __post_init__(self):
        for name, (lo, hi) in self.theta.items():
            if name not in ("H_D", "tau_d", "tau_sm"):
                raise ModelError(f"unknown uncertain parameter {name!r}")
            if lo < 0 or hi < 0 or lo >= 1.0:
                raise ModelError(f"invalid range for {name}: ({lo}, {hi})")


@dataclass
class SynthesisOptions:
    eta_m: float = 0.05
    kappa: float = 0.10
    eps_lmi: float = 1e-3      # strictness shift applied by the solver
    eps_pd: float = 1e-6       # floor on the positive-definite variables
    gamma_min: float = 1e-6
    # tiny trace penalty on the free certificate matrices; they enter the
    # conditions with one-sided coefficient signs, so without it the dual
    # feasible set has recession directions and the primal loses its
    # interior (the iteration then cannot converge)
    eps_reg: float = 1e-3
    # scalarization weight on gamma in the multi-objective; larger values
    # trade gain size for tracking fidelity
    gamma_weight: float = 1.0
    solver: sdp.SolverOptions = field(default_factory=sdp.SolverOptions)


@dataclass
class SynthesisResult:
    """Solved design.  K is in physical plant coordinates; the matrix
    variables certify the internally balanced system (states scaled by
    1/balance), so K = K_bar P_bar^{-1} diag(1/balance)."""

    gamma: float
    k_a: float
    k_b: float
    K: np.ndarray                  # 1x7
    variables: dict                # name -> matrix (P_bar, Q_bar, ...)
    certificates: sdp.CertificateReport
    solution: sdp.LmiSolution
    delays: tuple
    balance: np.ndarray = field(default_factory=lambda: np.ones(7))

    @property
    def K_p(self) -> np.ndarray:
        return self.K[:, :4]

    @property
    def K_r(self) -> np.ndarray:
        return self.K[:, 4:]

    @property
    def tracking_bound(self) -> float:
        """Guaranteed disturbance-to-error energy gain (sqrt gamma)."""
        return float(np.sqrt(self.gamma))

    def gain_norm_bound(self) -> tuple[float, float]:
        """(|K|_2, sqrt(k_a)*k_b) - the norm and its certified bound."""
        return (float(np.linalg.norm(self.K, 2)),
                float(np.sqrt(self.k_a) * self.k_b))


def assemble_plant(d: DieselModel, r: ReducedModel) -> PlantModel:
    """Printed plant structure; the WTG enters the swing row through its
    power output row (C_rd, D_rd) and keeps its own speed dynamics."""
    f, H = d.f_bar, d.H_D
    A_p = np.array([
        [0.0, f / (2 * H), 0.0, f * r.C_rd / (2 * H)],
        [0.0, -1.0 / d.tau_d, 1.0 / d.tau_d, 0.0],
        [-1.0 / (f * d.tau_sm * d.R_D), 0.0, -1.0 / d.tau_sm, 0.0],
        [0.0, 0.0, 0.0, r.A_rd],
    ])
    B_p = np.array([[f * r.D_rd / (2 * H)], [0.0], [0.0], [r.B_rd]])
    E_p = np.array([[-f / (2 * H)], [0.0], [0.0], [0.0]])
    C_p = np.array([[1.0, 0.0, 0.0, 0.0]])
    return PlantModel(A_p=A_p, B_p=B_p, E_p=E_p, C_p=C_p, D_p=np.zeros((1, 1)),
                      diesel=d, reduced=r)


def assemble_augmented(p: PlantModel, ref: ReferenceModel,
                       delays: tuple[float, float]) -> AugmentedSystem:
    eta_m, kappa = delays
    if eta_m > kappa:
        raise ModelError(f"eta_m={eta_m} exceeds kappa={kappa}")
    if eta_m < 0:
        raise ModelError("delay bounds must be nonnegative")
    if kappa > 0 and eta_m == 0:
        raise ModelError("printed delay-dependent conditions need eta_m > 0; "
                         "use a small positive lower bound or kappa = 0")
    rs = reference_state_space(ref)
    A_bar = np.zeros((7, 7))
    A_bar[:4, :4] = p.A_p
    A_bar[4:, 4:] = rs.A
    B_tilde = np.vstack([p.B_p, np.zeros((3, 1))])
    E_bar = np.zeros((7, 2))
    E_bar[:4, 0:1] = p.E_p
    E_bar[4:, 1:2] = rs.E
    C_bar = np.hstack([p.C_p, -rs.C])
    return AugmentedSystem(A_bar=A_bar, B_tilde=B_tilde, E_bar=E_bar,
                           C_bar=C_bar, D_p=float(p.D_p[0, 0]),
                           eta_m=eta_m, kappa=kappa, plant=p, reference=ref)


def _balance_diag(aug: AugmentedSystem) -> np.ndarray:
    """Diagonal state scaling for LMI conditioning (Osborne iteration with
    the input/disturbance/error channels held fixed, powers of two for exact
    reproducibility).  Entries are normalized to >= 1 so the recovered gain
    keeps |K| <= |K_scaled| and the norm-limit certificate stays a valid
    bound after unscaling."""
    A = np.abs(aug.A_bar)
    border_row = np.abs(aug.B_tilde).sum(axis=1) + np.abs(aug.E_bar).sum(axis=1)
    border_col = np.abs(aug.C_bar).sum(axis=0)
    n = A.shape[0]
    d = np.ones(n)
    for _ in range(200):
        moved = 0.0
        for i in range(n):
            r = (A[i] @ d - A[i, i] * d[i] + border_row[i]) / d[i]
            c = (A[:, i] / d).sum() - A[i, i] / d[i] + border_col[i]
            c *= d[i]
            if r <= 0 or c <= 0:
                continue
            f = (r / c) ** 0.25    # damped Osborne update
            d[i] *= f
            moved = max(moved, abs(np.log2(f)))
        if moved < 1e-3:
            break
    d = 2.0 ** np.round(np.log2(d))
    return d / d.min()


def _scale_aug(aug: AugmentedSystem, d: np.ndarray) -> AugmentedSystem:
    """Similarity transform x_scaled = D^-1 x; transfer w -> e unchanged."""
    Dinv = np.diag(1.0 / d)
    D = np.diag(d)
    return replace(aug,
                   A_bar=Dinv @ aug.A_bar @ D,
                   B_tilde=Dinv @ aug.B_tilde,
                   E_bar=Dinv @ aug.E_bar,
                   C_bar=aug.C_bar @ D)


class _VarMap:
    """Scalar layout of the matrix decision variables."""

    SYM = ("P_bar", "Q_bar", "M1_bar", "M2_bar")
    FULL = ("U1_bar", "U2_bar", "V1_bar", "V2_bar")

    def __init__(self, n: int = 7, delay_free: bool = False):
        self.n = n
        self.delay_free = delay_free
        self.sym = sdp.symmetric_vectorize(n)
        self.slices: dict[str, slice] = {}
        pos = 0
        for name in ("gamma", "k_a", "k_b"):
            self.slices[name] = slice(pos, pos + 1)
            pos += 1
        sym_names = ("P_bar",) if delay_free else self.SYM
        for name in sym_names:
            self.slices[name] = slice(pos, pos + self.sym.size)
            pos += self.sym.size
        if not delay_free:
            for name in self.FULL:
                self.slices[name] = slice(pos, pos + n * n)
                pos += n * n
        self.slices["K_bar"] = slice(pos, pos + n)
        pos += n
        self.n_vars = pos

    def unpack(self, x: np.ndarray) -> dict:
        n = self.n
        out = {}
        for name, sl in self.slices.items():
            v = x[sl]
            if v.size == 1:
                out[name] = float(v[0])
            elif v.size == self.sym.size:
                out[name] = self.sym.unpack(v)
            elif v.size == n * n:
                out[name] = v.reshape(n, n)
            else:
                out[name] = v.reshape(1, n)
        return out


def _pad(M: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols))
    out[: M.shape[0], : M.shape[1]] = M
    return out


def _main_lmi_block(v: dict, aug: AugmentedSystem) -> np.ndarray:
    """One certificate block: nine block rows sized
    (n, n, n, n, n, n_w, n_e, n, n) = 52 rows for the 7-state loop."""
    n = 7
    A, Bt, E, C = aug.A_bar, aug.B_tilde, aug.E_bar, aug.C_bar
    P, Q = v["P_bar"], v["Q_bar"]
    M1, M2 = v["M1_bar"], v["M2_bar"]
    U1, U2, V1, V2 = v["U1_bar"], v["U2_bar"], v["V1_bar"], v["V2_bar"]
    K = v["K_bar"]
    gamma = v["gamma"]
    inv_eta = 1.0 / aug.eta_m
    # the second Krasovskii integral runs over [t-kappa, t-eta_m]; its
    # Jensen factor is the segment length, not kappa (the printed condition
    # with 1/kappa admits destabilizing gains, see decisions ledger)
    inv_kap = 1.0 / (aug.kappa - aug.eta_m)
    nw, ne = E.shape[1], C.shape[0]

    sizes = [n, n, n, n, n, nw, ne, n, n]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    N = offs[-1]
    G = np.zeros((N, N))

    def put(i, j, M):
        G[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = M
        if i != j:
            G[offs[j]:offs[j + 1], offs[i]:offs[i + 1]] = M.T

    PA_T = P @ A.T
    put(0, 0, A @ P + PA_T + Q + U1.T + U1)
    put(0, 1, -U1 + V1.T)
    put(0, 2, Bt @ K)
    put(0, 3, U1)
    put(0, 5, E)
    put(0, 6, P @ C.T)
    put(0, 7, PA_T)
    put(0, 8, PA_T)
    put(1, 1, -Q - V1.T - V1 + U2.T + U2)
    put(1, 2, -U2 + V2.T)
    put(1, 3, V1)
    put(1, 4, U2)
    put(2, 2, -V2.T - V2)
    put(2, 4, V2)
    put(2, 6, K.T * aug.D_p)
    put(2, 7, K.T @ Bt.T)
    put(2, 8, K.T @ Bt.T)
    # conservative substitution of the slack diagonals
    # (-P M^-1 P <= M - 2P); the feasible set enforces M_i < 2P.  The
    # printed condition carries the opposite sign, which lets the
    # free-weighting terms grow unboundedly and voids the certificate
    # (see decisions ledger).
    put(3, 3, inv_eta * (M1 - 2.0 * P))
    put(4, 4, inv_kap * (M2 - 2.0 * P))
    put(5, 5, -gamma * np.eye(nw))
    put(5, 7, E.T)
    put(5, 8, E.T)
    put(6, 6, -np.eye(ne))
    put(7, 7, -inv_eta * M1)
    put(8, 8, -inv_kap * M2)
    return G


def _delay_free_block(v: dict, aug: AugmentedSystem) -> np.ndarray:
    """Standard H-infinity state-feedback LMI for the undelayed loop."""
    A, Bt, E, C = aug.A_bar, aug.B_tilde, aug.E_bar, aug.C_bar
    P, K, gamma = v["P_bar"], v["K_bar"], v["gamma"]
    n, nw = 7, E.shape[1]
    BK = Bt @ K
    top = A @ P + P @ A.T + BK + BK.T
    G = np.zeros((n + nw + 1, n + nw + 1))
    G[:n, :n] = top
    G[:n, n:n + nw] = E
    G[n:n + nw, :n] = E.T
    G[:n, n + nw:] = P @ C.T
    G[n + nw:, :n] = C @ P
    G[n:n + nw, n:n + nw] = -gamma * np.eye(nw)
    G[n + nw:, n + nw:] = -np.eye(1)
    return G


def _gain_blocks(v: dict) -> tuple[np.ndarray, np.ndarray]:
    """Norm-limiting conditions K_bar' K_bar < k_a I and P_bar^{-1} < k_b I."""
    n = 7
    K, P = v["K_bar"], v["P_bar"]
    Ga = np.zeros((n + 1, n + 1))
    Ga[:n, :n] = -v["k_a"] * np.eye(n)
    Ga[:n, n:] = K.T
    Ga[n:, :n] = K
    Ga[n, n] = -1.0
    Gb = np.zeros((2 * n, 2 * n))
    Gb[:n, :n] = -v["k_b"] * np.eye(n)
    Gb[:n, n:] = np.eye(n)
    Gb[n:, :n] = np.eye(n)
    Gb[n:, n:] = -P
    return Ga, Gb


def build_lmi(augs: list[AugmentedSystem],
              options: SynthesisOptions | None = None,
              ) -> tuple[sdp.LmiProblem, _VarMap]:
    """Pose the synthesis problem for one or more vertex systems sharing a
    single variable set.  Coefficients are extracted by probing the affine
    assembly map on unit vectors and verified at a random point."""
    options = options or SynthesisOptions()
    if not augs:
        raise ModelError("need at least one vertex system")
    delay_free = augs[0].delay_free
    for a in augs:
        if a.delay_free != delay_free or a.eta_m != augs[0].eta_m or a.kappa != augs[0].kappa:
            raise ModelError("all vertices must share the same delay bounds")
    # one balancing transform shared by all vertices (shared variable set)
    d_bal = _balance_diag(augs[0])
    augs = [_scale_aug(a, d_bal) for a in augs]
    vm = _VarMap(7, delay_free=delay_free)
    vm.balance = d_bal

    def assemble(x: np.ndarray) -> list[tuple[str, np.ndarray]]:
        v = vm.unpack(x)
        blocks = []
        if delay_free:
            for i, a in enumerate(augs):
                blocks.append((f"closed_loop[{i}]", _delay_free_block(v, a)))
        else:
            for i, a in enumerate(augs):
                blocks.append((f"theorem_lmi[{i}]", _main_lmi_block(v, a)))
        ga, gb = _gain_blocks(v)
        blocks.append(("gain_limit_ka", ga))
        blocks.append(("gain_limit_kb", gb))
        blocks.append(("P_bar_pd", -v["P_bar"] + options.eps_pd * np.eye(7)))
        if not delay_free:
            blocks.append(("Q_bar_pd", -v["Q_bar"] + options.eps_pd * np.eye(7)))
            blocks.append(("M1_bar_pd", -v["M1_bar"] + options.eps_pd * np.eye(7)))
            blocks.append(("M2_bar_pd", -v["M2_bar"] + options.eps_pd * np.eye(7)))
        for s in ("gamma", "k_a", "k_b"):
            blocks.append((f"{s}_pos", np.array([[-v[s] + options.gamma_min]])))
        return blocks

    base = assemble(np.zeros(vm.n_vars))
    names = [name for name, _ in base]
    F0s = [M.copy() for _, M in base]
    triplets: list[list] = [[] for _ in base]   # per block: (var, flat idx, val)
    for k in range(vm.n_vars):
        e = np.zeros(vm.n_vars)
        e[k] = 1.0
        probed = assemble(e)
        for bi, (_, M) in enumerate(probed):
            dM = M - F0s[bi]
            r, c = np.nonzero(np.abs(dM) > 0.0)
            if r.size:
                n = dM.shape[0]
                triplets[bi].append((k, r * n + c, dM[r, c]))

    import scipy.sparse as sp_
    constraints = []
    for bi, name in enumerate(names):
        n = F0s[bi].shape[0]
        rows = np.concatenate([np.full(len(flat), var) for var, flat, _ in triplets[bi]]) \
            if triplets[bi] else np.zeros(0, dtype=int)
        cols = np.concatenate([flat for _, flat, _ in triplets[bi]]) \
            if triplets[bi] else np.zeros(0, dtype=int)
        vals = np.concatenate([v_ for _, _, v_ in triplets[bi]]) \
            if triplets[bi] else np.zeros(0)
        coeff = sp_.csr_matrix((vals, (rows, cols)), shape=(vm.n_vars, n * n))
        constraints.append(sdp.LmiConstraint(name=name, F0=F0s[bi], coeff=coeff,
                                             strict_eps=options.eps_lmi))

    # affinity spot-check at a random-but-fixed probe point
    rng = np.random.default_rng(0)
    xr = rng.standard_normal(vm.n_vars)
    for (name, M), con in zip(assemble(xr), constraints):
        if not np.allclose(M, con.matrix_at(xr), atol=1e-8 * max(1.0, np.abs(M).max())):
            raise ModelError(f"assembly map not affine in block {name}")

    c = np.zeros(vm.n_vars)
    for s in ("gamma", "k_a", "k_b"):
        c[vm.slices[s]] = options.gamma_weight if s == "gamma" else 1.0
    if not delay_free and options.eps_reg > 0:
        diag_idx = [k for k, i, j in vm.sym.entry_pairs() if i == j]
        for s in ("Q_bar", "M1_bar", "M2_bar"):
            start = vm.slices[s].start
            for k in diag_idx:
                c[start + k] = options.eps_reg
    return sdp.LmiProblem(n_vars=vm.n_vars, constraints=constraints, objective=c), vm


def _result_from_solution(sol: sdp.LmiSolution, vm: _VarMap,
                          problem: sdp.LmiProblem,
                          delays: tuple) -> SynthesisResult:
    v = vm.unpack(sol.x)
    P = v["P_bar"]
    K_scaled = (np.linalg.solve(P.T, v["K_bar"].reshape(7, 1))).T   # K_bar P^{-1}
    d_bal = getattr(vm, "balance", np.ones(7))
    K = K_scaled / d_bal[None, :]
    cert = sdp.verify(problem, sol, tol=1e-7)
    return SynthesisResult(gamma=v["gamma"], k_a=v["k_a"], k_b=v["k_b"],
                           K=K, variables=v, certificates=cert, solution=sol,
                           delays=delays, balance=d_bal)


def _solve_with_retries(augs: list[AugmentedSystem], options: SynthesisOptions):
    """Solve, relaxing the internal strictness shift if the shifted system
    cannot be solved (certification only needs margins below -cert_tol).
    Intermediate rungs skip the costly infeasibility classification."""
    floor = 10 * options.solver.cert_tol
    ladder = [options.eps_lmi]
    while ladder[-1] > floor:
        ladder.append(max(floor, ladder[-1] / 10.0))
    last = None
    for i, eps in enumerate(ladder):
        is_last = i == len(ladder) - 1
        opts_try = replace(options, eps_lmi=eps)
        problem, vm = build_lmi(augs, opts_try)
        solver_opts = replace(options.solver, classify_infeasible=is_last)
        sol = sdp.solve(problem, solver_opts)
        last = (sol, vm, problem)
        if sol.status is sdp.Status.OPTIMAL:
            return last
    return last


def synthesize(aug: AugmentedSystem,
               options: SynthesisOptions | None = None) -> SynthesisResult:
    """Solve the tracking synthesis for a single (nominal) plant."""
    options = options or SynthesisOptions()
    sol, vm, problem = _solve_with_retries([aug], options)
    if sol.status is sdp.Status.INFEASIBLE:
        raise InfeasibleError(
            "synthesis LMIs infeasible "
            f"(best margin bound {sol.phase1_bound:.3e}); try reducing the "
            "inertia gap H_hat - H_D or relaxing the delay bounds (eta_m, kappa)")
    if sol.status is not sdp.Status.OPTIMAL:
        raise InfeasibleError(f"solver failed: {sol.status.value} ({sol.message})")
    return _result_from_solution(sol, vm, problem, (aug.eta_m, aug.kappa))


def enumerate_vertices(nominal: PlantModel, spec: PolytopeSpec) -> list[PlantModel]:
    """One plant per corner of the parameter box (and the model-reduction
    error corner on the quasi-static gains, when enabled)."""
    d, r = nominal.diesel, nominal.reduced
    if d is None or r is None:
        raise ModelError("nominal plant must carry its diesel/reduced sources")
    axes = []
    for name in ("H_D", "tau_d", "tau_sm"):
        if name in spec.theta:
            lo, hi = spec.theta[name]
            if lo == 0.0 and hi == 0.0:
                continue
            base = getattr(d, name)
            axes.append((name, (base * (1.0 - lo), base * (1.0 + hi))))
    if spec.include_delta and (r.b_rd_span != 0.0 or r.d_rd_span != 0.0):
        axes.append(("delta", (-1, +1)))
    if not axes:
        return [assemble_plant(d, r)]
    vertices = []
    for corner in itertools.product(*(vals for _, vals in axes)):
        dk, rk = d, r
        for (name, _), val in zip(axes, corner):
            if name == "delta":
                b, dd = r.corner(val)
                rk = replace(rk, B_rd=b, D_rd=dd)
            else:
                dk = replace(dk, **{name: val})
        vertices.append(assemble_plant(dk, rk))
    return vertices


def synthesize_robust(vertices: list[PlantModel], ref: ReferenceModel,
                      delays: tuple[float, float],
                      options: SynthesisOptions | None = None) -> SynthesisResult:
    """Corollary-style design: one shared variable set certifying every
    vertex simultaneously."""
    options = options or SynthesisOptions()
    if not vertices:
        raise ModelError("need at least one vertex")
    augs = [assemble_augmented(p, ref, delays) for p in vertices]
    sol, vm, problem = _solve_with_retries(augs, options)
    if sol.status is sdp.Status.INFEASIBLE:
        detail = _probe_infeasible_subset(augs, options)
        raise InfeasibleError(
            f"robust synthesis infeasible (margin bound {sol.phase1_bound:.3e}); "
            + detail)
    if sol.status is not sdp.Status.OPTIMAL:
        raise InfeasibleError(f"solver failed: {sol.status.value} ({sol.message})")
    return _result_from_solution(sol, vm, problem, delays)


def _probe_infeasible_subset(augs, options) -> str:
    """Greedy search for a small jointly-infeasible vertex subset."""
    if len(augs) == 1:
        return "the single vertex is itself infeasible"
    for i, a in enumerate(augs):
        prob, _ = build_lmi([a], options)
        if sdp.solve(prob, options.solver).status is sdp.Status.INFEASIBLE:
            return f"vertex {i} is infeasible on its own"
    kept = list(range(len(augs)))
    # drop vertices while the remainder stays infeasible
    for i in list(kept):
        trial = [j for j in kept if j != i]
        if len(trial) < 2:
            continue
        prob, _ = build_lmi([augs[j] for j in trial], options)
        if sdp.solve(prob, options.solver).status is sdp.Status.INFEASIBLE:
            kept = trial
    return f"vertices {kept} are jointly infeasible"


def closed_loop_matrix(aug: AugmentedSystem, K: np.ndarray) -> np.ndarray:
    """Delay-free closed-loop state matrix A_bar + B_tilde K."""
    return aug.A_bar + aug.B_tilde @ np.asarray(K).reshape(1, 7)
