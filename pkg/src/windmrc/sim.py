"""Closed-loop time-domain simulation of diesel-wind MRC systems.

One scenario integrates, per MRC group: the diesel chain, the scheduled
reference model, a WTG block at the chosen fidelity (nonlinear DAE,
10-state linear, or first-order reduced), and the feedback path (static
state feedback on delayed measurements, a washout filter, or nothing).
Groups couple only through the disturbance schedule; the network reduces to
power routing at each group's point of measurement.

Speed states integrate in Hz (matching the state-space builders); the
output table converts speeds to per unit of the frequency base.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .equilibrium import DfigOperatingPoint, solve_equilibrium, EquilibriumTargets
from .models import (
    DieselModel,
    DfigInputs,
    DfigModel,
    ModelError,
    ReferenceModel,
    dfig_residual,
    diesel_state_space,
    reference_state_space,
)
from .sma import ReducedModel

FIDELITIES = ("nonlinear", "linear10", "reduced1")
DELAY_POLICIES = ("worst", "min", "random", "none")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Disturbance:
    """Power step at a named bus: positive = load increase."""

    time: float
    magnitude: float
    bus: int


@dataclass(frozen=True)
class WashoutController:
    """Conventional RoCoF-proportional loop K s/(T s + 1) on the local
    per-unit speed deviation; no communication, hence undelayed."""

    K_ie: float
    T: float = 0.01


@dataclass(frozen=True)
class DelayPolicy:
    """Measurement delay nu(t) within [eta_m, kappa]."""

    kind: str = "worst"       # worst -> kappa, min -> eta_m, random, none
    eta_m: float = 0.05
    kappa: float = 0.10
    resample_dt: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DELAY_POLICIES:
            raise ModelError(f"unknown delay policy {self.kind!r}")
        if not (0.0 <= self.eta_m <= self.kappa):
            raise ModelError("need 0 <= eta_m <= kappa")

    def sample(self, t_end: float) -> "_DelayTrack":
        if self.kind == "none":
            return _DelayTrack(np.array([0.0]), np.array([0.0]))
        if self.kind == "worst":
            return _DelayTrack(np.array([0.0]), np.array([self.kappa]))
        if self.kind == "min":
            return _DelayTrack(np.array([0.0]), np.array([self.eta_m]))
        rng = np.random.default_rng(self.seed)
        n = max(1, int(math.ceil(t_end / self.resample_dt)) + 1)
        times = np.arange(n) * self.resample_dt
        values = rng.uniform(self.eta_m, self.kappa, size=n)
        return _DelayTrack(times, values)


@dataclass(frozen=True)
class _DelayTrack:
    """Piecewise-constant nu(t)."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        return float(self.values[max(0, min(i, len(self.values) - 1))])

    @property
    def breakpoints(self) -> np.ndarray:
        return self.times[1:]


@dataclass
class MrcGroup:
    """One diesel + aggregated WTG + reference model + its controller."""

    diesel: DieselModel
    reference: ReferenceModel
    reduced: ReducedModel
    K: np.ndarray | None = None            # 1x7 MRC gain, None = no MRC
    washout: WashoutController | None = None
    n_wtg: int = 1
    pom_buses: frozenset = frozenset()     # buses measured at the POM
    served_buses: frozenset = frozenset()  # buses whose power this group serves
    share: float = 1.0                     # fraction of a shared disturbance
    dfig: DfigModel | None = None          # needed for nonlinear/linear10
    op: DfigOperatingPoint | None = None
    wtg_linear: object = None              # LinearStateSpace for linear10


@dataclass
class Scenario:
    name: str
    groups: list
    disturbances: list
    delay: DelayPolicy = field(default_factory=DelayPolicy)
    fidelity: str = "reduced1"
    duration: float = 10.0
    max_step: float = 1e-3
    output_dt: float = 1e-3
    rtol: float = 1e-6
    atol: float = 1e-9

    def __post_init__(self):
        if self.fidelity not in FIDELITIES:
            raise ModelError(f"unknown fidelity {self.fidelity!r}")
        for g in self.groups:
            if g.K is not None and np.asarray(g.K).size != 7:
                raise ModelError("MRC gain must have 7 entries")
            if not g.pom_buses:
                raise ModelError("every MRC group needs exactly one POM "
                                 "(a set of buses measured there)")


@dataclass
class Trajectory:
    """Uniform-grid signal table; speed deviations in per unit."""

    t: np.ndarray
    columns: dict

    def __post_init__(self):
        for name, col in self.columns.items():
            if len(col) != len(self.t):
                raise SimulationError(f"column {name} length mismatch")
            if not np.all(np.isfinite(col)):
                raise SimulationError(f"column {name} contains NaN/Inf")
        if np.any(np.diff(self.t) <= 0):
            raise SimulationError("time grid not strictly increasing")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def to_csv(self, path: str | Path) -> None:
        names = list(self.columns)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + names)
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.6f}"] +
                           [f"{self.columns[n][i]:.9e}" for n in names])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        with open(path) as f:
            r = csv.reader(f)
            header = next(r)
            rows = np.array([[float(v) for v in row] for row in r])
        cols = {name: rows[:, i + 1] for i, name in enumerate(header[1:])}
        return cls(t=rows[:, 0], columns=cols)


def apply_delay(track: _DelayTrack, history: "_History", t: float,
                index: slice | np.ndarray) -> np.ndarray:
    """Delayed state lookup x(t - nu(t)); times before the start clamp to
    the initial (equilibrium) value."""
    nu = track(t)
    if nu == 0.0:
        return history.latest(index)
    return history.eval(t - nu, index)


class _History:
    """Dense solution history with cubic Hermite interpolation."""

    def __init__(self, n: int):
        self.ts: list[float] = []
        self.ys: list[np.ndarray] = []
        self.fs: list[np.ndarray] = []
        self.n = n

    def push(self, t, y, f):
        self.ts.append(t)
        self.ys.append(y.copy())
        self.fs.append(f.copy())

    def latest(self, index) -> np.ndarray:
        return self.ys[-1][index]

    def eval(self, t: float, index) -> np.ndarray:
        if not self.ts or t <= self.ts[0]:
            return self.ys[0][index] if self.ts else np.zeros(self.n)[index]
        if t >= self.ts[-1]:
            return self.ys[-1][index]
        i = int(np.searchsorted(self.ts, t) - 1)
        t0, t1 = self.ts[i], self.ts[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        y0, y1 = self.ys[i][index], self.ys[i + 1][index]
        f0, f1 = self.fs[i][index], self.fs[i + 1][index]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


# Dormand-Prince RK45 tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _integrate(rhs, t0, t1, y0, history: _History, max_step, rtol, atol,
               min_step=1e-10):
    """Adaptive Dormand-Prince 4(5) from t0 to t1, recording dense history."""
    t, y = t0, y0.copy()
    f = rhs(t, y)
    if not history.ts or history.ts[-1] < t:
        history.push(t, y, f)
    h = max_step
    while True:
        rem = t1 - t
        if rem <= 1e-12 * max(1.0, abs(t1)):
            break
        h = min(h, rem, max_step)
        k = [f]
        for i in range(1, 7):
            yi = y + h * sum(a * kk for a, kk in zip(_DP_A[i], k))
            k.append(rhs(t + _DP_C[i] * h, yi))
        k = np.array(k)
        y5 = y + h * (_DP_B5 @ k)
        y4 = y + h * (_DP_B4 @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.sqrt(np.mean(((y5 - y4) / scale) ** 2))
        if err <= 1.0 or h <= min_step * 10:
            t = t + h
            y = y5
            f = k[6]   # FSAL
            history.push(t, y, f)
        if not np.all(np.isfinite(y)):
            raise SimulationError(
                f"integrator diverged at t = {t:.4f}; last state recorded")
        fac = 0.9 * err ** -0.2 if err > 0 else 5.0
        h = h * min(5.0, max(0.2, fac))
        if h < min_step and rem > 1e-6:
            raise SimulationError(
                f"step size collapsed below {min_step} at t = {t:.4f}")
    return y


class _GroupLayout:
    """State indexing for one group within the global state vector."""

    def __init__(self, offset: int, scenario_fidelity: str, group: MrcGroup):
        self.diesel = slice(offset, offset + 3)
        self.ref = slice(offset + 3, offset + 6)
        n_w = {"reduced1": 1, "linear10": 10, "nonlinear": 10}[scenario_fidelity]
        self.wtg = slice(offset + 6, offset + 6 + n_w)
        offset += 6 + n_w
        self.washout = None
        if group.washout is not None:
            self.washout = offset
            offset += 1
        self.end = offset

    def feedback_indices(self) -> np.ndarray:
        """[d_omega_d, dP_m, dP_v, d_omega_r, ref(3)] positions."""
        d = self.diesel.start
        return np.array([d, d + 1, d + 2, self.omega_r_index,
                         self.ref.start, self.ref.start + 1, self.ref.start + 2])

    @property
    def omega_r_index(self) -> int:
        # omega_r is the WTG block's speed state: index 4 in the 10-state
        # blocks, the single state of the reduced block
        return self.wtg.start + (4 if self.wtg.stop - self.wtg.start == 10 else 0)


def _prepare_nonlinear(group: MrcGroup):
    if group.dfig is None:
        raise ModelError("nonlinear fidelity needs the group's DfigModel")
    if group.op is None:
        op, mcal = solve_equilibrium(group.dfig, EquilibriumTargets())
        group.op = op
        group.dfig = mcal
    return group


class _AlgebraicSolver:
    """Warm-started Newton solve of the DFIG algebraic block."""

    def __init__(self, model: DfigModel, op: DfigOperatingPoint):
        self.m = model
        self.base_inputs = op.inputs
        self.a = op.algebraic.as_array()
        self.J = None   # chord Jacobian, refreshed when convergence slows

    def _jacobian(self, x, a, inputs):
        J = np.empty((10, 10))
        for k in range(10):
            h = 1e-7 * max(1.0, abs(a[k]))
            ap = a.copy(); ap[k] += h
            am = a.copy(); am[k] -= h
            J[:, k] = (dfig_residual(x, ap, inputs, self.m)[1]
                       - dfig_residual(x, am, inputs, self.m)[1]) / (2 * h)
        return J

    def solve(self, x: np.ndarray, u_ie: float, tol=1e-10, max_iter=25):
        inputs = replace(self.base_inputs, u_ie=u_ie)
        a = self.a.copy()
        for it in range(max_iter):
            _, g = dfig_residual(x, a, inputs, self.m)
            if np.max(np.abs(g)) < tol:
                break
            if self.J is None or it >= 4:
                self.J = self._jacobian(x, a, inputs)
            try:
                a = a + np.linalg.solve(self.J, -g)
            except np.linalg.LinAlgError as exc:
                worst = int(np.argmax(np.abs(g)))
                raise SimulationError(
                    f"DFIG algebraic solve singular (constraint {worst})") from exc
        else:
            raise SimulationError(
                f"DFIG algebraic solve did not converge (residual "
                f"{np.max(np.abs(g)):.2e})")
        self.a = a
        f, _ = dfig_residual(x, a, inputs, self.m)
        return a, f


def simulate(s: Scenario) -> Trajectory:
    """Integrate the scenario and sample signals on a uniform grid."""
    layouts = []
    offset = 0
    for g in s.groups:
        if s.fidelity != "reduced1" and g.n_wtg != 1:
            raise ModelError("multi-WTG groups run at reduced1 fidelity "
                             "(aggregate first)")
        layouts.append(_GroupLayout(offset, s.fidelity, g))
        offset = layouts[-1].end
    n_states = offset

    diesel_ss = [diesel_state_space(g.diesel) for g in s.groups]
    ref_ss = [reference_state_space(g.reference) for g in s.groups]
    alg = []
    wtg_lin = []
    for g in s.groups:
        if s.fidelity == "nonlinear":
            _prepare_nonlinear(g)
            alg.append(_AlgebraicSolver(g.dfig, g.op))
            wtg_lin.append(None)
        elif s.fidelity == "linear10":
            if g.wtg_linear is None:
                raise ModelError("linear10 fidelity needs group.wtg_linear")
            wtg_lin.append(g.wtg_linear)
            alg.append(None)
        else:
            alg.append(None)
            wtg_lin.append(None)

    track = s.delay.sample(s.duration)
    history = _History(n_states)

    def in_path(g: MrcGroup, d: Disturbance) -> bool:
        return d.bus in g.pom_buses

    def served(g: MrcGroup, d: Disturbance) -> bool:
        return d.bus in g.served_buses

    def disturbances_at(t: float, g: MrcGroup):
        pom = 0.0
        load = 0.0
        for d in s.disturbances:
            if t >= d.time and served(g, d):
                load += g.share * d.magnitude
                if in_path(g, d):
                    pom += g.share * d.magnitude
        return pom, load

    def control(t: float, y: np.ndarray, gi: int) -> float:
        g = s.groups[gi]
        lay = layouts[gi]
        u = 0.0
        if g.K is not None:
            idx = lay.feedback_indices()
            xd = apply_delay(track, history, t, idx) if history.ts else y[idx]
            if track(t) == 0.0:
                xd = y[idx]
            # feedback states are speed-Hz / power-pu, matching the plant model
            u = float(np.asarray(g.K).reshape(7) @ xd)
        if g.washout is not None and lay.washout is not None:
            # u_w = (K w_pu - x_w)/T, state T x_w' = -x_w + K w_pu
            w_pu = y[lay.diesel.start] / g.diesel.f_bar
            xw = y[lay.washout]
            u += (g.washout.K_ie * w_pu - xw) / g.washout.T
        return u

    def rhs(t, y):
        dy = np.zeros_like(y)
        for gi, g in enumerate(s.groups):
            lay = layouts[gi]
            u = control(t, y, gi)
            pom, load = disturbances_at(t, g)

            # WTG block
            if s.fidelity == "reduced1":
                dwr = y[lay.wtg.start]
                dy[lay.wtg.start] = g.reduced.A_rd * dwr + g.reduced.B_rd * u
                dP_g = g.n_wtg * (g.reduced.C_rd * dwr + g.reduced.D_rd * u)
            elif s.fidelity == "linear10":
                ss = wtg_lin[gi]
                dy[lay.wtg] = ss.A @ y[lay.wtg] + ss.B[:, 0] * u
                dP_g = float(ss.C @ y[lay.wtg] + ss.D[0, 0] * u)
            else:
                x_abs = y[lay.wtg] + alg[gi].x_eq
                a, f = alg[gi].solve(x_abs, u)
                dy[lay.wtg] = f
                dP_g = a[6] - alg[gi].p_eq

            dP_e = load - dP_g
            dss = diesel_ss[gi]
            dy[lay.diesel] = dss.A @ y[lay.diesel] + dss.E[:, 0] * dP_e
            rss = ref_ss[gi]
            dy[lay.ref] = rss.A @ y[lay.ref] + rss.E[:, 0] * pom
            if lay.washout is not None:
                w_pu = y[lay.diesel.start] / g.diesel.f_bar
                dy[lay.washout] = (-y[lay.washout] + g.washout.K_ie * w_pu) / g.washout.T
        return dy

    # attach equilibrium anchors for the nonlinear fidelity
    for gi, g in enumerate(s.groups):
        if s.fidelity == "nonlinear":
            alg[gi].x_eq = g.op.state.as_array()
            alg[gi].p_eq = g.op.algebraic.P_g

    # integrate segment-wise across discontinuities
    events = sorted({d.time for d in s.disturbances if 0 < d.time < s.duration}
                    | set(np.asarray(track.breakpoints)[
                        (track.breakpoints > 0) & (track.breakpoints < s.duration)]))
    y = np.zeros(n_states)
    t_prev = 0.0
    for t_ev in list(events) + [s.duration]:
        y = _integrate(rhs, t_prev, t_ev, y, history, s.max_step, s.rtol, s.atol)
        t_prev = t_ev

    # sample the trajectory
    t_out = np.arange(0.0, s.duration + s.output_dt / 2, s.output_dt)
    cols: dict[str, np.ndarray] = {}
    full = np.array([history.eval(t, slice(0, n_states)) for t in t_out])
    for gi, g in enumerate(s.groups):
        lay = layouts[gi]
        tag = f"g{gi}_" if len(s.groups) > 1 else ""
        f_bar = g.diesel.f_bar
        om_d = full[:, lay.diesel.start] / f_bar
        om_hat = full[:, lay.ref.start] / f_bar
        cols[f"{tag}d_omega_d"] = om_d
        cols[f"{tag}d_omega_hat"] = om_hat
        cols[f"{tag}e"] = om_d - om_hat
        cols[f"{tag}dP_m"] = full[:, lay.diesel.start + 1]
        cols[f"{tag}dP_v"] = full[:, lay.diesel.start + 2]
        us = np.zeros_like(t_out)
        pg = np.zeros_like(t_out)
        pom_c = np.zeros_like(t_out)
        for i, t in enumerate(t_out):
            yv = full[i]
            # reconstruct u with the same delayed lookup used in the rhs
            if g.K is not None:
                idx = layouts[gi].feedback_indices()
                xd = history.eval(t - track(t), idx) if track(t) > 0 else yv[idx]
                u = float(np.asarray(g.K).reshape(7) @ xd)
            else:
                u = 0.0
            if g.washout is not None and lay.washout is not None:
                u += (g.washout.K_ie * yv[lay.diesel.start] / f_bar
                      - yv[lay.washout]) / g.washout.T
            us[i] = u
            if s.fidelity == "reduced1":
                pg[i] = g.n_wtg * (g.reduced.C_rd * yv[lay.wtg.start]
                                   + g.reduced.D_rd * u)
            elif s.fidelity == "linear10":
                ss = wtg_lin[gi]
                pg[i] = float(ss.C @ yv[lay.wtg] + ss.D[0, 0] * u)
            else:
                a, _ = alg[gi].solve(yv[lay.wtg] + alg[gi].x_eq, u)
                pg[i] = a[6] - alg[gi].p_eq
            pom_c[i] = disturbances_at(t, g)[0]
        cols[f"{tag}u_ie"] = us
        cols[f"{tag}dP_g"] = pg
        cols[f"{tag}dP_g_per_wtg"] = pg / g.n_wtg
        cols[f"{tag}dP_pom"] = pom_c
        if s.fidelity == "reduced1":
            cols[f"{tag}omega_r"] = full[:, lay.wtg.start]
        elif s.fidelity == "linear10":
            cols[f"{tag}omega_r"] = full[:, lay.omega_r_index]
        else:
            cols[f"{tag}omega_r"] = (full[:, lay.omega_r_index]
                                     + alg[gi].x_eq[4])
    return Trajectory(t=t_out, columns=cols)


def simulate_fidelity_comparison(base: Scenario, u_profile) -> dict:
    """Open-loop WTG response (dP_g, omega_r) at the three fidelities under
    a common injected u_ie profile; the diesel/reference loops are bypassed
    by running the WTG alone."""
    out = {}
    g = base.groups[0]
    for fid in FIDELITIES:
        s = replace_scenario_fidelity(base, fid)
        gg = s.groups[0]
        lay = _GroupLayout(0, fid, gg)
        if fid == "nonlinear":
            _prepare_nonlinear(gg)
            solver = _AlgebraicSolver(gg.dfig, gg.op)
            x_eq = gg.op.state.as_array()
            p_eq = gg.op.algebraic.P_g
        n_w = lay.wtg.stop - lay.wtg.start

        def rhs(t, y, fid=fid, gg=gg):
            u = u_profile(t)
            if fid == "reduced1":
                return np.array([gg.reduced.A_rd * y[0] + gg.reduced.B_rd * u])
            if fid == "linear10":
                ss = gg.wtg_linear
                return ss.A @ y + ss.B[:, 0] * u
            a, f = solver.solve(y + x_eq, u)
            return f

        hist = _History(n_w)
        y = np.zeros(n_w)
        y = _integrate(rhs, 0.0, base.duration, y, hist, base.max_step,
                       base.rtol, base.atol)
        t_out = np.arange(0.0, base.duration + base.output_dt / 2, base.output_dt)
        ys = np.array([hist.eval(t, slice(0, n_w)) for t in t_out])
        us = np.array([u_profile(t) for t in t_out])
        if fid == "reduced1":
            pg = gg.reduced.C_rd * ys[:, 0] + gg.reduced.D_rd * us
            wr = ys[:, 0]
        elif fid == "linear10":
            ss = gg.wtg_linear
            pg = ys @ ss.C[0] + ss.D[0, 0] * us
            wr = ys[:, 4]
        else:
            pg = np.empty_like(t_out)
            for i, t in enumerate(t_out):
                a, _ = solver.solve(ys[i] + x_eq, us[i])
                pg[i] = a[6] - p_eq
            wr = ys[:, 4]
        out[fid] = Trajectory(t=t_out, columns={"dP_g": pg, "omega_r": wr,
                                                "u_ie": us})
    return out


def replace_scenario_fidelity(s: Scenario, fidelity: str) -> Scenario:
    return Scenario(name=s.name, groups=s.groups, disturbances=s.disturbances,
                    delay=s.delay, fidelity=fidelity, duration=s.duration,
                    max_step=s.max_step, output_dt=s.output_dt, rtol=s.rtol,
                    atol=s.atol)


def aggregate_wtgs(units: list[ReducedModel], bases: list[float]) -> ReducedModel:
    """Parallel aggregation of near-identical units, expressed on the first
    unit's base: power rows add (base-weighted), the shared speed dynamics
    are base-averaged, u_ie broadcasts equally."""
    if not units:
        raise ModelError("no units to aggregate")
    if len(units) != len(bases):
        raise ModelError("units and bases must pair up")
    a_ref = units[0].A_rd
    for u in units:
        if abs(u.A_rd - a_ref) > 0.25 * abs(a_ref):
            raise ModelError(
                f"unit A_rd {u.A_rd:.3f} differs from {a_ref:.3f} by more "
                "than 25%; aggregation invalid")
    b0 = bases[0]
    total = sum(bases)
    a = sum(u.A_rd * b for u, b in zip(units, bases)) / total
    b_rd = sum(u.B_rd * b for u, b in zip(units, bases)) / total
    c = sum(u.C_rd * b for u, b in zip(units, bases)) / b0
    d = sum(u.D_rd * b for u, b in zip(units, bases)) / b0
    return replace(units[0], A_rd=a, B_rd=b_rd, C_rd=c, D_rd=d)
