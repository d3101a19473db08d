"""DFIG steady state and small-signal analysis.

Solves the closed DAE for an operating point at prescribed terminal targets,
calibrates the aerodynamic curve through that point, reduces the index-1 DAE
to a 10-state linear model, and computes eigenvalues / participation factors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .models import (
    DfigAlgebraic,
    DfigInputs,
    DfigModel,
    DfigState,
    LinearStateSpace,
    ModelError,
    MPPT_BAND,
    currents_from_fluxes,
    dfig_residual,
    mppt_speed,
    DFIG_STATES,
)


class ConvergenceError(RuntimeError):
    """Newton iteration failed; carries the last residual norm."""

    def __init__(self, msg, residual=None, condition=None):
        super().__init__(msg)
        self.residual = residual
        self.condition = condition


@dataclass(frozen=True)
class EquilibriumTargets:
    """Terminal operating condition.

    P_g is in turbine-rated per unit (MW / rated MW); it is converted to the
    machine base internally via the model's eta.  Q_g and the stator voltage
    are in machine per unit.
    """

    P_g: float = 0.8
    Q_g: float = 0.0
    v_qs: float = 1.0
    v_ds: float = 0.0
    omega_s: float = 1.0


@dataclass(frozen=True)
class DfigOperatingPoint:
    state: DfigState
    algebraic: DfigAlgebraic
    inputs: DfigInputs

    def max_residual(self, m: DfigModel) -> float:
        f, g = dfig_residual(self.state, self.algebraic, self.inputs, m)
        return max(np.max(np.abs(f)), np.max(np.abs(g)))


# indices of solved unknowns within the stacked [state(10); algebraic(10)] vector
_ALG_SOLVED = [0, 1, 2, 3, 4, 5, 8, 9]   # i_qs, i_ds, i_qr, i_dr, v_qr, v_dr, T_e, T_m
# equation rows kept: all derivatives except x2 (reactive PI, identically zero
# at fixed Q_g target) and all residuals except the torque-curve row (the
# curve is calibrated afterwards through the solved point).
_F_ROWS = [0, 1, 2, 3, 4, 5, 6, 8, 9]
_G_ROWS = [0, 1, 2, 3, 4, 5, 6, 7, 8]


def solve_equilibrium(m: DfigModel, targets: EquilibriumTargets,
                      tol: float = 1e-11, max_iter: int = 40,
                      ) -> tuple[DfigOperatingPoint, DfigModel]:
    """Newton-solve the steady-state DAE at fixed (P_g, Q_g, v_qs, v_ds).

    Returns the operating point and a copy of the model whose aerodynamic
    curve is calibrated to supply exactly the equilibrium torque at the
    configured wind speed, so the full 20-equation residual vanishes.
    """
    P_machine = m.eta * targets.P_g
    w0 = mppt_speed(P_machine, m.eta)
    if not (MPPT_BAND[0] < w0 < MPPT_BAND[1]):
        raise ModelError(
            f"equilibrium speed {w0:.3f} pinned at the MPPT clamp; "
            "target power outside the curve's interior validity band")
    inputs = DfigInputs(u_ie=0.0, Q_g_star=targets.Q_g, v_ds=targets.v_ds,
                        v_qs=targets.v_qs, omega_s=targets.omega_s,
                        wind_speed=m.wind_speed)

    # initial guess: nominal fluxes, MPPT speed, currents from flux algebra
    psi0 = np.array([0.0, 1.0, 0.0, 1.0])
    i0 = currents_from_fluxes(psi0, m)
    z = np.zeros(18)
    z[0:4] = psi0
    z[4] = w0
    z[5] = w0
    z[10:14] = i0 + np.array([-P_machine, 0.0, P_machine, 0.25])
    z[16:18] = [-0.6, -0.6]

    def unpack(z):
        x = z[:10]
        a = np.empty(10)
        a[_ALG_SOLVED[:6]] = z[10:16]
        a[6] = P_machine
        a[7] = targets.Q_g
        a[8:10] = z[16:18]
        return x, a

    def F(z):
        x, a = unpack(z)
        f, g = _residual_raw(x, a, inputs, m)
        return np.concatenate([f[_F_ROWS], g[_G_ROWS]])

    r = F(z)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        J = _fd_jacobian(F, z, r)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(J)
            raise ConvergenceError(
                f"singular Jacobian in equilibrium solve (cond~{cond:.2e})",
                residual=float(np.max(np.abs(r))), condition=cond) from exc
        # damped update with simple backtracking
        lam = 1.0
        for _ in range(8):
            z_new = z + lam * step
            r_new = F(z_new)
            if np.max(np.abs(r_new)) < np.max(np.abs(r)) or lam < 1e-3:
                break
            lam *= 0.5
        z, r = z_new, r_new
    else:
        raise ConvergenceError(
            f"equilibrium Newton did not converge in {max_iter} iterations; "
            f"last max-residual {np.max(np.abs(r)):.3e}",
            residual=float(np.max(np.abs(r))))

    x, a = unpack(z)
    state = DfigState.from_array(x)
    algebraic = DfigAlgebraic.from_array(a)
    m_cal = calibrate_torque_curve(m, state, algebraic)
    op = DfigOperatingPoint(state=state, algebraic=algebraic, inputs=inputs)
    return op, m_cal


def calibrate_torque_curve(m: DfigModel, state: DfigState,
                           algebraic: DfigAlgebraic) -> DfigModel:
    """Scale the power curve so it supplies exactly the equilibrium torque at
    the operating speed and configured wind speed."""
    lam = m.aero.tip_speed_gain * state.omega_r / m.wind_speed
    cp = m.aero.cp(lam)
    if cp <= 0:
        raise ModelError(f"C_p({lam:.2f}) = {cp:.4f} <= 0; tip-speed mapping invalid")
    scale = -algebraic.T_m * state.omega_r / (cp * m.wind_speed**3)
    return m.with_aero(replace(m.aero, torque_scale=scale))


def _residual_raw(x, a, inputs, m):
    return dfig_residual(x, a, inputs, m)


def _fd_jacobian(func, z, r0=None, rel_step=None):
    """Central finite-difference Jacobian with per-variable adaptive step."""
    if rel_step is None:
        rel_step = np.cbrt(np.finfo(float).eps)
    n = z.size
    r0 = func(z) if r0 is None else r0
    J = np.empty((r0.size, n))
    for k in range(n):
        h = rel_step * max(1.0, abs(z[k]))
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        J[:, k] = (func(zp) - func(zm)) / (2 * h)
    return J


def linearize(m: DfigModel, op: DfigOperatingPoint,
              rel_step: float | None = None) -> LinearStateSpace:
    """10-state linear model about the operating point.

    The algebraic block is eliminated by index-1 reduction
    (A = f_x - f_a g_a^{-1} g_x, likewise B); the output row is the active
    power deviation.  Jacobians are central finite differences.
    """
    x0 = op.state.as_array()
    a0 = op.algebraic.as_array()
    u0 = op.inputs

    def f_of(x, a, u_ie):
        f, _ = dfig_residual(x, a, replace(u0, u_ie=u_ie), m)
        return f

    def g_of(x, a, u_ie):
        _, g = dfig_residual(x, a, replace(u0, u_ie=u_ie), m)
        return g

    fx = _fd_jacobian(lambda v: f_of(v, a0, 0.0), x0, rel_step=rel_step)
    fa = _fd_jacobian(lambda v: f_of(x0, v, 0.0), a0, rel_step=rel_step)
    gx = _fd_jacobian(lambda v: g_of(v, a0, 0.0), x0, rel_step=rel_step)
    ga = _fd_jacobian(lambda v: g_of(x0, v, 0.0), a0, rel_step=rel_step)
    fu = _fd_jacobian(lambda v: f_of(x0, a0, v[0]), np.zeros(1), rel_step=rel_step)
    gu = _fd_jacobian(lambda v: g_of(x0, a0, v[0]), np.zeros(1), rel_step=rel_step)

    try:
        sol = np.linalg.solve(ga, np.column_stack([gx, gu]))
    except np.linalg.LinAlgError as exc:
        # name the worst-conditioned constraint via the smallest pivot proxy
        diag = np.abs(np.diag(np.linalg.qr(ga, mode="r")))
        bad = int(np.argmin(diag))
        raise ModelError(
            f"algebraic Jacobian singular; offending constraint index {bad}") from exc
    A = fx - fa @ sol[:, :10]
    B = (fu[:, 0] - fa @ sol[:, 10]).reshape(10, 1)
    # output dP_g: algebraic variable 6 eliminated in terms of states/input
    C = (-sol[6, :10]).reshape(1, 10)
    D = np.array([[-sol[6, 10]]])
    return LinearStateSpace(
        A=A, B=B, E=np.zeros((10, 0)), C=C, D=D, F=np.zeros((1, 0)),
        state_labels=DFIG_STATES, input_labels=("u_ie",),
        output_labels=("dP_g",),
    )


@dataclass(frozen=True)
class ModalAnalysis:
    eigenvalues: np.ndarray          # sorted by |Re| ascending
    right: np.ndarray                # columns are right eigenvectors
    left: np.ndarray                 # rows are left eigenvectors (W = V^-1)
    participation: np.ndarray        # states x modes, columns sum to 1

    def mode_of_state(self, k: int) -> int:
        """Index of the mode in which state k participates the most; ties
        broken toward smaller |Re|."""
        col = self.participation[k, :]
        best = np.flatnonzero(col >= col.max() - 1e-12)
        return int(best[np.argmin(np.abs(self.eigenvalues[best].real))])


def modal_analysis(A: np.ndarray, resid_tol: float = 1e-8) -> ModalAnalysis:
    """Eigen/participation analysis of a dense state matrix."""
    A = np.asarray(A, dtype=float)
    lam, V = np.linalg.eig(A)
    order = np.argsort(np.abs(lam.real), kind="stable")
    lam, V = lam[order], V[:, order]
    cond = np.linalg.cond(V)
    if cond > 1e12:
        raise ModelError(
            f"state matrix is near-defective (eigenvector condition {cond:.2e}); "
            "participation factors unreliable")
    W = np.linalg.inv(V)
    resid = np.max(np.abs(A @ V - V * lam)) / max(np.max(np.abs(A)), 1e-30)
    if resid > resid_tol:
        raise ModelError(f"eigen residual {resid:.2e} exceeds {resid_tol:.1e}")
    raw = np.abs(V * W.T)
    participation = raw / raw.sum(axis=0, keepdims=True)
    return ModalAnalysis(eigenvalues=lam, right=V, left=W,
                         participation=participation)
