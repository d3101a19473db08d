"""Evaluation quantities derived from closed-loop trajectories.

Nadir / RoCoF / steady-state frequency, tracking-error norms, the fitted
emulated inertia constant, and frequency-domain tracking-gain estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .models import ModelError


@dataclass
class InertiaFit:
    H_ie: float | None
    residual: float
    window: tuple
    identifiable: bool = True


@dataclass
class ScenarioReport:
    nadir_hz: float
    time_of_nadir: float
    max_rocof_hz_s: float
    steady_state_hz: float
    tracking_rms: float
    tracking_peak: float
    inertia: InertiaFit | None = None
    gain_ratio: float | None = None       # |e|_2 / |w|_2 over the horizon
    gain_bound: float | None = None       # sqrt(gamma) when available

    def lines(self) -> list[str]:
        out = [
            f"nadir                 {self.nadir_hz:9.4f} Hz at t = {self.time_of_nadir:.3f} s",
            f"max |RoCoF|           {self.max_rocof_hz_s:9.4f} Hz/s",
            f"steady-state deviation{self.steady_state_hz:9.4f} Hz",
            f"tracking error        rms {self.tracking_rms:.3e}, peak {self.tracking_peak:.3e} (p.u.)",
        ]
        if self.inertia is not None:
            if self.inertia.identifiable:
                out.append(f"fitted inertia        {self.inertia.H_ie:9.4f} s "
                           f"(residual {self.inertia.residual:.2e}, "
                           f"window {self.inertia.window})")
            else:
                out.append("fitted inertia        unidentifiable (derivative energy ~ 0)")
        if self.gain_ratio is not None:
            bound = f" <= sqrt(gamma) = {self.gain_bound:.3f}" if self.gain_bound else ""
            out.append(f"|e|2/|w|2             {self.gain_ratio:9.4f}{bound}")
        return out


def fit_emulated_inertia(t: np.ndarray, d_omega_pu: np.ndarray,
                         dP_g: np.ndarray, window: tuple[float, float],
                         smooth_width: int = 51) -> InertiaFit:
    """Least-squares fit of the emulated inertia constant over a window.

    The supportive convention is dP_g = -2 H d(omega)/dt in per unit: the
    unit injects power while frequency falls, so a supportive response
    yields positive H.  The speed derivative comes from a local quadratic
    (Savitzky-Golay) filter.
    """
    t = np.asarray(t)
    lo, hi = window
    if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12 or hi <= lo:
        raise ModelError(f"window {window} outside trajectory [{t[0]}, {t[-1]}]")
    dt = float(t[1] - t[0])
    width = min(smooth_width, (len(t) // 2) * 2 - 1)
    if width < 5:
        width = 5
    if width % 2 == 0:
        width += 1
    dom = scipy.signal.savgol_filter(d_omega_pu, width, polyorder=2,
                                     deriv=1, delta=dt)
    mask = (t >= lo) & (t <= hi)
    x = -2.0 * dom[mask]
    y = np.asarray(dP_g)[mask]
    energy = float(x @ x)
    if energy < 1e-16 * len(x):
        return InertiaFit(H_ie=None, residual=float(np.sqrt(np.mean(y**2))),
                          window=window, identifiable=False)
    h = float(x @ y) / energy
    resid = float(np.sqrt(np.mean((y - h * x) ** 2)))
    return InertiaFit(H_ie=h, residual=resid, window=window)


def frequency_metrics(t: np.ndarray, d_omega_pu: np.ndarray, f_bar: float = 60.0,
                      rocof_window: float = 0.1,
                      tail_fraction: float = 0.1) -> dict:
    """Nadir, windowed RoCoF, and steady-state deviation of a speed trace."""
    t = np.asarray(t)
    f = f_bar + f_bar * np.asarray(d_omega_pu)
    i_min = int(np.argmin(f))
    dt = float(t[1] - t[0])
    k = max(1, int(round(rocof_window / dt)))
    slope = (f[k:] - f[:-k]) / (k * dt)
    n_tail = max(1, int(len(t) * tail_fraction))
    return {
        "nadir_hz": float(f[i_min]),
        "time_of_nadir": float(t[i_min]),
        "max_rocof_hz_s": float(np.max(np.abs(slope))) if len(slope) else 0.0,
        "steady_state_hz": float(np.mean(f[-n_tail:]) - f_bar),
    }


def build_report(traj, group_tag: str = "", f_bar: float = 60.0,
                 inertia_window: tuple | None = None,
                 gain_bound: float | None = None) -> ScenarioReport:
    """Assemble a ScenarioReport from a Trajectory's signal columns."""
    om = traj[f"{group_tag}d_omega_d"]
    e = traj[f"{group_tag}e"]
    fm = frequency_metrics(traj.t, om, f_bar)
    fit = None
    if inertia_window is not None:
        fit = fit_emulated_inertia(traj.t, om, traj[f"{group_tag}dP_g"],
                                   inertia_window)
    w = traj[f"{group_tag}dP_pom"]
    ratio = None
    if np.any(w != 0):
        ratio = float(np.linalg.norm(e) / np.linalg.norm(np.vstack([w, w])))
    return ScenarioReport(
        nadir_hz=fm["nadir_hz"], time_of_nadir=fm["time_of_nadir"],
        max_rocof_hz_s=fm["max_rocof_hz_s"],
        steady_state_hz=fm["steady_state_hz"],
        tracking_rms=float(np.sqrt(np.mean(e ** 2))),
        tracking_peak=float(np.max(np.abs(e))),
        inertia=fit, gain_ratio=ratio, gain_bound=gain_bound,
    )


def hinf_norm(A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray,
              tol: float = 1e-6, max_iter: int = 200) -> float:
    """H-infinity norm of a stable system by Hamiltonian bisection."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    C = np.atleast_2d(C)
    D = np.atleast_2d(D)
    eig = np.linalg.eigvals(A)
    if eig.real.max() >= 0:
        raise ModelError("H-infinity norm undefined: system not stable")
    # lower bound: max of DC gain and |D|; upper from a frequency sweep
    dc = np.linalg.norm(C @ np.linalg.solve(-A, B) + D, 2)
    lo = max(dc, np.linalg.norm(D, 2))
    hi = max(2.0 * lo, 1.0)
    for _ in range(60):
        if not _has_imag_eig(A, B, C, D, hi):
            break
        hi *= 4.0
    else:
        raise ModelError("failed to bracket the H-infinity norm from above")
    lo = max(lo, 1e-12)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if _has_imag_eig(A, B, C, D, mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _has_imag_eig(A, B, C, D, gamma) -> bool:
    """Hamiltonian test: |T|_inf >= gamma iff H(gamma) has an imaginary
    eigenvalue."""
    n = A.shape[0]
    R = gamma * gamma * np.eye(D.shape[1]) - D.T @ D
    try:
        Rinv = np.linalg.inv(R)
    except np.linalg.LinAlgError:
        return True
    H11 = A + B @ Rinv @ D.T @ C
    H12 = B @ Rinv @ B.T
    H21 = -C.T @ (np.eye(C.shape[0]) + D @ Rinv @ D.T) @ C
    H = np.block([[H11, H12], [H21, -H11.T]])
    w = np.linalg.eigvals(H)
    scale = max(1.0, np.abs(w).max())
    return bool(np.any(np.abs(w.real) < 1e-8 * scale))


def delayed_tracking_gain(A_bar, B_tilde, E_bar, C_bar, K, nu: float,
                          w_max: float = 1e3, n_grid: int = 2000,
                          refine: int = 2) -> dict:
    """Peak disturbance-to-error gain of the delayed closed loop on a dense
    frequency grid (delay factor exp(-j w nu) on the feedback channel)."""
    K = np.asarray(K).reshape(1, -1)
    n = A_bar.shape[0]
    grid = np.concatenate([[0.0], np.logspace(-3, math.log10(w_max), n_grid)])
    gmax, wmax_at = 0.0, 0.0
    for _ in range(refine + 1):
        gains = np.empty(len(grid))
        for i, w in enumerate(grid):
            jw = 1j * w
            Acl = A_bar + B_tilde @ K * np.exp(-jw * nu)
            T = C_bar @ np.linalg.solve(jw * np.eye(n) - Acl, E_bar)
            gains[i] = np.linalg.norm(T, 2)
        i = int(np.argmax(gains))
        gmax, wmax_at = float(gains[i]), float(grid[i])
        lo = grid[max(0, i - 1)]
        hi = grid[min(len(grid) - 1, i + 1)]
        grid = np.linspace(lo if lo > 0 else wmax_at / 10 + 1e-6, hi, 200)
    return {"max_gain": gmax, "at_frequency": wmax_at, "grid_points": n_grid}


def tracking_gain_estimate(aug, K, delay_free: bool = True,
                           nu: float | None = None) -> dict:
    """Closed-loop disturbance-to-error gain: exact Hamiltonian bisection
    for the undelayed loop, dense-grid estimate when a delay is given."""
    K = np.asarray(K).reshape(1, -1)
    if delay_free or nu in (None, 0.0):
        Acl = aug.A_bar + aug.B_tilde @ K
        return {"max_gain": hinf_norm(Acl, aug.E_bar, aug.C_bar,
                                      np.zeros((1, aug.E_bar.shape[1]))),
                "method": "hamiltonian-bisection"}
    out = delayed_tracking_gain(aug.A_bar, aug.B_tilde, aug.E_bar, aug.C_bar,
                                K, nu)
    out["method"] = "frequency-grid"
    return out
