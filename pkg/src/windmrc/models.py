"""Component models of the diesel-wind system.

Diesel generator frequency-response chain (swing + engine + governor), the
desired-inertia reference model, and the DFIG wind turbine generator under
field-oriented rotor-side control, expressed as an index-1 DAE.

Conventions:
  * electrical quantities are per unit on the induction-machine base
    (S_base, V_base); speeds are per unit on omega_bar,
  * diesel / reference speed states are in Hz (the f_bar factors in the
    printed state matrices assume this),
  * torques follow the flux-current product convention in which generating
    torque is negative; the rotor accelerates when T_e - T_m > 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

MPPT_BAND = (0.8, 1.2)

DFIG_STATES = (
    "psi_qs", "psi_ds", "psi_qr", "psi_dr",
    "omega_r", "omega_f_star", "x1", "x2", "x3", "x4",
)
DFIG_ALGEBRAICS = (
    "i_qs", "i_ds", "i_qr", "i_dr", "v_qr", "v_dr",
    "P_g", "Q_g", "T_e", "T_m",
)


class ModelError(ValueError):
    """Invalid model parameters or out-of-validity evaluation."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ModelError(msg)


@dataclass(frozen=True)
class DieselModel:
    """Diesel genset frequency-response parameters (swing, engine, governor)."""

    H_D: float            # inertia constant [s]
    tau_d: float          # engine time constant [s]
    tau_sm: float         # governor time constant [s]
    R_D: float            # droop [p.u.]
    f_bar: float = 60.0   # speed base [Hz]
    rated_power: float = 2.0  # [MW]

    def __post_init__(self):
        _require(self.H_D > 0, f"H_D must be > 0, got {self.H_D}")
        _require(self.tau_d > 0, f"tau_d must be > 0, got {self.tau_d}")
        _require(self.tau_sm > 0, f"tau_sm must be > 0, got {self.tau_sm}")
        _require(self.R_D > 0, f"R_D must be > 0, got {self.R_D}")
        _require(self.f_bar > 0, f"f_bar must be > 0, got {self.f_bar}")


@dataclass(frozen=True)
class ReferenceModel:
    """Frequency-response model with the desired (scheduled) inertia."""

    H_hat: float          # desired inertia [s]
    tau_d_hat: float = 0.2
    tau_sm_hat: float = 0.1
    R_hat: float = 0.05
    D_hat: float = 0.0    # load damping
    f_bar: float = 60.0

    def __post_init__(self):
        _require(self.H_hat > 0, f"H_hat must be > 0, got {self.H_hat}")
        _require(self.tau_d_hat > 0, "tau_d_hat must be > 0")
        _require(self.tau_sm_hat > 0, "tau_sm_hat must be > 0")
        _require(self.R_hat > 0, "R_hat must be > 0")
        _require(self.D_hat >= 0, "D_hat must be >= 0")


@dataclass(frozen=True)
class PowerCurve:
    """Rotor power-coefficient aerodynamic model.

    Six-coefficient exponential C_p curve at zero pitch.  tip_speed_gain maps
    per-unit rotor speed to tip-speed ratio (lambda = tip_speed_gain *
    omega_r / v_wind); torque_scale is the single calibration constant fixed
    so the curve supplies the equilibrium torque at the nominal operating
    point (see equilibrium.calibrate_torque_curve).
    """

    tip_speed_gain: float = 68.0
    torque_scale: float = 1.0
    c1: float = 0.5176
    c2: float = 116.0
    c3: float = 0.4
    c4: float = 5.0
    c5: float = 21.0
    c6: float = 0.0068

    def cp(self, lam: float, beta: float = 0.0) -> float:
        lam_i_inv = 1.0 / (lam + 0.08 * beta) - 0.035 / (beta**3 + 1.0)
        return (self.c1 * (self.c2 * lam_i_inv - self.c3 * beta - self.c4)
                * math.exp(-self.c5 * lam_i_inv) + self.c6 * lam)

    def torque(self, omega_r: float, v_wind: float) -> float:
        """Mechanical torque, machine per unit, generating-negative."""
        _require(omega_r > 0, "omega_r must be > 0 for torque evaluation")
        lam = self.tip_speed_gain * omega_r / v_wind
        return -self.torque_scale * self.cp(lam) * v_wind**3 / omega_r


@dataclass(frozen=True)
class DfigModel:
    """DFIG wind turbine generator with rotor-side converter control."""

    R_s: float = 0.023
    L_ls: float = 0.18
    R_r: float = 0.016
    L_lr: float = 0.16
    L_m: float = 2.9
    H_T: float = 4.0           # combined turbine+generator inertia [s]
    omega_bar: float = 377.0   # speed base [rad/s]
    K_P_T: float = 2.0
    K_I_T: float = 0.1
    K_P_Q: float = 1.0
    K_I_Q: float = 5.0
    K_P_C: float = 0.6
    K_I_C: float = 8.0
    omega_c: float = 0.0011    # speed-reference filter cutoff [rad/s]
    eta: float = 1.0 / 1.1     # turbine-rated / machine-base power ratio
    S_base: float = 1.1        # [MVA]
    V_base: float = 575.0      # [V]
    wind_speed: float = 10.0   # [m/s]
    aero: PowerCurve = field(default_factory=PowerCurve)

    @property
    def L_s(self) -> float:
        return self.L_ls + self.L_m

    @property
    def L_r(self) -> float:
        return self.L_lr + self.L_m

    @property
    def sigma_L_r(self) -> float:
        return self.L_r - self.L_m**2 / self.L_s

    def __post_init__(self):
        _require(self.H_T > 0, "H_T must be > 0")
        _require(self.omega_bar > 0, "omega_bar must be > 0")
        for name in ("K_P_T", "K_I_T", "K_P_Q", "K_I_Q", "K_P_C", "K_I_C",
                     "omega_c", "eta"):
            _require(getattr(self, name) > 0, f"{name} must be > 0")
        sigma = self.sigma_L_r / self.L_r
        _require(0.0 < sigma < 1.0,
                 f"leakage coefficient sigma={sigma:.4f} outside (0,1)")

    def with_aero(self, aero: PowerCurve) -> "DfigModel":
        return replace(self, aero=aero)


@dataclass(frozen=True)
class DfigState:
    """DFIG state vector, order fixed to the linearization state list."""

    psi_qs: float
    psi_ds: float
    psi_qr: float
    psi_dr: float
    omega_r: float
    omega_f_star: float
    x1: float
    x2: float
    x3: float
    x4: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in DFIG_STATES])

    @classmethod
    def from_array(cls, arr) -> "DfigState":
        arr = np.asarray(arr, dtype=float)
        _require(arr.shape == (10,), f"state vector must have 10 entries, got {arr.shape}")
        return cls(*arr)


@dataclass(frozen=True)
class DfigAlgebraic:
    """DFIG algebraic variables (currents, rotor voltages, powers, torques)."""

    i_qs: float
    i_ds: float
    i_qr: float
    i_dr: float
    v_qr: float
    v_dr: float
    P_g: float
    Q_g: float
    T_e: float
    T_m: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in DFIG_ALGEBRAICS])

    @classmethod
    def from_array(cls, arr) -> "DfigAlgebraic":
        arr = np.asarray(arr, dtype=float)
        _require(arr.shape == (10,), f"algebraic vector must have 10 entries, got {arr.shape}")
        return cls(*arr)


@dataclass(frozen=True)
class DfigInputs:
    """External inputs held during residual evaluation."""

    u_ie: float = 0.0
    Q_g_star: float = 0.0
    v_ds: float = 0.0
    v_qs: float = 1.0
    omega_s: float = 1.0
    wind_speed: float = 10.0


@dataclass
class LinearStateSpace:
    """State-space carrier: dx = A x + B u + E w, y = C x + D u + F w."""

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    C: np.ndarray
    D: np.ndarray
    F: np.ndarray
    state_labels: tuple = ()
    input_labels: tuple = ()
    disturbance_labels: tuple = ()
    output_labels: tuple = ()

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        _require(self.A.shape == (n, n), "A must be square")
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.E = np.asarray(self.E, dtype=float).reshape(n, -1)
        self.C = np.asarray(self.C, dtype=float).reshape(-1, n)
        q = self.C.shape[0]
        self.D = np.asarray(self.D, dtype=float).reshape(q, -1) if np.size(self.D) \
            else np.zeros((q, self.B.shape[1]))
        self.F = np.asarray(self.F, dtype=float).reshape(q, -1) if np.size(self.F) \
            else np.zeros((q, self.E.shape[1]))
        _require(self.D.shape == (q, self.B.shape[1]), "D shape mismatch")
        _require(self.F.shape == (q, self.E.shape[1]), "F shape mismatch")
        for labels, count, what in (
            (self.state_labels, n, "state"),
            (self.input_labels, self.B.shape[1], "input"),
            (self.disturbance_labels, self.E.shape[1], "disturbance"),
            (self.output_labels, q, "output"),
        ):
            if labels:
                _require(len(labels) == count, f"{what} labels have wrong length")
                _require(len(set(labels)) == len(labels), f"{what} labels not unique")

    @property
    def n_states(self) -> int:
        return self.A.shape[0]


def diesel_state_space(m: DieselModel) -> LinearStateSpace:
    """Three-state diesel model; states [d_omega_d (Hz), dP_m, dP_v],
    disturbance dP_e entering the swing row with gain -f_bar/2H_D."""
    A = np.array([
        [0.0, m.f_bar / (2 * m.H_D), 0.0],
        [0.0, -1.0 / m.tau_d, 1.0 / m.tau_d],
        [-1.0 / (m.f_bar * m.tau_sm * m.R_D), 0.0, -1.0 / m.tau_sm],
    ])
    E = np.array([[-m.f_bar / (2 * m.H_D)], [0.0], [0.0]])
    C = np.array([[1.0, 0.0, 0.0]])
    return LinearStateSpace(
        A=A, B=np.zeros((3, 0)), E=E, C=C, D=np.zeros((1, 0)), F=np.zeros((1, 1)),
        state_labels=("d_omega_d", "dP_m", "dP_v"),
        disturbance_labels=("dP_e",),
        output_labels=("d_omega_d",),
    )


def reference_state_space(m: ReferenceModel) -> LinearStateSpace:
    """Three-state reference model; disturbance is the measured power
    deviation at the point of measurement."""
    A = np.array([
        [-m.f_bar * m.D_hat / (2 * m.H_hat), m.f_bar / (2 * m.H_hat), 0.0],
        [0.0, -1.0 / m.tau_d_hat, 1.0 / m.tau_d_hat],
        [-1.0 / (m.f_bar * m.tau_sm_hat * m.R_hat), 0.0, -1.0 / m.tau_sm_hat],
    ])
    E = np.array([[-m.f_bar / (2 * m.H_hat)], [0.0], [0.0]])
    C = np.array([[1.0, 0.0, 0.0]])
    return LinearStateSpace(
        A=A, B=np.zeros((3, 0)), E=E, C=C, D=np.zeros((1, 0)), F=np.zeros((1, 1)),
        state_labels=("d_omega_hat", "dP_m_hat", "dP_v_hat"),
        disturbance_labels=("dP_pom",),
        output_labels=("d_omega_hat",),
    )


def mppt_speed(P_g: float, eta: float) -> float:
    """Optimal rotor speed from the maximum-power-point polynomial, clamped
    to its stated validity band."""
    u = eta * P_g
    _require(u >= 0, f"eta*P_g must be >= 0, got {u}")
    w = -0.67 * u * u + 1.42 * u + 0.51
    return min(max(w, MPPT_BAND[0]), MPPT_BAND[1])


def dfig_residual(state: DfigState | np.ndarray,
                  algebraic: DfigAlgebraic | np.ndarray,
                  inputs: DfigInputs,
                  m: DfigModel) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the DFIG DAE: 10 state derivatives and 10 algebraic residuals.

    Residual order: 4 flux-current relations, active power, reactive power,
    q/d rotor voltage loops, torque definition, torque-curve consistency.
    """
    x = state.as_array() if isinstance(state, DfigState) else np.asarray(state, dtype=float)
    a = algebraic.as_array() if isinstance(algebraic, DfigAlgebraic) else np.asarray(algebraic, dtype=float)
    psi_qs, psi_ds, psi_qr, psi_dr, omega_r, omega_f, x1, x2, x3, x4 = x
    i_qs, i_ds, i_qr, i_dr, v_qr, v_dr, P_g, Q_g, T_e, T_m = a

    L_s, L_r, sLr = m.L_s, m.L_r, m.sigma_L_r
    _require(sLr > 0, f"sigma*L_r = {sLr:.4f} <= 0: nonphysical inductances")
    if not (0.5 <= omega_r <= 1.5):
        raise ModelError(f"omega_r = {omega_r:.4f} outside validity range [0.5, 1.5]")

    Psi_s = math.hypot(psi_qs, psi_ds)
    slip = inputs.omega_s - omega_r
    iqr_ref = -L_s / (m.L_m * Psi_s) * (x1 + m.K_P_T * (omega_f - omega_r + inputs.u_ie))
    idr_ref = x2 + m.K_P_Q * (inputs.Q_g_star - Q_g)
    w_star = mppt_speed(P_g, m.eta)

    f = np.array([
        m.omega_bar * (inputs.v_qs - m.R_s * i_qs - inputs.omega_s * psi_ds),
        m.omega_bar * (inputs.v_ds - m.R_s * i_ds + inputs.omega_s * psi_qs),
        m.omega_bar * (v_qr - m.R_r * i_qr - slip * psi_dr),
        m.omega_bar * (v_dr - m.R_r * i_dr + slip * psi_qr),
        (T_e - T_m) / (2 * m.H_T),
        m.omega_c * (w_star - omega_f),
        m.K_I_T * (omega_f - omega_r + inputs.u_ie),
        m.K_I_Q * (inputs.Q_g_star - Q_g),
        m.K_I_C * (iqr_ref - i_qr),
        m.K_I_C * (idr_ref - i_dr),
    ])
    g = np.array([
        -psi_qs + L_s * i_qs + m.L_m * i_qr,
        -psi_ds + L_s * i_ds + m.L_m * i_dr,
        -psi_qr + L_r * i_qr + m.L_m * i_qs,
        -psi_dr + L_r * i_dr + m.L_m * i_ds,
        P_g + (inputs.v_qs * i_qs + inputs.v_ds * i_ds) + (v_qr * i_qr + v_dr * i_dr),
        Q_g + (inputs.v_qs * i_ds - inputs.v_ds * i_qs) + (v_qr * i_dr - v_dr * i_qr),
        -v_qr + x3 + m.K_P_C * (iqr_ref - i_qr) + slip * (sLr * i_dr + Psi_s * m.L_m / L_s),
        -v_dr + x4 + m.K_P_C * (idr_ref - i_dr) - slip * sLr * i_qr,
        -T_e + m.L_m / L_s * (psi_qs * i_dr - psi_ds * i_qr),
        -T_m + m.aero.torque(omega_r, inputs.wind_speed),
    ])
    return f, g


def currents_from_fluxes(psi: np.ndarray, m: DfigModel) -> np.ndarray:
    """Invert the flux-current algebra: [i_qs, i_ds, i_qr, i_dr] from
    [psi_qs, psi_ds, psi_qr, psi_dr]."""
    L = np.array([
        [m.L_s, 0.0, m.L_m, 0.0],
        [0.0, m.L_s, 0.0, m.L_m],
        [m.L_m, 0.0, m.L_r, 0.0],
        [0.0, m.L_m, 0.0, m.L_r],
    ])
    return np.linalg.solve(L, np.asarray(psi, dtype=float))


def _dataclass_to_jsonable(obj):
    d = asdict(obj)
    return {k: (_dataclass_to_jsonable(v) if hasattr(v, "__dataclass_fields__") else v)
            for k, v in d.items()}


def save_models(path: str | Path, **models) -> None:
    """Persist named model records as a JSON document with explicit units."""
    doc = {}
    for name, obj in models.items():
        doc[name] = asdict(obj)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_dfig(doc: dict) -> DfigModel:
    aero = PowerCurve(**doc.pop("aero")) if "aero" in doc else PowerCurve()
    return DfigModel(aero=aero, **doc)


def load_models(path: str | Path) -> dict:
    """Load a model parameter file; returns a dict of model objects keyed by
    the record names used in save_models."""
    doc = json.loads(Path(path).read_text())
    out = {}
    loaders = {"diesel": DieselModel, "reference": ReferenceModel}
    for name, payload in doc.items():
        if name.startswith("dfig"):
            out[name] = load_dfig(dict(payload))
        elif name.split("_")[0] in loaders:
            out[name] = loaders[name.split("_")[0]](**payload)
        else:
            out[name] = payload
    return out
