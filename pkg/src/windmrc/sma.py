"""Selective-modal-analysis reduction of the WTG model to first order.

Partitions the linear model around one retained state, picks the retained
mode by participation, and collapses the remaining dynamics through the
retained-mode resolvent.  Model-reduction error is carried as an interval on
the quasi-static input coupling and surfaces as corners on (B_rd, D_rd).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equilibrium import ModalAnalysis
from .models import LinearStateSpace, ModelError


@dataclass(frozen=True)
class PartitionedSystem:
    """Exact permutation-partition of (A, B, C, D) around one retained state."""

    A11: float
    A12: np.ndarray          # 1 x (n-1)
    A21: np.ndarray          # (n-1) x 1
    A22: np.ndarray          # (n-1) x (n-1)
    B_r: float
    B_z: np.ndarray          # (n-1) x 1
    C_r: float
    C_z: np.ndarray          # 1 x (n-1)
    D: float
    retained: str
    other_labels: tuple

    def reassemble(self) -> np.ndarray:
        n = self.A22.shape[0] + 1
        A = np.empty((n, n))
        A[0, 0] = self.A11
        A[0, 1:] = self.A12
        A[1:, 0] = self.A21[:, 0]
        A[1:, 1:] = self.A22
        return A


@dataclass(frozen=True)
class ReducedModel:
    """First-order WTG surrogate dP_g = C_rd*dw_r + D_rd*u."""

    A_rd: float
    B_rd: float
    C_rd: float
    D_rd: float
    delta_nominal: np.ndarray     # (-A22)^-1 B_z
    delta_fraction: float
    lambda_r: float
    b_rd_span: float              # signed change of B_rd at the +1 delta corner
    d_rd_span: float              # signed change of D_rd at the +1 delta corner

    def __post_init__(self):
        if self.A_rd >= 0:
            raise ModelError(f"retained dynamics unstable: A_rd = {self.A_rd:.4f}")
        rel = abs(self.A_rd - self.lambda_r) / abs(self.lambda_r)
        if rel > 0.25:
            raise ModelError(
                f"A_rd = {self.A_rd:.4f} far from retained mode {self.lambda_r:.4f} "
                f"({rel:.0%}); reduction inconsistent")

    def corner(self, sign: int) -> tuple[float, float]:
        """(B_rd, D_rd) at the +1/-1 model-reduction-error corner.

        One delta perturbs one quasi-static gain vector, so both entries move
        together with the same sign of delta."""
        return (self.B_rd + sign * self.b_rd_span,
                self.D_rd + sign * self.d_rd_span)


def partition(ss: LinearStateSpace, relevant: str = "omega_r") -> PartitionedSystem:
    """Reorder the system so `relevant` is first and split into blocks."""
    if relevant not in ss.state_labels:
        raise ModelError(f"state {relevant!r} not in {ss.state_labels}")
    k = ss.state_labels.index(relevant)
    idx = [k] + [j for j in range(ss.n_states) if j != k]
    A = ss.A[np.ix_(idx, idx)]
    B = ss.B[idx, :]
    C = ss.C[:, idx]
    A22 = A[1:, 1:]
    re_max = float(np.max(np.linalg.eigvals(A22).real))
    if re_max >= 0:
        raise ModelError(
            f"less-relevant block not Hurwitz (max Re eig = {re_max:.3e}); "
            "quasi-static collapse invalid")
    return PartitionedSystem(
        A11=float(A[0, 0]), A12=A[0:1, 1:], A21=A[1:, 0:1], A22=A22,
        B_r=float(B[0, 0]), B_z=B[1:, :],
        C_r=float(C[0, 0]), C_z=C[0:1, 1:],
        D=float(ss.D[0, 0]),
        retained=relevant,
        other_labels=tuple(ss.state_labels[j] for j in idx[1:]),
    )


def select_relevant_mode(ma: ModalAnalysis, state_index: int) -> float:
    """Eigenvalue of the mode where the given state participates most."""
    i = ma.mode_of_state(state_index)
    lam = ma.eigenvalues[i]
    if abs(lam.imag) > 1e-9 * max(1.0, abs(lam.real)):
        raise ModelError(
            f"retained mode {lam:.4f} is complex; first-order reduction "
            "requires a real dominant mode")
    return float(lam.real)


def reduce(parts: PartitionedSystem, lambda_r: float,
           delta_fraction: float = 0.10) -> ReducedModel:
    """Collapse the less-relevant block through the retained-mode resolvent."""
    n_z = parts.A22.shape[0]
    shifted = lambda_r * np.eye(n_z) - parts.A22
    try:
        X = np.linalg.solve(shifted, parts.A21)           # resolvent * A21
    except np.linalg.LinAlgError as exc:
        raise ModelError(
            f"(lambda_r I - A22) singular at lambda_r = {lambda_r:.4f}") from exc
    M0 = np.linalg.solve(-parts.A22, parts.B_z)           # quasi-static input gain
    A_rd = parts.A11 + (parts.A12 @ X).item()
    C_rd = parts.C_r + (parts.C_z @ X).item()
    B_rd = parts.B_r + (parts.A12 @ M0).item()
    D_rd = parts.D + (parts.C_z @ M0).item()
    return ReducedModel(
        A_rd=A_rd, B_rd=B_rd, C_rd=C_rd, D_rd=D_rd,
        delta_nominal=M0.copy(), delta_fraction=delta_fraction,
        lambda_r=lambda_r,
        b_rd_span=(parts.A12 @ M0).item() * delta_fraction,
        d_rd_span=(parts.C_z @ M0).item() * delta_fraction,
    )
