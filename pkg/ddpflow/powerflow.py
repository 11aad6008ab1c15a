"""
Model-based DistFlow oracle.

Sign convention: ``p_i``/``q_i`` are net *injections*, so loads are
negative. ``P_i``/``Q_i`` is the sending-end flow on the branch from node
``i`` to its parent, ``l_i`` the squared branch current and ``v_i`` the
squared voltage magnitude at node ``i``. The DistFlow equations solved
here are, for every branch ``i -> j``::

    P_i = p_i + sum_{k child of i} (P_k - r_k l_k)
    Q_i = q_i + sum_{k child of i} (Q_k - x_k l_k)
    v_j = v_i - 2 (r_i P_i + x_i Q_i) + |z_i|^2 l_i
    l_i v_i = P_i^2 + Q_i^2
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from .exceptions import (
    DimensionMismatchError,
    NegativeSquaredVoltageError,
    NoConvergenceError,
    ValidationError,
    VoltageCollapseError,
)
from .network import RadialNetwork, build_admittance, incidence_matrices

logger = logging.getLogger(__name__)

DEFAULT_TOL_PF = 1e-10
DEFAULT_MAX_ITER = 100


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class InjectionVector:
    """Nodal net injections for nodes 1..n (p.u., loads negative)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _readonly(self.p))
        object.__setattr__(self, "q", _readonly(self.q))
        if self.p.ndim != 1 or self.p.shape != self.q.shape:
            raise DimensionMismatchError("p and q must be vectors of equal length")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise ValidationError("injections must be finite")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def u(self) -> np.ndarray:
        """Stacked input vector (p, q)."""
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_u(cls, u: np.ndarray) -> "InjectionVector":
        u = np.asarray(u, dtype=float)
        if u.ndim != 1 or u.shape[0] % 2:
            raise DimensionMismatchError("input vector must have even length 2n")
        n = u.shape[0] // 2
        return cls(p=u[:n], q=u[n:])

    @classmethod
    def zeros(cls, n: int) -> "InjectionVector":
        return cls(p=np.zeros(n), q=np.zeros(n))


@dataclass(frozen=True)
class PowerFlowState:
    """DistFlow solution: flows, squared currents and squared voltages."""

    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray  # noqa: E741
    v: np.ndarray
    v0: float
    iterations: int = 0

    def __post_init__(self):
        for name in ("P", "Q", "l", "v"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = self.P.shape[0]
        if any(getattr(self, f).shape != (n,) for f in ("Q", "l", "v")):
            raise DimensionMismatchError("state vectors must share length n")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def y(self) -> np.ndarray:
        """Stacked output vector (P, Q, l, v, v0)."""
        return np.concatenate([self.P, self.Q, self.l, self.v, [self.v0]])

    @classmethod
    def from_y(cls, y: np.ndarray) -> "PowerFlowState":
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or (y.shape[0] - 1) % 4:
            raise DimensionMismatchError("output vector must have length 4n+1")
        n = (y.shape[0] - 1) // 4
        return cls(
            P=y[:n], Q=y[n : 2 * n], l=y[2 * n : 3 * n], v=y[3 * n : 4 * n], v0=y[-1]
        )


@dataclass(frozen=True)
class ResidualReport:
    """Max absolute residual per DistFlow equation family."""

    r_P: float
    r_Q: float
    r_v: float
    r_cone: float

    @property
    def max(self) -> float:
        return max(self.r_P, self.r_Q, self.r_v, self.r_cone)

    def within(self, tol: float) -> bool:
        return self.max <= tol

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.r_P, self.r_Q, self.r_v, self.r_cone)


def _topology(net: RadialNetwork) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    C, D = incidence_matrices(net)
    return C, D, D - np.eye(net.n)


def _parent_voltages(net: RadialNetwork, v: np.ndarray, v0: float) -> np.ndarray:
    ext = np.concatenate([[v0], v])
    return ext[np.asarray(net.parents, dtype=int)]


def residuals(
    net: RadialNetwork, state: PowerFlowState, inj: InjectionVector
) -> ResidualReport:
    """Evaluate the four DistFlow equation families at ``state``."""
    if state.n != net.n or inj.n != net.n:
        raise DimensionMismatchError(
            f"network has {net.n} branches, state {state.n}, injections {inj.n}"
        )
    C, _, _ = _topology(net)
    P, Q, l, v = state.P, state.Q, state.l, state.v
    r_P = P - inj.p - C @ (P - net.r * l)
    r_Q = Q - inj.q - C @ (Q - net.x * l)
    drop = 2 * (net.r * P + net.x * Q) - net.z2 * l
    r_v = _parent_voltages(net, v, state.v0) - v + drop
    r_cone = l * v - P**2 - Q**2
    return ResidualReport(
        r_P=float(np.max(np.abs(r_P), initial=0.0)),
        r_Q=float(np.max(np.abs(r_Q), initial=0.0)),
        r_v=float(np.max(np.abs(r_v), initial=0.0)),
        r_cone=float(np.max(np.abs(r_cone), initial=0.0)),
    )


def solve_distflow(
    net: RadialNetwork,
    inj: InjectionVector,
    v0: float = 1.0,
    tol_pf: float = DEFAULT_TOL_PF,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowState:
    """Backward-forward sweep on the DistFlow equations from a flat start.

    The backward pass aggregates subtree injections and losses (with the
    previous squared currents), the forward pass accumulates voltage drops
    from the slack, then the squared currents are refreshed from the cone
    equation. Stops once every residual family is within ``tol_pf``.
    """
    if v0 <= 0:
        raise ValidationError("slack squared voltage must be positive")
    if inj.n != net.n:
        raise DimensionMismatchError(f"expected {net.n} injections, got {inj.n}")

    _, D, strict = _topology(net)
    r, x, z2 = net.r, net.x, net.z2
    sub_p, sub_q = D @ inj.p, D @ inj.q
    ell = np.zeros(net.n)
    last = float("inf")

    for iteration in range(1, max_iter + 1):
        P = sub_p - strict @ (r * ell)
        Q = sub_q - strict @ (x * ell)
        v = v0 + D.T @ (2 * (r * P + x * Q) - z2 * ell)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise VoltageCollapseError(
                f"non-positive squared voltage after {iteration} sweeps"
            )
        ell = (P**2 + Q**2) / v
        state = PowerFlowState(P=P, Q=Q, l=ell, v=v, v0=v0, iterations=iteration)
        last = residuals(net, state, inj).max
        if last <= tol_pf:
            logger.debug("sweep converged in %d iterations (%.2e)", iteration, last)
            return state

    raise NoConvergenceError(
        f"sweep did not converge in {max_iter} iterations (residual {last:.3e})",
        iterations=max_iter,
        residual=last,
    )


def voltage_magnitudes(state: PowerFlowState) -> np.ndarray:
    """|V_i| = sqrt(v_i) for nodes 1..n."""
    if np.any(state.v < 0):
        raise NegativeSquaredVoltageError(
            f"squared voltage {float(state.v.min()):.3e} below zero"
        )
    return np.sqrt(state.v)


def recover_phasors(net: RadialNetwork, state: PowerFlowState) -> np.ndarray:
    """Complex voltages 0..n from a DistFlow state (angle recovery on a tree).

    Uses conj(V_i) V_j = v_i - z_i conj(S_i) along every branch i -> j.
    """
    vm = np.sqrt(np.concatenate([[state.v0], state.v]))
    theta = np.zeros(net.node_count)
    z = net.r + 1j * net.x
    S = state.P + 1j * state.Q
    shift = np.angle(state.v - z * np.conj(S))
    for child in range(1, net.node_count):
        theta[child] = theta[net.parent(child)] - shift[child - 1]
    return vm * np.exp(1j * theta)


def solve_phasor(
    net: RadialNetwork,
    inj: InjectionVector,
    v0: float = 1.0,
    tol: float = 1e-12,
    max_iter: int = 30,
    start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Polar Newton-Raphson on I = Y V with the slack fixed at sqrt(v0)∠0.

    Returns the complex voltage phasors of nodes 0..n.
    """
    if inj.n != net.n:
        raise DimensionMismatchError(f"expected {net.n} injections, got {inj.n}")
    Y = build_admittance(net).Y
    n = net.n
    S = np.concatenate([[0.0], inj.p + 1j * inj.q])
    if start is None:
        V = np.full(n + 1, np.sqrt(v0), dtype=complex)
    else:
        V = np.array(start, dtype=complex)
        V[0] = np.sqrt(v0)
    Va, Vm = np.angle(V), np.abs(V)
    mismatch = float("inf")

    for iteration in range(max_iter + 1):
        I = Y @ V  # noqa: E741
        mis = V * np.conj(I) - S
        F = np.concatenate([mis[1:].real, mis[1:].imag])
        mismatch = float(np.max(np.abs(F), initial=0.0))
        if mismatch <= tol:
            logger.debug("newton converged in %d iterations", iteration)
            return V
        if iteration == max_iter:
            break

        diag_V = np.diag(V)
        diag_I = np.diag(I)
        diag_Vn = np.diag(V / np.abs(V))
        dS_dVm = diag_V @ np.conj(Y @ diag_Vn) + np.conj(diag_I) @ diag_Vn
        dS_dVa = 1j * diag_V @ np.conj(diag_I - Y @ diag_V)
        J = np.block(
            [
                [dS_dVa[1:, 1:].real, dS_dVm[1:, 1:].real],
                [dS_dVa[1:, 1:].imag, dS_dVm[1:, 1:].imag],
            ]
        )
        try:
            dx = scipy.linalg.solve(J, -F)
        except (scipy.linalg.LinAlgError, ValueError) as e:
            raise VoltageCollapseError(f"singular Newton Jacobian: {e}") from e
        Va[1:] += dx[:n]
        Vm[1:] += dx[n:]
        if np.any(Vm <= 0) or not np.all(np.isfinite(Vm)):
            raise VoltageCollapseError("non-positive voltage magnitude in Newton step")
        V = Vm * np.exp(1j * Va)

    raise NoConvergenceError(
        f"newton did not converge in {max_iter} iterations (mismatch {mismatch:.3e})",
        iterations=max_iter,
        residual=mismatch,
    )
