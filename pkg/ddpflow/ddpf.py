"""
Data-driven DistFlow programs.

Both programs impose the Hankel relation ``[u; y] = [H_u; H_y] g`` with a
free trajectory weight ``g``, written in orthonormal coordinates of the
Hankel column span so the equality stays well conditioned for both
backends, and relax ``l_i v_i = P_i^2 + Q_i^2`` to the
rotated cone ``2 v_i (l_i / 2) >= P_i^2 + Q_i^2``.

- :func:`solve_ddpf_full` minimises total squared current with full outputs.
- :func:`solve_ddpf_reduced` works on measured-node outputs only, adds a
  current slack ``sigma`` (``l' = l + sigma``), squared-norm penalties on
  ``g`` and ``sigma`` through epigraph cones and the slack-draw term
  ``f = -sum(P_i + Q_i)`` over the slack-adjacent measured nodes.
"""

import functools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from .data import HankelSystem, check_static_membership
from .exceptions import (
    DimensionMismatchError,
    InconsistentAssignmentError,
    InfeasibleOperatingPointError,
    MissingSlackAdjacencyError,
    NumericalBreakdownError,
    SolverFailureError,
    ValidationError,
)
from .network import RadialNetwork
from .powerflow import InjectionVector, solve_distflow
from .reduction import AssignmentMatrix, ReducedNetwork
from .socp import (
    ConeKind,
    ConicProgram,
    ConicProgramBuilder,
    ConicSolution,
    SolverSettings,
    SolverStatus,
)
from .socp import solve as solve_conic

logger = logging.getLogger(__name__)

DEFAULT_TOL_LIN = 1e-7
DEFAULT_TOL_CONE = 1e-7
DEFAULT_REL_TOL = 1e-6
DEFAULT_LAMBDA_G = 1e-5
DEFAULT_LAMBDA_L = 1e3
_EPS_DEN = 1e-12


class MembershipVerdict(str, Enum):
    MEMBER = "member"
    NOT_MEMBER = "not_member"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True, eq=False)
class MembershipResult:
    verdict: MembershipVerdict
    linear_residual: float
    cone_residual: float
    g: np.ndarray

    def __bool__(self) -> bool:
        return self.verdict is MembershipVerdict.MEMBER


def membership_test(
    hs: HankelSystem,
    u: np.ndarray,
    y: np.ndarray,
    tol_lin: float = DEFAULT_TOL_LIN,
    tol_cone: float = DEFAULT_TOL_CONE,
) -> MembershipResult:
    """Decide whether ``(u, y)`` is a DistFlow operating point using only data.

    The point belongs to the solution set iff it lies in the Hankel column
    span and satisfies ``v*l = P^2 + Q^2``. Without persistency of excitation
    the span test is not conclusive and the verdict is ``INDETERMINATE``.
    """
    if not hs.is_full:
        raise ValidationError("membership needs full-output Hankel matrices")
    n = hs.n
    y = np.asarray(y, dtype=float)
    if y.shape != (4 * n + 1,):
        raise DimensionMismatchError(f"expected y of {4 * n + 1} entries, got {y.shape}")
    linear = check_static_membership(hs, u, y, tol=tol_lin)
    P, Q, l, v = (y[k * n : (k + 1) * n] for k in range(4))
    cone = float(np.max(np.abs(v * l - P**2 - Q**2), initial=0.0))

    if not hs.pe_satisfied:
        logger.warning(
            "membership test without persistency of excitation (rank %d < %d)",
            hs.stacked_rank,
            3 * n + 1,
        )
        verdict = MembershipVerdict.INDETERMINATE
    elif linear.member and cone <= tol_cone:
        verdict = MembershipVerdict.MEMBER
    else:
        verdict = MembershipVerdict.NOT_MEMBER
    return MembershipResult(
        verdict=verdict, linear_residual=linear.residual, cone_residual=cone, g=linear.g
    )


@dataclass(frozen=True, eq=False)
class DdpfSolution:
    """Optimal point of a data-driven power flow program.

    ``nodes`` lists the (non-slack) nodes the output vectors refer to;
    ``sigma`` and ``l_prime`` are only set by the reduced program.
    """

    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray  # noqa: E741
    v: np.ndarray
    v0: float
    g: np.ndarray
    nodes: Tuple[int, ...]
    status: str
    objective: float
    sigma: Optional[np.ndarray] = None
    l_prime: Optional[np.ndarray] = None
    reduced: bool = False
    conic: Optional[ConicSolution] = None

    @property
    def cone_l(self) -> np.ndarray:
        """Squared currents entering the cone (``l'`` when reduced)."""
        return self.l_prime if self.l_prime is not None else self.l

    @property
    def cone_gaps(self) -> np.ndarray:
        return self.v * self.cone_l - self.P**2 - self.Q**2

    @property
    def voltages(self) -> np.ndarray:
        """|V| of ``nodes`` (negative rounding noise clipped)."""
        return np.sqrt(np.clip(self.v, 0.0, None))

    @property
    def measured(self) -> Tuple[int, ...]:
        return (0,) + self.nodes


def _solve(prog: ConicProgram, settings: Optional[SolverSettings]) -> ConicSolution:
    try:
        sol = solve_conic(prog, settings)
    except NumericalBreakdownError as e:
        raise SolverFailureError(f"conic solve failed: {e}") from e
    if sol.status is SolverStatus.INFEASIBLE:
        raise InfeasibleOperatingPointError(
            "no data-consistent operating point meets the target injections"
        )
    if not sol.optimal:
        raise SolverFailureError(f"conic solve ended with status {sol.status.value}")
    return sol


@dataclass(frozen=True, eq=False)
class _DataBasis:
    """Orthonormal coordinates of the Hankel column span.

    With ``[H_u; H_y] = U S V'`` truncated to the numerical rank, every
    trajectory weight in the row space is ``g = V w`` and its image is
    ``[H_u; H_y] g = U (s * w)``. The programs work with ``gamma = s * w``
    so the data equality has orthonormal columns; ``|g| = |w|``.
    """

    U: np.ndarray
    V: np.ndarray
    s: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def rows(self, n: int, m: int) -> Tuple[np.ndarray, ...]:
        """Split ``U`` into its u, P, Q, l, v and v0 row blocks."""
        U = self.U
        out = [U[: 2 * n]]
        out.extend(U[2 * n + k * m : 2 * n + (k + 1) * m] for k in range(4))
        out.append(U[2 * n + 4 * m][None, :])
        return tuple(out)

    def weights(self, gamma: np.ndarray) -> np.ndarray:
        return self.V @ (gamma / self.s)


@functools.lru_cache(maxsize=8)
def _data_basis(hs: HankelSystem) -> _DataBasis:
    if hs.stacked_rank < 1:
        raise ValidationError("Hankel matrices carry no data")
    U, s, Vt = scipy.linalg.svd(hs.stacked, full_matrices=False)
    r = hs.stacked_rank
    return _DataBasis(U=U[:, :r], V=Vt[:r].T, s=s[:r])


def _targets(hs: HankelSystem, p_target, q_target) -> Tuple[np.ndarray, np.ndarray]:
    p_target = np.asarray(p_target, dtype=float)
    q_target = np.asarray(q_target, dtype=float)
    if p_target.shape != (hs.n,) or q_target.shape != (hs.n,):
        raise DimensionMismatchError(f"targets must have {hs.n} entries each")
    return p_target, q_target


def solve_ddpf_full(
    hs: HankelSystem,
    p_target: np.ndarray,
    q_target: np.ndarray,
    settings: Optional[SolverSettings] = None,
) -> DdpfSolution:
    """Minimise total squared current over data-consistent operating points.

    Injections may only oversatisfy the targets: ``(p, q) <= (p_target, q_target)``.
    The returned ``g`` is the minimum-norm weight of the optimal trajectory;
    components in the null space of the Hankel stack change no output.
    """
    if not hs.is_full:
        raise ValidationError("solve_ddpf_full needs full-output Hankel matrices")
    if not hs.pe_satisfied:
        logger.warning("dataset is not persistently exciting; exactness not guaranteed")
    n = hs.n
    p_target, q_target = _targets(hs, p_target, q_target)
    basis = _data_basis(hs)
    U_u, U_P, U_Q, U_l, U_v, U_v0 = basis.rows(n, n)

    b = ConicProgramBuilder()
    gamma = b.add_block(basis.rank)
    u = b.add_block(2 * n)
    slack_u = b.add_block(2 * n, ConeKind.NONNEG)
    cones = b.add_rsoc(n, 4)  # (v, l/2, P, Q)
    v0 = b.add_block(1)
    v, half_l, P, Q = cones[:, 0], cones[:, 1], cones[:, 2], cones[:, 3]

    b.add_equality([(u, 1.0), (slack_u, 1.0)], np.concatenate([p_target, q_target]))
    b.add_equality([(u, 1.0), (gamma, -U_u)], np.zeros(2 * n))
    b.add_equality([(P, 1.0), (gamma, -U_P)], np.zeros(n))
    b.add_equality([(Q, 1.0), (gamma, -U_Q)], np.zeros(n))
    b.add_equality([(half_l, 2.0), (gamma, -U_l)], np.zeros(n))
    b.add_equality([(v, 1.0), (gamma, -U_v)], np.zeros(n))
    b.add_equality([(v0, 1.0), (gamma, -U_v0)], [0.0])
    b.add_equality([(v0, 1.0)], [1.0])
    b.set_objective(half_l, 2.0)

    sol = _solve(b.build(), settings)
    z = sol.z
    result = DdpfSolution(
        p=z[u[:n]],
        q=z[u[n:]],
        P=z[P],
        Q=z[Q],
        l=2 * z[half_l],
        v=z[v],
        v0=float(z[v0[0]]),
        g=basis.weights(z[gamma]),
        nodes=tuple(range(1, n + 1)),
        status=sol.status.value,
        objective=sol.objective,
        conic=sol,
    )
    logger.debug("full DDPF objective %.6e, sum(g) %.9f", sol.objective, result.g.sum())
    return result


def solve_ddpf_reduced(
    hs: HankelSystem,
    p_target: np.ndarray,
    q_target: np.ndarray,
    slack_adjacent: Iterable[int],
    lambda_g: float = DEFAULT_LAMBDA_G,
    lambda_l: float = DEFAULT_LAMBDA_L,
    settings: Optional[SolverSettings] = None,
) -> DdpfSolution:
    """Regularised data-driven power flow with measured-node outputs only.

    ``slack_adjacent`` names the measured nodes whose reduced-network edge
    ends at the slack; their flows enter the slack-draw term.
    """
    if lambda_g < 0 or lambda_l < 0:
        raise ValidationError("regularisation weights must be non-negative")
    n = hs.n
    p_target, q_target = _targets(hs, p_target, q_target)
    nodes = hs.measured_plus
    m = len(nodes)
    position = {node: k for k, node in enumerate(nodes)}
    adjacent = sorted(set(int(i) for i in slack_adjacent))
    if m and not adjacent:
        raise MissingSlackAdjacencyError("reduced network has no edge into the slack node")
    unknown = [i for i in adjacent if i not in position]
    if unknown:
        raise MissingSlackAdjacencyError(f"slack-adjacent nodes {unknown} are not measured")
    basis = _data_basis(hs)
    U_u, U_P, U_Q, U_l, U_v, U_v0 = basis.rows(n, m)

    b = ConicProgramBuilder()
    g_cone = b.add_block(basis.rank + 2, ConeKind.RSOC)  # (tau_g, 1/2, w), |g| = |w|
    w = g_cone[2:]
    gamma = b.add_block(basis.rank)
    u = b.add_block(2 * n)
    slack_u = b.add_block(2 * n, ConeKind.NONNEG)
    v0 = b.add_block(1)
    b.add_equality([(g_cone[1:2], 1.0)], [0.5])
    b.add_equality([(w, np.diag(basis.s)), (gamma, -1.0)], np.zeros(basis.rank))
    b.add_equality([(u, 1.0), (slack_u, 1.0)], np.concatenate([p_target, q_target]))
    b.add_equality([(u, 1.0), (gamma, -U_u)], np.zeros(2 * n))
    b.add_equality([(v0, 1.0), (gamma, -U_v0)], [0.0])
    b.add_equality([(v0, 1.0)], [1.0])
    b.set_objective(g_cone[:1], lambda_g)

    if m:
        cones = b.add_rsoc(m, 4)  # (v, l'/2, P, Q)
        v, half_lp, P, Q = cones[:, 0], cones[:, 1], cones[:, 2], cones[:, 3]
        l_r = b.add_block(m)
        s_cone = b.add_block(m + 2, ConeKind.RSOC)  # (tau_sigma, 1/2, sigma)
        sigma = s_cone[2:]
        b.add_equality([(s_cone[1:2], 1.0)], [0.5])
        b.add_equality([(P, 1.0), (gamma, -U_P)], np.zeros(m))
        b.add_equality([(Q, 1.0), (gamma, -U_Q)], np.zeros(m))
        b.add_equality([(l_r, 1.0), (gamma, -U_l)], np.zeros(m))
        b.add_equality([(v, 1.0), (gamma, -U_v)], np.zeros(m))
        b.add_equality([(half_lp, 2.0), (l_r, -1.0), (sigma, -1.0)], np.zeros(m))
        b.set_objective(half_lp, 2.0)
        b.set_objective(s_cone[:1], lambda_l)
        idx = np.array([position[i] for i in adjacent], dtype=int)
        b.set_objective(P[idx], -1.0)
        b.set_objective(Q[idx], -1.0)

    sol = _solve(b.build(), settings)
    z = sol.z
    if m:
        P_r, Q_r, v_r = z[P], z[Q], z[v]
        l_val, sigma_val, lp_val = z[l_r], z[sigma], 2 * z[half_lp]
    else:
        P_r = Q_r = v_r = l_val = sigma_val = lp_val = np.zeros(0)
    if np.any(lp_val < -1e-9):
        logger.warning("negative adjusted squared current %.3e", float(lp_val.min()))
    result = DdpfSolution(
        p=z[u[:n]],
        q=z[u[n:]],
        P=P_r,
        Q=Q_r,
        l=l_val,
        v=v_r,
        v0=float(z[v0[0]]),
        g=basis.V @ z[w],
        nodes=tuple(nodes),
        status=sol.status.value,
        objective=sol.objective,
        sigma=sigma_val,
        l_prime=lp_val,
        reduced=True,
        conic=sol,
    )
    logger.debug(
        "reduced DDPF objective %.6e, |sigma| %.3e",
        sol.objective,
        float(np.linalg.norm(sigma_val)),
    )
    return result


@dataclass(frozen=True)
class ExactnessReport:
    exact: bool
    max_relative_gap: float


def check_exactness(sol: DdpfSolution, rel_tol: float = DEFAULT_REL_TOL) -> ExactnessReport:
    """Relative cone gap ``(v l - P^2 - Q^2) / max(v l, 1e-12)`` against ``rel_tol``."""
    vl = sol.v * sol.cone_l
    gaps = (vl - sol.P**2 - sol.Q**2) / np.maximum(vl, _EPS_DEN)
    worst = float(np.max(gaps, initial=0.0))
    return ExactnessReport(exact=worst <= rel_tol, max_relative_gap=worst)


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    """|V| for nodes 0..n with the representative each value came from."""

    vm: np.ndarray
    representative: Tuple[int, ...]
    max_error: Optional[float] = None

    def provenance(self, node: int) -> str:
        rep = self.representative[node]
        return "measured" if rep == node else f"proxied_by:{rep}"

    @property
    def measured(self) -> Tuple[int, ...]:
        return tuple(i for i, rep in enumerate(self.representative) if rep == i)


def reconstruct_full_voltages(
    sol: DdpfSolution,
    assignment: AssignmentMatrix,
    oracle: Optional[np.ndarray] = None,
) -> ReconstructionResult:
    """Copy every measured |V| onto the nodes it represents.

    ``oracle`` (|V| for nodes 0..n) adds the max reconstruction error.
    """
    if tuple(assignment.kept) != sol.measured:
        raise InconsistentAssignmentError(
            f"assignment keeps {list(assignment.kept)}, solution measures {list(sol.measured)}"
        )
    measured_vm = dict(zip(sol.nodes, sol.voltages.tolist()))
    measured_vm[0] = float(np.sqrt(max(sol.v0, 0.0)))
    reps = tuple(assignment.representative_of(j) for j in range(assignment.size))
    vm = np.array([measured_vm[rep] for rep in reps])
    error = None
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=float)
        if oracle.shape != vm.shape:
            raise DimensionMismatchError(f"oracle has {oracle.shape}, expected {vm.shape}")
        error = float(np.max(np.abs(vm - oracle)))
    return ReconstructionResult(vm=vm, representative=reps, max_error=error)


def model_based_reduced_voltages(
    reduced: ReducedNetwork,
    assignment: AssignmentMatrix,
    inj: InjectionVector,
    v0: float = 1.0,
) -> np.ndarray:
    """Model-based baseline: DistFlow on the radialized Kron network.

    Injections are summed over each cluster onto its representative; the
    resulting |V| are spread back to all nodes 0..n through the assignment.
    """
    radial: RadialNetwork = reduced.to_radial_network()
    if inj.n != assignment.size - 1:
        raise DimensionMismatchError(f"expected {assignment.size - 1} injections")
    p_full = np.concatenate([[0.0], inj.p])
    q_full = np.concatenate([[0.0], inj.q])
    p_agg = assignment.aggregate(p_full)
    q_agg = assignment.aggregate(q_full)
    order = [int(b) for b in radial.bus_ids]  # original node ids, slack first
    state = solve_distflow(
        radial, InjectionVector(p=p_agg[order[1:]], q=q_agg[order[1:]]), v0
    )
    rep_vm = {order[0]: np.sqrt(v0)}
    rep_vm.update(zip(order[1:], np.sqrt(state.v).tolist()))
    return np.array([rep_vm[assignment.representative_of(j)] for j in range(assignment.size)])


def signed_error_statistics(
    errors: np.ndarray, nodes: Optional[Sequence[int]] = None
) -> pd.DataFrame:
    """Per-node summary of signed errors (rows: time steps, columns: nodes)."""
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    frame = pd.DataFrame(errors, columns=list(nodes) if nodes is not None else None)
    stats = frame.quantile([0.05, 0.5, 0.95]).T
    stats.columns = ["q05", "median", "q95"]
    stats.insert(0, "mean", frame.mean())
    stats["min"] = frame.min()
    stats["max"] = frame.max()
    stats["overestimated_share"] = (frame > 0).mean()
    stats.index.name = "node"
    return stats


def solution_to_dict(sol: DdpfSolution, oracle: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """JSON-ready dump of a solution.

    ``oracle`` holds reference |V| for ``sol.nodes`` (same order).
    """
    out: Dict[str, Any] = {
        "status": sol.status,
        "objective": sol.objective,
        "reduced": sol.reduced,
        "nodes": list(sol.nodes),
        "p": sol.p.tolist(),
        "q": sol.q.tolist(),
        "P": sol.P.tolist(),
        "Q": sol.Q.tolist(),
        "l": sol.l.tolist(),
        "v": sol.v.tolist(),
        "v0": sol.v0,
        "g": sol.g.tolist(),
        "g_norm": float(np.linalg.norm(sol.g)),
        "g_sum": float(sol.g.sum()),
        "cone_gaps": sol.cone_gaps.tolist(),
        "max_relative_gap": check_exactness(sol).max_relative_gap,
    }
    if sol.reduced:
        out["sigma"] = sol.sigma.tolist() if sol.sigma is not None else []
        out["l_prime"] = sol.l_prime.tolist() if sol.l_prime is not None else []
    if sol.conic is not None:
        out["solver"] = {
            "backend": sol.conic.backend,
            "iterations": sol.conic.iterations,
            "wall_time": sol.conic.wall_time,
            "eq_residual": sol.conic.eq_residual,
            "cone_violation": sol.conic.cone_violation,
        }
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=float)
        if oracle.shape != sol.v.shape:
            raise DimensionMismatchError("oracle must match the solution nodes")
        err = sol.voltages - oracle
        out["errors"] = {
            "max_abs": float(np.max(np.abs(err), initial=0.0)),
            "signed": err.tolist(),
        }
    return out
