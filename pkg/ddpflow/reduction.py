"""
Network reduction for sparse sensing.

A placement assigns every node to a measured representative. The
representative of a cluster is its most upstream node and clusters are
connected, so on a tree an assignment is fully described by
``representative[j]`` for ``j = 0..n``. The slack node always represents
itself.

Placement is greedy: starting from the identity assignment, one cluster at
a time is merged into the cluster upstream of it, choosing the merge that
least degrades the worst-case voltage magnitude reconstruction over a set
of historical scenarios. Kron reduction then eliminates the unmeasured
nodes, and radialization re-adds the few eliminated branching nodes needed
for the reduced network to stay a tree.
"""

import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import scipy.linalg

from .data import TrajectoryDataset
from .exceptions import (
    BudgetInfeasibleError,
    DimensionMismatchError,
    InconsistentAssignmentError,
    InvalidMergeError,
    SingularInteriorError,
    TopologyError,
    ValidationError,
)
from .network import AdmittanceMatrix, RadialNetwork, build_admittance, build_network
from .powerflow import InjectionVector, PowerFlowState, recover_phasors, solve_phasor

logger = logging.getLogger(__name__)

EDGE_TOL = 1e-9
CLAMP_TOL = 1e-9


class AssignmentMatrix:
    """Representative assignment of nodes 0..n.

    ``matrix[i, j] = 1`` iff node ``j`` is represented by node ``i``.
    """

    def __init__(self, representative: Sequence[int]):
        reps = tuple(int(r) for r in representative)
        if not reps:
            raise InconsistentAssignmentError("empty assignment")
        size = len(reps)
        if reps[0] != 0:
            raise InconsistentAssignmentError("the slack node must represent itself")
        for j, rep in enumerate(reps):
            if not 0 <= rep < size:
                raise InconsistentAssignmentError(f"node {j} assigned to unknown node {rep}")
            if reps[rep] != rep:
                raise InconsistentAssignmentError(
                    f"node {j} assigned to {rep}, which is itself assigned to {reps[rep]}"
                )
        self._reps = reps

    @classmethod
    def identity(cls, size: int) -> "AssignmentMatrix":
        return cls(range(size))

    @classmethod
    def from_kept(cls, net: RadialNetwork, kept: Iterable[int]) -> "AssignmentMatrix":
        """Assign every node to its nearest kept ancestor (itself if kept)."""
        kept_set = {int(i) for i in kept}
        if 0 not in kept_set:
            raise InconsistentAssignmentError("kept set must contain the slack node")
        if max(kept_set) > net.n:
            raise InconsistentAssignmentError(f"kept node {max(kept_set)} outside 0..{net.n}")
        reps = [0] * net.node_count
        for j in range(1, net.node_count):
            # parents precede children, so reps[parent] is already final
            reps[j] = j if j in kept_set else reps[net.parent(j)]
        return cls(reps)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "AssignmentMatrix":
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError("assignment matrix must be square")
        if not np.all((matrix == 0) | (matrix == 1)):
            raise InconsistentAssignmentError("assignment matrix must be binary")
        if not np.all(matrix.sum(axis=0) == 1):
            raise InconsistentAssignmentError("every node needs exactly one representative")
        return cls(np.argmax(matrix, axis=0))

    @property
    def size(self) -> int:
        return len(self._reps)

    @property
    def representatives(self) -> Tuple[int, ...]:
        return self._reps

    @property
    def kept(self) -> Tuple[int, ...]:
        return tuple(j for j, rep in enumerate(self._reps) if rep == j)

    @property
    def trace(self) -> int:
        return len(self.kept)

    @property
    def matrix(self) -> np.ndarray:
        pi = np.zeros((self.size, self.size), dtype=int)
        pi[list(self._reps), np.arange(self.size)] = 1
        return pi

    @property
    def clusters(self) -> Dict[int, FrozenSet[int]]:
        groups: Dict[int, set] = {rep: set() for rep in self.kept}
        for j, rep in enumerate(self._reps):
            groups[rep].add(j)
        return {rep: frozenset(members) for rep, members in groups.items()}

    def representative_of(self, node: int) -> int:
        return self._reps[node]

    def candidates(self) -> Tuple[int, ...]:
        """Representatives that can still be merged upstream."""
        return tuple(i for i in self.kept if i != 0)

    def aggregate(self, values: np.ndarray) -> np.ndarray:
        """``matrix @ values``: sum every node's value onto its representative."""
        values = np.asarray(values)
        if values.shape[0] != self.size:
            raise DimensionMismatchError(f"expected {self.size} rows, got {values.shape[0]}")
        out = np.zeros_like(values)
        np.add.at(out, list(self._reps), values)
        return out

    def spread(self, values: np.ndarray) -> np.ndarray:
        """``matrix.T @ values``: copy each representative's value to its cluster."""
        values = np.asarray(values)
        if values.shape[0] != self.size:
            raise DimensionMismatchError(f"expected {self.size} rows, got {values.shape[0]}")
        return values[list(self._reps)]

    def merge(self, node: int, net: RadialNetwork) -> "AssignmentMatrix":
        """Move the whole cluster of ``node`` into the cluster of its parent."""
        if self.size != net.node_count:
            raise DimensionMismatchError("assignment and network sizes differ")
        if node == 0:
            raise InvalidMergeError("the slack node cannot be merged")
        if not 0 < node < self.size or self._reps[node] != node:
            raise InvalidMergeError(f"node {node} is not a cluster representative")
        target = self._reps[net.parent(node)]
        return AssignmentMatrix([target if rep == node else rep for rep in self._reps])

    def audit(self, net: RadialNetwork) -> None:
        """Check every assignment invariant against ``net``; raise on the first breach.

        Walking from a node up towards the root must reach its representative
        (downstream rule) through nodes of the same cluster (connectivity).
        """
        if self.size != net.node_count:
            raise InconsistentAssignmentError("assignment and network sizes differ")
        pi = self.matrix
        if not np.all(pi.sum(axis=0) == 1):
            raise InconsistentAssignmentError("a node lacks a unique representative")
        diag = np.diag(pi)
        if set(np.flatnonzero(diag).tolist()) != set(self.kept) or diag[0] != 1:
            raise InconsistentAssignmentError("diagonal does not match the kept set")
        if np.any(pi > diag[:, None]):
            raise InconsistentAssignmentError("an unmeasured node represents others")
        for j, rep in enumerate(self._reps):
            k = j
            while k != rep:
                if k == 0:
                    raise InconsistentAssignmentError(
                        f"node {j} is not downstream of its representative {rep}"
                    )
                k = net.parent(k)
                if self._reps[k] != rep and k != rep:
                    raise InconsistentAssignmentError(
                        f"cluster of {rep} is not connected at node {k}"
                    )

    def to_triples(self) -> List[Tuple[int, int]]:
        """Nonzero ``(i, j)`` entries of the matrix."""
        return [(rep, j) for j, rep in enumerate(self._reps)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AssignmentMatrix):
            return NotImplemented
        return self._reps == other._reps

    def __hash__(self) -> int:
        return hash(self._reps)

    def __repr__(self) -> str:
        return f"AssignmentMatrix(kept={list(self.kept)})"


@dataclass(frozen=True, eq=False)
class ReducedNetwork:
    """Kron-reduced admittance over ``kept`` (original node ids, ascending)."""

    Y_kron: np.ndarray
    kept: Tuple[int, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0
    edge_tol: float = EDGE_TOL

    @property
    def size(self) -> int:
        return len(self.kept)

    @property
    def edges(self) -> Tuple[Tuple[int, int], ...]:
        """Kept-node pairs joined by a non-negligible off-diagonal entry."""
        Y = self.Y_kron
        threshold = self.edge_tol * max(1.0, float(np.max(np.abs(Y), initial=0.0)))
        return tuple(
            (self.kept[a], self.kept[b])
            for a in range(self.size)
            for b in range(a + 1, self.size)
            if abs(Y[a, b]) > threshold
        )

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.kept)
        g.add_edges_from(self.edges)
        return g

    @property
    def is_radial(self) -> bool:
        return nx.is_tree(self.graph())

    def slack_adjacent(self) -> Tuple[int, ...]:
        return tuple(sorted(self.graph().neighbors(0))) if 0 in self.kept else ()

    def to_radial_network(self) -> RadialNetwork:
        """Equivalent radial feeder with ``z = -1 / Y_ab`` on every edge.

        Resistances in ``[-1e-9, 0)`` are rounding noise and clamp to zero.
        ``bus_ids`` of the result are the original node ids.
        """
        if not self.is_radial:
            raise TopologyError("reduced network is not radial")
        index = {node: a for a, node in enumerate(self.kept)}
        branches = []
        for i, j in self.edges:
            z = -1.0 / self.Y_kron[index[i], index[j]]
            r, x = float(z.real), float(z.imag)
            if r < -CLAMP_TOL or x < -CLAMP_TOL:
                raise ValidationError(
                    f"reduced edge ({i}, {j}) has negative impedance {r:.3e}{x:+.3e}j"
                )
            branches.append((i, j, max(r, 0.0), max(x, 0.0)))
        return build_network(list(self.kept), 0, branches, self.base_mva, self.base_kv)


def _matrix_of(Y: Union[AdmittanceMatrix, np.ndarray]) -> np.ndarray:
    return Y.Y if isinstance(Y, AdmittanceMatrix) else np.asarray(Y, dtype=complex)


def _check_kept(kept: Iterable[int], size: int) -> Tuple[int, ...]:
    kept_t = tuple(sorted({int(i) for i in kept}))
    if not kept_t or kept_t[0] != 0:
        raise ValidationError("kept set must contain the slack node 0")
    if kept_t[-1] >= size:
        raise ValidationError(f"kept node {kept_t[-1]} outside 0..{size - 1}")
    return kept_t


def kron_reduce(
    Y: Union[AdmittanceMatrix, np.ndarray],
    kept: Iterable[int],
    base_mva: float = 1.0,
    base_kv: float = 1.0,
) -> ReducedNetwork:
    """Schur complement ``Y_RR - Y_RU Y_UU^-1 Y_UR`` onto ``kept``."""
    mat = _matrix_of(Y)
    kept_t = _check_kept(kept, mat.shape[0])
    elim = [i for i in range(mat.shape[0]) if i not in set(kept_t)]
    R, U = np.array(kept_t), np.array(elim, dtype=int)
    Y_rr = mat[np.ix_(R, R)]
    if len(U):
        Y_uu = mat[np.ix_(U, U)]
        if np.linalg.cond(Y_uu) > 1e12:
            raise SingularInteriorError(
                "eliminated block is numerically singular; is the network connected?"
            )
        try:
            X = scipy.linalg.solve(Y_uu, mat[np.ix_(U, R)])
        except scipy.linalg.LinAlgError as e:
            raise SingularInteriorError(f"cannot eliminate interior nodes: {e}") from e
        Y_rr = Y_rr - mat[np.ix_(R, U)] @ X
    Y_rr = 0.5 * (Y_rr + Y_rr.T)
    return ReducedNetwork(Y_kron=Y_rr, kept=kept_t, base_mva=base_mva, base_kv=base_kv)


def kron_reduce_sequential(
    Y: Union[AdmittanceMatrix, np.ndarray], kept: Iterable[int]
) -> np.ndarray:
    """Eliminate the unkept nodes one at a time, highest index first."""
    mat = _matrix_of(Y).copy()
    kept_t = _check_kept(kept, mat.shape[0])
    labels = list(range(mat.shape[0]))
    for node in sorted(set(labels) - set(kept_t), reverse=True):
        k = labels.index(node)
        pivot = mat[k, k]
        if abs(pivot) < 1e-14:
            raise SingularInteriorError(f"zero pivot eliminating node {node}")
        mat = mat - np.outer(mat[:, k], mat[k, :]) / pivot
        mat = np.delete(np.delete(mat, k, axis=0), k, axis=1)
        labels.pop(k)
    return mat


class Scenario(NamedTuple):
    """Historical phasors ``V`` and current injections ``I`` of nodes 0..n."""

    V: np.ndarray
    I: np.ndarray  # noqa: E741


def current_injections(
    net: RadialNetwork,
    inj: InjectionVector,
    state: Optional[PowerFlowState] = None,
    v0: float = 1.0,
) -> Scenario:
    """Phasors and nodal currents of one operating point.

    Phasors come from a Newton re-solve, warm-started from the DistFlow
    state when one is given. ``I_i = conj(s_i / V_i)`` for load nodes and
    the slack current closes KCL, so ``Y V = I``.
    """
    start = recover_phasors(net, state) if state is not None else None
    v_start = state.v0 if state is not None else v0
    V = solve_phasor(net, inj, v_start, start=start)
    Y = build_admittance(net).Y
    s = inj.p + 1j * inj.q
    I = np.empty(net.node_count, dtype=complex)  # noqa: E741
    I[1:] = np.conj(s / V[1:])
    I[0] = (Y[0] @ V)
    return Scenario(V=V, I=I)


def build_scenarios(
    net: RadialNetwork,
    ds: TrajectoryDataset,
    stride: int = 1,
    executor: Optional[Executor] = None,
) -> List[Scenario]:
    """Scenarios from every ``stride``-th column of a full-output dataset."""
    if not ds.is_full:
        raise ValidationError("scenarios need full-output datasets")
    if ds.n != net.n:
        raise DimensionMismatchError(f"dataset has {ds.n} nodes, network {net.n}")
    if stride < 1:
        raise ValidationError("scenario stride must be positive")

    def _one(t: int) -> Scenario:
        u, y = ds.column(t)
        return current_injections(net, InjectionVector.from_u(u), PowerFlowState.from_y(y))

    columns = range(0, ds.T, stride)
    if executor is not None:
        return list(executor.map(_one, columns))
    return [_one(t) for t in columns]


class _KclSolver:
    """Slack-anchored solves of ``Y V = I`` over a stacked scenario set."""

    def __init__(self, Y: np.ndarray, scenarios: Sequence[Scenario]):
        if not scenarios:
            raise ValidationError("at least one scenario is required")
        self.Y = Y
        try:
            self.lu = scipy.linalg.lu_factor(Y[1:, 1:])
        except (ValueError, scipy.linalg.LinAlgError) as e:
            raise SingularInteriorError(f"cannot factor the interior admittance: {e}") from e
        self.V_hat = np.column_stack([s.V for s in scenarios])
        self.I_hat = np.column_stack([s.I for s in scenarios])
        self.vm_hat = np.abs(self.V_hat)

    def score(self, assignment: AssignmentMatrix) -> float:
        rhs = assignment.aggregate(self.I_hat)
        V0 = self.V_hat[0]
        V_int = scipy.linalg.lu_solve(self.lu, rhs[1:] - np.outer(self.Y[1:, 0], V0))
        vm = np.abs(np.vstack([V0, V_int]))
        return float(np.max(np.abs(assignment.spread(vm) - self.vm_hat)))


def score_candidate(
    net: RadialNetwork,
    Y: Union[AdmittanceMatrix, np.ndarray],
    assignment: AssignmentMatrix,
    candidate: Optional[int],
    scenarios: Sequence[Scenario],
) -> float:
    """Worst |V| reconstruction error after merging ``candidate`` upstream.

    The aggregated currents are pushed through the full-size KCL with the
    slack voltage fixed to its historical value; ``candidate=None`` scores
    ``assignment`` itself.
    """
    trial = assignment if candidate is None else assignment.merge(candidate, net)
    return _KclSolver(_matrix_of(Y), scenarios).score(trial)


@dataclass(frozen=True)
class PlacementStep:
    merged: int
    into: int
    score: float
    candidates: int


@dataclass(frozen=True)
class PlacementResult:
    assignment: AssignmentMatrix
    trace: Tuple[PlacementStep, ...] = field(default=())

    @property
    def kept(self) -> Tuple[int, ...]:
        return self.assignment.kept

    @property
    def final_score(self) -> float:
        return self.trace[-1].score if self.trace else 0.0


def greedy_placement(
    net: RadialNetwork,
    scenarios: Sequence[Scenario],
    budget: int,
    Y: Optional[Union[AdmittanceMatrix, np.ndarray]] = None,
    executor: Optional[Executor] = None,
    workers: int = 1,
) -> PlacementResult:
    """Merge clusters one at a time until only ``budget`` sensors remain.

    Each step scores all current representatives concurrently and commits
    the lowest ``(score, node)``; the assignment is audited after every
    commit.
    """
    size = net.node_count
    if not 1 <= budget <= size:
        raise BudgetInfeasibleError(f"budget {budget} outside 1..{size}")
    mat = _matrix_of(Y) if Y is not None else build_admittance(net).Y
    solver = _KclSolver(mat, scenarios)
    assignment = AssignmentMatrix.identity(size)
    trace: List[PlacementStep] = []

    own_pool = executor is None and workers > 1
    pool = ThreadPoolExecutor(max_workers=workers) if own_pool else executor
    try:
        while assignment.trace > budget:
            candidates = assignment.candidates()
            if not candidates:
                raise BudgetInfeasibleError("no admissible merge left above the budget")

            def _score(node: int, current: AssignmentMatrix = assignment) -> float:
                return solver.score(current.merge(node, net))

            if pool is not None:
                scores = list(pool.map(_score, candidates))
            else:
                scores = [_score(node) for node in candidates]
            best_score, best = min(zip(scores, candidates))
            into = assignment.representative_of(net.parent(best))
            assignment = assignment.merge(best, net)
            assignment.audit(net)
            trace.append(PlacementStep(best, into, best_score, len(candidates)))
            logger.debug(
                "merged %d into %d (score %.3e, %d candidates)",
                best,
                into,
                best_score,
                len(candidates),
            )
    finally:
        if own_pool and pool is not None:
            pool.shutdown()

    logger.info("placement kept %d of %d nodes", assignment.trace, size)
    return PlacementResult(assignment=assignment, trace=tuple(trace))


@dataclass(frozen=True)
class RadializationResult:
    kept: Tuple[int, ...]
    added: Tuple[int, ...]
    reduced: ReducedNetwork
    assignment: AssignmentMatrix


def steiner_branching_nodes(net: RadialNetwork, kept: Iterable[int]) -> Tuple[int, ...]:
    """Unkept nodes where three or more directions towards kept nodes meet.

    With the slack kept, the Steiner tree of the kept set is the union of
    the root paths of its members.
    """
    kept_set = {int(i) for i in kept}
    size = net.node_count
    reaches = np.zeros(size, dtype=bool)
    reaches[list(kept_set)] = True
    for child in range(size - 1, 0, -1):
        if reaches[child]:
            reaches[net.parent(child)] = True
    degree = np.zeros(size, dtype=int)
    for child in range(1, size):
        if reaches[child]:
            degree[child] += 1
            degree[net.parent(child)] += 1
    return tuple(i for i in range(size) if reaches[i] and i not in kept_set and degree[i] >= 3)


def radialize(
    net: RadialNetwork,
    kept: Iterable[int],
    Y: Optional[Union[AdmittanceMatrix, np.ndarray]] = None,
) -> RadializationResult:
    """Re-add the eliminated Steiner branching nodes so the Kron network is a tree."""
    kept_set = {int(i) for i in kept}
    if 0 not in kept_set:
        raise ValidationError("kept set must contain the slack node 0")
    added = steiner_branching_nodes(net, kept_set)
    final = tuple(sorted(kept_set | set(added)))
    mat = _matrix_of(Y) if Y is not None else build_admittance(net).Y
    reduced = kron_reduce(mat, final, net.base_mva, net.base_kv)
    if not reduced.is_radial or len(reduced.edges) != len(final) - 1:
        raise TopologyError("radialization failed to produce a tree")
    if added:
        logger.info("radialization re-added nodes %s", list(added))
    return RadializationResult(
        kept=final,
        added=added,
        reduced=reduced,
        assignment=AssignmentMatrix.from_kept(net, final),
    )


def reduction_percentage(n: int, kept: Union[int, Iterable[int]]) -> float:
    """Share of the n+1 nodes without a sensor, in percent."""
    count = kept if isinstance(kept, int) else len(set(kept))
    if not 0 < count <= n + 1:
        raise ValidationError(f"kept count {count} outside 1..{n + 1}")
    return (n + 1 - count) / (n + 1) * 100.0
