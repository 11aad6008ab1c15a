"""
Second-order cone programs in a small standard form.

A :class:`ConicProgram` is ``min c'z  s.t.  A z = b`` with the variable
vector ``z`` split into consecutive blocks, each tagged with a cone:

- ``FREE``: no restriction
- ``NONNEG``: ``z >= 0`` element-wise
- ``RSOC``: rotated second-order cone ``2 w1 w2 >= sum_k w_k**2`` with
  ``w1, w2 >= 0``

Rotated blocks are handed to the backends as standard second-order cones
through the orthogonal map ``t = (w1 + w2)/sqrt(2)``, ``s = (w1 - w2)/sqrt(2)``
under which ``2 w1 w2 - |w|^2 = t^2 - s^2 - |w|^2``.

Two backends implement the same contract: ``"clarabel"`` (interior point)
and ``"scs"`` (operator splitting).
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .exceptions import DimensionMismatchError, NumericalBreakdownError, ValidationError

logger = logging.getLogger(__name__)

_SQRT_HALF = np.sqrt(0.5)

DEFAULT_EPS_ABS = 1e-8
DEFAULT_EPS_REL = 1e-8
DEFAULT_MAX_ITER = 200000
BACKENDS = ("clarabel", "scs")

# Reported optima are accepted within this multiple of eps_abs, the
# tolerance every backend is held to downstream.
CONTRACT_FACTOR = 10.0
# Interior point targets, as fractions of eps. The duality gap is driven
# lower than feasibility since flows enter the loss objective squared.
_IPM_FEAS_FACTOR = 0.1
_IPM_GAP_FACTOR = 1e-3


class ConeKind(str, Enum):
    FREE = "free"
    NONNEG = "nonneg"
    RSOC = "rsoc"


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class ConeBlock:
    """A contiguous slice ``z[start:start+size]`` restricted to one cone."""

    kind: ConeKind
    start: int
    size: int

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """``min c'z  s.t.  A z = b, z in K`` with K a product of blocks."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: Tuple[ConeBlock, ...]
    dropped_rows: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
        size = self.c.shape[0]
        if self.A.shape != (self.b.shape[0], size):
            raise DimensionMismatchError(
                f"A is {self.A.shape}, expected ({self.b.shape[0]}, {size})"
            )
        position = 0
        for block in self.blocks:
            if block.start != position:
                raise ValidationError("cone blocks must tile the variable vector")
            if block.kind is ConeKind.RSOC and block.size < 3:
                raise ValidationError("rotated cone blocks need dimension >= 3")
            position = block.stop
        if position != size:
            raise ValidationError(f"cone blocks cover {position} of {size} variables")

    @property
    def size(self) -> int:
        return self.c.shape[0]

    @property
    def rows(self) -> int:
        return self.b.shape[0]


@dataclass(frozen=True)
class SolverSettings:
    eps_abs: float = DEFAULT_EPS_ABS
    eps_rel: float = DEFAULT_EPS_REL
    max_iter: int = DEFAULT_MAX_ITER
    backend: str = "clarabel"
    verbose: bool = False

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValidationError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be positive")
        if self.backend not in BACKENDS:
            raise ValidationError(
                f"unknown backend {self.backend!r}, expected one of {BACKENDS}"
            )


@dataclass(frozen=True, eq=False)
class ConicSolution:
    z: np.ndarray
    status: SolverStatus
    objective: float
    eq_residual: float
    cone_violation: float
    iterations: int
    wall_time: float
    backend: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is SolverStatus.OPTIMAL


@dataclass(frozen=True)
class ConicResidualReport:
    """Independently recomputed feasibility of a primal point."""

    eq_residual: float
    cone_violation: float
    block_violations: Tuple[float, ...] = field(default=())

    def within(self, tol: float) -> bool:
        return self.eq_residual <= tol and self.cone_violation <= tol


Coefficient = Union[float, np.ndarray, sp.spmatrix]


class ConicProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram`.

    Variables are allocated block by block; equality rows are added as a
    sum of ``coefficient @ z[indices]`` terms. A scalar coefficient means
    ``coefficient * I``.

    Example::

        builder = ConicProgramBuilder()
        x = builder.add_block(3, ConeKind.NONNEG)
        builder.add_equality([(x, np.ones((1, 3)))], [1.0])
        builder.set_objective(x, [1.0, 2.0, 3.0])
        prog = builder.build()
    """

    def __init__(self):
        self._blocks: List[ConeBlock] = []
        self._size = 0
        self._rows: List[int] = []
        self._cols: List[int] = []
        self._vals: List[float] = []
        self._rhs: List[float] = []
        self._objective: Dict[int, float] = {}

    @property
    def size(self) -> int:
        return self._size

    @property
    def row_count(self) -> int:
        return len(self._rhs)

    def add_block(self, size: int, kind: ConeKind = ConeKind.FREE) -> np.ndarray:
        """Allocate ``size`` variables in one block; returns their indices."""
        if size < 0:
            raise ValidationError("block size must be non-negative")
        if size == 0:
            return np.arange(0)
        block = ConeBlock(kind=kind, start=self._size, size=size)
        self._blocks.append(block)
        self._size += size
        return block.indices

    def add_rsoc(self, count: int, dim: int) -> np.ndarray:
        """Allocate ``count`` rotated cones of dimension ``dim``.

        Returns a ``(count, dim)`` index array; row k is cone k.
        """
        if dim < 3:
            raise ValidationError("rotated cones need dimension >= 3")
        return np.array(
            [self.add_block(dim, ConeKind.RSOC) for _ in range(count)], dtype=int
        ).reshape(count, dim)

    def add_equality(
        self,
        terms: Sequence[Tuple[np.ndarray, Coefficient]],
        rhs: Union[float, Sequence[float], np.ndarray],
    ) -> np.ndarray:
        """Append rows ``sum_k M_k z[idx_k] = rhs``; returns the new row indices."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        m = rhs.shape[0]
        first = self.row_count
        for indices, coeff in terms:
            indices = np.atleast_1d(np.asarray(indices, dtype=int))
            if np.isscalar(coeff):
                if indices.shape[0] != m:
                    raise DimensionMismatchError(
                        f"scalar term spans {indices.shape[0]} variables for {m} rows"
                    )
                if coeff != 0:
                    self._rows.extend(range(first, first + m))
                    self._cols.extend(indices.tolist())
                    self._vals.extend([float(coeff)] * m)
                continue
            block = sp.coo_matrix(coeff)
            if block.shape != (m, indices.shape[0]):
                raise DimensionMismatchError(
                    f"term has shape {block.shape}, expected ({m}, {indices.shape[0]})"
                )
            self._rows.extend((block.row + first).tolist())
            self._cols.extend(indices[block.col].tolist())
            self._vals.extend(block.data.tolist())
        self._rhs.extend(rhs.tolist())
        return np.arange(first, first + m)

    def set_objective(self, indices: np.ndarray, coeffs: Union[float, Sequence[float]]):
        """Add ``coeffs`` to the objective entries of ``indices``."""
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), indices.shape)
        for i, value in zip(indices.tolist(), coeffs.tolist()):
            self._objective[i] = self._objective.get(i, 0.0) + value

    def build(self) -> ConicProgram:
        c = np.zeros(self._size)
        for i, value in self._objective.items():
            c[i] = value
        A = sp.csr_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self.row_count, self._size)
        )
        A.sum_duplicates()
        return ConicProgram(c=c, A=A, b=np.array(self._rhs), blocks=tuple(self._blocks))


def presolve(prog: ConicProgram) -> ConicProgram:
    """Drop zero rows and exact duplicate rows of ``A z = b``.

    Zero rows with a nonzero right-hand side are kept so the backend can
    report infeasibility. Removed row indices are recorded in
    ``dropped_rows``.
    """
    A = prog.A.tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    seen: Dict[Tuple[bytes, bytes, float], int] = {}
    keep: List[int] = []
    dropped: List[int] = []
    for i in range(A.shape[0]):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        if lo == hi and prog.b[i] == 0.0:
            dropped.append(i)
            continue
        key = (A.indices[lo:hi].tobytes(), A.data[lo:hi].tobytes(), float(prog.b[i]))
        if key in seen:
            dropped.append(i)
            continue
        seen[key] = i
        keep.append(i)
    if dropped:
        logger.debug("presolve dropped %d of %d rows", len(dropped), A.shape[0])
    return ConicProgram(
        c=prog.c,
        A=A[keep],
        b=prog.b[keep],
        blocks=prog.blocks,
        dropped_rows=tuple(prog.dropped_rows) + tuple(dropped),
    )


def _block_violation(block: ConeBlock, w: np.ndarray) -> float:
    if block.kind is ConeKind.FREE:
        return 0.0
    if block.kind is ConeKind.NONNEG:
        return float(max(0.0, -w.min(initial=0.0)))
    w1, w2, rest = w[0], w[1], w[2:]
    return float(max(0.0, float(rest @ rest) - 2 * w1 * w2, -w1, -w2))


def verify_solution(
    prog: ConicProgram, sol: Union[ConicSolution, np.ndarray]
) -> ConicResidualReport:
    """Recompute ``|Az - b|_inf`` and every cone violation from scratch."""
    z = sol.z if isinstance(sol, ConicSolution) else np.asarray(sol, dtype=float)
    if z.shape != (prog.size,):
        raise DimensionMismatchError(f"point has {z.shape[0]} entries, program {prog.size}")
    eq = prog.A @ z - prog.b
    per_block = tuple(_block_violation(bl, z[bl.start : bl.stop]) for bl in prog.blocks)
    return ConicResidualReport(
        eq_residual=float(np.max(np.abs(eq), initial=0.0)),
        cone_violation=max(per_block, default=0.0),
        block_violations=per_block,
    )


def _rotation(size: int) -> sp.csr_matrix:
    """Map a rotated-cone block to standard second-order cone coordinates."""
    head = np.array([[_SQRT_HALF, _SQRT_HALF], [_SQRT_HALF, -_SQRT_HALF]])
    return sp.block_diag([sp.csr_matrix(head), sp.identity(size - 2)], format="csr")


def _cone_rows(prog: ConicProgram) -> Tuple[sp.csr_matrix, List[int], List[int]]:
    """Rows ``-G z + s = 0`` placing every cone block in slack coordinates.

    Returns ``G`` plus the nonnegative count and the second-order sizes.
    """
    nonneg = [bl for bl in prog.blocks if bl.kind is ConeKind.NONNEG]
    rsoc = [bl for bl in prog.blocks if bl.kind is ConeKind.RSOC]
    parts = []
    for bl in nonneg:
        parts.append(
            sp.csr_matrix(
                (np.ones(bl.size), (np.arange(bl.size), bl.indices)),
                shape=(bl.size, prog.size),
            )
        )
    for bl in rsoc:
        pick = sp.csr_matrix(
            (np.ones(bl.size), (np.arange(bl.size), bl.indices)),
            shape=(bl.size, prog.size),
        )
        parts.append(_rotation(bl.size) @ pick)
    G = sp.vstack(parts, format="csr") if parts else sp.csr_matrix((0, prog.size))
    return G, [sum(bl.size for bl in nonneg)], [bl.size for bl in rsoc]


def _solve_clarabel(prog: ConicProgram, settings: SolverSettings) -> Dict[str, Any]:
    import clarabel

    G, (n_nonneg,), soc = _cone_rows(prog)
    A = sp.vstack([prog.A, -G], format="csc")
    b = np.concatenate([prog.b, np.zeros(G.shape[0])])
    cones = [clarabel.ZeroConeT(prog.rows)]
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in soc)

    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.max_iter = settings.max_iter
    opts.tol_feas = settings.eps_abs * _IPM_FEAS_FACTOR
    opts.tol_gap_abs = settings.eps_abs * _IPM_GAP_FACTOR
    opts.tol_gap_rel = settings.eps_rel * _IPM_GAP_FACTOR
    # AlmostSolved still has to meet eps itself
    opts.reduced_tol_feas = settings.eps_abs
    opts.reduced_tol_gap_abs = settings.eps_abs * _IPM_FEAS_FACTOR
    opts.reduced_tol_gap_rel = settings.eps_rel * _IPM_FEAS_FACTOR
    P = sp.csc_matrix((prog.size, prog.size))
    solution = clarabel.DefaultSolver(P, prog.c, A, b, cones, opts).solve()

    name = str(solution.status).split(".")[-1]
    status = {
        "Solved": SolverStatus.OPTIMAL,
        "AlmostSolved": SolverStatus.OPTIMAL,
        "PrimalInfeasible": SolverStatus.INFEASIBLE,
        "AlmostPrimalInfeasible": SolverStatus.INFEASIBLE,
        "DualInfeasible": SolverStatus.UNBOUNDED,
        "AlmostDualInfeasible": SolverStatus.UNBOUNDED,
        "MaxIterations": SolverStatus.MAX_ITER,
        "MaxTime": SolverStatus.MAX_ITER,
    }.get(name)
    return {
        "status": status,
        "raw_status": name,
        "z": np.asarray(solution.x, dtype=float),
        "iterations": int(solution.iterations),
    }


def _scs_status(info: Dict[str, Any], max_iter: int) -> Optional[SolverStatus]:
    """Map an SCS info dict to a status.

    Any "inaccurate" outcome means SCS ran out of iterations or time before
    meeting its tolerances, so it is reported as ``MAX_ITER`` whatever the
    certificate looked like at that point.
    """
    name = str(info["status"]).lower()
    if "inaccurate" in name:
        return SolverStatus.MAX_ITER
    if name == "solved":
        return SolverStatus.OPTIMAL
    if name == "infeasible":
        return SolverStatus.INFEASIBLE
    if name == "unbounded":
        return SolverStatus.UNBOUNDED
    if int(info.get("iter", 0)) >= max_iter:
        return SolverStatus.MAX_ITER
    return None


def _solve_scs(prog: ConicProgram, settings: SolverSettings) -> Dict[str, Any]:
    import scs

    G, (n_nonneg,), soc = _cone_rows(prog)
    data = {
        "A": sp.vstack([prog.A, -G], format="csc"),
        "b": np.concatenate([prog.b, np.zeros(G.shape[0])]),
        "c": prog.c,
    }
    cone = {"z": prog.rows, "l": n_nonneg, "q": soc}
    solver = scs.SCS(
        data,
        cone,
        eps_abs=settings.eps_abs,
        eps_rel=settings.eps_rel,
        max_iters=settings.max_iter,
        verbose=settings.verbose,
    )
    result = solver.solve()
    info = result["info"]
    return {
        "status": _scs_status(info, settings.max_iter),
        "raw_status": str(info["status"]).lower(),
        "z": np.asarray(result["x"], dtype=float),
        "iterations": int(info["iter"]),
    }


_BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def solve(prog: ConicProgram, settings: Optional[SolverSettings] = None) -> ConicSolution:
    """Presolve and solve ``prog`` with the configured backend.

    An ``OPTIMAL`` status is only returned after the point passes
    :func:`verify_solution` at ``CONTRACT_FACTOR * eps_abs + eps_rel * scale``
    where ``scale`` is the largest of 1, ``|b|_inf`` and the magnitude of the
    solution.

    Raises:
        NumericalBreakdownError: backend failure, or a reported optimum
            that fails the independent feasibility check
    """
    settings = settings or SolverSettings()
    reduced = presolve(prog)
    started = time.perf_counter()
    try:
        raw = _BACKENDS[settings.backend](reduced, settings)
    except (ValueError, RuntimeError, ArithmeticError) as e:
        raise NumericalBreakdownError(
            f"{settings.backend} failed: {e}", diagnostics={"backend": settings.backend}
        ) from e
    wall = time.perf_counter() - started

    z = raw["z"]
    diagnostics = {
        "backend": settings.backend,
        "raw_status": raw["raw_status"],
        "iterations": raw["iterations"],
    }
    if raw["status"] is None or (
        raw["status"] is SolverStatus.OPTIMAL and not np.all(np.isfinite(z))
    ):
        raise NumericalBreakdownError(
            f"{settings.backend} stopped with status {raw['raw_status']}",
            diagnostics=diagnostics,
        )

    status = raw["status"]
    if status is not SolverStatus.OPTIMAL:
        z = np.nan_to_num(z)
    report = verify_solution(prog, z)
    if status is SolverStatus.OPTIMAL:
        scale = max(1.0, float(np.max(np.abs(prog.b), initial=0.0)), float(np.max(np.abs(z))))
        tol = CONTRACT_FACTOR * settings.eps_abs + settings.eps_rel * scale
        if not report.within(tol):
            diagnostics.update(
                eq_residual=report.eq_residual, cone_violation=report.cone_violation
            )
            raise NumericalBreakdownError(
                f"{settings.backend} reported an optimum violating feasibility "
                f"(eq {report.eq_residual:.2e}, cone {report.cone_violation:.2e})",
                diagnostics=diagnostics,
            )

    logger.debug(
        "%s: %s in %d iterations (%.3fs)",
        settings.backend,
        status.value,
        raw["iterations"],
        wall,
    )
    return ConicSolution(
        z=z,
        status=status,
        objective=float(prog.c @ z),
        eq_residual=report.eq_residual,
        cone_violation=report.cone_violation,
        iterations=raw["iterations"],
        wall_time=wall,
        backend=settings.backend,
    )


def dump_program(prog: ConicProgram, path: str) -> None:
    """Write ``(c, A, b, cones)`` as a plain-text sparse listing.

    Layout: a header line ``n m nnz``, one ``kind start size`` line per
    block, ``c`` entries as ``c j value``, ``A`` entries as ``A i j value``
    and ``b`` entries as ``b i value`` (only nonzeros).
    """
    A = prog.A.tocoo()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{prog.size} {prog.rows} {A.nnz}\n")
        for bl in prog.blocks:
            f.write(f"{bl.kind.value} {bl.start} {bl.size}\n")
        for j in np.flatnonzero(prog.c):
            f.write(f"c {j} {float(prog.c[j])!r}\n")
        for i, j, value in zip(A.row, A.col, A.data):
            f.write(f"A {i} {j} {float(value)!r}\n")
        for i in np.flatnonzero(prog.b):
            f.write(f"b {i} {float(prog.b[i])!r}\n")
