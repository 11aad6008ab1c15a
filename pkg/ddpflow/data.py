"""
Trajectory data: synthetic load profiles, power-flow-certified datasets,
depth-1 Hankel matrices and persistency-of-excitation checks.

Row layout of a dataset (column ``t`` is one sample)::

    u = (p_1..p_n, q_1..q_n)
    y = (P_1..P_n, Q_1..Q_n, l_1..l_n, v_1..v_n, v0)

A reduced dataset keeps the P, Q, l, v rows of the measured nodes
(ascending, slack excluded) followed by the v0 row.
"""

import json
import logging
import os
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from .exceptions import (
    DimensionMismatchError,
    EmptyDatasetError,
    MalformedFieldError,
    NoConvergenceError,
    ValidationError,
)
from .network import RadialNetwork
from .powerflow import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL_PF,
    InjectionVector,
    residuals,
    solve_distflow,
)

logger = logging.getLogger(__name__)

CATEGORIES = ("household", "commercial", "agricultural")
DEFAULT_T_DAY = 96
DEFAULT_RANK_TOL = 1e-8

# (offset, ((harmonic, amplitude, peak hour), ...)) per category
_SHAPES: Dict[str, Tuple[float, Tuple[Tuple[int, float, float], ...]]] = {
    # morning and evening peaks
    "household": (0.55, ((1, 0.15, 19.0), (2, 0.20, 8.0))),
    # midday plateau
    "commercial": (0.55, ((1, 0.40, 13.0), (2, -0.10, 13.0))),
    # early-morning peak
    "agricultural": (0.45, ((1, 0.30, 6.0), (2, 0.10, 6.0), (3, 0.05, 6.0))),
}


def category_shape(category: str, t_day: int = DEFAULT_T_DAY) -> np.ndarray:
    """Daily multiplier curve of a load category on a ``t_day`` grid."""
    if category not in _SHAPES:
        raise ValidationError(f"unknown load category {category!r}")
    hours = 24.0 * np.arange(t_day) / t_day
    offset, terms = _SHAPES[category]
    shape = np.full(t_day, offset)
    for k, amplitude, peak in terms:
        shape += amplitude * np.cos(2 * np.pi * k * (hours - peak) / 24.0)
    return shape


@dataclass(frozen=True, eq=False)
class LoadProfileSet:
    """Category shapes plus per-node category, peak demand and power factor."""

    shapes: Mapping[str, np.ndarray]
    assignment: Tuple[str, ...]
    peak_p: np.ndarray
    power_factor: np.ndarray
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def t_day(self) -> int:
        return len(next(iter(self.shapes.values())))

    def multipliers(self, step: int) -> np.ndarray:
        """Per-node multiplier at ``step`` (wraps around the day)."""
        k = step % self.t_day
        return np.array([self.shapes[c][k] for c in self.assignment])

    def injections(self, step: int, scale: float = 1.0) -> InjectionVector:
        """Noise-free nodal injections at ``step`` (loads negative)."""
        p = -scale * self.peak_p * self.multipliers(step)
        q = p * np.tan(np.arccos(self.power_factor))
        return InjectionVector(p=p, q=q)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LoadProfileSet):
            return NotImplemented
        return (
            self.assignment == other.assignment
            and self.seed == other.seed
            and set(self.shapes) == set(other.shapes)
            and all(np.array_equal(self.shapes[c], other.shapes[c]) for c in self.shapes)
            and np.array_equal(self.peak_p, other.peak_p)
            and np.array_equal(self.power_factor, other.power_factor)
        )

    __hash__ = None  # type: ignore[assignment]


def synth_profiles(
    n: int,
    t_day: int = DEFAULT_T_DAY,
    seed: int = 0,
    peak_p: Optional[Sequence[float]] = None,
    base_peak: float = 0.02,
    peak_jitter: float = 0.2,
    pf_range: Tuple[float, float] = (0.9, 0.98),
) -> LoadProfileSet:
    """Deterministic synthetic load profiles for ``n`` nodes.

    Categories are drawn uniformly per node. Peaks are ``base_peak`` with a
    seeded ±``peak_jitter`` amplitude jitter unless ``peak_p`` is given.
    """
    if n < 1:
        raise ValidationError("need at least one load node")
    if t_day < 2:
        raise ValidationError("a day needs at least two steps")
    rng = np.random.default_rng(seed)
    assignment = tuple(CATEGORIES[i] for i in rng.integers(0, len(CATEGORIES), n))
    jitter = rng.uniform(-peak_jitter, peak_jitter, n)
    if peak_p is None:
        peaks = base_peak * (1.0 + jitter)
    else:
        peaks = np.abs(np.asarray(peak_p, dtype=float))
        if peaks.shape != (n,):
            raise DimensionMismatchError(f"expected {n} peak values")
    pf = rng.uniform(pf_range[0], pf_range[1], n)
    shapes = {c: category_shape(c, t_day) for c in CATEGORIES}
    return LoadProfileSet(
        shapes=shapes, assignment=assignment, peak_p=peaks, power_factor=pf, seed=seed
    )


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Recorded input/output samples, one column per time step.

    ``certificates[t]`` holds the (P, Q, v, cone) residuals of sample ``t``.
    ``measured`` is ``None`` for full outputs, otherwise the sorted measured
    set (slack included) the ``y`` rows were restricted to.
    """

    u: np.ndarray
    y: np.ndarray
    certificates: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)
    measured: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.u.ndim != 2 or self.u.shape[1] == 0:
            raise EmptyDatasetError("dataset has no samples")
        if self.u.shape[0] % 2:
            raise DimensionMismatchError("u must have 2n rows")
        n = self.u.shape[0] // 2
        expected = 4 * n + 1 if self.measured is None else 4 * (len(self.measured) - 1) + 1
        if self.y.shape != (expected, self.u.shape[1]):
            raise DimensionMismatchError(
                f"y has shape {self.y.shape}, expected ({expected}, {self.u.shape[1]})"
            )

    @property
    def n(self) -> int:
        return self.u.shape[0] // 2

    @property
    def T(self) -> int:
        return self.u.shape[1]

    @property
    def is_full(self) -> bool:
        return self.measured is None

    def column(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.u[:, t].copy(), self.y[:, t].copy()

    def restrict(self, measured: Iterable[int]) -> "TrajectoryDataset":
        """Keep only the output rows of ``measured`` (slack always kept)."""
        kept = _normalize_measured(measured, self.n)
        rows = output_rows(self.n, kept, self.measured)
        meta = dict(self.meta, measured=list(kept))
        return TrajectoryDataset(
            u=self.u, y=self.y[rows], certificates=self.certificates, meta=meta, measured=kept
        )


def _normalize_measured(measured: Iterable[int], n: int) -> Tuple[int, ...]:
    kept = tuple(sorted({int(i) for i in measured}))
    if 0 not in kept:
        raise ValidationError("measured set must contain the slack node 0")
    if kept[-1] > n:
        raise ValidationError(f"measured node {kept[-1]} outside 0..{n}")
    return kept


def output_rows(
    n: int, measured: Sequence[int], layout: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Row indices of ``measured`` outputs within a y block laid out as ``layout``.

    ``layout=None`` means the full 4n+1 layout.
    """
    plus = [i for i in measured if i != 0]
    if layout is None:
        base, width = {i: i - 1 for i in range(1, n + 1)}, n
    else:
        layout_plus = [i for i in layout if i != 0]
        missing = set(plus) - set(layout_plus)
        if missing:
            raise ValidationError(f"nodes {sorted(missing)} are not in the dataset")
        base, width = {i: k for k, i in enumerate(layout_plus)}, len(layout_plus)
    idx = np.array([base[i] for i in plus], dtype=int)
    return np.concatenate([idx + f * width for f in range(4)] + [[4 * width]]).astype(int)


def generate_dataset(
    net: RadialNetwork,
    profiles: LoadProfileSet,
    days: int = 1,
    v0: float = 1.0,
    *,
    scale: float = 1.0,
    diversity: float = 0.0,
    seed: Optional[int] = None,
    tol_pf: float = DEFAULT_TOL_PF,
    max_iter: int = DEFAULT_MAX_ITER,
    executor: Optional[Executor] = None,
    workers: int = 1,
) -> TrajectoryDataset:
    """Run the DistFlow oracle over ``days`` days of profile-driven injections.

    With ``diversity > 0`` every injection is multiplied by ``1 + d`` where
    ``d`` is drawn uniformly in ±``diversity`` independently per node, step
    and for p and q; this is what makes long datasets persistently exciting.
    Every column is certified with the residuals of the oracle solution.
    """
    if profiles.n != net.n:
        raise DimensionMismatchError(
            f"profiles cover {profiles.n} nodes, network has {net.n}"
        )
    if days < 1:
        raise ValidationError("days must be at least 1")
    T = days * profiles.t_day
    rng = np.random.default_rng(profiles.seed + 1 if seed is None else seed)
    jitter_p = rng.uniform(-diversity, diversity, (net.n, T))
    jitter_q = rng.uniform(-diversity, diversity, (net.n, T))

    def _step(t: int):
        base = profiles.injections(t, scale)
        inj = InjectionVector(p=base.p * (1 + jitter_p[:, t]), q=base.q * (1 + jitter_q[:, t]))
        try:
            state = solve_distflow(net, inj, v0, tol_pf=tol_pf, max_iter=max_iter)
        except NoConvergenceError as e:
            raise NoConvergenceError(
                f"power flow failed at step {t}: {e}",
                iterations=e.iterations,
                residual=e.residual,
                step=t,
            ) from e
        return inj.u, state.y, residuals(net, state, inj).as_tuple()

    if executor is not None:
        results = list(executor.map(_step, range(T)))
    elif workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_step, range(T)))
    else:
        results = [_step(t) for t in range(T)]

    u = np.column_stack([r[0] for r in results])
    y = np.column_stack([r[1] for r in results])
    certificates = np.array([r[2] for r in results])
    meta = {
        "n": net.n,
        "T": T,
        "t_day": profiles.t_day,
        "days": days,
        "node_map": list(net.bus_ids),
        "base_mva": net.base_mva,
        "base_kv": net.base_kv,
        "seed": profiles.seed if seed is None else seed,
        "scale": scale,
        "diversity": diversity,
        "v0": v0,
    }
    logger.info("generated %d samples (max residual %.2e)", T, float(certificates.max()))
    return TrajectoryDataset(u=u, y=y, certificates=certificates, meta=meta)


@dataclass(frozen=True, eq=False)
class HankelSystem:
    """Depth-1 Hankel matrices of inputs and (possibly reduced) outputs."""

    H_u: np.ndarray
    H_y: np.ndarray
    measured: Optional[Tuple[int, ...]]
    stacked_rank: int
    pe_satisfied: bool
    singular_values: np.ndarray

    @property
    def n(self) -> int:
        return self.H_u.shape[0] // 2

    @property
    def T(self) -> int:
        return self.H_u.shape[1]

    @property
    def is_full(self) -> bool:
        return self.measured is None

    @property
    def measured_plus(self) -> Tuple[int, ...]:
        """Measured non-slack nodes in row order."""
        if self.measured is None:
            return tuple(range(1, self.n + 1))
        return tuple(i for i in self.measured if i != 0)

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.H_u, self.H_y])


def build_hankel(
    ds: TrajectoryDataset,
    measured: Optional[Iterable[int]] = None,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> HankelSystem:
    """Assemble H_u, H_y and the numerical rank of their stack.

    ``measured=None`` keeps the dataset's own output layout. Singular values
    below ``rank_tol * sigma_max`` count as zero. Persistency of excitation
    (rank 3n+1) is only defined for full outputs.
    """
    if ds.T == 0:
        raise EmptyDatasetError("dataset has no samples")
    n = ds.n
    if measured is None:
        kept = ds.measured
        H_y = ds.y
    else:
        kept = _normalize_measured(measured, n)
        H_y = ds.y[output_rows(n, kept, ds.measured)]

    H_u = ds.u
    sv = scipy.linalg.svdvals(np.vstack([H_u, H_y]))
    rank = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    pe = kept is None and rank == 3 * n + 1
    if kept is None:
        logger.info("Hankel rank %d / %d required (T=%d)", rank, 3 * n + 1, ds.T)
    return HankelSystem(
        H_u=H_u,
        H_y=H_y,
        measured=kept,
        stacked_rank=rank,
        pe_satisfied=pe,
        singular_values=sv,
    )


class Membership(NamedTuple):
    member: bool
    g: np.ndarray
    residual: float


def check_static_membership(
    hs: HankelSystem, u: np.ndarray, y: np.ndarray, tol: float = 1e-7
) -> Membership:
    """Least-squares test of [u; y] against the Hankel column span."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if u.shape != (hs.H_u.shape[0],) or y.shape != (hs.H_y.shape[0],):
        raise DimensionMismatchError(
            f"expected u of {hs.H_u.shape[0]} and y of {hs.H_y.shape[0]} entries"
        )
    A = hs.stacked
    b = np.concatenate([u, y])
    g, *_ = scipy.linalg.lstsq(A, b)
    res = float(np.max(np.abs(A @ g - b), initial=0.0))
    return Membership(member=res <= tol, g=g, residual=res)


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


def _row_labels(n: int, measured: Optional[Sequence[int]]) -> Tuple[List[str], List[str]]:
    nodes = list(range(1, n + 1)) if measured is None else [i for i in measured if i]
    u_labels = [f"p{i}" for i in range(1, n + 1)] + [f"q{i}" for i in range(1, n + 1)]
    y_labels = [f"{f}{i}" for f in ("P", "Q", "l", "v") for i in nodes] + ["v0"]
    return u_labels, y_labels


def save_dataset(ds: TrajectoryDataset, directory: str) -> None:
    """Write ``meta.json``, ``u.csv`` and ``y.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    u_labels, y_labels = _row_labels(ds.n, ds.measured)
    columns = [f"t{t}" for t in range(ds.T)]
    pd.DataFrame(ds.u, index=u_labels, columns=columns).to_csv(
        os.path.join(directory, "u.csv")
    )
    pd.DataFrame(ds.y, index=y_labels, columns=columns).to_csv(
        os.path.join(directory, "y.csv")
    )
    pd.DataFrame(ds.certificates, columns=["r_P", "r_Q", "r_v", "r_cone"]).to_csv(
        os.path.join(directory, "certificates.csv"), index=False
    )
    meta = dict(ds.meta, n=ds.n, T=ds.T)
    if ds.measured is not None:
        meta["measured"] = list(ds.measured)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_dataset(directory: str) -> TrajectoryDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    try:
        with open(os.path.join(directory, "meta.json"), "r", encoding="utf-8") as f:
            meta = json.load(f)
        u = pd.read_csv(os.path.join(directory, "u.csv"), index_col=0).to_numpy(float)
        y = pd.read_csv(os.path.join(directory, "y.csv"), index_col=0).to_numpy(float)
        cert_path = os.path.join(directory, "certificates.csv")
        if os.path.exists(cert_path):
            certificates = pd.read_csv(cert_path).to_numpy(float)
        else:
            certificates = np.zeros((u.shape[1], 4))
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise MalformedFieldError(f"bad dataset directory {directory}: {e}") from e
    measured = tuple(meta["measured"]) if meta.get("measured") else None
    return TrajectoryDataset(u=u, y=y, certificates=certificates, meta=meta, measured=measured)


def rank_profile(hs: HankelSystem, rank_tol: float = DEFAULT_RANK_TOL) -> Dict[str, Any]:
    """Rank diagnostics of a Hankel stack."""
    sv = hs.singular_values
    smax = float(sv[0]) if sv.size else 0.0
    gap = float(sv[hs.stacked_rank - 1] / smax) if hs.stacked_rank and smax else 0.0
    return {
        "rank": hs.stacked_rank,
        "required": 3 * hs.n + 1,
        "T": hs.T,
        "pe_satisfied": hs.pe_satisfied,
        "sigma_max": smax,
        "smallest_kept_ratio": gap,
        "threshold": rank_tol * smax,
    }
