"""
Radial network data model.

Buses are relabelled to contiguous ids 0..n at parse time, with the slack
bus at 0 and every other bus numbered in breadth-first order from the
slack, so ``parent(i) < i`` holds for all ``i >= 1``. All quantities are
per-unit on the case base; conversions only happen in the parsers and
the serializer.

Two on-disk formats are read:

- a subset of the Matpower ``.m`` case format (``baseMVA``, ``bus`` and
  ``branch`` matrices), including the ohm/kW conversion stanza that the
  Matpower distribution feeders carry;
- a native JSON document::

    {"base_mva": 1.0, "base_kv": 12.66, "slack": 1, "nodes": [1, 2],
     "edges": [{"from": 2, "to": 1, "r": 0.01, "x": 0.02}],
     "loads": [{"node": 2, "p": 0.05, "q": 0.01}]}

  where ``loads`` is optional and holds demand (positive = consumption).
"""

import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .exceptions import (
    DisconnectedGraphError,
    MalformedFieldError,
    MeshedTopologyError,
    MultipleSlackBusesError,
    NoSlackBusError,
)

logger = logging.getLogger(__name__)

# Matpower bus types / column positions (0-based)
_REF_BUS = 3
_BUS_I, _BUS_TYPE, _PD, _QD, _GS, _BS, _BASE_KV = 0, 1, 2, 3, 4, 5, 9
_F_BUS, _T_BUS, _BR_R, _BR_X, _BR_B, _TAP, _BR_STATUS = 0, 1, 2, 3, 4, 8, 10


@dataclass(frozen=True)
class Branch:
    """Edge (child -> parent) with series impedance in p.u."""

    child: int
    parent: int
    r: float
    x: float

    @property
    def z2(self) -> float:
        return self.r * self.r + self.x * self.x


def _frozen(values: Optional[Iterable[float]]) -> Optional[np.ndarray]:
    if values is None:
        return None
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RadialNetwork:
    """Rooted tree of buses and branches.

    ``parents[k]``, ``r[k]`` and ``x[k]`` describe the branch leaving node
    ``k + 1`` towards the slack. ``bus_ids[i]`` is the external bus number of
    internal node ``i``. ``p_nom``/``q_nom`` are optional nominal injections
    (loads negative) for nodes 1..n.
    """

    parents: Tuple[int, ...]
    r: np.ndarray
    x: np.ndarray
    base_mva: float = 1.0
    base_kv: float = 1.0
    bus_ids: Tuple[int, ...] = ()
    p_nom: Optional[np.ndarray] = None
    q_nom: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.parents)
        object.__setattr__(self, "r", _frozen(self.r))
        object.__setattr__(self, "x", _frozen(self.x))
        object.__setattr__(self, "p_nom", _frozen(self.p_nom))
        object.__setattr__(self, "q_nom", _frozen(self.q_nom))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(n + 1)))
        if self.r.shape != (n,) or self.x.shape != (n,):
            raise MalformedFieldError("r and x must have one entry per branch")
        if len(self.bus_ids) != n + 1:
            raise MalformedFieldError("bus_ids must have one entry per node")
        for child, parent in enumerate(self.parents, start=1):
            if not 0 <= parent < child:
                raise MalformedFieldError(
                    f"node {child} has parent {parent}; expected breadth-first labels"
                )
        if np.any(self.r < 0) or np.any(self.x < 0):
            raise MalformedFieldError("negative branch resistance or reactance")
        if np.any(self.r**2 + self.x**2 <= 0):
            raise MalformedFieldError("branch with zero impedance")

    @property
    def n(self) -> int:
        """Number of non-slack nodes."""
        return len(self.parents)

    @property
    def node_count(self) -> int:
        return len(self.parents) + 1

    @property
    def z2(self) -> np.ndarray:
        return self.r**2 + self.x**2

    @property
    def edges(self) -> Tuple[Branch, ...]:
        return tuple(
            Branch(k + 1, p, float(self.r[k]), float(self.x[k]))
            for k, p in enumerate(self.parents)
        )

    def parent(self, node: int) -> int:
        return self.parents[node - 1]

    def children(self) -> Dict[int, List[int]]:
        kids: Dict[int, List[int]] = {i: [] for i in range(self.node_count)}
        for child, parent in enumerate(self.parents, start=1):
            kids[parent].append(child)
        return kids

    def graph(self) -> nx.DiGraph:
        """Directed graph with edges parent -> child."""
        g = nx.DiGraph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from((p, c) for c, p in enumerate(self.parents, start=1))
        return g

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RadialNetwork):
            return NotImplemented
        return (
            self.parents == other.parents
            and self.bus_ids == other.bus_ids
            and self.base_mva == other.base_mva
            and self.base_kv == other.base_kv
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.x, other.x)
            and _optional_equal(self.p_nom, other.p_nom)
            and _optional_equal(self.q_nom, other.q_nom)
        )

    __hash__ = None  # type: ignore[assignment]


def _optional_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix with an optional measured/unmeasured split."""

    Y: np.ndarray
    measured: Optional[FrozenSet[int]] = None

    @property
    def size(self) -> int:
        return self.Y.shape[0]

    @property
    def unmeasured(self) -> FrozenSet[int]:
        if self.measured is None:
            return frozenset()
        return frozenset(range(self.size)) - self.measured


def build_network(
    bus_ids: Sequence[int],
    slack: int,
    branches: Sequence[Tuple[int, int, float, float]],
    base_mva: float = 1.0,
    base_kv: float = 1.0,
    loads: Optional[Dict[int, Tuple[float, float]]] = None,
) -> RadialNetwork:
    """Validate a bus/branch list and relabel it into a RadialNetwork.

    ``branches`` holds ``(a, b, r, x)`` tuples in external bus numbers and in
    either orientation. ``loads`` maps external bus number to demand ``(p, q)``
    in p.u.
    """
    ids = [int(b) for b in bus_ids]
    if len(set(ids)) != len(ids):
        raise MalformedFieldError("duplicate node id")
    if slack not in set(ids):
        raise NoSlackBusError(f"slack bus {slack} is not a listed node")

    g = nx.MultiGraph()
    g.add_nodes_from(ids)
    for a, b, r, x in branches:
        if a not in g or b not in g:
            raise MalformedFieldError(f"branch ({a}, {b}) references an unknown node")
        if not (np.isfinite(r) and np.isfinite(x)):
            raise MalformedFieldError(f"branch ({a}, {b}) has non-finite impedance")
        if r < 0 or x < 0:
            raise MalformedFieldError(f"branch ({a}, {b}) has negative impedance")
        if r * r + x * x <= 0:
            raise MalformedFieldError(f"branch ({a}, {b}) has zero impedance")
        g.add_edge(a, b, r=float(r), x=float(x))

    components = nx.number_connected_components(g)
    if g.number_of_edges() - g.number_of_nodes() + components > 0:
        raise MeshedTopologyError("active branches contain a cycle")
    if components != 1:
        raise DisconnectedGraphError(
            f"{components} connected components; the feeder must be a single tree"
        )

    order = [slack]
    parent_of: Dict[int, int] = {}
    for u, v in nx.bfs_edges(nx.Graph(g), slack, sort_neighbors=sorted):
        order.append(v)
        parent_of[v] = u
    index = {bus: i for i, bus in enumerate(order)}

    parents, r_vals, x_vals = [], [], []
    for bus in order[1:]:
        up = parent_of[bus]
        data = next(iter(g.get_edge_data(bus, up).values()))
        parents.append(index[up])
        r_vals.append(data["r"])
        x_vals.append(data["x"])

    p_nom = q_nom = None
    if loads:
        p_nom = [-loads.get(bus, (0.0, 0.0))[0] for bus in order[1:]]
        q_nom = [-loads.get(bus, (0.0, 0.0))[1] for bus in order[1:]]

    return RadialNetwork(
        parents=tuple(parents),
        r=np.array(r_vals),
        x=np.array(x_vals),
        base_mva=float(base_mva),
        base_kv=float(base_kv),
        bus_ids=tuple(order),
        p_nom=p_nom,
        q_nom=q_nom,
    )


# ---------------------------------------------------------------------------
# Matpower subset
# ---------------------------------------------------------------------------

_COMMENT_RE = re.compile(r"%[^\n]*")
_BASE_MVA_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;\n]+);")
_OHMS_RE = re.compile(r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*=")
_KW_RE = re.compile(r"mpc\.bus\(\s*:\s*,\s*\[\s*PD\s*,?\s*QD\s*\]\s*\)\s*=")


def _matrix(text: str, name: str) -> np.ndarray:
    match = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\]\s*;", text, re.S)
    if not match:
        raise MalformedFieldError(f"missing mpc.{name} table")
    rows = []
    for raw in re.split(r"[;\n]", match.group(1)):
        tokens = [t for t in re.split(r"[\s,]+", raw.strip()) if t]
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as e:
            raise MalformedFieldError(f"non-numeric entry in mpc.{name}: {e}") from e
    if not rows:
        raise MalformedFieldError(f"mpc.{name} is empty")
    width = min(len(r) for r in rows)
    if width != max(len(r) for r in rows):
        raise MalformedFieldError(f"ragged rows in mpc.{name}")
    return np.array(rows)


def parse_matpower_case(text: str) -> RadialNetwork:
    """Parse the Matpower subset into a per-unit RadialNetwork."""
    body = _COMMENT_RE.sub("", text)

    base_match = _BASE_MVA_RE.search(body)
    if not base_match:
        raise MalformedFieldError("missing mpc.baseMVA")
    try:
        base_mva = float(base_match.group(1))
    except ValueError as e:
        raise MalformedFieldError(f"bad baseMVA: {base_match.group(1)!r}") from e
    if base_mva <= 0:
        raise MalformedFieldError("baseMVA must be positive")

    bus = _matrix(body, "bus")
    branch = _matrix(body, "branch")
    if bus.shape[1] < 4:
        raise MalformedFieldError("bus table needs at least id, type, Pd, Qd")
    if branch.shape[1] < 4:
        raise MalformedFieldError("branch table needs at least from, to, r, x")

    if bus.shape[1] > _BS and np.any(bus[:, [_GS, _BS]] != 0):
        raise MalformedFieldError("bus shunts (Gs/Bs) are not supported")
    if branch.shape[1] > _BR_B and np.any(branch[:, _BR_B] != 0):
        raise MalformedFieldError("line charging (b) is not supported")
    if branch.shape[1] > _TAP:
        taps = branch[:, _TAP]
        if np.any((taps != 0) & (taps != 1)):
            raise MalformedFieldError("transformer taps are not supported")

    slack_rows = np.flatnonzero(bus[:, _BUS_TYPE] == _REF_BUS)
    if len(slack_rows) == 0:
        raise NoSlackBusError("no bus of type 3")
    if len(slack_rows) > 1:
        raise MultipleSlackBusesError(f"{len(slack_rows)} buses of type 3")
    slack_row = slack_rows[0]
    slack = int(bus[slack_row, _BUS_I])

    base_kv = 1.0
    if bus.shape[1] > _BASE_KV and bus[slack_row, _BASE_KV] > 0:
        base_kv = float(bus[slack_row, _BASE_KV])

    if branch.shape[1] > _BR_STATUS:
        active = branch[branch[:, _BR_STATUS] != 0]
    else:
        active = branch
    if len(active) < len(branch):
        logger.info("ignoring %d out-of-service branches", len(branch) - len(active))

    r = active[:, _BR_R].copy()
    x = active[:, _BR_X].copy()
    if _OHMS_RE.search(body):
        z_base = base_kv**2 / base_mva
        r, x = r / z_base, x / z_base
        logger.debug("converted branch impedances from ohms (z_base=%g)", z_base)

    pd, qd = bus[:, _PD].copy(), bus[:, _QD].copy()
    if _KW_RE.search(body):
        pd, qd = pd / 1e3, qd / 1e3

    loads = {
        int(b): (float(p) / base_mva, float(q) / base_mva)
        for b, p, q in zip(bus[:, _BUS_I], pd, qd)
    }
    branches = [
        (int(f), int(t), float(rr), float(xx))
        for f, t, rr, xx in zip(active[:, _F_BUS], active[:, _T_BUS], r, x)
    ]
    return build_network(
        bus_ids=[int(b) for b in bus[:, _BUS_I]],
        slack=slack,
        branches=branches,
        base_mva=base_mva,
        base_kv=base_kv,
        loads=loads,
    )


# ---------------------------------------------------------------------------
# Native JSON format
# ---------------------------------------------------------------------------


def _field(doc: Dict[str, Any], key: str) -> Any:
    if key not in doc:
        raise MalformedFieldError(f"missing field {key!r}")
    return doc[key]


def parse_native_network(text: str) -> RadialNetwork:
    """Parse the native JSON network document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedFieldError(f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise MalformedFieldError("network document must be a JSON object")

    try:
        base_mva = float(_field(doc, "base_mva"))
        base_kv = float(_field(doc, "base_kv"))
        slack = int(_field(doc, "slack"))
        nodes = [int(v) for v in _field(doc, "nodes")]
        edges = [
            (int(e["from"]), int(e["to"]), float(e["r"]), float(e["x"]))
            for e in _field(doc, "edges")
        ]
        loads = {
            int(entry["node"]): (float(entry["p"]), float(entry["q"]))
            for entry in doc.get("loads", [])
        }
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedFieldError(f"bad network field: {e}") from e

    if base_mva <= 0 or base_kv <= 0:
        raise MalformedFieldError("bases must be positive")
    return build_network(nodes, slack, edges, base_mva, base_kv, loads or None)


def serialize_native_network(net: RadialNetwork) -> str:
    """Write the native JSON document; inverse of parse_native_network."""
    ids = net.bus_ids
    doc: Dict[str, Any] = {
        "base_mva": net.base_mva,
        "base_kv": net.base_kv,
        "slack": ids[0],
        "nodes": list(ids),
        "edges": [
            {"from": ids[e.child], "to": ids[e.parent], "r": e.r, "x": e.x}
            for e in net.edges
        ],
    }
    if net.p_nom is not None and net.q_nom is not None:
        doc["loads"] = [
            {"node": ids[i + 1], "p": -float(p), "q": -float(q)}
            for i, (p, q) in enumerate(zip(net.p_nom, net.q_nom))
        ]
    return json.dumps(doc, indent=2)


def load_case(case: str) -> RadialNetwork:
    """Load a network from a ``.m``/``.json`` path or ``synthetic:<nodes>[:<seed>]``."""
    if case.startswith("synthetic:"):
        parts = case.split(":")
        try:
            nodes = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError) as e:
            raise MalformedFieldError(f"bad synthetic case string {case!r}") from e
        return synthetic_feeder(nodes, seed=seed)

    with open(case, "r", encoding="utf-8") as f:
        text = f.read()
    if case.endswith(".json"):
        return parse_native_network(text)
    return parse_matpower_case(text)


def synthetic_feeder(
    nodes: int,
    seed: int = 0,
    r_range: Tuple[float, float] = (0.001, 0.05),
    x_range: Tuple[float, float] = (0.001, 0.05),
    chain_bias: float = 0.6,
    base_mva: float = 1.0,
    base_kv: float = 12.66,
) -> RadialNetwork:
    """Random radial feeder with ``nodes`` buses (slack included).

    Each new bus attaches to the previous one with probability
    ``chain_bias`` and to a uniformly chosen earlier bus otherwise, which
    gives long laterals like real distribution feeders.
    """
    if nodes < 2:
        raise MalformedFieldError("a feeder needs at least two buses")
    rng = np.random.default_rng(seed)
    branches = []
    for k in range(1, nodes):
        parent = k - 1 if rng.random() < chain_bias else int(rng.integers(0, k))
        r = float(rng.uniform(*r_range))
        x = float(rng.uniform(*x_range))
        branches.append((k, parent, r, x))
    return build_network(list(range(nodes)), 0, branches, base_mva, base_kv)


# ---------------------------------------------------------------------------
# Matrices and tree queries
# ---------------------------------------------------------------------------


def build_admittance(
    net: RadialNetwork, measured: Optional[Iterable[int]] = None
) -> AdmittanceMatrix:
    """Bus admittance matrix (pure Laplacian, no shunts)."""
    size = net.node_count
    Y = np.zeros((size, size), dtype=complex)
    for e in net.edges:
        y = 1.0 / complex(e.r, e.x)
        Y[e.child, e.parent] -= y
        Y[e.parent, e.child] -= y
        Y[e.child, e.child] += y
        Y[e.parent, e.parent] += y
    kept = frozenset(int(i) for i in measured) if measured is not None else None
    return AdmittanceMatrix(Y=Y, measured=kept)


def downstream_sets(net: RadialNetwork) -> Dict[int, FrozenSet[int]]:
    """Descendants of every node (the node itself excluded)."""
    g = net.graph()
    return {i: frozenset(nx.descendants(g, i)) for i in range(net.node_count)}


def path_interior(net: RadialNetwork, i: int, j: int) -> FrozenSet[int]:
    """Interior nodes of the unique tree path between ``i`` and ``j``."""
    path = nx.shortest_path(net.graph().to_undirected(as_view=True), i, j)
    return frozenset(path[1:-1])


def incidence_matrices(net: RadialNetwork) -> Tuple[np.ndarray, np.ndarray]:
    """Child incidence ``C`` and subtree matrix ``D`` over nodes 1..n.

    ``C[i, k] = 1`` iff node ``k+1`` is a child of node ``i+1``;
    ``D[i, k] = 1`` iff node ``k+1`` lies in the subtree rooted at ``i+1``.
    The arrays are shared between calls and read-only.
    """
    return _incidence(net.parents)


@lru_cache(maxsize=64)
def _incidence(parents: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    n = len(parents)
    C = np.zeros((n, n))
    for child, parent in enumerate(parents, start=1):
        if parent > 0:
            C[parent - 1, child - 1] = 1.0
    D = np.eye(n)
    # children have larger labels, so one reverse pass accumulates subtrees
    for child in range(n, 0, -1):
        parent = parents[child - 1]
        if parent > 0:
            D[parent - 1] += D[child - 1]
    C.setflags(write=False)
    D.setflags(write=False)
    return C, D
