"""
Unit tests for the radial network model and case parsers
"""

import json

import numpy as np
import pytest

from ddpflow.exceptions import (
    DisconnectedGraphError,
    MalformedFieldError,
    MeshedTopologyError,
    MultipleSlackBusesError,
    NoSlackBusError,
)
from ddpflow.network import (
    RadialNetwork,
    build_admittance,
    build_network,
    downstream_sets,
    incidence_matrices,
    load_case,
    parse_matpower_case,
    parse_native_network,
    path_interior,
    serialize_native_network,
    synthetic_feeder,
)

CASE4 = """function mpc = case4
%% small test feeder
mpc.version = '2';
mpc.baseMVA = 10;

%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	12.66	1	1.1	0.9;
	2	1	1.0	0.5	0	0	1	1	0	12.66	1	1.1	0.9;
	3	1	2.0	1.0	0	0	1	1	0	12.66	1	1.1	0.9;
	4	1	0.5	0.2	0	0	1	1	0	12.66	1	1.1	0.9;
];

%% branch data
mpc.branch = [
	1	2	0.01	0.02	0	0	0	0	0	0	1	-360	360;
	2	3	0.02	0.03	0	0	0	0	0	0	1	-360	360;
	2	4	0.01	0.01	0	0	0	0	0	0	1	-360	360;
	3	4	0.01	0.01	0	0	0	0	0	0	0	-360	360;
];
"""


@pytest.mark.unit
class TestBuildNetwork:
    """Test topology validation and relabelling"""

    def test_breadth_first_relabelling(self):
        """Test external ids are renumbered BFS from the slack"""
        net = build_network(
            [10, 20, 30, 40],
            10,
            [(20, 10, 0.1, 0.1), (30, 20, 0.2, 0.2), (10, 40, 0.3, 0.3)],
        )

        assert net.bus_ids == (10, 20, 40, 30)
        assert net.parents == (0, 0, 1)
        assert net.r.tolist() == [0.1, 0.3, 0.2]
        assert all(net.parent(i) < i for i in range(1, net.node_count))

    def test_loads_become_negative_injections(self):
        """Test demand maps to negative nominal injections"""
        net = build_network(
            [0, 1, 2], 0, [(1, 0, 0.1, 0.1), (2, 1, 0.1, 0.1)], loads={2: (0.05, 0.01)}
        )

        assert net.p_nom.tolist() == [0.0, -0.05]
        assert net.q_nom.tolist() == [0.0, -0.01]

    def test_cycle_rejected(self):
        """Test a loop raises MeshedTopologyError"""
        with pytest.raises(MeshedTopologyError):
            build_network(
                [0, 1, 2],
                0,
                [(1, 0, 0.1, 0.1), (2, 1, 0.1, 0.1), (2, 0, 0.1, 0.1)],
            )

    def test_parallel_branches_rejected(self):
        """Test two branches between the same buses count as a cycle"""
        with pytest.raises(MeshedTopologyError):
            build_network([0, 1], 0, [(1, 0, 0.1, 0.1), (0, 1, 0.2, 0.2)])

    def test_disconnected_rejected(self):
        """Test an island raises DisconnectedGraphError"""
        with pytest.raises(DisconnectedGraphError):
            build_network([0, 1, 2], 0, [(1, 0, 0.1, 0.1)])

    def test_unknown_slack(self):
        """Test a slack that is not a listed node"""
        with pytest.raises(NoSlackBusError):
            build_network([0, 1], 5, [(1, 0, 0.1, 0.1)])

    @pytest.mark.parametrize(
        "ids,branches",
        [
            ([0, 0, 1], [(1, 0, 0.1, 0.1)]),
            ([0, 1], [(1, 7, 0.1, 0.1)]),
            ([0, 1], [(1, 0, 0.0, 0.0)]),
            ([0, 1], [(1, 0, -0.1, 0.1)]),
            ([0, 1], [(1, 0, float("nan"), 0.1)]),
        ],
    )
    def test_malformed_fields(self, ids, branches):
        """Test duplicate ids, unknown nodes and bad impedances"""
        with pytest.raises(MalformedFieldError):
            build_network(ids, 0, branches)

    def test_direct_construction_requires_bfs_labels(self):
        """Test RadialNetwork rejects parents that follow their children"""
        with pytest.raises(MalformedFieldError):
            RadialNetwork(parents=(0, 3, 1), r=np.ones(3), x=np.ones(3))


@pytest.mark.unit
class TestMatpowerParser:
    """Test the Matpower case subset"""

    def test_parse_case(self):
        """Test bases, loads and out-of-service branches"""
        net = parse_matpower_case(CASE4)

        assert net.base_mva == 10.0
        assert net.base_kv == 12.66
        assert net.bus_ids == (1, 2, 3, 4)
        assert net.parents == (0, 1, 1)
        np.testing.assert_allclose(net.p_nom, [-0.1, -0.2, -0.05])
        np.testing.assert_allclose(net.q_nom, [-0.05, -0.1, -0.02])

    def test_ohm_and_kw_conversion(self):
        """Test the distribution-feeder unit conversion stanza"""
        text = CASE4 + (
            "\nmpc.branch(:, [BR_R BR_X]) = mpc.branch(:, [BR_R BR_X]) / Zbase;\n"
            "mpc.bus(:, [PD, QD]) = mpc.bus(:, [PD, QD]) / 1e3;\n"
        )
        net = parse_matpower_case(text)
        z_base = 12.66**2 / 10

        assert net.r[0] == pytest.approx(0.01 / z_base)
        assert net.p_nom[0] == pytest.approx(-1.0 / 1e3 / 10)

    def test_no_slack(self):
        """Test a case without a type-3 bus"""
        with pytest.raises(NoSlackBusError):
            parse_matpower_case(CASE4.replace("1\t3\t0", "1\t1\t0"))

    def test_two_slacks(self):
        """Test a case with two type-3 buses"""
        with pytest.raises(MultipleSlackBusesError):
            parse_matpower_case(CASE4.replace("4\t1\t0.5", "4\t3\t0.5"))

    def test_shunts_rejected(self):
        """Test nonzero bus shunts are refused"""
        text = CASE4.replace("2\t1\t1.0\t0.5\t0\t0", "2\t1\t1.0\t0.5\t0\t0.3")
        with pytest.raises(MalformedFieldError):
            parse_matpower_case(text)

    def test_missing_tables(self):
        """Test missing baseMVA or branch tables"""
        with pytest.raises(MalformedFieldError):
            parse_matpower_case("mpc.bus = [1 3 0 0];")
        with pytest.raises(MalformedFieldError):
            parse_matpower_case("mpc.baseMVA = 1;\nmpc.bus = [1 3 0 0];")


@pytest.mark.unit
class TestNativeFormat:
    """Test the native JSON network format"""

    def test_parse_document(self):
        """Test a minimal document with loads"""
        doc = {
            "base_mva": 1.0,
            "base_kv": 12.66,
            "slack": 1,
            "nodes": [1, 2],
            "edges": [{"from": 2, "to": 1, "r": 0.01, "x": 0.02}],
            "loads": [{"node": 2, "p": 0.05, "q": 0.01}],
        }
        net = parse_native_network(json.dumps(doc))

        assert net.n == 1
        assert net.bus_ids == (1, 2)
        assert net.p_nom.tolist() == [-0.05]

    def test_serialized_document_reloads(self):
        """Test serialize_native_network output parses back to the same network"""
        net = parse_matpower_case(CASE4)

        assert parse_native_network(serialize_native_network(net)) == net

    @pytest.mark.parametrize(
        "text",
        [
            "not json",
            "[1, 2]",
            json.dumps({"base_mva": 1.0, "slack": 1, "nodes": [1], "edges": []}),
            json.dumps(
                {"base_mva": 0, "base_kv": 1, "slack": 1, "nodes": [1, 2],
                 "edges": [{"from": 2, "to": 1, "r": 0.1, "x": 0.1}]}
            ),
        ],
    )
    def test_malformed_documents(self, text):
        """Test invalid JSON, wrong shape, missing field and bad base"""
        with pytest.raises(MalformedFieldError):
            parse_native_network(text)


@pytest.mark.unit
class TestLoadCase:
    """Test case loading by path or synthetic case string"""

    def test_synthetic_case_string(self):
        """Test synthetic:<nodes>:<seed>"""
        net = load_case("synthetic:12:4")

        assert net.node_count == 12
        assert net == synthetic_feeder(12, seed=4)

    def test_bad_synthetic_case_string(self):
        """Test a non-numeric synthetic case string"""
        with pytest.raises(MalformedFieldError):
            load_case("synthetic:many")

    def test_json_and_matpower_paths(self, tmp_path):
        """Test file extensions select the parser"""
        m_path = tmp_path / "case4.m"
        m_path.write_text(CASE4)
        json_path = tmp_path / "case4.json"
        json_path.write_text(serialize_native_network(parse_matpower_case(CASE4)))

        assert load_case(str(m_path)) == load_case(str(json_path))

    def test_missing_file(self, tmp_path):
        """Test a missing path raises FileNotFoundError"""
        with pytest.raises(FileNotFoundError):
            load_case(str(tmp_path / "absent.m"))

    def test_synthetic_feeder_is_seeded(self):
        """Test the same seed gives the same feeder"""
        assert synthetic_feeder(20, seed=1) == synthetic_feeder(20, seed=1)
        assert synthetic_feeder(20, seed=1) != synthetic_feeder(20, seed=2)

    def test_synthetic_feeder_too_small(self):
        """Test a feeder needs at least two buses"""
        with pytest.raises(MalformedFieldError):
            synthetic_feeder(1)


@pytest.mark.unit
class TestMatrices:
    """Test admittance and tree queries"""

    def test_admittance_is_laplacian(self, star_network):
        """Test symmetric, zero row sums, series admittance off-diagonal"""
        Y = build_admittance(star_network, measured=[0, 2]).Y

        np.testing.assert_allclose(Y, Y.T)
        np.testing.assert_allclose(Y.sum(axis=1), 0, atol=1e-12)
        assert Y[0, 1] == pytest.approx(-1 / complex(0.01, 0.02))
        assert Y[0, 2] == 0

    def test_admittance_split(self, star_network):
        """Test measured/unmeasured partition"""
        adm = build_admittance(star_network, measured=[0, 2])

        assert adm.size == 4
        assert adm.unmeasured == frozenset({1, 3})

    def test_incidence_matrices(self, star_network):
        """Test child incidence and subtree matrices"""
        C, D = incidence_matrices(star_network)

        np.testing.assert_array_equal(C, [[0, 1, 1], [0, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(D, [[1, 1, 1], [0, 1, 0], [0, 0, 1]])
        assert not D.flags.writeable

    def test_downstream_and_paths(self, star_network):
        """Test descendants and path interiors"""
        down = downstream_sets(star_network)

        assert down[0] == frozenset({1, 2, 3})
        assert down[1] == frozenset({2, 3})
        assert down[3] == frozenset()
        assert path_interior(star_network, 2, 3) == frozenset({1})
        assert path_interior(star_network, 0, 1) == frozenset()

    def test_children_and_graph(self, chain_network):
        """Test children map and directed graph"""
        assert chain_network.children() == {0: [1], 1: [2], 2: [3], 3: []}
        assert sorted(chain_network.graph().edges()) == [(0, 1), (1, 2), (2, 3)]
