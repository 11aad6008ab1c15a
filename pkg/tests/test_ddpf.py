"""
Tests for the data-driven DistFlow programs and voltage reconstruction
"""

import numpy as np
import pytest

from ddpflow.data import build_hankel, generate_dataset, synth_profiles
from ddpflow.ddpf import (
    DdpfSolution,
    MembershipVerdict,
    check_exactness,
    membership_test,
    model_based_reduced_voltages,
    reconstruct_full_voltages,
    signed_error_statistics,
    solution_to_dict,
    solve_ddpf_full,
    solve_ddpf_reduced,
)
from ddpflow.exceptions import (
    DimensionMismatchError,
    InconsistentAssignmentError,
    MissingSlackAdjacencyError,
    ValidationError,
)
from ddpflow.network import build_admittance
from ddpflow.powerflow import InjectionVector, solve_distflow
from ddpflow.reduction import AssignmentMatrix, kron_reduce, radialize
from ddpflow.socp import SolverSettings


def _manual_solution(nodes, v, v0=1.0, l=None, P=None, Q=None):  # noqa: E741
    m = len(nodes)
    zeros = np.zeros(m)
    return DdpfSolution(
        p=np.zeros(3),
        q=np.zeros(3),
        P=zeros if P is None else np.asarray(P, dtype=float),
        Q=zeros if Q is None else np.asarray(Q, dtype=float),
        l=zeros if l is None else np.asarray(l, dtype=float),
        v=np.asarray(v, dtype=float),
        v0=v0,
        g=np.ones(1),
        nodes=tuple(nodes),
        status="optimal",
        objective=0.0,
    )


@pytest.mark.unit
class TestMembership:
    """Test data-only membership of operating points"""

    def test_oracle_point_is_member(self, hankel, test_dataset):
        """Test a held-out oracle point is accepted"""
        u, y = test_dataset.column(11)
        result = membership_test(hankel, u, y)

        assert result.verdict is MembershipVerdict.MEMBER
        assert result
        assert result.cone_residual <= 1e-9

    def test_cone_violation_rejected(self, hankel, test_dataset):
        """Test the midpoint of two operating points satisfies the data but not the cone"""
        u1, y1 = test_dataset.column(0)
        u2, y2 = test_dataset.column(40)
        result = membership_test(hankel, (u1 + u2) / 2, (y1 + y2) / 2)

        assert result.linear_residual <= 1e-7
        assert result.cone_residual > 1e-7
        assert result.verdict is MembershipVerdict.NOT_MEMBER

    def test_perturbed_point_rejected(self, hankel, test_dataset):
        """Test a perturbed squared current is rejected"""
        u, y = test_dataset.column(11)
        n = hankel.n
        y[2 * n + 1] += 1e-2

        assert membership_test(hankel, u, y).verdict is MembershipVerdict.NOT_MEMBER

    def test_without_excitation_is_indeterminate(self, feeder, profiles, test_dataset):
        """Test rank-deficient data gives no verdict"""
        hs = build_hankel(generate_dataset(feeder, profiles))
        u, y = test_dataset.column(0)

        assert membership_test(hs, u, y).verdict is MembershipVerdict.INDETERMINATE

    def test_needs_full_outputs(self, train_dataset, test_dataset):
        """Test measured-only Hankel systems are refused"""
        hs = build_hankel(train_dataset, measured=[0, 1])
        u, y = test_dataset.column(0)

        with pytest.raises(ValidationError):
            membership_test(hs, u, y)


class TestFullDdpf:
    """Test the full-output data-driven power flow"""

    @pytest.mark.parametrize("step", [0, 17, 40])
    def test_recovers_oracle(self, hankel, test_dataset, step):
        """Test the optimum reproduces the oracle operating point"""
        n = hankel.n
        u, y = test_dataset.column(step)
        inj = InjectionVector.from_u(u)
        sol = solve_ddpf_full(hankel, inj.p, inj.q)

        np.testing.assert_allclose(sol.voltages, np.sqrt(y[3 * n : 4 * n]), atol=1e-5)
        np.testing.assert_allclose(sol.p, inj.p, atol=1e-6)
        assert sol.g.sum() == pytest.approx(1.0, abs=1e-6)
        assert sol.v0 == pytest.approx(1.0, abs=1e-7)
        assert check_exactness(sol).exact
        assert sol.nodes == tuple(range(1, n + 1))
        assert not sol.reduced

    @pytest.mark.parametrize("backend,atol", [("clarabel", 1e-5), ("scs", 5e-4)])
    def test_recovers_oracle_on_each_backend(self, hankel, test_dataset, backend, atol):
        """Test both conic backends reach the oracle voltages"""
        n = hankel.n
        settings = SolverSettings(backend=backend)
        for step in (4, 30):
            u, y = test_dataset.column(step)
            inj = InjectionVector.from_u(u)
            sol = solve_ddpf_full(hankel, inj.p, inj.q, settings)

            assert sol.conic.backend == backend
            np.testing.assert_allclose(sol.voltages, np.sqrt(y[3 * n : 4 * n]), atol=atol)
            assert sol.g.sum() == pytest.approx(1.0, abs=1e-5)

    def test_flat_operating_point(self, hankel):
        """Test zero injections give zero flows and unit voltages"""
        n = hankel.n
        sol = solve_ddpf_full(hankel, np.zeros(n), np.zeros(n))

        assert np.max(np.abs(sol.P)) <= 5e-5
        assert np.max(np.abs(sol.Q)) <= 5e-5
        assert np.max(np.abs(sol.l)) <= 1e-7
        np.testing.assert_allclose(sol.voltages, np.ones(n), atol=1e-5)
        np.testing.assert_allclose(sol.p, np.zeros(n), atol=1e-6)
        assert sol.objective <= 1e-8

    def test_needs_full_outputs(self, train_dataset):
        """Test a measured Hankel system is refused"""
        hs = build_hankel(train_dataset, measured=[0, 2])

        with pytest.raises(ValidationError):
            solve_ddpf_full(hs, np.zeros(hs.n), np.zeros(hs.n))

    def test_target_size(self, hankel):
        """Test target vectors must cover every node"""
        with pytest.raises(DimensionMismatchError):
            solve_ddpf_full(hankel, np.zeros(2), np.zeros(2))

    def test_solution_dict(self, hankel, test_dataset):
        """Test the JSON-ready dump"""
        n = hankel.n
        u, y = test_dataset.column(3)
        inj = InjectionVector.from_u(u)
        sol = solve_ddpf_full(hankel, inj.p, inj.q)
        out = solution_to_dict(sol, oracle=np.sqrt(y[3 * n : 4 * n]))

        assert out["status"] == "optimal"
        assert out["g_sum"] == pytest.approx(1.0, abs=1e-6)
        assert out["solver"]["backend"] == "clarabel"
        assert "errors" in out
        assert "sigma" not in out


class TestReducedDdpf:
    """Test the reduced, regularised data-driven power flow"""

    def test_all_nodes_measured(self, feeder, hankel, test_dataset):
        """Test the reduced program with every node measured"""
        n = feeder.n
        radial = radialize(feeder, range(n + 1))
        u, y = test_dataset.column(5)
        inj = InjectionVector.from_u(u)
        sol = solve_ddpf_reduced(hankel, inj.p, inj.q, radial.reduced.slack_adjacent())
        oracle = np.sqrt(np.concatenate([[y[-1]], y[3 * n : 4 * n]]))
        rec = reconstruct_full_voltages(sol, radial.assignment, oracle)

        assert sol.reduced
        assert sol.sigma.shape == (n,)
        assert rec.max_error <= 5e-3
        np.testing.assert_allclose(sol.l_prime, sol.l + sol.sigma, atol=1e-7)

    def test_sparse_sensors(self, feeder, train_dataset, test_dataset):
        """Test a radialized sparse placement reconstructs every node"""
        n = feeder.n
        radial = radialize(feeder, [0, 2, n])
        hs = build_hankel(train_dataset, radial.kept)
        u, y = test_dataset.column(9)
        inj = InjectionVector.from_u(u)
        sol = solve_ddpf_reduced(hs, inj.p, inj.q, radial.reduced.slack_adjacent())
        oracle = np.sqrt(np.concatenate([[y[-1]], y[3 * n : 4 * n]]))
        rec = reconstruct_full_voltages(sol, radial.assignment, oracle)

        assert sol.measured == radial.kept
        assert rec.vm.shape == (n + 1,)
        assert rec.max_error < 0.05
        assert rec.provenance(0) == "measured"

    def test_all_nodes_large_lambda_matches_full(self, feeder, hankel, test_dataset):
        """Test measuring every node with a stiff slack penalty reproduces the full program"""
        radial = radialize(feeder, range(feeder.n + 1))
        u, _ = test_dataset.column(12)
        inj = InjectionVector.from_u(u)
        full = solve_ddpf_full(hankel, inj.p, inj.q)
        reduced = solve_ddpf_reduced(
            hankel, inj.p, inj.q, radial.reduced.slack_adjacent(), lambda_l=1e5
        )

        assert reduced.nodes == full.nodes
        np.testing.assert_allclose(reduced.voltages, full.voltages, atol=1e-4)

    def test_sigma_shrinks_as_lambda_l_grows(self, feeder, hankel, test_dataset):
        """Test the current slack norm is non-increasing in its weight"""
        radial = radialize(feeder, range(feeder.n + 1))
        u, _ = test_dataset.column(20)
        inj = InjectionVector.from_u(u)
        norms = [
            float(
                np.linalg.norm(
                    solve_ddpf_reduced(
                        hankel,
                        inj.p,
                        inj.q,
                        radial.reduced.slack_adjacent(),
                        lambda_l=weight,
                    ).sigma
                )
            )
            for weight in (10.0, 1e3, 1e5)
        ]

        assert norms[1] <= norms[0] + 1e-9
        assert norms[2] <= norms[1] + 1e-9

    def test_flat_operating_point(self, feeder, hankel):
        """Test zero injections give unit measured voltages and no current slack"""
        n = feeder.n
        radial = radialize(feeder, range(n + 1))
        sol = solve_ddpf_reduced(
            hankel, np.zeros(n), np.zeros(n), radial.reduced.slack_adjacent()
        )

        np.testing.assert_allclose(sol.voltages, np.ones(n), atol=1e-4)
        assert np.max(np.abs(sol.sigma)) <= 1e-5

    def test_missing_slack_adjacency(self, train_dataset):
        """Test a measured set with nothing next to the slack"""
        hs = build_hankel(train_dataset, [0, 3])

        with pytest.raises(MissingSlackAdjacencyError):
            solve_ddpf_reduced(hs, np.zeros(hs.n), np.zeros(hs.n), [])
        with pytest.raises(MissingSlackAdjacencyError):
            solve_ddpf_reduced(hs, np.zeros(hs.n), np.zeros(hs.n), [4])

    def test_negative_weights(self, hankel):
        """Test regularisation weights must be non-negative"""
        with pytest.raises(ValidationError):
            solve_ddpf_reduced(
                hankel, np.zeros(hankel.n), np.zeros(hankel.n), [1], lambda_g=-1.0
            )


@pytest.mark.unit
class TestReconstruction:
    """Test reconstruction, exactness and statistics helpers"""

    def test_copies_representative_voltages(self, chain_network):
        """Test every node takes its representative's magnitude"""
        sol = _manual_solution([2], v=[0.81], v0=1.0)
        assignment = AssignmentMatrix.from_kept(chain_network, [0, 2])
        rec = reconstruct_full_voltages(sol, assignment, oracle=np.array([1.0, 0.95, 0.9, 0.88]))

        np.testing.assert_allclose(rec.vm, [1.0, 1.0, 0.9, 0.9])
        assert rec.representative == (0, 0, 2, 2)
        assert rec.provenance(3) == "proxied_by:2"
        assert rec.provenance(2) == "measured"
        assert rec.measured == (0, 2)
        assert rec.max_error == pytest.approx(0.05)

    def test_assignment_must_match(self, chain_network):
        """Test a placement that doesn't match the measured set"""
        sol = _manual_solution([2], v=[0.81])

        with pytest.raises(InconsistentAssignmentError):
            reconstruct_full_voltages(sol, AssignmentMatrix.from_kept(chain_network, [0, 1]))

    def test_oracle_shape(self, chain_network):
        """Test the oracle must cover nodes 0..n"""
        sol = _manual_solution([2], v=[0.81])

        with pytest.raises(DimensionMismatchError):
            reconstruct_full_voltages(
                sol, AssignmentMatrix.from_kept(chain_network, [0, 2]), oracle=np.ones(2)
            )

    def test_exactness_gap(self):
        """Test the relative cone gap"""
        tight = _manual_solution([1, 2], v=[1.0, 1.0], l=[0.25, 0.04], P=[0.3, 0.2], Q=[0.4, 0.0])
        loose = _manual_solution([1], v=[1.0], l=[0.5], P=[0.3], Q=[0.4])

        assert check_exactness(tight).exact
        assert check_exactness(tight).max_relative_gap == pytest.approx(0.0, abs=1e-12)
        assert not check_exactness(loose).exact
        assert check_exactness(loose).max_relative_gap == pytest.approx(0.5)

    def test_signed_error_statistics(self):
        """Test per-node quantiles and overestimation share"""
        errors = np.array([[0.1, -0.2], [0.3, -0.1], [-0.1, -0.3]])
        stats = signed_error_statistics(errors, nodes=[4, 7])

        assert list(stats.index) == [4, 7]
        assert list(stats.columns) == [
            "mean",
            "q05",
            "median",
            "q95",
            "min",
            "max",
            "overestimated_share",
        ]
        assert stats.loc[4, "overestimated_share"] == pytest.approx(2 / 3)
        assert stats.loc[7, "max"] == pytest.approx(-0.1)
        assert stats.loc[4, "median"] == pytest.approx(0.1)


@pytest.mark.unit
class TestModelBaseline:
    """Test the model-based reduced-network baseline"""

    def test_identity_placement_matches_oracle(self, feeder, rng):
        """Test the unreduced network reproduces DistFlow exactly"""
        inj = InjectionVector(p=-rng.uniform(0, 0.02, feeder.n), q=-rng.uniform(0, 0.01, feeder.n))
        kept = tuple(range(feeder.node_count))
        reduced = kron_reduce(build_admittance(feeder), kept)
        vm = model_based_reduced_voltages(
            reduced, AssignmentMatrix.identity(feeder.node_count), inj
        )
        state = solve_distflow(feeder, inj)

        np.testing.assert_allclose(vm[1:], np.sqrt(state.v), atol=1e-8)
        assert vm[0] == pytest.approx(1.0)

    def test_sparse_placement_spreads_values(self, feeder, rng):
        """Test every node in a cluster gets the representative value"""
        radial = radialize(feeder, [0, 3])
        inj = InjectionVector(p=-rng.uniform(0, 0.02, feeder.n), q=-rng.uniform(0, 0.01, feeder.n))
        vm = model_based_reduced_voltages(radial.reduced, radial.assignment, inj)

        for rep, members in radial.assignment.clusters.items():
            assert len({vm[j] for j in members}) == 1
            assert vm[rep] <= 1.0

    def test_injection_size(self, feeder):
        """Test injections must cover the original network"""
        reduced = kron_reduce(build_admittance(feeder), range(feeder.node_count))

        with pytest.raises(DimensionMismatchError):
            model_based_reduced_voltages(
                reduced, AssignmentMatrix.identity(feeder.node_count), InjectionVector.zeros(2)
            )


def test_synthetic_day_has_expected_length():
    """Test default profiles cover a 96-step day"""
    assert synth_profiles(3).t_day == 96
