"""Pipeline orchestration: datasets, sensor placement and DDPF evaluation."""

import json
import logging
import os
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import PipelineConfig
from .data import (
    HankelSystem,
    LoadProfileSet,
    TrajectoryDataset,
    build_hankel,
    generate_dataset,
    load_dataset,
    rank_profile,
    save_dataset,
    synth_profiles,
)
from .ddpf import (
    model_based_reduced_voltages,
    reconstruct_full_voltages,
    signed_error_statistics,
    solve_ddpf_reduced,
)
from .exceptions import ConvergenceError, SolverError
from .network import RadialNetwork, build_admittance, load_case, serialize_native_network
from .powerflow import InjectionVector
from .reduction import (
    AssignmentMatrix,
    PlacementResult,
    RadializationResult,
    Scenario,
    build_scenarios,
    greedy_placement,
    radialize,
    reduction_percentage,
)
from .socp import SolverSettings

logger = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1000


@dataclass(frozen=True)
class Placement:
    """Greedy placement plus its radialized measurement set for one budget."""

    budget: int
    greedy: PlacementResult
    radial: RadializationResult
    wall_time: float

    def row(self, n: int) -> Dict[str, Any]:
        clusters = self.radial.assignment.clusters
        return {
            "budget": self.budget,
            "reduction_pct": round(reduction_percentage(n, self.radial.kept), 1),
            "sensors": len(self.radial.kept),
            "greedy_sensors": len(self.greedy.kept),
            "radializing_sensors": len(self.radial.added),
            "largest_cluster": max(len(c) for c in clusters.values()),
            "placement_score": self.greedy.final_score,
        }

    def to_dict(self, n: int) -> Dict[str, Any]:
        out = self.row(n)
        out.update(
            kept_greedy=list(self.greedy.kept),
            kept_radial=list(self.radial.added),
            kept=list(self.radial.kept),
            assignment=[list(t) for t in self.radial.assignment.to_triples()],
            score_trace=[
                {"merged": s.merged, "into": s.into, "score": s.score} for s in self.greedy.trace
            ],
        )
        return out


class DdpfPipeline:
    """Runs the generate / place / run stages for one configuration.

    Use with 'with' statement so the worker pool is shut down.

    Example:
        >>> with DdpfPipeline(PipelineConfig(case="synthetic:16")) as pipe:
        ...     summary = pipe.generate()
        ...     rows = pipe.evaluate()
    """

    def __init__(self, config: PipelineConfig, network: Optional[RadialNetwork] = None):
        self.config = config.validate()
        self._network = network
        self._executor: Optional[ThreadPoolExecutor] = None
        self._profiles: Optional[LoadProfileSet] = None
        self._train: Optional[TrajectoryDataset] = None
        self._test: Optional[TrajectoryDataset] = None
        self._scenarios: Optional[List[Scenario]] = None
        self._placements: Dict[int, Placement] = {}

    def close(self) -> None:
        """Shut down the worker pool."""
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "DdpfPipeline":
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.close()

    @property
    def executor(self) -> Optional[Executor]:
        if self.config.workers <= 1:
            return None
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.config.workers)
        return self._executor

    @property
    def network(self) -> RadialNetwork:
        if self._network is None:
            self._network = load_case(self.config.case)
            self.config.validate(self._network.n)
            logger.info("loaded %s with %d nodes", self.config.case, self._network.node_count)
        return self._network

    @property
    def n(self) -> int:
        return self.network.n

    @property
    def solver_settings(self) -> SolverSettings:
        c = self.config
        return SolverSettings(
            eps_abs=c.eps_abs, eps_rel=c.eps_rel, max_iter=c.solver_max_iter, backend=c.backend
        )

    @property
    def profiles(self) -> LoadProfileSet:
        if self._profiles is None:
            net = self.network
            peaks = None
            if net.p_nom is not None and np.any(net.p_nom):
                # nodes without a nominal load still need excitation
                demand = -net.p_nom
                peaks = np.where(demand > 0, demand, self.config.peak_p)
            self._profiles = synth_profiles(
                net.n,
                t_day=self.config.t_day,
                seed=self.config.seed,
                peak_p=peaks,
                base_peak=self.config.peak_p,
            )
        return self._profiles

    def _dataset_dir(self, name: str) -> str:
        return os.path.join(self.config.out_dir, name)

    def _generation_meta(self, days: int, scale: float, seed: int) -> Dict[str, Any]:
        """Everything a stored dataset must agree on to be reused."""
        c = self.config
        return {
            "case": c.case,
            "n": self.n,
            "days": days,
            "t_day": self.profiles.t_day,
            "profile_seed": self.profiles.seed,
            "peak_p": c.peak_p,
            "seed": seed,
            "scale": scale,
            "diversity": c.diversity,
            "v0": c.v0,
        }

    def _dataset(self, name: str, days: int, scale: float, seed: int) -> TrajectoryDataset:
        directory = self._dataset_dir(name)
        wanted = self._generation_meta(days, scale, seed)
        if os.path.exists(os.path.join(directory, "meta.json")):
            ds = load_dataset(directory)
            stale = sorted(k for k, v in wanted.items() if ds.meta.get(k) != v)
            if not stale:
                logger.info("reusing %s dataset from %s", name, directory)
                return ds
            logger.info("regenerating %s dataset, changed: %s", name, ", ".join(stale))
        c = self.config
        ds = generate_dataset(
            self.network,
            self.profiles,
            days=days,
            v0=c.v0,
            scale=scale,
            diversity=c.diversity,
            seed=seed,
            tol_pf=c.tol_pf,
            max_iter=c.max_iter,
            executor=self.executor,
        )
        return replace(ds, meta=dict(ds.meta, **wanted))

    @property
    def train(self) -> TrajectoryDataset:
        if self._train is None:
            self._train = self._dataset("train", self.config.days_train, 1.0, self.config.seed)
        return self._train

    @property
    def test(self) -> TrajectoryDataset:
        if self._test is None:
            self._test = self._dataset(
                "test",
                self.config.days_test,
                self.config.test_scale,
                self.config.seed + TEST_SEED_OFFSET,
            )
        return self._test

    @property
    def hankel(self) -> HankelSystem:
        return build_hankel(self.train, rank_tol=self.config.rank_tol)

    @property
    def scenarios(self) -> List[Scenario]:
        if self._scenarios is None:
            self._scenarios = build_scenarios(
                self.network, self.train, self.config.scenario_stride, self.executor
            )
        return self._scenarios

    def budgets(self, budgets: Optional[Sequence[int]] = None) -> List[int]:
        chosen = list(budgets) if budgets else list(self.config.budgets)
        if not chosen:
            chosen = [self.n + 1]
        self.config.with_overrides(budgets=chosen).validate(self.n)
        return sorted(set(chosen), reverse=True)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def generate(self) -> Dict[str, Any]:
        """Write train/test datasets and the network; return the PE summary."""
        os.makedirs(self.config.out_dir, exist_ok=True)
        save_dataset(self.train, self._dataset_dir("train"))
        save_dataset(self.test, self._dataset_dir("test"))
        with open(os.path.join(self.config.out_dir, "network.json"), "w", encoding="utf-8") as f:
            f.write(serialize_native_network(self.network))
        profile = rank_profile(self.hankel, self.config.rank_tol)
        summary = {
            "n": self.n,
            "T_train": self.train.T,
            "T_test": self.test.T,
            "rank": profile["rank"],
            "required_rank": profile["required"],
            "pe_satisfied": profile["pe_satisfied"],
            "max_certificate_residual": float(
                max(self.train.certificates.max(), self.test.certificates.max())
            ),
        }
        _write_json(os.path.join(self.config.out_dir, "generate.json"), summary)
        if summary["pe_satisfied"]:
            logger.info("persistency of excitation satisfied (rank %d)", summary["rank"])
        else:
            logger.warning(
                "dataset is not persistently exciting: rank %d < %d",
                summary["rank"],
                summary["required_rank"],
            )
        return summary

    def placement(self, budget: int) -> Placement:
        if budget not in self._placements:
            started = time.perf_counter()
            Y = build_admittance(self.network).Y
            if budget == self.n + 1:
                greedy = PlacementResult(assignment=AssignmentMatrix.identity(budget))
            else:
                greedy = greedy_placement(
                    self.network, self.scenarios, budget, Y=Y, executor=self.executor
                )
            radial = radialize(self.network, greedy.kept, Y)
            self._placements[budget] = Placement(
                budget=budget,
                greedy=greedy,
                radial=radial,
                wall_time=time.perf_counter() - started,
            )
        return self._placements[budget]

    def place(self, budgets: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
        """Run placement for every budget and write the placement report."""
        placements = [self.placement(b) for b in self.budgets(budgets)]
        rows = sorted((p.row(self.n) for p in placements), key=lambda r: r["reduction_pct"])
        os.makedirs(self.config.out_dir, exist_ok=True)
        _write_json(
            os.path.join(self.config.out_dir, "placement.json"),
            {
                "case": self.config.case,
                "n": self.n,
                "placements": [p.to_dict(self.n) for p in placements],
            },
        )
        pd.DataFrame(rows).to_csv(os.path.join(self.config.out_dir, "placement.csv"), index=False)
        _write_json(
            os.path.join(self.config.out_dir, "placement_timings.json"),
            {str(p.budget): p.wall_time for p in placements},
        )
        return rows

    def _evaluate_budget(self, budget: int) -> Dict[str, Any]:
        place = self.placement(budget)
        radial = place.radial
        hs = build_hankel(self.train, radial.kept, self.config.rank_tol)
        adjacent = radial.reduced.slack_adjacent()
        settings = self.solver_settings
        c = self.config
        test = self.test
        n = self.n

        def _step(t: int) -> Dict[str, Any]:
            u, y = test.column(t)
            oracle = np.sqrt(np.concatenate([[y[-1]], y[3 * n : 4 * n]]))
            inj = InjectionVector.from_u(u)
            record: Dict[str, Any] = {"t": t}
            started = time.perf_counter()
            try:
                sol = solve_ddpf_reduced(
                    hs, inj.p, inj.q, adjacent, c.lambda_g, c.lambda_l, settings
                )
                rec = reconstruct_full_voltages(sol, radial.assignment, oracle)
                record.update(status="ok", ddpf_error=rec.max_error, signed=rec.vm - oracle)
            except (SolverError, ConvergenceError) as e:
                logger.warning("budget %d step %d: %s", budget, t, e)
                record.update(status="failed", ddpf_error=float("nan"), signed=None)
            record["wall_time"] = time.perf_counter() - started
            try:
                model_vm = model_based_reduced_voltages(
                    radial.reduced, radial.assignment, inj, c.v0
                )
                record["model_error"] = float(np.max(np.abs(model_vm - oracle)))
            except ConvergenceError as e:
                logger.warning("budget %d step %d model baseline: %s", budget, t, e)
                record["model_error"] = float("nan")
            return record

        steps = range(test.T)
        pool = self.executor
        records = list(pool.map(_step, steps)) if pool is not None else [_step(t) for t in steps]

        series = pd.DataFrame(
            {
                "t": [r["t"] for r in records],
                "ddpf_error": [r["ddpf_error"] for r in records],
                "model_error": [r["model_error"] for r in records],
                "status": [r["status"] for r in records],
            }
        )
        signed = [r["signed"] for r in records if r["signed"] is not None]
        stats = (
            signed_error_statistics(np.vstack(signed), nodes=range(n + 1)) if signed else None
        )
        times = np.array([r["wall_time"] for r in records])
        row = place.row(n)
        row.update(
            max_error_ddpf=float(series["ddpf_error"].max()),
            max_error_model=float(series["model_error"].max()),
            failures=int((series["status"] != "ok").sum()),
        )
        return {
            "row": row,
            "series": series,
            "stats": stats,
            "timing": {
                "solve_max": float(times.max()),
                "solve_mean": float(times.mean()),
                "placement": place.wall_time,
            },
        }

    def evaluate(self, budgets: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
        """Solve the reduced DDPF over the test horizon for every budget.

        Writes ``evaluation.json``/``evaluation.csv`` (rows sorted by
        reduction), per-budget error series and signed-error quantiles, and
        ``timings.json`` with the wall times.
        """
        out = self.config.out_dir
        os.makedirs(out, exist_ok=True)
        rows, timings = [], {}
        for budget in self.budgets(budgets):
            result = self._evaluate_budget(budget)
            rows.append(result["row"])
            timings[str(budget)] = result["timing"]
            result["series"].to_csv(os.path.join(out, f"errors_b{budget}.csv"), index=False)
            if result["stats"] is not None:
                result["stats"].to_csv(os.path.join(out, f"node_errors_b{budget}.csv"))
            logger.info(
                "budget %d: %.1f%% reduction, max error %.3e (model %.3e)",
                budget,
                result["row"]["reduction_pct"],
                result["row"]["max_error_ddpf"],
                result["row"]["max_error_model"],
            )
        rows.sort(key=lambda r: r["reduction_pct"])
        _write_json(os.path.join(out, "evaluation.json"), {"case": self.config.case, "rows": rows})
        pd.DataFrame(rows).to_csv(os.path.join(out, "evaluation.csv"), index=False)
        _write_json(os.path.join(out, "timings.json"), timings)
        return rows


def _write_json(path: str, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")
