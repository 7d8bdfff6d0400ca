"""
Experiment orchestration: build the instance once, run every
(algorithm, seed) pair, write per-run trace CSVs, a summary CSV and a run
manifest.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from mgskip import __version__
from mgskip.algorithms import (
    PUDA_PRESETS,
    ABCConfig,
    PUDAConfig,
    TRACE_COLUMNS,
    CoinStream,
    MGSkipState,
    RunConfig,
    RunResult,
    abc_preset,
    abc_run,
    mg_skip_run,
    mg_skip_step,
    puda_preset,
    puda_run,
    rate_factor,
)
from mgskip.config import settings
from mgskip.diagnostics import check_contraction, fixed_point_residual, kkt_point, psi_tracker
from mgskip.errors import ConfigError, MGSkipError, RunError
from mgskip.experiment import ENGINE_KINDS, AlgorithmSpec, ExperimentSpec, GraphSpec
from mgskip.gossip import MultiGossipOperator, default_K, verify_gossip_bounds
from mgskip.problems import (
    ProblemInstance,
    ReferenceSolution,
    centralized_solve,
    gen_least_squares,
    gen_logistic,
    load_libsvm,
    logistic_problem,
)
from mgskip.topology import Graph, MixingMatrix, build_random_connectivity, build_ring, metropolis_weights

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "algorithm",
    "seed",
    "p",
    "K",
    "reached_tol",
    "iterations_to_tol",
    "comm_to_tol",
    "grad_evals_to_tol",
    "vector_transmissions",
    "final_rel_err",
    "iteration_speedup",
    "comm_speedup",
)


@dataclass
class Instance:
    """Everything shared read-only by the runs of one spec."""

    graph: Graph
    mixing: MixingMatrix
    problem: ProblemInstance
    reference: ReferenceSolution
    operators: dict[int | str | None, MultiGossipOperator] = field(default_factory=dict)
    engines: dict[tuple, PUDAConfig | ABCConfig] = field(default_factory=dict)

    def gossip(self, rounds: int | None) -> MultiGossipOperator:
        if rounds not in self.operators:
            self.operators[rounds] = MultiGossipOperator.build(self.mixing, rounds=rounds)
        return self.operators[rounds]

    def gossip_for(self, algo: AlgorithmSpec) -> MultiGossipOperator:
        """Operator of one algorithm entry; ``skip1`` gossips once with plain W."""
        if algo.kind != "skip1":
            return self.gossip(algo.rounds())
        if "single" not in self.operators:
            self.operators["single"] = MultiGossipOperator.single_round(self.mixing)
        return self.operators["single"]

    def engine_config(self, algo: AlgorithmSpec) -> PUDAConfig | ABCConfig:
        if algo.preset not in PUDA_PRESETS:
            raise ConfigError(f"unknown {algo.kind} preset {algo.preset!r}")
        key = (algo.kind, algo.preset, algo.rounds())
        if key not in self.engines:
            build = abc_preset if algo.kind == "abc" else puda_preset
            self.engines[key] = build(algo.preset, self.mixing, self.gossip(algo.rounds()))
        return self.engines[key]


def build_graph(spec: ExperimentSpec | GraphSpec) -> Graph:
    g = spec.graph if isinstance(spec, ExperimentSpec) else spec
    if g.kind == "ring":
        return build_ring(g.n)
    return build_random_connectivity(g.n, g.iota, g.seed)


def build_problem(spec: ExperimentSpec, mixing: MixingMatrix) -> ProblemInstance:
    ps = spec.problem
    n = mixing.n
    if ps.kind == "least_squares":
        if ps.kappa == "half_over_gap":
            if mixing.rho < 0.5:
                raise ConfigError(f"half_over_gap needs rho in (0.5, 1) for kappa >= 1, got {mixing.rho:.4f}")
            kappa = 0.5 / (1.0 - mixing.rho)
        else:
            try:
                kappa = float(ps.kappa)
            except ValueError:
                raise ConfigError(f"problem.kappa: cannot read {ps.kappa!r}") from None
        return gen_least_squares(n, ps.d, ps.mu, ps.mu * kappa, ps.seed, l1=ps.l1)
    if ps.kind == "logistic":
        return gen_logistic(n, ps.d, ps.samples_per_node, ps.gamma1, ps.gamma2, ps.seed)
    data = load_libsvm(ps.path, n, ps.seed)
    return logistic_problem(data, ps.gamma1, ps.gamma2)


def build_instance(spec: ExperimentSpec) -> Instance:
    graph = build_graph(spec)
    mixing = metropolis_weights(graph)
    problem = build_problem(spec, mixing)
    reference = centralized_solve(problem)
    logger.info(
        f"🧮 instance ready: n={graph.n}, rho={mixing.rho:.4f}, kappa={problem.kappa:.3f}, "
        f"reference residual={reference.residual:.2e} after {reference.iterations} iterations"
    )
    return Instance(graph=graph, mixing=mixing, problem=problem, reference=reference)


def run_single(instance: Instance, algo: AlgorithmSpec, seed: int, spec: ExperimentSpec) -> RunResult:
    """One (algorithm, seed) run; errors are re-raised as :class:`RunError`."""
    problem = instance.problem
    alpha = algo.alpha_value(problem.L)
    try:
        if algo.kind in ENGINE_KINDS:
            cfg = instance.engine_config(algo)
            engine = abc_run if algo.kind == "abc" else puda_run
            result = engine(problem, cfg, alpha, spec.T, instance.reference, tol=spec.tol, seed=seed)
            result.algorithm = algo.label
            result.records = [replace(r, algorithm=algo.label) for r in result.records]
            return result
        gossip = instance.gossip_for(algo)
        cfg = RunConfig(alpha=alpha, p=algo.p, max_iter=spec.T, tol=spec.tol, seed=seed)
        psi_fn = None
        if spec.diagnostics:
            xs, ys = kkt_point(problem, instance.reference.xstar)
            psi_fn = psi_tracker(xs, ys, gossip, cfg)
        return mg_skip_run(problem, gossip, cfg, instance.reference, name=algo.label, psi_fn=psi_fn)
    except MGSkipError as exc:
        raise RunError(algo.label, seed, exc) from exc


def trace_frame(result: RunResult) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in result.records], columns=list(TRACE_COLUMNS))
    return frame.astype({"t": int, "theta": int, "comm_rounds": int, "grad_evals": int})


def write_trace(result: RunResult, out_dir: Path) -> Path:
    path = out_dir / "traces" / f"{result.algorithm}__seed{result.seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(result).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def _algorithm_rounds(instance: Instance, algo: AlgorithmSpec) -> int:
    if algo.kind in ENGINE_KINDS:
        return instance.engine_config(algo).rounds_per_step
    return instance.gossip_for(algo).rounds


def summarize(
    results: list[RunResult],
    spec: ExperimentSpec,
    instance: Instance,
) -> pd.DataFrame:
    """Iterations and communication to tolerance, with speedups against ``spec.baseline``."""
    by_label = {a.label: a for a in spec.algorithms}
    rows = []
    for res in results:
        algo = by_label[res.algorithm]
        payload = 1
        if algo.kind in ENGINE_KINDS:
            payload = instance.engine_config(algo).payload_multiplier
        last = res.records[-1] if res.records else None
        rows.append(
            {
                "algorithm": res.algorithm,
                "seed": res.seed,
                "p": 1.0 if algo.kind in ENGINE_KINDS else algo.p,
                "K": _algorithm_rounds(instance, algo),
                "reached_tol": bool(res.reached_tol),
                "iterations_to_tol": last.t if last else 0,
                "comm_to_tol": last.comm_rounds if last else 0,
                "grad_evals_to_tol": last.grad_evals if last else 0,
                "vector_transmissions": (last.comm_rounds if last else 0) * payload,
                "final_rel_err": last.rel_err if last else math.nan,
            }
        )
    frame = pd.DataFrame(rows)
    frame["iteration_speedup"] = math.nan
    frame["comm_speedup"] = math.nan
    if spec.baseline is not None and not frame.empty:
        base = frame[frame["algorithm"] == spec.baseline].set_index("seed")
        for idx, row in frame.iterrows():
            if row["seed"] in base.index:
                ref = base.loc[row["seed"]]
                if row["iterations_to_tol"]:
                    frame.at[idx, "iteration_speedup"] = ref["iterations_to_tol"] / row["iterations_to_tol"]
                if row["comm_to_tol"]:
                    frame.at[idx, "comm_speedup"] = ref["comm_to_tol"] / row["comm_to_tol"]
    return frame.reindex(columns=list(SUMMARY_COLUMNS))


@dataclass
class ExperimentOutcome:
    out_dir: Path
    summary: pd.DataFrame
    results: list[RunResult]
    trace_paths: list[Path]
    failures: list[RunError]


def _package_versions() -> dict[str, str]:
    versions = {"mgskip": __version__}
    for pkg in ("numpy", "scipy", "networkx", "pandas", "python-dotenv"):
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = "unknown"
    return versions


def run_experiment(spec: ExperimentSpec, out_dir: str | Path, workers: int | None = None) -> ExperimentOutcome:
    """
    Run every (algorithm, seed) pair of ``spec`` and write
    ``traces/<algorithm>__seed<seed>.csv``, ``summary.csv`` and ``manifest.json``.

    Runs may execute on a thread pool; outputs are ordered by (algorithm, seed)
    so the CSV bytes do not depend on scheduling. The first run failure is
    re-raised after every successful run has been written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    instance = build_instance(spec)
    jobs = [(algo, seed) for algo in spec.algorithms for seed in spec.seeds]
    # lazy operator state is built here, once, before workers share the instance
    for algo in spec.algorithms:
        op = instance.gossip_for(algo)
        if algo.kind in ENGINE_KINDS:
            try:
                instance.engine_config(algo)
            except MGSkipError:
                pass  # reported by the run itself
        elif spec.diagnostics:
            op.dual_factor

    workers = workers or settings.WORKERS

    def _job(job):
        algo, seed = job
        t0 = time.perf_counter()
        try:
            outcome = run_single(instance, algo, seed, spec)
        except RunError as exc:
            outcome = exc
        return outcome, time.perf_counter() - t0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            timed = list(pool.map(_job, jobs))
    else:
        timed = [_job(job) for job in jobs]
    outcomes = [outcome for outcome, _ in timed]
    timings = {f"{algo.label}__seed{seed}": seconds for (algo, seed), (_, seconds) in zip(jobs, timed)}

    results, failures, paths = [], [], []
    for outcome in outcomes:
        if isinstance(outcome, RunError):
            logger.error(f"❌ {outcome}", exc_info=outcome.cause)
            failures.append(outcome)
            continue
        results.append(outcome)
        paths.append(write_trace(outcome, out_dir))

    summary = summarize(results, spec, instance)
    summary.to_csv(out_dir / "summary.csv", index=False, float_format="%.17g", lineterminator="\n")

    manifest = {
        "spec_hash": spec.source_hash,
        "versions": _package_versions(),
        "runs": len(results),
        "failures": [str(f) for f in failures],
        "reference_iterations": instance.reference.iterations,
        "reference_residual": instance.reference.residual,
        "wall_clock_seconds": time.perf_counter() - started,
        "run_seconds": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"✅ wrote {len(paths)} traces and summary to {out_dir}")

    if failures:
        raise failures[0]
    return ExperimentOutcome(out_dir, summary, results, paths, failures)


def sweep(
    spec: ExperimentSpec,
    p_values: list[float],
    out_dir: str | Path,
    workers: int | None = None,
    k_values: list[int] | None = None,
) -> ExperimentOutcome:
    """
    Expand every MG-Skip entry over ``p_values`` and, optionally, round counts.

    Labels get a ``_p<value>`` suffix, plus ``_k<K>`` when ``k_values`` is
    given. ``skip1`` entries keep their single round and engine presets run
    unchanged. A baseline that no longer exists moves to its largest p (and
    its default K when that is on the grid, else the largest K).
    """
    if k_values is not None and (not k_values or any(k < 1 for k in k_values)):
        raise ConfigError("round counts must be at least 1")
    expanded = []
    for algo in spec.algorithms:
        if algo.kind in ENGINE_KINDS:
            expanded.append(algo)
            continue
        for p in p_values:
            if k_values is None or algo.kind == "skip1":
                expanded.append(replace(algo, label=f"{algo.label}_p{p:g}", p=p))
                continue
            for k in k_values:
                expanded.append(replace(algo, label=f"{algo.label}_p{p:g}_k{k}", p=p, k=str(k)))

    baseline = spec.baseline
    if baseline is not None and not any(a.label == baseline for a in expanded):
        base = next(a for a in spec.algorithms if a.label == baseline)
        baseline = f"{baseline}_p{max(p_values):g}"
        if k_values is not None and base.kind != "skip1":
            k_default = default_K(metropolis_weights(build_graph(spec)).rho)
            baseline += f"_k{k_default if k_default in k_values else max(k_values)}"
    return run_experiment(replace(spec, algorithms=tuple(expanded), baseline=baseline), out_dir, workers)


# ─── Seed aggregation ────────────────────────────────────────────────────────


@dataclass
class SeedAggregate:
    frame: pd.DataFrame
    ragged: bool
    seeds: int


def aggregate_seeds(traces: Mapping[int, pd.DataFrame] | list[pd.DataFrame]) -> SeedAggregate:
    """Per-iteration mean and 95% normal CI half-width of ``rel_err`` and ``psi``.

    Traces are aligned by iteration index; ragged traces are cut to the
    shortest and flagged.
    """
    frames = list(traces.values()) if isinstance(traces, Mapping) else list(traces)
    if not frames:
        raise ConfigError("aggregate_seeds needs at least one trace")
    length = min(len(f) for f in frames)
    ragged = any(len(f) != length for f in frames)
    if ragged:
        logger.warning(f"⚠️  ragged traces; aligning on the shortest ({length} rows)")
    k = len(frames)
    out = {"t": frames[0]["t"].to_numpy()[:length]}
    for column in ("rel_err", "psi"):
        values = np.array(
            [pd.to_numeric(f[column], errors="coerce").to_numpy(dtype=float)[:length] for f in frames]
        )
        out[f"{column}_mean"] = values.mean(axis=0)
        if k > 1:
            out[f"{column}_ci"] = 1.96 * values.std(axis=0, ddof=1) / math.sqrt(k)
        else:
            out[f"{column}_ci"] = np.zeros(length)
    return SeedAggregate(frame=pd.DataFrame(out), ragged=ragged, seeds=k)


def envelope_ok(aggregate: SeedAggregate, zeta: float, psi0: float, slack: float = 1.10) -> bool:
    """``mean Ψ^t ≤ slack · ζ^t · Ψ⁰`` for every aligned iteration."""
    frame = aggregate.frame
    bound = slack * psi0 * np.power(zeta, frame["t"].to_numpy(dtype=float))
    return bool(np.all(frame["psi_mean"].to_numpy() <= bound))


# ─── Diagnostic suite ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def verify(spec: ExperimentSpec, contraction_steps: int = 200) -> list[CheckResult]:
    """Mixing invariants, gossip bounds, optimality at x* and pathwise contraction."""
    checks: list[CheckResult] = []
    instance = build_instance(spec)
    mixing, problem = instance.mixing, instance.problem
    w = mixing.w

    stochastic = float(np.max(np.abs(w.sum(axis=1) - 1.0)))
    checks.append(
        CheckResult(
            "mixing",
            bool(np.array_equal(w, w.T) and stochastic <= 1e-12 and (mixing.n == 1 or mixing.rho < 1.0)),
            f"rho={mixing.rho:.6f} row-sum error={stochastic:.1e}",
        )
    )

    mg_algos = [a for a in spec.algorithms if a.kind not in ENGINE_KINDS]
    operators = {id(op): op for op in (instance.gossip_for(a) for a in spec.algorithms)}
    for op in sorted(operators.values(), key=lambda o: (o.rounds, o.eta)):
        name = f"gossip K={op.rounds}" + (" plain" if op.eta == 0.0 and op.rounds == 1 else "")
        report = verify_gossip_bounds(op)
        sigma = "n/a" if report.sigma_min is None else f"{report.sigma_min:.4f}"
        checks.append(
            CheckResult(
                name,
                report.passed,
                f"radius={report.radius:.4f} envelope={report.envelope:.4f} "
                f"nominal={report.nominal_bound:.4f} sigma_min={sigma}",
            )
        )

    for algo in mg_algos:
        op = instance.gossip_for(algo)
        alpha = algo.alpha_value(problem.L)
        residual = fixed_point_residual(instance.reference.xstar, problem, op, alpha)
        checks.append(CheckResult(f"kkt {algo.label}", residual <= 1e-8, f"residual={residual:.2e}"))

        cfg = RunConfig(alpha=alpha, p=algo.p, max_iter=min(spec.T, contraction_steps), seed=spec.seeds[0])
        xs, ys = kkt_point(problem, instance.reference.xstar)
        state = MGSkipState.initial(problem.n, problem.dim)
        moved = mg_skip_step(replace(state, x=xs, y=ys), problem, op, cfg, 1)
        drift = float(np.max(np.abs(moved.x - xs)))
        checks.append(CheckResult(f"fixed point {algo.label}", drift <= 1e-10, f"drift={drift:.2e}"))

        coins = CoinStream(cfg.seed)
        worst = -math.inf
        violations = 0
        for t in range(cfg.max_iter):
            report = check_contraction(state, problem, op, cfg, xs, ys)
            if not report.ok:
                violations += 1
            if report.psi > 0:
                worst = max(worst, report.lhs / report.psi)
            state = mg_skip_step(state, problem, op, cfg, coins.flip(t, cfg.p))
        zeta = rate_factor(alpha, problem.mu, problem.L, algo.p, op.sigma_min)
        checks.append(
            CheckResult(
                f"contraction {algo.label}",
                violations == 0,
                f"{cfg.max_iter} steps, worst ratio={worst:.4f}, zeta={zeta:.4f}",
            )
        )
    return checks
