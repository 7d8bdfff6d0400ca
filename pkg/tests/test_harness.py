import json
import math

import numpy as np
import pandas as pd
import pytest

from mgskip.algorithms import TRACE_COLUMNS, RunConfig, mg_skip_run, rate_factor
from mgskip.errors import ConfigError, RunError
from mgskip.experiment import load_spec, parse_spec
from mgskip.gossip import MultiGossipOperator, default_K
from mgskip.harness import (
    SUMMARY_COLUMNS,
    aggregate_seeds,
    build_instance,
    envelope_ok,
    run_experiment,
    run_single,
    sweep,
    verify,
)


def _read(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*.csv"))}


def test_run_experiment_outputs(spec_file, tmp_path):
    spec = load_spec(spec_file)
    outcome = run_experiment(spec, tmp_path / "out", workers=1)

    names = sorted(p.name for p in (tmp_path / "out" / "traces").iterdir())
    assert names == [f"{label}__seed{s}.csv" for label in ("engine", "fast", "full") for s in (0, 1)]

    trace = pd.read_csv(tmp_path / "out" / "traces" / "fast__seed0.csv")
    assert tuple(trace.columns) == TRACE_COLUMNS
    assert list(trace["t"]) == list(range(1, len(trace) + 1))

    summary = pd.read_csv(tmp_path / "out" / "summary.csv")
    assert tuple(summary.columns) == SUMMARY_COLUMNS
    assert summary["reached_tol"].all()
    full = summary[summary["algorithm"] == "full"]
    assert (full["iteration_speedup"] == 1.0).all()
    assert (full["comm_speedup"] == 1.0).all()

    fast = summary[summary["algorithm"] == "fast"].set_index("seed")
    assert (fast["comm_to_tol"] < fast["iterations_to_tol"] * fast["K"]).all()

    engine = summary[summary["algorithm"] == "engine"].set_index("seed")
    full = full.set_index("seed")
    assert (abs(engine["iterations_to_tol"] - full["iterations_to_tol"]) <= 1).all()

    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["spec_hash"] == spec.source_hash
    assert manifest["runs"] == 6
    assert manifest["failures"] == []
    assert "numpy" in manifest["versions"]
    assert len(outcome.trace_paths) == 6


def test_outputs_are_deterministic(spec_file, tmp_path):
    spec = load_spec(spec_file)
    run_experiment(spec, tmp_path / "a", workers=1)
    run_experiment(spec, tmp_path / "b", workers=1)
    run_experiment(spec, tmp_path / "c", workers=3)
    first = _read(tmp_path / "a")
    assert first == _read(tmp_path / "b")
    assert first == _read(tmp_path / "c")


def test_failed_run_keeps_partial_results(tmp_path):
    spec = parse_spec(
        {
            "problem.kind": "least_squares",
            "problem.d": "3",
            "problem.kappa": "4",
            "graph.n": "6",
            "algorithm.good.kind": "mgskip",
            "algorithm.bad.kind": "mgskip",
            "algorithm.bad.alpha": "10",
            "run.T": "50",
        }
    )
    with pytest.raises(RunError) as info:
        run_experiment(spec, tmp_path, workers=1)
    assert info.value.algorithm == "bad"
    assert (tmp_path / "traces" / "good__seed0.csv").exists()
    assert not (tmp_path / "traces" / "bad__seed0.csv").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["failures"]) == 1


def test_sweep_expands_probabilities(spec_file, tmp_path):
    spec = load_spec(spec_file)
    outcome = sweep(spec, [0.5, 1.0], tmp_path)
    labels = set(outcome.summary["algorithm"])
    assert labels == {"engine", "fast_p0.5", "fast_p1", "full_p0.5", "full_p1"}
    base = outcome.summary[outcome.summary["algorithm"] == "full_p1"]
    assert (base["iteration_speedup"] == 1.0).all()


def test_half_over_gap_kappa():
    spec = parse_spec(
        {
            "problem.kind": "least_squares",
            "graph.n": "15",
            "algorithm.a.kind": "mgskip",
        }
    )
    instance = build_instance(spec)
    assert instance.problem.kappa == pytest.approx(0.5 / (1.0 - instance.mixing.rho))
    assert instance.problem.kappa == pytest.approx(8.68, abs=0.01)


def test_aggregate_seeds():
    a = pd.DataFrame({"t": [1, 2, 3], "rel_err": [1.0, 0.5, 0.25], "psi": [4.0, 2.0, 1.0]})
    b = pd.DataFrame({"t": [1, 2, 3], "rel_err": [3.0, 1.5, 0.75], "psi": [4.0, 2.0, 1.0]})
    agg = aggregate_seeds({0: a, 1: b})
    assert not agg.ragged
    assert agg.seeds == 2
    np.testing.assert_allclose(agg.frame["rel_err_mean"], [2.0, 1.0, 0.5])
    np.testing.assert_allclose(agg.frame["rel_err_ci"], 1.96 * np.array([2.0, 1.0, 0.5]) / math.sqrt(2) / math.sqrt(2))
    np.testing.assert_allclose(agg.frame["psi_ci"], 0.0)

    single = aggregate_seeds([a])
    np.testing.assert_allclose(single.frame["rel_err_ci"], 0.0)

    ragged = aggregate_seeds([a, b.iloc[:2]])
    assert ragged.ragged
    assert len(ragged.frame) == 2


def test_envelope_ok():
    frame = pd.DataFrame({"t": [1, 2, 3], "rel_err": [1.0, 1.0, 1.0], "psi": [0.9, 0.8, 0.7]})
    agg = aggregate_seeds([frame])
    assert envelope_ok(agg, zeta=0.9, psi0=1.0)
    assert not envelope_ok(agg, zeta=0.5, psi0=1.0)


def test_verify_suite(spec_file):
    checks = {c.name: c for c in verify(load_spec(spec_file), contraction_steps=50)}
    assert checks["mixing"].passed
    assert checks["gossip K=2"].passed
    assert checks["kkt fast"].passed
    assert checks["fixed point full"].passed
    assert "zeta" in checks["contraction fast"].detail


def _small_spec(algorithms, **run):
    values = {
        "problem.kind": "least_squares",
        "problem.d": "3",
        "problem.kappa": "4",
        "graph.n": "6",
        "run.T": str(run.get("T", 100)),
        "run.tol": str(run.get("tol", 0.0)),
    }
    for label, entries in algorithms.items():
        for key, value in entries.items():
            values[f"algorithm.{label}.{key}"] = value
    return parse_spec(values)


def test_skip1_gossips_once_with_plain_mixing():
    spec = _small_spec({"single": {"kind": "skip1"}, "engine": {"kind": "puda", "preset": "skip1"}})
    instance = build_instance(spec)
    single, engine = spec.algorithms[1], spec.algorithms[0]
    op = instance.gossip_for(single)
    assert op.rounds == 1 and op.eta == 0.0
    np.testing.assert_allclose(op.mbar, instance.mixing.w, atol=1e-15)
    direct = run_single(instance, single, 0, spec)
    preset = run_single(instance, engine, 0, spec)
    np.testing.assert_allclose(direct.final_x, preset.final_x, atol=1e-10)
    np.testing.assert_allclose(
        [r.rel_err for r in direct.records], [r.rel_err for r in preset.records], atol=1e-10
    )


def test_verify_reports_plain_single_round():
    spec = _small_spec({"mg": {"kind": "mgskip", "p": "0.5"}, "single": {"kind": "skip1", "p": "0.5"}})
    checks = {c.name: c for c in verify(spec, contraction_steps=50)}
    plain = checks["gossip K=1 plain"]
    assert plain.passed
    assert checks["kkt single"].passed
    assert checks["fixed point single"].passed
    assert checks["contraction single"].passed


def test_abc_kind_matches_puda_kind(tmp_path):
    spec = _small_spec(
        {
            "abc": {"kind": "abc", "preset": "mgskip_p1"},
            "puda": {"kind": "puda", "preset": "mgskip_p1"},
            "full": {"kind": "mgskip"},
        },
        T=200,
    )
    summary = run_experiment(spec, tmp_path, workers=1).summary.set_index("algorithm")
    assert summary.loc["abc", "K"] == summary.loc["puda", "K"] == summary.loc["full", "K"]
    for label in ("abc", "puda"):
        assert summary.loc[label, "final_rel_err"] == pytest.approx(summary.loc["full", "final_rel_err"], rel=1e-6, abs=1e-14)


def test_manifest_times_every_run_on_the_pool(spec_file, tmp_path):
    run_experiment(load_spec(spec_file), tmp_path, workers=3)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert sorted(manifest["run_seconds"]) == [
        f"{label}__seed{s}" for label in ("engine", "fast", "full") for s in (0, 1)
    ]
    assert all(seconds >= 0 for seconds in manifest["run_seconds"].values())


def test_sweep_expands_round_counts(spec_file, tmp_path):
    outcome = sweep(load_spec(spec_file), [1.0], tmp_path, k_values=[1, 2])
    summary = outcome.summary
    assert set(summary["algorithm"]) == {"engine", "fast_p1_k1", "fast_p1_k2", "full_p1_k1", "full_p1_k2"}
    rounds = summary.drop_duplicates("algorithm").set_index("algorithm")["K"]
    assert rounds["fast_p1_k1"] == 1
    assert rounds["fast_p1_k2"] == 2
    base = summary[summary["algorithm"] == "full_p1_k2"]
    assert (base["iteration_speedup"] == 1.0).all()
    with pytest.raises(ConfigError):
        sweep(load_spec(spec_file), [1.0], tmp_path, k_values=[0])


# ─── Multi-seed sweeps ───────────────────────────────────────────────────────


def _ring15_spec(algorithms, seeds="0..19", T="4000", tol="1e-7", kappa="half_over_gap"):
    values = {
        "problem.kind": "least_squares",
        "problem.d": "10",
        "problem.kappa": kappa,
        "graph.kind": "ring",
        "graph.n": "15",
        "run.T": T,
        "run.tol": tol,
        "run.seeds": seeds,
    }
    for label, entries in algorithms.items():
        for key, value in entries.items():
            values[f"algorithm.{label}.{key}"] = value
    return parse_spec(values)


@pytest.mark.slow
def test_communication_scales_with_probability(tmp_path):
    problem = build_instance(_ring15_spec({"mg": {"kind": "mgskip"}}, seeds="0")).problem
    alpha = 1.0 / (5 * problem.L)
    # below sqrt(10 αμ) the 1 - p²/5 term of ζ overtakes (1 - αμ)²
    p_free = math.sqrt(10 * alpha * problem.mu)
    p_low = max(0.2, 1.0 / math.sqrt(problem.kappa))
    assert p_low < p_free < 0.5
    spec = _ring15_spec(
        {
            "p100": {"kind": "mgskip", "p": "1"},
            "p050": {"kind": "mgskip", "p": "0.5"},
            "plow": {"kind": "mgskip", "p": f"{p_low:.6f}"},
        }
    )
    summary = run_experiment(spec, tmp_path).summary
    assert summary["reached_tol"].all()
    medians = summary.groupby("algorithm")[["iterations_to_tol", "comm_to_tol"]].median()
    iters, comm = medians["iterations_to_tol"], medians["comm_to_tol"]

    assert max(iters["p050"], iters["p100"]) <= 1.05 * min(iters["p050"], iters["p100"])
    assert comm["p050"] / comm["p100"] == pytest.approx(0.5, rel=0.15)

    slowdown = math.log(rate_factor(alpha, problem.mu, problem.L, 1.0)) / math.log(
        rate_factor(alpha, problem.mu, problem.L, p_low)
    )
    assert iters["p100"] <= iters["plow"] <= slowdown * iters["p100"]
    assert comm["plow"] < comm["p050"]


def _error_at_budget(result, budget):
    err = 1.0
    for record in result.records:
        if record.comm_rounds > budget:
            break
        err = record.rel_err
    return err


@pytest.mark.slow
def test_skipping_saves_rounds_at_fixed_budget():
    instance = build_instance(_ring15_spec({"mg": {"kind": "mgskip"}}, seeds="0"))
    problem, reference = instance.problem, instance.reference
    alpha = 1.0 / (5 * problem.L)
    mg_op = instance.gossip(None)
    one_op = MultiGossipOperator.single_round(instance.mixing)
    budget = 200
    p_low = 1.0 / math.sqrt(problem.kappa)

    def run(op, p, iters, seed):
        cfg = RunConfig(alpha, p, iters, tol=0.0, seed=seed)
        return _error_at_budget(mg_skip_run(problem, op, cfg, reference), budget)

    errors = {"mg_full": [], "mg_half": [], "mg_low": [], "single_best": []}
    for seed in range(20):
        errors["mg_full"].append(run(mg_op, 1.0, 60, seed))
        errors["mg_half"].append(run(mg_op, 0.5, 200, seed))
        errors["mg_low"].append(run(mg_op, p_low, 300, seed))
        errors["single_best"].append(min(run(one_op, p, 1500, seed) for p in (0.2, 0.5, 1.0)))
    median = {key: float(np.median(values)) for key, values in errors.items()}

    assert median["mg_half"] * 10 <= median["mg_full"]
    # with α = 1/(5L) and κ = 0.5/(1-ρ) the primal term dominates even for one plain round
    assert median["single_best"] <= median["mg_low"]


@pytest.mark.slow
def test_default_round_count_is_most_communication_efficient(tmp_path):
    spec = _ring15_spec(
        {"mg": {"kind": "mgskip", "alpha": "one_over_L", "p": "0.2"}},
        seeds="0..4",
        T="60000",
        tol="1e-5",
        kappa="25",
    )
    instance = build_instance(spec)
    k_default = default_K(instance.mixing.rho)
    assert k_default == 4
    summary = sweep(spec, [0.2], tmp_path, k_values=[1, 2, 4, 8]).summary
    assert summary["reached_tol"].all()
    comm = summary.groupby("K")["comm_to_tol"].median()
    assert comm[k_default] <= 1.15 * comm.min()
    assert comm[1] > comm[k_default]
