"""
Experiment specifications.

Spec files are flat ``dotted.key = value`` text read with python-dotenv:

    problem.kind = least_squares
    problem.d = 10
    problem.kappa = half_over_gap
    graph.kind = ring
    graph.n = 15
    algorithm.fast.kind = mgskip
    algorithm.fast.p = 0.5
    run.T = 2000
    run.seeds = 0..19
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from dotenv import dotenv_values

from mgskip.errors import ConfigError

logger = logging.getLogger(__name__)

PROBLEM_KINDS = ("least_squares", "logistic", "libsvm")
GRAPH_KINDS = ("ring", "random")
ALGORITHM_KINDS = ("mgskip", "skip1", "puda", "abc")
ENGINE_KINDS = ("puda", "abc")
ALPHA_RULES = ("one_over_5L", "one_over_L")

_PROBLEM_KEYS = {"kind", "seed", "d", "mu", "kappa", "l1", "samples_per_node", "gamma1", "gamma2", "path"}
_GRAPH_KEYS = {"kind", "n", "iota", "seed"}
_ALGORITHM_KEYS = {"kind", "preset", "alpha", "p", "k"}
_RUN_KEYS = {"T", "tol", "seeds", "diagnostics", "baseline"}


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "least_squares"
    seed: int = 0
    d: int = 10
    mu: float = 1.0
    kappa: str = "half_over_gap"
    l1: float = 0.0
    samples_per_node: int = 50
    gamma1: float = 0.01
    gamma2: float = 0.001
    path: str | None = None


@dataclass(frozen=True)
class GraphSpec:
    kind: str = "ring"
    n: int = 15
    iota: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class AlgorithmSpec:
    label: str
    kind: str = "mgskip"
    preset: str | None = None
    alpha: str = "one_over_5L"
    p: float = 1.0
    k: str = "default"

    def alpha_value(self, lsmooth: float) -> float:
        if self.alpha == "one_over_5L":
            return 1.0 / (5.0 * lsmooth)
        if self.alpha == "one_over_L":
            return 1.0 / lsmooth
        return float(self.alpha)

    def rounds(self) -> int | None:
        """Fixed round count, or ``None`` for ``default_K(ρ)``."""
        if self.kind == "skip1":
            return 1
        return None if self.k == "default" else int(self.k)


@dataclass(frozen=True)
class ExperimentSpec:
    problem: ProblemSpec
    graph: GraphSpec
    algorithms: tuple[AlgorithmSpec, ...]
    T: int = 1000
    tol: float = 1e-7
    seeds: tuple[int, ...] = (0,)
    diagnostics: bool = False
    baseline: str | None = None
    source_hash: str = field(default="", compare=False)


def _coerce(section: str, key: str, value: str, kind: type):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        return kind(value)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {value!r} as {kind.__name__}") from None


def _parse_seeds(value: str) -> tuple[int, ...]:
    value = value.strip()
    try:
        if ".." in value:
            lo, hi = value.split("..", 1)
            seeds = tuple(range(int(lo), int(hi) + 1))
        else:
            seeds = tuple(int(tok) for tok in value.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"run.seeds: cannot read {value!r}") from None
    if not seeds:
        raise ConfigError("run.seeds must name at least one seed")
    return seeds


def _build(cls, section: str, raw: dict[str, str], allowed: set[str], **extra):
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(sorted(unknown))}")
    kwargs = dict(extra)
    for key, value in raw.items():
        default = cls.__dataclass_fields__[key].type
        target = {"int": int, "float": float, "bool": bool}.get(str(default), str)
        kwargs[key] = _coerce(section, key, value, target)
    return cls(**kwargs)


def parse_spec(values: dict[str, str | None], base_dir: Path | None = None) -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from flat dotted keys."""
    sections: dict[str, dict[str, str]] = {"problem": {}, "graph": {}, "run": {}}
    algorithms: dict[str, dict[str, str]] = {}
    for key, value in values.items():
        if value is None:
            raise ConfigError(f"key {key!r} has no value")
        parts = key.split(".")
        if parts[0] == "algorithm" and len(parts) == 3:
            algorithms.setdefault(parts[1], {})[parts[2]] = value
        elif parts[0] in sections and len(parts) == 2:
            sections[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unrecognized key {key!r}")

    problem = _build(ProblemSpec, "problem", sections["problem"], _PROBLEM_KEYS)
    if problem.kind not in PROBLEM_KINDS:
        raise ConfigError(f"problem.kind must be one of {PROBLEM_KINDS}, got {problem.kind!r}")
    if problem.kind == "libsvm":
        if not problem.path:
            raise ConfigError("problem.path is required for libsvm problems")
        path = Path(problem.path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"problem.path {path} does not exist")
        problem = replace(problem, path=str(path))

    graph = _build(GraphSpec, "graph", sections["graph"], _GRAPH_KEYS)
    if graph.kind not in GRAPH_KINDS:
        raise ConfigError(f"graph.kind must be one of {GRAPH_KINDS}, got {graph.kind!r}")

    if not algorithms:
        raise ConfigError("at least one algorithm.<label>.kind entry is required")
    algos = []
    for label in sorted(algorithms):
        algo = _build(AlgorithmSpec, f"algorithm.{label}", algorithms[label], _ALGORITHM_KEYS, label=label)
        if algo.kind not in ALGORITHM_KINDS:
            raise ConfigError(f"algorithm.{label}.kind must be one of {ALGORITHM_KINDS}")
        if algo.kind in ENGINE_KINDS and not algo.preset:
            raise ConfigError(f"algorithm.{label}.preset is required for {algo.kind}")
        if algo.alpha not in ALPHA_RULES:
            _coerce(f"algorithm.{label}", "alpha", algo.alpha, float)
        if algo.k != "default" and _coerce(f"algorithm.{label}", "k", algo.k, int) < 1:
            raise ConfigError(f"algorithm.{label}.k must be at least 1, got {algo.k}")
        algos.append(algo)

    run_raw = dict(sections["run"])
    unknown = set(run_raw) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run keys: {', '.join(sorted(unknown))}")
    seeds = _parse_seeds(run_raw.pop("seeds")) if "seeds" in run_raw else (0,)
    baseline = run_raw.pop("baseline", None)
    if baseline is not None and baseline not in algorithms:
        raise ConfigError(f"run.baseline {baseline!r} names no algorithm")
    spec = ExperimentSpec(
        problem=problem,
        graph=graph,
        algorithms=tuple(algos),
        T=_coerce("run", "T", run_raw["T"], int) if "T" in run_raw else 1000,
        tol=_coerce("run", "tol", run_raw["tol"], float) if "tol" in run_raw else 1e-7,
        seeds=seeds,
        diagnostics=_coerce("run", "diagnostics", run_raw["diagnostics"], bool)
        if "diagnostics" in run_raw
        else False,
        baseline=baseline,
    )
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    """Read a spec file; relative ``problem.path`` entries resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_bytes()
    values = dotenv_values(path, interpolate=False)
    spec = parse_spec(dict(values), base_dir=path.parent)
    logger.debug(f"loaded spec {path} with {len(spec.algorithms)} algorithms")
    return replace(spec, source_hash=hashlib.sha256(text).hexdigest())
