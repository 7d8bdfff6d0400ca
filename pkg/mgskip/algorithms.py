"""
MG-Skip and the PUDA baseline engine.

MG-Skip, one iteration (shared coin θ_t ~ Bernoulli(p)):

    z   = x - α ∇F(x) - α y
    θ=1:  z̄ = ½ (I - M̄) z;   y ← y + (p/α) z̄;   x ← prox_{αR}(z - z̄)
    θ=0:  x ← prox_{αR}(z)

PUDA, eliminated-dual form:

    z^t     = B z^{t-1} + C (x^t - x^{t-1}) + α (∇F(x^{t-1}) - ∇F(x^t))
    x^{t+1} = prox_{αR}(A z^t)

ABC form, the same iterates with ``w = A z`` and C replaced by ``A C`` when A
and B commute:

    w^t     = B w^{t-1} + C (x^t - x^{t-1}) + α A (∇F(x^{t-1}) - ∇F(x^t))
    x^{t+1} = prox_{αR}(w^t)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from mgskip.errors import ConditionError, DivergenceError, ParameterError
from mgskip.gossip import MultiGossipOperator
from mgskip.problems import ProblemInstance, ReferenceSolution
from mgskip.topology import MixingMatrix

logger = logging.getLogger(__name__)

_COIN_TAG = 0x636F696E  # "coin"
_COIN_BLOCK = 4096


class CoinStream:
    """Shared uniform draws ``u_t``; the coin is ``θ_t = [u_t < p]``.

    ``u_t`` does not depend on ``p``, so sweeps over ``p`` reuse the same draws.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._blocks: dict[int, np.ndarray] = {}

    def uniform(self, t: int) -> float:
        block, offset = divmod(t, _COIN_BLOCK)
        if block not in self._blocks:
            rng = np.random.default_rng([self.seed, _COIN_TAG, block])
            self._blocks[block] = rng.random(_COIN_BLOCK)
        return float(self._blocks[block][offset])

    def flip(self, t: int, p: float) -> int:
        return int(self.uniform(t) < p)


class FixedCoins:
    """Predetermined coin sequence, repeated cyclically."""

    def __init__(self, thetas):
        self.thetas = [int(v) for v in thetas]

    def flip(self, t: int, p: float) -> int:
        return self.thetas[t % len(self.thetas)]


@dataclass(frozen=True)
class RunConfig:
    alpha: float
    p: float
    max_iter: int
    tol: float = 1e-7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ParameterError(f"stepsize must be positive, got {self.alpha}")
        if not 0.0 < self.p <= 1.0:
            raise ParameterError(f"communication probability must lie in (0, 1], got {self.p}")
        if self.max_iter < 0:
            raise ParameterError(f"iteration budget must be non-negative, got {self.max_iter}")

    def validate(self, problem: ProblemInstance) -> None:
        if self.alpha * problem.L >= 2.0:
            raise ParameterError(f"stepsize {self.alpha:g} violates alpha * L < 2 (L={problem.L:g})")


@dataclass(frozen=True, eq=False)
class MGSkipState:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    t: int = 0
    comm_rounds: int = 0
    grad_evals: int = 0

    @classmethod
    def initial(cls, n: int, d: int, x0: np.ndarray | None = None) -> MGSkipState:
        x = np.zeros((n, d)) if x0 is None else np.array(x0, dtype=float)
        return cls(x=x, y=np.zeros((n, d)))


@dataclass(frozen=True)
class TraceRecord:
    algorithm: str
    seed: int
    t: int
    theta: int
    comm_rounds: int
    grad_evals: int
    rel_err: float
    psi: float | None = None


TRACE_COLUMNS = ("algorithm", "seed", "t", "theta", "comm_rounds", "grad_evals", "rel_err", "psi")


@dataclass
class RunResult:
    algorithm: str
    seed: int
    records: list[TraceRecord]
    final_x: np.ndarray = field(repr=False)
    reached_tol: bool

    @property
    def iterations(self) -> int:
        return self.records[-1].t if self.records else 0

    @property
    def comm_rounds(self) -> int:
        return self.records[-1].comm_rounds if self.records else 0


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite entries in {what}")


def mg_skip_step(
    state: MGSkipState,
    problem: ProblemInstance,
    gossip: MultiGossipOperator,
    cfg: RunConfig,
    theta: int,
) -> MGSkipState:
    """
    One MG-Skip iteration.

    Args:
        state: Stacked primal and dual iterates with their counters.
        problem: Node losses and the shared regularizer.
        gossip: Operator supplying ``(I - M̄) z`` through K neighbour rounds.
        cfg: Stepsize ``α`` and probability ``p``.
        theta: Shared coin; 1 runs FastGoss and the dual update, 0 skips both.

    Returns:
        The next state; ``comm_rounds`` grows by K only when ``theta`` is 1.

    Raises:
        DivergenceError: an iterate went non-finite.
    """
    alpha = cfg.alpha
    z = state.x - alpha * problem.gradients(state.x) - alpha * state.y
    if theta:
        zbar = 0.5 * gossip.fast_goss(z)
        y = state.y + (cfg.p / alpha) * zbar
        x = problem.prox(alpha, z - zbar)
        comm = state.comm_rounds + gossip.rounds
    else:
        y = state.y
        x = problem.prox(alpha, z)
        comm = state.comm_rounds
    _check_finite(x, "primal iterate")
    _check_finite(y, "dual iterate")
    return MGSkipState(x=x, y=y, t=state.t + 1, comm_rounds=comm, grad_evals=state.grad_evals + 1)


def relative_error(x: np.ndarray, xstar: np.ndarray) -> float:
    """``‖X - 1 x*ᵀ‖_F / ‖1 x*ᵀ‖_F`` (absolute error when ``x* = 0``)."""
    target = np.broadcast_to(xstar, x.shape)
    denom = float(np.linalg.norm(target))
    err = float(np.linalg.norm(x - target))
    return err / denom if denom > 0 else err


PsiFn = Callable[[MGSkipState], float]


def mg_skip_run(
    problem: ProblemInstance,
    gossip: MultiGossipOperator,
    cfg: RunConfig,
    reference: ReferenceSolution,
    name: str = "mgskip",
    coins: CoinStream | FixedCoins | None = None,
    psi_fn: PsiFn | None = None,
    x0: np.ndarray | None = None,
) -> RunResult:
    """
    Run MG-Skip from ``y⁰ = 0`` until the relative error reaches ``cfg.tol``
    or ``cfg.max_iter`` iterations pass. One trace row per iteration.

    Raises:
        DivergenceError: iterates went non-finite; ``trace`` holds the rows so far.
    """
    cfg.validate(problem)
    coins = coins if coins is not None else CoinStream(cfg.seed)
    state = MGSkipState.initial(problem.n, problem.dim, x0)
    records: list[TraceRecord] = []
    reached = False
    for t in range(cfg.max_iter):
        theta = coins.flip(t, cfg.p)
        try:
            state = mg_skip_step(state, problem, gossip, cfg, theta)
        except DivergenceError as exc:
            exc.trace = records
            logger.error(f"❌ {name} seed={cfg.seed} diverged at t={t}")
            raise
        err = relative_error(state.x, reference.xstar)
        psi = psi_fn(state) if psi_fn is not None else None
        records.append(
            TraceRecord(name, cfg.seed, state.t, theta, state.comm_rounds, state.grad_evals, err, psi)
        )
        if err <= cfg.tol:
            reached = True
            break
    logger.debug(
        f"{name} seed={cfg.seed} p={cfg.p:g}: {state.t} iterations, "
        f"{state.comm_rounds} rounds, rel_err={records[-1].rel_err if records else math.nan:.3e}"
    )
    return RunResult(name, cfg.seed, records, state.x, reached)


# ─── PUDA engine ─────────────────────────────────────────────────────────────


def _psd_floor(m: np.ndarray) -> float:
    return float(linalg.eigh(0.5 * (m + m.T), eigvals_only=True).min())


@dataclass(frozen=True, eq=False)
class PUDAConfig:
    """Matrices ``A, B, C`` checked against ``A² ⪯ B ⪯ I``, ``B ≺ I`` off consensus, ``0 ⪯ C ⪯ 2I``.

    ``rounds_per_step`` is the number of W-applications one iteration costs;
    ``payload_multiplier`` is how many vectors each round ships per edge.
    """

    a_mat: np.ndarray = field(repr=False)
    b_mat: np.ndarray = field(repr=False)
    c_mat: np.ndarray = field(repr=False)
    name: str = "puda"
    rounds_per_step: int = 1
    payload_multiplier: int = 1

    def __post_init__(self) -> None:
        n = self.a_mat.shape[0]
        eye = np.eye(n)
        tol = 1e-10
        for label, m in (("A", self.a_mat), ("B", self.b_mat), ("C", self.c_mat)):
            if m.shape != (n, n) or not np.allclose(m, m.T, atol=1e-12):
                raise ConditionError(f"{self.name}: {label} must be a symmetric {n}x{n} matrix")
        if _psd_floor(self.b_mat - self.a_mat @ self.a_mat) < -tol:
            raise ConditionError(f"{self.name}: A² ⪯ B fails")
        if _psd_floor(eye - self.b_mat) < -tol:
            raise ConditionError(f"{self.name}: B ⪯ I fails")
        if n > 1:
            basis = linalg.null_space(np.ones((1, n)))
            if _psd_floor(basis.T @ (eye - self.b_mat) @ basis) <= tol:
                raise ConditionError(f"{self.name}: B ≺ I fails off the consensus direction")
        if _psd_floor(self.c_mat) < -tol or _psd_floor(2 * eye - self.c_mat) < -tol:
            raise ConditionError(f"{self.name}: 0 ⪯ C ⪯ 2I fails")


def puda_preset(name: str, mixing: MixingMatrix, gossip: MultiGossipOperator | None = None) -> PUDAConfig:
    """Shipped presets.

    ``mgskip_p1``: A = B = I - ½(I - M̄), C = I (MG-Skip with p = 1).
    ``skip1``:     the same with W in place of M̄ (single gossip round).
    ``nids_style``: A = B = C = (I + W)/2.
    """
    n = mixing.n
    eye = np.eye(n)
    if name == "mgskip_p1":
        if gossip is None:
            gossip = MultiGossipOperator.build(mixing)
        half = eye - 0.5 * (eye - gossip.mbar)
        return PUDAConfig(half, half, eye, name=name, rounds_per_step=gossip.rounds)
    if name == "skip1":
        half = eye - 0.5 * (eye - mixing.w)
        return PUDAConfig(half, half, eye, name=name, rounds_per_step=1)
    if name == "nids_style":
        avg = 0.5 * (eye + mixing.w)
        return PUDAConfig(avg, avg, avg, name=name, rounds_per_step=1)
    raise ParameterError(f"unknown PUDA preset {name!r}")


PUDA_PRESETS = ("mgskip_p1", "skip1", "nids_style")


@dataclass(frozen=True, eq=False)
class PUDAState:
    x: np.ndarray = field(repr=False)
    x_prev: np.ndarray = field(repr=False)
    z_prev: np.ndarray = field(repr=False)
    grad_prev: np.ndarray = field(repr=False)
    t: int = 0
    comm_rounds: int = 0
    grad_evals: int = 0

    @classmethod
    def initial(cls, n: int, d: int, x0: np.ndarray | None = None) -> PUDAState:
        # zero history makes the first z equal C x⁰ - α∇F(x⁰)
        zeros = np.zeros((n, d))
        x = zeros.copy() if x0 is None else np.array(x0, dtype=float)
        return cls(x=x, x_prev=zeros, z_prev=zeros, grad_prev=zeros)


def puda_step(state: PUDAState, problem: ProblemInstance, cfg: PUDAConfig, alpha: float) -> PUDAState:
    grad = problem.gradients(state.x)
    z = cfg.b_mat @ state.z_prev + cfg.c_mat @ (state.x - state.x_prev) + alpha * (state.grad_prev - grad)
    x = problem.prox(alpha, cfg.a_mat @ z)
    _check_finite(x, "primal iterate")
    return PUDAState(
        x=x,
        x_prev=state.x,
        z_prev=z,
        grad_prev=grad,
        t=state.t + 1,
        comm_rounds=state.comm_rounds + cfg.rounds_per_step,
        grad_evals=state.grad_evals + 1,
    )


def _run_engine(
    step: Callable,
    state,
    name: str,
    max_iter: int,
    reference: ReferenceSolution,
    tol: float,
    seed: int,
) -> RunResult:
    records: list[TraceRecord] = []
    reached = False
    for _ in range(max_iter):
        try:
            state = step(state)
        except DivergenceError as exc:
            exc.trace = records
            raise
        err = relative_error(state.x, reference.xstar)
        records.append(TraceRecord(name, seed, state.t, 1, state.comm_rounds, state.grad_evals, err))
        if err <= tol:
            reached = True
            break
    return RunResult(name, seed, records, state.x, reached)


def _check_stepsize(problem: ProblemInstance, alpha: float) -> None:
    if alpha * problem.L >= 2.0:
        raise ParameterError(f"stepsize {alpha:g} violates alpha * L < 2 (L={problem.L:g})")


def puda_run(
    problem: ProblemInstance,
    cfg: PUDAConfig,
    alpha: float,
    max_iter: int,
    reference: ReferenceSolution,
    tol: float = 1e-7,
    seed: int = 0,
    x0: np.ndarray | None = None,
) -> RunResult:
    _check_stepsize(problem, alpha)
    state = PUDAState.initial(problem.n, problem.dim, x0)
    return _run_engine(
        lambda s: puda_step(s, problem, cfg, alpha), state, cfg.name, max_iter, reference, tol, seed
    )


# ─── ABC form ────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ABCConfig:
    """Matrices of the primal recursion

        w^t     = B w^{t-1} + C (x^t - x^{t-1}) + α A (∇F(x^{t-1}) - ∇F(x^t))
        x^{t+1} = prox_{αR}(w^t)
    """

    a_mat: np.ndarray = field(repr=False)
    b_mat: np.ndarray = field(repr=False)
    c_mat: np.ndarray = field(repr=False)
    name: str = "abc"
    rounds_per_step: int = 1
    payload_multiplier: int = 1

    def __post_init__(self) -> None:
        n = self.a_mat.shape[0]
        for label, m in (("A", self.a_mat), ("B", self.b_mat), ("C", self.c_mat)):
            if m.shape != (n, n):
                raise ConditionError(f"{self.name}: {label} must be a {n}x{n} matrix")

    @classmethod
    def from_puda(cls, cfg: PUDAConfig) -> ABCConfig:
        """Rewrite a PUDA configuration with ``w = A z``.

        The substitution keeps A and B and turns C into ``A C``; it holds
        only when A and B commute.

        Raises:
            ConditionError: ``AB ≠ BA``.
        """
        if not np.allclose(cfg.a_mat @ cfg.b_mat, cfg.b_mat @ cfg.a_mat, atol=1e-10):
            raise ConditionError(f"{cfg.name}: A and B do not commute; no ABC form")
        return cls(
            a_mat=cfg.a_mat,
            b_mat=cfg.b_mat,
            c_mat=cfg.a_mat @ cfg.c_mat,
            name=cfg.name,
            rounds_per_step=cfg.rounds_per_step,
            payload_multiplier=cfg.payload_multiplier,
        )


def abc_preset(name: str, mixing: MixingMatrix, gossip: MultiGossipOperator | None = None) -> ABCConfig:
    """ABC form of a PUDA preset; ``mgskip_p1`` becomes A = B = C = I - ½(I - M̄)."""
    return ABCConfig.from_puda(puda_preset(name, mixing, gossip))


@dataclass(frozen=True, eq=False)
class ABCState:
    x: np.ndarray = field(repr=False)
    x_prev: np.ndarray = field(repr=False)
    w_prev: np.ndarray = field(repr=False)
    grad_prev: np.ndarray = field(repr=False)
    t: int = 0
    comm_rounds: int = 0
    grad_evals: int = 0

    @classmethod
    def initial(cls, n: int, d: int, x0: np.ndarray | None = None) -> ABCState:
        zeros = np.zeros((n, d))
        x = zeros.copy() if x0 is None else np.array(x0, dtype=float)
        return cls(x=x, x_prev=zeros, w_prev=zeros, grad_prev=zeros)


def abc_step(state: ABCState, problem: ProblemInstance, cfg: ABCConfig, alpha: float) -> ABCState:
    grad = problem.gradients(state.x)
    w = (
        cfg.b_mat @ state.w_prev
        + cfg.c_mat @ (state.x - state.x_prev)
        + alpha * (cfg.a_mat @ (state.grad_prev - grad))
    )
    x = problem.prox(alpha, w)
    _check_finite(x, "primal iterate")
    return ABCState(
        x=x,
        x_prev=state.x,
        w_prev=w,
        grad_prev=grad,
        t=state.t + 1,
        comm_rounds=state.comm_rounds + cfg.rounds_per_step,
        grad_evals=state.grad_evals + 1,
    )


def abc_run(
    problem: ProblemInstance,
    cfg: ABCConfig,
    alpha: float,
    max_iter: int,
    reference: ReferenceSolution,
    tol: float = 1e-7,
    seed: int = 0,
    x0: np.ndarray | None = None,
) -> RunResult:
    """Run the ABC recursion; same trace layout as :func:`puda_run`."""
    _check_stepsize(problem, alpha)
    state = ABCState.initial(problem.n, problem.dim, x0)
    return _run_engine(
        lambda s: abc_step(s, problem, cfg, alpha), state, cfg.name, max_iter, reference, tol, seed
    )


# ─── Complexity accounting ───────────────────────────────────────────────────


def rate_factor(alpha: float, mu: float, lsmooth: float, p: float, sigma_min: float = 0.4) -> float:
    """``ζ = max{(1-αμ)², (1-αL)², 1 - p² σ/2}`` with ``σ = min(σ_m(I - M̄), 2/5)``.

    At the default round count ``σ_m ≥ 2/5`` and the last term is ``1 - p²/5``.
    """
    sigma = min(sigma_min, 0.4)
    return max((1.0 - alpha * mu) ** 2, (1.0 - alpha * lsmooth) ** 2, 1.0 - p * p * sigma / 2.0)


def expected_communication(p: float, rounds: int, iterations: int) -> float:
    """Expected gossip rounds after ``iterations`` steps: ``p · K · T``."""
    return p * rounds * iterations
