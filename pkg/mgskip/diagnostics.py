"""
Optimality and convergence diagnostics for MG-Skip.

The scaled dual ``Y = S U`` with ``S = √(½(I - M̄))`` is what the iteration
stores; ``U`` is reconstructed here through the pseudo-inverse of ``S`` and
never touched by the algorithm itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from mgskip.algorithms import MGSkipState, RunConfig, mg_skip_step, rate_factor
from mgskip.errors import ConsistencyError
from mgskip.gossip import MultiGossipOperator
from mgskip.problems import ProblemInstance

logger = logging.getLogger(__name__)


def kkt_point(
    problem: ProblemInstance,
    xstar: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``X* = 1 x*ᵀ`` and ``Y*`` with ``y*_i = (1/n) Σ_j ∇f_j(x*) - ∇f_i(x*)``."""
    xs = np.tile(np.asarray(xstar, dtype=float), (problem.n, 1))
    grads = problem.gradients(xs)
    ys = grads.mean(axis=0, keepdims=True) - grads
    return xs, ys


def fixed_point_residual(
    x: np.ndarray,
    problem: ProblemInstance,
    gossip: MultiGossipOperator,
    alpha: float,
) -> float:
    """
    Largest violation of the optimality system at the consensual candidate ``x``:

    - ``Y* ∈ range(S)``, i.e. a multiplier ``U*`` with ``Y* = S U*`` exists;
    - ``S Z* = 0`` (``Z*`` is consensual);
    - ``X* = prox_{αR}(Z*)``.
    """
    xs, ys = kkt_point(problem, x)
    grads = problem.gradients(xs)
    zs = xs - alpha * grads - alpha * ys
    factor = gossip.dual_factor
    multiplier_gap = float(np.linalg.norm(ys - factor.projector @ ys))
    consensus_gap = float(np.linalg.norm(factor.sqrt @ zs))
    prox_gap = float(np.linalg.norm(xs - problem.prox(alpha, zs)))
    return max(multiplier_gap, consensus_gap, prox_gap)


def lyapunov(
    state: MGSkipState,
    xstar: np.ndarray,
    ystar: np.ndarray,
    gossip: MultiGossipOperator,
    cfg: RunConfig,
) -> float:
    """
    ``Ψ = ‖X - X*‖² + (α²/p²) ‖U - U*‖²`` with ``U - U* = S⁺ (Y - Y*)``.

    Raises:
        ConsistencyError: ``Y - Y*`` leaves ``range(S)``.
    """
    factor = gossip.dual_factor
    dy = state.y - ystar
    outside = float(np.linalg.norm(dy - factor.projector @ dy))
    if outside > 1e-8 * max(1.0, float(np.linalg.norm(dy))):
        raise ConsistencyError(f"dual iterate leaves range(S) by {outside:.3e}")
    du = factor.pinv @ dy
    dx = state.x - np.broadcast_to(xstar, state.x.shape)
    scale = cfg.alpha**2 / cfg.p**2
    return float(np.sum(dx * dx) + scale * np.sum(du * du))


@dataclass(frozen=True)
class ContractionReport:
    psi: float
    lhs: float
    rhs: float
    zeta: float
    ok: bool


def check_contraction(
    state: MGSkipState,
    problem: ProblemInstance,
    gossip: MultiGossipOperator,
    cfg: RunConfig,
    xstar: np.ndarray,
    ystar: np.ndarray,
) -> ContractionReport:
    """
    Exact one-step conditional expectation of Ψ from ``state``:
    ``p·Ψ(θ=1) + (1-p)·Ψ(θ=0) ≤ ζ Ψ + 1e-9·max(1, Ψ)``.
    """
    psi = lyapunov(state, xstar, ystar, gossip, cfg)
    lhs = cfg.p * lyapunov(mg_skip_step(state, problem, gossip, cfg, 1), xstar, ystar, gossip, cfg)
    if cfg.p < 1.0:
        skipped = mg_skip_step(state, problem, gossip, cfg, 0)
        lhs += (1.0 - cfg.p) * lyapunov(skipped, xstar, ystar, gossip, cfg)
    zeta = rate_factor(cfg.alpha, problem.mu, problem.L, cfg.p, gossip.sigma_min)
    rhs = zeta * psi
    ok = lhs <= rhs + 1e-9 * max(1.0, psi)
    if not ok:
        logger.warning(f"⚠️  contraction violated at t={state.t}: {lhs:.6e} > {rhs:.6e}")
    return ContractionReport(psi=psi, lhs=lhs, rhs=rhs, zeta=zeta, ok=ok)


def psi_tracker(
    xstar: np.ndarray,
    ystar: np.ndarray,
    gossip: MultiGossipOperator,
    cfg: RunConfig,
):
    """Callable for ``mg_skip_run(psi_fn=...)``."""

    def _psi(state: MGSkipState) -> float:
        return lyapunov(state, xstar, ystar, gossip, cfg)

    return _psi
