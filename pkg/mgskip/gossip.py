"""
Chebyshev-accelerated multi-round gossip.

The operator ``M̄ = M_K`` comes from the recursion

    M_{k+1} = (1 + η) W M_k - η M_{k-1},   M_0 = M_{-1} = I,   k = 0..K-1.

``fast_goss`` runs the same recursion on node states using only neighbour
exchanges; the dense matrix exists for diagnostics and is built lazily.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

from mgskip.config import settings
from mgskip.errors import ConsistencyError, DomainError, ParameterError, ShapeError
from mgskip.topology import MixingMatrix

logger = logging.getLogger(__name__)

ETA_FORMS = ("standard", "printed")


def chebyshev_eta(rho: float, form: str | None = None) -> float:
    """Chebyshev momentum weight.

    ``standard``: (1 - √(1-ρ²)) / (1 + √(1-ρ²)).
    ``printed``:  (1 - √(1-ρ²)) / (1 + √(1+ρ²)).
    """
    form = form or settings.ETA_FORM
    if form not in ETA_FORMS:
        raise ParameterError(f"unknown eta form {form!r}; expected one of {ETA_FORMS}")
    if not 0.0 <= rho < 1.0:
        raise DomainError(f"spectral gap must lie in [0, 1), got {rho}")
    root = math.sqrt(1.0 - rho * rho)
    if form == "standard":
        return (1.0 - root) / (1.0 + root)
    return (1.0 - root) / (1.0 + math.sqrt(1.0 + rho * rho))


def default_K(rho: float) -> int:
    """``max(1, floor(1/√(1-ρ)))``."""
    if not 0.0 <= rho < 1.0:
        raise DomainError(f"spectral gap must lie in [0, 1), got {rho}")
    return max(1, math.floor(1.0 / math.sqrt(1.0 - rho)))


def chebyshev_polynomial(eta: float, rounds: int, lam: np.ndarray | float) -> np.ndarray:
    """Scalar recursion ``m_{k+1} = (1+η)λ m_k - η m_{k-1}`` with ``m_0 = m_{-1} = 1``.

    Evaluated on W's eigenvalues it gives the spectrum of M̄.
    """
    lam = np.asarray(lam, dtype=float)
    prev = np.ones_like(lam)
    cur = np.ones_like(lam)
    for _ in range(rounds):
        prev, cur = cur, (1.0 + eta) * lam * cur - eta * prev
    return cur


def chebyshev_envelope(eta: float, rounds: int) -> float:
    """Certified ``max |m_K(λ)|`` bound over ``|λ| ≤ ρ`` when η is the standard weight.

    The recursion roots have modulus ``r = √η`` on that interval, and
    ``|m_K| ≤ r^K (U_K + r U_{K-1}) ≤ r^K (1 + K(1 + r))``.
    """
    r = math.sqrt(eta)
    return r**rounds * (1.0 + rounds * (1.0 + r))


def nominal_radius_bound(rho: float, rounds: int) -> float:
    """``√2 (1 - √(1-ρ))^K``."""
    return math.sqrt(2.0) * (1.0 - math.sqrt(1.0 - rho)) ** rounds


@dataclass(frozen=True)
class DualFactor:
    """Spectral factorization of ``½(I - M̄)``."""

    sqrt: np.ndarray = field(repr=False)
    pinv: np.ndarray = field(repr=False)
    projector: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class MultiGossipOperator:
    """K Chebyshev-weighted gossip rounds over a fixed mixing matrix."""

    mixing: MixingMatrix
    rounds: int
    eta: float

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ParameterError(f"gossip needs at least one round, got K={self.rounds}")
        if not 0.0 <= self.eta < 1.0:
            raise DomainError(f"Chebyshev weight must lie in [0, 1), got {self.eta}")

    @classmethod
    def build(
        cls,
        mixing: MixingMatrix,
        rounds: int | None = None,
        eta_form: str | None = None,
    ) -> MultiGossipOperator:
        """Operator with ``K = default_K(ρ)`` unless ``rounds`` is given."""
        k = default_K(mixing.rho) if rounds is None else max(1, int(rounds))
        eta = chebyshev_eta(mixing.rho, eta_form)
        logger.debug(f"gossip operator rho={mixing.rho:.6f} K={k} eta={eta:.6f}")
        return cls(mixing=mixing, rounds=k, eta=eta)

    @classmethod
    def single_round(cls, mixing: MixingMatrix) -> MultiGossipOperator:
        """One plain round with ``M̄ = W`` (no Chebyshev weight)."""
        return cls(mixing=mixing, rounds=1, eta=0.0)

    @property
    def n(self) -> int:
        return self.mixing.n

    @cached_property
    def _exchange(self) -> sparse.csr_matrix:
        # row i touches only node i and its neighbours
        return sparse.csr_matrix(self.mixing.w)

    def fast_goss(self, states: np.ndarray) -> np.ndarray:
        """
        Return ``(I - M̄) states`` computed with K neighbour-exchange rounds.

        Args:
            states: One row per node.

        Returns:
            ``states - M_K states``; consensual inputs map to zero.

        Raises:
            ShapeError: ``states`` is not an ``n``-row matrix.
        """
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[0] != self.n:
            raise ShapeError(f"expected {self.n} stacked rows, got shape {states.shape}")
        prev = states
        cur = states
        for _ in range(self.rounds):
            prev, cur = cur, (1.0 + self.eta) * (self._exchange @ cur) - self.eta * prev
        return states - cur

    @cached_property
    def mbar(self) -> np.ndarray:
        """Dense ``M_K`` from the matrix recursion."""
        w = self.mixing.w
        prev = np.eye(self.n)
        cur = np.eye(self.n)
        for _ in range(self.rounds):
            prev, cur = cur, (1.0 + self.eta) * (w @ cur) - self.eta * prev
        # symmetric in exact arithmetic; remove rounding asymmetry
        return 0.5 * (cur + cur.T)

    @cached_property
    def dual_factor(self) -> DualFactor:
        """``S = √(½(I - M̄))`` with its pseudo-inverse and range projector."""
        half = 0.5 * (np.eye(self.n) - self.mbar)
        vals, vecs = linalg.eigh(half)
        if vals.min() < -1e-10:
            raise ConsistencyError(
                f"½(I - M̄) has eigenvalue {vals.min():.3e} < 0; M̄ has an eigenvalue above 1"
            )
        vals = np.clip(vals, 0.0, None)
        keep = vals > 1e-10
        roots = np.where(keep, np.sqrt(vals), 0.0)
        inv_roots = np.zeros_like(roots)
        inv_roots[keep] = 1.0 / roots[keep]
        return DualFactor(
            sqrt=(vecs * roots) @ vecs.T,
            pinv=(vecs * inv_roots) @ vecs.T,
            projector=vecs[:, keep] @ vecs[:, keep].T,
            eigenvalues=vals,
        )

    @property
    def sigma_min(self) -> float:
        """Smallest nonzero eigenvalue of ``I - M̄``; 1 for a single node."""
        vals = self.dual_factor.eigenvalues
        nonzero = vals[vals > 1e-10]
        return float(2.0 * nonzero.min()) if nonzero.size else 1.0


def fast_goss(op: MultiGossipOperator, states: np.ndarray) -> np.ndarray:
    return op.fast_goss(states)


@dataclass(frozen=True)
class GossipReport:
    rho: float
    rounds: int
    eta: float
    radius: float
    nominal_bound: float
    radius_bound_ok: bool
    envelope: float
    envelope_ok: bool
    sigma_min: float | None
    sigma_min_ok: bool | None
    symmetric: bool
    doubly_stochastic: bool

    @property
    def passed(self) -> bool:
        return (
            self.symmetric
            and self.doubly_stochastic
            and self.envelope_ok
            and self.sigma_min_ok is not False
        )


def verify_gossip_bounds(op: MultiGossipOperator) -> GossipReport:
    """Spectral checks on ``M̄``; failures are reported, never raised.

    ``sigma_min_ok`` is only judged (``≥ 2/5``) for the Chebyshev operator with
    K equal to ``default_K(ρ)``.
    """
    n = op.n
    mbar = op.mbar
    centered = mbar - np.full((n, n), 1.0 / n)
    radius = float(np.max(np.abs(linalg.eigh(centered, eigvals_only=True))))

    lap_vals = linalg.eigh(np.eye(n) - mbar, eigvals_only=True)
    nonzero = lap_vals[np.abs(lap_vals) > 1e-10]
    sigma_min = float(nonzero.min()) if nonzero.size else None
    sigma_ok = None
    chebyshev = any(math.isclose(op.eta, chebyshev_eta(op.mixing.rho, form), abs_tol=1e-15) for form in ETA_FORMS)
    if chebyshev and op.rounds == default_K(op.mixing.rho) and sigma_min is not None:
        sigma_ok = sigma_min >= 0.4

    nominal = nominal_radius_bound(op.mixing.rho, op.rounds)
    if n == 1:
        envelope = 0.0
    elif op.eta == 0.0:
        # plain powers of W
        envelope = op.mixing.rho**op.rounds
    else:
        envelope = chebyshev_envelope(op.eta, op.rounds)
    report = GossipReport(
        rho=op.mixing.rho,
        rounds=op.rounds,
        eta=op.eta,
        radius=radius,
        nominal_bound=nominal,
        radius_bound_ok=radius <= nominal + 1e-9,
        envelope=envelope,
        envelope_ok=radius <= envelope + 1e-9,
        sigma_min=sigma_min,
        sigma_min_ok=sigma_ok,
        symmetric=bool(np.allclose(mbar, mbar.T, atol=1e-12)),
        doubly_stochastic=bool(np.max(np.abs(mbar.sum(axis=1) - 1.0)) <= 1e-10),
    )
    if not report.radius_bound_ok:
        logger.info(
            f"radius {radius:.4f} exceeds nominal bound {nominal:.4f} at K={op.rounds}"
        )
    return report
