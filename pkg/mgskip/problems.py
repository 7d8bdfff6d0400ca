"""
Problem instances: per-node smooth losses, a shared proximable regularizer,
synthetic generators, a LIBSVM loader, constant flooding and the centralized
reference solver.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, sparse
from scipy.special import expit

from mgskip.config import settings
from mgskip.errors import (
    ConnectivityError,
    DataParseError,
    EmptyDataError,
    NonConvergenceError,
    ParameterError,
)
from mgskip.topology import Graph

logger = logging.getLogger(__name__)


# ─── Smooth losses ───────────────────────────────────────────────────────────


class SmoothLoss(ABC):
    """A μ-strongly convex, L-smooth local loss."""

    dim: int
    mu: float
    lsmooth: float

    @abstractmethod
    def value(self, x: np.ndarray) -> float: ...

    @abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray: ...


class QuadraticLoss(SmoothLoss):
    """``½‖A x - b‖²``."""

    def __init__(self, a: np.ndarray, b: np.ndarray, mu: float | None = None, lsmooth: float | None = None):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.dim = self.a.shape[1]
        if mu is None or lsmooth is None:
            eigs = linalg.eigh(self.a.T @ self.a, eigvals_only=True)
            mu, lsmooth = float(eigs[0]), float(eigs[-1])
        self.mu = mu
        self.lsmooth = lsmooth

    def value(self, x):
        r = self.a @ x - self.b
        return 0.5 * float(r @ r)

    def gradient(self, x):
        return self.a.T @ (self.a @ x - self.b)


class LogisticLoss(SmoothLoss):
    """Mean of ``ln(1 + exp(-y_j a_jᵀx))`` over local samples, plus ``γ₁‖x‖²``.

    ``features`` may be dense or a scipy sparse matrix.
    """

    def __init__(self, features, labels: np.ndarray, gamma1: float):
        if gamma1 <= 0:
            raise ParameterError(f"gamma1 must be positive for strong convexity, got {gamma1}")
        self.features = features
        self.labels = np.asarray(labels, dtype=float)
        self.gamma1 = gamma1
        self.samples = features.shape[0]
        self.dim = features.shape[1]
        if sparse.issparse(features):
            frob = float(features.multiply(features).sum())
        else:
            frob = float(np.sum(np.square(features)))
        self.mu = 2.0 * gamma1
        self.lsmooth = 2.0 * gamma1 + (frob / (4.0 * self.samples) if self.samples else 0.0)

    def _margins(self, x):
        return self.labels * np.asarray(self.features @ x).ravel()

    def value(self, x):
        reg = self.gamma1 * float(x @ x)
        if not self.samples:
            return reg
        return float(np.mean(np.logaddexp(0.0, -self._margins(x)))) + reg

    def gradient(self, x):
        grad = 2.0 * self.gamma1 * x
        if not self.samples:
            return grad
        weights = -self.labels * expit(-self._margins(x)) / self.samples
        return grad + np.asarray(self.features.T @ weights).ravel()


# ─── Regularizers ────────────────────────────────────────────────────────────


class NonsmoothReg(ABC):
    """Convex, closed, proper ``r`` with a cheap proximal map.

    ``prox`` acts elementwise, so it applies to a single vector and to a stack
    of node vectors alike.
    """

    @abstractmethod
    def value(self, x: np.ndarray) -> float: ...

    @abstractmethod
    def prox(self, alpha: float, y: np.ndarray) -> np.ndarray: ...


class ZeroReg(NonsmoothReg):
    def value(self, x):
        return 0.0

    def prox(self, alpha, y):
        return np.array(y, dtype=float, copy=True)


def l1_prox(alpha: float, weight: float, y: np.ndarray) -> np.ndarray:
    """Soft thresholding: ``sign(y) · max(|y| - α·weight, 0)``."""
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.maximum(np.abs(y) - alpha * weight, 0.0)


class L1Reg(NonsmoothReg):
    def __init__(self, weight: float):
        if weight < 0:
            raise ParameterError(f"L1 weight must be non-negative, got {weight}")
        self.weight = weight

    def value(self, x):
        return self.weight * float(np.sum(np.abs(x)))

    def prox(self, alpha, y):
        return l1_prox(alpha, self.weight, y)


class BoxIndicator(NonsmoothReg):
    """Indicator of ``[lower, upper]^d``; the prox is clipping."""

    def __init__(self, lower: float, upper: float):
        if lower > upper:
            raise ParameterError(f"empty box [{lower}, {upper}]")
        self.lower = lower
        self.upper = upper

    def value(self, x):
        x = np.asarray(x)
        return 0.0 if np.all((x >= self.lower) & (x <= self.upper)) else math.inf

    def prox(self, alpha, y):
        return np.clip(y, self.lower, self.upper)


# ─── Problem instance ────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """``min_x (1/n) Σ f_i(x) + r(x)``."""

    losses: tuple[SmoothLoss, ...]
    reg: NonsmoothReg
    dim: int

    def __post_init__(self) -> None:
        if not self.losses:
            raise ParameterError("a problem needs at least one node loss")
        for loss in self.losses:
            if loss.dim != self.dim:
                raise ParameterError(f"loss dimension {loss.dim} differs from {self.dim}")
            if not 0 < loss.mu <= loss.lsmooth:
                raise ParameterError(f"loss moduli must satisfy 0 < mu <= L, got {loss.mu}, {loss.lsmooth}")

    @property
    def n(self) -> int:
        return len(self.losses)

    @property
    def L(self) -> float:
        return max(loss.lsmooth for loss in self.losses)

    @property
    def mu(self) -> float:
        return min(loss.mu for loss in self.losses)

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    def gradients(self, x: np.ndarray) -> np.ndarray:
        """Stack ``∇F(X)`` of per-node gradients at per-node points."""
        return np.stack([loss.gradient(row) for loss, row in zip(self.losses, x)])

    def mean_gradient(self, x: np.ndarray) -> np.ndarray:
        return np.mean([loss.gradient(x) for loss in self.losses], axis=0)

    def smooth_value(self, x: np.ndarray) -> float:
        return float(np.mean([loss.value(x) for loss in self.losses]))

    def objective(self, x: np.ndarray) -> float:
        return self.smooth_value(x) + self.reg.value(x)

    def prox(self, alpha: float, y: np.ndarray) -> np.ndarray:
        return self.reg.prox(alpha, y)


# ─── Synthetic generators ────────────────────────────────────────────────────


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_least_squares(
    n: int,
    d: int,
    mu: float,
    lsmooth: float,
    seed: int,
    l1: float = 0.0,
) -> ProblemInstance:
    """
    Least squares ``f_i(x) = ½‖A_i x - b_i‖²`` with ``spec(A_iᵀA_i) ⊂ [μ, L]``.

    Each ``A_i = diag(s) Qᵢᵀ`` with a random orthogonal ``Qᵢ`` and singular
    values whose extremes are pinned at ``√L`` and ``√μ``, so every node has
    exactly ``μ_i = μ`` and ``L_i = L``. ``b_i ~ N(0, I)``.
    """
    if mu <= 0 or mu > lsmooth:
        raise ParameterError(f"need 0 < mu <= L, got mu={mu}, L={lsmooth}")
    if d == 1 and mu != lsmooth:
        raise ParameterError("a one-dimensional node cannot pin distinct mu and L")
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(n):
        q = _random_orthogonal(rng, d)
        s = np.sqrt(rng.uniform(mu, lsmooth, size=d))
        s[0] = math.sqrt(lsmooth)
        s[-1] = math.sqrt(mu)
        a = s[:, None] * q.T
        b = rng.standard_normal(d)
        losses.append(QuadraticLoss(a, b, mu=mu, lsmooth=lsmooth))
    reg = L1Reg(l1) if l1 > 0 else ZeroReg()
    return ProblemInstance(losses=tuple(losses), reg=reg, dim=d)


@dataclass(frozen=True, eq=False)
class PartitionedDataset:
    """Per-node feature matrices and ±1 labels."""

    features: tuple = field(repr=False)
    labels: tuple = field(repr=False)
    dim: int

    @property
    def n(self) -> int:
        return len(self.features)


def logistic_problem(data: PartitionedDataset, gamma1: float, gamma2: float) -> ProblemInstance:
    """Composite logistic regression: logistic + γ₁‖x‖² smooth, γ₂‖x‖₁ prox."""
    if gamma1 <= 0:
        raise ParameterError(f"gamma1 must be positive, got {gamma1}")
    if gamma2 < 0:
        raise ParameterError(f"gamma2 must be non-negative, got {gamma2}")
    losses = tuple(LogisticLoss(a, y, gamma1) for a, y in zip(data.features, data.labels))
    reg = L1Reg(gamma2) if gamma2 > 0 else ZeroReg()
    return ProblemInstance(losses=losses, reg=reg, dim=data.dim)


def gen_logistic(
    n: int,
    d: int,
    samples_per_node: int,
    gamma1: float,
    gamma2: float,
    seed: int,
) -> ProblemInstance:
    """Synthetic logistic data: N(0, I) features, labels from a random hyperplane."""
    if gamma1 <= 0:
        raise ParameterError(f"gamma1 must be positive, got {gamma1}")
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal(d)
    features, labels = [], []
    for _ in range(n):
        a = rng.standard_normal((samples_per_node, d))
        y = np.where(a @ truth >= 0, 1.0, -1.0)
        features.append(a)
        labels.append(y)
    data = PartitionedDataset(features=tuple(features), labels=tuple(labels), dim=d)
    return logistic_problem(data, gamma1, gamma2)


# ─── LIBSVM ──────────────────────────────────────────────────────────────────


def _parse_label(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataParseError(f"bad label {token!r}", lineno) from None
    if value in (1.0, -1.0):
        return value
    if value == 0.0:
        return -1.0
    raise DataParseError(f"unsupported label {token!r}", lineno)


def load_libsvm(path: str | Path, n: int, seed: int) -> PartitionedDataset:
    """
    Read ``label idx:val idx:val ...`` lines (1-based indices) and split the
    samples over ``n`` nodes contiguously after a seeded shuffle.

    Labels in {0, 1} are mapped to {-1, +1}; ``d`` is the largest index seen.

    Args:
        path: LIBSVM text file.
        n: Number of nodes to split the samples over.
        seed: Seed of the shuffle before splitting.

    Returns:
        Per-node sparse feature blocks and label vectors.

    Raises:
        DataParseError: a malformed line, with its line number.
        EmptyDataError: the file holds no samples.
        ParameterError: fewer samples than nodes.
    """
    rows, cols, vals, labels = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            sample = len(labels)
            labels.append(_parse_label(tokens[0], lineno))
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                if not sep:
                    raise DataParseError(f"expected idx:val, got {tok!r}", lineno)
                try:
                    col = int(idx)
                    value = float(val.replace("−", "-"))
                except ValueError:
                    raise DataParseError(f"bad feature {tok!r}", lineno) from None
                if col < 1:
                    raise DataParseError(f"feature index must be >= 1, got {col}", lineno)
                rows.append(sample)
                cols.append(col - 1)
                vals.append(value)

    if not labels:
        raise EmptyDataError(f"{path} holds no samples")
    if len(labels) < n:
        raise ParameterError(f"{len(labels)} samples cannot cover {n} nodes")

    dim = max(cols) + 1 if cols else 1
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(len(labels), dim))
    y = np.asarray(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    parts = np.array_split(order, n)
    logger.info(f"📂 loaded {len(labels)} samples, d={dim} from {path}")
    return PartitionedDataset(
        features=tuple(matrix[idx] for idx in parts),
        labels=tuple(y[idx] for idx in parts),
        dim=dim,
    )


# ─── Constant flooding ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class FloodResult:
    lsmooth: float
    mu: float
    kappa: float
    rounds: int


def flood_constants(g: Graph, per_node: Sequence[tuple[float, float]]) -> FloodResult:
    """
    Max/min flooding of ``(L_i, μ_i)``: ``n - 1`` synchronous rounds in which
    every node keeps the max L and min μ among itself and its neighbours.

    Raises:
        ConnectivityError: ``g`` is disconnected, or nodes disagree after ``n - 1`` rounds.
    """
    if len(per_node) != g.n:
        raise ParameterError(f"expected {g.n} (L, mu) pairs, got {len(per_node)}")
    if not g.is_connected:
        raise ConnectivityError(f"graph with n={g.n} and {g.num_edges} edges is disconnected; flooding cannot agree")
    big = np.array([pair[0] for pair in per_node], dtype=float)
    small = np.array([pair[1] for pair in per_node], dtype=float)
    for _ in range(g.n - 1):
        new_big = big.copy()
        new_small = small.copy()
        for i in range(g.n):
            for j in g.neighbors(i):
                new_big[i] = max(new_big[i], big[j])
                new_small[i] = min(new_small[i], small[j])
        big, small = new_big, new_small
    if np.any(big != big[0]) or np.any(small != small[0]):
        raise ConnectivityError("flooding did not reach agreement; graph is disconnected")
    return FloodResult(
        lsmooth=float(big[0]),
        mu=float(small[0]),
        kappa=float(big[0] / small[0]),
        rounds=g.n - 1,
    )


# ─── Centralized reference ───────────────────────────────────────────────────


@dataclass(frozen=True)
class ReferenceSolution:
    xstar: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    objective_history: tuple[float, ...] = field(default=(), repr=False)


def gradient_mapping_residual(p: ProblemInstance, x: np.ndarray, alpha: float) -> float:
    """``‖x - prox_{αr}(x - α ∇f̄(x))‖``."""
    return float(np.linalg.norm(x - p.prox(alpha, x - alpha * p.mean_gradient(x))))


def centralized_solve(
    p: ProblemInstance,
    tol: float | None = None,
    max_iter: int | None = None,
    record_objective: bool = False,
) -> ReferenceSolution:
    """
    Proximal gradient with step ``1/L`` on ``(1/n) Σ f_i + r`` until the
    gradient-mapping residual is at most ``tol · max(1, ‖x‖)``.

    Raises:
        NonConvergenceError: ``max_iter`` reached; carries the best iterate.
    """
    tol = settings.REFERENCE_TOL if tol is None else tol
    max_iter = settings.REFERENCE_MAX_ITER if max_iter is None else max_iter
    if tol <= 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    step = 1.0 / p.L
    x = np.zeros(p.dim)
    history = [p.objective(x)] if record_objective else []
    best_x, best_res = x, math.inf

    for k in range(max_iter):
        nxt = p.prox(step, x - step * p.mean_gradient(x))
        res = float(np.linalg.norm(x - nxt))
        if res < best_res:
            best_x, best_res = x, res
        if res <= tol * max(1.0, float(np.linalg.norm(x))):
            logger.debug(f"centralized solve converged in {k} iterations (residual {res:.3e})")
            return ReferenceSolution(xstar=x, residual=res, iterations=k, objective_history=tuple(history))
        x = nxt
        if record_objective:
            history.append(p.objective(x))

    raise NonConvergenceError(
        f"proximal gradient did not reach {tol:g} in {max_iter} iterations",
        best_iterate=best_x,
        residual=best_res,
    )


def write_problem_bundle(p: ProblemInstance, directory: str | Path) -> Path:
    """CSV bundle of a least-squares instance: ``A_<i>.csv``, ``b_<i>.csv``, ``meta.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, loss in enumerate(p.losses):
        if not isinstance(loss, QuadraticLoss):
            raise ParameterError("only least-squares instances can be bundled")
        pd.DataFrame(loss.a).to_csv(directory / f"A_{i}.csv", header=False, index=False, float_format="%.17g")
        pd.DataFrame(loss.b).to_csv(directory / f"b_{i}.csv", header=False, index=False, float_format="%.17g")
    pd.DataFrame(
        [{"node": i, "mu": loss.mu, "lsmooth": loss.lsmooth} for i, loss in enumerate(p.losses)]
    ).to_csv(directory / "meta.csv", index=False, float_format="%.17g")
    return directory
