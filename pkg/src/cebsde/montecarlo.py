"""Path-ensemble backend with least-squares conditional expectations.

Conditional expectations are polynomial regressions on the information
coordinates chosen by an :class:`InfoSelector`.  Regressands are never
clipped or localized, which is a known source of variance.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, IllConditioned
from .tree import TimeGrid

_HEADER = struct.Struct("<QQQQd")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``W`` has shape ``(M, N+1, d)`` with ``W[:, 0] == 0``."""

    grid: TimeGrid
    W: np.ndarray
    seed: int

    @property
    def M(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[2]

    def __eq__(self, other):
        return (isinstance(other, PathEnsemble) and self.grid == other.grid
                and self.seed == other.seed and np.array_equal(self.W, other.W))


def sample_paths(grid: TimeGrid, d: int, M: int, seed: int) -> PathEnsemble:
    if M < 2:
        raise ValueError("need at least two paths")
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((M, grid.N, d)) * np.sqrt(grid.dt)
    W = np.zeros((M, grid.N + 1, d))
    np.cumsum(dW, axis=1, out=W[:, 1:, :])
    W.setflags(write=False)
    return PathEnsemble(grid, W, int(seed))


def save_ensemble(ens: PathEnsemble, path) -> None:
    """Header ``M, N, d, seed, T`` then little-endian float64, path-major."""
    data = _HEADER.pack(ens.M, ens.grid.N, ens.d, ens.seed, ens.grid.T)
    data += np.ascontiguousarray(ens.W, dtype="<f8").tobytes()
    Path(path).write_bytes(data)


def load_ensemble(path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    M, N, d, seed, T = _HEADER.unpack_from(raw)
    W = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(M, N + 1, d).astype(float)
    W.setflags(write=False)
    return PathEnsemble(TimeGrid(T, N), W, seed)


@dataclass(frozen=True)
class InfoSelector:
    """Which sub-information a regression may use.

    ``mode`` is one of ``full``, ``trivial``, ``coordinates`` (first ``k``
    walk components) or ``delayed`` (all components, ``delay`` steps late).
    """

    mode: str = "full"
    k: int = 0
    delay: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "trivial", "coordinates", "delayed"):
            raise ValueError(f"unknown information mode {self.mode!r}")
        if self.k < 0 or self.delay < 0:
            raise ValueError("k and delay must be non-negative")

    def validate(self, d: int, N: int) -> None:
        if self.mode == "coordinates" and self.k > d:
            raise DimensionMismatch(f"k = {self.k} exceeds Brownian dimension {d}")
        if self.mode == "delayed" and self.delay > N:
            raise DimensionMismatch(f"delay = {self.delay} exceeds N = {N}")


@dataclass(frozen=True)
class RegressionEstimator:
    degree: int = 3
    ridge: float = 1e-10
    max_condition: float = 1e12


def _monomial_exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


def design_matrix(features: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree``; the constant comes first."""
    M, dim = features.shape
    cols = []
    for e in _monomial_exponents(dim, degree):
        col = np.ones(M)
        for j, p in enumerate(e):
            if p:
                col = col * features[:, j] ** p
        cols.append(col)
    return np.stack(cols, axis=1)


def information_features(ens: PathEnsemble, selector: InfoSelector, step: int) -> np.ndarray | None:
    """Standardized regressors for G at ``step``; None means "use the mean"."""
    if step == 0 or selector.mode == "trivial":
        return None
    if selector.mode == "full":
        src, cols = step, ens.d
    elif selector.mode == "coordinates":
        src, cols = step, selector.k
    else:
        src, cols = max(step - selector.delay, 0), ens.d
    if src == 0 or cols == 0:
        return None
    return ens.W[:, src, :cols] / np.sqrt(ens.grid.t(src))


def regress(features: np.ndarray | None, X: np.ndarray, est: RegressionEstimator) -> np.ndarray:
    """Fitted values of ``X`` (rows = paths) on the polynomial basis.

    The intercept is left unpenalized so the sample mean of the fit equals the
    sample mean of ``X`` up to round-off.
    """
    X = np.asarray(X, dtype=float)
    flat = X.reshape(X.shape[0], -1)
    if features is None:
        return np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(X.shape).copy()
    A = design_matrix(features, est.degree)
    M, p = A.shape
    if M <= p:
        raise IllConditioned(f"{M} paths cannot fit {p} basis functions")
    G = A.T @ A / M
    b = A.T @ flat / M
    if est.ridge > 0 and p > 1:
        pen = est.ridge * np.trace(G) / p
        G[1:, 1:] += pen * np.eye(p - 1)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > est.max_condition:
        raise IllConditioned(f"normal equations condition estimate {cond:.3g}")
    coef = np.linalg.solve(G, b)
    return (A @ coef).reshape(X.shape)


def estimate_cond_exp(ens: PathEnsemble, selector: InfoSelector, est: RegressionEstimator,
                      X: np.ndarray, step: int) -> np.ndarray:
    """Regression estimate of E[X | G_step] for per-path values ``X``."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("regressand contains non-finite values")
    if not 0 <= step <= ens.grid.N:
        raise ValueError(f"step {step} outside 0..{ens.grid.N}")
    selector.validate(ens.d, ens.grid.N)
    return regress(information_features(ens, selector, step), X, est)


class MonteCarloBackend:
    """Solver backend over a path ensemble.

    One-step projections E[. | F_i] regress on the full walk at ``t_i``,
    which is exact in the limit only for Markovian problems.
    """

    kind = "montecarlo"

    def __init__(self, ensemble: PathEnsemble, estimator: RegressionEstimator | None = None):
        self.ensemble = ensemble
        self.estimator = estimator or RegressionEstimator()
        self.grid = ensemble.grid
        self.d = ensemble.d
        self._full = InfoSelector("full")
        self._w = np.full(ensemble.M, 1.0 / ensemble.M)

    @property
    def N(self) -> int:
        return self.grid.N

    def size(self, i: int) -> int:
        return self.ensemble.M

    def walk(self, i: int) -> np.ndarray:
        return self.ensemble.W[:, i, :]

    terminal_walk = walk

    def weights(self, i: int) -> np.ndarray:
        return self._w

    def increment(self, i: int) -> np.ndarray:
        W = self.ensemble.W
        return W[:, i + 1, :] - W[:, i, :]

    def lift(self, X: np.ndarray, i: int, j: int) -> np.ndarray:
        return np.asarray(X)

    def expect_next(self, i: int, X: np.ndarray) -> np.ndarray:
        return estimate_cond_exp(self.ensemble, self._full, self.estimator, X, i)

    def expect_g(self, info: InfoSelector, i: int, X: np.ndarray) -> np.ndarray:
        return estimate_cond_exp(self.ensemble, info, self.estimator, X, i)

    def expectation(self, X: np.ndarray, i: int) -> np.ndarray:
        return np.asarray(X, dtype=float).mean(axis=0)

    def check_info(self, info) -> None:
        if not isinstance(info, InfoSelector):
            raise TypeError(f"Monte Carlo backend needs an InfoSelector, got {type(info).__name__}")
        info.validate(self.d, self.N)
