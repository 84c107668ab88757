"""Backward Euler solver for BSDEs whose driver also sees E[Y|G] and E[Z|G].

The outer loop is a Picard iteration on the pair ``(U, V)``: the driver is
fed the frozen projections ``E[U|G]`` and ``E[V|G]`` and a standard BSDE is
solved backward.  Each backward step is

    Z_i = E[Y_{i+1} dB_i^T | F_i] / dt
    Y_i = E[Y_{i+1} | F_i] + dt f(t_i, Y_i, Z_i, U'_i, V'_i) + dK_i

with the implicit equation in ``Y_i`` solved by a damped fixed point.
Arrays carry scenarios on axis 0: ``Y[i]`` is ``(size(i), n)``, ``Z[i]`` is
``(size(i), n, d)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .drivers import DriverSpec, TerminalSpec, zero_driver
from .errors import InnerDivergence, OuterDivergence, StepSizeTooLarge

log = logging.getLogger(__name__)


def default_beta(lam: float) -> float:
    return 16.0 * lam**2 + 4.0 * lam + 1.0


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration limits.

    The outer loop stops once the beta-weighted residual is below
    ``outer_tol * max(1, ||(U, V)||_beta)``.
    """

    outer_tol: float = 1e-11
    inner_tol: float = 1e-14
    max_outer: int = 500
    max_inner: int = 500
    beta: float | None = None
    scheme: str = "implicit"
    damping: float = 1.0
    initial_guess: str = "zero"
    divergence_patience: int = 3

    def __post_init__(self):
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.scheme not in ("implicit", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.initial_guess not in ("zero", "terminal"):
            raise ValueError(f"unknown initial guess {self.initial_guess!r}")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class Penalty:
    """Penalty ``level * (E[S|G] - E[Y|G])^+`` applied inside each step.

    ``barrier_g[i]`` holds ``E[S_i | G_i]`` with shape ``(size(i), 1)``.
    ``method="resolvent"`` solves the penalized step exactly on every atom;
    ``method="fixed_point"`` iterates the penalty together with the driver
    and needs ``(lam + level) dt <= 1/2``.
    """

    level: float
    barrier_g: list
    info: object
    method: str = "resolvent"

    def __post_init__(self):
        if self.method not in ("resolvent", "fixed_point"):
            raise ValueError(f"unknown penalty method {self.method!r}")
        if self.level < 0:
            raise ValueError("penalty level must be >= 0")


@dataclass(frozen=True)
class ResidualRecord:
    iteration: int
    residual: float
    wall_time: float


@dataclass
class SolutionTriple:
    Y: list
    Z: list
    K: list
    dK: list
    backend: object
    info: object = None
    residuals: list = field(default_factory=list)
    beta: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Y[0].shape[1]

    @property
    def outer_iterations(self) -> int:
        return len(self.residuals)

    @property
    def Y0(self) -> np.ndarray:
        return self.backend.expectation(self.Y[0], 0)

    @property
    def Z0(self) -> np.ndarray:
        return self.backend.expectation(self.Z[0], 0)


# ---------------------------------------------------------------------------
# norms


def beta_weights(grid, beta: float) -> np.ndarray:
    """``exp(beta t_i)`` for ``i < N``, rescaled if it would overflow."""
    e = beta * grid.knots[:-1]
    return np.exp(e - max(0.0, beta * grid.T - 700.0))


def _sq(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return (X * X).reshape(X.shape[0], -1).sum(axis=1)


def beta_norm(backend, weights, Y: list, Z: list) -> float:
    """Discrete ``sqrt(sum_i w_i dt E[|Y_i|^2 + |Z_i|^2])`` over ``i < N``."""
    dt = backend.grid.dt
    total = 0.0
    for i in range(backend.N):
        total += weights[i] * dt * float(backend.expectation(_sq(Y[i]) + _sq(Z[i]), i))
    return float(np.sqrt(total))


def sup_sq(backend, X: list) -> float:
    """``E[max_i |X_i|^2]`` along every scenario."""
    run = _sq(X[0])
    for i in range(1, len(X)):
        run = np.maximum(backend.lift(run, i - 1, i), _sq(X[i]))
    return float(backend.expectation(run, len(X) - 1))


def h2_sq(backend, Z: list) -> float:
    """``E[sum_i |Z_i|^2 dt]``."""
    dt = backend.grid.dt
    return float(sum(dt * backend.expectation(_sq(Z[i]), i) for i in range(len(Z))))


def terminal_sq(backend, X: np.ndarray) -> float:
    return float(backend.expectation(_sq(X), backend.N))


# ---------------------------------------------------------------------------
# backward recursion


def terminal_values(xi, backend, n: int) -> np.ndarray:
    if isinstance(xi, TerminalSpec):
        return xi.evaluate(backend)
    out = np.asarray(xi, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.shape != (backend.size(backend.N), n):
        raise ValueError(f"terminal array has shape {out.shape}, expected {(backend.size(backend.N), n)}")
    return out


def check_step_size(f: DriverSpec, grid, config: SolverConfig, penalty: Penalty | None = None):
    if config.scheme != "implicit":
        return
    lam = f.lam
    if penalty is not None and penalty.method == "fixed_point":
        lam += penalty.level
    if lam * grid.dt > 0.5:
        raise StepSizeTooLarge(
            f"Lipschitz constant {lam:g} times dt = {grid.dt:g} exceeds 1/2; "
            f"need N >= {int(np.ceil(2 * lam * grid.T))}"
        )


def _frozen_step(backend, f, i, t, dt, m, z, yp, zp, config, extra, penalty):
    """Solve the step-``i`` equation for ``y``; returns ``(y, dK)``."""
    pen_on = penalty is not None and penalty.level > 0
    if pen_on:
        s_g = penalty.barrier_g[i]
        ndt = penalty.level * dt

    def rhs(y):
        r = m + dt * f(t, y, z, yp, zp)
        if extra is not None:
            r = r + dt * extra(i, y)
        if not pen_on:
            return r, None
        if penalty.method == "resolvent":
            g = backend.expect_g(penalty.info, i, r)
            dk = ndt * np.maximum(s_g - g, 0.0) / (1.0 + ndt)
        else:
            dk = ndt * np.maximum(s_g - backend.expect_g(penalty.info, i, y), 0.0)
        return r + dk, dk

    if config.scheme == "explicit":
        y, dk = rhs(m)
    else:
        y = m
        for _ in range(config.max_inner):
            new, dk = rhs(y)
            if config.damping != 1.0:
                new = y + config.damping * (new - y)
            err = float(np.max(np.abs(new - y))) if new.size else 0.0
            y = new
            if not np.isfinite(err):
                raise InnerDivergence(f"step {i}: fixed point produced non-finite values")
            if err <= config.inner_tol * max(1.0, float(np.max(np.abs(y)))):
                break
        else:
            raise InnerDivergence(f"step {i}: no convergence in {config.max_inner} iterations")
        if pen_on and penalty.method == "fixed_point":
            dk = ndt * np.maximum(s_g - backend.expect_g(penalty.info, i, y), 0.0)
    if dk is None:
        dk = np.zeros_like(y)
    return y, dk


def solve_frozen(backend, f: DriverSpec, xi, Yp: list | None = None, Zp: list | None = None,
                 config: SolverConfig | None = None, extra=None, penalty: Penalty | None = None,
                 external_K: list | None = None):
    """One backward sweep with the prime arguments frozen.

    Parameters
    ----------
    Yp, Zp : list of arrays or None
        Values fed to the ``y'`` and ``z'`` slots at each step; None means zero.
    extra : callable, optional
        ``extra(i, y)`` added to the driver at step ``i``.
    external_K : list of arrays, optional
        A given increasing process entering as ``+ K_T - K_t``.

    Returns
    -------
    Y, Z, dK : lists of per-step arrays
    """
    config = config or SolverConfig()
    N, dt, n, d = backend.N, backend.grid.dt, f.n, backend.d
    if f.d != d:
        raise ValueError(f"driver expects d = {f.d}, backend has d = {d}")
    check_step_size(f, backend.grid, config, penalty)
    Y: list = [None] * (N + 1)
    Z: list = [None] * N
    dK: list = [None] * N
    Y[N] = terminal_values(xi, backend, n)
    for i in range(N - 1, -1, -1):
        t = backend.grid.t(i)
        nxt = Y[i + 1] if external_K is None else Y[i + 1] + external_K[i + 1]
        m = backend.expect_next(i, nxt)
        if external_K is not None:
            m = m - external_K[i]
        dB = backend.increment(i)
        Z[i] = backend.expect_next(i, nxt[:, :, None] * dB[:, None, :]) / dt
        size = m.shape[0]
        yp = np.zeros((size, n)) if Yp is None else Yp[i]
        zp = np.zeros((size, n, d)) if Zp is None else Zp[i]
        Y[i], dK[i] = _frozen_step(backend, f, i, t, dt, m, Z[i], yp, zp, config, extra, penalty)
    return Y, Z, dK


def accumulate_K(backend, dK: list) -> list:
    """``K_0 = 0`` and ``K_{i+1} = K_i + dK_i`` carried onto step ``i+1`` scenarios."""
    K = [np.zeros_like(dK[0])]
    for i, inc in enumerate(dK):
        K.append(backend.lift(K[-1] + inc, i, i + 1))
    return K


def project_g(backend, info, X: list, upto: int | None = None) -> list:
    upto = len(X) if upto is None else upto
    return [backend.expect_g(info, i, X[i]) for i in range(upto)]


def solve_cebsde(backend, info, f: DriverSpec, xi, config: SolverConfig | None = None, *,
                 penalty: Penalty | None = None, external_K: list | None = None,
                 extra=None, initial: tuple | None = None) -> SolutionTriple:
    """Picard iteration ``(U, V) <- I(E[U|G], E[V|G])`` until the beta-norm gap is small.

    Raises
    ------
    OuterDivergence
        If the residual fails to decrease ``divergence_patience`` times in a
        row or ``max_outer`` is reached.
    """
    config = config or SolverConfig()
    backend.check_info(info)
    N, n, d = backend.N, f.n, backend.d
    beta = default_beta(f.lam) if config.beta is None else config.beta
    w = beta_weights(backend.grid, beta)
    xi_vals = terminal_values(xi, backend, n)
    check_step_size(f, backend.grid, config, penalty)

    if initial is not None:
        U, V = initial
    elif config.initial_guess == "terminal":
        U, V, _ = solve_frozen(backend, zero_driver(n, d), xi_vals, config=config)
    else:
        U = [np.zeros((backend.size(i), n)) for i in range(N + 1)]
        V = [np.zeros((backend.size(i), n, d)) for i in range(N)]

    start = time.perf_counter()
    records: list[ResidualRecord] = []
    prev, bad = None, 0
    skip_y = f.independent_of_primes
    skip_z = f.independent_of_primes or f.independent_of_zprime
    for k in range(1, config.max_outer + 1):
        Up = None if skip_y else project_g(backend, info, U, N)
        Vp = None if skip_z else project_g(backend, info, V, N)
        Y, Z, dK = solve_frozen(backend, f, xi_vals, Up, Vp, config, extra, penalty, external_K)
        dY = [Y[i] - U[i] for i in range(N)]
        dZ = [Z[i] - V[i] for i in range(N)]
        res = beta_norm(backend, w, dY, dZ)
        scale = beta_norm(backend, w, Y, Z)
        records.append(ResidualRecord(k, res, time.perf_counter() - start))
        log.debug("outer iteration %d residual %.3e", k, res)
        U, V = Y, Z
        if res <= config.outer_tol * max(1.0, scale):
            break
        if not np.isfinite(res):
            raise OuterDivergence(f"outer iteration {k} produced a non-finite residual")
        bad = bad + 1 if prev is not None and res >= prev else 0
        if bad >= config.divergence_patience:
            raise OuterDivergence(
                f"residual failed to decrease {bad} times in a row (last {res:.3e})")
        prev = res
    else:
        raise OuterDivergence(f"no convergence within {config.max_outer} outer iterations "
                              f"(last residual {records[-1].residual:.3e})")

    K = external_K if external_K is not None else accumulate_K(backend, dK)
    return SolutionTriple(Y=U, Z=V, K=K, dK=dK, backend=backend, info=info, residuals=records,
                          beta=beta, meta=dict(driver=f.name, penalty=None if penalty is None
                                               else penalty.level))


def contraction_ratios(sol: SolutionTriple) -> np.ndarray:
    """``residual_{k+1} / residual_k`` over consecutive outer iterations."""
    r = np.array([rec.residual for rec in sol.residuals])
    if r.size < 2:
        return np.zeros(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r[:-1] > 0, r[1:] / np.where(r[:-1] > 0, r[:-1], 1.0), 0.0)


def scheme_residual(sol: SolutionTriple, f: DriverSpec, extra=None) -> float:
    """Max over nodes of ``|Y_i - E[Y_{i+1}|F_i] - dt f(...) - dK_i|``."""
    be, info = sol.backend, sol.info
    dt = be.grid.dt
    worst = 0.0
    for i in range(be.N):
        m = be.expect_next(i, sol.Y[i + 1])
        yp = be.expect_g(info, i, sol.Y[i])
        zp = be.expect_g(info, i, sol.Z[i])
        drift = f(be.grid.t(i), sol.Y[i], sol.Z[i], yp, zp)
        if extra is not None:
            drift = drift + extra(i, sol.Y[i])
        r = sol.Y[i] - m - dt * drift - sol.dK[i]
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


# ---------------------------------------------------------------------------
# stability probe


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float
    sol1: SolutionTriple
    sol2: SolutionTriple


def apriori_probe(backend, info, instance1: tuple, instance2: tuple,
                  config: SolverConfig | None = None) -> AprioriReport:
    """Compare two solved instances against the data of their difference.

    ``lhs = E[sup |Y1 - Y2|^2] + E[sum |Z1 - Z2|^2 dt]`` and
    ``rhs = E|xi1 - xi2|^2 + E[sum |f1 - f2|^2 dt]`` with both drivers
    evaluated along the second solution.
    """
    (xi1, f1), (xi2, f2) = instance1, instance2
    s1 = solve_cebsde(backend, info, f1, xi1, config)
    s2 = solve_cebsde(backend, info, f2, xi2, config)
    N, dt = backend.N, backend.grid.dt
    lhs = sup_sq(backend, [s1.Y[i] - s2.Y[i] for i in range(N + 1)])
    lhs += h2_sq(backend, [s1.Z[i] - s2.Z[i] for i in range(N)])
    rhs = terminal_sq(backend, s1.Y[N] - s2.Y[N])
    for i in range(N):
        t = backend.grid.t(i)
        yp = backend.expect_g(info, i, s2.Y[i])
        zp = backend.expect_g(info, i, s2.Z[i])
        diff = f1(t, s2.Y[i], s2.Z[i], yp, zp) - f2(t, s2.Y[i], s2.Z[i], yp, zp)
        rhs += dt * float(backend.expectation(_sq(diff), i))
    if lhs == 0:
        ratio = 0.0
    elif rhs == 0:
        ratio = float("inf")
    else:
        ratio = lhs / rhs
    return AprioriReport(float(lhs), float(rhs), float(ratio), s1, s2)
