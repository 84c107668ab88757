"""Drivers, terminal conditions, barriers and sampled hypothesis checks.

A driver is evaluated on batches: ``y`` and ``y'`` have shape ``(m, n)``,
``z`` and ``z'`` have shape ``(m, n, d)`` and the result has shape
``(m, n)``.  The Lipschitz constant is taken with respect to

    |y1 - y2| + |z1 - z2| + |y1' - y2'| + |z1' - z2'|

with Euclidean and Frobenius norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DimensionMismatch

DEFAULT_SAMPLES = 10_000
DEFAULT_BOX = 5.0


@dataclass(frozen=True)
class DriverSpec:
    """A vectorized driver together with its declared structure.

    Parameters
    ----------
    n, d : int
        Dimensions of ``Y`` and of the Brownian motion.
    func : callable
        ``func(t, y, z, yp, zp) -> (m, n)`` array.
    lam : float
        Declared Lipschitz constant.
    h2_constant : float or None
        A constant ``L`` for which the one-sided condition in ``y'`` is
        claimed to hold; None means no claim.
    lower_bound : float or None
        Claimed ``L'`` with ``f(t, 0, z) >= L'`` for all ``z``.
    """

    n: int
    d: int
    func: Callable
    lam: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    independent_of_zprime: bool = False
    independent_of_primes: bool = False
    depends_only_on_y_yprime: bool = False
    h2_constant: float | None = None
    lower_bound: float | None = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("dimensions must be positive")
        if not self.lam >= 0:
            raise ValueError(f"declared Lipschitz constant must be >= 0, got {self.lam}")

    def __call__(self, t, y, z, yp, zp) -> np.ndarray:
        out = np.asarray(self.func(t, y, z, yp, zp), dtype=float)
        m = np.shape(y)[0]
        return np.broadcast_to(out, (m, self.n)) if out.shape != (m, self.n) else out

    def at_zero(self, t, m: int = 1) -> np.ndarray:
        n, d = self.n, self.d
        return self(t, np.zeros((m, n)), np.zeros((m, n, d)), np.zeros((m, n)), np.zeros((m, n, d)))


# ---------------------------------------------------------------------------
# driver families


def zero_driver(n: int = 1, d: int = 1) -> DriverSpec:
    return DriverSpec(n, d, lambda t, y, z, yp, zp: np.zeros(np.shape(y)), lam=0.0,
                      name="zero", independent_of_zprime=True, independent_of_primes=True,
                      depends_only_on_y_yprime=True, h2_constant=0.0, lower_bound=0.0)


def _as_matrix(x, n: int) -> np.ndarray:
    if x is None:
        return np.zeros((n, n))
    x = np.asarray(x, dtype=float)
    return x * np.eye(n) if x.ndim == 0 else x.reshape(n, n)


def _as_rows(x, n: int, d: int) -> np.ndarray:
    if x is None:
        return np.zeros((n, d))
    return np.broadcast_to(np.asarray(x, dtype=float), (n, d)).copy()


def linear_driver(n: int = 1, d: int = 1, A=None, b=None, C=None, g=None, c=None,
                  name: str = "linear") -> DriverSpec:
    """``f_j = (A y)_j + b_j . z_j + (C y')_j + g_j . z'_j + c_j``.

    Scalars for ``A`` and ``C`` mean multiples of the identity; ``b`` and
    ``g`` broadcast to ``(n, d)``.
    """
    A, C = _as_matrix(A, n), _as_matrix(C, n)
    b, g = _as_rows(b, n, d), _as_rows(g, n, d)
    c = np.broadcast_to(np.asarray(0.0 if c is None else c, dtype=float), (n,)).copy()

    def func(t, y, z, yp, zp):
        return (y @ A.T + np.einsum("mjk,jk->mj", z, b) + yp @ C.T
                + np.einsum("mjk,jk->mj", zp, g) + c)

    lam = max(np.linalg.norm(A, 2), np.linalg.norm(b, axis=1).max(),
              np.linalg.norm(C, 2), np.linalg.norm(g, axis=1).max())
    no_zp = not np.any(g)
    h2 = float(np.linalg.norm(C, axis=1).max()) if np.all(C >= 0) else None
    return DriverSpec(
        n, d, func, lam=float(lam), name=name,
        params=dict(A=A, b=b, C=C, g=g, c=c),
        independent_of_zprime=no_zp,
        independent_of_primes=no_zp and not np.any(C),
        depends_only_on_y_yprime=not np.any(b) and no_zp,
        h2_constant=h2,
        lower_bound=float(c.min()) if not np.any(A) and not np.any(C) and not np.any(g) else None,
    )


def scalar_linear_driver(a: float = 0.0, b=0.0, c: float = 0.0, alpha: float = 0.0,
                         gamma=0.0, d: int = 1) -> DriverSpec:
    """``f = a y + b . z + alpha y' + gamma . z' + c`` for ``n = 1``."""
    return linear_driver(1, d, A=a, b=b, C=alpha, g=gamma, c=c, name="scalar-linear")


def mean_field_driver(alpha: float = 1.0, a: float = 0.0, c: float = 0.0, d: int = 1) -> DriverSpec:
    """Scalar driver linear in ``y'`` (the mean-field case when G is trivial)."""
    return linear_driver(1, d, A=a, C=alpha, c=c, name="mean-field")


def smooth_driver(n: int = 1, d: int = 1, a: float = 0.0, kappa: float = 0.0,
                  alpha: float = 0.0, gamma: float = 0.0, c: float = 0.0) -> DriverSpec:
    """Componentwise ``a y_j + kappa sin(sum_k z_jk) + alpha tanh(y'_j) + gamma sin(sum_k z'_jk) + c``."""

    def func(t, y, z, yp, zp):
        return (a * y + kappa * np.sin(z.sum(axis=2)) + alpha * np.tanh(yp)
                + gamma * np.sin(zp.sum(axis=2)) + c)

    rd = np.sqrt(d)
    lam = max(abs(a), abs(kappa) * rd, abs(alpha), abs(gamma) * rd)
    lower = c - abs(kappa) if alpha == 0 and gamma == 0 else None
    return DriverSpec(
        n, d, func, lam=float(lam), name="smooth",
        params=dict(a=a, kappa=kappa, alpha=alpha, gamma=gamma, c=c),
        independent_of_zprime=gamma == 0,
        independent_of_primes=alpha == 0 and gamma == 0,
        depends_only_on_y_yprime=kappa == 0 and gamma == 0,
        h2_constant=float(alpha) if alpha >= 0 else None,
        lower_bound=lower,
    )


def threshold_driver(kappa: float, theta: float, d: int = 1) -> DriverSpec:
    """``kappa (theta - y)^+``: zero whenever ``y >= theta``."""

    def func(t, y, z, yp, zp):
        return kappa * np.maximum(theta - y, 0.0)

    return DriverSpec(1, d, func, lam=abs(kappa), name="threshold",
                      params=dict(kappa=kappa, theta=theta),
                      independent_of_zprime=True, independent_of_primes=True,
                      depends_only_on_y_yprime=True, h2_constant=0.0)


def shifted_driver(base: DriverSpec, shift: Callable, lam_extra: float, name: str | None = None,
                   independent_of_zprime: bool | None = None) -> DriverSpec:
    """``base + shift`` where ``shift(t, y, z, yp, zp)`` is supplied with its own constant."""

    def func(t, y, z, yp, zp):
        return base(t, y, z, yp, zp) + shift(t, y, z, yp, zp)

    return DriverSpec(
        base.n, base.d, func, lam=base.lam + lam_extra, name=name or f"{base.name}+shift",
        params=dict(base.params),
        independent_of_zprime=base.independent_of_zprime if independent_of_zprime is None
        else independent_of_zprime,
    )


def constant_shift(base: DriverSpec, delta: float) -> DriverSpec:
    """``base + delta``; every structural flag of ``base`` carries over."""

    def func(t, y, z, yp, zp):
        return base(t, y, z, yp, zp) + delta

    lower = None if base.lower_bound is None else base.lower_bound + delta
    return replace(base, func=func, name=f"{base.name}+{delta:g}",
                   params=dict(base.params, shift=delta), lower_bound=lower)


def penalized_driver(base: DriverSpec, level: float, barrier: Callable | float = 0.0) -> DriverSpec:
    """``base + level * (s(t) - y')^+`` for a deterministic ``s``.

    Only used to certify the Lipschitz constant of the penalized equation;
    the solver applies the penalty through its own exact step.
    """
    s = barrier if callable(barrier) else (lambda t, v=float(barrier): v)

    def func(t, y, z, yp, zp):
        return base(t, y, z, yp, zp) + level * np.maximum(s(t) - yp, 0.0)

    return DriverSpec(base.n, base.d, func, lam=base.lam + level, name=f"{base.name}-penalized",
                      params=dict(base.params, level=level),
                      independent_of_zprime=base.independent_of_zprime)


def increasing_pair(n: int, d: int, rng: np.random.Generator, scale: float = 1.0,
                    with_zprime: bool = True) -> tuple[DriverSpec, DriverSpec]:
    """Random pair ``f1 <= f2`` meeting the multidimensional comparison hypotheses.

    ``f1`` has nonnegative off-diagonal ``y`` coupling, nondecreasing
    ``y'`` dependence and no ``z'``; ``f2`` adds a nonnegative constant and,
    optionally, a nonnegative ``z'`` term.
    """
    A = rng.uniform(-1, 1, (n, n)) * scale
    A[~np.eye(n, dtype=bool)] = np.abs(A[~np.eye(n, dtype=bool)])
    C = rng.uniform(0, 1, (n, n)) * scale
    b = rng.uniform(-1, 1, (n, d)) * scale
    c = rng.uniform(-1, 1, n)
    f1 = linear_driver(n, d, A=A, b=b, C=C, c=c, name="increasing-1")
    delta = rng.uniform(0, 0.5, n)
    eta = float(rng.uniform(0, 0.5)) if with_zprime else 0.0

    def extra(t, y, z, yp, zp):
        return delta + eta * np.abs(zp).sum(axis=2)

    f2 = shifted_driver(f1, extra, eta * np.sqrt(d), name="increasing-2",
                        independent_of_zprime=eta == 0)
    return f1, f2


# ---------------------------------------------------------------------------
# terminal conditions


@dataclass(frozen=True)
class TerminalSpec:
    """``func(backend) -> (size(N), n)`` values of xi on terminal scenarios."""

    func: Callable
    n: int = 1
    name: str = "custom"

    def evaluate(self, backend) -> np.ndarray:
        out = np.asarray(self.func(backend), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (backend.size(backend.N), self.n):
            raise DimensionMismatch(
                f"terminal value has shape {out.shape}, expected {(backend.size(backend.N), self.n)}")
        if not np.all(np.isfinite(out)):
            raise ValueError("terminal value is not finite")
        return out


def walk_terminal(component: int = 0, scale: float = 1.0, shift: float = 0.0) -> TerminalSpec:
    return TerminalSpec(lambda be: scale * be.walk(be.N)[:, component] + shift, 1, "walk")


def terminal_from_walk(g: Callable, n: int = 1, name: str = "custom") -> TerminalSpec:
    """Terminal value as a function of the terminal walk ``W_T``, shape ``(m, d)``."""
    return TerminalSpec(lambda be: g(be.walk(be.N)), n, name)


def max_terminal(floor: float, component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda be: np.maximum(be.walk(be.N)[:, component], floor), 1, "max")


def abs_terminal(component: int = 0) -> TerminalSpec:
    return TerminalSpec(lambda be: np.abs(be.walk(be.N)[:, component]), 1, "abs")


def constant_terminal(value, n: int = 1) -> TerminalSpec:
    v = np.broadcast_to(np.asarray(value, dtype=float), (n,))
    return TerminalSpec(lambda be: np.tile(v, (be.size(be.N), 1)), n, "constant")


def shifted_terminal(base: TerminalSpec, shift) -> TerminalSpec:
    """``base + shift`` where ``shift`` is a number or ``shift(backend)`` array."""

    def func(be):
        s = np.asarray(shift(be) if callable(shift) else shift, dtype=float)
        return base.evaluate(be) + (s[:, None] if s.ndim == 1 else s)

    return TerminalSpec(func, base.n, f"{base.name}+shift")


# ---------------------------------------------------------------------------
# barriers


@dataclass(frozen=True)
class BarrierSpec:
    """Obstacle given pathwise or as an Ito process.

    Ito form: ``S_{i+1} = S_i + b_i dt + sigma_i . dB_i`` with ``b`` a scalar
    or length-``N`` array and ``sigma`` a scalar, a length-``d`` vector or an
    ``(N, d)`` array.  Pathwise form: ``values(backend, i) -> (size(i),)``.
    """

    S0: float = 0.0
    b: object = 0.0
    sigma: object = 0.0
    values: Callable | None = None
    name: str = "ito"

    @property
    def is_ito(self) -> bool:
        return self.values is None

    def drift(self, N: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.b, dtype=float), (N,))

    def volatility(self, N: int, d: int) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            return np.broadcast_to(s, (N, d))
        if s.ndim == 1:
            if s.shape[0] != d:
                raise DimensionMismatch(f"volatility has {s.shape[0]} components, d = {d}")
            return np.broadcast_to(s, (N, d))
        if s.shape != (N, d):
            raise DimensionMismatch(f"volatility shape {s.shape}, expected {(N, d)}")
        return s


def constant_barrier(level: float) -> BarrierSpec:
    return BarrierSpec(S0=level, name="constant")


def ito_barrier(S0: float, b=0.0, sigma=0.0) -> BarrierSpec:
    return BarrierSpec(S0=S0, b=b, sigma=sigma, name="ito")


def pathwise_barrier(values: Callable, name: str = "pathwise") -> BarrierSpec:
    return BarrierSpec(values=values, name=name)


def eval_barrier(spec: BarrierSpec, backend) -> list[np.ndarray]:
    """Barrier values per step, each of shape ``(size(i),)``."""
    N, dt = backend.N, backend.grid.dt
    if not spec.is_ito:
        out = []
        for i in range(N + 1):
            v = np.asarray(spec.values(backend, i), dtype=float).reshape(-1)
            if v.shape[0] != backend.size(i):
                raise DimensionMismatch(f"barrier step {i} has {v.shape[0]} values")
            out.append(v)
        return out
    b = spec.drift(N)
    sig = spec.volatility(N, backend.d)
    S = [np.full(backend.size(0), float(spec.S0))]
    for i in range(N):
        prev = backend.lift(S[-1], i, i + 1)
        S.append(prev + b[i] * dt + backend.increment(i) @ sig[i])
    return S


# ---------------------------------------------------------------------------
# sampled hypothesis checks


@dataclass
class LipschitzReport:
    lam_hat: float
    declared: float
    passed: bool
    samples: int


@dataclass(frozen=True)
class HypothesisViolation:
    check: str
    component: int
    lhs: float
    rhs: float
    point: dict


@dataclass
class ComparisonHypothesisReport:
    h1: list = field(default_factory=list)
    h2: list = field(default_factory=list)
    h2_constant: float | None = None
    a_plus_b_min: float | None = None
    a_g_adapted: bool | None = None
    notes: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        ok = not self.h1 and not self.h2
        if self.a_plus_b_min is not None:
            ok = ok and self.a_plus_b_min >= -1e-12
        if self.a_g_adapted is not None:
            ok = ok and self.a_g_adapted
        return ok


def _random_inputs(rng, m, n, d, box):
    return (rng.uniform(-box, box, (m, n)), rng.uniform(-box, box, (m, n, d)),
            rng.uniform(-box, box, (m, n)), rng.uniform(-box, box, (m, n, d)))


def check_lipschitz(f: DriverSpec, samples: int = DEFAULT_SAMPLES, box: float = DEFAULT_BOX,
                    seed: int = 0, t: float = 0.0, rel_tol: float = 1e-6) -> LipschitzReport:
    """Largest sampled difference quotient of ``f``.

    Half of the pairs move every argument, the other half move a single
    argument slot, which is where a linear map attains its constant.
    """
    rng = np.random.default_rng(seed)
    n, d = f.n, f.d
    x1 = _random_inputs(rng, samples, n, d, box)
    dx = list(_random_inputs(rng, samples, n, d, 1.0))
    scale = 10.0 ** rng.uniform(-3, 0, samples)
    slot = rng.integers(0, 5, samples)  # 4 means "all slots"
    for k in range(4):
        mask = (slot != k) & (slot != 4)
        dx[k][mask] = 0.0
        dx[k] *= scale.reshape((-1,) + (1,) * (dx[k].ndim - 1))
    x2 = [a + b for a, b in zip(x1, dx)]
    dx = [b - a for a, b in zip(x1, x2)]
    diff = np.linalg.norm(f(t, *x1) - f(t, *x2), axis=1)
    dist = (np.linalg.norm(dx[0], axis=1) + np.linalg.norm(dx[1].reshape(samples, -1), axis=1)
            + np.linalg.norm(dx[2], axis=1) + np.linalg.norm(dx[3].reshape(samples, -1), axis=1))
    ok = dist > 0
    lam_hat = float(np.max(diff[ok] / dist[ok])) if np.any(ok) else 0.0
    return LipschitzReport(lam_hat, f.lam, lam_hat <= f.lam * (1 + rel_tol) + 1e-300, samples)


def check_h1(f1: DriverSpec, f2: DriverSpec, samples: int = DEFAULT_SAMPLES,
             box: float = DEFAULT_BOX, seed: int = 0, t: float = 0.0,
             tol: float = 1e-12) -> list[HypothesisViolation]:
    """Sample tuples with ``y1_j = y2_j``, ``z1_j = z2_j``, ``y1_l <= y2_l`` and test ``f1_j <= f2_j``."""
    if (f1.n, f1.d) != (f2.n, f2.d):
        raise DimensionMismatch("drivers have different dimensions")
    rng = np.random.default_rng(seed)
    n, d = f1.n, f1.d
    out = []
    for j in range(n):
        y2, z2, yp, zp = _random_inputs(rng, samples, n, d, box)
        y1 = y2 - np.abs(rng.uniform(0, box, (samples, n))) * (rng.random((samples, n)) < 0.8)
        y1[:, j] = y2[:, j]
        z1 = rng.uniform(-box, box, (samples, n, d))
        z1[:, j, :] = z2[:, j, :]
        lhs = f1(t, y1, z1, yp, zp)[:, j]
        rhs = f2(t, y2, z2, yp, zp)[:, j]
        for k in np.flatnonzero(lhs > rhs + tol):
            out.append(HypothesisViolation("H1", j, float(lhs[k]), float(rhs[k]),
                                           dict(y1=y1[k], y2=y2[k], yp=yp[k])))
    return out


def check_h2(f: DriverSpec, L: float, samples: int = DEFAULT_SAMPLES, box: float = DEFAULT_BOX,
             seed: int = 0, t: float = 0.0, tol: float = 1e-12) -> list[HypothesisViolation]:
    """Sample ``f_j(y') - f_j(y'') <= L |(y' - y'')^+|``."""
    if L < 0:
        raise ValueError("L must be >= 0")
    rng = np.random.default_rng(seed)
    n, d = f.n, f.d
    y, z, yp, zp = _random_inputs(rng, samples, n, d, box)
    ypp = rng.uniform(-box, box, (samples, n))
    # also probe points that differ in one coordinate only
    single = rng.random(samples) < 0.5
    if n > 1:
        keep = rng.integers(0, n, samples)
        for k in np.flatnonzero(single):
            mask = np.arange(n) != keep[k]
            ypp[k, mask] = yp[k, mask]
    lhs = f(t, y, z, yp, zp) - f(t, y, z, ypp, zp)
    rhs = L * np.linalg.norm(np.maximum(yp - ypp, 0.0), axis=1)
    out = []
    for j in range(n):
        for k in np.flatnonzero(lhs[:, j] > rhs + tol):
            out.append(HypothesisViolation("H2", j, float(lhs[k, j]), float(rhs[k]),
                                           dict(yp=yp[k], ypp=ypp[k])))
    return out


def check_independent_of_zprime(f: DriverSpec, samples: int = 1000, box: float = DEFAULT_BOX,
                                seed: int = 0, t: float = 0.0) -> bool:
    rng = np.random.default_rng(seed)
    y, z, yp, zp = _random_inputs(rng, samples, f.n, f.d, box)
    zp2 = rng.uniform(-box, box, zp.shape)
    return bool(np.array_equal(f(t, y, z, yp, zp), f(t, y, z, yp, zp2)))


def check_lower_bound(f: DriverSpec, L: float, samples: int = DEFAULT_SAMPLES,
                      box: float = DEFAULT_BOX, seed: int = 0) -> bool:
    """Sample ``f(t, 0, z) >= L`` over ``z`` and ``t`` in ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-box, box, (samples, f.n, f.d))
    zero = np.zeros((samples, f.n))
    vals = np.stack([f(t, zero, z, zero, np.zeros_like(z)) for t in np.linspace(0, 1, 5)])
    return bool(vals.min() >= L - 1e-12)


def difference_quotients(f2: DriverSpec, t: float, y1, y2, yp1, yp2) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``a_t`` and ``b_t`` of the conditional comparison.

    ``f2`` must ignore ``z`` and ``z'``.  Quotients with a vanishing
    denominator are set to zero.
    """
    y1, y2, yp1, yp2 = (np.asarray(v, dtype=float).reshape(-1, 1) for v in (y1, y2, yp1, yp2))
    zz = np.zeros((y1.shape[0], 1, f2.d))
    f_a = f2(t, y1, zz, yp1, zz) - f2(t, y2, zz, yp1, zz)
    f_b = f2(t, y2, zz, yp1, zz) - f2(t, y2, zz, yp2, zz)
    dy, dyp = y1 - y2, yp1 - yp2
    a = np.where(dy != 0, f_a / np.where(dy != 0, dy, 1.0), 0.0)
    b = np.where(dyp != 0, f_b / np.where(dyp != 0, dyp, 1.0), 0.0)
    return a[:, 0], b[:, 0]
