"""Reflected BSDEs with a constraint on E[Y - S | G], built by penalization.

For each level ``n`` the penalized equation carries the extra driver term
``n (E[Y - S | G])^-``.  Its step is solved exactly on every G-atom: with
``r = E[Y_{i+1}|F_i] + dt f`` and ``g = E[r | G_i]``,

    dK_i = n dt (E[S_i|G_i] - g)^+ / (1 + n dt),    Y_i = r + dK_i,

which equals ``n dt (E[Y_i - S_i | G_i])^-`` for the resulting ``Y_i``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .drivers import BarrierSpec, DriverSpec, eval_barrier
from .errors import PlateauOnly, TerminalConstraintViolated
from .solver import (
    Penalty,
    SolutionTriple,
    SolverConfig,
    h2_sq,
    solve_cebsde,
    sup_sq,
    terminal_sq,
    terminal_values,
)


@dataclass(frozen=True)
class PenaltySchedule:
    levels: tuple

    def __post_init__(self):
        lv = tuple(int(n) for n in self.levels)
        if not lv or any(n <= 0 for n in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be strictly increasing positive integers, got {self.levels}")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def geometric(cls, n0: int = 1, K: int = 10) -> "PenaltySchedule":
        return cls(tuple(n0 * 2**k for k in range(K + 1)))


def barrier_projection(backend, info, S: list) -> list:
    """``E[S_i | G_i]`` for every step, each of shape ``(size(i), 1)``."""
    return [backend.expect_g(info, i, np.asarray(S[i], dtype=float).reshape(-1, 1))
            for i in range(len(S))]


def terminal_margin(backend, info, xi_vals: np.ndarray, S_T: np.ndarray) -> np.ndarray:
    return backend.expect_g(info, backend.N, xi_vals[:, :1] - S_T.reshape(-1, 1))[:, 0]


def check_terminal_constraint(backend, info, xi_vals, S_T, tol: float | None = None) -> float:
    """Raise if ``E[xi - S_T | G_T] < 0`` on some terminal atom; return the minimum.

    The default tolerance is ``1e-12`` on trees and three standard errors of
    ``xi - S_T`` under Monte Carlo.
    """
    gap = terminal_margin(backend, info, xi_vals, S_T)
    if tol is None:
        if backend.kind == "tree":
            tol = 1e-12
        else:
            diff = xi_vals[:, 0] - S_T
            tol = 3.0 * float(np.std(diff)) / np.sqrt(diff.size)
    worst = int(np.argmin(gap))
    margin = float(gap[worst])
    if margin < -tol:
        atom = int(info.atoms[backend.N][worst]) if backend.kind == "tree" else worst
        raise TerminalConstraintViolated(
            f"E[xi - S_T | G_T] = {margin:.3e} < 0 on terminal atom {atom}", atom=atom, margin=margin)
    return margin


def solve_penalized(backend, info, f: DriverSpec, xi, barrier: BarrierSpec, level: float,
                    config: SolverConfig | None = None, method: str = "resolvent",
                    check_terminal: bool = True) -> SolutionTriple:
    """Solve the penalized equation at one level; ``K`` is G-measurable by construction."""
    if not f.independent_of_primes:
        raise ValueError("the penalized construction needs a driver without y' and z' arguments")
    xi_vals = terminal_values(xi, backend, f.n)
    S = eval_barrier(barrier, backend)
    if check_terminal:
        check_terminal_constraint(backend, info, xi_vals, S[-1])
    pen = Penalty(float(level), barrier_projection(backend, info, S), info, method)
    sol = solve_cebsde(backend, info, f, xi_vals, config, penalty=pen)
    sol.meta.update(barrier=S, level=level, method=method)
    return sol


def constraint_gaps(sol: SolutionTriple, S: list) -> list:
    """``E[Y_i - S_i | G_i]`` per step, shape ``(size(i),)``."""
    be, info = sol.backend, sol.info
    return [be.expect_g(info, i, sol.Y[i][:, :1] - np.asarray(S[i]).reshape(-1, 1))[:, 0]
            for i in range(be.N + 1)]


def sup_neg(sol: SolutionTriple, S: list) -> float:
    """``E[max_i ((E[Y_i - S_i | G_i])^-)^2]``."""
    neg = [np.maximum(-g, 0.0) for g in constraint_gaps(sol, S)]
    return sup_sq(sol.backend, neg)


def skorokhod_integral(sol: SolutionTriple, S: list) -> float:
    """``E[sum_i E[Y_i - S_i | G_i] dK_i]``."""
    be = sol.backend
    gaps = constraint_gaps(sol, S)
    return float(sum(be.expectation(gaps[i] * sol.dK[i][:, 0], i) for i in range(be.N)))


@dataclass
class LevelRecord:
    n: int
    sup_neg: float
    norm_y: float
    norm_z: float
    norm_k: float
    gap_y: float
    gap_z: float
    gap_k: float
    y0: float


COLUMNS = ("n", "supNeg", "normY", "normZ", "normK", "gapY", "gapZ", "gapK")


@dataclass
class PenalizationReport:
    rows: list
    limit: SolutionTriple
    barrier: list
    slope: float | None
    intercept: float | None
    fit_levels: tuple
    floor: float
    plateau_only: bool
    skorokhod: float
    c_hat: float
    notes: list = field(default_factory=list)

    def norm_spread(self) -> dict:
        """max/min of each norm over the levels (inf if a norm vanishes)."""
        out = {}
        for key in ("norm_y", "norm_z", "norm_k"):
            v = np.array([getattr(r, key) for r in self.rows])
            out[key] = float(v.max() / v.min()) if v.min() > 0 else (1.0 if v.max() == 0 else np.inf)
        return out

    def cauchy_monotone(self, start_level: int = 4) -> dict:
        """Whether each gap sequence is nonincreasing from the given level (1-based) on."""
        out = {}
        for key in ("gap_y", "gap_z", "gap_k"):
            v = np.array([getattr(r, key) for r in self.rows[1:]])
            v = v[max(start_level - 2, 0):]
            out[key] = bool(np.all(np.diff(v) <= 1e-14 * max(1.0, v.max(initial=0.0))))
        return out

    def table(self) -> list[list]:
        return [[r.n, r.sup_neg, r.norm_y, r.norm_z, r.norm_k, r.gap_y, r.gap_z, r.gap_k]
                for r in self.rows]

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in self.table():
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return dict(slope=self.slope, intercept=self.intercept, fit_levels=list(self.fit_levels),
                    floor=self.floor, plateau_only=self.plateau_only, skorokhod=self.skorokhod,
                    c_hat=self.c_hat, norm_spread=self.norm_spread(),
                    cauchy_monotone=self.cauchy_monotone(),
                    y0_limit=float(self.rows[-1].y0))


def plateau_floor(levels, values) -> float:
    """Floor ``F`` from the two largest levels assuming ``F + C/n^2`` there."""
    if len(levels) < 2:
        return 0.0
    na, nb = levels[-2], levels[-1]
    sa, sb = values[-2], values[-1]
    r = (nb / na) ** 2
    return max(0.0, sb - (sa - sb) / (r - 1.0))


def fit_rate(levels, values, floor: float):
    """Least-squares slope of ``log value`` against ``log n`` above ``10 * floor``."""
    lv = np.asarray(levels, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = (v > 10.0 * floor) & (v > 0)
    if keep.sum() < 2:
        return None, None, ()
    slope, intercept = np.polyfit(np.log(lv[keep]), np.log(v[keep]), 1)
    return float(slope), float(intercept), tuple(int(n) for n in lv[keep])


def run_penalization_sweep(backend, info, f: DriverSpec, xi, barrier: BarrierSpec,
                           schedule: PenaltySchedule | None = None,
                           config: SolverConfig | None = None, method: str = "resolvent",
                           check_terminal: bool = True, strict: bool = False) -> PenalizationReport:
    """Solve every level, tabulate the diagnostics and fit the decay rate.

    ``strict=True`` raises :class:`PlateauOnly` when no slope can be fitted;
    otherwise the report carries ``plateau_only=True``.
    """
    schedule = schedule or PenaltySchedule.geometric()
    S = eval_barrier(barrier, backend)
    N = backend.N
    rows, sols = [], []
    prev = None
    for n in schedule.levels:
        sol = solve_penalized(backend, info, f, xi, barrier, n, config, method, check_terminal)
        if prev is None:
            gy = gz = gk = float("nan")
        else:
            gy = sup_sq(backend, [sol.Y[i] - prev.Y[i] for i in range(N + 1)])
            gz = h2_sq(backend, [sol.Z[i] - prev.Z[i] for i in range(N)])
            gk = sup_sq(backend, [sol.K[i] - prev.K[i] for i in range(N + 1)])
        rows.append(LevelRecord(
            n=n, sup_neg=sup_neg(sol, S), norm_y=sup_sq(backend, sol.Y),
            norm_z=h2_sq(backend, sol.Z), norm_k=terminal_sq(backend, sol.K[N]),
            gap_y=gy, gap_z=gz, gap_k=gk, y0=float(sol.Y0[0]),
        ))
        sols.append(sol)
        prev = sol
    levels = [r.n for r in rows]
    values = [r.sup_neg for r in rows]
    floor = plateau_floor(levels, values)
    slope, intercept, used = fit_rate(levels, values, floor)
    plateau = slope is None
    if plateau and strict:
        raise PlateauOnly("every level is at or below the discretization floor; no slope can be fitted")
    limit = sols[-1]
    c_hat = max(n * np.sqrt(v) for n, v in zip(levels, values))
    return PenalizationReport(rows=rows, limit=limit, barrier=S, slope=slope, intercept=intercept,
                              fit_levels=used, floor=floor, plateau_only=plateau,
                              skorokhod=skorokhod_integral(limit, S), c_hat=float(c_hat))


# ---------------------------------------------------------------------------
# audit


@dataclass
class CheckResult:
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class AuditReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def audit_reflected_solution(limit: SolutionTriple, S: list, tol_constraint: float = 1e-3,
                             tol_skorokhod: float = 1e-2, tol_k: float = 1e-12) -> AuditReport:
    """Check the constraint, the admissibility of ``K`` and the Skorokhod condition."""
    be, info = limit.backend, limit.info
    checks = {}

    gaps = constraint_gaps(limit, S)
    worst_step = int(np.argmin([g.min() for g in gaps]))
    cmin = float(gaps[worst_step].min())
    checks["constraint"] = CheckResult(cmin >= -tol_constraint, cmin,
                                       f"min E[Y-S|G] = {cmin:.3e} at step {worst_step}")

    K = limit.K
    problems = []
    k0 = float(np.max(np.abs(K[0])))
    if k0 > tol_k:
        problems.append(f"K_0 = {k0:.3e} != 0")
    inc_min = np.inf
    for i in range(be.N):
        inc = K[i + 1] - be.lift(K[i], i, i + 1)
        j = int(np.argmin(inc.min(axis=1)))
        inc_min = min(inc_min, float(inc[j].min()))
        if inc[j].min() < -tol_k:
            problems.append(f"K decreases by {-inc[j].min():.3e} into step {i + 1} node {j}")
    for i in range(be.N + 1):
        dev = np.abs(K[i] - be.expect_g(info, i, K[i])).max(axis=1)
        j = int(np.argmax(dev))
        if dev[j] > max(tol_k, 1e-12 * max(1.0, float(np.abs(K[i]).max()))):
            problems.append(f"K not constant on its G-atom at step {i} node {j} (spread {dev[j]:.3e})")
    checks["k_admissible"] = CheckResult(not problems, float(inc_min), "; ".join(problems))

    sk = skorokhod_integral(limit, S)
    checks["skorokhod"] = CheckResult(abs(sk) <= tol_skorokhod, float(abs(sk)),
                                      f"E[sum E[Y-S|G] dK] = {sk:.3e}")
    return AuditReport(checks)
