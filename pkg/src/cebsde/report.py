"""Task dispatch and report bundles.

Each task produces named tables (every row starts with the task name and a
step or level key), a set of verdicts and a summary record.  Nothing is
written until the whole computation has finished.
"""

from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .drivers import constant_shift, eval_barrier, shifted_terminal
from .errors import CEBSDEError
from .penalization import audit_reflected_solution, run_penalization_sweep
from .solver import apriori_probe, scheme_residual, solve_cebsde
from .verification import (
    ComparisonInstance,
    classical_reflected_oracle,
    comparison_hypotheses,
    linear_closed_form_oracle,
    mean_field_closed_form,
    run_comparison,
    run_conditional_comparison,
    run_converse_comparison,
)

PASS, FAIL, UNVERIFIED, ERROR = "pass", "fail", "hypothesis-unverified", "error"
EXIT_CODES = {PASS: 0, FAIL: 1, ERROR: 1, UNVERIFIED: 3}
RATE_WINDOW = (-2.6, -1.4)


@dataclass
class Table:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *row):
        self.rows.append(row)

    def to_csv(self, header: str) -> str:
        buf = io.StringIO()
        buf.write(header + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_cell(x) for x in row])
        return buf.getvalue()


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else repr(v)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


@dataclass
class ReportBundle:
    metadata: dict
    tables: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    error: dict | None = None

    @property
    def status(self) -> str:
        if self.error is not None:
            return ERROR
        v = set(self.verdicts.values())
        if FAIL in v:
            return FAIL
        if UNVERIFIED in v:
            return UNVERIFIED
        return PASS

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def record(self) -> dict:
        return _jsonable(dict(metadata=self.metadata, status=self.status, verdicts=self.verdicts,
                              summary=self.summary, error=self.error,
                              tables=sorted(f"{k}.csv" for k in self.tables)))

    def write(self, outdir) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        header = f"# config_sha256={self.metadata['config_sha256']}"
        paths = []
        for name, table in sorted(self.tables.items()):
            p = out / f"{name}.csv"
            p.write_text(table.to_csv(header), encoding="utf-8")
            paths.append(p)
        p = out / "summary.json"
        p.write_text(json.dumps(self.record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths.append(p)
        return paths


def _metadata(cfg: ExperimentConfig) -> dict:
    return dict(task=cfg.task, config_sha256=cfg.sha256, seed=cfg.seed, backend=cfg.backend,
                versions=dict(cebsde=__version__, numpy=np.__version__,
                              python=platform.python_version()))


# ---------------------------------------------------------------------------
# tasks


def _solve(cfg, bundle):
    be = cfg.build_backend()
    info = cfg.build_info(be)
    f = cfg.build_driver()
    sol = solve_cebsde(be, info, f, cfg.build_terminal(), cfg.build_solver_config())
    n, d = f.n, be.d
    ycols = [f"Y{j}" for j in range(n)]
    zcols = [f"Z{j}{k}" for j in range(n) for k in range(d)]
    kcols = [f"K{j}" for j in range(n)]
    steps = Table(("task", "step", "t", *[f"E_{c}" for c in ycols + zcols + kcols]))
    for i in range(be.N + 1):
        ey = be.expectation(sol.Y[i], i)
        ez = be.expectation(sol.Z[i], i).ravel() if i < be.N else np.full(n * d, np.nan)
        ek = be.expectation(sol.K[i], i)
        steps.add(cfg.task, i, be.grid.t(i), *ey, *ez, *ek)
    bundle.tables["steps"] = steps
    if be.kind == "tree":
        nodes = Table(("task", "step", "node", "t", *ycols, *zcols, *kcols))
        for i in range(be.N + 1):
            for node in range(be.size(i)):
                z = sol.Z[i][node].ravel() if i < be.N else np.full(n * d, np.nan)
                nodes.add(cfg.task, i, node, be.grid.t(i), *sol.Y[i][node], *z, *sol.K[i][node])
        bundle.tables["solution"] = nodes
        bundle.summary["scheme_residual"] = scheme_residual(sol, f)
    res = Table(("task", "iteration", "residual"))
    for r in sol.residuals:
        res.add(cfg.task, r.iteration, r.residual)
    bundle.tables["residuals"] = res
    bundle.summary.update(Y0=sol.Y0, Z0=sol.Z0.ravel(), outer_iterations=sol.outer_iterations)
    bundle.verdicts["converged"] = PASS


def _sweep(cfg, be, info, f, xi, barrier):
    p = cfg.penalization
    return run_penalization_sweep(be, info, f, xi, barrier, cfg.build_schedule(),
                                  cfg.build_solver_config(), method=p.get("method", "resolvent"),
                                  check_terminal=p.get("check_terminal", True))


def _penalize(cfg, bundle):
    be = cfg.build_backend()
    info = cfg.build_info(be)
    rep = _sweep(cfg, be, info, cfg.build_driver(), cfg.build_terminal(), cfg.build_barrier())
    t = Table(("task", "level", "supNeg", "normY", "normZ", "normK", "gapY", "gapZ", "gapK", "Y0"))
    for r in rep.rows:
        t.add(cfg.task, r.n, r.sup_neg, r.norm_y, r.norm_z, r.norm_k, r.gap_y, r.gap_z, r.gap_k, r.y0)
    bundle.tables["sweep"] = t
    audit = audit_reflected_solution(rep.limit, rep.barrier)
    a = Table(("task", "check", "passed", "margin", "detail"))
    for name, c in audit.checks.items():
        a.add(cfg.task, name, c.passed, c.margin, c.detail)
    bundle.tables["audit"] = a
    bundle.summary.update(rep.summary())
    lo, hi = RATE_WINDOW
    ok = rep.slope is not None and lo <= rep.slope <= hi
    bundle.verdicts["rate"] = PASS if ok else FAIL
    bundle.verdicts["audit"] = PASS if audit.passed else FAIL
    if rep.plateau_only:
        bundle.summary["note"] = "every level is at the discretization floor; no slope fitted"


def _instance(cfg, be, info) -> ComparisonInstance:
    return ComparisonInstance(cfg.build_driver(1), cfg.build_driver(2), cfg.build_terminal(1),
                              cfg.build_terminal(2), info, be, name=cfg.task)


def _compare(cfg, bundle):
    be = cfg.build_backend()
    inst = _instance(cfg, be, cfg.build_info(be))
    c = cfg.compare
    res = run_comparison(inst, cfg.build_solver_config(), tol=c.get("tol", 1e-9),
                         samples=c.get("samples", 10_000), seed=cfg.seed)
    v = Table(("task", "step", "node", "j", "excess"))
    for step, node, j, excess in res.violations:
        v.add(cfg.task, step, node, j, excess)
    bundle.tables["violations"] = v
    m = Table(("task", "step", "max_Y1_minus_Y2"))
    for i in range(be.N + 1):
        m.add(cfg.task, i, float((res.sol1.Y[i] - res.sol2.Y[i]).max()))
    bundle.tables["margins"] = m
    bundle.summary.update(violations=len(res.violations), max_excess=res.max_excess,
                          hypothesis_notes=res.hypotheses.notes,
                          h1_counterexamples=len(res.hypotheses.h1))
    if not res.hypotheses_verified:
        bundle.verdicts["comparison"] = UNVERIFIED
    else:
        bundle.verdicts["comparison"] = PASS if res.passed else FAIL


def _converse(cfg, bundle):
    be = cfg.build_backend()
    inst = _instance(cfg, be, cfg.build_info(be))
    c = cfg.compare
    hyp = comparison_hypotheses(inst, samples=c.get("samples", 10_000), seed=cfg.seed)
    res = run_converse_comparison(inst, cfg.build_solver_config(), t_star=c.get("t_star"),
                                  eq_tol=c.get("eq_tol", 1e-10), prop_tol=c.get("prop_tol", 1e-8))
    t = Table(("task", "step", "max_abs_Y1_minus_Y2"))
    for i in range(be.N + 1):
        t.add(cfg.task, i, float(np.abs(res.sol1.Y[i] - res.sol2.Y[i]).max()))
    bundle.tables["deviations"] = t
    bundle.summary.update(t_star=res.t_star, max_deviation=res.max_deviation,
                          equal_steps=res.equal_steps, hypothesis_notes=hyp.notes)
    if hyp.h1 or hyp.h2 or hyp.notes:
        bundle.verdicts["converse"] = UNVERIFIED
    else:
        bundle.verdicts["converse"] = PASS if res.passed else FAIL


def _conditional(cfg, bundle):
    be = cfg.build_backend()
    info = cfg.build_info(be)
    inst = _instance(cfg, be, info)
    res = run_conditional_comparison(inst, cfg.build_solver_config(),
                                     tol=cfg.compare.get("tol", 1e-9))
    t = Table(("task", "condition", "holds", "margin"))
    for name, (ok, margin) in res.conditions.items():
        t.add(cfg.task, name, ok, margin)
    bundle.tables["conditions"] = t
    m = Table(("task", "step", "max_EY1_minus_EY2"))
    for i in range(be.N + 1):
        diff = be.expect_g(info, i, res.sol1.Y[i]) - be.expect_g(info, i, res.sol2.Y[i])
        m.add(cfg.task, i, float(diff.max()))
    bundle.tables["margins"] = m
    bundle.summary.update(claim_asserted=res.claim_asserted, failed_conditions=res.failed_conditions,
                          violations=len(res.violations), margin=res.margin)
    if not res.claim_asserted:
        bundle.verdicts["conditional"] = UNVERIFIED
    else:
        bundle.verdicts["conditional"] = PASS if res.passed else FAIL


def _linear_params(f):
    p = f.params
    if f.name == "zero":
        return 0.0, 0.0, 0.0
    A, C, g = np.atleast_2d(p.get("A", 0.0)), p.get("C", 0.0), p.get("g", 0.0)
    if f.n != 1 or np.any(C) or np.any(g) or "A" not in p:
        raise CEBSDEError("the linear oracle needs a scalar driver a y + b.z + c")
    return float(A[0, 0]), np.asarray(p["b"])[0], float(np.asarray(p["c"])[0])


def _oracle(cfg, bundle):
    be = cfg.build_backend()
    info = cfg.build_info(be)
    f, xi = cfg.build_driver(), cfg.build_terminal()
    config = cfg.build_solver_config()
    kind = cfg.oracle["kind"]
    dt = be.grid.dt
    if kind == "linear":
        if cfg.subfiltration.family != "discrete" and not f.independent_of_primes:
            raise CEBSDEError("the linear oracle needs G = F or a driver without y', z'")
        a, b, c = _linear_params(f)
        ref = linear_closed_form_oracle(a, b, c, xi, be)
        Y = solve_cebsde(be, info, f, xi, config).Y
        tol = cfg.oracle.get("tol", dt * (1.0 + abs(a) + float(np.abs(b).sum()) + abs(c)))
    elif kind == "mean-field":
        if cfg.subfiltration.family != "trivial" or cfg.driver.family != "mean-field":
            raise CEBSDEError("the mean-field oracle needs trivial G and the mean-field family")
        alpha = float(cfg.driver.params.get("alpha", 1.0))
        if cfg.driver.params.get("a", 0.0) or cfg.driver.params.get("c", 0.0):
            raise CEBSDEError("the mean-field oracle needs a = c = 0")
        ref = mean_field_closed_form(be, xi, alpha)
        Y = solve_cebsde(be, info, f, xi, config).Y
        tol = cfg.oracle.get("tol", 5.0 * dt)
    else:
        if cfg.subfiltration.family != "discrete":
            raise CEBSDEError("the reflected oracle needs G = F")
        barrier = cfg.build_barrier()
        ref = classical_reflected_oracle(be, f, xi, barrier)
        rep = _sweep(cfg, be, info, f, xi, barrier)
        Y = rep.limit.Y
        tol = cfg.oracle.get("tol", max(2.0 * rep.c_hat / rep.rows[-1].n, 10.0 * dt))
        bundle.summary.update(c_hat=rep.c_hat)
    t = Table(("task", "step", "node", "solver", "oracle", "abs_err"))
    worst = 0.0
    for i in range(be.N + 1):
        for node in range(be.size(i)):
            s, o = float(Y[i][node, 0]), float(ref.Y[i][node, 0])
            worst = max(worst, abs(s - o))
            t.add(cfg.task, i, node, s, o, abs(s - o))
    bundle.tables["oracle"] = t
    bundle.summary.update(oracle=ref.name, max_abs_err=worst, tol=tol, Y0_solver=float(Y[0][0, 0]),
                          Y0_oracle=ref.Y0)
    bundle.verdicts["oracle"] = PASS if worst <= tol else FAIL


def _apriori(cfg, bundle):
    be = cfg.build_backend()
    info = cfg.build_info(be)
    f, xi = cfg.build_driver(), cfg.build_terminal()
    config = cfg.build_solver_config()
    eps_list = cfg.apriori.get("epsilons", [1e-1, 1e-2, 1e-3])
    factor = cfg.apriori.get("factor", 3.0)
    t = Table(("task", "eps", "lhs", "rhs", "ratio", "lhs_over_eps2"))
    scaled = []
    for eps in eps_list:
        bump = lambda b, e=eps: e * (1.0 + 0.5 * b.walk(b.N)[:, 0])
        rep = apriori_probe(be, info, (xi, f), (shifted_terminal(xi, bump), constant_shift(f, eps)),
                            config)
        scaled.append(rep.lhs / eps**2)
        t.add(cfg.task, eps, rep.lhs, rep.rhs, rep.ratio, rep.lhs / eps**2)
    bundle.tables["apriori"] = t
    spread = max(scaled) / min(scaled) if min(scaled) > 0 else float("inf")
    bundle.summary.update(spread=spread, factor=factor)
    bundle.verdicts["stability"] = PASS if spread <= factor else FAIL


TASK_RUNNERS = {
    "solve": _solve,
    "penalize-sweep": _penalize,
    "compare": _compare,
    "converse": _converse,
    "conditional-compare": _conditional,
    "oracle-check": _oracle,
    "apriori-probe": _apriori,
}


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Run the configured task; errors become a structured record, not an exception."""
    bundle = ReportBundle(_metadata(cfg))
    try:
        TASK_RUNNERS[cfg.task](cfg, bundle)
    except (CEBSDEError, ArithmeticError, ValueError) as exc:
        bundle.tables.clear()
        bundle.verdicts.clear()
        bundle.error = dict(type=type(exc).__name__, message=str(exc))
    return bundle
