"""Experiment configuration: TOML text in, validated :class:`ExperimentConfig` out.

A minimal configuration::

    task = "solve"

    [grid]
    T = 1.0
    N = 2

    [driver]
    family = "zero"

    [terminal]
    family = "walk"

Every problem found during validation is collected and reported together,
keyed by its dotted path.
"""

from __future__ import annotations

import hashlib
import re
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .drivers import (
    DriverSpec,
    TerminalSpec,
    abs_terminal,
    constant_barrier,
    constant_shift,
    constant_terminal,
    ito_barrier,
    linear_driver,
    max_terminal,
    mean_field_driver,
    scalar_linear_driver,
    smooth_driver,
    terminal_from_walk,
    threshold_driver,
    walk_terminal,
    zero_driver,
)
from .errors import ConfigParseError, ConfigValidationError
from .montecarlo import InfoSelector, MonteCarloBackend, RegressionEstimator, sample_paths
from .penalization import PenaltySchedule
from .solver import SolverConfig
from .tree import MAX_LOG2_LEAVES, Partition, TimeGrid, build_tree

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASKS = ("solve", "penalize-sweep", "compare", "converse", "conditional-compare",
         "oracle-check", "apriori-probe")
BACKENDS = ("tree", "montecarlo")
SUBFILTRATIONS = ("discrete", "trivial", "delayed", "coordinates")
ORACLES = ("linear", "mean-field", "reflected")

# family -> allowed numeric parameters
DRIVER_FAMILIES = {
    "zero": (),
    "linear": ("A", "b", "C", "g", "c"),
    "scalar-linear": ("a", "b", "c", "alpha", "gamma"),
    "mean-field": ("alpha", "a", "c"),
    "smooth": ("a", "kappa", "alpha", "gamma", "c"),
    "threshold": ("kappa", "theta"),
}
DRIVER_FLAGS = ("lam", "h2_constant", "shift")
TERMINAL_FAMILIES = {
    "walk": ("component", "scale", "shift"),
    "max": ("floor", "component"),
    "abs": ("component",),
    "constant": ("value",),
    "quadratic": ("linear", "quadratic", "shift"),
}
BARRIER_FAMILIES = {
    "constant": ("level",),
    "ito": ("S0", "b", "sigma"),
}
SOLVER_KEYS = ("outer_tol", "inner_tol", "max_outer", "max_inner", "beta", "scheme", "damping",
               "initial_guess", "divergence_patience")

_LOCATION = re.compile(r"\s*\(at line \d+, column \d+\)\s*$")


@dataclass(frozen=True)
class ComponentSpec:
    """A named family with its parameters, as read from the file."""

    family: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    task: str
    T: float
    N: int
    n: int = 1
    d: int = 1
    backend: str = "tree"
    M: int = 10_000
    seed: int = 0
    degree: int = 3
    ridge: float = 1e-10
    subfiltration: ComponentSpec = ComponentSpec("discrete")
    driver: ComponentSpec = ComponentSpec("zero")
    driver2: ComponentSpec | None = None
    terminal: ComponentSpec = ComponentSpec("walk")
    terminal2: ComponentSpec | None = None
    barrier: ComponentSpec | None = None
    solver: dict = field(default_factory=dict)
    penalization: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    apriori: dict = field(default_factory=dict)
    output_dir: str = "results"
    text: str = ""

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    # builders -----------------------------------------------------------

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)

    def build_backend(self):
        if self.backend == "tree":
            return build_tree(self.grid(), self.d)
        ens = sample_paths(self.grid(), self.d, self.M, self.seed)
        return MonteCarloBackend(ens, RegressionEstimator(degree=self.degree, ridge=self.ridge))

    def build_info(self, backend):
        kind, p = self.subfiltration.family, self.subfiltration.params
        if self.backend == "montecarlo":
            mode = {"discrete": "full", "trivial": "trivial"}.get(kind, kind)
            sel = InfoSelector(mode, k=int(p.get("k", 0)), delay=int(p.get("delay", 0)))
            sel.validate(self.d, self.N)
            return sel
        if kind == "discrete":
            return Partition.discrete(backend)
        if kind == "trivial":
            return Partition.trivial(backend)
        if kind == "delayed":
            return Partition.delayed(backend, int(p.get("delay", 1)))
        return Partition.coordinates(backend, int(p.get("k", 1)))

    def build_driver(self, which: int = 1) -> DriverSpec:
        spec = self.driver if which == 1 or self.driver2 is None else self.driver2
        return make_driver(spec, self.n, self.d)

    def build_terminal(self, which: int = 1) -> TerminalSpec:
        spec = self.terminal if which == 1 or self.terminal2 is None else self.terminal2
        return make_terminal(spec, self.n)

    def build_barrier(self):
        return make_barrier(self.barrier) if self.barrier is not None else None

    def build_solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def build_schedule(self) -> PenaltySchedule:
        p = self.penalization
        if "levels" in p:
            return PenaltySchedule(tuple(p["levels"]))
        return PenaltySchedule.geometric(int(p.get("n0", 1)), int(p.get("K", 10)))


def make_driver(spec: ComponentSpec, n: int, d: int) -> DriverSpec:
    p = {k: v for k, v in spec.params.items() if k not in DRIVER_FLAGS}
    fam = spec.family
    if fam == "zero":
        f = zero_driver(n, d)
    elif fam == "linear":
        f = linear_driver(n, d, **{k: np.asarray(v, dtype=float) for k, v in p.items()})
    elif fam == "scalar-linear":
        f = scalar_linear_driver(d=d, **p)
    elif fam == "mean-field":
        f = mean_field_driver(d=d, **p)
    elif fam == "smooth":
        f = smooth_driver(n, d, **p)
    else:
        f = threshold_driver(d=d, **p)
    if "shift" in spec.params:
        f = constant_shift(f, float(spec.params["shift"]))
    flags = {k: float(spec.params[k]) for k in ("lam", "h2_constant") if k in spec.params}
    if flags:
        f = replace(f, **flags)
    return f


def _quadratic(linear, quadratic, shift):
    lin = np.asarray(linear, dtype=float)
    quad = np.asarray(quadratic, dtype=float)

    def g(W):
        return W[:, :lin.size] @ lin + (W[:, :quad.size] ** 2) @ quad + shift

    return g


def make_terminal(spec: ComponentSpec, n: int) -> TerminalSpec:
    p, fam = spec.params, spec.family
    if fam == "walk":
        return walk_terminal(int(p.get("component", 0)), float(p.get("scale", 1.0)),
                             float(p.get("shift", 0.0)))
    if fam == "max":
        return max_terminal(float(p.get("floor", 0.0)), int(p.get("component", 0)))
    if fam == "abs":
        return abs_terminal(int(p.get("component", 0)))
    if fam == "constant":
        return constant_terminal(p.get("value", 0.0), n)
    return terminal_from_walk(_quadratic(p.get("linear", [1.0]), p.get("quadratic", [0.0]),
                                         float(p.get("shift", 0.0))), 1, "quadratic")


def make_barrier(spec: ComponentSpec):
    p = spec.params
    if spec.family == "constant":
        return constant_barrier(float(p.get("level", 0.0)))
    return ito_barrier(float(p.get("S0", 0.0)), p.get("b", 0.0), p.get("sigma", 0.0))


# ---------------------------------------------------------------------------
# parsing and validation


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_seed(x) -> bool:
    return _is_int(x) and 0 <= x < 2**64


def _numeric_tree(x) -> bool:
    if isinstance(x, list):
        return all(_numeric_tree(v) for v in x)
    return _is_num(x)


def _component(raw, key: str, families: dict, problems: list, extra=()) -> ComponentSpec | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        problems.append((key, "must be a table"))
        return None
    fam = raw.get("family")
    if fam is None:
        problems.append((f"{key}.family", "missing"))
        return None
    if fam not in families:
        problems.append((f"{key}.family", f"unknown family {fam!r}; expected one of {sorted(families)}"))
        return None
    params = {}
    for k, v in raw.items():
        if k == "family":
            continue
        if k not in families[fam] and k not in extra:
            problems.append((f"{key}.{k}", f"not a parameter of family {fam!r}"))
        elif not _numeric_tree(v):
            problems.append((f"{key}.{k}", "must be a number or an array of numbers"))
        else:
            params[k] = v
    return ComponentSpec(fam, params)


def _take(table: dict, key: str, prefix: str, check, default, problems: list, what: str):
    if key not in table:
        return default
    v = table[key]
    if not check(v):
        problems.append((f"{prefix}{key}", f"must be {what}, got {v!r}"))
        return default
    return v


def _unknown(table: dict, allowed, prefix: str, problems: list):
    for k in table:
        if k not in allowed:
            problems.append((f"{prefix}{k}", "unknown key"))


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment description.

    Raises
    ------
    ConfigParseError
        Malformed TOML, with line and column.
    ConfigValidationError
        Every semantic problem, each with its key path.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = _LOCATION.sub("", exc.args[0] if exc.args else str(exc))
        raise ConfigParseError(msg, getattr(exc, "lineno", None), getattr(exc, "colno", None)) from exc

    problems: list = []
    top = ("task", "seed", "backend", "grid", "dimensions", "subfiltration", "driver", "driver2",
           "terminal", "terminal2", "barrier", "solver", "penalization", "compare", "oracle",
           "apriori", "output")
    _unknown(raw, top, "", problems)

    task = raw.get("task")
    if task is None:
        problems.append(("task", "missing"))
    elif task not in TASKS:
        problems.append(("task", f"unknown task {task!r}; expected one of {list(TASKS)}"))
    seed = _take(raw, "seed", "", _is_seed, 0, problems, "an integer in [0, 2**64)")

    def table(name):
        t = raw.get(name, {})
        if not isinstance(t, dict):
            problems.append((name, "must be a table"))
            return {}
        return t

    be = table("backend")
    _unknown(be, ("kind", "M", "seed", "degree", "ridge"), "backend.", problems)
    kind = be.get("kind", "tree")
    if kind not in BACKENDS:
        problems.append(("backend.kind", f"unknown backend {kind!r}; expected one of {list(BACKENDS)}"))
    M = _take(be, "M", "backend.", lambda v: _is_int(v) and v >= 2, 10_000, problems, "an integer >= 2")
    seed = _take(be, "seed", "backend.", _is_seed, seed, problems, "an integer in [0, 2**64)")
    degree = _take(be, "degree", "backend.", lambda v: _is_int(v) and 0 <= v <= 8, 3, problems,
                   "an integer in [0, 8]")
    ridge = _take(be, "ridge", "backend.", lambda v: _is_num(v) and v >= 0, 1e-10, problems,
                  "a number >= 0")

    grid = table("grid")
    _unknown(grid, ("T", "N"), "grid.", problems)
    if "N" not in grid:
        problems.append(("grid.N", "missing"))
    T = _take(grid, "T", "grid.", lambda v: _is_num(v) and v > 0, 1.0, problems, "a number > 0")
    N = _take(grid, "N", "grid.", lambda v: _is_int(v) and v >= 1, 1, problems, "an integer >= 1")

    dims = table("dimensions")
    _unknown(dims, ("n", "d"), "dimensions.", problems)
    n = _take(dims, "n", "dimensions.", lambda v: _is_int(v) and v >= 1, 1, problems, "an integer >= 1")
    d = _take(dims, "d", "dimensions.", lambda v: _is_int(v) and v >= 1, 1, problems, "an integer >= 1")
    if kind == "tree" and N * d > MAX_LOG2_LEAVES:
        problems.append(("grid.N", f"size guard: N*d = {N * d} exceeds {MAX_LOG2_LEAVES} on the tree backend"))

    sub = table("subfiltration")
    _unknown(sub, ("kind", "k", "delay"), "subfiltration.", problems)
    skind = sub.get("kind", "discrete")
    if skind not in SUBFILTRATIONS:
        problems.append(("subfiltration.kind", f"unknown subfiltration {skind!r}; expected one of {list(SUBFILTRATIONS)}"))
    sparams = {}
    if skind == "coordinates":
        k = _take(sub, "k", "subfiltration.", lambda v: _is_int(v) and 0 <= v, 1, problems, "an integer >= 0")
        if k > d:
            problems.append(("subfiltration.k", f"k = {k} exceeds d = {d}"))
        sparams["k"] = k
    if skind == "delayed":
        delay = _take(sub, "delay", "subfiltration.", lambda v: _is_int(v) and v >= 0, 1, problems,
                      "an integer >= 0")
        if delay > N:
            problems.append(("subfiltration.delay", f"delay = {delay} exceeds N = {N}"))
        sparams["delay"] = delay

    if "driver" not in raw:
        problems.append(("driver", "missing"))
    driver = _component(raw.get("driver"), "driver", DRIVER_FAMILIES, problems, DRIVER_FLAGS)
    driver2 = _component(raw.get("driver2"), "driver2", DRIVER_FAMILIES, problems, DRIVER_FLAGS)
    if "terminal" not in raw:
        problems.append(("terminal", "missing"))
    terminal = _component(raw.get("terminal"), "terminal", TERMINAL_FAMILIES, problems)
    terminal2 = _component(raw.get("terminal2"), "terminal2", TERMINAL_FAMILIES, problems)
    barrier = _component(raw.get("barrier"), "barrier", BARRIER_FAMILIES, problems)

    for key, spec in (("driver", driver), ("driver2", driver2)):
        if spec is None:
            continue
        try:
            f = make_driver(spec, n, d)
        except (TypeError, ValueError) as exc:
            problems.append((key, f"cannot build driver: {exc}"))
            continue
        if f.n != n:
            problems.append((f"{key}.family", f"family {spec.family!r} is scalar but n = {n}"))
    for key, spec in (("terminal", terminal), ("terminal2", terminal2)):
        if spec is None:
            continue
        comp = spec.params.get("component", 0)
        if spec.family in ("walk", "max", "abs") and not (_is_int(comp) and 0 <= comp < d):
            problems.append((f"{key}.component", f"must be an integer in [0, {d})"))
        for k in ("linear", "quadratic"):
            v = spec.params.get(k)
            if v is not None and (not isinstance(v, list) or not 1 <= len(v) <= d):
                problems.append((f"{key}.{k}", f"must be a list of 1 to {d} numbers"))
        if spec.family != "constant" and n != 1:
            problems.append((f"{key}.family", f"family {spec.family!r} is scalar but n = {n}"))

    solver = table("solver")
    _unknown(solver, SOLVER_KEYS, "solver.", problems)
    try:
        SolverConfig(**{k: v for k, v in solver.items() if k in SOLVER_KEYS})
    except (TypeError, ValueError) as exc:
        problems.append(("solver", str(exc)))

    pen = table("penalization")
    _unknown(pen, ("levels", "n0", "K", "method", "check_terminal"), "penalization.", problems)
    if "levels" in pen:
        try:
            PenaltySchedule(tuple(pen["levels"]))
        except (TypeError, ValueError) as exc:
            problems.append(("penalization.levels", str(exc)))
    _take(pen, "n0", "penalization.", lambda v: _is_int(v) and v >= 1, 1, problems, "an integer >= 1")
    _take(pen, "K", "penalization.", lambda v: _is_int(v) and 0 <= v <= 30, 10, problems,
          "an integer in [0, 30]")
    _take(pen, "method", "penalization.", lambda v: v in ("resolvent", "fixed_point"), "resolvent",
          problems, "'resolvent' or 'fixed_point'")
    _take(pen, "check_terminal", "penalization.", lambda v: isinstance(v, bool), True, problems,
          "a boolean")

    cmp_ = table("compare")
    _unknown(cmp_, ("tol", "samples", "t_star", "eq_tol", "prop_tol"), "compare.", problems)
    for k in ("tol", "eq_tol", "prop_tol"):
        _take(cmp_, k, "compare.", lambda v: _is_num(v) and v >= 0, None, problems, "a number >= 0")
    _take(cmp_, "samples", "compare.", lambda v: _is_int(v) and v >= 1, None, problems, "an integer >= 1")
    _take(cmp_, "t_star", "compare.", lambda v: _is_int(v) and 0 <= v <= N, None, problems,
          f"an integer in [0, {N}]")

    orc = table("oracle")
    _unknown(orc, ("kind", "tol"), "oracle.", problems)
    okind = orc.get("kind")
    if task == "oracle-check" and okind is None:
        problems.append(("oracle.kind", "missing"))
    elif okind is not None and okind not in ORACLES:
        problems.append(("oracle.kind", f"unknown oracle {okind!r}; expected one of {list(ORACLES)}"))
    _take(orc, "tol", "oracle.", lambda v: _is_num(v) and v > 0, None, problems, "a number > 0")

    apr = table("apriori")
    _unknown(apr, ("epsilons", "factor"), "apriori.", problems)
    _take(apr, "epsilons", "apriori.",
          lambda v: isinstance(v, list) and len(v) >= 2 and all(_is_num(x) and x > 0 for x in v),
          None, problems, "a list of at least two positive numbers")
    _take(apr, "factor", "apriori.", lambda v: _is_num(v) and v >= 1, None, problems, "a number >= 1")

    out = table("output")
    _unknown(out, ("dir",), "output.", problems)
    outdir = _take(out, "dir", "output.", lambda v: isinstance(v, str) and v, "results", problems,
                   "a non-empty string")

    # task-specific requirements
    if task in ("penalize-sweep",) or (task == "oracle-check" and okind == "reflected"):
        if barrier is None:
            problems.append(("barrier", f"required by task {task!r}"))
        if n != 1:
            problems.append(("dimensions.n", "the reflected problem is scalar"))
    if task in ("conditional-compare",) and n != 1:
        problems.append(("dimensions.n", "conditional comparison is scalar"))
    if task in ("compare", "converse", "conditional-compare") and driver2 is None and terminal2 is None:
        problems.append(("driver2", f"task {task!r} needs driver2 and/or terminal2"))
    if task == "oracle-check" and kind != "tree":
        problems.append(("backend.kind", "oracles run on the tree backend"))

    if problems:
        raise ConfigValidationError(problems)
    return ExperimentConfig(
        task=task, T=float(T), N=N, n=n, d=d, backend=kind, M=M, seed=seed, degree=degree,
        ridge=float(ridge), subfiltration=ComponentSpec(skind, sparams), driver=driver,
        driver2=driver2, terminal=terminal, terminal2=terminal2, barrier=barrier,
        solver={k: v for k, v in solver.items()}, penalization=dict(pen), compare=dict(cmp_),
        oracle=dict(orc), apriori=dict(apr), output_dir=outdir, text=text,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigParseError(f"config is not valid UTF-8: {exc.reason}") from exc
    return parse_config(text)
