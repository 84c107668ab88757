"""Named test instances shared by the test-suite, the acceptance run and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivers import (
    DriverSpec,
    TerminalSpec,
    constant_barrier,
    constant_shift,
    increasing_pair,
    ito_barrier,
    linear_driver,
    max_terminal,
    mean_field_driver,
    scalar_linear_driver,
    shifted_driver,
    smooth_driver,
    threshold_driver,
    walk_terminal,
    zero_driver,
)
from .tree import Partition, ScenarioTree, TimeGrid, build_tree
from .verification import ComparisonInstance

COMPARISON_FAMILIES = ("linear-1d", "increasing-2d", "smooth-1d")
EXPECTED_VIOLATION_FAMILIES = ("decreasing-yprime", "zprime-pair")
CONVERSE_FAMILIES = ("identical", "terminal-only", "threshold", "time-switch")
CONDITIONAL_FAMILIES = ("zero", "mean-field-gap", "conditional-only", "decreasing-coefficient")


def first_step_up(tree: ScenarioTree) -> np.ndarray:
    return (tree.terminal_walk(1)[:, 0] > 0).astype(float)


def _random_info(tree: ScenarioTree, rng) -> Partition:
    options = [Partition.trivial(tree), Partition.discrete(tree), Partition.delayed(tree, 1)]
    if tree.d > 1:
        options.append(Partition.coordinates(tree, 1))
    return options[int(rng.integers(len(options)))]


def comparison_family(name: str, seed: int) -> ComparisonInstance:
    """Random instance satisfying the multidimensional comparison hypotheses."""
    rng = np.random.default_rng(seed)
    if name == "linear-1d":
        tree = build_tree(TimeGrid(1.0, 3), 1)
        f1, f2 = increasing_pair(1, 1, rng, scale=0.8)
        n = 1
    elif name == "increasing-2d":
        d = int(rng.integers(1, 3))
        tree = build_tree(TimeGrid(1.0, 3), d)
        f1, f2 = increasing_pair(2, d, rng, scale=0.4)
        n = 2
    elif name == "smooth-1d":
        tree = build_tree(TimeGrid(1.0, 3), 1)
        f1 = smooth_driver(1, 1, a=rng.uniform(-1, 1), kappa=rng.uniform(-0.5, 0.5),
                           alpha=rng.uniform(0, 1), c=rng.uniform(-1, 1))
        f2 = constant_shift(f1, rng.uniform(0, 0.5))
        n = 1
    else:
        raise KeyError(f"unknown comparison family {name!r}")
    leaves = tree.size(tree.N)
    xi1 = rng.normal(size=(leaves, n))
    xi2 = xi1 + np.abs(rng.normal(size=(leaves, n))) * (rng.random((leaves, n)) < 0.6)
    K1 = K2 = None
    if rng.random() < 0.3:
        rate = rng.uniform(0, 1, n)
        K1 = [np.zeros((tree.size(i), n)) for i in range(tree.N + 1)]
        K2 = [np.tile(rate * tree.grid.t(i), (tree.size(i), 1)) for i in range(tree.N + 1)]
    return ComparisonInstance(f1, f2, xi1, xi2, _random_info(tree, rng), tree, K1, K2,
                              name=f"{name}/{seed}")


def expected_violation_family(name: str, seed: int = 0) -> ComparisonInstance:
    """Pairs with ordered data whose solutions are not ordered.

    Both break the structure the comparison result needs: one driver is
    decreasing in ``y'``, the other pair depends on ``z'`` on both sides.
    """
    rng = np.random.default_rng(seed)
    tree = build_tree(TimeGrid(1.0, 6), 1)
    info = Partition.trivial(tree)
    kappa = rng.uniform(1.5, 3.0)
    xi1 = tree.walk(tree.N)[:, :1] * rng.uniform(0.5, 1.5)
    if name == "decreasing-yprime":
        f = linear_driver(1, 1, C=-kappa, name="decreasing-yprime")
        xi2 = xi1 + first_step_up(tree)[:, None]
    elif name == "zprime-pair":
        f = scalar_linear_driver(gamma=kappa)
        xi2 = xi1 + (tree.walk(tree.N)[:, :1] < 0)
    else:
        raise KeyError(f"unknown expected-violation family {name!r}")
    return ComparisonInstance(f, f, xi1, xi2, info, tree, name=f"{name}/{seed}")


def converse_family(name: str, seed: int = 0) -> ComparisonInstance:
    rng = np.random.default_rng(seed)
    tree = build_tree(TimeGrid(1.0, 4), 1)
    info = [Partition.trivial(tree), Partition.discrete(tree), Partition.delayed(tree, 1)][seed % 3]
    xi = rng.normal(size=(tree.size(tree.N), 1))
    if name == "identical":
        f1 = f2 = smooth_driver(1, 1, a=0.5, kappa=0.3, alpha=0.5, c=0.1)
    elif name == "terminal-only":
        f1 = zero_driver()
        f2 = constant_shift(f1, 1.0)
    elif name == "threshold":
        # Y stays far above theta, so the drivers agree along both solutions
        f1 = zero_driver()
        f2 = threshold_driver(1.0, -50.0)
    elif name == "time-switch":
        f1 = scalar_linear_driver(a=0.3, alpha=0.4)
        switch = tree.grid.t(2)
        f2 = shifted_driver(f1, lambda t, y, z, yp, zp: np.full(np.shape(y), 0.5 * (t < switch)),
                            0.0, name="time-switch")
    else:
        raise KeyError(f"unknown converse family {name!r}")
    return ComparisonInstance(f1, f2, xi, xi.copy(), info, tree, name=f"{name}/{seed}")


def conditional_family(name: str, seed: int = 0, eps: float = 0.1) -> ComparisonInstance:
    rng = np.random.default_rng(seed)
    if name == "zero":
        tree = build_tree(TimeGrid(1.0, 3), 1)
        xi2 = rng.normal(size=(tree.size(3), 1))
        xi1 = xi2 - np.abs(rng.normal(size=xi2.shape))
        f = zero_driver()
        return ComparisonInstance(f, f, xi1, xi2, _random_info(tree, rng), tree, name="zero")
    if name == "mean-field-gap":
        tree = build_tree(TimeGrid(1.0, 8), 1)
        f = mean_field_driver(1.0)
        xi2 = tree.walk(8)[:, :1] + 1.0
        return ComparisonInstance(f, f, xi2 - eps, xi2, Partition.trivial(tree), tree,
                                  name="mean-field-gap")
    if name == "conditional-only":
        tree = build_tree(TimeGrid(1.0, 4), 2)
        f = mean_field_driver(0.5, d=2)
        W = tree.walk(4)
        xi2 = W[:, :1]
        eta = 0.5 * W[:, 1:2] - 0.1
        return ComparisonInstance(f, f, xi2 + eta, xi2, Partition.coordinates(tree, 1), tree,
                                  name="conditional-only")
    if name == "decreasing-coefficient":
        tree = build_tree(TimeGrid(1.0, 4), 1)
        f = mean_field_driver(-2.0)
        xi2 = tree.walk(4)[:, :1]
        xi1 = xi2 - first_step_up(tree)[:, None]
        return ComparisonInstance(f, f, xi1, xi2, Partition.trivial(tree), tree,
                                  name="decreasing-coefficient")
    raise KeyError(f"unknown conditional family {name!r}")


@dataclass
class ReflectedInstance:
    tree: ScenarioTree
    info: Partition
    f: DriverSpec
    xi: object
    barrier: object
    name: str = "custom"


def rate_instance(N: int, T: float = 2.0) -> ReflectedInstance:
    """Active barrier ``S_t = -t + W_t / 2`` with a driver bounded below at ``y = 0``.

    G lags F by one step; ``xi = S_T + (W_T)^+ / 4`` keeps the terminal
    constraint.
    """
    tree = build_tree(TimeGrid(T, N), 1)
    barrier = ito_barrier(0.0, b=-1.0, sigma=0.5)

    def xi(be):
        W = be.walk(be.N)[:, 0]
        return -be.grid.T + 0.5 * W + 0.25 * np.maximum(W, 0.0)

    f = smooth_driver(1, 1, kappa=0.5, c=-0.25)
    return ReflectedInstance(tree, Partition.delayed(tree, 1), f, TerminalSpec(xi, 1, "rate"),
                             barrier, name=f"rate/N={N}")


def dp_instance() -> ReflectedInstance:
    """Two-step walk with ``xi = max(W_T, 0.3)`` under the falling barrier ``0.6 - 0.3 t``."""
    tree = build_tree(TimeGrid(1.0, 2), 1)
    return ReflectedInstance(tree, Partition.discrete(tree), zero_driver(), max_terminal(0.3),
                             ito_barrier(0.6, b=-0.3), name="dp")


def flat_barrier_instance() -> ReflectedInstance:
    """``xi = W_T`` below the constant barrier 0.3 at some leaves; needs the terminal check off."""
    tree = build_tree(TimeGrid(1.0, 2), 1)
    return ReflectedInstance(tree, Partition.discrete(tree), zero_driver(), walk_terminal(),
                             constant_barrier(0.3), name="flat-barrier")


def far_barrier_instance(N: int = 3) -> ReflectedInstance:
    tree = build_tree(TimeGrid(1.0, N), 1)
    return ReflectedInstance(tree, Partition.delayed(tree, 1),
                             smooth_driver(1, 1, a=0.3, kappa=0.2, c=0.1), walk_terminal(),
                             constant_barrier(-1e6), name="far-barrier")


def mean_reflected_instance(N: int = 6) -> ReflectedInstance:
    """Trivial G with a deterministic barrier: the constraint bears on ``E[Y_t]``."""
    tree = build_tree(TimeGrid(1.0, N), 1)
    return ReflectedInstance(tree, Partition.trivial(tree), smooth_driver(1, 1, kappa=0.3, c=-0.5),
                             walk_terminal(), ito_barrier(0.5, b=-0.5), name="mean-reflected")
