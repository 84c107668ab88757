"""Finite scenario trees driven by a symmetric d-dimensional random walk.

Nodes at step ``i`` are stored in lexicographic sign-vector path order: the
children of node ``k`` are ``k * 2**d + c`` for ``c`` in ``range(2**d)``, and
bit ``d - 1 - j`` of ``c`` selects the sign of walk component ``j``
(0 -> +1, 1 -> -1).  Every array attached to step ``i`` therefore has
``2**(d*i)`` rows and lifting to a later step is ``np.repeat``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PartitionMismatch, SizeExceeded, StepOrder

MAX_LOG2_LEAVES = 24


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of steps must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def knots(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def t(self, i: int) -> float:
        return self.T if i == self.N else i * self.dt


def sign_vectors(d: int) -> np.ndarray:
    """Rows are the ``2**d`` sign vectors in canonical child order."""
    codes = np.arange(2**d)[:, None]
    shifts = np.arange(d - 1, -1, -1)[None, :]
    bits = (codes >> shifts) & 1
    return 1.0 - 2.0 * bits


class ScenarioTree:
    """Non-recombining tree carrying the walk ``W`` and node probabilities.

    The tree doubles as a solver backend: it exposes ``size``, ``increment``,
    ``expect_next``, ``expect_g``, ``lift`` and ``weights``.
    """

    kind = "tree"

    def __init__(self, grid: TimeGrid, d: int):
        if d < 1:
            raise ValueError("Brownian dimension must be >= 1")
        if grid.N * d > MAX_LOG2_LEAVES:
            raise SizeExceeded(
                f"N*d = {grid.N * d} exceeds {MAX_LOG2_LEAVES} (2**{grid.N * d} leaves)"
            )
        self.grid = grid
        self.d = d
        self.branching = 2**d
        self._signs = sign_vectors(d)
        self._step = self._signs * np.sqrt(grid.dt)
        walks = [np.zeros((1, d))]
        probs = [np.ones(1)]
        for _ in range(grid.N):
            prev = walks[-1]
            w = (np.repeat(prev, self.branching, axis=0)
                 + np.tile(self._step, (prev.shape[0], 1)))
            walks.append(w)
            probs.append(np.repeat(probs[-1], self.branching) / self.branching)
        for a in walks + probs:
            a.setflags(write=False)
        self._walks = walks
        self._probs = probs

    def __repr__(self):
        return f"ScenarioTree(T={self.grid.T}, N={self.grid.N}, d={self.d})"

    @property
    def N(self) -> int:
        return self.grid.N

    def size(self, i: int) -> int:
        return self.branching**i

    def walk(self, i: int) -> np.ndarray:
        """Walk values at step ``i``, shape ``(size(i), d)``."""
        return self._walks[i]

    def weights(self, i: int) -> np.ndarray:
        """Unconditional node probabilities at step ``i``."""
        return self._probs[i]

    def increment(self, i: int) -> np.ndarray:
        """Walk increment from step ``i`` into each step ``i+1`` node."""
        return np.tile(self._step, (self.size(i), 1))

    def lift(self, X: np.ndarray, i: int, j: int) -> np.ndarray:
        if j < i:
            raise StepOrder(f"cannot lift step {i} values back to step {j}")
        return np.repeat(np.asarray(X), self.branching ** (j - i), axis=0)

    def terminal_walk(self, i: int) -> np.ndarray:
        """Step-``i`` walk seen from every leaf, shape ``(size(N), d)``."""
        return self.lift(self._walks[i], i, self.N)

    def expect_next(self, i: int, X: np.ndarray) -> np.ndarray:
        return cond_exp_f(self, X, i + 1, i)

    def expect_g(self, info: "Partition", i: int, X: np.ndarray) -> np.ndarray:
        return cond_exp_g(self, info, X, i)

    def expectation(self, X: np.ndarray, i: int) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.tensordot(self._probs[i], X, axes=(0, 0))

    def check_info(self, info) -> None:
        if not isinstance(info, Partition):
            raise TypeError(f"tree backend needs a Partition, got {type(info).__name__}")
        if info.N != self.N or any(len(a) != self.size(i) for i, a in enumerate(info.atoms)):
            raise PartitionMismatch("partition does not match the tree's node layout")


def build_tree(grid: TimeGrid, d: int) -> ScenarioTree:
    return ScenarioTree(grid, d)


def cond_exp_f(tree: ScenarioTree, X: np.ndarray, j: int, i: int) -> np.ndarray:
    """E[X | F_i] for ``X`` living on step-``j`` nodes.

    Children of a node are equally likely, so the projection is the plain
    mean over the ``2**(d*(j-i))`` descendants.
    """
    if i > j:
        raise StepOrder(f"projection target step {i} is after source step {j}")
    X = np.asarray(X, dtype=float)
    if X.shape[0] != tree.size(j):
        raise ValueError(f"expected {tree.size(j)} rows for step {j}, got {X.shape[0]}")
    if i == j:
        return X.copy()
    block = tree.branching ** (j - i)
    return X.reshape((tree.size(i), block) + X.shape[1:]).mean(axis=1)


@dataclass(frozen=True)
class Partition:
    """Per-step atom ids describing a subfiltration G on a tree.

    ``atoms[i][k]`` is the atom of node ``k`` at step ``i``.  Ids are
    relabelled to ``0..m-1`` in order of first appearance.
    """

    atoms: tuple
    kind: str = "custom"
    counts: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        relabelled = []
        counts = []
        for a in self.atoms:
            a = np.asarray(a, dtype=np.int64).ravel()
            _, first, inv = np.unique(a, return_index=True, return_inverse=True)
            order = np.argsort(np.argsort(first))
            ids = order[inv].astype(np.int64)
            ids.setflags(write=False)
            relabelled.append(ids)
            counts.append(int(ids.max()) + 1 if ids.size else 0)
        object.__setattr__(self, "atoms", tuple(relabelled))
        object.__setattr__(self, "counts", tuple(counts))

    @property
    def N(self) -> int:
        return len(self.atoms) - 1

    def __eq__(self, other):
        if not isinstance(other, Partition) or len(self.atoms) != len(other.atoms):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.atoms, other.atoms))

    def __hash__(self):
        return hash(tuple(a.tobytes() for a in self.atoms))

    @classmethod
    def from_atoms(cls, atoms: Sequence, kind: str = "custom") -> "Partition":
        return cls(tuple(atoms), kind=kind)

    @classmethod
    def discrete(cls, tree: ScenarioTree) -> "Partition":
        return cls(tuple(np.arange(tree.size(i)) for i in range(tree.N + 1)), kind="discrete")

    @classmethod
    def trivial(cls, tree: ScenarioTree) -> "Partition":
        return cls(tuple(np.zeros(tree.size(i), dtype=np.int64) for i in range(tree.N + 1)),
                   kind="trivial")

    @classmethod
    def coordinates(cls, tree: ScenarioTree, k: int) -> "Partition":
        """G generated by walk components ``0..k-1``."""
        if not 0 <= k <= tree.d:
            raise ValueError(f"coordinate count {k} outside [0, {tree.d}]")
        if k == 0:
            return cls.trivial(tree)
        atoms = [np.zeros(1, dtype=np.int64)]
        for i in range(1, tree.N + 1):
            idx = np.arange(tree.size(i))
            parent = idx >> tree.d
            child = idx & (tree.branching - 1)
            atoms.append(atoms[-1][parent] * (2**k) + (child >> (tree.d - k)))
        return cls(tuple(atoms), kind="discrete" if k == tree.d else "coordinates")

    @classmethod
    def delayed(cls, tree: ScenarioTree, delay: int) -> "Partition":
        """G at step ``i`` equals F at step ``max(i - delay, 0)``."""
        if delay < 0:
            raise ValueError("delay must be >= 0")
        atoms = []
        for i in range(tree.N + 1):
            lag = i - max(i - delay, 0)
            atoms.append(np.arange(tree.size(i)) >> (tree.d * lag))
        return cls(tuple(atoms), kind="discrete" if delay == 0 else "delayed")


def cond_exp_g(tree: ScenarioTree, part: Partition, X: np.ndarray, i: int) -> np.ndarray:
    """Probability-weighted average of ``X`` over each step-``i`` atom.

    Multi-dimensional values are projected componentwise.  The result is
    constant on atoms and has the same shape as ``X``.
    """
    X = np.asarray(X, dtype=float)
    if i > part.N or len(part.atoms[i]) != tree.size(i) or X.shape[0] != tree.size(i):
        raise PartitionMismatch(
            f"step {i}: partition covers "
            f"{len(part.atoms[i]) if i <= part.N else 0} nodes, tree has {tree.size(i)}, "
            f"values have {X.shape[0]} rows"
        )
    if part.kind == "discrete":
        return X.copy()
    ids = part.atoms[i]
    p = tree.weights(i)
    flat = X.reshape(X.shape[0], -1)
    mass = np.bincount(ids, weights=p, minlength=part.counts[i])
    out = np.empty_like(flat)
    for c in range(flat.shape[1]):
        avg = np.bincount(ids, weights=p * flat[:, c], minlength=part.counts[i]) / mass
        out[:, c] = avg[ids]
    return out.reshape(X.shape)


@dataclass(frozen=True)
class PartitionViolation:
    kind: str
    steps: tuple
    leaves: tuple
    message: str


def validate_partition(tree: ScenarioTree, part: Partition) -> list[PartitionViolation]:
    """Report every broken invariant; an empty list means the partition is valid.

    Nestedness is checked between consecutive steps, which suffices because
    refinement is transitive.  Each nestedness violation names one witness
    pair of leaves sharing a step-``j`` atom but not the step-``j-1`` atom.
    """
    out: list[PartitionViolation] = []
    if part.N != tree.N:
        out.append(PartitionViolation("domain", (0, part.N), (),
                                      f"partition has {part.N + 1} steps, tree has {tree.N + 1}"))
        return out
    for i, a in enumerate(part.atoms):
        if len(a) != tree.size(i):
            out.append(PartitionViolation("domain", (i, i), (),
                                          f"step {i}: {len(a)} ids for {tree.size(i)} nodes"))
    if out:
        return out
    for i, a in enumerate(part.atoms):
        mass = np.bincount(a, weights=tree.weights(i), minlength=part.counts[i])
        for atom in np.flatnonzero(mass <= 0):
            out.append(PartitionViolation("probability", (i, i), (),
                                          f"step {i}: atom {atom} has zero probability"))
    for j in range(1, tree.N + 1):
        cur = part.atoms[j]
        prev = part.atoms[j - 1][np.arange(tree.size(j)) >> tree.d]
        order = np.lexsort((prev, cur))
        cs, ps = cur[order], prev[order]
        same_atom = cs[1:] == cs[:-1]
        split = same_atom & (ps[1:] != ps[:-1])
        seen = set()
        for pos in np.flatnonzero(split):
            atom = int(cs[pos])
            if atom in seen:
                continue
            seen.add(atom)
            n1, n2 = int(order[pos]), int(order[pos + 1])
            shift = tree.branching ** (tree.N - j)
            l1, l2 = n1 * shift, n2 * shift
            out.append(PartitionViolation(
                "nestedness", (j - 1, j), (l1, l2),
                f"leaves {l1} and {l2} share step-{j} atom {atom} but lie in "
                f"different step-{j - 1} atoms ({int(ps[pos])} vs {int(ps[pos + 1])})",
            ))
    return out


def dump_partition(tree: ScenarioTree, part: Partition | None = None) -> str:
    """Line-oriented text: header ``T N d`` then one line of atom ids per step."""
    lines = [f"{tree.grid.T!r} {tree.N} {tree.d}"]
    if part is not None:
        for a in part.atoms:
            lines.append(" ".join(map(str, a.tolist())))
    return "\n".join(lines) + "\n"


def load_partition(text: str) -> tuple[ScenarioTree, Partition | None]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty tree description")
    T_s, N_s, d_s = lines[0].split()
    tree = ScenarioTree(TimeGrid(float(T_s), int(N_s)), int(d_s))
    if len(lines) == 1:
        return tree, None
    if len(lines) != tree.N + 2:
        raise PartitionMismatch(f"expected {tree.N + 1} atom lines, got {len(lines) - 1}")
    atoms = [np.array([int(x) for x in ln.split()], dtype=np.int64) for ln in lines[1:]]
    part = Partition.from_atoms(atoms)
    if any(len(a) != tree.size(i) for i, a in enumerate(part.atoms)):
        raise PartitionMismatch("atom line lengths do not match the tree")
    return tree, part
