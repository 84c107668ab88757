import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cebsde.errors import PartitionMismatch, SizeExceeded, StepOrder
from cebsde.tree import (
    Partition,
    TimeGrid,
    build_tree,
    cond_exp_f,
    cond_exp_g,
    dump_partition,
    load_partition,
    validate_partition,
)


@st.composite
def trees(draw, max_leaves_log2=8):
    d = draw(st.integers(1, 2))
    N = draw(st.integers(1, max_leaves_log2 // d))
    T = draw(st.floats(0.1, 3.0))
    return build_tree(TimeGrid(T, N), d)


@st.composite
def nested_partitions(draw, tree):
    """Random nested partition: each step refines the parent atom by a random child map."""
    B = tree.branching
    atoms = [np.zeros(1, dtype=np.int64)]
    for i in range(1, tree.N + 1):
        g = np.array(draw(st.lists(st.integers(0, B - 1), min_size=B, max_size=B)))
        idx = np.arange(tree.size(i))
        atoms.append(atoms[-1][idx // B] * B + g[idx % B])
    return Partition.from_atoms(atoms)


def brute_cond_exp_g(tree, part, X, i):
    """E[X | G_i] by looping over atoms, independent of the vectorized path."""
    ids = part.atoms[i]
    p = tree.weights(i)
    out = np.empty_like(X, dtype=float)
    for a in set(ids.tolist()):
        mask = ids == a
        out[mask] = (p[mask, None] * X[mask]).sum(axis=0) / p[mask].sum()
    return out


def test_grid_knots():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5
    np.testing.assert_array_equal(g.knots, [0.0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_one_step_tree():
    tree = build_tree(TimeGrid(1.0, 1), 1)
    assert tree.size(0) == 1 and tree.size(1) == 2
    np.testing.assert_array_equal(np.sort(tree.walk(1)[:, 0]), [-1.0, 1.0])
    np.testing.assert_array_equal(tree.weights(1), [0.5, 0.5])


def test_two_step_leaves():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    r = np.sqrt(0.5)
    np.testing.assert_allclose(tree.walk(2)[:, 0], [2 * r, 0.0, 0.0, -2 * r], atol=1e-15)
    np.testing.assert_array_equal(tree.weights(2), [0.25] * 4)


def test_two_dim_leaves():
    tree = build_tree(TimeGrid(1.0, 2), 2)
    assert tree.size(2) == 16
    np.testing.assert_array_equal(tree.weights(2), np.full(16, 1 / 16))


def test_size_guard():
    build_tree(TimeGrid(1.0, 12), 2)
    with pytest.raises(SizeExceeded):
        build_tree(TimeGrid(1.0, 25), 1)
    with pytest.raises(SizeExceeded):
        build_tree(TimeGrid(1.0, 13), 2)


def test_walk_matches_enumeration():
    tree = build_tree(TimeGrid(1.5, 3), 2)
    s = np.sqrt(tree.grid.dt)
    signs = [np.array(v) for v in itertools.product([1.0, -1.0], repeat=2)]
    expected = [np.sum(path, axis=0) * s for path in itertools.product(signs, repeat=3)]
    np.testing.assert_allclose(tree.walk(3), np.array(expected), atol=1e-14)


@given(trees())
def test_tree_invariants(tree):
    for i in range(tree.N + 1):
        assert tree.size(i) == 2 ** (tree.d * i)
        assert abs(tree.weights(i).sum() - 1.0) <= 1e-14
    for i in range(tree.N):
        dB = tree.walk(i + 1) - tree.lift(tree.walk(i), i, i + 1)
        np.testing.assert_allclose(dB, tree.increment(i), atol=1e-14)
        np.testing.assert_allclose(cond_exp_f(tree, dB, i + 1, i), 0.0, atol=1e-14)
        np.testing.assert_allclose(cond_exp_f(tree, dB**2, i + 1, i), tree.grid.dt, rtol=1e-13)


def test_cond_exp_f_examples():
    tree = build_tree(TimeGrid(1.0, 1), 1)
    assert cond_exp_f(tree, tree.walk(1), 1, 0)[0, 0] == 0.0
    tree = build_tree(TimeGrid(1.0, 2), 1)
    np.testing.assert_allclose(cond_exp_f(tree, np.full((4, 1), 3.0), 2, 1), 3.0)
    np.testing.assert_allclose(cond_exp_f(tree, tree.walk(2), 2, 1), tree.walk(1), atol=1e-15)
    X = np.arange(4.0)[:, None]
    np.testing.assert_array_equal(cond_exp_f(tree, X, 2, 2), X)
    with pytest.raises(StepOrder):
        cond_exp_f(tree, tree.walk(1), 1, 2)


def test_cond_exp_g_examples():
    tree = build_tree(TimeGrid(1.0, 1), 1)
    np.testing.assert_array_equal(cond_exp_g(tree, Partition.trivial(tree), tree.walk(1), 1), 0.0)
    X = tree.walk(1)
    np.testing.assert_array_equal(cond_exp_g(tree, Partition.discrete(tree), X, 1), X)


def test_coordinate_partition_projects_out_second_component():
    tree = build_tree(TimeGrid(1.0, 1), 2)
    part = Partition.coordinates(tree, 1)
    # four step-1 nodes, two atoms given by the sign of the first increment
    assert part.counts[1] == 2
    signs = np.sign(tree.walk(1)[:, 0])
    for a in range(2):
        assert len(set(signs[part.atoms[1] == a])) == 1
    out = cond_exp_g(tree, part, tree.walk(1)[:, 1:2], 1)
    np.testing.assert_array_equal(out, 0.0)


def test_partition_mismatch():
    t2 = build_tree(TimeGrid(1.0, 2), 1)
    t3 = build_tree(TimeGrid(1.0, 3), 1)
    with pytest.raises(PartitionMismatch):
        cond_exp_g(t3, Partition.discrete(t2), t3.walk(3), 3)
    wide = build_tree(TimeGrid(1.0, 2), 2)
    with pytest.raises(PartitionMismatch):
        cond_exp_g(t3, Partition.trivial(wide), t3.walk(1), 1)
    with pytest.raises(PartitionMismatch):
        t3.check_info(Partition.trivial(t2))


@given(trees(), st.data())
def test_projection_properties(tree, data):
    part = data.draw(nested_partitions(tree))
    assert validate_partition(tree, part) == []
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    i = data.draw(st.integers(0, tree.N))
    X = rng.normal(size=(tree.size(i), 2))
    Xp = rng.normal(size=(tree.size(i), 2))
    G = cond_exp_g(tree, part, X, i)
    np.testing.assert_allclose(G, brute_cond_exp_g(tree, part, X, i), atol=1e-13)
    # contraction in the max norm
    assert np.abs(G).max() <= np.abs(X).max() + 1e-14
    # linearity
    a, b = 1.7, -0.3
    np.testing.assert_allclose(cond_exp_g(tree, part, a * X + b * Xp, i),
                               a * G + b * cond_exp_g(tree, part, Xp, i), atol=1e-13)
    # Jensen
    assert np.all(cond_exp_g(tree, part, X**2, i) >= G**2 - 1e-13)
    # constant on atoms
    for atom in range(part.counts[i]):
        rows = G[part.atoms[i] == atom]
        assert np.all(rows == rows[0])


@given(trees(), st.data())
def test_tower_law(tree, data):
    part = data.draw(nested_partitions(tree))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    j = data.draw(st.integers(0, tree.N))
    i = data.draw(st.integers(0, j))
    X = rng.normal(size=(tree.size(j), 1))
    nested = cond_exp_g(tree, part, cond_exp_f(tree, X, j, i), i)
    # direct: average leaf-level X over each step-i atom
    ids = tree.lift(part.atoms[i], i, j)
    p = tree.weights(j)
    direct = np.array([(p[ids == a] @ X[ids == a, 0]) / p[ids == a].sum() for a in part.atoms[i]])
    np.testing.assert_allclose(nested[:, 0], direct, atol=1e-13)


def test_canonical_partitions_valid():
    tree = build_tree(TimeGrid(1.0, 3), 2)
    for part in (Partition.discrete(tree), Partition.trivial(tree), Partition.delayed(tree, 1),
                 Partition.delayed(tree, 5), Partition.coordinates(tree, 1),
                 Partition.coordinates(tree, 0)):
        assert validate_partition(tree, part) == []
    assert Partition.coordinates(tree, 2) == Partition.discrete(tree)
    assert Partition.delayed(tree, 0) == Partition.discrete(tree)
    assert Partition.delayed(tree, 3) == Partition.trivial(tree)


def test_delayed_partition_lags_information():
    tree = build_tree(TimeGrid(1.0, 3), 1)
    part = Partition.delayed(tree, 1)
    X = tree.walk(2)
    np.testing.assert_allclose(cond_exp_g(tree, part, X, 2), tree.lift(tree.walk(1), 1, 2))


def test_forgetting_is_detected():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    part = Partition.from_atoms([[0], [0, 1], [0, 0, 0, 0]])
    v = validate_partition(tree, part)
    assert len(v) == 1 and v[0].kind == "nestedness"
    assert v[0].steps == (1, 2)
    l1, l2 = v[0].leaves
    assert part.atoms[2][l1] == part.atoms[2][l2]
    assert part.atoms[1][l1 // 2] != part.atoms[1][l2 // 2]


def test_domain_violation():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    v = validate_partition(tree, Partition.from_atoms([[0], [0, 1], [0, 1, 2]]))
    assert v and v[0].kind == "domain"


def test_atom_ids_relabelled():
    a = Partition.from_atoms([[7], [5, 3]])
    b = Partition.from_atoms([[0], [0, 1]])
    assert a == b and hash(a) == hash(b)


@given(trees(), st.data())
def test_serialization_roundtrip(tree, data):
    part = data.draw(nested_partitions(tree))
    text = dump_partition(tree, part)
    tree2, part2 = load_partition(text)
    assert (tree2.grid, tree2.d) == (tree.grid, tree.d)
    assert part2 == part
    assert dump_partition(tree2, part2) == text


def test_serialization_format():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    assert dump_partition(tree, Partition.delayed(tree, 1)) == "1.0 2 1\n0\n0 0\n0 0 1 1\n"
    t2, p2 = load_partition("1.0 2 1\n")
    assert p2 is None and t2.N == 2
