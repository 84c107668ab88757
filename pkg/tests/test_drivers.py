import numpy as np
import pytest
from hypothesis import given, strategies as st

from cebsde.drivers import (
    DriverSpec,
    check_h1,
    check_h2,
    check_independent_of_zprime,
    check_lipschitz,
    check_lower_bound,
    constant_barrier,
    constant_shift,
    constant_terminal,
    difference_quotients,
    eval_barrier,
    increasing_pair,
    ito_barrier,
    linear_driver,
    max_terminal,
    mean_field_driver,
    pathwise_barrier,
    penalized_driver,
    scalar_linear_driver,
    shifted_terminal,
    smooth_driver,
    threshold_driver,
    walk_terminal,
    zero_driver,
)
from cebsde.errors import DimensionMismatch
from cebsde.montecarlo import MonteCarloBackend, sample_paths
from cebsde.tree import TimeGrid, build_tree


def y_times(k):
    return linear_driver(1, 1, A=k, name=f"{k}y")


def test_lipschitz_zero():
    rep = check_lipschitz(zero_driver())
    assert rep.lam_hat == 0.0 and rep.passed


def test_lipschitz_linear_exact():
    f = y_times(2.0)
    assert f.lam == 2.0
    rep = check_lipschitz(f)
    assert 2.0 - 1e-9 <= rep.lam_hat <= 2.0 * (1 + 1e-12)
    assert rep.passed
    rep = check_lipschitz(y_times(2.0).__class__(**{**f.__dict__, "lam": 1.0}))
    assert not rep.passed


def test_declared_lambda_must_be_nonnegative():
    with pytest.raises(ValueError):
        DriverSpec(1, 1, lambda *a: 0.0, lam=-1.0)


@pytest.mark.parametrize("f", [
    zero_driver(2, 3),
    linear_driver(2, 2, A=[[0.5, 0.2], [0.1, -0.3]], b=[[0.3, -0.2], [0.1, 0.4]], C=0.7,
                  g=[[0.1, 0.0], [0.0, 0.2]], c=[1.0, -1.0]),
    scalar_linear_driver(a=-1.0, b=0.5, c=0.2, alpha=0.3, gamma=0.4),
    mean_field_driver(1.0),
    mean_field_driver(-2.0, a=0.5, d=2),
    smooth_driver(2, 2, a=0.4, kappa=0.3, alpha=0.5, gamma=0.2, c=0.1),
    threshold_driver(1.5, 0.3),
    constant_shift(smooth_driver(1, 1, a=0.2, kappa=0.7), 0.5),
], ids=lambda f: f.name)
def test_families_pass_their_declared_constant(f):
    rep = check_lipschitz(f, seed=3)
    assert rep.passed, (f.name, rep.lam_hat, f.lam)
    assert rep.lam_hat >= 0.5 * f.lam  # the declared constant is not wildly loose


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 2))
def test_increasing_pairs_pass_lipschitz(seed, n, d):
    f1, f2 = increasing_pair(n, d, np.random.default_rng(seed))
    assert check_lipschitz(f1, samples=2_000, seed=seed).passed
    assert check_lipschitz(f2, samples=2_000, seed=seed).passed


def test_penalized_wrapper_constant():
    base = smooth_driver(1, 1, a=0.3, kappa=0.2)
    f = penalized_driver(base, 8.0, barrier=0.5)
    assert f.lam == pytest.approx(8.3)
    rep = check_lipschitz(f, seed=1)
    assert rep.passed and rep.lam_hat > base.lam


def test_h1_examples():
    c = linear_driver(1, 1, c=0.7)
    assert check_h1(c, c) == []
    assert check_h1(mean_field_driver(1.0), mean_field_driver(1.0, c=1.0)) == []
    f1 = linear_driver(2, 1, A=[[0.0, -1.0], [0.0, 0.0]])
    found = check_h1(f1, zero_driver(2, 1))
    assert found and all(v.component == 0 for v in found)
    with pytest.raises(DimensionMismatch):
        check_h1(zero_driver(1), zero_driver(2))


def test_h2_examples():
    # nondecreasing in y': the condition holds with L equal to the Lipschitz constant
    for f in (mean_field_driver(0.7), smooth_driver(1, 1, alpha=0.9), zero_driver()):
        for L in (f.lam, 3 * f.lam):
            assert check_h2(f, L) == []
    # only a y'-free driver satisfies it with L = 0
    assert check_h2(mean_field_driver(0.7), 0.0)
    for L in (0.0, 0.5, 3.0):
        assert check_h2(mean_field_driver(-1.0), L)
    with pytest.raises(ValueError):
        check_h2(zero_driver(), -1.0)


@given(st.integers(0, 2**31 - 1))
def test_h2_for_increasing_drivers(seed):
    f1, _ = increasing_pair(2, 1, np.random.default_rng(seed))
    assert check_h2(f1, np.sqrt(2) * f1.lam, samples=2_000, seed=seed) == []


@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_increasing_pairs_satisfy_h1(seed, n):
    f1, f2 = increasing_pair(n, 2, np.random.default_rng(seed))
    assert check_h1(f1, f2, samples=2_000, seed=seed) == []
    assert f1.independent_of_zprime and check_independent_of_zprime(f1)


def test_zprime_independence_check():
    assert check_independent_of_zprime(smooth_driver(1, 1, kappa=1.0, alpha=1.0))
    assert not check_independent_of_zprime(smooth_driver(1, 1, gamma=0.5))


def test_lower_bound_check():
    f = smooth_driver(1, 1, kappa=0.5, c=-0.25)
    assert f.lower_bound == pytest.approx(-0.75)
    assert check_lower_bound(f, -0.75)
    assert not check_lower_bound(f, -0.5)


def test_difference_quotients():
    f2 = linear_driver(1, 1, A=0.4, C=1.5)
    a, b = difference_quotients(f2, 0.0, [1.0, 2.0, 3.0], [0.0, 2.0, 1.0], [1.0, 0.0, 2.0],
                                [3.0, 0.0, 2.0])
    np.testing.assert_allclose(a, [0.4, 0.0, 0.4])
    np.testing.assert_allclose(b, [1.5, 0.0, 0.0])


def test_barrier_examples():
    tree = build_tree(TimeGrid(1.0, 4), 1)
    for S in eval_barrier(constant_barrier(1.0), tree):
        np.testing.assert_array_equal(S, 1.0)
    S = eval_barrier(ito_barrier(0.0, b=1.0), tree)
    for i in range(5):
        np.testing.assert_allclose(S[i], tree.grid.t(i), atol=1e-15)
    S = eval_barrier(ito_barrier(0.0, sigma=1.0), tree)
    for i in range(5):
        np.testing.assert_allclose(S[i], tree.walk(i)[:, 0], atol=1e-15)


def test_barrier_time_dependent_coefficients():
    tree = build_tree(TimeGrid(1.0, 3), 2)
    b = np.array([0.1, -0.2, 0.3])
    sig = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]])
    S = eval_barrier(ito_barrier(0.2, b=b, sigma=sig), tree)
    dt = tree.grid.dt
    expected = 0.2 + sum(b[i] * dt + tree.terminal_walk(i + 1) @ sig[i] - tree.terminal_walk(i) @ sig[i]
                         for i in range(3))
    np.testing.assert_allclose(S[3], expected, atol=1e-14)
    with pytest.raises(DimensionMismatch):
        eval_barrier(ito_barrier(0.0, sigma=[1.0, 2.0, 3.0]), tree)


def test_pathwise_barrier_and_mc():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    S = eval_barrier(pathwise_barrier(lambda be, i: be.walk(i)[:, 0] ** 2), tree)
    np.testing.assert_allclose(S[2], tree.walk(2)[:, 0] ** 2)
    with pytest.raises(DimensionMismatch):
        eval_barrier(pathwise_barrier(lambda be, i: np.zeros(3)), tree)
    ens = sample_paths(TimeGrid(1.0, 3), 1, 10, seed=0)
    S = eval_barrier(ito_barrier(0.0, sigma=1.0), MonteCarloBackend(ens))
    np.testing.assert_allclose(S[3], ens.W[:, 3, 0], atol=1e-14)


def test_terminals():
    tree = build_tree(TimeGrid(1.0, 2), 1)
    np.testing.assert_allclose(max_terminal(0.3).evaluate(tree)[:, 0], [np.sqrt(2), 0.3, 0.3, 0.3])
    np.testing.assert_array_equal(constant_terminal([1.0, 2.0], 2).evaluate(tree), [[1.0, 2.0]] * 4)
    xi = shifted_terminal(walk_terminal(), lambda be: np.ones(be.size(be.N)))
    np.testing.assert_allclose(xi.evaluate(tree)[:, 0], tree.walk(2)[:, 0] + 1)
    from cebsde.drivers import TerminalSpec

    with pytest.raises(DimensionMismatch):
        TerminalSpec(lambda be: np.zeros(3)).evaluate(tree)
    with pytest.raises(ValueError):
        TerminalSpec(lambda be: np.full(4, np.nan)).evaluate(tree)


def test_driver_output_shape():
    f = linear_driver(1, 1, c=2.0)
    out = f(0.0, np.zeros((5, 1)), np.zeros((5, 1, 1)), np.zeros((5, 1)), np.zeros((5, 1, 1)))
    assert out.shape == (5, 1)
    np.testing.assert_array_equal(f.at_zero(0.0, 3), 2.0)
