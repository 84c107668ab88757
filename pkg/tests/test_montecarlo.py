import numpy as np
import pytest
from hypothesis import given, strategies as st

from cebsde.drivers import walk_terminal, zero_driver
from cebsde.errors import DimensionMismatch, IllConditioned
from cebsde.montecarlo import (
    InfoSelector,
    MonteCarloBackend,
    RegressionEstimator,
    design_matrix,
    estimate_cond_exp,
    load_ensemble,
    sample_paths,
    save_ensemble,
)
from cebsde.solver import solve_cebsde
from cebsde.tree import TimeGrid

EST = RegressionEstimator()


def test_sampling_is_reproducible():
    a = sample_paths(TimeGrid(1.0, 1), 1, 4, seed=7)
    b = sample_paths(TimeGrid(1.0, 1), 1, 4, seed=7)
    assert a == b
    assert np.array_equal(a.W, b.W)
    assert a != sample_paths(TimeGrid(1.0, 1), 1, 4, seed=8)


def test_sampling_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sample_paths(TimeGrid(1.0, 1), 1, 1, seed=0)
    with pytest.raises(ValueError):
        sample_paths(TimeGrid(1.0, 1), 1, 10, seed=-1)


def test_terminal_moments():
    ens = sample_paths(TimeGrid(1.0, 4), 1, 100_000, seed=3)
    WT = ens.W[:, -1, 0]
    assert np.all(ens.W[:, 0] == 0)
    assert abs(WT.mean()) < 0.02
    assert abs(WT.var() - 1.0) < 0.05
    inc = np.diff(ens.W, axis=1)
    assert np.all(np.abs(inc.mean(axis=0)) < 5 / np.sqrt(ens.M))


def test_binary_roundtrip(tmp_path):
    ens = sample_paths(TimeGrid(0.75, 3), 2, 50, seed=2**63 + 5)
    path = tmp_path / "paths.bin"
    save_ensemble(ens, path)
    raw = path.read_bytes()
    assert len(raw) == 8 * 5 + 8 * 50 * 4 * 2
    back = load_ensemble(path)
    assert back == ens
    assert back.grid == ens.grid and back.seed == 2**63 + 5


def test_selector_validation():
    with pytest.raises(ValueError):
        InfoSelector("sideways")
    with pytest.raises(DimensionMismatch):
        InfoSelector("coordinates", k=3).validate(2, 4)
    with pytest.raises(DimensionMismatch):
        InfoSelector("delayed", delay=5).validate(2, 4)


def test_trivial_mode_constant():
    ens = sample_paths(TimeGrid(1.0, 3), 1, 200, seed=1)
    out = estimate_cond_exp(ens, InfoSelector("trivial"), EST, np.full(200, 3.0), 2)
    np.testing.assert_allclose(out, 3.0, rtol=0, atol=1e-15)


def test_full_mode_reproduces_span():
    ens = sample_paths(TimeGrid(1.0, 3), 2, 2_000, seed=2)
    for i in (1, 2, 3):
        X = ens.W[:, i, 0]
        out = estimate_cond_exp(ens, InfoSelector("full"), RegressionEstimator(degree=1), X, i)
        assert np.max(np.abs(out - X)) < 1e-8
        X2 = 1.0 + ens.W[:, i, 0] * ens.W[:, i, 1] - ens.W[:, i, 1] ** 3
        out = estimate_cond_exp(ens, InfoSelector("full"), EST, X2, i)
        assert np.max(np.abs(out - X2)) < 1e-8


def test_step_zero_is_mean():
    ens = sample_paths(TimeGrid(1.0, 3), 2, 500, seed=4)
    X = np.random.default_rng(0).normal(size=500)
    for sel in (InfoSelector("full"), InfoSelector("coordinates", k=1), InfoSelector("delayed", delay=1)):
        np.testing.assert_allclose(estimate_cond_exp(ens, sel, EST, X, 0), X.mean())


def test_delayed_mode_uses_lagged_coordinates():
    ens = sample_paths(TimeGrid(1.0, 3), 1, 3_000, seed=5)
    X = ens.W[:, 1, 0] ** 2
    out = estimate_cond_exp(ens, InfoSelector("delayed", delay=1), EST, X, 2)
    assert np.max(np.abs(out - X)) < 1e-8
    np.testing.assert_allclose(estimate_cond_exp(ens, InfoSelector("delayed", delay=1), EST, X, 1),
                               X.mean())


def test_coordinates_mode_projects_out_independent_component():
    ens = sample_paths(TimeGrid(1.0, 4), 2, 100_000, seed=6)
    for i in (1, 4):
        out = estimate_cond_exp(ens, InfoSelector("coordinates", k=1), EST, ens.W[:, i, 1], i)
        assert np.max(np.abs(out)) < 0.05


def test_same_information_same_fit():
    ens = sample_paths(TimeGrid(1.0, 2), 2, 1_000, seed=9)
    W = ens.W.copy()
    W[1::2, :, 0] = W[0::2, :, 0]  # pairs of paths share their first coordinate
    from cebsde.montecarlo import PathEnsemble

    twin = PathEnsemble(ens.grid, W, ens.seed)
    X = np.random.default_rng(1).normal(size=1_000)
    out = estimate_cond_exp(twin, InfoSelector("coordinates", k=1), EST, X, 2)
    np.testing.assert_array_equal(out[0::2], out[1::2])


@given(st.integers(0, 2**31 - 1), st.sampled_from(["full", "coordinates", "delayed", "trivial"]),
       st.integers(0, 4))
def test_mean_preservation(seed, mode, degree):
    ens = sample_paths(TimeGrid(1.0, 3), 2, 400, seed=seed)
    sel = InfoSelector(mode, k=1, delay=1)
    X = np.random.default_rng(seed).normal(size=(400, 2)) * 5 + 1
    out = estimate_cond_exp(ens, sel, RegressionEstimator(degree=degree), X, 2)
    np.testing.assert_allclose(out.mean(axis=0), X.mean(axis=0), atol=1e-10)


def test_determinism_of_estimates():
    ens = sample_paths(TimeGrid(1.0, 3), 2, 1_000, seed=11)
    X = np.sin(ens.W[:, 3, 0]) + ens.W[:, 3, 1] ** 2
    a = estimate_cond_exp(ens, InfoSelector("full"), EST, X, 2)
    b = estimate_cond_exp(ens, InfoSelector("full"), EST, X.copy(), 2)
    assert np.array_equal(a, b)


def test_ill_conditioned():
    ens = sample_paths(TimeGrid(1.0, 2), 1, 20, seed=0)
    with pytest.raises(IllConditioned):
        estimate_cond_exp(ens, InfoSelector("full"), RegressionEstimator(degree=25, ridge=0.0),
                          ens.W[:, 2, 0], 2)
    with pytest.raises(IllConditioned):
        estimate_cond_exp(ens, InfoSelector("full"), RegressionEstimator(degree=30), ens.W[:, 2, 0], 2)


def test_design_matrix_columns():
    F = np.array([[2.0, 3.0]])
    A = design_matrix(F, 2)
    np.testing.assert_array_equal(A, [[1, 2, 3, 4, 6, 9]])


def test_backend_martingale_solve():
    ens = sample_paths(TimeGrid(1.0, 4), 1, 5_000, seed=13)
    be = MonteCarloBackend(ens)
    sol = solve_cebsde(be, InfoSelector("full"), zero_driver(), walk_terminal())
    assert np.array_equal(sol.Y[4][:, 0], ens.W[:, 4, 0])
    # every regression preserves the sample mean, so the root is the sample mean of xi
    assert abs(sol.Y[0][0, 0] - ens.W[:, -1, 0].mean()) < 1e-12
    for i in range(1, 4):
        assert np.mean(np.abs(sol.Y[i][:, 0] - ens.W[:, i, 0])) < 0.02
        assert abs(np.mean(sol.Z[i][:, 0, 0]) - 1.0) < 0.05
