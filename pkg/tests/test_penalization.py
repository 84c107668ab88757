import numpy as np
import pytest

from cebsde.drivers import eval_barrier, ito_barrier, walk_terminal, zero_driver
from cebsde.errors import PlateauOnly, StepSizeTooLarge, TerminalConstraintViolated
from cebsde.instances import (
    dp_instance,
    far_barrier_instance,
    flat_barrier_instance,
    mean_reflected_instance,
    rate_instance,
)
from cebsde.penalization import (
    COLUMNS,
    PenaltySchedule,
    audit_reflected_solution,
    check_terminal_constraint,
    fit_rate,
    plateau_floor,
    run_penalization_sweep,
    solve_penalized,
)
from cebsde.solver import solve_cebsde
from cebsde.tree import Partition, TimeGrid, build_tree
from cebsde.verification import classical_reflected_oracle


def _sweep(inst, **kw):
    return run_penalization_sweep(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, **kw)


def test_schedule_validation():
    assert PenaltySchedule.geometric(1, 3).levels == (1, 2, 4, 8)
    for bad in [(), (0, 1), (2, 2), (4, 2)]:
        with pytest.raises(ValueError):
            PenaltySchedule(bad)


def test_plateau_floor_and_fit():
    levels = [1, 2, 4, 8, 16]
    values = [1.0 / n**2 for n in levels]
    assert plateau_floor(levels, values) == pytest.approx(0.0, abs=1e-15)
    slope, _, used = fit_rate(levels, values, 0.0)
    assert slope == pytest.approx(-2.0)
    assert used == tuple(levels)
    slope, _, used = fit_rate(levels, [1e-1 + v for v in values], 1.0)
    assert slope is None and used == ()


def test_far_barrier_is_inactive():
    inst = far_barrier_instance()
    rep = _sweep(inst, schedule=PenaltySchedule.geometric(1, 4))
    plain = solve_cebsde(inst.tree, inst.info, inst.f, inst.xi)
    assert all(np.all(k == 0) for k in rep.limit.K)
    for i in range(inst.tree.N + 1):
        np.testing.assert_allclose(rep.limit.Y[i], plain.Y[i], atol=1e-12)
    assert rep.plateau_only and rep.slope is None
    with pytest.raises(PlateauOnly):
        _sweep(inst, schedule=PenaltySchedule.geometric(1, 2), strict=True)


def test_barrier_equal_to_walk():
    tree = build_tree(TimeGrid(1.0, 3), 1)
    sol = solve_penalized(tree, Partition.discrete(tree), zero_driver(), walk_terminal(),
                          ito_barrier(0.0, sigma=1.0), 64)
    for i in range(4):
        np.testing.assert_allclose(sol.Y[i][:, 0], tree.walk(i)[:, 0], atol=1e-14)
        assert np.all(sol.K[i] == 0)
    for i in range(3):
        np.testing.assert_allclose(sol.Z[i], 1.0, atol=1e-14)


def test_dp_limit_rate_and_audit():
    inst = dp_instance()
    rep = _sweep(inst)
    oracle = classical_reflected_oracle(inst.tree, inst.f, inst.xi, inst.barrier)
    assert oracle.Y0 == pytest.approx(0.65355339, abs=1e-8)
    err = max(np.abs(rep.limit.Y[i] - oracle.Y[i]).max() for i in range(3))
    assert err <= 2 * rep.c_hat / rep.rows[-1].n
    assert -2.6 <= rep.slope <= -1.4
    audit = audit_reflected_solution(rep.limit, rep.barrier)
    assert audit.passed, audit.checks


def test_flat_barrier_terminal_check():
    inst = flat_barrier_instance()
    with pytest.raises(TerminalConstraintViolated) as exc:
        solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 8)
    assert exc.value.margin < 0
    oracle = classical_reflected_oracle(inst.tree, inst.f, inst.xi, inst.barrier, enforce_terminal=False)
    assert oracle.Y0 == pytest.approx(0.5035534, abs=1e-7)
    sol = solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 4096,
                          check_terminal=False)
    assert abs(sol.Y0[0] - oracle.Y0) < 5e-3


def test_terminal_constraint_on_coarse_atoms():
    # xi = W_T is below 0.3 on some leaves but E[W_T] = 0 < 0.3 fails on the trivial atom too
    tree = build_tree(TimeGrid(1.0, 2), 1)
    S = eval_barrier(ito_barrier(-0.5), tree)
    xi = tree.walk(2)[:, :1]
    # pointwise below the barrier at the bottom leaf, yet fine in mean
    assert check_terminal_constraint(tree, Partition.trivial(tree), xi, S[-1]) == pytest.approx(0.5)


def test_injected_decrement_is_reported():
    inst = dp_instance()
    sol = solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 1024)
    S = eval_barrier(inst.barrier, inst.tree)
    assert audit_reflected_solution(sol, S).passed
    sol.K[2] = sol.K[2].copy()
    sol.K[2][3] = sol.K[1][1] - 0.1
    audit = audit_reflected_solution(sol, S)
    chk = audit.checks["k_admissible"]
    assert not chk.passed
    assert "step 2 node 3" in chk.detail


def test_mean_reflected_K_is_deterministic():
    inst = mean_reflected_instance()
    rep = _sweep(inst)
    K = rep.limit.K
    assert float(K[-1].max()) > 0
    for k in K:
        assert np.ptp(k) <= 1e-12
    audit = audit_reflected_solution(rep.limit, rep.barrier)
    assert audit.passed, audit.checks


def test_rate_instance_diagnostics():
    inst = rate_instance(4)
    rep = _sweep(inst)
    assert not rep.plateau_only
    assert -2.6 <= rep.slope <= -1.4
    assert rep.norm_spread()["norm_k"] <= 10
    assert all(rep.cauchy_monotone().values())
    assert audit_reflected_solution(rep.limit, rep.barrier).passed


def test_fixed_point_method_guard_and_agreement():
    inst = rate_instance(4)
    with pytest.raises(StepSizeTooLarge):
        solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 64, method="fixed_point")
    a = solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 0.5, method="fixed_point")
    b = solve_penalized(inst.tree, inst.info, inst.f, inst.xi, inst.barrier, 0.5)
    # both discretize the same penalized equation to first order in dt
    assert abs(a.Y0[0] - b.Y0[0]) < inst.tree.grid.dt


def test_sweep_csv():
    rep = _sweep(dp_instance(), schedule=PenaltySchedule.geometric(1, 3))
    text = rep.to_csv(header="# config_sha256=abc")
    lines = text.splitlines()
    assert lines[0] == "# config_sha256=abc"
    assert lines[1].split(",") == list(COLUMNS)
    assert len(lines) == 2 + 4
    assert lines[2].split(",")[5] == "nan"


def test_primed_driver_rejected():
    from cebsde.drivers import mean_field_driver
    inst = dp_instance()
    with pytest.raises(ValueError):
        solve_penalized(inst.tree, inst.info, mean_field_driver(1.0), inst.xi, inst.barrier, 4)
