import numpy as np
import pytest

from cbfsynth.simulator import (FilterConfig, SimConfig, check_invariance,
                                hdot_rate_bound, interior_grid, nominal_controller,
                                reference_spline, safety_filter, simulate, step,
                                STATUS_INFEASIBLE, STATUS_NOMINAL, STATUS_OPTIMAL)
from cbfsynth.system import BoxSet, CbfCandidate, eval_h, identity_candidate

from conftest import REFERENCE_BOUNDS

CAP_CANDIDATE = CbfCandidate([0.0, 10.0], [0.0, 0.0], 30.0)
STEEP = CbfCandidate([1.0, 10.0 / 3.0], [0.0, 0.0], 0.0)   # slope-1/3 damped set
# uniform-mode safe set: the damped edge shifted 7 units inward, indicator
# threshold moved to v = -70 so the slant covers the whole box
UNIFORM_SET = CbfCandidate([1.0, 1.0], [0.0, 70.0], 0.0)


def test_spline_constant_when_origin_is_goal():
    xi = reference_spline([3.0, 0.0], [3.0, 0.0], 5.0)
    for t in (0.0, 1.3, 5.0, 9.0):
        assert xi(t)[0] == 3.0


def test_spline_midpoint_and_endpoints():
    xi = reference_spline([-9.0, 15.0], [0.0, 0.0], 4.0)
    assert xi(0.0)[0] == pytest.approx(-9.0)
    assert xi(2.0)[0] == pytest.approx(-4.5)
    assert xi(4.0)[0] == pytest.approx(0.0)
    assert xi(10.0)[0] == pytest.approx(0.0)   # held after the horizon
    eps = 1e-6
    assert (xi(eps)[0] - xi(0.0)[0]) / eps == pytest.approx(0.0, abs=1e-4)
    assert (xi(4.0)[0] - xi(4.0 - eps)[0]) / eps == pytest.approx(0.0, abs=1e-4)


def test_spline_validation():
    with pytest.raises(ValueError):
        reference_spline([0.0], [1.0], 0.0)


def test_nominal_controller():
    assert nominal_controller(np.array([-9.0, 15.0]), np.array([-9.0]), 10.0)[0] == 0.0
    assert nominal_controller(np.array([-9.0, 15.0]), np.array([-4.0]), 10.0)[0] == \
        pytest.approx(50.0)
    assert nominal_controller(np.array([-0.5, 3.0]), np.array([0.0]), 10.0)[0] == \
        pytest.approx(5.0)
    with pytest.raises(ValueError):
        nominal_controller(np.array([0.0, 0.0]), np.array([0.0]), 0.0)


@pytest.fixture
def fc(di):
    _, input_box = di
    return FilterConfig(alphas=[5.0], input_box=input_box)


def test_filter_inactive_returns_nominal_exactly(di, fc):
    sysm, _ = di
    u, status = safety_filter(np.array([-9.0, 0.0]), np.array([12.5]),
                              [identity_candidate(2)], sysm, fc)
    assert status == STATUS_OPTIMAL
    assert u[0] == 12.5


def test_filter_active_row_closed_form(di, fc):
    sysm, _ = di
    x = np.array([-3.0, 9.0])
    assert eval_h(STEEP, sysm.hcf, x) == pytest.approx(0.0)
    u, status = safety_filter(x, np.array([100.0]), [STEEP], sysm, fc)
    assert status == STATUS_OPTIMAL
    assert u[0] == pytest.approx(-27.0)
    # grid oracle over the input axis
    grid = np.linspace(-300.0, 300.0, 60001)
    hdot = -9.0 - grid / 3.0
    feas = hdot >= -5.0 * 0.0
    best = grid[feas][np.argmin((grid[feas] - 100.0) ** 2)]
    assert u[0] == pytest.approx(best, abs=0.01)


def test_filter_box_clamp(di, fc):
    sysm, _ = di
    u, status = safety_filter(np.array([-9.0, -5.0]), np.array([-400.0]),
                              [identity_candidate(2)], sysm, fc)
    assert status == STATUS_OPTIMAL
    assert u[0] == -300.0


def test_filter_infeasible_zero_row(di, fc):
    sysm, _ = di
    # outside the set with the input column vanished: no input can help
    u, status = safety_filter(np.array([0.5, -1.0]), np.array([0.0]),
                              [identity_candidate(2)], sysm, fc)
    assert status == STATUS_INFEASIBLE
    assert -300.0 <= u[0] <= 300.0


def test_filter_relaxation_soft_constraints(di):
    sysm, input_box = di
    fc = FilterConfig(alphas=[5.0], input_box=input_box, relaxation=1e-3)
    u, status = safety_filter(np.array([0.5, -1.0]), np.array([0.0]),
                              [identity_candidate(2)], sysm, fc)
    assert status == STATUS_OPTIMAL
    assert input_box.contains(u)


def test_filter_idempotent_off_constraint(di, fc):
    sysm, _ = di
    rng = np.random.default_rng(0)
    cands = [identity_candidate(2), CAP_CANDIDATE]
    fc2 = FilterConfig(alphas=[5.0, 5.0], input_box=fc.input_box)
    checked = 0
    while checked < 200:
        x = rng.uniform(REFERENCE_BOUNDS.lower, REFERENCE_BOUNDS.upper)
        u_nom = rng.uniform(-300.0, 300.0)
        slacks = []
        for j, c in enumerate(cands):
            grad = sysm.hcf.gradient(c.transform(x)) * c.scale
            hdot = grad @ (sysm.drift(x) + sysm.actuation(x) @ np.array([u_nom]))
            slacks.append(hdot + fc2.gain(j) * eval_h(c, sysm.hcf, x))
        if min(slacks) < 1e-9:
            continue
        checked += 1
        u, status = safety_filter(x, np.array([u_nom]), cands, sysm, fc2)
        assert status == STATUS_OPTIMAL
        assert abs(u[0] - u_nom) <= 1e-12


def test_filter_minimal_deviation(di, fc):
    sysm, _ = di
    rng = np.random.default_rng(1)
    x = np.array([-3.0, 9.0])
    u_nom = 100.0
    u_star, _ = safety_filter(x, np.array([u_nom]), [STEEP], sysm, fc)
    candidates = rng.uniform(-300.0, -27.0, 1000)   # feasible inputs at this state
    assert np.all(np.abs(u_star[0] - u_nom) <= np.abs(candidates - u_nom) + 1e-9)


def test_step_exact_for_double_integrator(di):
    sysm, _ = di
    out = step(sysm, np.array([0.0, 1.0]), np.array([0.0]), 0.1)
    assert np.allclose(out, [0.1, 1.0], atol=1e-15)
    out = step(sysm, np.array([0.0, 0.0]), np.array([2.0]), 0.1)
    assert np.allclose(out, [0.01, 0.2], atol=1e-15)
    with pytest.raises(ValueError):
        step(sysm, np.array([0.0, 0.0]), np.array([0.0]), 0.0)


def test_step_matches_closed_form_flow(di):
    sysm, _ = di
    rng = np.random.default_rng(2)
    x = np.array([-5.0, 3.0])
    dt = 0.01
    for _ in range(500):
        u = rng.uniform(-300.0, 300.0)
        expected = np.array([x[0] + x[1] * dt + 0.5 * u * dt * dt, x[1] + u * dt])
        x = step(sysm, x, np.array([u]), dt)
        assert np.max(np.abs(x - expected)) <= 1e-12


def test_simulate_zero_horizon(di, fc):
    sysm, _ = di
    cfg = SimConfig(x_init=[-5.0, 2.0], x_goal=[0.0, 0.0], horizon_T=0.0, dt=0.01,
                    kp=10.0)
    traj = simulate(cfg, sysm, [identity_candidate(2)], fc)
    assert len(traj) == 1
    assert np.allclose(traj.states[0], [-5.0, 2.0])


def test_simulate_rejects_unsafe_start(di, fc):
    sysm, _ = di
    cfg = SimConfig(x_init=[-4.0, 20.0], x_goal=[0.0, 0.0], horizon_T=1.0, dt=0.01,
                    kp=10.0)
    assert eval_h(UNIFORM_SET, sysm.hcf, [-4.0, 20.0]) < 0.0
    with pytest.raises(ValueError):
        simulate(cfg, sysm, [UNIFORM_SET], fc)
    relaxed = SimConfig(x_init=[-4.0, 20.0], x_goal=[0.0, 0.0], horizon_T=0.2,
                        dt=0.01, kp=10.0, require_safe_start=False)
    traj = simulate(relaxed, sysm, [UNIFORM_SET], fc)
    assert len(traj) == 21


def test_simulate_unfiltered_clamps_to_box(di, fc):
    sysm, _ = di
    cfg = SimConfig(x_init=[-9.0, 15.0], x_goal=[0.0, 0.0], horizon_T=2.0, dt=0.01,
                    kp=10.0, require_safe_start=False)
    traj = simulate(cfg, sysm, [], fc)
    assert traj.h_values.shape == (201, 0)
    assert set(traj.qp_statuses) == {STATUS_NOMINAL}
    assert np.all(traj.filtered_inputs >= -300.0) and np.all(traj.filtered_inputs <= 300.0)


def test_simulate_invariance_and_goal(di, fc):
    sysm, _ = di
    pair = [identity_candidate(2), CAP_CANDIDATE]
    fc2 = FilterConfig(alphas=[5.0], input_box=fc.input_box)
    cfg = SimConfig(x_init=[-9.0, 15.0], x_goal=[0.0, 0.0], horizon_T=10.0, dt=0.01,
                    kp=10.0)
    traj = simulate(cfg, sysm, pair, fc2)
    rep = check_invariance(traj, pair, sysm.hcf)
    assert rep.h_ok and rep.z_ok
    assert rep.infeasible_steps == 0
    assert abs(traj.states[-1][0]) <= 0.5
    # inputs always respect the box exactly
    assert np.all(traj.filtered_inputs >= -300.0) and np.all(traj.filtered_inputs <= 300.0)


def test_alpha_comparison_along_trajectory(di, fc):
    """Discrete comparison bound: h never falls faster than the linear decay
    the filter permits, up to integration error.

    The filter pins hdot >= -kappa h at the sample instant only; with the
    input held over the step, hdot drifts by at most |d hdot / dt| dt, which
    for these barriers is bounded by |u|. The tolerance therefore carries the
    exact second-order term |u| dt^2 / 2 on top of the absolute slack.
    """
    sysm, _ = di
    pair = [identity_candidate(2), CAP_CANDIDATE]
    fc2 = FilterConfig(alphas=[5.0], input_box=fc.input_box)
    kappa, dt = 5.0, 0.01
    for x0 in ([-9.0, 15.0], [-7.0, -5.0], [-4.0, 20.0]):
        cfg = SimConfig(x_init=x0, x_goal=[0.0, 0.0], horizon_T=10.0, dt=dt, kp=10.0)
        traj = simulate(cfg, sysm, pair, fc2)
        assert set(traj.qp_statuses) == {STATUS_OPTIMAL}
        h = traj.h_values
        zoh = 0.5 * dt * dt * np.abs(traj.filtered_inputs[:-1])
        bound = h[:-1] * (1.0 - kappa * dt) - 1e-6 * (1.0 + np.abs(h[:-1])) - zoh
        assert np.all(h[1:] >= bound)


def test_check_invariance_trivial(di):
    sysm, _ = di
    fc = FilterConfig(alphas=[5.0], input_box=BoxSet([-300.0], [300.0]))
    cfg = SimConfig(x_init=[-5.0, 0.0], x_goal=[-5.0, 0.0], horizon_T=0.01, dt=0.01,
                    kp=10.0)
    traj = simulate(cfg, sysm, [identity_candidate(2)], fc)
    rep = check_invariance(traj, [identity_candidate(2)], sysm.hcf)
    assert rep.h_ok and rep.z_ok and rep.infeasible_steps == 0
    assert rep.min_h[0] >= 0.0


def test_interior_grid_clearance(di):
    sysm, input_box = di
    cands = [STEEP]
    starts = interior_grid(cands, REFERENCE_BOUNDS, sysm, input_box, per_axis=20,
                           dt=0.01)
    rates = hdot_rate_bound(cands, REFERENCE_BOUNDS, sysm, input_box)
    eta = 1.5 * 0.01 * rates[0]
    assert starts.shape[0] > 100
    for x in starts[:: max(1, len(starts) // 50)]:
        assert eval_h(STEEP, sysm.hcf, x) >= eta - 1e-12
    assert np.all(REFERENCE_BOUNDS.contains(starts))


def test_trajectory_csv_export(tmp_path, di, fc):
    sysm, _ = di
    cfg = SimConfig(x_init=[-9.0, 0.0], x_goal=[0.0, 0.0], horizon_T=0.05, dt=0.01,
                    kp=10.0)
    pair = [identity_candidate(2), CAP_CANDIDATE]
    fc2 = FilterConfig(alphas=[5.0], input_box=fc.input_box)
    traj = simulate(cfg, sysm, pair, fc2)
    path = tmp_path / "traj.csv"
    digest = traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,x2,u_nom_1,u_1,h_1,h_2,z,status"
    assert len(lines) == len(traj) + 1
    first = lines[1].split(",")
    assert float(first[1]) == -9.0
    assert first[-1] == STATUS_OPTIMAL
    assert len(digest) == 64


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(x_init=[0.0, 0.0], x_goal=[0.0, 0.0], horizon_T=1.0, dt=0.0, kp=1.0)
    with pytest.raises(ValueError):
        SimConfig(x_init=[0.0, 0.0], x_goal=[0.0, 0.0], horizon_T=-1.0, dt=0.1, kp=1.0)
    with pytest.raises(ValueError):
        SimConfig(x_init=[0.0, 0.0], x_goal=[0.0, 0.0], horizon_T=1.0, dt=0.1, kp=1.0,
                  on_infeasible="explode")
    with pytest.raises(ValueError):
        FilterConfig(alphas=[0.0], input_box=BoxSet([-1.0], [1.0]))
