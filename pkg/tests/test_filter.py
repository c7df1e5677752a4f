import numpy as np
import pytest

import ampsc.filter as filter_module
from ampsc.certifier import QpReport, build_and_solve
from ampsc.estimation import ParamBox, contains
from ampsc.filter import (FilterState, RecursiveFeasibilityBroken, RunOptions,
                          SafetyEnvelopeExceeded, certify, make_source, run_closed_loop,
                          terminal_policy)
from ampsc.geometry import Box, box_vertices
from ampsc.plant import TrueSystem, assemble, in_constraints
from ampsc.terminal import SafeSetUnion, union_membership

from toys import THETA_STAR, double_integrator, toy_setup

FAR = np.array([0.95, 0.95])        # inside the constraints, outside every feasible set


def run_trace(states, proposals, mode="switching"):
    _, theta0, cfg, terminal = toy_setup()
    state = FilterState.initial(cfg.horizon, mode)
    steps = []
    for x, u in zip(states, proposals):
        step, state = certify(state, np.asarray(x, float), np.array([u]), theta0, terminal, cfg)
        steps.append(step)
    return steps, state


def test_switching_trace_matches_hand_derivation():
    _, _, cfg, _ = toy_setup()
    states = [(0.0, 0.0), (0.0, 0.6), FAR, FAR, FAR, FAR, (0.0, 0.0)]
    with pytest.warns(SafetyEnvelopeExceeded):
        steps, state = run_trace(states, [0.0, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert [s.branch for s in steps] == ["passthrough", "corrected", "backup_replay",
                                         "backup_replay", "terminal_policy", "terminal_policy",
                                         "passthrough"]
    assert [s.replay_index for s in steps[2:4]] == list(range(1, cfg.horizon))
    assert [s.k_inf for s in steps] == [0, 0, 1, 2, 3, 3, 0]
    # replay applies the stored input with feedback on the measured state
    plan = steps[1].qp.tube
    for s in steps[2:4]:
        np.testing.assert_allclose(s.u_applied, cfg.K @ FAR + plan.v[s.replay_index])
    assert state.step == len(states) and state.k_inf == 0


def test_passthrough_returns_the_proposal():
    steps, _ = run_trace([(0.0, 0.0)], [0.0])
    assert steps[0].branch == "passthrough"
    np.testing.assert_array_equal(steps[0].u_applied, [0.0])
    assert steps[0].gap == pytest.approx(0.0, abs=1e-4)


def test_infeasible_before_any_plan_goes_to_the_terminal_policy():
    with pytest.warns(SafetyEnvelopeExceeded):
        steps, state = run_trace([FAR], [0.0])
    assert steps[0].branch == "terminal_policy" and state.k_inf == 3


def test_recursive_mode_raises_on_infeasibility():
    with pytest.raises(RecursiveFeasibilityBroken):
        run_trace([(0.0, 0.0), FAR], [0.0, 0.0], mode="recursive")


def test_shrinking_mode_retries_with_a_shorter_horizon(monkeypatch):
    _, theta0, cfg, terminal = toy_setup()
    calls = []

    def full_horizon_fails(*args, horizon_override=None, **kw):
        # with an invariant terminal set the short problem is never easier, so force the case
        calls.append(horizon_override)
        if horizon_override is None:
            return QpReport("infeasible")
        return build_and_solve(*args, horizon_override=horizon_override, **kw)

    monkeypatch.setattr(filter_module, "build_and_solve", full_horizon_fails)
    state = FilterState(k_inf=0, mode="shrinking", step=1)
    step, nxt = certify(state, np.array([0.0, 0.3]), np.array([0.9]), theta0, terminal, cfg)
    assert calls == [None, cfg.horizon - 1]
    assert step.branch == "corrected" and nxt.k_inf == 1
    assert nxt.backup.horizon == cfg.horizon - 1 and nxt.backup_step == 1
    # once the shortest retry is used up, replay takes over
    step, nxt = certify(FilterState(k_inf=cfg.horizon - 1, mode="shrinking", step=5,
                                    backup=nxt.backup, backup_step=4),
                        np.array([0.0, 0.3]), np.array([0.9]), theta0, terminal, cfg)
    assert step.branch == "terminal_policy" and nxt.k_inf == cfg.horizon


def test_shrinking_mode_without_shortcut_replays():
    steps, st = run_trace([(0.0, 0.6), FAR], [0.9, 0.0], mode="shrinking")
    assert steps[1].branch == "backup_replay" and st.k_inf == 1
    with pytest.raises(ValueError):
        FilterState.initial(3, "other")


def test_terminal_policy_examples():
    _, theta0, cfg, terminal = toy_setup()
    u, kept = terminal_policy(np.zeros(1), np.zeros(2), theta0, terminal, cfg)
    assert kept and u[0] == 0.0
    x = np.array([0.05, 0.0])
    u, kept = terminal_policy(np.array([3.0]), x, theta0, terminal, cfg)
    assert not kept
    np.testing.assert_allclose(u, cfg.K @ x, atol=1e-9)
    with pytest.warns(SafetyEnvelopeExceeded):
        u, kept = terminal_policy(np.array([3.0]), FAR, theta0, terminal, cfg)
    assert abs(u[0]) <= 1.0


def test_terminal_policy_backup_keeps_successors_safe():
    """Near the top of the terminal segment an outward proposal is replaced and every vertex successor stays safe."""
    model, theta0, cfg, terminal = toy_setup()
    x = 0.9 * cfg.X0.vertices()[0]
    u, kept = terminal_policy(np.array([1.0]), x, theta0, terminal, cfg)
    assert not kept
    safe = SafeSetUnion(None, terminal, cfg.X0.H)
    for th in theta0.vertices():
        a, b = assemble(model, th)
        for w in box_vertices(model.disturbance):
            assert union_membership(safe, a @ x + b @ u + w)


def test_closed_loop_passes_through_a_stabilizing_law_when_nothing_is_uncertain():
    model, _, cfg, terminal = toy_setup()
    exact = ParamBox(Box([THETA_STAR], [0.0]))
    sys = TrueSystem(model, [THETA_STAR], seed=0, disturbance_mode="zero")
    log = run_closed_loop(sys, lambda x, k: cfg.K @ x, 30, cfg, exact, terminal,
                          RunOptions(x0=np.array([0.2, -0.1])))
    assert set(log.branch_trace()) == {"passthrough"}
    assert log.violations == 0


def test_closed_loop_adversarial_source_stays_safe():
    model, theta0, cfg, terminal = toy_setup()
    sys = TrueSystem(model, [THETA_STAR], seed=1, disturbance_mode="adversarial")
    log = run_closed_loop(sys, make_source("adversarial-bound", model, 1), 60, cfg, theta0,
                          terminal)
    assert log.violations == 0
    assert any(b != "passthrough" for b in log.branch_trace())
    for row in log.rows:
        assert in_constraints(model, row["x"], row["u_applied"])
    for th in log.thetas:
        assert contains(th, [THETA_STAR])
    assert log.final_theta.half_widths[0] < theta0.half_widths[0]


def test_frozen_box_never_beats_adaptation():
    """Feasible under the initial box implies feasible under the adapted box, state by state."""
    model, theta0, cfg, terminal = toy_setup()
    sys = TrueSystem(model, [THETA_STAR], seed=2, disturbance_mode="uniform")
    log = run_closed_loop(sys, make_source("uniform-random", model, 2), 40, cfg, theta0, terminal)
    for x, th in zip(log.states, log.thetas):
        if build_and_solve(x, np.zeros(1), theta0, terminal, cfg, objective="feasibility").feasible:
            assert build_and_solve(x, np.zeros(1), th, terminal, cfg,
                                   objective="feasibility").feasible


def test_run_log_outputs(tmp_path):
    model, theta0, cfg, terminal = toy_setup()
    sys = TrueSystem(model, [THETA_STAR], seed=3)
    log = run_closed_loop(sys, make_source("pd-setpoint", model, 3), 10, cfg, theta0, terminal)
    names = log.write(tmp_path)
    header = (tmp_path / names["run"]).read_text().splitlines()[0].split(",")
    assert {"step", "x_0", "u_learn_0", "u_applied_0", "branch", "gap", "k_inf",
            "theta_center_0", "theta_half_widths_0", "solve_time"} <= set(header)
    summary = log.summary()
    assert summary["violations"] == 0 and summary["steps"] == 10
    assert sum(summary["branch_counts"].values()) == 10
    with pytest.raises(ValueError):
        make_source("learned", model)


def test_source_inputs_stay_in_the_input_box():
    model = double_integrator()
    for name in ("uniform-random", "pd-setpoint", "adversarial-bound"):
        src = make_source(name, model, 0)
        rng = np.random.default_rng(0)
        for k in range(50):
            u = src(rng.uniform(-1, 1, 2), k)
            assert u.shape == (1,)
            if name != "pd-setpoint":
                assert abs(u[0]) <= 1.0
