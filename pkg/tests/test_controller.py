import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgs_sim.controller import (
    ControllerState,
    LoopDivergence,
    PidConfig,
    closed_loop_track,
    controller_step,
    delay_quantization_sweep,
    quantize,
    track,
)
from sdgs_sim.geometry import GroundSite, OrbitElements
from sdgs_sim.uncertainty import ResidualSample, Scenario


def pid_oracle(errors, kp, ki, kd, t_fb, d):
    """Direct summation of the delayed PID law, no state carried between ticks."""
    out = []
    for k in range(len(errors)):
        j = k - d
        if j < 0:
            out.append(0.0)
            continue
        prev = errors[j - 1] if j >= 1 else 0.0
        out.append(kp * errors[j] + ki * t_fb * sum(errors[: j + 1]) + kd * (errors[j] - prev) / t_fb)
    return out


def run_steps(cfg, errors):
    state = ControllerState.for_loop(cfg)
    us = []
    for e in errors:
        u, state = controller_step(cfg, state, e)
        us.append(u)
    return us, state


# quantize


def test_quantize_examples():
    assert quantize(0.33e-6, 0.1e-6) == pytest.approx(0.3e-6, abs=1e-18)
    assert quantize(1.2345, 0.0) == 1.2345
    assert quantize(-0.05, 0.1) == pytest.approx(-0.1)
    assert quantize(0.05, 0.1) == pytest.approx(0.1)
    assert quantize(0.0, 0.1) == 0.0


def test_quantize_rejects_negative_step():
    with pytest.raises(ValueError):
        quantize(1.0, -0.1)


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 10))
def test_quantize_properties(x, step):
    q = quantize(x, step)
    assert abs(q - x) <= step / 2 * (1 + 1e-9)
    assert abs(q / step - round(q / step)) < 1e-6
    assert quantize(-x, step) == -q


# controller_step


def test_zero_history_gives_zero_output():
    cfg = PidConfig(kp=0.6, ki=8.0, kd=0.002, d_fb_s=0.01)
    us, _ = run_steps(cfg, [0.0] * 10)
    assert us == [0.0] * 10


def test_proportional_only():
    cfg = PidConfig(kp=0.5, ki=0.0, kd=0.0, d_fb_s=0.0)
    u, _ = controller_step(cfg, ControllerState.for_loop(cfg), 2.0)
    assert u == 1.0


def test_delay_index_tolerates_float_ratios():
    assert PidConfig(t_fb_s=0.01, d_fb_s=0.03).delay_index == 3
    assert PidConfig(t_fb_s=0.01, d_fb_s=0.015).delay_index == 1
    assert PidConfig(t_fb_s=0.005, d_fb_s=0.0).delay_index == 0


@pytest.mark.parametrize("kw", [dict(t_fb_s=0.0), dict(d_fb_s=-1.0), dict(quant_f_hz=-1.0),
                                dict(integral_limit_tau_s=0.0)])
def test_pid_config_validation(kw):
    with pytest.raises(ValueError):
        PidConfig(**kw)


def test_matches_oracle_on_50_steps():
    rng = np.random.default_rng(3)
    errors = rng.normal(size=50).tolist()
    cfg = PidConfig(kp=0.7, ki=3.0, kd=0.004, t_fb_s=0.01, d_fb_s=0.02)
    us, _ = run_steps(cfg, errors)
    assert us == pid_oracle(errors, 0.7, 3.0, 0.004, 0.01, 2)


def test_matches_oracle_on_1000_random_sequences():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        d = int(rng.integers(0, 5))
        t_fb = float(rng.choice([0.005, 0.01, 0.02]))
        kp, ki, kd = rng.uniform(0, 2), rng.uniform(0, 20), rng.uniform(0, 0.01)
        errors = (rng.normal(size=n) * 10 ** rng.uniform(-7, 3)).tolist()
        cfg = PidConfig(kp=kp, ki=ki, kd=kd, t_fb_s=t_fb, d_fb_s=d * t_fb)
        us, _ = run_steps(cfg, errors)
        assert us == pid_oracle(errors, kp, ki, kd, t_fb, d)


def test_history_is_bounded():
    cfg = PidConfig(d_fb_s=0.015)
    _, state = run_steps(cfg, list(range(100)))
    assert len(state.error_history) == cfg.delay_index + 2
    assert state.k == 100


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=60), st.floats(0.01, 5))
@settings(max_examples=60)
def test_integral_clamp_holds(errors, limit):
    cfg = PidConfig(kp=0.2, ki=5.0)
    state = ControllerState.for_loop(cfg, integral_limit=limit)
    for e in errors:
        _, state = controller_step(cfg, state, e)
        assert abs(cfg.t_fb_s * state.integral_acc) <= limit * (1 + 1e-12)


# closed loop


def replay(open_loop, cfg, step, limit=math.inf):
    """Step-by-step replay of residual = open - c, c += quantize(u)."""
    state = ControllerState.for_loop(cfg, integral_limit=limit)
    c, out = 0.0, []
    for x in open_loop:
        e = x - c
        out.append(e)
        u, state = controller_step(cfg, state, e)
        c += quantize(u, step)
    return out


def test_track_matches_step_replay_exactly():
    rng = np.random.default_rng(5)
    x = np.cumsum(rng.normal(size=3000)) * 1e-7 + 2e-6
    cfg = PidConfig(kp=0.3, ki=6.0, kd=0.001, d_fb_s=0.01)
    for step, limit in ((1e-7, math.inf), (0.0, 1e-9), (5e-7, 1e-6)):
        assert track(x, cfg, step, limit).tolist() == replay(x.tolist(), cfg, step, limit)


def test_zero_open_loop_stays_zero():
    t = np.arange(400) * 0.005
    z = np.zeros_like(t)
    res = closed_loop_track(PidConfig(), ResidualSample(t, z, z))
    assert not np.any(res.dtau_closed_s) and not np.any(res.dcfo_closed_hz)


def test_constant_bias_is_removed_by_integral_action():
    cfg = PidConfig(kp=0.2, ki=4.0, kd=0.0, d_fb_s=0.0)
    x = np.full(2000, 3.0e-6)
    e = track(x, cfg, cfg.quant_tau_s)
    assert np.all(np.abs(e[-500:]) < cfg.quant_tau_s)


@pytest.mark.parametrize("offset", [0.35, 0.33, 0.71])
def test_quantization_floor(offset):
    # corrections are multiples of the step, so |e| never beats the distance to the grid
    step = 0.1
    cfg = PidConfig(kp=0.4, ki=2.0, kd=0.0, quant_tau_s=step)
    e = track(np.full(1500, offset), cfg, step)
    floor = abs(offset - round(offset / step) * step)
    assert np.all(np.abs(e) >= floor - 1e-12)
    if offset == 0.35:
        assert np.all(np.abs(e[-200:]) >= step / 2 - 1e-12)


def test_list_input_returns_list_of_samples():
    t = np.arange(50) * 0.005
    traj = [ResidualSample(float(a), 1e-6, 100.0) for a in t]
    out = closed_loop_track(PidConfig(), traj)
    assert isinstance(out, list) and len(out) == 50
    assert out[0].dtau_closed_s == 1e-6 and out[0].dcfo_open_hz == 100.0


def test_wrong_sampling_period_rejected():
    t = np.arange(50) * 0.01
    with pytest.raises(ValueError):
        closed_loop_track(PidConfig(t_fb_s=0.005), ResidualSample(t, np.zeros(50), np.zeros(50)))


def test_divergence_detected():
    rng = np.random.default_rng(2)
    t = np.arange(4000) * 0.005
    x = rng.normal(size=4000) * 1e-6
    with pytest.raises(LoopDivergence):
        closed_loop_track(PidConfig(kp=1.5, ki=0.0, kd=0.0, d_fb_s=0.02, quant_tau_s=0.0, quant_f_hz=0.0),
                          ResidualSample(t, x, x * 1e8))


def test_sweep_marks_unstable_rows_and_keeps_going():
    sc = Scenario.longest_pass(GroundSite("Shenzhen", 22.5, 114.0), OrbitElements())
    rows = delay_quantization_sweep(sc, [(5.0, 5.0, 0.1, 50.0), (5.0, 100.0, 0.1, 50.0)], n_runs=20,
                                    duration_s=4.0, warmup_s=1.0)
    assert rows[0].stable and rows[0].ta_p95_us > 0
    assert not rows[1].stable and rows[1].ta_p95_us is None
    assert rows[1].as_csv()[-1] == "false"


def test_sweep_needs_twenty_runs():
    sc = Scenario.longest_pass(GroundSite("Shenzhen", 22.5, 114.0), OrbitElements())
    with pytest.raises(ValueError):
        delay_quantization_sweep(sc, n_runs=5)
