import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from livingarch.sculpture import (
    ActuatorEnvelope, IrFrame, NodeTopology, Sculpture, led_drive_level, raw_to_intensity,
    read_frames_jsonl, scale_distance_to_reading, write_frames_jsonl,
)
from livingarch.visitors import Visitor


def test_distance_scaling_examples():
    assert scale_distance_to_reading(80.0) == 0.0
    assert scale_distance_to_reading(10.0) == 1.0
    assert scale_distance_to_reading(45.0) == pytest.approx(0.5, abs=1e-15)
    assert scale_distance_to_reading(200.0) == 0.0
    assert scale_distance_to_reading(3.0) == 1.0


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_distance_scaling_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        scale_distance_to_reading(bad)


@given(st.floats(0.01, 500), st.floats(0.01, 500))
def test_distance_scaling_monotone(a, b):
    lo, hi = sorted((a, b))
    assert scale_distance_to_reading(lo) >= scale_distance_to_reading(hi)
    assert 0.0 <= scale_distance_to_reading(a) <= 1.0


def test_default_envelope_shape():
    env = ActuatorEnvelope("led", 1.5, 1.0, 2.5, 0.78, start_time=10.0)
    assert env.intensity(10.0) == 0.0
    assert env.intensity(11.5) == pytest.approx(0.78)
    assert env.intensity(15.0) == 0.0
    assert env.intensity(12.0) == pytest.approx(0.78)
    assert env.intensity(13.75) == pytest.approx(0.39)


def test_envelope_validation():
    with pytest.raises(ValueError):
        ActuatorEnvelope("led", -1.0, 1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        ActuatorEnvelope("led", 1.0, 1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        ActuatorEnvelope("fan", 1.0, 1.0, 1.0, 0.5)


@given(st.floats(0.1, 5), st.floats(0, 5), st.floats(0.1, 5), st.floats(0, 1), st.floats(0, 20))
def test_envelope_is_lipschitz(ru, ho, rd, peak, t):
    env = ActuatorEnvelope("moth", ru, ho, rd, peak)
    dt = 0.01
    bound = peak * dt * max(1.0 / ru, 1.0 / rd) + 1e-12
    # a jump is only allowed when the step crosses the envelope end
    if not (t < env.duration <= t + dt):
        assert abs(env.intensity(t + dt) - env.intensity(t)) <= bound


def test_step_twice_equals_double_step():
    env = ActuatorEnvelope("led", 1.5, 1.0, 2.5, 0.78, start_time=0.0)
    a, b = Sculpture(), Sculpture()
    a.activate(3, "led", env)
    b.activate(3, "led", env)
    for _ in range(17):
        a.step(0.1)
        a.step(0.1)
        b.step(0.2)
        assert a.sim_time == b.sim_time
        assert a.intensity(3, "led") == b.intensity(3, "led")


def test_step_rejects_fractional_ticks():
    with pytest.raises(ValueError):
        Sculpture().step(0.15)


def test_sim_time_has_no_drift():
    s = Sculpture()
    for _ in range(10000):
        s.step()
    assert s.sim_time == 1000.0


def test_led_activation_rises_from_zero():
    s = Sculpture()
    assert s.activate(3, "led", ActuatorEnvelope("led", 1.5, 1.0, 2.5, 0.78, 0.0))
    assert s.intensity(3, "led") == 0.0
    s.step()
    assert s.intensity(3, "led") > 0.0


def test_sma_cooldown_skips_second_activation():
    s = Sculpture()
    assert s.activate(0, "sma", index=2)
    s.step(1.0)
    assert not s.activate(0, "sma", index=2)
    assert s.skipped["sma"] == 1
    assert s.sma_cooldown_until[0, 2] == pytest.approx(12.0)
    s.step(11.0)
    assert s.activate(0, "sma", index=2)


def test_activate_out_of_range_node():
    with pytest.raises(IndexError):
        Sculpture().activate(24, "led", ActuatorEnvelope("led", 1, 1, 1, 1))


def test_busy_led_ignores_reactivation():
    s = Sculpture()
    env = ActuatorEnvelope("led", 1.0, 1.0, 1.0, 1.0, 0.0)
    assert s.activate(1, "led", env)
    assert not s.activate(1, "led", env.at(1.0))
    assert s.activate(1, "led", env.at(3.0))


def test_raw_action_mapping():
    assert raw_to_intensity(-1.0) == 0.0
    assert raw_to_intensity(1.0) == 1.0
    assert raw_to_intensity(0.0) == 0.5
    assert led_drive_level(1.0) == 255
    assert led_drive_level(0.0) == 0


def test_apply_raw_action_layout_and_clipping():
    s = Sculpture()
    raw = -np.ones(s.raw_actuator_count)
    raw[24 + 5] = 1.0      # LED 5 full
    raw[0] = 0.0           # moth 0 half
    raw[48 + 6 * 2 + 3] = 0.0   # SMA 3 of node 2 on
    raw[1] = 3.0           # out of range, clipped
    s.apply_raw_action(raw)
    assert s.intensity(5, "led") == 1.0
    assert s.intensity(0, "moth") == 0.5
    assert s.intensity(1, "moth") == 1.0
    assert s.intensity(2, "sma", 3) == 1.0
    assert s.intensity(2, "sma", 2) == 0.0
    assert s.clip_warnings == 1
    with pytest.raises(ValueError):
        s.apply_raw_action(np.zeros(10))


def _visitor(x, y, reach):
    return Visitor(0, "wanderer", np.array([x, y]), 0.0, 1e9, reach, reach)


def test_ir_frame_without_visitors_is_zero():
    f = Sculpture().read_ir_frame([])
    assert f.readings.shape == (24,)
    assert not f.readings.any()


def test_hand_ten_cm_under_sensor():
    s = Sculpture()
    pos = s.topology.positions[8]
    top = s.topology.heights[8] - 0.10
    f = s.read_ir_frame([_visitor(pos[0], pos[1], top)])
    assert f.readings[8] == pytest.approx(1.0)
    assert f.readings.sum() == pytest.approx(1.0)


def _brute_reading(s, visitors, i):
    best = 0.0
    for v in visitors:
        planar = math.dist(s.topology.positions[i], v.position)
        vertical = max(s.topology.heights[i] - v.reach_height, 0.0)
        if planar <= math.tan(math.radians(30)) * vertical + 1e-12:
            best = max(best, scale_distance_to_reading(max(math.hypot(planar, vertical) * 100, 1e-6)))
    return best


@given(st.lists(st.tuples(st.floats(-0.5, 5.5), st.floats(-0.5, 3.5), st.floats(1.0, 2.3)), max_size=4))
def test_ir_reading_is_max_over_visitors(placements):
    s = Sculpture()
    visitors = [_visitor(*v) for v in placements]
    f = s.read_ir_frame(visitors)
    assert np.all((f.readings >= 0) & (f.readings <= 1))
    for i in range(24):
        assert f.readings[i] == pytest.approx(_brute_reading(s, visitors, i), abs=1e-12)


def test_ir_frames_are_reproducible():
    s1, s2 = Sculpture(), Sculpture()
    v = [_visitor(2.0, 1.0, 2.0), _visitor(2.1, 1.1, 1.9)]
    assert np.array_equal(s1.read_ir_frame(v).readings, s2.read_ir_frame(v).readings)


def test_ir_frame_validation_and_jsonl_roundtrip():
    with pytest.raises(ValueError):
        IrFrame(0.0, np.array([0.5, 1.2]))
    frames = [IrFrame(0.1 * k, np.linspace(0, 1, 24) * k / 3) for k in range(4)]
    buf = io.StringIO()
    write_frames_jsonl(frames, buf)
    back = read_frames_jsonl(io.StringIO(buf.getvalue()))
    assert [f.timestamp for f in back] == [round(f.timestamp, 6) for f in frames]
    assert all(np.array_equal(a.readings, b.readings) for a, b in zip(frames, back))


def test_grid_topology():
    t = NodeTopology.grid()
    assert t.node_count == 24
    assert max(t.distances(0)) == 8
    assert len(t.columns()) == 6
    assert all(i in t.adjacency[j] for i in range(24) for j in t.adjacency[i])
    assert 7 not in t.edge_nodes and 0 in t.edge_nodes


def test_topology_validation():
    with pytest.raises(ValueError):
        NodeTopology([(0, 0), (1, 0)], [[1], []], [0])
    with pytest.raises(ValueError):
        NodeTopology([(0, 0), (1, 0), (2, 0)], [[1], [0], []], [0])


def test_topology_yaml(tmp_path):
    p = tmp_path / "topo.yaml"
    p.write_text("grid: {rows: 2, cols: 3, spacing_m: 0.5}\n")
    t = NodeTopology.from_yaml(p)
    assert t.node_count == 6 and t.positions[5].tolist() == [1.0, 0.5]
    p.write_text("grid: {rows: 2, colz: 3}\n")
    with pytest.raises(ValueError):
        NodeTopology.from_yaml(p)
