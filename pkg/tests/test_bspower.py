import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepzoom import bspower as bp
from sleepzoom.bspower import BsStatus, SmState, ZoomLevel

TABLE = bp.PowerTimingTable()
A, I, MI, L, D = SmState


def test_legal_targets_examples():
    assert bp.legal_targets(BsStatus(mode=I)) == {A, I, MI}
    assert bp.legal_targets(BsStatus(mode=D)) == {L, D}
    assert bp.legal_targets(BsStatus(mode=MI, hold_remaining=0.05)) == {MI}
    mid = bp.begin_transition(BsStatus(mode=L), D, TABLE)
    assert bp.legal_targets(mid) == set()


def test_begin_transition_examples():
    s = bp.begin_transition(BsStatus(mode=L), D, TABLE)
    assert s.transition.remaining == 10.0 and s.transition.target is D
    s = bp.begin_transition(BsStatus(mode=A), I, TABLE)
    assert s.mode is I and s.transition is None
    s0 = BsStatus(mode=MI)
    assert bp.begin_transition(s0, MI, TABLE) == s0
    with pytest.raises(bp.TransitionError):
        bp.begin_transition(BsStatus(mode=A), MI, TABLE)


def test_slot_energy_examples():
    _, e = bp.advance_slot(BsStatus(mode=D), TABLE, 1.0)
    assert e.total_j == pytest.approx(3.0e-4, abs=1e-18)
    s = bp.begin_transition(BsStatus(mode=I), MI, TABLE)
    _, e = bp.advance_slot(s, TABLE, 1.0)
    assert e.total_j == pytest.approx(2.3 * 7.1e-5 + 1.5 * 9.29e-4, abs=1e-15)
    assert e.total_j == pytest.approx(1.5568e-3, abs=1e-15)
    _, e = bp.advance_slot(BsStatus(mode=A, zoom=ZoomLevel.NO_ZOOM), TABLE, 0.5)
    assert e.total_j == pytest.approx(3.45e-3, abs=1e-15)


def test_coverage_radius_defaults():
    assert bp.coverage_radius(ZoomLevel.ZOOM_IN) == 40.0
    assert bp.coverage_radius(ZoomLevel.NO_ZOOM) == 50.0
    assert bp.coverage_radius(ZoomLevel.ZOOM_OUT) == 60.0
    assert bp.coverage_radius(ZoomLevel.ZOOM_OUT, {ZoomLevel.ZOOM_OUT: 70.0}) == 70.0


def test_system_energy_examples():
    led = bp.EnergyLedger()
    led.record(bp.advance_slot(BsStatus(mode=D), TABLE, 1.0)[1])
    assert bp.system_energy([led]) == pytest.approx(3.0e-4, abs=1e-18)
    assert bp.system_energy([bp.EnergyLedger()], True, 1.5e-3, 1.0, 128) == pytest.approx(0.192, abs=1e-15)
    assert bp.system_energy([]) == 0.0


def test_power_ordering_enforced():
    with pytest.raises(ValueError):
        bp.PowerTimingTable(idle_power=1.0)  # below Micro
    with pytest.raises(ValueError):
        bp.PowerTimingTable(active_power=(7.0, 6.9, 7.3))
    with pytest.raises(ValueError):
        bp.PowerTimingTable(deep_power=0.4)


def test_table_defaults():
    assert TABLE.active_power == (6.6, 6.9, 7.3)
    assert (TABLE.idle_power, TABLE.micro_power, TABLE.light_power, TABLE.deep_power) == (2.3, 1.5, 0.4, 0.3)
    assert TABLE.transition_ms == (0.071, 1.0, 10.0)
    assert TABLE.hold_ms == (0.07, 1.0, 0.0)


# targets of a fixed 20-slot script and the hand-computed energy of each slot (mJ)
SCRIPT = [
    (I, 2.3),  # Active -> Idle is instant
    (MI, 0.071 * 2.3 + 0.929 * 1.5),  # 1.5568
    (L, 1.0 * 1.5),  # 1 ms transition at Micro power fills the slot
    (L, 0.4),  # Light hold of 1 ms
    (MI, 1.0 * 0.4),  # Light -> Micro at Light power
    (MI, 1.5),  # Micro hold forces a stay
    (I, 0.071 * 1.5 + 0.929 * 2.3),  # 2.2432
    (A, 6.9),
    (A, 6.9),
    (I, 2.3),
    (MI, 1.5568),
    (L, 1.5),
    (L, 0.4),
    (D, 0.4),  # 10 ms at Light power, slots 14..20
    (D, 0.4), (D, 0.4), (D, 0.4), (D, 0.4), (D, 0.4), (D, 0.4),
]
SCRIPT_TOTAL_J = 32.2568e-3


def test_scripted_scenario_total():
    s, led = BsStatus(), bp.EnergyLedger()
    for target, mj in SCRIPT:
        if s.transition is None:
            s = bp.begin_transition(s, target, TABLE)
        s, e = bp.advance_slot(s, TABLE, 1.0)
        assert e.total_j == pytest.approx(mj * 1e-3, abs=1e-15)
        led.record(e)
    assert sum(mj for _, mj in SCRIPT) * 1e-3 == pytest.approx(SCRIPT_TOTAL_J, abs=1e-15)
    assert led.cumulative_j == pytest.approx(SCRIPT_TOTAL_J, abs=1e-15)
    assert led.recomputed() == pytest.approx(led.cumulative_j, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
def test_random_legal_walks(seed, slot_len):
    """Duration partition, chain adjacency, busy BSs never serve, ledger nondecreasing."""
    rng = np.random.default_rng(seed)
    s, led = BsStatus(), bp.EnergyLedger()
    prev_total = 0.0
    for _ in range(300):
        legal = sorted(bp.legal_targets(s))
        if legal:
            tgt = legal[rng.integers(len(legal))]
            assert abs(int(tgt) - int(s.mode)) <= 1
            s = bp.begin_transition(s, tgt, TABLE)
        if s.busy:
            assert not s.serving
            assert bp.legal_targets(s) == set()
        before = s.mode
        s, e = bp.advance_slot(s, TABLE, slot_len)
        assert sum(e.durations_ms) == slot_len
        assert abs(int(s.mode) - int(before)) <= 1
        led.record(e)
        assert led.cumulative_j >= prev_total
        prev_total = led.cumulative_j


def test_chain_legality_1e5_steps():
    rng = np.random.default_rng(7)
    s = BsStatus()
    visited = [s.mode]
    for _ in range(100_000):
        legal = sorted(bp.legal_targets(s))
        if legal:
            s = bp.begin_transition(s, legal[rng.integers(len(legal))], TABLE)
        s, e = bp.advance_slot(s, TABLE, 1.0)
        if s.mode != visited[-1]:
            assert abs(int(s.mode) - int(visited[-1])) == 1
            visited.append(s.mode)
    assert set(visited) == set(SmState)
