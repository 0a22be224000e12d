"""Five-state sleep-mode automaton, cell zoom coverage and per-slot energy.

Times are in milliseconds and powers in watts, so ``power * duration`` is in
millijoules; the public energy functions return joules.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Optional


class TransitionError(ValueError):
    """Requested sleep-mode target is not reachable from the current status."""


class SmState(IntEnum):
    ACTIVE = 0
    IDLE = 1
    MICRO = 2
    LIGHT = 3
    DEEP = 4


class ZoomLevel(IntEnum):
    ZOOM_IN = 0
    NO_ZOOM = 1
    ZOOM_OUT = 2


N_SM = len(SmState)
N_ZOOM = len(ZoomLevel)

DEFAULT_RADII = {ZoomLevel.ZOOM_IN: 40.0, ZoomLevel.NO_ZOOM: 50.0, ZoomLevel.ZOOM_OUT: 60.0}


def coverage_radius(zoom: ZoomLevel, radii: Optional[dict] = None) -> float:
    return float((radii or DEFAULT_RADII)[ZoomLevel(zoom)])


@dataclass(frozen=True)
class PowerTimingTable:
    active_power: tuple = (6.6, 6.9, 7.3)  # indexed by ZoomLevel
    idle_power: float = 2.3
    micro_power: float = 1.5
    light_power: float = 0.4
    deep_power: float = 0.3
    # transition time charged to a hop whose deeper endpoint is the key
    transition_ms: tuple = (0.071, 1.0, 10.0)  # Micro, Light, Deep
    hold_ms: tuple = (0.07, 1.0, 0.0)  # Micro, Light, Deep

    def __post_init__(self):
        a_in, a_none, a_out = self.active_power
        chain = [a_out, a_none, a_in, self.idle_power, self.micro_power, self.light_power, self.deep_power]
        if any(p <= q for p, q in zip(chain, chain[1:])):
            raise ValueError(
                "power table must be strictly decreasing "
                "Active(out) > Active(none) > Active(in) > Idle > Micro > Light > Deep, got "
                f"{chain}"
            )
        if chain[-1] < 0:
            raise ValueError("powers must be non-negative")
        if any(t < 0 for t in (*self.transition_ms, *self.hold_ms)):
            raise ValueError("transition and hold times must be >= 0")

    def power(self, mode: SmState, zoom: ZoomLevel = ZoomLevel.NO_ZOOM) -> float:
        mode = SmState(mode)
        if mode is SmState.ACTIVE:
            return self.active_power[ZoomLevel(zoom)]
        return {
            SmState.IDLE: self.idle_power,
            SmState.MICRO: self.micro_power,
            SmState.LIGHT: self.light_power,
            SmState.DEEP: self.deep_power,
        }[mode]

    def transition_time(self, a: SmState, b: SmState) -> float:
        deeper = max(SmState(a), SmState(b))
        if deeper <= SmState.IDLE:
            return 0.0  # Active <-> Idle is a fast transition
        return self.transition_ms[deeper - SmState.MICRO]

    def hold_time(self, mode: SmState) -> float:
        if mode < SmState.MICRO:
            return 0.0
        return self.hold_ms[SmState(mode) - SmState.MICRO]

    def min_power(self, deepest: SmState = SmState.DEEP) -> float:
        return self.power(deepest)


@dataclass(frozen=True)
class Transition:
    target: SmState
    remaining: float
    start_mode: SmState


@dataclass(frozen=True)
class BsStatus:
    mode: SmState = SmState.ACTIVE
    zoom: ZoomLevel = ZoomLevel.NO_ZOOM
    transition: Optional[Transition] = None
    hold_remaining: float = 0.0

    @property
    def busy(self) -> bool:
        return self.transition is not None

    @property
    def serving(self) -> bool:
        return self.mode is SmState.ACTIVE and self.transition is None


def chain_neighbors(mode: SmState) -> set:
    m = int(mode)
    return {SmState(k) for k in (m - 1, m, m + 1) if 0 <= k < N_SM}


def legal_targets(status: BsStatus) -> set:
    if status.transition is not None:
        return set()
    if status.hold_remaining > 0:
        return {status.mode}
    return chain_neighbors(status.mode)


def begin_transition(status: BsStatus, target: SmState, table: PowerTimingTable) -> BsStatus:
    target = SmState(target)
    if target not in legal_targets(status):
        raise TransitionError(f"{status.mode.name} -> {target.name} not allowed (status {status})")
    if target is status.mode:
        return status
    dt = table.transition_time(status.mode, target)
    if dt == 0.0:
        return replace(status, mode=target, hold_remaining=table.hold_time(target))
    return replace(status, transition=Transition(target, dt, status.mode))


def set_zoom(status: BsStatus, zoom: ZoomLevel) -> BsStatus:
    zoom = ZoomLevel(zoom)
    if zoom is status.zoom:
        return status
    if not status.serving:
        raise TransitionError("zoom can only change while Active")
    return replace(status, zoom=zoom)


@dataclass(frozen=True)
class SlotEnergy:
    dwell_j: float
    transition_j: float
    durations_ms: tuple  # (transition, dwell) partition of the slot

    @property
    def total_j(self) -> float:
        return self.dwell_j + self.transition_j


def advance_slot(status: BsStatus, table: PowerTimingTable, slot_len: float) -> tuple:
    """Run one slot: finish (part of) any transition, then dwell.

    Returns ``(new_status, SlotEnergy)``.  The transition part is charged at
    the starting mode's power and the dwell at the arrived mode's power.
    """
    if slot_len <= 0:
        raise ValueError("slot_len must be positive")
    t_trans = 0.0
    e_trans = 0.0
    tr = status.transition
    mode, hold = status.mode, status.hold_remaining
    if tr is not None:
        t_trans = min(tr.remaining, slot_len)
        e_trans = table.power(tr.start_mode, status.zoom) * t_trans
        left = tr.remaining - t_trans
        if left > 0:
            new = replace(status, transition=Transition(tr.target, left, tr.start_mode))
            return new, SlotEnergy(0.0, e_trans * 1e-3, (t_trans, 0.0))
        mode, hold, tr = tr.target, table.hold_time(tr.target), None
    dwell = slot_len - t_trans
    e_dwell = table.power(mode, status.zoom) * dwell
    hold = max(0.0, hold - dwell)
    new = BsStatus(mode=mode, zoom=status.zoom, transition=None, hold_remaining=hold)
    return new, SlotEnergy(e_dwell * 1e-3, e_trans * 1e-3, (t_trans, dwell))


@dataclass
class EnergyLedger:
    """Cumulative energy for one BS with the per-slot breakdown kept alongside."""

    slots: list = field(default_factory=list)
    cumulative_j: float = 0.0

    def record(self, slot: SlotEnergy) -> None:
        self.slots.append((slot.dwell_j, slot.transition_j))
        self.cumulative_j += slot.dwell_j + slot.transition_j

    def recomputed(self) -> float:
        return float(sum(d + t for d, t in self.slots))


def system_energy(
    ledgers: Iterable[EnergyLedger], ris_enabled: bool = False, ris_power: float = 0.0,
    elapsed: float = 0.0, ris_elements: int = 0,
) -> float:
    """Sum of BS ledgers plus the RIS static draw ``G * P_g * elapsed`` (seconds)."""
    total = sum(l.cumulative_j for l in ledgers)
    if ris_enabled:
        total += ris_elements * ris_power * elapsed
    return float(total)
