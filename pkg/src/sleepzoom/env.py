"""Slot-level MDP over sleep modes, cell zooming and user association.

One call to :meth:`SleepZoomEnv.step` executes a 1 ms slot in this order:

1. apply sleep-mode targets and zoom levels,
2. generate arrivals (so the RIS query knows which links carry traffic),
3. resample the channels,
4. ask the RIS policy for a phase configuration of the live links,
5. compute composite gains and serve the queues,
6. advance every BS one slot and book energy (plus the RIS static draw),
7. compute the reward,
8. flag ``done`` at the end of the episode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import bspower as bp
from . import netmodel as nm
from . import traffic as tr
from .bspower import N_SM, N_ZOOM, SmState, ZoomLevel


class ConstraintError(ValueError):
    """An action broke the mask (transition chain, zoom or association rules)."""


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class SchemeSpec:
    sleep: bool
    zoom: bool
    ris: bool
    learned_association: bool
    learner: Optional[str]


class Scheme(str, Enum):
    AA = "AA"
    PZ = "PZ"
    PS = "PS"
    PSZ = "PSZ"
    PSZR = "PSZR"
    DSZR = "DSZR"

    @property
    def spec(self) -> SchemeSpec:
        return SCHEMES[self]


SCHEMES = {
    Scheme.AA: SchemeSpec(sleep=False, zoom=False, ris=False, learned_association=False, learner=None),
    Scheme.PZ: SchemeSpec(sleep=False, zoom=True, ris=False, learned_association=True, learner="ppo"),
    Scheme.PS: SchemeSpec(sleep=True, zoom=False, ris=False, learned_association=False, learner="ppo"),
    Scheme.PSZ: SchemeSpec(sleep=True, zoom=True, ris=False, learned_association=True, learner="ppo"),
    Scheme.PSZR: SchemeSpec(sleep=True, zoom=True, ris=True, learned_association=True, learner="ppo"),
    Scheme.DSZR: SchemeSpec(sleep=True, zoom=True, ris=True, learned_association=False, learner="dqn"),
}


@dataclass(frozen=True)
class RewardParams:
    L1: float = -1.0
    L2: float = 2.0
    L3: float = -20.0
    L4: float = 1.0
    d_max: float = 10.0  # ms
    p_sm1: Optional[float] = None  # W; None -> M * SM1 power

    def __post_init__(self):
        if abs(self.L3) <= max(abs(self.L1), abs(self.L2)):
            raise ValueError("reward: |L3| must exceed |L1| and |L2|")
        if self.d_max <= 0:
            raise ValueError("reward.d_max must be > 0")


def reward(slot_power: float, pending: float, worst_delay: float, params: RewardParams,
           p_sm1: Optional[float] = None) -> float:
    """Energy branch when nothing is pending, delay branch otherwise.

    Heaviside convention: H(x) = 1 for x >= 0, so power equal to the SM1
    reference counts as L1 and delay equal to ``d_max`` counts as L3.
    """
    ref = params.p_sm1 if p_sm1 is None else p_sm1
    if ref is None:
        raise ValueError("no SM1 power reference")
    if pending <= 0:
        return params.L1 if slot_power >= ref else params.L2
    return params.L3 if worst_delay >= params.d_max else params.L4


@dataclass
class EnvConfig:
    geometry: nm.NetworkGeometry = field(default_factory=nm.NetworkGeometry.default)
    link: nm.LinkParams = field(default_factory=nm.LinkParams)
    table: bp.PowerTimingTable = field(default_factory=bp.PowerTimingTable)
    traffic: tr.TrafficConfig = field(default_factory=tr.TrafficConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    scheme: Scheme = Scheme.PSZR
    radii: tuple = (40.0, 50.0, 60.0)
    slot_ms: float = 1.0
    episode_slots: int = 200
    ris_element_power: float = 1.5e-3  # W
    max_sleep_depth: SmState = SmState.DEEP
    active_users: Optional[int] = None  # only users 0..k-1 generate traffic; None means all

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.max_sleep_depth = SmState(self.max_sleep_depth)
        if self.episode_slots < 1:
            raise ValueError("episode_slots must be >= 1")
        if self.slot_ms <= 0:
            raise ValueError("slot_ms must be > 0")
        if self.active_users is not None and not 0 <= self.active_users <= self.geometry.n_users:
            raise ValueError("active_users must lie in [0, n_users]")
        if not (0 < self.radii[0] <= self.radii[1] <= self.radii[2]):
            raise ValueError("radii must be positive and ordered in <= none <= out")

    @property
    def p_sm1(self) -> float:
        if self.reward.p_sm1 is not None:
            return self.reward.p_sm1
        return self.geometry.n_bs * self.table.micro_power

    @property
    def ris_slot_energy(self) -> float:
        return self.geometry.ris_elements * self.ris_element_power * self.slot_ms * 1e-3


@dataclass
class MdpState:
    pending: float
    channel_features: np.ndarray  # M x N clipped log10 |h_eff|^2
    sm_vector: np.ndarray  # M modes
    slot: int
    user_backlog: np.ndarray = None  # N queued bits per user
    user_wait: np.ndarray = None  # N age of each user's oldest packet, ms
    transition_left: np.ndarray = None  # M ms left in a running sleep transition
    zooms: np.ndarray = None  # M ZoomLevel values


@dataclass
class MdpAction:
    sm_targets: np.ndarray  # M SmState values
    zooms: np.ndarray  # M ZoomLevel values
    association: np.ndarray  # M x N binary

    @classmethod
    def from_servers(cls, sm_targets, zooms, servers, n_bs: int) -> "MdpAction":
        """``servers[n]`` is the serving BS index, or ``n_bs``/-1 for no service."""
        servers = np.asarray(servers)
        z = np.zeros((n_bs, len(servers)), dtype=np.int8)
        for n, m in enumerate(servers):
            if 0 <= m < n_bs:
                z[m, n] = 1
        return cls(np.asarray(sm_targets, dtype=int), np.asarray(zooms, dtype=int), z)

    def servers(self) -> np.ndarray:
        M = self.association.shape[0]
        out = np.full(self.association.shape[1], M)
        m, n = np.nonzero(self.association)
        out[n] = m
        return out


@dataclass
class ActionMask:
    sm: np.ndarray  # M x 5 bool
    zoom: np.ndarray  # M x 3 bool (given the current modes)


@dataclass
class StepOutcome:
    next: MdpState
    reward: float
    done: bool
    info: dict


GAIN_RANGE = (-10.0, -2.0)  # log10 |h|^2 clip window for features
SLEEP_MOVES = (-1, 0, 1)  # shallower, stay, deeper


def observation_size(n_bs: int, n_users: int) -> int:
    return 1 + n_bs * n_users + N_SM * n_bs + 1 + 2 * n_users + n_bs * (1 + N_ZOOM)


class SleepZoomEnv:
    """Single-owner mutable simulator; independent instances may run in parallel.

    ``ris_policy(channel, association) -> RisConfig`` supplies phases for RIS
    schemes; without it a fixed all-zero configuration is used.
    """

    def __init__(self, config: EnvConfig, ris_policy: Optional[Callable] = None, seed: int = 0):
        self.config = config
        self.scheme = config.scheme.spec
        self.ris_policy = ris_policy
        g = config.geometry
        self.M, self.N, self.G = g.n_bs, g.n_users, g.ris_elements
        self.dist = g.bs_user_distances()
        self.radii = np.asarray(config.radii, dtype=float)
        self.channel_model = nm.RisChannelModel(g, config.link)
        self.sampler = tr.ArrivalSampler(config.traffic, config.slot_ms)
        self.p_sm1 = config.p_sm1
        # service area: users within some BS's nominal (no-zoom) radius.  The
        # same population is used by every scheme so energies are comparable.
        self.footprint = (self.dist <= self.radii[1]).any(axis=0)
        k = self.N if config.active_users is None else config.active_users
        self.talkers = np.arange(self.N) < k
        self.pending_norm = config.traffic.packet_size * self.N
        self._sm_cache = {}
        self._move_cache = {}
        # _reach[z, m, n]: BS m at zoom z covers user n
        self._reach = self.dist[None, :, :] <= self.radii[:, None, None]
        self._instant = np.array([[config.table.transition_time(SmState(a), SmState(b)) == 0
                                   for b in range(N_SM)] for a in range(N_SM)])
        self.constraint_violations = 0
        self.reset(seed)

    # ------------------------------------------------------------------ state
    def reset(self, seed: Optional[int] = None) -> MdpState:
        if seed is not None:
            self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed)
        chan_ss, traffic_ss = ss.spawn(2)
        self.chan_rng = np.random.default_rng(chan_ss)
        self.traffic_rng = np.random.default_rng(traffic_ss)
        self.statuses = [bp.BsStatus() for _ in range(self.M)]
        self.ledgers = [bp.EnergyLedger() for _ in range(self.M)]
        self.ris_energy_j = 0.0
        self.queues = tr.QueueState(self.N)
        self.next_packet_id = 0
        self.dropped_bits = 0.0
        self.t = 0
        self.channel = self.channel_model.sample(self.chan_rng)
        self.ris = self._ris_config(self.channel, np.zeros((self.M, self.N), dtype=np.int8))
        self.effective = nm.effective_channels(self.channel, self.ris)
        self.state = self._make_state()
        return self.state

    def _make_state(self) -> MdpState:
        gains = np.log10(np.abs(self.effective) ** 2 + 1e-300)
        backlog = self.queues.user_pending()
        wait = np.array([(self.t - q[0].arrival_slot) * self.config.slot_ms if q else 0.0
                         for q in self.queues.fifos])
        return MdpState(
            pending=float(backlog.sum()),
            channel_features=np.clip(gains, *GAIN_RANGE),
            sm_vector=np.array([int(s.mode) for s in self.statuses]),
            slot=self.t,
            user_backlog=backlog,
            user_wait=wait,
            transition_left=np.array([s.transition.remaining if s.transition else 0.0 for s in self.statuses]),
            zooms=np.array([int(s.zoom) for s in self.statuses]),
        )

    def observe(self, state: Optional[MdpState] = None) -> np.ndarray:
        """Feature layout: [pending, M*N gains in [-1, 1], M one-hot modes, t / T,
        N backlogs in packets, N oldest-packet ages / D_max, M transition times left / deep
        transition time, M one-hot zooms]."""
        s = self.state if state is None else state
        lo, hi = GAIN_RANGE
        gains = 2.0 * (s.channel_features - lo) / (hi - lo) - 1.0
        onehot = np.zeros((self.M, N_SM))
        onehot[np.arange(self.M), s.sm_vector] = 1.0
        zoom = np.zeros((self.M, N_ZOOM))
        zoom[np.arange(self.M), s.zooms] = 1.0
        vec = np.concatenate(([s.pending / self.pending_norm], gains.ravel(), onehot.ravel(),
                              [s.slot / self.config.episode_slots],
                              s.user_backlog / self.config.traffic.packet_size,
                              s.user_wait / self.config.reward.d_max,
                              s.transition_left / self.config.table.transition_ms[-1],
                              zoom.ravel()))
        if not np.all(np.isfinite(vec)):
            raise EncodingError("non-finite observation feature")
        return vec

    @property
    def obs_size(self) -> int:
        return observation_size(self.M, self.N)

    # ------------------------------------------------------------------ masks
    def sm_mask(self, status: bp.BsStatus) -> np.ndarray:
        """Legal sleep targets for one BS (cached per status; read-only)."""
        mask = self._sm_cache.get(status)
        if mask is None:
            mask = self._sm_mask(status)
            mask.setflags(write=False)
            self._sm_cache[status] = mask
        return mask

    def _sm_mask(self, status: bp.BsStatus) -> np.ndarray:
        mask = np.zeros(N_SM, dtype=bool)
        legal = bp.legal_targets(status)
        if not legal:
            mask[status.mode] = True  # mid-transition: "stay" only
            return mask
        for s in legal:
            mask[s] = True
        if not self.scheme.sleep:
            mask[:] = False
            mask[status.mode] = True
        else:
            mask[int(self.config.max_sleep_depth) + 1:] = False
            mask[status.mode] = True
        return mask

    def move_mask(self, status: bp.BsStatus) -> np.ndarray:
        """Legal relative sleep moves (shallower, stay, deeper) for one BS; read-only."""
        mask = self._move_cache.get(status)
        if mask is None:
            full = self.sm_mask(status)
            mask = np.array([0 <= status.mode + d < N_SM and full[status.mode + d] for d in SLEEP_MOVES])
            mask.setflags(write=False)
            self._move_cache[status] = mask
        return mask

    def move_targets(self, moves) -> np.ndarray:
        """Absolute sleep targets for per-BS moves indexed into ``SLEEP_MOVES``."""
        modes = np.array([int(s.mode) for s in self.statuses])
        return modes + np.asarray(SLEEP_MOVES)[np.asarray(moves, dtype=int)]

    def zoom_mask(self, post_mode: SmState, status: bp.BsStatus) -> np.ndarray:
        mask = np.zeros(N_ZOOM, dtype=bool)
        if post_mode is SmState.ACTIVE and status.transition is None and self.scheme.zoom:
            mask[:] = True
        elif post_mode is SmState.ACTIVE and status.transition is None:
            mask[ZoomLevel.NO_ZOOM] = True
        else:
            mask[status.zoom] = True
        return mask

    def action_mask(self, statuses=None) -> ActionMask:
        statuses = self.statuses if statuses is None else statuses
        sm = np.array([self.sm_mask(s) for s in statuses])
        zoom = np.array([self.zoom_mask(s.mode, s) for s in statuses])
        return ActionMask(sm, zoom)

    def post_modes(self, sm_targets) -> list:
        """Modes in force for serving after applying ``sm_targets``."""
        return [self.post_modes_one(s, tgt) for s, tgt in zip(self.statuses, sm_targets)]

    def post_modes_one(self, status: bp.BsStatus, target) -> Optional[SmState]:
        """Mode reached at slot start, or None while a timed transition runs."""
        tgt = int(target)
        if status.transition is not None:
            return None
        if tgt == status.mode:
            return status.mode
        if self._instant[status.mode, tgt]:
            return SmState(tgt)
        return None

    def coverage(self, post_modes, zooms) -> np.ndarray:
        """M x N bool: BS m is Active after the action and covers user n."""
        active = np.array([m is SmState.ACTIVE for m in post_modes])
        reach = self._reach[np.asarray(zooms, dtype=int), np.arange(self.M)]
        return active[:, None] & reach

    def nearest_servers(self, cover: np.ndarray) -> np.ndarray:
        d = np.where(cover, self.dist, np.inf)
        best = np.argmin(d, axis=0)
        return np.where(np.isfinite(d[best, np.arange(self.N)]), best, self.M)

    def association_mask(self, post_modes, zooms) -> np.ndarray:
        """N x (M+1) bool; column M is 'no service' and is always legal."""
        cover = self.coverage(post_modes, zooms)
        mask = np.zeros((self.N, self.M + 1), dtype=bool)
        mask[:, self.M] = True
        if self.scheme.learned_association:
            mask[:, : self.M] = cover.T
        else:
            srv = self.nearest_servers(cover)
            mask[:] = False
            mask[np.arange(self.N), srv] = True
        return mask

    def default_action(self, sm_targets=None, zooms=None) -> MdpAction:
        """Keep modes and zooms (unless given) and use nearest-covering association."""
        sm = np.array([int(s.mode) for s in self.statuses]) if sm_targets is None else np.asarray(sm_targets)
        post = self.post_modes(sm)
        if zooms is None:
            zooms = np.array([
                int(ZoomLevel.NO_ZOOM) if (not self.scheme.zoom and p is SmState.ACTIVE) else int(s.zoom)
                for s, p in zip(self.statuses, post)
            ])
        srv = self.nearest_servers(self.coverage(post, zooms))
        return MdpAction.from_servers(sm, zooms, srv, self.M)

    def check_action(self, action: MdpAction) -> list:
        sm = np.asarray(action.sm_targets, dtype=int)
        zooms = np.asarray(action.zooms, dtype=int)
        z = np.asarray(action.association)
        if sm.shape != (self.M,) or zooms.shape != (self.M,) or z.shape != (self.M, self.N):
            raise ConstraintError("action has wrong shape")
        for m, s in enumerate(self.statuses):
            if not self.sm_mask(s)[sm[m]]:
                raise ConstraintError(f"BS {m}: sleep target {SmState(sm[m]).name} not allowed")
        post = self.post_modes(sm)
        for m, s in enumerate(self.statuses):
            if not self.zoom_mask(post[m], s)[zooms[m]]:
                raise ConstraintError(f"BS {m}: zoom {ZoomLevel(zooms[m]).name} not allowed")
        if np.any(z.sum(axis=0) > 1):
            raise ConstraintError("a user is associated with more than one BS")
        if np.any(z.sum(axis=1) > self.N):
            raise ConstraintError("a BS serves more than N users")
        amask = self.association_mask(post, zooms)
        servers = action.servers()
        if not np.all(amask[np.arange(self.N), servers]):
            raise ConstraintError("association outside the allowed candidate set")
        return post

    # ------------------------------------------------------------------ dynamics
    def _ris_config(self, channel, association) -> nm.RisConfig:
        if not self.scheme.ris:
            return nm.RisConfig.disabled(self.G)
        if self.ris_policy is None or not np.any(association):
            return nm.RisConfig.zeros(self.G)
        return self.ris_policy(channel, association)

    def step(self, action: MdpAction) -> StepOutcome:
        cfg = self.config
        try:
            self.check_action(action)
        except ConstraintError:
            self.constraint_violations += 1
            raise
        table = cfg.table
        # (1) sleep-mode targets and zooms
        new_status = []
        for m, s in enumerate(self.statuses):
            s = bp.begin_transition(s, SmState(int(action.sm_targets[m])), table) if s.transition is None else s
            if s.serving:
                s = bp.set_zoom(s, ZoomLevel(int(action.zooms[m])))
            new_status.append(s)
        self.statuses = new_status
        z = np.asarray(action.association, dtype=bool)
        # (2) arrivals, drawn before the RIS query so it sees which links carry traffic;
        # the draw uses its own stream, so the trajectory is unchanged by this order
        counts = self.sampler.counts(self.traffic_rng.random(self.N)) * self.talkers
        dropped = counts * ~self.footprint
        self.dropped_bits += float(dropped.sum()) * cfg.traffic.packet_size
        counts = counts * self.footprint
        packets = tr.packets_from_counts(counts, cfg.traffic, self.t, self.next_packet_id)
        self.next_packet_id += len(packets)
        self.queues.push(packets)
        serving = np.array([s.serving for s in self.statuses])
        has_traffic = np.array([self.queues.has_traffic(n) for n in range(self.N)])
        live = z & serving[:, None] & has_traffic[None, :]
        # (3) channels, (4) RIS
        self.channel = self.channel_model.sample(self.chan_rng)
        self.ris = self._ris_config(self.channel, live.astype(np.int8))
        self.effective = nm.effective_channels(self.channel, self.ris)
        # (5) composite gains and service
        completions = []
        served_bits = 0.0
        if live.any():
            bw = nm.served_bandwidth(live, live, cfg.link.total_bandwidth)
            rates = nm.link_rate(nm.snr(self.effective, cfg.link), bw)
            for m, n in zip(*np.nonzero(live)):
                bits, done = tr.serve(self.queues, n, float(rates[m, n]), cfg.slot_ms, self.t, cfg.slot_ms)
                served_bits += bits
                completions.extend(done)
        # (6) energy
        bs_energy = 0.0
        advanced = []
        for m, s in enumerate(self.statuses):
            s2, e = bp.advance_slot(s, table, cfg.slot_ms)
            self.ledgers[m].record(e)
            bs_energy += e.total_j
            advanced.append(s2)
        self.statuses = advanced
        ris_e = cfg.ris_slot_energy if self.scheme.ris else 0.0
        self.ris_energy_j += ris_e
        slot_energy = bs_energy + ris_e
        # (7) reward
        self.t += 1
        pending = tr.pending_load(self.queues)
        worst = tr.max_outstanding_delay(self.queues, self.t, completions, cfg.slot_ms)
        slot_power = slot_energy / (cfg.slot_ms * 1e-3)
        r = reward(slot_power, pending, worst, cfg.reward, self.p_sm1)
        # (8) episode end
        done = self.t >= cfg.episode_slots
        self.state = self._make_state()
        late = sum(1 for c in completions if c[-1] >= cfg.reward.d_max)
        info = {
            "energy_j": slot_energy,
            "bs_energy_j": bs_energy,
            "ris_energy_j": ris_e,
            "slot_power_w": slot_power,
            "pending_bits": pending,
            "worst_delay_ms": worst,
            "delay_violation": worst >= cfg.reward.d_max and pending > 0,
            "late_completions": late,
            "completions": completions,
            "served_bits": served_bits,
            "modes": tuple(int(s.mode) for s in self.statuses),
            "active_bs": int(sum(s.serving for s in self.statuses)),
            "constraint_violations": self.constraint_violations,
        }
        return StepOutcome(self.state, r, done, info)

    def system_energy(self) -> float:
        return bp.system_energy(
            self.ledgers, self.scheme.ris, self.config.ris_element_power,
            self.t * self.config.slot_ms * 1e-3, self.G,
        )


def write_trace_csv(path, rows) -> None:
    """Per-step trace: slot, per-BS mode, energy_J, pending_bits, worst_delay_ms, reward."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not rows:
            w.writerow(["slot", "modes", "energy_J", "pending_bits", "worst_delay_ms", "reward"])
            return
        w.writerow(["slot", "modes", "energy_J", "pending_bits", "worst_delay_ms", "reward"])
        for slot, info, r in rows:
            w.writerow([slot, "|".join(SmState(m).name for m in info["modes"]), repr(info["energy_j"]),
                        repr(info["pending_bits"]), repr(info["worst_delay_ms"]), r])
