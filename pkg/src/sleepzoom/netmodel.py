"""Geometry, stochastic channels, RIS phase composition, SNR and link rates.

All functions are pure: randomness comes in through an explicit
``numpy.random.Generator``.  Shapes follow the convention

    direct       M x N   (BS m -> user n, Rayleigh)
    bs_to_ris    G x M   (BS m -> RIS element g, Rician)
    ris_to_user  N x G   (RIS element g -> user n, Rician)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate geometry (coincident nodes, empty sets)."""


class DimensionError(ValueError):
    """Raised when vector lengths do not agree."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise GeometryError(f"non-finite coordinate ({self.x}, {self.y})")

    def distance(self, other: "Position") -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))


# Coordinates used in the reference deployment (three BSs, five users).
DEFAULT_BS_POSITIONS = ((148.24, 201.12), (107.99, 112.61), (204.57, 124.73))
DEFAULT_USER_POSITIONS = (
    (147.03, 110.94),
    (140.98, 161.71),
    (188.24, 165.65),
    (199.17, 89.26),
    (149.17, 141.26),
)
# The RIS location is not fixed by the reference setup; the BS centroid is
# used so that all three cells can share it.
DEFAULT_RIS_POSITION = (153.6, 146.15)


@dataclass(frozen=True)
class NetworkGeometry:
    bs_positions: tuple[Position, ...]
    user_positions: tuple[Position, ...]
    ris_position: Position
    ris_elements: int = 128

    def __post_init__(self):
        if len(self.bs_positions) < 1 or len(self.user_positions) < 1:
            raise GeometryError("need at least one BS and one user")
        if self.ris_elements < 1:
            raise GeometryError("RIS needs at least one element")
        d = self.bs_user_distances()
        if np.any(d <= 0):
            raise GeometryError("a user coincides with a BS")
        if np.any(self.bs_ris_distances() <= 0) or np.any(self.ris_user_distances() <= 0):
            raise GeometryError("a node coincides with the RIS")

    @classmethod
    def from_coords(cls, bs, users, ris, elements: int = 128) -> "NetworkGeometry":
        return cls(
            tuple(Position(*p) for p in bs),
            tuple(Position(*p) for p in users),
            Position(*ris),
            int(elements),
        )

    @classmethod
    def default(cls, elements: int = 128) -> "NetworkGeometry":
        return cls.from_coords(
            DEFAULT_BS_POSITIONS, DEFAULT_USER_POSITIONS, DEFAULT_RIS_POSITION, elements
        )

    @property
    def n_bs(self) -> int:
        return len(self.bs_positions)

    @property
    def n_users(self) -> int:
        return len(self.user_positions)

    def bs_user_distances(self) -> np.ndarray:
        """M x N matrix of BS-user distances in meters."""
        return np.array([[b.distance(u) for u in self.user_positions] for b in self.bs_positions])

    def bs_ris_distances(self) -> np.ndarray:
        return np.array([b.distance(self.ris_position) for b in self.bs_positions])

    def ris_user_distances(self) -> np.ndarray:
        return np.array([u.distance(self.ris_position) for u in self.user_positions])

    def sin_aoa(self, points: Sequence[Position]) -> np.ndarray:
        # angle between the RIS boresight (+x) and the direction RIS -> point
        r = self.ris_position
        return np.array([(p.y - r.y) / r.distance(p) for p in points])


@dataclass(frozen=True)
class LinkParams:
    beta0: float = db_to_linear(-10.0)
    kappa: float = db_to_linear(10.0)
    alpha1: float = 2.0
    alpha2: float = 3.5
    alpha3: float = 3.5
    noise_power: float = dbm_to_watts(-80.0)
    total_bandwidth: float = 20e6
    tx_power: float = 1.0
    quant_bits: int = 3

    def __post_init__(self):
        checks = {
            "beta0": self.beta0 > 0,
            "kappa": self.kappa >= 0,
            "alpha1": self.alpha1 > 0,
            "alpha2": self.alpha2 > 0,
            "alpha3": self.alpha3 > 0,
            "noise_power": self.noise_power > 0,
            "total_bandwidth": self.total_bandwidth > 0,
            "tx_power": self.tx_power > 0,
            "quant_bits": self.quant_bits >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid link parameters: {', '.join(bad)}")


@dataclass
class ChannelRealization:
    direct: np.ndarray  # M x N
    bs_to_ris: np.ndarray  # G x M
    ris_to_user: np.ndarray  # N x G


@dataclass
class RisConfig:
    phases: np.ndarray
    amplitudes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)
        if self.amplitudes is None:
            self.amplitudes = np.ones_like(self.phases)
        else:
            self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if self.amplitudes.shape != self.phases.shape:
            raise DimensionError("phases and amplitudes differ in length")

    @classmethod
    def zeros(cls, elements: int) -> "RisConfig":
        return cls(np.zeros(elements))

    @classmethod
    def disabled(cls, elements: int) -> "RisConfig":
        return cls(np.zeros(elements), np.zeros(elements))

    @property
    def coefficients(self) -> np.ndarray:
        return self.amplitudes * np.exp(1j * self.phases)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly symmetric complex Gaussian with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_direct_channel(
    geometry: NetworkGeometry, params: LinkParams, rng: np.random.Generator
) -> np.ndarray:
    d = geometry.bs_user_distances()
    if np.any(d <= 0):
        raise GeometryError("zero BS-user distance")
    eps = complex_normal(rng, d.shape)
    return eps / np.sqrt(d ** params.alpha3)


def steering(elements: int, sin_theta: np.ndarray) -> np.ndarray:
    """Element x endpoint matrix of exp(-j (g-1) pi sin(theta))."""
    g = np.arange(elements)[:, None]
    return np.exp(-1j * np.pi * g * np.asarray(sin_theta)[None, :])


def rician_mixture(los: np.ndarray, nlos: np.ndarray, kappa: float) -> np.ndarray:
    if np.isinf(kappa):
        return los
    return np.sqrt(kappa / (kappa + 1.0)) * los + np.sqrt(1.0 / (kappa + 1.0)) * nlos


class RisChannelModel:
    """Caches the deterministic LOS parts so per-slot sampling only draws fading."""

    def __init__(self, geometry: NetworkGeometry, params: LinkParams):
        self.geometry = geometry
        self.params = params
        d_br = geometry.bs_ris_distances()
        d_ru = geometry.ris_user_distances()
        if np.any(d_br <= 0) or np.any(d_ru <= 0):
            raise GeometryError("zero RIS distance")
        G = geometry.ris_elements
        p = params
        self.los_br = (
            np.sqrt(p.beta0) * steering(G, geometry.sin_aoa(geometry.bs_positions))
            * d_br[None, :] ** (-p.alpha1 / 2)
        )
        self.los_ru = (
            np.sqrt(p.beta0) * steering(G, geometry.sin_aoa(geometry.user_positions)).T
            * d_ru[:, None] ** (-p.alpha1 / 2)
        )
        self.nlos_scale_br = d_br[None, :] ** (-p.alpha2 / 2)
        self.nlos_scale_ru = d_ru[:, None] ** (-p.alpha2 / 2)
        self.direct_scale = geometry.bs_user_distances() ** (-p.alpha3 / 2)

    def _mix(self, n_br, n_ru):
        k = self.params.kappa
        a, b = np.sqrt(k / (k + 1.0)), np.sqrt(1.0 / (k + 1.0))
        return a * self.los_br + b * (n_br * self.nlos_scale_br), a * self.los_ru + b * (n_ru * self.nlos_scale_ru)

    def sample_ris(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if np.isinf(self.params.kappa):
            return self.los_br.copy(), self.los_ru.copy()
        return self._mix(complex_normal(rng, self.los_br.shape), complex_normal(rng, self.los_ru.shape))

    def sample(self, rng: np.random.Generator) -> ChannelRealization:
        """One realization; all fading variates come from a single block draw."""
        s_d, s_br, s_ru = self.direct_scale.shape, self.los_br.shape, self.los_ru.shape
        n_d, n_br = s_d[0] * s_d[1], s_br[0] * s_br[1]
        total = n_d + n_br + s_ru[0] * s_ru[1]
        z = rng.standard_normal(2 * total).view(np.complex128) * np.sqrt(0.5)
        direct = z[:n_d].reshape(s_d) * self.direct_scale
        if np.isinf(self.params.kappa):
            return ChannelRealization(direct, self.los_br.copy(), self.los_ru.copy())
        br, ru = self._mix(z[n_d:n_d + n_br].reshape(s_br), z[n_d + n_br:].reshape(s_ru))
        return ChannelRealization(direct, br, ru)


def sample_ris_channels(
    geometry: NetworkGeometry, params: LinkParams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    return RisChannelModel(geometry, params).sample_ris(rng)


def sample_channels(
    geometry: NetworkGeometry, params: LinkParams, rng: np.random.Generator
) -> ChannelRealization:
    return RisChannelModel(geometry, params).sample(rng)


def compose_effective_channel(direct_entry, bs_to_ris_column, ris_to_user_row, ris: RisConfig) -> complex:
    """h_mn + sum_g conj(h_ng) a_g exp(j theta_g) h_gm for a single link."""
    col = np.asarray(bs_to_ris_column)
    row = np.asarray(ris_to_user_row)
    if not (col.shape == row.shape == ris.phases.shape):
        raise DimensionError(
            f"length mismatch: column {col.shape}, row {row.shape}, ris {ris.phases.shape}"
        )
    return complex(direct_entry + np.sum(np.conj(row) * ris.coefficients * col))


def effective_channels(channel: ChannelRealization, ris: RisConfig) -> np.ndarray:
    """All M x N composite gains at once."""
    # (N x G) * (G,) @ (G x M) -> N x M
    reflected = (np.conj(channel.ris_to_user) * ris.coefficients[None, :]) @ channel.bs_to_ris
    return channel.direct + reflected.T


def snr(effective, params: LinkParams):
    return params.tx_power * np.abs(effective) ** 2 / params.noise_power


def link_rate(snr_value, bandwidth):
    if np.any(np.asarray(snr_value) < 0):
        raise ValueError("negative SNR")
    return bandwidth * np.log2(1.0 + snr_value)


def phase_grid(bits: int) -> np.ndarray:
    return 2 * np.pi * np.arange(2 ** bits) / 2 ** bits


def quantize_phase(angle, bits: int):
    """Snap to the nearest point of {2 pi k / 2^bits}; ties go to the smaller index."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    levels = 2 ** bits
    step = 2 * np.pi / levels
    a = np.mod(np.asarray(angle, dtype=float), 2 * np.pi)
    k = np.ceil(a / step - 0.5).astype(int) % levels
    out = k * step
    return float(out) if np.ndim(out) == 0 else out


def quantize_config(phases, bits: int) -> RisConfig:
    return RisConfig(np.atleast_1d(quantize_phase(phases, bits)))


def served_bandwidth(association: np.ndarray, active_links: np.ndarray, total_bandwidth: float) -> np.ndarray:
    """Equal split of B among the links each BS is actively serving.

    ``active_links`` is a boolean M x N mask of associated links that carry
    traffic this slot; idle associations do not consume spectrum.
    """
    served = association.astype(bool) & active_links.astype(bool)
    counts = served.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        bw = np.where(served, total_bandwidth / np.maximum(counts, 1), 0.0)
    return bw


def sum_rate(channel: ChannelRealization, ris: RisConfig, association: np.ndarray, params: LinkParams) -> float:
    """Sum of link rates over associated pairs, bandwidth split per serving BS."""
    z = np.asarray(association, dtype=bool)
    if not z.any():
        return 0.0
    h = effective_channels(channel, ris)
    bw = served_bandwidth(z, z, params.total_bandwidth)
    return float(np.sum(link_rate(snr(h, params), bw)[z]))
