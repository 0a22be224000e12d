"""Cascaded phase optimizer for the RIS.

A capacity network learns ``(channel, phases, association) -> sum rate`` from
simulated samples.  It is then frozen, and a phase network
``(channel, association) -> phases`` is trained by gradient ascent on the
frozen network's predicted capacity.

The capacity network sees the channel and phases through a fixed, parameter
free composition layer: the composite gain of every BS-user link is formed
from the channel and the phases, and the network receives the per-link
log-SNR together with the association.  Gradients flow back through this
layer to the continuous phases, so quantization is applied only at inference.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import netmodel as nm
from .neural import DenseNet, OptimState, apply_update, backward, forward, init

MAX_ORACLE_CANDIDATES = 10**6


class InvariantError(RuntimeError):
    pass


class SearchSpaceTooLarge(ValueError):
    pass


class ChannelFeaturizer:
    """Real/imag parts of every channel entry, divided by its path-loss scale."""

    def __init__(self, model: nm.RisChannelModel):
        self.model = model
        self.scale_direct = model.direct_scale
        self.scale_br = np.abs(model.los_br) / np.sqrt(model.params.kappa / (model.params.kappa + 1.0)) \
            if np.isfinite(model.params.kappa) and model.params.kappa > 0 else np.abs(model.los_br)
        self.scale_ru = np.abs(model.los_ru) / np.sqrt(model.params.kappa / (model.params.kappa + 1.0)) \
            if np.isfinite(model.params.kappa) and model.params.kappa > 0 else np.abs(model.los_ru)
        g = model.geometry
        self.M, self.N, self.G = g.n_bs, g.n_users, g.ris_elements
        self.size = 2 * (self.M * self.N + self.G * self.M + self.N * self.G)

    def __call__(self, channel: nm.ChannelRealization) -> np.ndarray:
        parts = (
            channel.direct / self.scale_direct,
            channel.bs_to_ris / self.scale_br,
            channel.ris_to_user / self.scale_ru,
        )
        return np.concatenate([np.concatenate([p.real.ravel(), p.imag.ravel()]) for p in parts])


@dataclass
class DccnSample:
    channel: nm.ChannelRealization
    features: np.ndarray
    phases: np.ndarray
    association: np.ndarray  # M x N
    capacity: float  # bits/s


def random_association(rng: np.random.Generator, cover: np.ndarray, p_link: float = 0.4) -> np.ndarray:
    """Each user independently picks a covering BS with probability ``p_link``."""
    M, N = cover.shape
    z = np.zeros((M, N), dtype=np.int8)
    for n in range(N):
        cands = np.flatnonzero(cover[:, n])
        if cands.size and rng.random() < p_link:
            z[rng.choice(cands), n] = 1
    return z


def max_coverage(geometry: nm.NetworkGeometry, radius: float = 60.0) -> np.ndarray:
    return geometry.bs_user_distances() <= radius


def ramp_phases(rng: np.random.Generator, elements: int, bits: int, flip_probs=(0.0, 0.1, 0.3)) -> np.ndarray:
    """Quantized linear phase ramp with a random fraction of elements re-drawn uniformly.

    Ramps steer the reflected beam, so they reach the high-gain region that
    uniform random phases almost never visit.
    """
    levels = 2 ** bits
    grid = nm.phase_grid(bits)
    slope = rng.uniform(-np.pi, np.pi)
    ramp = nm.quantize_config(np.mod(rng.uniform(0, 2 * np.pi) + slope * np.arange(elements), 2 * np.pi),
                              bits).phases
    flip = rng.random(elements) < flip_probs[rng.integers(len(flip_probs))]
    return np.where(flip, grid[rng.integers(0, levels, elements)], ramp)


def gen_training_set(geometry, params: nm.LinkParams, association, count: int,
                     rng: np.random.Generator, p_link: float = 0.3, ramp_fraction: float = 0.3) -> list:
    """Random channels and quantized phases labelled with the exact sum rate.

    A ``ramp_fraction`` share of the phase vectors are :func:`ramp_phases`,
    the rest are uniform on the grid.  ``association=None`` draws a random
    non-empty association per sample.
    """
    if count <= 0:
        return []
    model = nm.RisChannelModel(geometry, params)
    feat = ChannelFeaturizer(model)
    cover = max_coverage(geometry)
    levels = 2 ** params.quant_bits
    G = geometry.ris_elements
    out = []
    for _ in range(count):
        ch = model.sample(rng)
        z = nonempty_association(rng, cover, p_link) if association is None else np.asarray(association, np.int8)
        if rng.random() < ramp_fraction:
            phases = ramp_phases(rng, G, params.quant_bits)
        else:
            phases = nm.phase_grid(params.quant_bits)[rng.integers(0, levels, G)]
        cap = nm.sum_rate(ch, nm.RisConfig(phases), z, params)
        out.append(DccnSample(ch, feat(ch), phases, z.copy(), cap))
    return out


def nonempty_association(rng: np.random.Generator, cover: np.ndarray, p_link: float) -> np.ndarray:
    """:func:`random_association`, with one random covered link added when it comes out empty."""
    z = random_association(rng, cover, p_link)
    if not z.any():
        ms, ns = np.nonzero(cover)
        k = rng.integers(len(ms))
        z[ms[k], ns[k]] = 1
    return z


SNR_DB_CENTER = 50.0
SNR_DB_SPAN = 20.0


def stack_channels(channels: Sequence[nm.ChannelRealization]):
    D = np.array([c.direct for c in channels])
    BR = np.array([c.bs_to_ris for c in channels])
    RU = np.array([c.ris_to_user for c in channels])
    return D, BR, RU


def composite_gains(channels: Sequence[nm.ChannelRealization], phases) -> np.ndarray:
    """B x M x N composite gains for a batch of channels and phase vectors."""
    D, BR, RU = stack_channels(channels)
    e = np.exp(1j * np.atleast_2d(phases))
    return D + np.einsum("bng,bg,bgm->bmn", np.conj(RU), e, BR)


def capacity_input(gains: np.ndarray, association, params: nm.LinkParams) -> np.ndarray:
    """Scaled per-link SNR in dB on the associated links (zero elsewhere), then the association.

    Only associated links carry rate, so masking keeps the target close to
    linear in the inputs and the phase gradients faithful.
    """
    B = gains.shape[0]
    snr_db = 10.0 * np.log10(np.maximum(nm.snr(gains, params), 1e-30))
    x = (snr_db - SNR_DB_CENTER) / SNR_DB_SPAN
    z = np.asarray(association, dtype=float).reshape(B, -1)
    return np.hstack([x.reshape(B, -1) * z, z])


def phase_input(features, association) -> np.ndarray:
    features = np.atleast_2d(features)
    assoc = np.asarray(association, dtype=float).reshape(features.shape[0], -1)
    return np.hstack([features, assoc])


@dataclass
class CapacityNet:
    net: DenseNet
    params: nm.LinkParams
    mean: float = 0.0
    scale: float = 1.0

    @classmethod
    def build(cls, n_links: int, params: nm.LinkParams, rng, hidden=(128, 128)) -> "CapacityNet":
        return cls(init((2 * n_links, *hidden, 1), rng), params)

    def predict(self, channels, phases, association) -> np.ndarray:
        x = capacity_input(composite_gains(channels, phases), association, self.params)
        return forward(self.net, x)[0][:, 0] * self.scale + self.mean


@dataclass
class PhaseNet:
    net: DenseNet
    elements: int
    out_scale: float = 2 * np.pi

    @classmethod
    def build(cls, n_features: int, elements: int, n_links: int, rng, hidden=(128, 128)) -> "PhaseNet":
        return cls(init((n_features + n_links, *hidden, elements), rng, out_scale=0.1), elements)

    def raw(self, features, association) -> np.ndarray:
        return self.out_scale * forward(self.net, phase_input(features, association))[0]


def train_capacity_net(cap: CapacityNet, data: Sequence[DccnSample], lr: float = 1e-3, epochs: int = 20,
                       batch: int = 64, rng: Optional[np.random.Generator] = None, holdout: float = 0.1,
                       renormalize: bool = True):
    """MSE regression onto standardized capacities.

    Returns ``(cap, curve, holdout_rel_rmse)`` where ``curve`` holds the
    training MSE per epoch (standardized units).
    """
    if not data:
        raise ValueError("empty training set")
    rng = rng or np.random.default_rng(0)
    P = np.array([s.phases for s in data])
    Z = np.array([s.association.ravel() for s in data], dtype=float)
    y = np.array([s.capacity for s in data])
    X = capacity_input(composite_gains([s.channel for s in data], P), Z, cap.params)
    n_hold = int(len(y) * holdout) if len(y) >= 10 else 0
    idx = rng.permutation(len(y))
    hold, train = idx[:n_hold], idx[n_hold:]
    if renormalize:
        cap.mean = float(y[train].mean())
        cap.scale = float(y[train].std()) or max(abs(cap.mean), 1.0)
    t = (y - cap.mean) / cap.scale
    opt = OptimState(learning_rate=lr)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(train)
        tot = 0.0
        for i in range(0, len(order), batch):
            b = order[i:i + batch]
            out, tr = forward(cap.net, X[b])
            err = out[:, 0] - t[b]
            tot += float(np.sum(err ** 2))
            g = backward(cap.net, tr, (2.0 / len(b)) * err[:, None])
            apply_update(cap.net, g, opt)
        mse = tot / len(train)
        if not np.isfinite(mse):
            raise FloatingPointError("capacity-net training diverged")
        curve.append(mse)
    rel = float("nan")
    if n_hold:
        pred = forward(cap.net, X[hold])[0][:, 0] * cap.scale + cap.mean
        rel = float(np.sqrt(np.mean((pred - y[hold]) ** 2)) / np.mean(np.abs(y[hold])))
    return cap, curve, rel


def capacity_phase_gradient(cap: CapacityNet, channels, phases, association):
    """Predicted capacity (standardized) and its gradient with respect to the phases."""
    P = np.atleast_2d(phases)
    D, BR, RU = stack_channels(channels)
    e = np.exp(1j * P)
    h = D + np.einsum("bng,bg,bgm->bmn", np.conj(RU), e, BR)
    out, trace = forward(cap.net, capacity_input(h, association, cap.params))
    gx = backward(cap.net, trace, np.ones_like(out)).inputs
    B, M, N = h.shape
    # x = 10 log10(P|h|^2/N0) / span; gradient of |h|^2 over (Re h, Im h) is 2h
    z = np.asarray(association, dtype=float).reshape(B, M, N)
    d_snr = gx[:, :M * N].reshape(B, M, N) * z * 10.0 / (SNR_DB_SPAN * np.log(10.0))
    g_h = d_snr * 2.0 * h / np.maximum(np.abs(h) ** 2, 1e-300)
    # dh_mn/dtheta_g = j conj(ru_ng) e_g br_gm
    proj = np.einsum("bmn,bng,bgm->bg", np.conj(g_h), np.conj(RU), BR)
    return out[:, 0], np.real(proj * 1j * e)


def train_phase_net(phase: PhaseNet, cap: CapacityNet, channels, features: np.ndarray, associations: np.ndarray,
                    lr: float = 1e-3, epochs: int = 20, batch: int = 64,
                    rng: Optional[np.random.Generator] = None, mode: str = "adam"):
    """Descend ``-C_hat`` into the phase network only; the capacity net stays frozen.

    Returns ``(phase, curve)`` with the mean standardized predicted capacity per epoch.
    """
    rng = rng or np.random.default_rng(0)
    frozen = cap.net.flat().copy()
    F = np.atleast_2d(features)
    Z = np.asarray(associations, dtype=float).reshape(F.shape[0], -1)
    Xp = phase_input(F, Z)
    opt = OptimState(learning_rate=lr, mode=mode)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(F))
        tot = 0.0
        for i in range(0, len(order), batch):
            b = order[i:i + batch]
            out, tr = forward(phase.net, Xp[b])
            theta = phase.out_scale * out
            c_hat, dtheta = capacity_phase_gradient(cap, [channels[j] for j in b], theta, Z[b])
            tot += float(c_hat.sum())
            # loss = -mean(C_hat)
            g = backward(phase.net, tr, -phase.out_scale * dtheta / len(b))
            apply_update(phase.net, g, opt)
        curve.append(tot / len(F))
    if not np.array_equal(frozen, cap.net.flat()):
        raise InvariantError("capacity network changed during phase training")
    return phase, curve


def infer_phases(phase: PhaseNet, features, association, bits: int) -> nm.RisConfig:
    raw = phase.raw(features, association)[0]
    return nm.quantize_config(np.mod(raw, 2 * np.pi), bits)


def exhaustive_phase_oracle(channel: nm.ChannelRealization, params: nm.LinkParams, association,
                            bits: Optional[int] = None):
    """Enumerate every quantized phase vector; return ``(best RisConfig, best sum rate, count)``."""
    bits = params.quant_bits if bits is None else bits
    G = channel.bs_to_ris.shape[0]
    levels = 2 ** bits
    if levels ** G > MAX_ORACLE_CANDIDATES:
        raise SearchSpaceTooLarge(f"{levels}^{G} candidates exceed {MAX_ORACLE_CANDIDATES}")
    z = np.asarray(association, dtype=bool)
    grid = nm.phase_grid(bits)
    configs = np.array(list(itertools.product(range(levels), repeat=G)))
    phases = grid[configs]  # K x G
    caps = candidate_rates(channel, phases, z, params)
    k = int(np.argmax(caps))
    return nm.RisConfig(phases[k]), float(caps[k]), len(configs)


def candidate_rates(channel: nm.ChannelRealization, phases: np.ndarray, association: np.ndarray,
                    params: nm.LinkParams) -> np.ndarray:
    """Sum rate for each row of a K x G phase matrix (unit amplitudes)."""
    z = np.asarray(association, dtype=bool)
    if not z.any():
        return np.zeros(len(phases))
    ms, ns = np.nonzero(z)
    bw = nm.served_bandwidth(z, z, params.total_bandwidth)[ms, ns]
    # cascade[l, g] = conj(h_ng) h_gm for associated link l
    cascade = np.conj(channel.ris_to_user[ns]) * channel.bs_to_ris[:, ms].T
    h = channel.direct[ms, ns][None, :] + np.exp(1j * phases) @ cascade.T  # K x L
    rates = bw[None, :] * np.log2(1.0 + nm.snr(h, params))
    return rates.sum(axis=1)


class DccnRisPolicy:
    """Callable RIS controller for the environment: one inference per slot."""

    def __init__(self, phase: PhaseNet, featurizer: ChannelFeaturizer, bits: int):
        self.phase = phase
        self.featurizer = featurizer
        self.bits = bits

    def __call__(self, channel: nm.ChannelRealization, association) -> nm.RisConfig:
        return infer_phases(self.phase, self.featurizer(channel), np.asarray(association).ravel(), self.bits)


@dataclass
class DccnBundle:
    capacity: CapacityNet
    phase: PhaseNet
    featurizer: ChannelFeaturizer
    bits: int
    capacity_curve: list
    phase_curve: list
    holdout_rel_rmse: float

    def policy(self) -> DccnRisPolicy:
        return DccnRisPolicy(self.phase, self.featurizer, self.bits)


def train_dccn(geometry, params: nm.LinkParams, rng: np.random.Generator, association=None,
               n_capacity: int = 6000, n_phase: int = 2000, cap_epochs: int = 20, phase_epochs: int = 20,
               lr: float = 1e-3, hidden=(128, 128), p_link: float = 0.3,
               ramp_fraction: float = 0.3) -> DccnBundle:
    """Pre-train the capacity net, freeze it, then train the phase net on fresh channels."""
    model = nm.RisChannelModel(geometry, params)
    feat = ChannelFeaturizer(model)
    links = geometry.n_bs * geometry.n_users
    cover = max_coverage(geometry)
    data = gen_training_set(geometry, params, association, n_capacity, rng, p_link, ramp_fraction)
    cap = CapacityNet.build(links, params, rng, hidden)
    cap, cap_curve, rel = train_capacity_net(cap, data, lr, cap_epochs, rng=rng)
    chans = [model.sample(rng) for _ in range(n_phase)]
    F = np.array([feat(c) for c in chans])
    if association is None:
        Z = np.array([nonempty_association(rng, cover, p_link) for _ in range(n_phase)])
    else:
        Z = np.repeat(np.asarray(association, np.int8)[None], n_phase, axis=0)
    phase = PhaseNet.build(feat.size, geometry.ris_elements, links, rng, hidden)
    phase, phase_curve = train_phase_net(phase, cap, chans, F, Z.reshape(n_phase, -1), lr, phase_epochs, rng=rng)
    return DccnBundle(cap, phase, feat, params.quant_bits, cap_curve, phase_curve, rel)


def write_dataset_csv(path, data: Sequence[DccnSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not data:
            w.writerow(["capacity"])
            return
        nf, G, L = len(data[0].features), len(data[0].phases), data[0].association.size
        w.writerow([f"f{i}" for i in range(nf)] + [f"phase{g}" for g in range(G)]
                   + [f"z{l}" for l in range(L)] + ["capacity"])
        for s in data:
            w.writerow([repr(float(v)) for v in s.features] + [repr(float(v)) for v in s.phases]
                       + [int(v) for v in s.association.ravel()] + [repr(s.capacity)])


def read_dataset_csv(path, shape):
    """Returns ``(features, phases, association, capacity)`` arrays; ``shape`` is (n_features, G, M, N)."""
    nf, G, M, N = shape
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return (rows[:, :nf], rows[:, nf:nf + G], rows[:, nf + G:nf + G + M * N].reshape(-1, M, N).astype(np.int8),
            rows[:, -1])
