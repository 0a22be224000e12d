"""PPO with factored masked heads, GAE, and a catalog DQN baseline.

The joint action (sleep move per BS, zoom per BS, server per user) is
sampled head by head.  A sleep move is one step along the mode chain
(shallower, stay or deeper), which is the full set of legal targets.  Each
head's mask depends on the choices already made: zoom is free only for a BS that will be Active, and the candidate servers of
a user depend on the post-action modes and zooms.  The exact masks are stored
with every step so the PPO ratio is computed over the same supports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import env as E
from .bspower import N_SM, N_ZOOM, SmState
from .neural import DenseNet, OptimState, apply_update, backward, forward, init


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- configs
@dataclass
class PpoConfig:
    gamma: float = 0.98
    lam: float = 0.95
    clip: float = 0.2
    learning_rate: float = 3e-3
    iterations: int = 300
    steps_per_iter: int = 512
    minibatch: int = 64
    epochs: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    clip_norm: Optional[float] = 5.0
    hidden: tuple = (128, 128)
    stay_bias: float = 1.0  # initial logit bonus for keeping the current sleep mode
    idle_user_bias: float = -2.0  # initial logit offset for leaving a user unserved
    energy_shaping: float = 0.0  # per watt, subtracted from the training reward only
    reward_scale: float = 0.05  # learning-side reward multiplier (keeps value targets O(1))
    smooth_window: int = 10

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        for k in ("iterations", "steps_per_iter", "minibatch", "epochs", "smooth_window"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")


@dataclass
class DqnConfig:
    gamma: float = 0.98
    learning_rate: float = 3e-3
    replay_capacity: int = 20000
    minibatch: int = 64
    target_sync: int = 500  # env steps
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20000
    train_every: int = 4
    warmup: int = 500
    iterations: int = 300
    steps_per_iter: int = 512
    clip_norm: Optional[float] = 5.0
    hidden: tuple = (128, 128)
    energy_shaping: float = 0.0
    reward_scale: float = 1.0  # learning-side reward multiplier
    double: bool = False  # True: the online network selects the bootstrap action
    huber_delta: Optional[float] = None  # None: squared TD error
    smooth_window: int = 10

    def __post_init__(self):
        if self.replay_capacity < self.minibatch:
            raise ValueError("replay_capacity must be >= minibatch")
        if self.eps_end > self.eps_start:
            raise ValueError("epsilon schedule must be nonincreasing")
        for k in ("iterations", "steps_per_iter", "minibatch", "target_sync", "train_every", "eps_decay_steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    def epsilon(self, step: int) -> float:
        frac = min(1.0, step / self.eps_decay_steps)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


# ---------------------------------------------------------------- policy
def clip_ratio(h, eps: float):
    return np.minimum(np.maximum(h, 1.0 - eps), 1.0 + eps)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the allowed entries; disallowed entries get -inf."""
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    out = z - zmax
    out -= np.log(np.sum(np.exp(out), axis=-1, keepdims=True))
    return out


N_MOVES = len(E.SLEEP_MOVES)
STAY = E.SLEEP_MOVES.index(0)


@dataclass
class FactoredChoice:
    sm: np.ndarray  # M move indices into SLEEP_MOVES
    zoom: np.ndarray  # M
    server: np.ndarray  # N, value M means no service
    targets: np.ndarray  # M absolute sleep targets
    sm_mask: np.ndarray  # M x 3
    zoom_mask: np.ndarray  # M x 3
    assoc_mask: np.ndarray  # N x (M+1)
    logp: float


class PolicyHeads:
    """Shared trunk emitting [M*3 sleep move | M*3 zoom | N*(M+1) association] logits.

    A fresh network starts biased towards keeping the current mode
    (``stay_bias``) and away from leaving a user unserved (``idle_user_bias``).
    """

    def __init__(self, obs_size: int, n_bs: int, n_users: int, rng: np.random.Generator,
                 hidden=(128, 128), net: Optional[DenseNet] = None, stay_bias: float = 1.0,
                 idle_user_bias: float = -2.0):
        self.M, self.N = n_bs, n_users
        self.sizes = (n_bs * N_MOVES, n_bs * N_ZOOM, n_users * (n_bs + 1))
        n_out = sum(self.sizes)
        if net is None:
            net = init((obs_size, *hidden, n_out), rng, out_scale=0.01)
            b = net.biases[-1]
            b[STAY:self.sizes[0]:N_MOVES] = stay_bias
            b[sum(self.sizes[:2]) + n_bs::n_bs + 1] = idle_user_bias
        self.net = net
        if self.net.layer_dims[-1] != n_out or self.net.layer_dims[0] != obs_size:
            raise ValueError("policy net dims do not match the environment")

    def split(self, logits: np.ndarray):
        a, b, _ = self.sizes
        lead = logits.shape[:-1]
        return (logits[..., :a].reshape(*lead, self.M, N_MOVES),
                logits[..., a:a + b].reshape(*lead, self.M, N_ZOOM),
                logits[..., a + b:].reshape(*lead, self.N, self.M + 1))

    def act(self, obs: np.ndarray, env: E.SleepZoomEnv, rng: Optional[np.random.Generator],
            greedy: bool = False) -> FactoredChoice:
        logits = forward(self.net, obs[None, :])[0][0]
        return self.choose(logits, env, rng, greedy)

    def choose(self, logits, env: E.SleepZoomEnv, rng, greedy: bool) -> FactoredChoice:
        ls, lz, la = self.split(logits)
        pick = _argmax_rows if greedy else (lambda lp: _sample_rows(lp, rng))
        sm_mask = np.array([env.move_mask(s) for s in env.statuses])
        lp_s = masked_log_softmax(ls, sm_mask)
        sm = pick(lp_s)
        targets = env.move_targets(sm)
        post = env.post_modes(targets)
        zoom_mask = np.array([env.zoom_mask(p, s) for p, s in zip(post, env.statuses)])
        lp_z = masked_log_softmax(lz, zoom_mask)
        zoom = pick(lp_z)
        assoc_mask = env.association_mask(post, zoom)
        lp_a = masked_log_softmax(la, assoc_mask)
        server = pick(lp_a)
        logp = (lp_s[np.arange(self.M), sm].sum() + lp_z[np.arange(self.M), zoom].sum()
                + lp_a[np.arange(self.N), server].sum())
        return FactoredChoice(sm, zoom, server, targets, sm_mask, zoom_mask, assoc_mask, float(logp))

    def to_action(self, choice: FactoredChoice) -> E.MdpAction:
        return E.MdpAction.from_servers(choice.targets, choice.zoom, choice.server, self.M)

    def log_probs(self, logits: np.ndarray, sm, zoom, server, sm_mask, zoom_mask, assoc_mask):
        """Batched factored log-probabilities and the per-head probabilities.

        Returns ``(logp[B], (p_s, p_z, p_a))``.
        """
        ls, lz, la = self.split(logits)
        lp_s = masked_log_softmax(ls, sm_mask)
        lp_z = masked_log_softmax(lz, zoom_mask)
        lp_a = masked_log_softmax(la, assoc_mask)
        g_s = np.take_along_axis(lp_s, sm[..., None], -1)[..., 0].sum(-1)
        g_z = np.take_along_axis(lp_z, zoom[..., None], -1)[..., 0].sum(-1)
        g_a = np.take_along_axis(lp_a, server[..., None], -1)[..., 0].sum(-1)
        return g_s + g_z + g_a, (np.exp(lp_s), np.exp(lp_z), np.exp(lp_a))

    def logp_grad(self, probs, sm, zoom, server, weight: np.ndarray) -> np.ndarray:
        """d(sum_b weight_b * logp_b)/d logits, shape B x n_out."""
        out = []
        for p, idx in zip(probs, (sm, zoom, server)):
            g = -p.copy()
            np.put_along_axis(g, idx[..., None], np.take_along_axis(g, idx[..., None], -1) + 1.0, -1)
            g *= weight[:, None, None]
            out.append(g.reshape(len(weight), -1))
        return np.hstack(out)


def _sample_rows(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gumbel-max sampling; masked entries (-inf) are never drawn."""
    return np.argmax(logp + rng.gumbel(size=logp.shape), axis=-1)


def _argmax_rows(logp: np.ndarray) -> np.ndarray:
    return np.argmax(logp, axis=-1)


# ---------------------------------------------------------------- rollouts
@dataclass
class TrajectoryBuffer:
    obs: list = field(default_factory=list)
    sm: list = field(default_factory=list)
    zoom: list = field(default_factory=list)
    server: list = field(default_factory=list)
    sm_mask: list = field(default_factory=list)
    zoom_mask: list = field(default_factory=list)
    assoc_mask: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    value: list = field(default_factory=list)
    reward: list = field(default_factory=list)  # environment reward
    train_reward: list = field(default_factory=list)  # reward used for learning
    done: list = field(default_factory=list)
    energy_j: list = field(default_factory=list)
    last_value: float = 0.0
    episode_returns: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reward)

    def append(self, obs, choice: FactoredChoice, value: float, reward: float, train_reward: float,
               done: bool, energy: float) -> None:
        if not np.isfinite(choice.logp):
            raise TrainingError("non-finite behaviour log-probability")
        self.obs.append(obs)
        self.sm.append(choice.sm)
        self.zoom.append(choice.zoom)
        self.server.append(choice.server)
        self.sm_mask.append(choice.sm_mask)
        self.zoom_mask.append(choice.zoom_mask)
        self.assoc_mask.append(choice.assoc_mask)
        self.logp.append(choice.logp)
        self.value.append(value)
        self.reward.append(reward)
        self.train_reward.append(train_reward)
        self.done.append(done)
        self.energy_j.append(energy)

    def arrays(self) -> dict:
        return {k: np.array(getattr(self, k)) for k in (
            "obs", "sm", "zoom", "server", "sm_mask", "zoom_mask", "assoc_mask",
            "logp", "value", "reward", "train_reward", "done")}


@dataclass
class RolloutState:
    """Carries the partially finished episode between iterations."""
    env: E.SleepZoomEnv
    obs: np.ndarray
    episode_return: float = 0.0
    episodes: int = 0


def start_rollouts(env: E.SleepZoomEnv, seed: int) -> RolloutState:
    env.reset(seed)
    return RolloutState(env, env.observe())


def collect_rollout(state: RolloutState, policy: PolicyHeads, value_net: DenseNet, horizon: int,
                    rng: np.random.Generator, energy_shaping: float = 0.0, reward_scale: float = 1.0,
                    seed_fn: Optional[Callable[[int], int]] = None) -> TrajectoryBuffer:
    env = state.env
    buf = TrajectoryBuffer()
    for _ in range(horizon):
        obs = state.obs
        choice = policy.act(obs, env, rng)
        out = env.step(policy.to_action(choice))
        shaped = reward_scale * (out.reward - energy_shaping * out.info["slot_power_w"])
        buf.append(obs, choice, 0.0, out.reward, shaped, out.done, out.info["energy_j"])
        state.episode_return += out.reward
        if out.done:
            buf.episode_returns.append(state.episode_return)
            state.episode_return = 0.0
            state.episodes += 1
            env.reset(None if seed_fn is None else seed_fn(state.episodes))
        state.obs = env.observe()
    # values of every visited state plus the bootstrap state in one batch
    v = forward(value_net, np.vstack([np.array(buf.obs), state.obs[None, :]]))[0][:, 0]
    buf.value = list(v[:-1])
    buf.last_value = 0.0 if buf.done[-1] else float(v[-1])
    return buf


def compute_gae(rewards, values, dones, last_value: float, gamma: float, lam: float) -> np.ndarray:
    """A(t) = delta(t) + gamma*lam*(1-d(t))*A(t+1), bootstrapping ``last_value`` after the final step."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    T = len(r)
    nxt = np.append(v[1:], last_value)
    delta = r + gamma * nxt * (1.0 - d) - v
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = delta[t] + gamma * lam * (1.0 - d[t]) * acc
        adv[t] = acc
    return adv


@dataclass
class UpdateReport:
    policy_loss: float
    value_loss: float
    value_loss_before: float
    clip_fraction: float
    approx_kl: float
    entropy: float


def ppo_update(buf: TrajectoryBuffer, policy: PolicyHeads, value_net: DenseNet, config: PpoConfig,
               pol_opt: OptimState, val_opt: OptimState, rng: np.random.Generator) -> UpdateReport:
    a = buf.arrays()
    adv = compute_gae(a["train_reward"], a["value"], a["done"], buf.last_value, config.gamma, config.lam)
    returns = adv + a["value"]
    if config.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs = a["obs"]
    v_before = float(np.mean((forward(value_net, obs)[0][:, 0] - returns) ** 2))
    n = len(adv)
    stats = {"pl": [], "vl": [], "cf": [], "kl": [], "ent": []}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.minibatch):
            b = order[i:i + config.minibatch]
            logits, tr = forward(policy.net, obs[b])
            logp, probs = policy.log_probs(logits, a["sm"][b], a["zoom"][b], a["server"][b],
                                           a["sm_mask"][b], a["zoom_mask"][b], a["assoc_mask"][b])
            ratio = np.exp(logp - a["logp"][b])
            A = adv[b]
            unclipped = ratio * A
            clipped = clip_ratio(ratio, config.clip) * A
            surrogate = np.minimum(unclipped, clipped)
            if not np.all(np.isfinite(surrogate)):
                raise TrainingError("non-finite surrogate objective")
            # gradient of -mean(surrogate) wrt logp flows only where the unclipped term is active
            active = unclipped <= clipped
            w = -(active * ratio * A) / len(b)
            g_logits = policy.logp_grad(probs, a["sm"][b], a["zoom"][b], a["server"][b], w)
            ent = 0.0
            if config.entropy_coef:
                ent, g_ent = _entropy_grad(policy, logits, probs, (a["sm_mask"][b], a["zoom_mask"][b],
                                                                    a["assoc_mask"][b]))
                g_logits -= config.entropy_coef * g_ent / len(b)
            apply_update(policy.net, backward(policy.net, tr, g_logits), pol_opt)
            vpred, vtr = forward(value_net, obs[b])
            err = vpred[:, 0] - returns[b]
            vloss = float(np.mean(err ** 2))
            if not np.isfinite(vloss):
                raise TrainingError("non-finite value loss")
            apply_update(value_net, backward(value_net, vtr, (config.value_coef * 2.0 / len(b)) * err[:, None]),
                         val_opt)
            stats["pl"].append(-float(np.mean(surrogate)))
            stats["vl"].append(vloss)
            stats["cf"].append(float(np.mean(np.abs(ratio - 1.0) > config.clip)))
            stats["kl"].append(float(np.mean(a["logp"][b] - logp)))
            stats["ent"].append(float(ent))
    return UpdateReport(float(np.mean(stats["pl"])), float(np.mean(stats["vl"])), v_before,
                        float(np.mean(stats["cf"])), float(np.mean(stats["kl"])), float(np.mean(stats["ent"])))


def _entropy_grad(policy: PolicyHeads, logits, probs, masks):
    """Mean summed head entropy and d(sum_b H_b)/d logits."""
    out, H = [], 0.0
    for p, mask in zip(probs, masks):
        logp = np.where(mask, np.log(np.where(mask, p, 1.0)), 0.0)
        h = -np.sum(p * logp, axis=-1, keepdims=True)
        g = -p * (logp + h)
        H += float(h.sum()) / len(p)
        out.append(g.reshape(len(p), -1))
    return H, np.hstack(out)


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class LearningCurve:
    raw: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    window: int = 10

    @property
    def smoothed(self) -> np.ndarray:
        return moving_average(self.raw, self.window)

    def rows(self):
        s = self.smoothed
        return [(i + 1, r, float(s[i])) for i, r in enumerate(self.raw)]


@dataclass
class PpoResult:
    policy: PolicyHeads
    value_net: DenseNet
    curve: LearningCurve
    behaviour: Optional[PolicyHeads] = None


def _iteration_reward(buf_returns: list, buf: TrajectoryBuffer, T: int) -> float:
    """Mean return of the episodes that ended in this rollout; per-step mean x T otherwise."""
    if buf_returns:
        return float(np.mean(buf_returns))
    return float(np.mean(buf.reward)) * T


def train_ppo(env_factory: Callable[[], E.SleepZoomEnv], config: PpoConfig, seed: int,
              callback: Optional[Callable] = None) -> PpoResult:
    rng = np.random.default_rng(seed)
    env = env_factory()
    policy = PolicyHeads(env.obs_size, env.M, env.N, rng, config.hidden, stay_bias=config.stay_bias,
                         idle_user_bias=config.idle_user_bias)
    value_net = init((env.obs_size, *config.hidden, 1), rng)
    pol_opt = OptimState(config.learning_rate, clip_norm=config.clip_norm)
    val_opt = OptimState(config.learning_rate, clip_norm=config.clip_norm)
    episode_seed = np.random.SeedSequence(seed).generate_state(1)[0]
    state = start_rollouts(env, int(episode_seed))
    curve = LearningCurve(window=config.smooth_window)
    # theta_old: the behaviour policy that collects each rollout
    behaviour = PolicyHeads(env.obs_size, env.M, env.N, None, net=policy.net.copy())
    for it in range(config.iterations):
        buf = collect_rollout(state, behaviour, value_net, config.steps_per_iter, rng, config.energy_shaping,
                              config.reward_scale, seed_fn=lambda k: int(episode_seed) + k)
        rep = ppo_update(buf, policy, value_net, config, pol_opt, val_opt, rng)
        behaviour.net.load_flat(policy.net.flat())
        if not np.array_equal(behaviour.net.flat(), policy.net.flat()):
            raise TrainingError("behaviour snapshot differs from the updated policy")
        curve.raw.append(_iteration_reward(buf.episode_returns, buf, env.config.episode_slots))
        curve.reports.append(rep)
        if callback is not None:
            callback(it, curve, policy)
    return PpoResult(policy, value_net, curve, behaviour)


# ---------------------------------------------------------------- DQN
class ActionCatalog:
    """Joint per-BS (sleep move, zoom) pairs: 9^M entries, association left to the heuristic."""

    def __init__(self, n_bs: int):
        self.M = n_bs
        self.per_bs = N_MOVES * N_ZOOM
        self.size = self.per_bs ** n_bs
        self.radix = self.per_bs ** np.arange(n_bs)
        self._masks = {}

    def decode(self, index: int):
        digits = (index // self.radix) % self.per_bs
        return digits // N_ZOOM, digits % N_ZOOM

    def per_bs_mask(self, env: E.SleepZoomEnv) -> np.ndarray:
        """M x 9 legality of (sleep move, zoom) per BS."""
        out = np.zeros((self.M, self.per_bs), dtype=bool)
        for m, s in enumerate(env.statuses):
            out[m] = self._bs_mask(env, s)
        return out

    def _bs_mask(self, env: E.SleepZoomEnv, status) -> np.ndarray:
        key = (env.config.scheme, env.config.max_sleep_depth, status)
        mask = self._masks.get(key)
        if mask is None:
            mask = np.zeros(self.per_bs, dtype=bool)
            for k in np.flatnonzero(env.move_mask(status)):
                post = env.post_modes_one(status, status.mode + E.SLEEP_MOVES[k])
                mask[k * N_ZOOM + np.flatnonzero(env.zoom_mask(post, status))] = True
            self._masks[key] = mask
        return mask

    def joint_mask(self, per_bs: np.ndarray) -> np.ndarray:
        """Flatten per-BS legality (``[..., M, 9]``) into catalog order; BS 0 is the fastest digit."""
        mask = per_bs[..., 0, :]
        for m in range(1, self.M):
            mask = (per_bs[..., m, :, None] & mask[..., None, :]).reshape(*per_bs.shape[:-2], -1)
        return mask

    def action(self, index: int, env: E.SleepZoomEnv) -> E.MdpAction:
        moves, zoom = self.decode(index)
        return env.default_action(env.move_targets(moves), zoom)


@dataclass
class ReplayBuffer:
    capacity: int
    obs_size: int
    n_bs: int
    per_bs: int

    def __post_init__(self):
        c = self.capacity
        self.obs = np.zeros((c, self.obs_size))
        self.next_obs = np.zeros((c, self.obs_size))
        self.action = np.zeros(c, dtype=np.int64)
        self.reward = np.zeros(c)
        self.done = np.zeros(c)
        self.next_mask = np.zeros((c, self.n_bs, self.per_bs), dtype=bool)
        self.size = 0
        self.pos = 0

    def add(self, obs, action, reward, next_obs, done, next_mask) -> None:
        i = self.pos
        self.obs[i], self.action[i], self.reward[i] = obs, action, reward
        self.next_obs[i], self.done[i], self.next_mask[i] = next_obs, done, next_mask
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.size, n)
        return idx


def td_targets(reward, next_q, next_mask, done, gamma: float, select_q=None) -> np.ndarray:
    """r + gamma * Q_target(u', a*) * (1 - d), a* the best legal action.

    ``a*`` maximizes ``select_q`` when given (double DQN: the online network
    picks, the target network evaluates), otherwise ``next_q`` itself.
    """
    chooser = next_q if select_q is None else select_q
    legal = next_mask.any(axis=-1)
    a_star = np.argmax(np.where(next_mask, chooser, -np.inf), axis=-1)
    best = np.where(legal, np.take_along_axis(next_q, a_star[:, None], -1)[:, 0], 0.0)
    return reward + gamma * best * (1.0 - done)


@dataclass
class DqnResult:
    q_net: DenseNet
    catalog: ActionCatalog
    curve: LearningCurve


class DqnAgent:
    def __init__(self, q_net: DenseNet, catalog: ActionCatalog):
        self.q_net = q_net
        self.catalog = catalog

    def act(self, obs, env: E.SleepZoomEnv, rng=None, greedy: bool = True, epsilon: float = 0.0) -> int:
        mask = self.catalog.joint_mask(self.catalog.per_bs_mask(env))
        if not greedy and rng is not None and rng.random() < epsilon:
            return int(rng.choice(np.flatnonzero(mask)))
        q = forward(self.q_net, obs[None, :])[0][0]
        return int(np.argmax(np.where(mask, q, -np.inf)))


def train_dqn(env_factory: Callable[[], E.SleepZoomEnv], config: DqnConfig, seed: int,
              callback: Optional[Callable] = None) -> DqnResult:
    rng = np.random.default_rng(seed)
    env = env_factory()
    cat = ActionCatalog(env.M)
    q_net = init((env.obs_size, *config.hidden, cat.size), rng)
    target = q_net.copy()
    opt = OptimState(config.learning_rate, clip_norm=config.clip_norm)
    replay = ReplayBuffer(config.replay_capacity, env.obs_size, env.M, cat.per_bs)
    agent = DqnAgent(q_net, cat)
    episode_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    episodes = 0
    env.reset(episode_seed)
    obs = env.observe()
    per_bs = cat.per_bs_mask(env)
    ep_ret = 0.0
    step = 0
    curve = LearningCurve(window=config.smooth_window)
    for it in range(config.iterations):
        returns, rewards = [], []
        for _ in range(config.steps_per_iter):
            mask = cat.joint_mask(per_bs)
            if rng.random() < config.epsilon(step):
                a_idx = int(rng.choice(np.flatnonzero(mask)))
            else:
                q = forward(q_net, obs[None, :])[0][0]
                a_idx = int(np.argmax(np.where(mask, q, -np.inf)))
            out = env.step(cat.action(a_idx, env))
            shaped = config.reward_scale * (out.reward - config.energy_shaping * out.info["slot_power_w"])
            ep_ret += out.reward
            rewards.append(out.reward)
            if out.done:
                returns.append(ep_ret)
                ep_ret = 0.0
                episodes += 1
                nxt_obs = env.observe()
                nxt_mask = cat.per_bs_mask(env)
                replay.add(obs, a_idx, shaped, nxt_obs, True, nxt_mask)
                env.reset(episode_seed + episodes)
            else:
                nxt_obs = env.observe()
                nxt_mask = cat.per_bs_mask(env)
                replay.add(obs, a_idx, shaped, nxt_obs, False, nxt_mask)
            obs = env.observe()
            per_bs = cat.per_bs_mask(env) if out.done else nxt_mask
            step += 1
            if replay.size >= max(config.minibatch, config.warmup) and step % config.train_every == 0:
                dqn_update(q_net, target, replay, cat, config, opt, rng)
            if step % config.target_sync == 0:
                target = q_net.copy()
        curve.raw.append(float(np.mean(returns)) if returns else float(np.mean(rewards)) * env.config.episode_slots)
        if callback is not None:
            callback(it, curve, agent)
    return DqnResult(q_net, cat, curve)


def dqn_update(q_net: DenseNet, target: DenseNet, replay: ReplayBuffer, cat: ActionCatalog, config: DqnConfig,
               opt: OptimState, rng: np.random.Generator) -> Optional[float]:
    """One minibatch TD step; returns the loss or None while the replay is too small."""
    if replay.size < config.minibatch:
        return None
    idx = replay.sample(rng, config.minibatch)
    next_q = forward(target, replay.next_obs[idx])[0]
    select = forward(q_net, replay.next_obs[idx])[0] if config.double else None
    nmask = cat.joint_mask(replay.next_mask[idx])
    y = td_targets(replay.reward[idx], next_q, nmask, replay.done[idx], config.gamma, select)
    q, tr = forward(q_net, replay.obs[idx])
    rows = np.arange(len(idx))
    err = q[rows, replay.action[idx]] - y
    up = np.zeros_like(q)
    if config.huber_delta is None:
        up[rows, replay.action[idx]] = 2.0 * err / len(idx)
        loss = float(np.mean(err ** 2))
    else:
        d = config.huber_delta
        up[rows, replay.action[idx]] = np.clip(err, -d, d) / len(idx)
        a = np.abs(err)
        loss = float(np.mean(np.where(a <= d, 0.5 * err ** 2, d * (a - 0.5 * d))))
    apply_update(q_net, backward(q_net, tr, up), opt)
    if not np.isfinite(loss):
        raise TrainingError("non-finite DQN loss")
    return loss


# ---------------------------------------------------------------- evaluation
@dataclass
class EvalMetrics:
    mean_reward: float
    total_energy_j: float
    violation_rate: float
    slots: int
    rewards: list = field(default_factory=list)
    cumulative_energy: list = field(default_factory=list)


def greedy_controller(agent) -> Callable[[np.ndarray, E.SleepZoomEnv], E.MdpAction]:
    """Wrap a trained learner (or None for the fixed AA behaviour) as ``obs, env -> action``."""
    if agent is None:
        return lambda obs, env: env.default_action()
    if isinstance(agent, PolicyHeads):
        return lambda obs, env: agent.to_action(agent.act(obs, env, None, greedy=True))
    if isinstance(agent, DqnAgent):
        return lambda obs, env: agent.catalog.action(agent.act(obs, env, greedy=True), env)
    raise TypeError(f"unsupported agent {type(agent).__name__}")


def evaluate(controller, env: E.SleepZoomEnv, slots: int, seed: int, on_step: Optional[Callable] = None) -> EvalMetrics:
    """Greedy run of ``slots`` slots, resetting at each episode end (seeds ``seed``, ``seed+1``, ...)."""
    if slots <= 0:
        return EvalMetrics(0.0, 0.0, 0.0, 0)
    env.reset(seed)
    episode = 0
    obs = env.observe()
    rewards, cum = [], []
    total = 0.0
    violations = 0
    for t in range(slots):
        out = env.step(controller(obs, env))
        total += out.info["energy_j"]
        rewards.append(out.reward)
        cum.append(total)
        violations += bool(out.info["delay_violation"])
        if on_step is not None:
            on_step(t, out)
        if out.done:
            episode += 1
            env.reset(seed + episode)
        obs = env.observe()
    return EvalMetrics(float(np.mean(rewards)), total, violations / slots, slots, rewards, cum)
