import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepzoom import bspower as bp
from sleepzoom import env as E
from sleepzoom import netmodel as nm
from sleepzoom import traffic as tr
from sleepzoom.bspower import SmState, ZoomLevel


def make_env(scheme="PSZR", interarrival=20.0, size_mb=0.05, seed=0, **kw):
    cfg = E.EnvConfig(scheme=scheme, traffic=tr.TrafficConfig.from_mb(interarrival, size_mb), **kw)
    return E.SleepZoomEnv(cfg, seed=seed)


def random_legal_action(env, rng):
    sm = np.array([rng.choice(np.flatnonzero(env.sm_mask(s))) for s in env.statuses])
    post = env.post_modes(sm)
    zoom = np.array([rng.choice(np.flatnonzero(env.zoom_mask(p, s))) for p, s in zip(post, env.statuses)])
    amask = env.association_mask(post, zoom)
    servers = np.array([rng.choice(np.flatnonzero(row)) for row in amask])
    return E.MdpAction.from_servers(sm, zoom, servers, env.M)


def test_reset_examples():
    env = make_env(seed=3)
    s = env.reset(3)
    assert s.pending == 0.0
    assert list(s.sm_vector) == [SmState.ACTIVE] * 3
    obs = env.observe()
    assert obs[0] == 0.0
    assert np.array_equal(obs[1 + 15:1 + 15 + 5], [1, 0, 0, 0, 0])


def test_observation_layout_length():
    env = make_env()
    M, N = 3, 5
    assert env.observe().size == E.observation_size(M, N) == 1 + M * N + 5 * M + 1 + 2 * N + 4 * M


def test_same_seed_same_trajectory():
    runs = []
    for _ in range(2):
        env = make_env(seed=11)
        rng = np.random.default_rng(5)
        feats, energies = [], []
        for _ in range(300):
            out = env.step(random_legal_action(env, rng))
            feats.append(env.observe())
            energies.append(out.info["energy_j"])
            if out.done:
                env.reset(12)
        runs.append((np.array(feats), np.array(energies)))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_mid_transition_only_stay():
    env = make_env()
    s = bp.begin_transition(bp.BsStatus(mode=SmState.LIGHT), SmState.DEEP, env.config.table)
    mask = env.sm_mask(s)
    assert mask.sum() == 1 and mask[SmState.LIGHT]
    assert np.array_equal(env.move_mask(s), [False, True, False])


def test_zoom_in_excludes_user_beyond_40m():
    geometry = nm.NetworkGeometry.from_coords([(0.0, 0.0)], [(55.0, 0.0), (30.0, 0.0)], (10.0, 10.0), 8)
    env = E.SleepZoomEnv(E.EnvConfig(geometry=geometry, scheme="PSZ"))
    mask = env.association_mask([SmState.ACTIVE], [ZoomLevel.ZOOM_IN])
    assert not mask[0, 0] and mask[1, 0]
    mask = env.association_mask([SmState.ACTIVE], [ZoomLevel.ZOOM_OUT])
    assert mask[0, 0]


def test_all_deep_only_no_service():
    env = make_env()
    mask = env.association_mask([SmState.DEEP] * 3, [ZoomLevel.NO_ZOOM] * 3)
    assert mask[:, :3].sum() == 0 and mask[:, 3].all()


def test_all_deep_step_energy():
    env = make_env(interarrival=1e300)
    env.statuses = [bp.BsStatus(mode=SmState.DEEP)] * 3
    out = env.step(env.default_action())
    expected = 3 * 0.3e-3 + 128 * 1.5e-3 * 1e-3
    assert out.info["energy_j"] == pytest.approx(expected, abs=1e-18)
    assert out.info["ris_energy_j"] == pytest.approx(1.92e-4, abs=1e-18)


def test_unserved_backlog_hits_penalty_branch():
    env = make_env(interarrival=1.0)
    p = env.config.reward
    rewards = []
    for _ in range(int(p.d_max) + 2):
        a = env.default_action()
        a = E.MdpAction(a.sm_targets, a.zooms, np.zeros_like(a.association))
        rewards.append(env.step(a).reward)
    assert rewards[-1] == p.L3


def test_done_at_episode_end():
    env = make_env(episode_slots=7)
    dones = [env.step(env.default_action()).done for _ in range(7)]
    assert dones == [False] * 6 + [True]


def test_reward_examples():
    p = E.RewardParams(p_sm1=4.5)
    assert E.reward(3.0, 0.0, 0.0, p) == p.L2
    assert E.reward(4.5, 0.0, 0.0, p) == p.L1
    assert E.reward(9.0, 10.0, 11.0, p) == p.L3
    assert E.reward(9.0, 10.0, 3.0, p) == p.L4
    assert E.reward(9.0, 10.0, 10.0, p) == p.L3


def test_reward_params_validation():
    with pytest.raises(ValueError):
        E.RewardParams(L3=-1.5)
    with pytest.raises(ValueError):
        E.RewardParams(d_max=0.0)


def test_illegal_action_raises_and_counts():
    env = make_env()
    bad = E.MdpAction(np.array([SmState.MICRO] * 3), np.ones(3, int), np.zeros((3, 5), np.int8))
    with pytest.raises(E.ConstraintError):
        env.step(bad)
    assert env.constraint_violations == 1
    z = np.zeros((3, 5), np.int8)
    z[0, 1] = z[1, 1] = 1
    with pytest.raises(E.ConstraintError):
        env.step(E.MdpAction(np.zeros(3, int), np.ones(3, int), z))


@pytest.mark.parametrize("scheme", [s.value for s in E.Scheme])
def test_random_legal_rollout_constraints_energy_and_branches(scheme):
    """10^5 random legal steps: Z column sums <= 1, servers cover their users,
    info energies add up to the ledgers, and exactly one reward branch fires."""
    env = make_env(scheme=scheme, interarrival=10.0, seed=1)
    rng = np.random.default_rng(2)
    p = env.config.reward
    steps = 100_000 // len(E.Scheme) + 1
    total_info = 0.0
    episode = 0
    for _ in range(steps):
        a = random_legal_action(env, rng)
        z = a.association
        assert np.all(z.sum(axis=0) <= 1)
        radii = env.radii[np.asarray(a.zooms)]
        served_m, served_n = np.nonzero(z)
        assert np.all(env.dist[served_m, served_n] <= radii[served_m])
        out = env.step(a)
        total_info += out.info["energy_j"]
        branches = [out.reward == c for c in (p.L1, p.L2, p.L3, p.L4)]
        assert sum(branches) == 1
        if out.done:
            assert total_info == pytest.approx(env.system_energy(), rel=1e-12)
            total_info = 0.0
            episode += 1
            env.reset(100 + episode)


def test_active_users_silences_the_rest():
    env = make_env(interarrival=2.0, active_users=2)
    for _ in range(200):
        env.step(env.default_action())
    assert np.all(env.queues.user_pending()[2:] == 0)
    assert all(c[1] < 2 for c in env.queues.completed)


def test_trace_csv(tmp_path):
    env = make_env()
    out = env.step(env.default_action())
    E.write_trace_csv(tmp_path / "t.csv", [(1, out.info, out.reward)])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "slot,modes,energy_J,pending_bits,worst_delay_ms,reward"
    assert lines[1].startswith("1,ACTIVE|ACTIVE|ACTIVE,")
