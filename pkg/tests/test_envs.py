import numpy as np
import pytest

from grapelab.envs import (
    FROZENLAKE_8X8,
    LEFT,
    RIGHT,
    FrozenLakeEnv,
    NChainEnv,
    ReplayBuffer,
    Transition,
    TransitionBatch,
    frozenlake_goal,
    frozenlake_mdp,
    nchain_mdp,
    sample_trajectories,
)


def _freq_within_3_sigma(counts, n, probs):
    freq = counts / n
    sd = np.sqrt(np.maximum(probs * (1 - probs), 1e-12) / n)
    return np.all(np.abs(freq - probs) <= 3 * sd + 1e-12)


def test_nchain_layout():
    mdp = nchain_mdp(0.0)
    assert mdp.n_states == 22 and mdp.n_actions == 2
    assert mdp.terminal[0] and mdp.terminal[21] and not mdp.terminal[1:21].any()
    assert mdp.transition[5, RIGHT, 6] == 1.0 and mdp.transition[5, LEFT, 4] == 1.0
    assert mdp.reward[20, RIGHT] == 1.0 and mdp.reward[19, RIGHT] == 0.0


def test_nchain_deterministic_simulator():
    env = NChainEnv(0.0, start_state=3, rng=np.random.default_rng(0))
    assert env.reset() == 3
    assert env.step(RIGHT) == (4, 0.0, False)
    assert env.step(LEFT) == (3, 0.0, False)


def test_nchain_simulator_matches_model():
    env = NChainEnv(0.2, start_state=5, rng=np.random.default_rng(1))
    model = env.model()
    n = 20_000
    counts = np.zeros(22)
    for _ in range(n):
        env.reset()
        y, _, _ = env.step(RIGHT)
        counts[y] += 1
    assert _freq_within_3_sigma(counts, n, model.transition[5, RIGHT])


def test_nchain_episode_end_and_reward():
    env = NChainEnv(0.0, start_state=20, rng=np.random.default_rng(2))
    env.reset()
    assert env.step(RIGHT) == (21, 1.0, True)
    with pytest.raises(RuntimeError):
        env.step(RIGHT)


def test_nchain_uniform_start():
    env = NChainEnv(0.2, start_state="uniform-random", rng=np.random.default_rng(3))
    starts = {env.reset() for _ in range(500)}
    assert starts == set(range(1, 21))
    with pytest.raises(ValueError):
        NChainEnv(0.2, start_state=0)
    with pytest.raises(ValueError):
        NChainEnv(0.7)


def test_frozenlake_model_rows():
    mdp = frozenlake_mdp()
    assert mdp.n_states == 64 and mdp.n_actions == 4
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
    flat = "".join(FROZENLAKE_8X8)
    for s, c in enumerate(flat):
        assert mdp.terminal[s] == (c in "HG")
    goal = frozenlake_goal()
    assert goal == 63
    # reward is the probability of stepping onto the goal; terminal rows pay nothing
    live = ~mdp.terminal
    np.testing.assert_allclose(mdp.reward[live], mdp.transition[live, :, goal], atol=1e-15)
    assert not mdp.reward[mdp.terminal].any()
    # from the start corner, "down" slips left (stays) or right
    np.testing.assert_allclose(mdp.transition[0, 1, [0, 1, 8]], [1 / 3, 1 / 3, 1 / 3])


def test_frozenlake_not_slippery():
    mdp = frozenlake_mdp(slippery=False)
    assert mdp.transition[0, 2, 1] == 1.0
    assert mdp.transition[0, 1, 8] == 1.0


def test_frozenlake_simulator_matches_model():
    env = FrozenLakeEnv(rng=np.random.default_rng(4))
    model = env.model()
    n = 20_000
    for x, a in ((9, 2), (0, 0)):
        counts = np.zeros(64)
        for _ in range(n):
            env.state = x
            y, _, _ = env.step(a)
            counts[y] += 1
        assert _freq_within_3_sigma(counts, n, model.transition[x, a])


def test_frozenlake_terminal_flags():
    env = FrozenLakeEnv(slippery=False, rng=np.random.default_rng(5))
    env.reset()
    env.state = 62
    assert env.step(2) == (63, 1.0, True)
    with pytest.raises(RuntimeError):
        env.step(2)


def _t(i, d=False):
    return Transition(i, 0, 0.0, i + 1, 0.5, d)


def test_replay_buffer_fifo():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.append(_t(i))
    assert len(buf) == 3
    assert [t.x for t in buf] == [2, 3, 4]
    assert list(buf.slice(1, 2).x) == [3, 4]
    with pytest.raises(IndexError):
        buf.slice(2, 2)
    with pytest.raises(ValueError):
        buf.contiguous(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        buf.append(Transition(0, 0, 0.0, 1, 0.0, False))


def test_replay_buffer_contiguous_is_consecutive():
    buf = ReplayBuffer(100)
    for i in range(60):
        buf.append(_t(i))
    rng = np.random.default_rng(1)
    for _ in range(20):
        xs = buf.contiguous(10, rng).x
        assert np.all(np.diff(xs) == 1)


def test_transition_batch_round_trip():
    ts = [_t(0), _t(1, True), _t(5)]
    batch = TransitionBatch.from_transitions(ts)
    assert len(batch) == 3
    assert list(batch) == ts
    with pytest.raises(ValueError):
        TransitionBatch.from_transitions([])


def test_sample_trajectories_freeze_after_termination():
    mdp = nchain_mdp(0.0)
    mu = np.tile([0.0, 1.0], (22, 1))
    mu[:, 0] = 1e-9
    mu /= mu.sum(axis=1, keepdims=True)
    b = sample_trajectories(mdp, mu, 19, RIGHT, 6, 4, np.random.default_rng(0))
    # 19 -> 20 -> 21 then the terminal repeats
    assert list(b.y[:, 0]) == [20, 21, 21, 21, 21, 21]
    assert list(b.d[:, 0]) == [False, True, True, True, True, True]
    assert np.all(b.r[:, 0] == mdp.reward[b.x[:, 0], b.a[:, 0]])
