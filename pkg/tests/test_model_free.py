import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grapelab.envs import RIGHT, FrozenLakeEnv, NChainEnv, Transition, TransitionBatch, nchain_mdp, sample_trajectories
from grapelab.mdp import AlgoParams, advantage_of, dirichlet_policy, exact_q_value, operator_matrices, state_value
from grapelab.model_free import (
    frozenlake_control_run,
    grape_targets,
    nchain_eval_run,
    retrace_targets,
    table_update_from_targets,
    trpo_softmax_update,
)

GAMMA = 0.9


def _episode(rng, S, A, length, pi, mu_table, terminal_last=True):
    xs = rng.integers(S, size=length)
    acts = rng.integers(A, size=length)
    ts = []
    for t in range(length):
        y = int(xs[t + 1]) if t + 1 < length else int(rng.integers(S))
        ts.append(Transition(int(xs[t]), int(acts[t]), float(rng.normal()), y,
                             float(mu_table[xs[t], acts[t]]), terminal_last and t == length - 1))
    return ts


def test_terminal_transition_with_zero_lambda_gives_reward():
    psi = np.arange(6.0).reshape(3, 2)
    pi = np.full((3, 2), 0.5)
    traj = [Transition(1, 0, 0.7, 2, 0.5, True)]
    assert grape_targets(traj, psi, pi, AlgoParams(0.0, 0.0, GAMMA))[0] == pytest.approx(0.7)
    assert retrace_targets(traj, psi, pi, AlgoParams(0.0, 0.0, GAMMA))[0] == pytest.approx(0.7)
    # alpha adds the gap of the start pair
    adv = advantage_of(psi, pi)[1, 0]
    assert grape_targets(traj, psi, pi, AlgoParams(0.5, 0.0, GAMMA))[0] == pytest.approx(0.7 + 0.5 * adv)


def test_on_policy_unit_lambda_is_monte_carlo_return():
    rng = np.random.default_rng(0)
    pi = dirichlet_policy(rng, 4, 2)
    q = np.repeat(rng.normal(size=(4, 1)), 2, axis=1)  # action-independent, so the lambda-return telescopes
    traj = _episode(rng, 4, 2, 7, pi, pi)
    ret = sum(GAMMA**t * tr.r for t, tr in enumerate(traj))
    assert retrace_targets(traj, q, pi, AlgoParams(0.0, 1.0, GAMMA))[0] == pytest.approx(ret, rel=1e-12)
    assert grape_targets(traj, q, pi, AlgoParams(0.0, 1.0, GAMMA))[0] == pytest.approx(ret, rel=1e-12)


def test_grape_and_retrace_coincide_without_traces():
    rng = np.random.default_rng(1)
    pi, mu = dirichlet_policy(rng, 5, 3), dirichlet_policy(rng, 5, 3)
    psi = rng.normal(size=(5, 3))
    traj = _episode(rng, 5, 3, 12, pi, mu)
    p = AlgoParams(0.0, 0.0, GAMMA)
    np.testing.assert_allclose(grape_targets(traj, psi, pi, p), retrace_targets(traj, psi, pi, p))


def test_batch_columns_match_single_trajectories():
    rng = np.random.default_rng(2)
    pi, mu = dirichlet_policy(rng, 5, 3), dirichlet_policy(rng, 5, 3)
    psi = rng.normal(size=(5, 3))
    cols = [TransitionBatch.from_transitions(_episode(rng, 5, 3, 9, pi, mu, terminal_last=False)) for _ in range(3)]
    stacked = TransitionBatch(*(np.stack([getattr(c, f) for c in cols], axis=1) for f in ("x", "a", "r", "y", "mu", "d")))
    p = AlgoParams(0.6, 0.8, GAMMA)
    both = grape_targets(stacked, psi, pi, p)
    for j, c in enumerate(cols):
        np.testing.assert_allclose(both[:, j], grape_targets(c, psi, pi, p), atol=1e-13)


def test_episode_isolation():
    rng = np.random.default_rng(3)
    pi, mu = dirichlet_policy(rng, 5, 3), dirichlet_policy(rng, 5, 3)
    psi = rng.normal(size=(5, 3))
    ep1 = _episode(rng, 5, 3, 6, pi, mu)
    ep2 = _episode(rng, 5, 3, 8, pi, mu)
    ep3 = _episode(rng, 5, 3, 4, pi, mu)
    p = AlgoParams(0.9, 1.0, GAMMA)
    for fn in (grape_targets, retrace_targets):
        a = fn(ep1 + ep2 + ep3, psi, pi, p)
        b = fn(ep3 + ep1 + ep2, psi, pi, p)
        np.testing.assert_allclose(a[:6], b[4:10])
        np.testing.assert_allclose(fn(ep1, psi, pi, p), a[:6])


@pytest.mark.parametrize("x0", [10, 20, 1])
def test_unbiased_targets_small_sample(x0):
    # starts next to either end exercise the terminal cut
    rng = np.random.default_rng(4)
    mdp = nchain_mdp(0.2)
    pi, mu = dirichlet_policy(rng, 22, 2), dirichlet_policy(rng, 22, 2)
    psi = rng.normal(size=(22, 2))
    batch = sample_trajectories(mdp, mu, x0, RIGHT, 150, 20_000, rng)
    p = AlgoParams(0.5, 0.8, mdp.gamma)
    ops = operator_matrices(mdp, pi, mu, 0.8)
    g0 = grape_targets(batch, psi, pi, p)[0]
    want = ops["grape"](psi)[x0, RIGHT] + 0.5 * advantage_of(psi, pi)[x0, RIGHT]
    assert abs(g0.mean() - want) < 3 * g0.std(ddof=1) / np.sqrt(g0.size)
    r0 = retrace_targets(batch, psi, pi, p)[0]
    want = ops["retrace"](psi)[x0, RIGHT]
    assert abs(r0.mean() - want) < 3 * r0.std(ddof=1) / np.sqrt(r0.size)


def test_targets_reject_zero_behaviour_probability():
    with pytest.raises(ValueError):
        grape_targets([Transition(0, 0, 0.0, 1, 0.0, False)], np.zeros((2, 2)), np.full((2, 2), 0.5), AlgoParams())


def test_table_update_from_targets():
    table = np.array([[5.0, 5.0], [5.0, 5.0]])
    traj = [Transition(0, 1, 0, 0, 0.5, False), Transition(0, 1, 0, 0, 0.5, False), Transition(1, 0, 0, 0, 0.5, False)]
    new = table_update_from_targets(table, traj, np.array([1.0, 3.0, 7.0]))
    np.testing.assert_array_equal(new, [[5.0, 2.0], [7.0, 5.0]])
    blended = table_update_from_targets(table, traj, np.array([1.0, 3.0, 7.0]), eta=0.5)
    np.testing.assert_array_equal(blended, [[5.0, 3.5], [6.0, 5.0]])
    with pytest.raises(ValueError):
        table_update_from_targets(table, traj, np.array([1.0]))


def test_trpo_examples():
    u = np.full((1, 2), 0.5)
    np.testing.assert_allclose(trpo_softmax_update(u, np.zeros((1, 2)), 3.0), u)
    e = np.e
    np.testing.assert_allclose(trpo_softmax_update(u, np.array([[1.0, 0.0]]), 1.0), [[e / (1 + e), 1 / (1 + e)]])
    with pytest.raises(ValueError):
        trpo_softmax_update(u, np.zeros((1, 2)), 0.0)
    # large beta * adv must not overflow
    out = trpo_softmax_update(u, np.array([[100.0, -100.0]]), 100.0)
    assert np.all(np.isfinite(out)) and out[0, 0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), arrays(float, (4, 3), elements=st.floats(-50, 50)),
       arrays(float, (4, 1), elements=st.floats(-50, 50)), st.floats(0.01, 20.0))
def test_trpo_shift_invariance(seed, adv, shift, beta):
    pi = dirichlet_policy(np.random.default_rng(seed), 4, 3)
    a = trpo_softmax_update(pi, adv, beta)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(trpo_softmax_update(pi, adv + shift, beta), a, atol=1e-9)


def test_control_variate_reduces_variance():
    rng = np.random.default_rng(5)
    mdp = nchain_mdp(0.2)
    pi, mu = dirichlet_policy(rng, 22, 2), dirichlet_policy(rng, 22, 2)
    alpha = 0.99
    q = exact_q_value(mdp, pi)
    v = state_value(q, pi)
    psi = v[:, None] + advantage_of(q, pi) / (1 - alpha) + rng.normal(0.0, 0.01, q.shape)
    b = sample_trajectories(mdp, mu, 10, RIGHT, 60, 2000, rng)
    live = ~b.d
    v_psi = state_value(psi, pi)
    nxt = b.r + mdp.gamma * live * v_psi[b.y]
    psi_xa = psi[b.x, b.a]
    delta = nxt - (1 - alpha) * psi_xa - alpha * v_psi[b.x]
    vanilla = nxt - psi_xa
    # only steps taken before termination are real samples
    real = np.concatenate([np.ones((1, b.d.shape[1]), bool), ~b.d[:-1]], axis=0) & ~np.isin(b.x, (0, 21))
    assert delta[real].var() < vanilla[real].var()


def test_nchain_eval_run_properties():
    rng = np.random.default_rng(6)
    pi, mu = dirichlet_policy(rng, 22, 2), dirichlet_policy(rng, 22, 2)
    p = AlgoParams(0.99, 0.0, 0.99)

    def run(seed):
        return nchain_eval_run(NChainEnv(0.0, rng=np.random.default_rng(seed)), pi, mu, p, "grape",
                               blocks=60, rng=np.random.default_rng(seed + 1))

    s = run(10)
    assert s.values[0] == 1.0 and s.values.size == 61
    np.testing.assert_array_equal(s.values, run(10).values)


def test_nchain_grape_high_alpha_deterministic_chain_learns():
    rng = np.random.default_rng(7)
    pi, mu = dirichlet_policy(rng, 22, 2), dirichlet_policy(rng, 22, 2)
    s = nchain_eval_run(NChainEnv(0.0, rng=np.random.default_rng(8)), pi, mu, AlgoParams(0.99, 0.0, 0.99),
                        "grape", blocks=800, rng=np.random.default_rng(9))
    assert np.median(s.values[-80:]) < 0.1


def test_frozenlake_control_shapes_and_tiny_beta():
    env = FrozenLakeEnv(rng=np.random.default_rng(10))
    s = frozenlake_control_run(env, AlgoParams(0.9, 0.0, 0.99, beta=1e-12), "grape", total_steps=20_000,
                               N=250, policy_period=5_000, rng=np.random.default_rng(11))
    assert s.values.size == 20_000 // 5_000 + 1
    assert np.all((s.values >= 0) & (s.values <= 1))
    np.testing.assert_allclose(s.values, s.values[0], rtol=1e-9)
    assert list(s.steps) == [0, 5000, 10000, 15000, 20000]
    with pytest.raises(ValueError):
        frozenlake_control_run(env, AlgoParams(beta=1.0), "grape", total_steps=10, policy_period=100)
    with pytest.raises(ValueError):
        frozenlake_control_run(env, AlgoParams(), "grape", total_steps=100, policy_period=100)


def test_frozenlake_control_counts_skipped_updates():
    env = FrozenLakeEnv(rng=np.random.default_rng(12))
    s = frozenlake_control_run(env, AlgoParams(0.0, 0.0, 0.99, beta=1.0, eta=0.5), "retrace-lr", total_steps=1000,
                               N=100, policy_period=500, buffer_capacity=50, rng=np.random.default_rng(13))
    assert s.extra["skipped_updates"] == 10
