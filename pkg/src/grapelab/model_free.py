"""Sample-based GRAPE and Retrace: target recursions, table updates and tabular runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dp_lab import IterationSeries
from .envs import FrozenLakeEnv, NChainEnv, ReplayBuffer, Transition, TransitionBatch, as_batch
from .mdp import (
    AlgoParams,
    advantage_of,
    exact_q_value,
    policy_success_probability,
    state_value,
    uniform_policy,
)

log = logging.getLogger(__name__)

ALGOS = ("grape", "retrace-lr")


def _prepare(traj, psi, pi):
    batch = as_batch(traj)
    psi = np.asarray(psi, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(batch.mu <= 0.0):
        raise ValueError("recorded behaviour probability mu_t must be positive")
    return batch, psi, pi, state_value(psi, pi)


def _backward(base, resid, c, live, kappa):
    """``out_t = base_t + kappa b_{t+1}``, ``b_t = resid_t + kappa c_t b_{t+1}``.

    Where ``d_t = 1`` the continuation ``b_{t+1}`` belongs to another episode
    and is dropped from both, but ``b_t`` keeps its own residual: zeroing it
    would lose the last correction of the episode and bias earlier targets.
    """
    if base.ndim == 1:
        out = []
        b = 0.0
        for bs, rs, ct, lv in zip(base[::-1].tolist(), resid[::-1].tolist(),
                                  c[::-1].tolist(), live[::-1].tolist()):
            if not lv:
                b = 0.0
            out.append(bs + kappa * b)
            b = rs + kappa * ct * b
        return np.array(out[::-1])
    out = np.empty_like(base)
    b = np.zeros(base.shape[1:])
    for t in range(base.shape[0] - 1, -1, -1):
        b = np.where(live[t], b, 0.0)
        out[t] = base[t] + kappa * b
        b = resid[t] + kappa * c[t] * b
    return out


def grape_targets(traj, psi: np.ndarray, pi: np.ndarray, params: AlgoParams) -> np.ndarray:
    """Backward recursion producing one GRAPE update target per transition.

    ``traj`` is a sequence of :class:`Transition` or a :class:`TransitionBatch`;
    2-D batches are processed column-wise as independent trajectories.
    """
    b, psi, pi, v = _prepare(traj, psi, pi)
    g, lam, alpha = params.gamma, params.lam, params.alpha
    live = ~b.d
    rho = pi[b.x, b.a] / b.mu
    c = np.minimum(1.0, rho)
    psi_xa = psi[b.x, b.a]
    t_hat = b.r + g * live * v[b.y]
    phi = psi_xa - v[b.x]
    base = t_hat + alpha * phi
    resid = rho * (t_hat - psi_xa + alpha * phi)
    return _backward(base, resid, c, live, g * lam)


def retrace_targets(traj, q: np.ndarray, pi: np.ndarray, params: AlgoParams) -> np.ndarray:
    """Retrace targets: ``T_t + gamma lam b_{t+1}`` with ``b_t = c_t (T_t - Q_t + gamma lam b_{t+1})``.

    The expected target from ``(x0, a0)`` is ``(R Q)(x0, a0)``.
    """
    b, q, pi, v = _prepare(traj, q, pi)
    g, lam = params.gamma, params.lam
    live = ~b.d
    c = np.minimum(1.0, pi[b.x, b.a] / b.mu)
    t_hat = b.r + g * live * v[b.y]
    td = t_hat - q[b.x, b.a]
    kappa = g * lam
    # b_t = c_t td_t + kappa c_t b_{t+1}: same recursion with residual c_t td_t
    return _backward(t_hat, c * td, c, live, kappa)


def table_update_from_targets(table: np.ndarray, traj, targets: np.ndarray,
                              eta: float | None = None) -> np.ndarray:
    """Average the targets per visited ``(x, a)``; unvisited entries keep their value."""
    b = as_batch(traj)
    table = np.asarray(table, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != b.x.shape:
        raise ValueError("targets are not aligned with the trajectory")
    n = table.size
    flat = (b.x * table.shape[1] + b.a).reshape(-1)
    counts = np.bincount(flat, minlength=n)
    sums = np.bincount(flat, weights=targets.reshape(-1), minlength=n)
    visited = counts > 0
    new = table.reshape(-1).copy()
    mean = sums[visited] / counts[visited]
    if eta is None:
        new[visited] = mean
    else:
        new[visited] = eta * mean + (1.0 - eta) * new[visited]
    return new.reshape(table.shape)


def trpo_softmax_update(pi_k: np.ndarray, adv: np.ndarray, beta: float) -> np.ndarray:
    """``pi_{k+1}(a|x) proportional to pi_k(a|x) exp(beta adv(x, a))``."""
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    pi_k = np.asarray(pi_k, dtype=float)
    with np.errstate(divide="ignore"):
        logits = np.log(pi_k) + beta * np.asarray(adv, dtype=float)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    z = w.sum(axis=1, keepdims=True)
    if np.any(z <= 0.0) or not np.all(np.isfinite(z)):
        raise FloatingPointError("policy row vanished during the softmax update")
    return w / z


class _Sampler:
    """Categorical draws from fixed rows via cumulative tables, with buffered uniforms."""

    def __init__(self, probs: np.ndarray, rng: np.random.Generator, chunk: int = 65536):
        self.set_probs(probs)
        self.rng = rng
        self.chunk = chunk
        self._u = rng.random(chunk)
        self._i = 0

    def set_probs(self, probs: np.ndarray) -> None:
        self.probs = probs
        cum = np.cumsum(probs, axis=1)
        cum[:, -1] = 1.0
        self._cum = cum.tolist()

    def __call__(self, x: int) -> int:
        if self._i == self.chunk:
            self._u = self.rng.random(self.chunk)
            self._i = 0
        u = self._u[self._i]
        self._i += 1
        row = self._cum[x]
        a = 0
        while u >= row[a]:
            a += 1
        return a


def _advantage_estimate(table: np.ndarray, pi: np.ndarray, algo: str, alpha: float) -> np.ndarray:
    adv = advantage_of(table, pi)
    return (1.0 - alpha) * adv if algo == "grape" else adv


def _update_table(algo: str, table, batch: TransitionBatch, pi, params: AlgoParams):
    if algo == "grape":
        return table_update_from_targets(table, batch, grape_targets(batch, table, pi, params))
    if algo == "retrace-lr":
        eta = 1.0 if params.eta is None else params.eta
        return table_update_from_targets(table, batch, retrace_targets(batch, table, pi, params), eta)
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")


def nchain_eval_run(env: NChainEnv, pi: np.ndarray, mu: np.ndarray, params: AlgoParams,
                    algo: str = "grape", blocks: int = 800, block_size: int = 250,
                    rng: np.random.Generator | None = None) -> IterationSeries:
    """Block-wise policy evaluation on NChain; returns ``error_k / error_0`` for ``k = 0..blocks``.

    For GRAPE the advantage estimate is ``(1 - alpha) Phi_k``; for Retrace
    with a learning rate it is ``Q_k - pi Q_k``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    adv_true = advantage_of(exact_q_value(env.model(params.gamma), pi), pi)
    table = np.zeros_like(adv_true)
    act = _Sampler(mu, rng)
    mu_list = mu.tolist()
    errors = np.empty(blocks + 1)
    for k in range(blocks + 1):
        errors[k] = np.sum((adv_true - _advantage_estimate(table, pi, algo, params.alpha)) ** 2)
        if k == blocks:
            break
        block = []
        x = env.reset()
        for _ in range(block_size):
            a = act(x)
            y, r, d = env.step(a)
            block.append((x, a, r, y, mu_list[x][a], d))
            x = env.reset() if d else y
        table = _update_table(algo, table, TransitionBatch.from_transitions(block), pi, params)
    if errors[0] <= 0.0:
        raise ValueError("true advantage is identically zero; error ratio undefined")
    return IterationSeries(errors / errors[0], "error_ratio", params=params)


@dataclass
class ControlState:
    table: np.ndarray
    policy: np.ndarray
    params: AlgoParams
    steps: int = 0
    value_updates: int = 0
    policy_updates: int = 0
    skipped_updates: int = 0


def frozenlake_control_run(env: FrozenLakeEnv, params: AlgoParams, algo: str = "grape",
                           total_steps: int = 5_000_000, N: int = 250,
                           policy_period: int = 100_000, buffer_capacity: int = 500_000,
                           rng: np.random.Generator | None = None) -> IterationSeries:
    """Actor-critic style control loop; records goal-reaching probability after each policy update."""
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
    if params.beta is None:
        raise ValueError("control runs need beta")
    if total_steps < policy_period:
        raise ValueError("total_steps must be at least policy_period")
    rng = rng if rng is not None else np.random.default_rng()
    model = env.model(params.gamma)
    goal = env.goal
    state = ControlState(np.zeros((model.n_states, model.n_actions)),
                         uniform_policy(model.n_states, model.n_actions), params)
    buf = ReplayBuffer(buffer_capacity)
    act = _Sampler(state.policy, rng)
    pol = state.policy.tolist()
    probs = [policy_success_probability(model, state.policy, goal, env.start_state)]
    x = env.reset()
    for t in range(total_steps):
        a = act(x)
        y, r, d = env.step(a)
        buf.append(Transition(x, a, r, y, pol[x][a], d))
        state.steps += 1
        if (t + 1) % N == 0:
            if len(buf) < N:
                state.skipped_updates += 1
            else:
                batch = buf.contiguous(N, rng)
                state.table = _update_table(algo, state.table, batch, state.policy, params)
                state.value_updates += 1
        if (t + 1) % policy_period == 0:
            adv = _advantage_estimate(state.table, state.policy, algo, params.alpha)
            state.policy = trpo_softmax_update(state.policy, adv, params.beta)
            state.policy_updates += 1
            act.set_probs(state.policy)
            pol = state.policy.tolist()
            probs.append(policy_success_probability(model, state.policy, goal, env.start_state))
        x = env.reset() if d else y
    if state.skipped_updates:
        log.info("skipped %d value updates for lack of data", state.skipped_updates)
    steps = np.arange(len(probs)) * policy_period
    return IterationSeries(np.array(probs), "success_probability", params=params, steps=steps,
                           extra={"skipped_updates": state.skipped_updates})
