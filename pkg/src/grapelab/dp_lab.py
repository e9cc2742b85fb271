"""Exact dynamic-programming experiments with injected noise, and bound verifiers.

Weights follow one convention throughout: ``A_K = sum_{k<K} alpha^k`` so
``A_0 = 0`` and ``A_1 = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import (
    AlgoParams,
    TabularMdp,
    advantage_of,
    contraction_modulus,
    dirichlet_policy,
    exact_q_value,
    nrmse,
    operator_matrices,
    state_value,
)

DP_ALGOS = ("retrace", "retrace-lr", "grape")


@dataclass
class IterationSeries:
    """Per-iteration scalar metric of one run."""

    values: np.ndarray
    metric: str
    trial: int = 0
    params: AlgoParams | None = None
    steps: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.steps is None:
            self.steps = np.arange(self.values.size)
        self.steps = np.asarray(self.steps)
        if self.steps.shape != self.values.shape:
            raise ValueError("steps and values differ in length")
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("iteration indices must be strictly increasing")


class NoiseLedger:
    """Injected error tables ``eps_k`` and their alpha-discounted sums ``E_k``."""

    def __init__(self, alpha: float):
        self.alpha = alpha
        self.eps: list[np.ndarray] = []
        self.accumulated: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.eps)

    def append(self, eps: np.ndarray) -> None:
        eps = np.asarray(eps, dtype=float)
        prev = self.accumulated[-1] if self.accumulated else np.zeros_like(eps)
        self.eps.append(eps)
        self.accumulated.append(eps + self.alpha * prev)

    @classmethod
    def gaussian(cls, alpha: float, sigma: float, K: int, shape, rng: np.random.Generator) -> "NoiseLedger":
        ledger = cls(alpha)
        for _ in range(K):
            ledger.append(rng.normal(0.0, sigma, shape))
        return ledger

    @classmethod
    def constant(cls, alpha: float, value: float, K: int, shape) -> "NoiseLedger":
        ledger = cls(alpha)
        for _ in range(K):
            ledger.append(np.full(shape, value))
        return ledger


def geometric_weight(alpha: float, K: int) -> float:
    """``A_K = sum_{k=0}^{K-1} alpha^k``."""
    if alpha == 1.0:
        return float(K)
    return (1.0 - alpha**K) / (1.0 - alpha)


def mixed_rate(alpha: float, delta: float, K: int) -> float:
    """``Gamma_K = (alpha^K - delta^K) / (alpha - delta)``, with the limit ``K alpha^(K-1)`` at ``alpha = delta``."""
    if alpha == delta:
        return K * alpha ** (K - 1)
    if min(alpha, delta) == 0.0:
        return max(alpha, delta) ** (K - 1)
    if abs(alpha - delta) < 1e-4 * max(alpha, delta):
        # the closed form cancels badly here; the convolution sum does not
        return float(sum(alpha**j * delta ** (K - 1 - j) for j in range(K)))
    return (alpha**K - delta**K) / (alpha - delta)


# -- learning-rate baseline ---------------------------------------------------


def lr_update(q: np.ndarray, target: np.ndarray, eta: float) -> np.ndarray:
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    return eta * np.asarray(target) + (1.0 - eta) * np.asarray(q)


def lr_bound_check(mdp: TabularMdp, pi: np.ndarray, eta: float, K: int) -> tuple[float, float]:
    """``||Q^pi - Q_K||`` for phased TD(0) with a learning rate from ``Q_0 = 0``, and its bound."""
    T = operator_matrices(mdp, pi, pi, 0.0)["bellman"]
    q = np.zeros_like(mdp.reward)
    for _ in range(K):
        q = lr_update(q, T(q), eta)
    measured = float(np.max(np.abs(exact_q_value(mdp, pi) - q)))
    bound = (1.0 - eta * (1.0 - mdp.gamma)) ** K * mdp.v_max
    return measured, bound


# -- noisy DP experiment --------------------------------------------------------


def dp_noise_trial(mdp: TabularMdp, params: AlgoParams, iters: int, rng: np.random.Generator,
                   algo: str = "retrace") -> np.ndarray:
    """One trial of noisy exact updates; returns NRMSE for iterations ``0..iters``.

    ``retrace``: ``Q <- R Q + eps``. ``retrace-lr``: ``Q <- eta (R Q + eps) + (1 - eta) Q``.
    ``grape``: ``Psi <- G Psi + alpha Phi + eps`` (first step without the gap term),
    scored on ``Phi_k / A_k`` (``Phi_0`` at ``k = 0``).
    """
    if algo not in DP_ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; expected one of {DP_ALGOS}")
    S, A = mdp.n_states, mdp.n_actions
    pi = dirichlet_policy(rng, S, A)
    mu = dirichlet_policy(rng, S, A)
    table = rng.normal(0.0, 1.0, (S, A))
    sigma = params.sigma or 0.0
    ops = operator_matrices(mdp, pi, mu, params.lam, params.trace)
    adv_true = advantage_of(exact_q_value(mdp, pi), pi)
    e0 = float(np.mean((adv_true - advantage_of(table, pi)) ** 2))
    out = np.empty(iters + 1)
    out[0] = 1.0
    if algo == "grape":
        G = ops["grape"]
        for k in range(iters):
            eps = rng.normal(0.0, sigma, (S, A))
            gap = params.alpha * advantage_of(table, pi) if k > 0 else 0.0
            table = G(table) + gap + eps
            out[k + 1] = nrmse(adv_true, advantage_of(table, pi) / geometric_weight(params.alpha, k + 1), e0)
        return out
    R = ops["retrace"]
    eta = 1.0 if algo == "retrace" or params.eta is None else params.eta
    for k in range(iters):
        eps = rng.normal(0.0, sigma, (S, A))
        table = lr_update(table, R(table) + eps, eta)
        out[k + 1] = nrmse(adv_true, advantage_of(table, pi), e0)
    return out


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Independent stream for ``trial``; other trials' streams do not depend on the trial count."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(trial,)))


def retrace_noise_experiment(mdp: TabularMdp, params: AlgoParams, iters: int, trials: int,
                             seed: int, algo: str = "retrace") -> list[IterationSeries]:
    """Repeat :func:`dp_noise_trial` over independently seeded trials."""
    return [
        IterationSeries(dp_noise_trial(mdp, params, iters, trial_rng(seed, i), algo), "nrmse",
                        trial=i, params=params)
        for i in range(trials)
    ]


# -- exact GRAPE ------------------------------------------------------------------


@dataclass
class GrapeRun:
    errors: np.ndarray  # ||A^pi - Phi_k / A_k|| for k = 1..K
    psi: np.ndarray
    phi: np.ndarray
    ledger: NoiseLedger
    psi_history: list[np.ndarray]


def grape_exact_iterate(mdp: TabularMdp, pi, mu, params: AlgoParams, K: int, psi0,
                        noise: NoiseLedger | Sequence[np.ndarray] | None = None,
                        keep_history: bool = False) -> GrapeRun:
    """``Psi_1 = G Psi_0 + eps_0``, then ``Psi_{k+1} = G Psi_k + alpha Phi_k + eps_k``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    G = operator_matrices(mdp, pi, mu, params.lam, params.trace)["grape"]
    adv_true = advantage_of(exact_q_value(mdp, pi), pi)
    eps_seq = noise.eps if isinstance(noise, NoiseLedger) else noise
    if eps_seq is not None and len(eps_seq) < K:
        raise ValueError(f"noise holds {len(eps_seq)} tables, need {K}")
    ledger = NoiseLedger(params.alpha)
    psi = np.asarray(psi0, dtype=float).copy()
    history = [psi] if keep_history else []
    errors = np.empty(K)
    for k in range(K):
        eps = np.zeros_like(psi) if eps_seq is None else np.asarray(eps_seq[k], dtype=float)
        ledger.append(eps)
        gap = params.alpha * advantage_of(psi, pi) if k > 0 else 0.0
        psi = G(psi) + gap + eps
        if keep_history:
            history.append(psi)
        phi = advantage_of(psi, pi)
        errors[k] = np.max(np.abs(adv_true - phi / geometric_weight(params.alpha, k + 1)))
    return GrapeRun(errors, psi, advantage_of(psi, pi), ledger, history)


def error_decay_coefficient(alpha: float, delta: float, K: int, k: int) -> float:
    """``A_K^{-1} sum_{l=0}^{K-k-1} alpha^{K-k-l-1} delta^l``: weight of the error made at iteration ``k``."""
    if not 0 <= k < K:
        raise ValueError(f"need 0 <= k < K, got k={k}, K={K}")
    n = K - k
    total = sum(alpha ** (n - l - 1) * delta**l for l in range(n))
    return total / geometric_weight(alpha, K)


def variance_ratio(alpha: float, k: int) -> float:
    """Variance of the weighted error average after ``k + 1`` unit-variance i.i.d. errors.

    ``sum_{l<=k} alpha^(2l) / (sum_{l<=k} alpha^l)^2``; tends to
    ``(1 - alpha) / (1 + alpha)`` for ``alpha < 1``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    num = (k + 1.0) if alpha == 1.0 else (1.0 - alpha ** (2 * (k + 1))) / (1.0 - alpha**2)
    return num / geometric_weight(alpha, k + 1) ** 2


def variance_ratio_limit(alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError("limit exists for alpha in [0, 1)")
    return (1.0 - alpha) / (1.0 + alpha)


def theorem2_bound_sides(mdp: TabularMdp, pi, mu, params: AlgoParams, K: int,
                         ledger: NoiseLedger, psi0) -> tuple[float, float]:
    """Measured ``||A^pi - Phi_K / A_K||`` against the error-propagation bound."""
    run = grape_exact_iterate(mdp, pi, mu, params, K, psi0, noise=ledger)
    lhs = float(run.errors[-1])
    alpha = params.alpha
    delta = contraction_modulus(params)
    A_K = geometric_weight(alpha, K)
    v_pi = state_value(exact_q_value(mdp, pi), pi)
    init = np.max(np.abs(v_pi - state_value(np.asarray(psi0, dtype=float), pi)))
    noise = sum(delta ** (K - k - 1) * np.max(np.abs(ledger.accumulated[k])) for k in range(K))
    rhs = 2.0 * delta * mixed_rate(alpha, delta, K) / A_K * init + 2.0 * noise / A_K
    return lhs, float(rhs)


def lemma2_identity_check(mdp: TabularMdp, pi, mu, params: AlgoParams, K: int,
                          ledger: NoiseLedger, psi0) -> float:
    """Max-abs residual of ``Psi_K = A_K q_K - alpha A_{K-1} pi q_{K-1}``.

    ``A_K q_K`` is rebuilt from its definition with explicit powers of G
    applied to ``Psi_0`` and of H applied to each ``E_k``.
    """
    ops = operator_matrices(mdp, pi, mu, params.lam, params.trace)
    G, H = ops["grape"], ops["h"]
    run = grape_exact_iterate(mdp, pi, mu, params, K, psi0, noise=ledger)
    alpha = params.alpha
    psi0 = np.asarray(psi0, dtype=float)

    g_pow = [psi0]
    for _ in range(K):
        g_pow.append(G(g_pow[-1]))

    def weighted_q(n: int) -> np.ndarray:
        """``A_n q_n``."""
        acc = np.zeros_like(psi0)
        for k in range(1, n + 1):
            acc += alpha ** (n - k) * g_pow[k]
        for k in range(n):
            term = run.ledger.accumulated[k]
            for _ in range(n - k - 1):
                term = H(term)
            acc += term
        return acc

    rebuilt = weighted_q(K) - alpha * state_value(weighted_q(K - 1), pi)[:, None]
    return float(np.max(np.abs(run.psi - rebuilt)))


def constant_error_asymptote(mdp: TabularMdp, pi, mu, params: AlgoParams, epsilon: float,
                             K: int, psi0=None) -> float:
    """``||A^pi - Phi_K / A_K||`` when every update carries the constant error table ``epsilon``."""
    shape = mdp.reward.shape
    psi0 = np.zeros(shape) if psi0 is None else psi0
    ledger = NoiseLedger.constant(params.alpha, epsilon, K, shape)
    return float(grape_exact_iterate(mdp, pi, mu, params, K, psi0, noise=ledger).errors[-1])


def simulate_variance_ratio(alpha: float, k: int, samples: int, rng: np.random.Generator) -> float:
    """Empirical variance of ``E_k / A_{k+1}`` under i.i.d. standard normal errors."""
    acc = np.zeros(samples)
    for _ in range(k + 1):
        acc = rng.standard_normal(samples) + alpha * acc
    return float(np.var(acc / geometric_weight(alpha, k + 1), ddof=1))
