"""Numerical property checks grouped into suites for the ``verify`` subcommand.

Each check takes its sample sizes as arguments so the same code serves the
quick CLI suites and the full-size acceptance tests.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import dp_lab
from .envs import RIGHT, nchain_mdp, sample_trajectories
from .mdp import (
    AlgoParams,
    TabularMdp,
    advantage_of,
    contraction_modulus,
    dirichlet_policy,
    exact_q_value,
    operator_matrices,
    random_mdp,
    reuse_bound_sides,
    state_value,
    two_state_mdp,
)
from .model_free import grape_targets, retrace_targets


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _norm(x) -> float:
    return float(np.max(np.abs(x)))


def random_instance(rng: np.random.Generator, max_states: int = 6, max_actions: int = 4,
                    gamma: float | None = None):
    """Random MDP with Dirichlet target/behaviour policies and a Gaussian table."""
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    g = float(rng.uniform(0.5, 0.99)) if gamma is None else gamma
    mdp = random_mdp(rng, S, A, g)
    pi = dirichlet_policy(rng, S, A)
    mu = dirichlet_policy(rng, S, A)
    q = rng.normal(0.0, mdp.v_max, (S, A))
    return mdp, pi, mu, q


# -- operators ----------------------------------------------------------------------


def check_operator_contractions(n: int, rng: np.random.Generator, tol: float = 1e-9) -> dict[str, float]:
    """Largest ``lhs - rhs`` over ``n`` random instances for GRAPE, Retrace and H."""
    worst = {"grape": -np.inf, "retrace": -np.inf, "h": -np.inf}
    for i in range(n):
        mdp, pi, mu, q = random_instance(rng)
        lam = (0.0, 0.5, 1.0)[i % 3]
        ops = operator_matrices(mdp, pi, mu, lam)
        q_pi = exact_q_value(mdp, pi)
        delta = contraction_modulus(AlgoParams(lam=lam, gamma=mdp.gamma))
        dist = _norm(q_pi - q)
        worst["grape"] = max(worst["grape"], _norm(q_pi - ops["grape"](q)) - delta * dist - tol)
        worst["retrace"] = max(worst["retrace"], _norm(q_pi - ops["retrace"](q)) - mdp.gamma * dist - tol)
        worst["h"] = max(worst["h"], _norm(ops["h"](q)) - delta * _norm(q) - tol)
    return worst


# -- iteration theorems ------------------------------------------------------------------


def _stopping_k(alpha: float, delta: float, target: float = 1e-8) -> int:
    rate = max(alpha, delta)
    if rate == 0.0:
        return 1
    return int(np.ceil(np.log(target) / np.log(rate)))


def fixed_point_errors(mdp: TabularMdp, pi, mu, params: AlgoParams, psi0=None) -> tuple[float, float, int]:
    """Normalised errors of ``Phi_K / A_K`` and ``Psi_K / A_K`` at the stopping index ``K``."""
    K = _stopping_k(params.alpha, params.delta)
    psi0 = np.zeros_like(mdp.reward) if psi0 is None else psi0
    run = dp_lab.grape_exact_iterate(mdp, pi, mu, params, K, psi0)
    q_pi = exact_q_value(mdp, pi)
    adv, v = advantage_of(q_pi, pi), state_value(q_pi, pi)
    a_k = dp_lab.geometric_weight(params.alpha, K)
    err_phi = _norm(run.phi / a_k - adv) / mdp.v_max
    err_psi = _norm(run.psi / a_k - (adv + (1.0 - params.alpha) * v[:, None])) / mdp.v_max
    return err_phi, err_psi, K


def check_fixed_points(n_random: int, rng: np.random.Generator, alphas=(0.0, 0.5, 0.9)) -> float:
    """Worst normalised fixed-point error over TwoState and ``n_random`` random MDPs."""
    worst = 0.0
    instances = [(two_state_mdp(), np.full((2, 2), 0.5), np.array([[0.9, 0.1], [0.9, 0.1]]))]
    for _ in range(n_random):
        mdp, pi, mu, _ = random_instance(rng, gamma=0.9)
        instances.append((mdp, pi, mu))
    for i, (mdp, pi, mu) in enumerate(instances):
        lam = (0.0, 0.5, 1.0)[i % 3]
        for alpha in alphas:
            e1, e2, _ = fixed_point_errors(mdp, pi, mu, AlgoParams(alpha, lam, mdp.gamma))
            worst = max(worst, e1, e2)
    return worst


def check_alpha_one_decay(mdp: TabularMdp, pi, mu, lam: float = 0.5) -> tuple[float, float]:
    """Errors at ``K = 1000`` and ``K = 2000`` for ``alpha = 1`` from a zero start."""
    run = dp_lab.grape_exact_iterate(mdp, pi, mu, AlgoParams(1.0, lam, mdp.gamma), 2000, np.zeros_like(mdp.reward))
    return float(run.errors[999]), float(run.errors[1999])


def check_weighted_sum_identity(n: int, rng: np.random.Generator, K: int = 12) -> float:
    worst = 0.0
    for i in range(n):
        mdp, pi, mu, psi0 = random_instance(rng)
        params = AlgoParams(float(rng.choice([0.0, 0.5, 0.9, 1.0])), (0.0, 0.5, 1.0)[i % 3], mdp.gamma)
        ledger = dp_lab.NoiseLedger.gaussian(params.alpha, 0.4, K, psi0.shape, rng)
        worst = max(worst, dp_lab.lemma2_identity_check(mdp, pi, mu, params, K, ledger, psi0))
    return worst


def check_noisy_error_bound(n: int, rng: np.random.Generator, sigma: float = 0.4, K: int = 30) -> int:
    """Number of violations of the noisy-iteration bound."""
    violations = 0
    for i in range(n):
        mdp, pi, mu, psi0 = random_instance(rng)
        params = AlgoParams(float(rng.choice([0.0, 0.5, 0.9, 0.99])), (0.0, 0.5, 1.0)[i % 3], mdp.gamma)
        ledger = dp_lab.NoiseLedger.gaussian(params.alpha, sigma, K, psi0.shape, rng)
        lhs, rhs = dp_lab.theorem2_bound_sides(mdp, pi, mu, params, K, ledger, psi0)
        violations += lhs > rhs
    return violations


def one_state_mdp(n_actions: int, gamma: float, r: float = 1.0) -> TabularMdp:
    """Single state, every action loops with reward ``r``: the policy kernel is the identity."""
    return TabularMdp(np.ones((1, n_actions, 1)), np.full((1, n_actions), r), np.zeros(1, dtype=bool), gamma, r)


def check_lr_bound(n_random: int, rng: np.random.Generator, K: int = 50) -> tuple[float, int]:
    """Max ``|measured - bound| / V_max`` on the one-state MDP, and violation count on random MDPs."""
    gap = 0.0
    for eta in (0.1, 0.5, 1.0):
        for gamma in (0.5, 0.9, 0.99):
            m = one_state_mdp(3, gamma)
            measured, bound = dp_lab.lr_bound_check(m, np.full((1, 3), 1 / 3), eta, K)
            gap = max(gap, abs(measured - bound) / m.v_max)
    violations = 0
    for _ in range(n_random):
        mdp, pi, _, _ = random_instance(rng)
        measured, bound = dp_lab.lr_bound_check(mdp, pi, float(rng.uniform(0.05, 1.0)), K)
        violations += measured > bound * (1.0 + 1e-12)
    return gap, violations


def check_reuse_bound(n: int, rng: np.random.Generator) -> int:
    violations = 0
    for _ in range(n):
        mdp, pi, _, psi0 = random_instance(rng)
        pi_old = dirichlet_policy(rng, mdp.n_states, mdp.n_actions)
        lhs, rhs = reuse_bound_sides(mdp, pi, pi_old, psi0)
        violations += lhs > rhs
    return violations


def check_constant_error(n: int, rng: np.random.Generator, K: int = 5000, eps: float = 0.1) -> float:
    """Largest ``error - 2 eps / (1 - delta)`` with a fixed random-sign error table."""
    worst = -np.inf
    for i in range(n):
        mdp, pi, mu, _ = random_instance(rng, gamma=0.9)
        table = eps * rng.choice([-1.0, 1.0], mdp.reward.shape)
        for alpha in (0.0, 1.0):
            params = AlgoParams(alpha, (0.0, 0.5, 1.0)[i % 3], mdp.gamma)
            err = dp_lab.constant_error_asymptote(mdp, pi, mu, params, table, K)
            worst = max(worst, err - 2.0 * eps / (1.0 - params.delta))
    return worst


def check_error_decay_shape(delta: float = 0.5, K: int = 50) -> bool:
    c = dp_lab.error_decay_coefficient
    return c(0.99, delta, K, 0) > c(0.0, delta, K, 0) and c(0.99, delta, K, K - 1) < c(0.0, delta, K, K - 1)


def check_variance_limit(rng: np.random.Generator, alpha: float = 0.99, k: int = 2000,
                         samples: int = 100_000) -> tuple[float, float, float]:
    """Analytic limit, formula at ``k`` and Monte-Carlo estimate at ``k``."""
    return (dp_lab.variance_ratio_limit(alpha), dp_lab.variance_ratio(alpha, k),
            dp_lab.simulate_variance_ratio(alpha, k, samples, rng))


# -- estimators ----------------------------------------------------------------------------


def estimator_zscores(rng: np.random.Generator, n_traj: int, alphas=(0.0, 0.5, 0.99), lams=(0.0, 0.8),
                      slip: float = 0.2, horizon: int = 200, start=(10, RIGHT)) -> list[tuple[str, float, float, float]]:
    """``(algo, alpha, lambda, z)``: Monte-Carlo target mean against the exact operator value."""
    mdp = nchain_mdp(slip)
    S, A = mdp.n_states, mdp.n_actions
    pi = dirichlet_policy(rng, S, A)
    mu = dirichlet_policy(rng, S, A)
    psi = rng.normal(0.0, 1.0, (S, A))
    entry = np.zeros(S)
    entry[S - 1] = 1.0
    batch = sample_trajectories(mdp, mu, *start, horizon, n_traj, rng, entry_reward=entry)
    phi = advantage_of(psi, pi)
    out = []
    for lam in lams:
        ops = operator_matrices(mdp, pi, mu, lam)
        for alpha in alphas:
            params = AlgoParams(alpha, lam, mdp.gamma)
            g0 = grape_targets(batch, psi, pi, params)[0]
            exact = (ops["grape"](psi) + alpha * phi)[start]
            out.append(("grape", alpha, lam, abs(g0.mean() - exact) / (g0.std(ddof=1) / np.sqrt(n_traj))))
        r0 = retrace_targets(batch, psi, pi, AlgoParams(0.0, lam, mdp.gamma))[0]
        exact = ops["retrace"](psi)[start]
        out.append(("retrace", 0.0, lam, abs(r0.mean() - exact) / (r0.std(ddof=1) / np.sqrt(n_traj))))
    return out


# -- suites ----------------------------------------------------------------------------------


def _lemmas(rng) -> list[CheckResult]:
    w = check_operator_contractions(60, rng)
    out = [CheckResult(f"{k} contraction", v <= 0.0, f"worst slack {v:.3e}") for k, v in w.items()]
    r = check_weighted_sum_identity(10, rng)
    out.append(CheckResult("weighted-sum identity", r <= 1e-8, f"residual {r:.3e}"))
    out.append(CheckResult("error-decay shape", check_error_decay_shape(), "delta=0.5, K=50"))
    return out


def _theorems(rng) -> list[CheckResult]:
    fp = check_fixed_points(5, rng)
    m, pi, mu = two_state_mdp(), np.full((2, 2), 0.5), np.array([[0.9, 0.1], [0.9, 0.1]])
    e1, e2 = check_alpha_one_decay(m, pi, mu)
    v = check_noisy_error_bound(30, rng)
    gap, lr_v = check_lr_bound(20, rng)
    reuse_v = check_reuse_bound(30, rng)
    ce = check_constant_error(3, rng, K=2000)
    lim, _, emp = check_variance_limit(rng, samples=20_000)
    return [
        CheckResult("fixed points", fp <= 1e-6, f"worst error {fp:.3e} V_max"),
        CheckResult("alpha=1 decay", e2 <= e1, f"K=1000 {e1:.3e}, K=2000 {e2:.3e}"),
        CheckResult("noisy iteration bound", v == 0, f"{v} violations"),
        CheckResult("learning-rate bound", gap <= 1e-12 and lr_v == 0, f"relative equality gap {gap:.1e}, {lr_v} violations"),
        CheckResult("policy reuse bound", reuse_v == 0, f"{reuse_v} violations"),
        CheckResult("constant-error asymptote", ce <= 1e-6, f"worst slack {ce:.3e}"),
        CheckResult("variance limit", abs(emp / lim - 1.0) < 0.1, f"limit {lim:.7f}, empirical {emp:.7f}"),
    ]


def _estimators(rng) -> list[CheckResult]:
    zs = estimator_zscores(rng, 20_000, alphas=(0.0, 0.99), lams=(0.0, 0.8))
    return [CheckResult(f"{a} unbiased alpha={al} lambda={l}", bool(z < 3.0), f"z={z:.2f}") for a, al, l, z in zs]


SUITES: dict[str, Callable[[np.random.Generator], list[CheckResult]]] = {
    "lemmas": _lemmas,
    "theorems": _theorems,
    "estimators": _estimators,
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {tuple(SUITES)}")
    return SUITES[name](np.random.default_rng(seed))
