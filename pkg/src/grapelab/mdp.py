"""Finite MDPs, exact policy-evaluation operators and small metrics.

Tables are plain numpy arrays: a policy is an ``(n_states, n_actions)``
row-stochastic array, Q-like tables are ``(n_states, n_actions)`` and
V-like tables are ``(n_states,)``. Operators that involve infinite trace
sums are evaluated in closed form with a dense solve over the
``n_states * n_actions`` state-action space.

Terminal states are stored as zero-reward self-loops so every row of the
transition tensor is a distribution. The operators never bootstrap from a
terminal state, matching the ``(1 - d)`` masking used by the sample-based
estimators; ``Q^pi`` is unaffected because terminal values are zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

PROB_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class TraceChoice(str, enum.Enum):
    """Trace coefficient ``c0`` used by the off-policy correction."""

    RETRACE = "retrace"  # min(1, rho)
    IMPORTANCE = "importance"  # rho
    TREEBACKUP = "treebackup"  # pi(a|x)


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray  # P[x, a, y]
    reward: np.ndarray  # r[x, a]
    terminal: np.ndarray  # bool[x]
    gamma: float
    r_max: float | None = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        term = np.asarray(self.terminal, dtype=bool)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", term)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if term.shape != (S,):
            raise ValueError(f"terminal must have shape {(S,)}, got {term.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_TOL):
            raise ValueError("transition rows must be probability distributions")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward must be finite")
        if np.any(r[term] != 0.0):
            raise ValueError("terminal states must carry zero reward")
        for x in np.flatnonzero(term):
            if np.any(P[x, :, x] != 1.0):
                raise ValueError(f"terminal state {x} must be a self-loop")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if r_max <= 0.0:
            r_max = 1.0
        if np.any(np.abs(r) > r_max + PROB_TOL):
            raise ValueError("|r(x, a)| exceeds r_max")
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @cached_property
    def bootstrap(self) -> np.ndarray:
        """Transition tensor with every edge into or out of a terminal cut."""
        P = self.transition.copy()
        P[self.terminal] = 0.0
        P[:, :, self.terminal] = 0.0
        return P


@dataclass(frozen=True)
class AlgoParams:
    alpha: float = 0.0
    lam: float = 0.0
    gamma: float = 0.99
    eta: float | None = None
    beta: float | None = None
    sigma: float | None = None
    trace: TraceChoice = field(default=TraceChoice.RETRACE)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eta is not None and not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.beta is not None and not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.sigma is not None and not self.sigma >= 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        object.__setattr__(self, "trace", TraceChoice(self.trace))

    @property
    def delta(self) -> float:
        return contraction_modulus(self)


def contraction_modulus(params: AlgoParams) -> float:
    """Worst-case modulus ``gamma * (1 - lambda * (1 - gamma))`` of the GRAPE operator."""
    g = params.gamma
    return g * (1.0 - params.lam * (1.0 - g))


def check_policy(pi: np.ndarray, mdp: TabularMdp | None = None) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise ValueError(f"policy must be 2-D, got shape {pi.shape}")
    if mdp is not None and pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValueError("policy rows must be probability distributions")
    return pi


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def dirichlet_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    """Rows drawn from the flat Dirichlet distribution (all concentrations 1)."""
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def state_value(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``(pi Q)(x) = sum_b pi(b|x) Q(x, b)``."""
    return np.einsum("xa,xa->x", pi, q)


def advantage_of(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != np.shape(pi):
        raise ValueError(f"shape mismatch: {q.shape} vs {np.shape(pi)}")
    return q - state_value(q, pi)[:, None]


# -- dense matrices over the state-action space -----------------------------


def _next_action_matrix(mdp: TabularMdp, weights: np.ndarray) -> np.ndarray:
    """Matrix of ``Q -> sum_y P(y|x,a) sum_b w(y,b) Q(y,b)`` (bootstrap-cut)."""
    S, A = mdp.n_states, mdp.n_actions
    return np.einsum("xay,yb->xayb", mdp.bootstrap, weights).reshape(S * A, S * A)


def trace_weights(pi: np.ndarray, mu: np.ndarray, trace: TraceChoice | str = TraceChoice.RETRACE) -> np.ndarray:
    """``mu(b|y) * c0(y, b)`` for the chosen trace coefficient.

    The importance ratio is only needed where ``pi > 0``; a zero behaviour
    probability there makes it undefined for ``retrace`` and ``importance``.
    """
    trace = TraceChoice(trace)
    pi = np.asarray(pi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if trace is TraceChoice.TREEBACKUP:
        return mu * pi
    if np.any((mu <= 0.0) & (pi > 0.0)):
        raise ValueError("importance ratio undefined: mu(a|x) = 0 where pi(a|x) > 0")
    if trace is TraceChoice.RETRACE:
        return np.minimum(mu, pi)
    return pi.copy()


def policy_transition_matrix(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """``P^pi`` as an ``SA x SA`` matrix."""
    return _next_action_matrix(mdp, pi)


def trace_transition_matrix(mdp: TabularMdp, pi, mu, trace=TraceChoice.RETRACE) -> np.ndarray:
    """``P^{c0 mu}`` as an ``SA x SA`` matrix."""
    return _next_action_matrix(mdp, trace_weights(pi, mu, trace))


# -- operators ----------------------------------------------------------------


def _ppi_apply(mdp: TabularMdp, pi: np.ndarray, q: np.ndarray) -> np.ndarray:
    return mdp.bootstrap @ state_value(q, pi)


def bellman_apply(mdp: TabularMdp, pi: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``(T^pi Q)(x,a) = r(x,a) + gamma sum_y P(y|x,a) sum_b pi(b|y) Q(y,b)``."""
    return mdp.reward + mdp.gamma * _ppi_apply(mdp, pi, np.asarray(q, dtype=float))


def pcmu_apply(mdp: TabularMdp, pi, mu, trace, q) -> np.ndarray:
    """``(P^{c0 mu} Q)(x,a) = sum_y P(y|x,a) sum_b mu(b|y) c0(y,b) Q(y,b)``."""
    w = trace_weights(pi, mu, trace)
    return mdp.bootstrap @ np.einsum("xa,xa->x", w, np.asarray(q, dtype=float))


def _resolvent_solve(mdp, pi, mu, lam, trace, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(I - gamma lam P^{c0 mu}) z = rhs`` for a Q-shaped ``rhs``."""
    kappa = mdp.gamma * lam
    if not kappa < 1.0:
        raise ValueError("gamma * lambda must be < 1")
    n = mdp.n_states * mdp.n_actions
    if kappa == 0.0:
        # still validates the trace coefficient
        trace_weights(pi, mu, trace)
        return rhs.copy()
    M = np.eye(n) - kappa * trace_transition_matrix(mdp, pi, mu, trace)
    z = np.linalg.solve(M, rhs.reshape(n))
    return z.reshape(rhs.shape)


def retrace_apply(mdp, pi, mu, lam, q, trace=TraceChoice.RETRACE) -> np.ndarray:
    """``R Q = Q + (I - gamma lam P^{c mu})^{-1} (T^pi Q - Q)``."""
    q = np.asarray(q, dtype=float)
    return q + _resolvent_solve(mdp, pi, mu, lam, trace, bellman_apply(mdp, pi, q) - q)


def grape_operator_apply(mdp, pi, mu, lam, q, trace=TraceChoice.RETRACE) -> np.ndarray:
    """``G Q = T^pi Q + gamma lam (I - gamma lam P^{c mu})^{-1} P^pi (T^pi Q - Q)``."""
    q = np.asarray(q, dtype=float)
    tq = bellman_apply(mdp, pi, q)
    corr = _resolvent_solve(mdp, pi, mu, lam, trace, _ppi_apply(mdp, pi, tq - q))
    return tq + mdp.gamma * lam * corr


def h_operator_apply(mdp, pi, mu, lam, q, trace=TraceChoice.RETRACE) -> np.ndarray:
    """Linear part of G: ``H Q = gamma P^pi Q + gamma lam (I - gamma lam P^{c mu})^{-1} P^pi (gamma P^pi - I) Q``.

    ``G(Q1 + Q2) = G Q1 + H Q2``.
    """
    q = np.asarray(q, dtype=float)
    g = mdp.gamma
    pq = _ppi_apply(mdp, pi, q)
    inner = _ppi_apply(mdp, pi, g * pq - q)
    return g * pq + g * lam * _resolvent_solve(mdp, pi, mu, lam, trace, inner)


@dataclass(frozen=True)
class AffineOperator:
    """``Q -> matrix @ Q + offset`` on flattened state-action tables."""

    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return (self.matrix @ q.reshape(-1) + self.offset.reshape(-1)).reshape(q.shape)

    @property
    def linear(self) -> "AffineOperator":
        return AffineOperator(self.matrix, np.zeros_like(self.offset))


def operator_matrices(mdp, pi, mu, lam, trace=TraceChoice.RETRACE) -> dict[str, AffineOperator]:
    """Precompute Bellman, Retrace, GRAPE and H as affine maps for repeated use."""
    n = mdp.n_states * mdp.n_actions
    g = mdp.gamma
    eye = np.eye(n)
    ppi = policy_transition_matrix(mdp, pi)
    r = mdp.reward.reshape(n)
    kappa = g * lam
    if not kappa < 1.0:
        raise ValueError("gamma * lambda must be < 1")
    res = np.linalg.inv(eye - kappa * trace_transition_matrix(mdp, pi, mu, trace))
    t_lin = g * ppi
    h = t_lin + kappa * res @ ppi @ (t_lin - eye)
    shape = mdp.reward.shape
    return {
        "bellman": AffineOperator(t_lin, r.reshape(shape)),
        "retrace": AffineOperator(eye + res @ (t_lin - eye), (res @ r).reshape(shape)),
        "grape": AffineOperator(h, (r + kappa * res @ ppi @ r).reshape(shape)),
        "h": AffineOperator(h, np.zeros(shape)),
    }


# -- exact solutions and metrics ---------------------------------------------


def exact_q_value(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """``Q^pi`` from the linear system ``(I - gamma P^pi) Q = r``."""
    pi = check_policy(pi, mdp)
    n = mdp.n_states * mdp.n_actions
    A = np.eye(n) - mdp.gamma * policy_transition_matrix(mdp, pi)
    q = np.linalg.solve(A, mdp.reward.reshape(n)).reshape(mdp.reward.shape)
    resid = np.max(np.abs(q - bellman_apply(mdp, pi, q)))
    if not resid <= RESIDUAL_TOL * max(1.0, float(np.max(np.abs(q)))):
        raise RuntimeError(f"Q^pi solve failed: residual {resid:.3e}")
    return q


def exact_v_value(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    return state_value(exact_q_value(mdp, pi), pi)


def nrmse(a_true: np.ndarray, a_est: np.ndarray, e0: float) -> float:
    """Mean squared advantage error normalised by ``e0``.

    Deliberately a ratio of mean *squared* errors, no square root.
    """
    if not e0 > 0.0:
        raise ValueError(f"e0 must be positive, got {e0}")
    return float(np.mean((np.asarray(a_true) - np.asarray(a_est)) ** 2) / e0)


def policy_success_probability(mdp: TabularMdp, pi: np.ndarray, goal, start: int = 0) -> float:
    """Undiscounted probability of being absorbed in ``goal`` when starting at ``start``."""
    goal = np.atleast_1d(np.asarray(goal, dtype=int))
    if not np.all(mdp.terminal[goal]):
        raise ValueError("goal states must be terminal")
    if np.isin(start, goal):
        return 1.0
    if mdp.terminal[start]:
        return 0.0
    P = np.einsum("xa,xay->xy", pi, mdp.transition)
    live = ~mdp.terminal
    # states that reach the goal with positive probability
    reach = np.zeros(mdp.n_states, dtype=bool)
    reach[goal] = True
    while True:
        grow = live & ~reach & (P[:, reach].sum(axis=1) > 0.0)
        if not grow.any():
            break
        reach |= grow
    if not reach[start]:
        return 0.0
    idx = np.flatnonzero(live & reach)
    A = np.eye(idx.size) - P[np.ix_(idx, idx)]
    b = P[np.ix_(idx, goal)].sum(axis=1)
    h = np.linalg.solve(A, b)
    return float(np.clip(h[np.searchsorted(idx, start)], 0.0, 1.0))


def kl_max(pi: np.ndarray, pi_old: np.ndarray) -> float:
    """``max_x KL(pi(.|x) || pi_old(.|x))`` with ``0 log(0/q) = 0``."""
    pi = np.asarray(pi, dtype=float)
    pi_old = np.asarray(pi_old, dtype=float)
    support = pi > 0.0
    if np.any(support & (pi_old <= 0.0)):
        raise ValueError("KL divergence is infinite: pi not absolutely continuous w.r.t. pi_old")
    terms = np.zeros_like(pi)
    terms[support] = pi[support] * np.log(pi[support] / pi_old[support])
    return float(max(terms.sum(axis=1).max(), 0.0))


def reuse_bound_sides(mdp: TabularMdp, pi, pi_old, psi0) -> tuple[float, float]:
    """Both sides of the bound on ``||V^pi - pi Psi0||`` after a policy change."""
    psi0 = np.asarray(psi0, dtype=float)
    D = kl_max(pi, pi_old)
    lhs = np.max(np.abs(exact_v_value(mdp, pi) - state_value(psi0, pi)))
    root = math.sqrt(2.0 * D)
    rhs = (
        root * mdp.v_max / (1.0 - mdp.gamma)
        + root * np.max(np.abs(psi0))
        + np.max(np.abs(exact_v_value(mdp, pi_old) - state_value(psi0, pi_old)))
    )
    return float(lhs), float(rhs)


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float,
    r_max: float = 1.0,
    sparsity: float = 0.0,
) -> TabularMdp:
    """Dense random MDP without terminals; ``sparsity`` zeroes that fraction of edges."""
    P = rng.random((n_states, n_actions, n_states))
    if sparsity > 0.0:
        P *= rng.random(P.shape) >= sparsity
        empty = P.sum(axis=2) == 0.0
        P[empty, rng.integers(n_states)] = 1.0
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(-r_max, r_max, (n_states, n_actions))
    return TabularMdp(P, r, np.zeros(n_states, dtype=bool), gamma, r_max)


def two_state_mdp(gamma: float = 0.5) -> TabularMdp:
    """Two states with actions stay (0) and swap (1); reward 1 in state 0, 0 in state 1."""
    P = np.zeros((2, 2, 2))
    for x in range(2):
        P[x, 0, x] = 1.0
        P[x, 1, 1 - x] = 1.0
    r = np.array([[1.0, 1.0], [0.0, 0.0]])
    return TabularMdp(P, r, np.zeros(2, dtype=bool), gamma, r_max=1.0)
