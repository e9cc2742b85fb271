"""Aggregation of result rows across trials and beta selection."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .harness import ResultRow

DEFAULT_GROUP = ("experiment", "env", "alpha", "lam", "eta", "beta", "sigma", "N", "metric")


class SummaryRow(NamedTuple):
    group: tuple
    step: int
    n: int
    mean: float
    stderr: float
    median: float
    p025: float
    p975: float


def aggregate(rows: Iterable[ResultRow], group_keys: Sequence[str] = DEFAULT_GROUP) -> list[SummaryRow]:
    """Mean, standard error, median and 95% band per (group, step) over trials."""
    buckets: dict[tuple, list[float]] = defaultdict(list)
    for row in rows:
        key = tuple(getattr(row, k) for k in group_keys)
        buckets[key, row.step].append(row.value)
    if not buckets:
        raise ValueError("cannot aggregate an empty group")
    out = []
    for (key, step), vals in buckets.items():
        v = np.asarray(vals, dtype=float)
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        lo, med, hi = np.percentile(v, [2.5, 50.0, 97.5])
        out.append(SummaryRow(key, step, v.size, float(v.mean()), se, float(med), float(lo), float(hi)))
    return out


def select_best_beta(rows: Iterable[ResultRow], beta_grid: Sequence[float] | None = None,
                     tail: float = 0.2) -> dict[tuple, float]:
    """Best beta per ``(alpha, eta, lambda, N)`` by mean metric over the final ``tail`` of policy updates.

    Ties go to the larger final mean, then to the smaller beta.
    """
    series: dict[tuple, dict[float, dict[int, list[float]]]] = defaultdict(
        lambda: defaultdict(lambda: defaultdict(list)))
    for row in rows:
        if row.beta is None:
            raise ValueError("row without beta")
        series[row.alpha, row.eta, row.lam, row.N][row.beta][row.step].append(row.value)
    best = {}
    for key, per_beta in series.items():
        if beta_grid is not None:
            missing = sorted(set(beta_grid) - set(per_beta))
            if missing:
                raise ValueError(f"beta grid incomplete for {key}: missing {missing}")
        scored = []
        for beta, by_step in per_beta.items():
            steps = sorted(by_step)
            n_updates = len(steps) - 1
            n_tail = max(1, math.ceil(tail * n_updates))
            tail_vals = [v for s in steps[-n_tail:] for v in by_step[s]]
            final = float(np.mean(by_step[steps[-1]]))
            scored.append((float(np.mean(tail_vals)), final, -beta, beta))
        best[key] = max(scored)[3]
    return best
