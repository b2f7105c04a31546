"""Effective sample capacity and the inverse-capacity weight table.

The capacity of n overlapping annotations is the geometric partial sum
(1 - beta^n) / (1 - beta) = sum_{k=0}^{n-1} beta^k, which grows from 1
(beta = 0, full redundancy discount) toward n (beta -> 1, no discount).
Its inverse is the per-landmark balancing weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Values this close to 1 are routed to the analytic limit to avoid
# catastrophic cancellation in (1 - beta^n) / (1 - beta).
_BETA_LIMIT_EPS = 1e-9


def _check_beta(beta):
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")


def capacity_limit(n):
    """beta -> 1 limit of the effective capacity: exactly n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return float(n)


def effective_capacity(beta, n):
    """Effective sample capacity after the n-th draw, (1 - beta^n)/(1 - beta)."""
    _check_beta(beta)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if beta >= 1.0 - _BETA_LIMIT_EPS:
        return capacity_limit(n)
    if beta == 0.0:
        return 1.0
    # Horner evaluation of sum_{k=0}^{n-1} beta^k; unlike the closed form
    # (1 - beta^n)/(1 - beta) it satisfies E_n = 1 + beta * E_{n-1} exactly
    value = 1.0
    for _ in range(int(n) - 1):
        value = 1.0 + beta * value
    return value


@dataclass(frozen=True)
class WeightTable:
    """Per-unified-landmark capacities and their inverse weights."""

    beta: float
    capacity: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.capacity.setflags(write=False)
        self.weight.setflags(write=False)


def build_weight_table(table, beta):
    """Weight table for a protocol: weight[p] = 1 / capacity(beta, count(p))."""
    _check_beta(beta)
    capacity = np.array(
        [effective_capacity(beta, table.count(p)) for p in range(table.num_unified)],
        dtype=np.float64,
    )
    return WeightTable(beta=beta, capacity=capacity, weight=1.0 / capacity)
