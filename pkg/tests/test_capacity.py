import numpy as np
import pytest

from unifl.capacity import build_weight_table, capacity_limit, effective_capacity
from unifl.protocol import load_default_protocol


def brute_force_capacity(beta, n):
    return sum(beta ** k for k in range(n))


def test_first_sample_is_unit():
    for beta in [0.0, 0.3, 0.9, 0.999]:
        assert effective_capacity(beta, 1) == 1.0


def test_beta_zero_is_always_one():
    for n in range(1, 9):
        assert effective_capacity(0.0, n) == 1.0


def test_known_value():
    assert effective_capacity(0.9, 4) == pytest.approx(3.439, abs=1e-12)


def test_geometric_sum_oracle():
    betas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.999]
    for beta in betas:
        for n in range(1, 9):
            closed = effective_capacity(beta, n)
            assert abs(closed - brute_force_capacity(beta, n)) < 1e-12


def test_recurrence():
    for beta in [0.1, 0.5, 0.9, 0.999]:
        for n in range(2, 9):
            en = effective_capacity(beta, n)
            assert en == pytest.approx(
                1.0 + beta * effective_capacity(beta, n - 1), abs=1e-12
            )


def test_limit_and_near_limit():
    assert capacity_limit(4) == 4.0
    assert capacity_limit(1) == 1.0
    for n in range(1, 5):
        assert effective_capacity(0.999999, n) == pytest.approx(n, abs=1e-4)


def test_near_one_routes_to_limit():
    # values within 1e-9 of 1 use the analytic limit, no cancellation
    assert effective_capacity(1.0 - 1e-12, 4) == 4.0


def test_monotone_in_n():
    for beta in [0.1, 0.9]:
        caps = [effective_capacity(beta, n) for n in range(1, 9)]
        assert all(b >= a for a, b in zip(caps, caps[1:]))


def test_bounds():
    for beta in [0.0, 0.3, 0.9, 0.999]:
        for n in range(1, 5):
            e = effective_capacity(beta, n)
            assert 1.0 <= e <= n


def test_invalid_inputs():
    with pytest.raises(ValueError):
        effective_capacity(0.5, 0)
    with pytest.raises(ValueError):
        effective_capacity(-0.1, 3)
    with pytest.raises(ValueError):
        effective_capacity(1.5, 3)
    with pytest.raises(ValueError):
        capacity_limit(0)


@pytest.fixture(scope="module")
def table():
    return load_default_protocol()


class TestWeightTable:

    def test_beta_zero_uniform(self, table):
        wt = build_weight_table(table, 0.0)
        assert np.all(wt.capacity == 1.0)
        assert np.all(wt.weight == 1.0)

    def test_count4_weight(self, table):
        wt = build_weight_table(table, 0.9)
        p4 = next(p for p in range(table.num_unified) if table.count(p) == 4)
        assert wt.weight[p4] == pytest.approx(0.290782, abs=1e-6)

    def test_count1_weight_is_one(self, table):
        wt = build_weight_table(table, 0.9)
        p1 = next(p for p in range(table.num_unified) if table.count(p) == 1)
        assert wt.weight[p1] == 1.0

    def test_weight_monotone_in_count(self, table):
        wt = build_weight_table(table, 0.9)
        counts = np.array([table.count(p) for p in range(table.num_unified)])
        for c_lo, c_hi in [(1, 2), (2, 3), (3, 4)]:
            if (counts == c_lo).any() and (counts == c_hi).any():
                assert wt.weight[counts == c_hi].max() <= \
                    wt.weight[counts == c_lo].min()

    def test_weight_bounds(self, table):
        wt = build_weight_table(table, 0.999)
        counts = np.array([table.count(p) for p in range(table.num_unified)])
        assert np.all(wt.weight <= 1.0)
        assert np.all(wt.weight >= 1.0 / counts)

    def test_immutable(self, table):
        wt = build_weight_table(table, 0.9)
        with pytest.raises(ValueError):
            wt.weight[0] = 2.0
