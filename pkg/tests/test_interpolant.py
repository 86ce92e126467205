import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltmatch.core import ContractError, Schedule, hazard
from tiltmatch.interpolant import (SarLayout, eligible_indices, hazard_sar,
                                   interpolate_any_order, interpolate_sar, reveal_any_order)

V = 3
M = V


def test_endpoints(rng):
    x1 = np.array([0, 1, 2, 1])
    assert np.all(interpolate_any_order(x1, 0.0, Schedule(), rng, M) == M)
    assert np.all(interpolate_any_order(x1, 1.0, Schedule(), rng, M) == x1)


def test_mask_count_is_binomial(rng):
    x1 = np.zeros((100_000, 4), dtype=int)
    x = reveal_any_order(x1, np.full(len(x1), 0.5), rng, M)
    counts = (x == M).sum(axis=1)
    assert abs(counts.mean() - 2.0) < 3 * np.sqrt(1.0 / len(x1))


def test_rejects_unclean_source(rng):
    with pytest.raises(ContractError):
        interpolate_any_order(np.array([0, M]), 0.5, Schedule(), rng, M)


def test_prefix_is_never_masked(rng):
    x1 = np.ones((50, 6), dtype=int)
    x = reveal_any_order(x1, np.zeros(50), rng, M, prefix=2)
    assert np.all(x[:, :2] == 1) and np.all(x[:, 2:] == M)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_revealed_tokens_agree_with_source(seed, t):
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, V, 7)
    x = interpolate_any_order(x1, t, Schedule(), rng, M)
    keep = x != M
    assert np.all(x[keep] == x1[keep])


def test_sar_half_time(rng):
    lay = SarLayout(8, 4)
    x1 = np.arange(8) % V
    for _ in range(20):
        x = interpolate_sar(x1, 0.5, lay, Schedule(), rng, M)
        assert np.all(x[:4] == x1[:4]) and np.all(x[4:] == M)


def test_sar_quarter_time_reveals_half_of_block_zero(rng):
    lay = SarLayout(8, 4)
    x1 = np.zeros(8, dtype=int)
    counts = np.array([(interpolate_sar(x1, 0.25, lay, Schedule(), rng, M)[:4] != M).sum()
                       for _ in range(20_000)])
    assert abs(counts.mean() - 2.0) < 3 * np.sqrt(1.0 / len(counts))
    x = interpolate_sar(x1, 0.25, lay, Schedule(), rng, M)
    assert np.all(x[4:] == M)


def test_sar_near_one_reveals_everything(rng):
    lay = SarLayout(8, 2)
    x1 = np.ones(8, dtype=int)
    x = interpolate_sar(x1, 1.0, lay, Schedule(), rng, M)
    assert np.all(x == x1)


@given(st.integers(1, 4), st.integers(1, 3), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_sar_blocks_ordering(n_blocks, block, t, seed):
    lay = SarLayout(n_blocks * block, block)
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, V, lay.length)
    x = interpolate_sar(x1, t, lay, Schedule(), rng, M)
    b, _ = lay.active(t)
    assert np.all(x[:lay.block_slice(b).start] == x1[:lay.block_slice(b).start])
    assert np.all(x[lay.block_slice(b).stop:] == M)


def test_hazard_sar_examples():
    assert hazard_sar(SarLayout(8, 2), Schedule(), 0.375) == pytest.approx(8.0, abs=1e-12)
    assert hazard_sar(SarLayout(4, 2), Schedule(), 0.0) == pytest.approx(2.0, abs=1e-12)


@given(st.floats(0.0, 0.99))
def test_hazard_sar_single_block_is_any_order(t):
    assert hazard_sar(SarLayout(5, 5), Schedule(), t) == pytest.approx(hazard(Schedule(), t),
                                                                       rel=1e-12)


def test_eligible_indices():
    lay = SarLayout(4, 2)
    full = np.full(4, M)
    assert eligible_indices(full, lay, 0.1, M) == [0, 1]
    assert eligible_indices(full, lay, 0.6, M) == [2, 3]
    assert eligible_indices(np.array([0, M, M, M]), lay, 0.1, M) == [1]
    assert eligible_indices(np.array([0, 1, M, M]), lay, 0.1, M) == []


def test_layout_divisibility():
    with pytest.raises(ValueError):
        SarLayout(7, 2)
    assert SarLayout(7, 2, prefix=3).n_blocks == 2
