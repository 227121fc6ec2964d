import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slimsched.accprior import AccuracyTable

PUBLISHED = {
    (0.25, 0.25, 0.25, 0.25): 0.7030,
    (0.50, 0.50, 0.50, 0.50): 0.7299,
    (0.75, 0.75, 0.75, 0.75): 0.7493,
    (1.00, 1.00, 1.00, 1.00): 0.7643,
    (1.00, 0.75, 0.50, 0.25): 0.7135,
    (0.75, 1.00, 0.25, 0.50): 0.7233,
    (0.50, 0.25, 1.00, 0.75): 0.7453,
    (0.25, 0.50, 0.75, 1.00): 0.7533,
}


@pytest.fixture(scope="module")
def table():
    return AccuracyTable.load()


def test_bundled_table_has_the_published_rows(table):
    assert table.entries == PUBLISHED


@pytest.mark.parametrize("tup, expected", [
    ((0.25, 0.25, 0.25, 0.25), 0.7030),
    ((1.00, 0.75, 0.50, 0.25), 0.7135),
    ((1.00, 1.00, 1.00, 1.00), 0.7643),
])
def test_exact_lookup(table, tup, expected):
    assert table.exact_lookup(tup) == expected


def test_exact_lookup_miss(table):
    assert table.exact_lookup((0.25, 1.0, 0.25, 1.0)) is None


def test_prior_full_tuple(table):
    assert table.prior_lookup((0.50, 0.25, 1.00, 0.75)) == 0.7453


def test_prior_prefix_averages_shared_prefix(table):
    assert table.prior_lookup((0.25,)) == pytest.approx((0.7030 + 0.7533) / 2, abs=1e-12)


def test_prior_nearest_neighbor(table):
    q = (0.60, 0.60, 0.60, 0.60)
    nearest = min(PUBLISHED, key=lambda t: math.dist(t, q))
    assert nearest == (0.5, 0.5, 0.5, 0.5)
    assert table.prior_lookup(q) == 0.7299


def test_prior_tie_goes_to_smallest_tuple(table):
    # (0.375,) is equidistant from 0.25 and 0.5 prefixes
    assert table.prior_lookup((0.375,)) == table.prior_lookup((0.25,))


def test_prior_rejects_bad_prefix(table):
    with pytest.raises(ValueError):
        table.prior_lookup(())
    with pytest.raises(ValueError):
        table.prior_lookup((0.5,) * 5)


def _brute_prior(entries, prefix):
    n = len(prefix)
    prefixes = sorted({t[:n] for t in entries})
    best = min(prefixes, key=lambda p: (round(math.dist(p, prefix), 12), p))
    vals = [v for t, v in entries.items() if t[:n] == best]
    return sum(vals) / len(vals)


@given(st.lists(st.sampled_from([0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=4))
def test_prior_matches_brute_force_and_stays_in_range(prefix):
    table = AccuracyTable.load()
    p = table.prior_lookup(prefix)
    assert p == pytest.approx(_brute_prior(PUBLISHED, tuple(prefix)), abs=1e-12)
    assert min(PUBLISHED.values()) <= p <= max(PUBLISHED.values())


def test_centered_prior(table):
    # the hand-worked figures are given to 5 decimals
    assert table.top1_mean == pytest.approx(0.7352375, abs=1e-12)
    assert round(table.top1_mean, 5) == 0.73524
    assert table.centered_prior(table.top1_mean, True) == 0.0
    assert table.centered_prior(0.7030, False) == 0.7030
    assert table.centered_prior(0.7643, True) == pytest.approx(0.02906, abs=5e-6)


def test_centering_has_zero_mean_over_the_table(table):
    c = [table.centered_prior(v, True) for v in table.entries.values()]
    assert abs(math.fsum(c)) < 1e-12


def test_top1_mean_override():
    t = AccuracyTable(dict(PUBLISHED), top1_mean_override=0.7)
    assert t.centered_prior(0.75, True) == pytest.approx(0.05)


def test_sample_correctness_degenerate(rng):
    t = AccuracyTable({(1.0,) * 4: 0.0, (0.25,) * 4: 1.0})
    assert not any(t.sample_correctness((1.0,) * 4, rng) for _ in range(1000))
    assert all(t.sample_correctness((0.25,) * 4, rng) for _ in range(1000))


def test_sample_correctness_rate(table):
    rng = np.random.default_rng(7)
    hits = sum(table.sample_correctness((0.25,) * 4, rng) for _ in range(100_000))
    assert abs(hits / 100_000 - 0.7030) <= 0.005


def test_from_text_errors():
    with pytest.raises(ValueError, match="line 2"):
        AccuracyTable.from_text("0.25,0.25,0.25,0.25,0.7\n0.5,0.5,0.7\n")
    with pytest.raises(ValueError):
        AccuracyTable.from_text("0.25,0.25,0.25,0.25,1.7\n")
    with pytest.raises(ValueError):
        AccuracyTable.from_text("# only a comment\n")
