import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from txresilience.behavior import (
    MobilityChain,
    NonConvergenceError,
    build_chain,
    category_relevance,
    dcg,
    hash_id,
    mean_ndcg,
    ndcg,
    stationary,
    transition_from_sequence,
    user_behavior,
    window_starts,
)


def seq_table(merchants, start="2017-01-02"):
    t0 = pd.Timestamp(start)
    return make_table([("u", m, t0 + pd.Timedelta(hours=i), 1.0) for i, m in enumerate(merchants)])


def test_alternating_chain():
    c = build_chain(seq_table("ABAB"), "u", "2017-01-02")
    assert c.states == ("A", "B")
    np.testing.assert_array_equal(c.transition, [[0, 1], [1, 0]])
    np.testing.assert_allclose(stationary(c), [0.5, 0.5], atol=1e-12)


def test_single_state_chain():
    c = build_chain(seq_table("AAA"), "u", "2017-01-02")
    assert c.states == ("A",)
    np.testing.assert_array_equal(c.transition, [[1.0]])
    np.testing.assert_array_equal(stationary(c), [1.0])


def test_too_few_purchases():
    assert build_chain(seq_table("A"), "u", "2017-01-02") is None
    assert build_chain(seq_table("AB"), "u", "2017-02-02") is None
    with pytest.raises(ValueError):
        MobilityChain("u", ("A",), np.zeros((1, 1)), np.zeros((2, 2)), np.datetime64("2017-01-01"))


@given(st.text(alphabet="ABCDEF", min_size=2, max_size=60))
@settings(max_examples=100, deadline=None)
def test_transition_counts_match_pair_enumeration(s):
    states = sorted(set(s))
    codes = np.array([states.index(ch) for ch in s])
    counts, T = transition_from_sequence(codes, len(states))
    brute = np.zeros((len(states), len(states)))
    for a, b in zip(s, s[1:]):
        brute[states.index(a), states.index(b)] += 1
    np.testing.assert_array_equal(counts, brute)
    np.testing.assert_allclose(T.sum(axis=1), 1.0)


def dense_stationary(T):
    n = T.shape[0]
    A = np.vstack([T.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1
    return np.linalg.lstsq(A, b, rcond=None)[0]


def test_random_chains_match_dense_solve(rng):
    for _ in range(50):
        n = int(rng.integers(2, 8))
        T = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
        T[np.arange(n), (np.arange(n) + 1) % n] += 0.1  # a cycle keeps it irreducible
        T /= T.sum(axis=1, keepdims=True)
        pi = stationary(T)
        np.testing.assert_allclose(pi, dense_stationary(T), atol=1e-8)
        assert np.abs(pi @ T - pi).max() <= 1e-10


def test_periodic_chain_converges():
    T = np.roll(np.eye(5), 1, axis=1)
    np.testing.assert_allclose(stationary(T), np.full(5, 0.2), atol=1e-12)


def test_nonconvergence_raises():
    with pytest.raises(NonConvergenceError):
        stationary(np.array([[0.5, 0.5], [0.5, 0.5]]), tol=-1.0, max_doublings=3)


def test_category_relevance_examples():
    cats = {"a": 1, "b": 1, "c": 6, "d": 7}
    r = category_relevance([0.4, 0.6], ["a", "b"], cats)
    assert r.categories == (1,)
    np.testing.assert_allclose(r.masses, [1.0])
    r = category_relevance([0.5, 0.3, 0.2], ["a", "c", "d"], cats)
    assert r.categories == (1, 6, 7)
    np.testing.assert_allclose(r.masses, [0.5, 0.3, 0.2])
    with pytest.raises(KeyError):
        category_relevance([1.0], ["zz"], cats)


def test_category_relevance_brute_force(rng):
    merchants = [f"m{i}" for i in range(10)]
    cats = dict(zip(merchants, rng.integers(1, 5, size=10)))
    for _ in range(30):
        pi = rng.dirichlet(np.ones(10))
        r = category_relevance(pi, merchants, cats)
        sums = {}
        for m, p in zip(merchants, pi):
            sums[int(cats[m])] = sums.get(int(cats[m]), 0.0) + p
        brute = sorted(sums.values(), reverse=True)
        np.testing.assert_allclose(r.masses, brute, rtol=1e-12)


TWO_HALVES = (np.sqrt(2) - 1) * (1 + 1 / np.log2(3))  # 0.675553


def test_dcg_examples():
    assert dcg([1.0]) == 1.0
    assert dcg([0.5, 0.5]) == pytest.approx(TWO_HALVES, rel=1e-14)
    assert dcg([0.5, 0.5]) == pytest.approx(0.675553, abs=5e-7)
    assert dcg([0.0, 0.0, 0.0]) == 0.0


def test_ndcg_examples():
    assert ndcg(dcg([0.3, 0.7]), dcg([0.3, 0.7])) == 1.0
    assert ndcg(dcg([0.5, 0.5]), dcg([1.0])) == pytest.approx(TWO_HALVES, rel=1e-14)
    assert np.isnan(ndcg(1.0, 0.0))


def test_mean_ndcg_arithmetic():
    frame = pd.DataFrame({
        "district_id": ["D", "D", "D"],
        "week_end": pd.to_datetime(["2017-02-01"] * 3),
        "ndcg": [0.8, 1.2, np.nan],
    })
    out = mean_ndcg(frame)
    assert out["mean_ndcg"].tolist() == [pytest.approx(1.0)]
    assert out["n_users"].tolist() == [2]


def test_window_starts():
    s = window_starts("2017-01-01", "2017-02-04", 28, 7)
    assert [str(x) for x in s] == ["2017-01-01", "2017-01-08"]


def test_user_behavior_matches_reference_functions(small_generation):
    table = small_generation.table
    out = user_behavior(table)
    assert (out["residual"] <= 1e-8).all()
    cats = table.merchant_categories()
    sample = out.dropna(subset=["ndcg"]).iloc[:: max(1, len(out) // 25)]
    for _, row in sample.iterrows():
        c = build_chain(table, row["client_id"], row["window_start"])
        pi = stationary(c)
        assert pi.sum() == pytest.approx(1.0, abs=1e-9)
        assert row["dcg"] == pytest.approx(dcg(category_relevance(pi, c.states, cats)), rel=1e-9)
        prev = build_chain(table, row["client_id"], row["window_start"] - pd.Timedelta(days=7))
        prev_dcg = dcg(category_relevance(stationary(prev), prev.states, cats))
        assert row["ndcg"] == pytest.approx(row["dcg"] / prev_dcg, rel=1e-9)


def test_shifted_user_leaves_band():
    rng = np.random.default_rng(3)
    rows = []
    food = ["f1", "f2", "f3"]
    other = ["h1", "t1", "r1", "c1"]
    mcc = {"f1": "5411", "f2": "5411", "f3": "5411", "h1": "5912", "t1": "4111", "r1": "5812", "c1": "5651"}
    day0 = pd.Timestamp("2017-01-02")
    for d in range(140):
        p_food = 0.5 if d < 98 else 0.95  # shift in week 15
        for k in range(3):
            m = rng.choice(food) if rng.random() < p_food else rng.choice(other)
            rows.append(("u", m, day0 + pd.Timedelta(days=d, hours=8 + 4 * k), 10, mcc[m]))
    out = user_behavior(make_table(rows))
    out = out.set_index("week_end")["ndcg"].dropna()
    shock_week = day0 + pd.Timedelta(days=105)
    pre = out[out.index < shock_week - pd.Timedelta(days=7)]
    band = np.percentile(np.abs(pre - 1), 95)
    assert abs(out[shock_week] - 1) > band


def test_hash_id_stable():
    assert hash_id("C000001") == hash_id("C000001")
    assert hash_id("a") != hash_id("b")
    assert len(hash_id("x")) == 16
