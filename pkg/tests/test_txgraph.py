import datetime as dt

import networkx as nx
import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_table
from txresilience import synthgen
from txresilience.txgraph import (
    GraphSnapshot,
    NonConvergenceError,
    RankSeries,
    build_snapshot,
    build_snapshots,
    edge_list,
    normalized_rank,
    pagerank,
    purchase_pairs,
    rank_long,
    rank_panel,
    rank_panel_from_long,
    rank_series,
    snapshot_dates,
    snapshots_from_edge_list,
)


def edges_of(s):
    return {(s.vertices[a], s.vertices[b]): int(w) for a, b, w in zip(s.src, s.dst, s.weight)}


def test_window_example():
    t = pd.Timestamp("2017-01-10")
    rows = [("x", m, t + pd.Timedelta(days=d), 1) for m, d in (("u", -1), ("v", 1), ("w", 3))]
    s = build_snapshot(make_table(rows), t)
    assert edges_of(s) == {("u", "v"): 1, ("v", "w"): 1}
    # the purchase five days out is beyond the window
    s = build_snapshot(make_table(rows + [("x", "z", t + pd.Timedelta(days=5), 1)]), t)
    assert edges_of(s) == {("u", "v"): 1, ("v", "w"): 1}


def test_identical_sequences_add_up():
    t = pd.Timestamp("2017-01-10")
    rows = [(c, m, t + pd.Timedelta(hours=h), 1) for c in ("a", "b") for m, h in (("u", 1), ("v", 2))]
    assert edges_of(build_snapshot(make_table(rows), t)) == {("u", "v"): 2}


def test_empty_window_is_empty_graph():
    s = build_snapshot(make_table([("a", "u", "2017-01-01", 1)]), "2017-03-01")
    assert s.n_vertices == 0 and s.n_edges == 0


def brute_force_edges(table, t, hw=4):
    f = table.frame.sort_values(["client_id", "timestamp", "merchant_id"], kind="mergesort")
    lo, hi = t - pd.Timedelta(days=hw), t + pd.Timedelta(days=hw + 1)
    out = {}
    for _, g in f.groupby("client_id"):
        ms = g["merchant_id"].tolist()
        ts = g["timestamp"].tolist()
        for i in range(len(ms) - 1):
            if ts[i] >= lo and ts[i + 1] < hi:
                out[(ms[i], ms[i + 1])] = out.get((ms[i], ms[i + 1]), 0) + 1
    return out


def test_snapshot_matches_brute_force(small_generation, rng):
    table = small_generation.table
    dates = snapshot_dates(table)
    for d in rng.choice(dates, size=4, replace=False):
        t = pd.Timestamp(d)
        assert edges_of(build_snapshot(table, t)) == brute_force_edges(table, t)


def test_bulk_builder_matches_single_day(small_generation):
    table = small_generation.table
    snaps = build_snapshots(table)
    assert len(snaps) == len(snapshot_dates(table)) == 70 - 8
    for s in snaps[::9]:
        assert edges_of(s) == edges_of(build_snapshot(table, s.date))


def test_sliding_window_consistency(small_generation):
    table = small_generation.table
    pairs = purchase_pairs(table)
    snaps = build_snapshots(table)
    for a, b in zip(snaps[10:14], snaps[11:15]):
        ea, eb = edges_of(a), edges_of(b)
        leaving = pairs[(pairs["day_src"] == a.date - np.timedelta64(4, "D")) & (pairs["day_dst"] <= a.date + np.timedelta64(4, "D"))]
        entering = pairs[(pairs["day_dst"] == b.date + np.timedelta64(4, "D")) & (pairs["day_src"] >= b.date - np.timedelta64(4, "D"))]
        expected = dict(ea)
        for s, d in zip(leaving["src"], leaving["dst"]):
            expected[(s, d)] -= 1
        for s, d in zip(entering["src"], entering["dst"]):
            expected[(s, d)] = expected.get((s, d), 0) + 1
        assert {k: v for k, v in expected.items() if v} == eb


def test_edge_list_roundtrip(small_generation):
    snaps = build_snapshots(small_generation.table)[:5]
    back = snapshots_from_edge_list(edge_list(snaps))
    for a, b in zip(snaps, back):
        assert a.date == b.date and edges_of(a) == edges_of(b)


def test_snapshot_validation():
    with pytest.raises(ValueError):
        GraphSnapshot(np.datetime64("2017-01-01"), np.array(["a"]), np.array([0]), np.array([0]), np.array([0]))


def dense_pagerank(W, alpha=0.85):
    n = W.shape[0]
    out = W.sum(axis=1)
    S = np.where(out[:, None] > 0, W / np.where(out > 0, out, 1)[:, None], 1.0 / n)
    G = alpha * S.T + (1 - alpha) / n
    vals, vecs = np.linalg.eig(G)
    v = np.real(vecs[:, np.argmax(np.real(vals))])
    return v / v.sum()


def test_pagerank_examples():
    np.testing.assert_allclose(pagerank(sp.csr_matrix(np.array([[0, 1.0], [1.0, 0]]))), [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(pagerank(sp.csr_matrix(np.zeros((1, 1)))), [1.0])
    with pytest.raises(ValueError):
        pagerank(sp.csr_matrix((0, 0)))


def random_digraph(rng, n, p=0.15):
    W = (rng.random((n, n)) < p) * rng.integers(1, 6, size=(n, n))
    return W.astype(float)


def test_pagerank_matches_dense_oracle(rng):
    for _ in range(20):
        W = random_digraph(rng, 20)
        assert np.abs(pagerank(sp.csr_matrix(W)) - dense_pagerank(W)).sum() <= 1e-8


def test_pagerank_matches_networkx(rng):
    W = random_digraph(rng, 30)
    G = nx.from_numpy_array(W, create_using=nx.DiGraph)
    ref = nx.pagerank(G, alpha=0.85, tol=1e-13, max_iter=10000, weight="weight")
    np.testing.assert_allclose(pagerank(sp.csr_matrix(W)), [ref[i] for i in range(30)], atol=1e-9)


@given(st.integers(2, 25), st.integers(0, 2**31), st.floats(0.1, 100))
@settings(max_examples=60, deadline=None)
def test_pagerank_simplex_and_scale_invariance(n, seed, scale):
    W = random_digraph(np.random.default_rng(seed), n, 0.3)
    x = pagerank(sp.csr_matrix(W))
    assert (x >= 0).all() and abs(x.sum() - 1) <= 1e-9
    np.testing.assert_allclose(pagerank(sp.csr_matrix(W * scale)), x, atol=1e-9)


def test_pagerank_nonconvergence():
    W = sp.csr_matrix(np.roll(np.eye(6), 1, axis=1))
    with pytest.raises(NonConvergenceError):
        pagerank(W, alpha=0.999999, tol=1e-300, max_iter=3)


def test_normalized_rank_examples():
    r = normalized_rank(np.arange(10, 0, -1) / 55)
    assert r[0] == 1.0 and r[-1] == pytest.approx(0.1)
    np.testing.assert_array_equal(normalized_rank(np.full(5, 0.2)), np.ones(5))
    # competition ranking: two tied leaders, third gets c = 3
    np.testing.assert_allclose(normalized_rank([0.4, 0.4, 0.2]), [1.0, 1.0, 1 - 2 / 3])
    np.testing.assert_allclose(normalized_rank([0.2, 0.5], mode="score"), [0.4, 1.0])
    with pytest.raises(ValueError):
        normalized_rank([1.0], mode="bogus")


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)))
@settings(max_examples=150, deadline=None)
def test_normalized_rank_order_isomorphic(s):
    r = normalized_rank(s)
    assert r.min() >= 0 and r.max() == 1.0
    i, j = np.meshgrid(np.arange(s.size), np.arange(s.size), indexing="ij")
    above = s[i] > s[j] + 1e-12
    assert (r[i][above] > r[j][above]).all()


def star_snapshots():
    days = pd.date_range("2017-01-01", periods=4)
    out = []
    for k, d in enumerate(days):
        leaves = ["b", "c"] if k != 2 else ["b"]
        out.append(GraphSnapshot.from_edges(d, [(x, "a", 1) for x in leaves] + [("a", x, 1) for x in leaves]))
    return out


def test_rank_series_semantics():
    panel = rank_panel(star_snapshots())
    top = rank_series(panel, "a")
    np.testing.assert_array_equal(top.values, np.ones(4))
    c = rank_series(panel, "c")
    assert np.isnan(c.values[2]) and not np.isnan(c.values[1])
    with pytest.raises(KeyError):
        rank_series(panel, "zzz")
    with pytest.raises(ValueError):
        RankSeries("m", np.array(["2017-01-01"], dtype="datetime64[D]"), np.array([1.5]))


def test_rank_long_roundtrip():
    panel = rank_panel(star_snapshots())
    long = rank_long(panel)
    assert list(long.columns) == ["date", "merchant_id", "r"]
    assert long["r"].notna().all()
    back = rank_panel_from_long(long)
    pd.testing.assert_frame_equal(back, panel, check_names=False, check_freq=False)


def test_rank_panel_parallel_identical(small_generation):
    snaps = build_snapshots(small_generation.table)[:12]
    a = rank_panel(snaps, n_jobs=1)
    b = rank_panel(snaps, n_jobs=3)
    pd.testing.assert_frame_equal(a, b)
    top = a.max(axis=1)
    assert (top == 1.0).all()


def test_surged_merchants_climb_above_pre_surge_maximum():
    cfg = synthgen.ScenarioConfig(
        n_agents=2000, n_merchants=300, n_districts=3, start_date=dt.date(2017, 1, 1), n_days=60,
        shocks=(synthgen.ShockSpec("consumption-surge", 1.0, dt.date(2017, 1, 31), dt.date(2017, 2, 6), None, (7,)),),
    )
    g = synthgen.generate(cfg, seed=0)
    panel = rank_panel(build_snapshots(g.table))
    cats = g.table.merchant_categories()
    win = (panel.index >= "2017-01-31") & (panel.index <= "2017-02-06")
    pre = panel.index < "2017-01-27"

    def climb_rate(category):
        ms = [m for m in panel.columns if cats.get(m) == category and panel.loc[pre, m].max() < 1.0]
        return np.mean([panel.loc[win, m].max() > panel.loc[pre, m].max() for m in ms])

    surged, control = climb_rate(7), climb_rate(1)
    assert surged >= 0.7
    assert surged > control + 0.4
