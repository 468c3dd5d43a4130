
import networkx as nx
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txresilience.corestructure import (
    CoreSizeSeries,
    core_category_fraction,
    core_size_series,
    ks_normal,
    kshell,
    rich_core,
    shell_dynamics,
    zscore_events,
)
from txresilience.txgraph import GraphSnapshot

DAY = np.datetime64("2017-03-01", "D")


def snap(edges, vertices=None, date=DAY):
    """edges: (u, v, w) with string vertex ids."""
    if vertices is None:
        vertices = sorted({u for u, _, _ in edges} | {v for _, v, _ in edges})
    vertices = np.array(sorted(vertices))
    pos = {v: i for i, v in enumerate(vertices)}
    src = np.array([pos[u] for u, _, _ in edges], dtype=np.int64)
    dst = np.array([pos[v] for _, v, _ in edges], dtype=np.int64)
    w = np.array([w for _, _, w in edges], dtype=np.int64)
    return GraphSnapshot(np.datetime64(date, "D"), vertices, src, dst, w)


def brute_core(edges, vertices, direction="out", weighted=True):
    strength = {v: 0.0 for v in vertices}
    for u, v, w in edges:
        x = w if weighted else 1
        strength[u] += x
        strength[v] += x
    ranking = sorted(vertices, key=lambda v: (-strength[v], v))
    rank = {v: i for i, v in enumerate(ranking)}
    kp = [0.0] * len(ranking)
    for u, v, w in edges:
        x = w if weighted else 1
        if direction in ("out", "both") and rank[v] < rank[u]:
            kp[rank[u]] += x
        if direction in ("in", "both") and rank[u] < rank[v]:
            kp[rank[v]] += x
    best = max(kp)
    r_star = kp.index(best) + 1
    return set(ranking[:r_star])


def naive_kshell(edges, vertices):
    adj = {v: set() for v in vertices}
    for u, v, _ in edges:
        if u != v:
            adj[u].add(v)
            adj[v].add(u)
    shell, k = {}, 0
    while adj:
        u = min(adj, key=lambda x: (len(adj[x]), x))
        k = max(k, len(adj[u]))
        shell[u] = k
        for nb in adj.pop(u):
            adj[nb].discard(u)
    return shell


def random_graph(rng, n_max=40):
    n = int(rng.integers(2, n_max))
    verts = [f"v{i:03d}" for i in range(n)]
    m = int(rng.integers(1, 3 * n))
    edges = {}
    for _ in range(m):
        u, v = rng.choice(n, 2)
        edges[(verts[u], verts[v])] = int(rng.integers(1, 6))
    return [(u, v, w) for (u, v), w in edges.items()], verts


def test_clique_with_pendants():
    clique = ["a", "b", "c", "d"]
    edges = [(u, v, 1) for u in clique for v in clique if u != v]
    for i, u in enumerate(clique):
        for j in range(2):
            leaf = f"leaf{i}{j}"
            edges += [(u, leaf, 1), (leaf, u, 1)]
    p = rich_core(snap(edges))
    assert set(p.core) == set(clique)
    assert p.size == 4 and len(p.periphery) == 8
    assert p.is_maximal()


def test_single_edge_core_is_one_vertex():
    p = rich_core(snap([("a", "b", 1)]))
    assert p.r_star == 1
    assert list(p.core) == ["a"]
    # with a strictly heavier endpoint the ranking no longer relies on ids
    p = rich_core(snap([("b", "a", 1), ("b", "b", 2)]))
    assert list(p.core) == ["b"]


def test_empty_graph_raises():
    with pytest.raises(ValueError):
        rich_core(snap([], vertices=[]))
    with pytest.raises(ValueError):
        rich_core(snap([("a", "b", 1)]), direction="sideways")


@pytest.mark.parametrize("direction", ["out", "in", "both"])
@pytest.mark.parametrize("weighted", [True, False])
def test_rich_core_matches_brute_force(direction, weighted):
    rng = np.random.default_rng(7)
    for _ in range(30):
        edges, verts = random_graph(rng)
        p = rich_core(snap(edges, verts), direction=direction, weighted=weighted)
        assert set(p.core) == brute_core(edges, verts, direction, weighted)
        assert p.k_plus[p.r_star - 1] >= p.k_plus.max()
        assert set(p.core) | set(p.periphery) == set(verts)


@given(st.integers(0, 10_000), st.integers(2, 9))
@settings(max_examples=40, deadline=None)
def test_core_invariant_to_weight_scaling(seed, factor):
    edges, verts = random_graph(np.random.default_rng(seed))
    a = rich_core(snap(edges, verts))
    b = rich_core(snap([(u, v, w * factor) for u, v, w in edges], verts))
    assert list(a.core) == list(b.core)


def test_kshell_examples():
    tri = kshell(snap([("a", "b", 1), ("b", "c", 1), ("c", "a", 1)]))
    assert (tri == 2).all()
    star = kshell(snap([("hub", f"l{i}", 1) for i in range(5)]))
    assert (star == 1).all()
    iso = kshell(snap([("a", "a", 3), ("b", "c", 1)]))
    assert iso["a"] == 0 and iso["b"] == 1


def test_kshell_matches_naive_pruning_and_networkx():
    rng = np.random.default_rng(11)
    for _ in range(40):
        edges, verts = random_graph(rng)
        got = kshell(snap(edges, verts)).to_dict()
        assert got == naive_kshell(edges, verts)
        g = nx.Graph()
        g.add_nodes_from(verts)
        g.add_edges_from((u, v) for u, v, _ in edges if u != v)
        assert got == nx.core_number(g)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_kshell_certificate_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    edges, verts = random_graph(rng, 25)
    sh = kshell(snap(edges, verts))
    nbrs = {v: set() for v in verts}
    for u, v, _ in edges:
        if u != v:
            nbrs[u].add(v)
            nbrs[v].add(u)
    for v in verts:
        assert sum(sh[x] >= sh[v] for x in nbrs[v]) >= sh[v]
    u, v = rng.choice(len(verts), 2, replace=False)
    more = kshell(snap(edges + [(verts[u], verts[v], 1)], verts))
    assert (more >= sh).all()


def test_zscore_examples():
    s = CoreSizeSeries(np.arange(4).astype("datetime64[D]"), np.array([1, 2, 3, 4]))
    z = zscore_events(s, [pd.Timestamp("1970-01-01")])
    assert z["z"].iloc[0] == pytest.approx((1 - 2.5) / np.std([1, 2, 3, 4], ddof=1))
    assert (27 - 68) / 17 == pytest.approx(-2.41, abs=0.005)
    assert (154 - 68) / 17 == pytest.approx(5.06, abs=0.005)
    mid = CoreSizeSeries(np.arange(3).astype("datetime64[D]"), np.array([1, 2, 3]))
    assert zscore_events(mid, ["1970-01-02"])["z"].iloc[0] == 0.0
    with pytest.raises(KeyError):
        zscore_events(mid, ["1999-01-01"])
    flat = CoreSizeSeries(np.arange(3).astype("datetime64[D]"), np.array([5, 5, 5]))
    with pytest.raises(ValueError):
        zscore_events(flat, ["1970-01-01"])


@given(st.lists(st.integers(1, 500), min_size=3, max_size=40), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_zscore_shift_invariant(sizes, shift):
    sizes = np.array(sizes)
    if sizes.std() == 0:
        return
    dates = np.arange(sizes.size).astype("datetime64[D]")
    ev = [pd.Timestamp(d) for d in dates[:3]]
    a = zscore_events(CoreSizeSeries(dates, sizes), ev)["z"]
    b = zscore_events(CoreSizeSeries(dates, sizes + shift), ev)["z"]
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_ks_normal_oracles():
    hits = 0
    for seed in range(50):
        x = np.random.default_rng(seed).normal(68, 17, 400)
        hits += ks_normal(x).pvalue > 0.05
    assert hits >= 45
    u = np.random.default_rng(0).uniform(0, 1, 2000)
    assert ks_normal(u, loc=0.5, scale=0.05).pvalue < 0.01
    r = ks_normal(np.random.default_rng(1).exponential(size=300))
    assert 0 <= r.statistic <= 1 and r.pvalue < 0.01
    with pytest.raises(ValueError):
        ks_normal([1.0] * 10)
    with pytest.raises(ValueError):
        ks_normal([1.0, 2.0])


def test_ks_matches_scipy():
    from scipy.stats import kstest

    x = np.random.default_rng(3).normal(size=200)
    r = ks_normal(x, loc=0, scale=1)
    ref = kstest(x, "norm", method="asymp")
    assert r.statistic == pytest.approx(ref.statistic, abs=1e-12)
    assert r.pvalue == pytest.approx(ref.pvalue, rel=1e-6)


def test_core_category_fraction():
    clique = ["a", "b", "c", "d"]
    edges = [(u, v, 1) for u in clique for v in clique if u != v] + [("a", "x", 1)]
    p = rich_core(snap(edges))
    assert core_category_fraction(p, {v: 1 for v in "abcdx"}).to_dict() == {1: 1.0}
    f = core_category_fraction(p, {"a": 1, "b": 1, "c": 6, "d": 6, "x": 9})
    assert f.to_dict() == {1: 0.5, 6: 0.5}
    assert f.sum() == pytest.approx(1.0)


def test_core_size_series_identical_snapshots():
    edges = [("a", "b", 2), ("b", "c", 1), ("c", "a", 1)]
    snaps = [snap(edges, date=DAY + i) for i in range(5)]
    s = core_size_series(snaps)
    assert s.std == 0.0
    assert len(set(s.sizes)) == 1
    assert list(s.to_frame().columns) == ["date", "core_size"]


def test_shell_dynamics_static_and_deleted():
    edges = [("a", "b", 1), ("b", "c", 1), ("c", "a", 1), ("c", "d", 2)]
    counts, mass = shell_dynamics([snap(edges, date=DAY + i) for i in range(3)])
    assert (counts["shell_from"] == counts["shell_to"]).all()
    assert counts["count"].sum() == 8
    day0 = mass[mass["date"] == pd.Timestamp(DAY)].set_index("shell")["in_weight"]
    assert day0.to_dict() == {1: 2.0, 2: 3.0}
    gone = [e for e in edges if "d" not in e[:2]]
    counts, _ = shell_dynamics([snap(edges), snap(gone, date=DAY + 1)])
    row = counts[(counts["shell_from"] == 1) & (counts["shell_to"] == 0)]
    assert row["count"].tolist() == [1]
    with pytest.raises(ValueError):
        shell_dynamics([snap(edges)])
