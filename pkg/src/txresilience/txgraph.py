"""Daily merchant co-purchase graphs, PageRank and normalized rank series.

The snapshot for day ``t`` holds an edge ``i -> j`` with weight equal to the
number of times some user bought at ``i`` and then, as their next purchase,
at ``j``, with both purchases inside ``[t - half_width, t + half_width]``.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .data import TransactionTable

HALF_WIDTH = 4
ALPHA = 0.85


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphSnapshot:
    """Directed weighted graph; ``src``/``dst`` index into ``vertices``."""

    date: np.datetime64
    vertices: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if not (self.src.shape == self.dst.shape == self.weight.shape):
            raise ValueError("edge arrays differ in length")
        if self.weight.size and self.weight.min() < 1:
            raise ValueError("edge weights must be >= 1")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.size)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_vertices
        return sp.csr_matrix((self.weight.astype(np.float64), (self.src, self.dst)), shape=(n, n))

    def out_strength(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.weight, minlength=self.n_vertices)

    def in_strength(self) -> np.ndarray:
        return np.bincount(self.dst, weights=self.weight, minlength=self.n_vertices)

    def edge_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": np.repeat(self.date, self.n_edges),
                "src": self.vertices[self.src],
                "dst": self.vertices[self.dst],
                "weight": self.weight,
            }
        )

    @classmethod
    def from_edges(cls, date, edges: pd.DataFrame | Sequence[tuple]) -> "GraphSnapshot":
        """Build from ``(src, dst, weight)`` rows; parallel rows are summed."""
        e = edges if isinstance(edges, pd.DataFrame) else pd.DataFrame(list(edges), columns=["src", "dst", "weight"])
        e = e.groupby(["src", "dst"], sort=True)["weight"].sum().reset_index()
        vertices = np.unique(np.concatenate([e["src"].to_numpy(), e["dst"].to_numpy()]))
        return cls(
            date=np.datetime64(pd.Timestamp(date).date(), "D"),
            vertices=vertices,
            src=np.searchsorted(vertices, e["src"].to_numpy()),
            dst=np.searchsorted(vertices, e["dst"].to_numpy()),
            weight=e["weight"].to_numpy(),
        )


def purchase_pairs(table: TransactionTable) -> pd.DataFrame:
    """Every consecutive purchase pair of every user.

    Purchases are ordered by timestamp with ties broken by merchant id.
    Columns: client_id, src, dst, day_src, day_dst.
    """
    f = table.frame
    client = f["client_id"].to_numpy()
    merch = f["merchant_id"].to_numpy()
    ts = f["timestamp"].to_numpy().astype("int64")
    order = np.lexsort((merch, ts, client))
    client, merch, day = client[order], merch[order], table.days[order]
    same = client[1:] == client[:-1]
    return pd.DataFrame(
        {
            "client_id": client[1:][same],
            "src": merch[:-1][same],
            "dst": merch[1:][same],
            "day_src": day[:-1][same],
            "day_dst": day[1:][same],
        }
    )


def _snapshot_from_pairs(date: np.datetime64, pairs: pd.DataFrame) -> GraphSnapshot:
    if pairs.empty:
        empty = np.array([], dtype=np.int64)
        return GraphSnapshot(date, np.array([], dtype=object), empty, empty, empty)
    e = pairs.groupby(["src", "dst"], sort=True).size().rename("weight").reset_index()
    return GraphSnapshot.from_edges(date, e)


def build_snapshot(table: TransactionTable, t, half_width: int = HALF_WIDTH) -> GraphSnapshot:
    """Snapshot for day ``t``; an empty window yields an empty graph."""
    day = np.datetime64(pd.Timestamp(t).date(), "D")
    pairs = purchase_pairs(table)
    lo, hi = day - np.timedelta64(half_width, "D"), day + np.timedelta64(half_width, "D")
    keep = (pairs["day_src"].to_numpy() >= lo) & (pairs["day_dst"].to_numpy() <= hi)
    return _snapshot_from_pairs(day, pairs[keep])


def snapshot_dates(table: TransactionTable, half_width: int = HALF_WIDTH) -> np.ndarray:
    """Days whose whole window lies inside the table's date range."""
    first, last = (np.datetime64(d, "D") for d in table.date_range)
    lo, hi = first + np.timedelta64(half_width, "D"), last - np.timedelta64(half_width, "D")
    if hi < lo:
        return np.array([], dtype="datetime64[D]")
    return np.arange(lo, hi + np.timedelta64(1, "D"), dtype="datetime64[D]")


def build_snapshots(table: TransactionTable, dates=None, half_width: int = HALF_WIDTH) -> list[GraphSnapshot]:
    """Snapshots for ``dates`` (default: every fully covered day).

    A pair bought on days ``a <= b`` belongs to every snapshot ``t`` with
    ``b - half_width <= t <= a + half_width``, so each pair is expanded once
    over that range and counted per day.
    """
    dates = snapshot_dates(table, half_width) if dates is None else np.asarray(
        [np.datetime64(pd.Timestamp(d).date(), "D") for d in dates], dtype="datetime64[D]"
    )
    if dates.size == 0:
        return []
    pairs = purchase_pairs(table)
    t_lo = pairs["day_dst"].to_numpy().astype("datetime64[D]").astype("int64") - half_width
    t_hi = pairs["day_src"].to_numpy().astype("datetime64[D]").astype("int64") + half_width
    span = np.maximum(t_hi - t_lo + 1, 0)
    rep = np.repeat(np.arange(span.size), span)
    offs = np.arange(rep.size) - np.repeat(np.cumsum(span) - span, span)
    t = t_lo[rep] + offs
    wanted = dates.astype("int64")
    keep = np.isin(t, wanted)
    long = pd.DataFrame({"t": t[keep], "src": pairs["src"].to_numpy()[rep[keep]], "dst": pairs["dst"].to_numpy()[rep[keep]]})
    counts = long.groupby(["t", "src", "dst"], sort=True).size().rename("weight").reset_index()
    groups = {k: g for k, g in counts.groupby("t", sort=True)}
    out = []
    for d in wanted:
        g = groups.get(d)
        day = np.datetime64(int(d), "D")
        out.append(_snapshot_from_pairs(day, pd.DataFrame(columns=["src", "dst"])) if g is None else GraphSnapshot.from_edges(day, g[["src", "dst", "weight"]]))
    return out


def edge_list(snapshots: Sequence[GraphSnapshot]) -> pd.DataFrame:
    frames = [s.edge_frame() for s in snapshots if s.n_edges]
    if not frames:
        return pd.DataFrame(columns=["t", "src", "dst", "weight"])
    return pd.concat(frames, ignore_index=True)


def snapshots_from_edge_list(edges: pd.DataFrame) -> list[GraphSnapshot]:
    days = pd.to_datetime(edges["t"]).to_numpy().astype("datetime64[D]")
    e = edges.assign(t=days)
    return [GraphSnapshot.from_edges(t, g[["src", "dst", "weight"]]) for t, g in e.groupby("t", sort=True)]


def pagerank(snapshot: GraphSnapshot | sp.spmatrix, alpha: float = ALPHA, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """PageRank by power iteration on the weighted graph.

    A surfer at ``i`` follows an out-edge with probability proportional to
    its weight; vertices without out-edges jump uniformly. Iterates until
    the L1 change is ``<= tol``.
    """
    W = snapshot.adjacency() if isinstance(snapshot, GraphSnapshot) else sp.csr_matrix(snapshot, dtype=np.float64)
    n = W.shape[0]
    if n == 0:
        raise ValueError("PageRank of an empty graph")
    out = np.asarray(W.sum(axis=1)).ravel()
    dangling = out <= 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, out))
    PT = (sp.diags(inv) @ W).T.tocsr()
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = alpha * (PT @ x + x[dangling].sum() / n) + (1.0 - alpha) / n
        nxt /= nxt.sum()
        err = np.abs(nxt - x).sum()
        x = nxt
        if err <= tol:
            return x
    raise NonConvergenceError(f"PageRank did not converge in {max_iter} iterations (last L1 change {err:.3e})")


def normalized_rank(scores, mode: str = "ordinal", tie_tol: float = 1e-12) -> np.ndarray:
    """Map scores to ``[0, 1]`` with 1 for the top vertex.

    ``ordinal``: ``1 - (c - 1) / max(c)`` where ``c`` is the competition rank
    (scores within ``tie_tol`` share the better position). ``score``: the
    score divided by the largest score.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return s.copy()
    if mode == "score":
        top = s.max()
        return s / top if top > 0 else np.ones_like(s)
    if mode != "ordinal":
        raise ValueError("mode must be 'ordinal' or 'score'")
    asc = np.sort(s)
    c = 1 + (s.size - np.searchsorted(asc, s + tie_tol, side="right"))
    return 1.0 - (c - 1) / c.max()


@dataclass(frozen=True)
class RankSeries:
    merchant_id: str
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        v = self.values[~np.isnan(self.values)]
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("normalized ranks must lie in [0, 1]")

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=pd.DatetimeIndex(self.dates), name=self.merchant_id)


def _rank_one(args) -> tuple[np.datetime64, np.ndarray, np.ndarray]:
    snap, alpha, tol, mode = args
    if snap.n_vertices == 0:
        return snap.date, snap.vertices, np.array([])
    return snap.date, snap.vertices, normalized_rank(pagerank(snap, alpha=alpha, tol=tol), mode=mode)


def rank_panel(snapshots: Sequence[GraphSnapshot], alpha: float = ALPHA, tol: float = 1e-10, mode: str = "ordinal", n_jobs: int = 1) -> pd.DataFrame:
    """Normalized ranks as a (date x merchant) frame; NaN where a merchant is absent."""
    jobs = [(s, alpha, tol, mode) for s in snapshots]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_rank_one, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        results = [_rank_one(j) for j in jobs]
    index = pd.DatetimeIndex([r[0] for r in results], name="date")
    frames = [pd.Series(r[2], index=r[1], name=i) for i, r in enumerate(results)]
    if not frames:
        return pd.DataFrame(index=index)
    panel = pd.concat(frames, axis=1).T
    panel.index = index
    panel = panel.reindex(sorted(panel.columns), axis=1)
    panel.columns.name = "merchant_id"
    return panel


def rank_series(panel: pd.DataFrame, merchant_id: str) -> RankSeries:
    if merchant_id not in panel.columns or panel[merchant_id].isna().all():
        raise KeyError(f"merchant {merchant_id!r} never appears in a snapshot")
    col = panel[merchant_id]
    return RankSeries(str(merchant_id), col.index.to_numpy().astype("datetime64[D]"), col.to_numpy(dtype=np.float64))


def rank_long(panel: pd.DataFrame) -> pd.DataFrame:
    """Long form ``date, merchant_id, r`` without missing entries."""
    long = panel.stack(future_stack=True).dropna().rename("r").reset_index()
    long.columns = ["date", "merchant_id", "r"]
    return long.sort_values(["date", "merchant_id"], kind="mergesort").reset_index(drop=True)


def rank_panel_from_long(long: pd.DataFrame) -> pd.DataFrame:
    panel = long.pivot(index="date", columns="merchant_id", values="r")
    panel.index = pd.DatetimeIndex(pd.to_datetime(panel.index), name="date")
    return panel.sort_index(axis=1)
