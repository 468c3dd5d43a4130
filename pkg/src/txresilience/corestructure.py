"""Rich core, core-size statistics and k-shell dynamics of graph snapshots."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import kolmogorov
from scipy.stats import norm

from .txgraph import GraphSnapshot


@dataclass(frozen=True)
class CorePartition:
    date: np.datetime64
    ranking: np.ndarray
    k_plus: np.ndarray
    r_star: int

    @property
    def core(self) -> np.ndarray:
        return self.ranking[: self.r_star]

    @property
    def periphery(self) -> np.ndarray:
        return self.ranking[self.r_star :]

    @property
    def size(self) -> int:
        return self.r_star

    def is_maximal(self) -> bool:
        """Whether the boundary rank attains the largest ``k_plus``."""
        return bool(self.k_plus[self.r_star - 1] >= self.k_plus.max())


def rich_core(snapshot: GraphSnapshot, direction: str = "out", weighted: bool = True) -> CorePartition:
    """Rich core by the links-to-richer-vertices scan.

    Vertices are ranked by total strength (in + out), ties by vertex id.
    ``k_plus[r]`` is the weight (or the number, when ``weighted`` is false)
    of links between the rank ``r`` vertex and higher-ranked vertices, using
    its out-links, in-links or both. The core is every rank up to the first
    maximum of ``k_plus``.
    """
    if direction not in ("out", "in", "both"):
        raise ValueError("direction must be 'out', 'in' or 'both'")
    n = snapshot.n_vertices
    if n == 0:
        raise ValueError("rich core of an empty graph")
    w = snapshot.weight.astype(np.float64) if weighted else np.ones(snapshot.n_edges)
    strength = np.bincount(snapshot.src, weights=w, minlength=n) + np.bincount(snapshot.dst, weights=w, minlength=n)
    order = np.lexsort((snapshot.vertices, -strength))
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    ps, pd_ = pos[snapshot.src], pos[snapshot.dst]
    k_plus = np.zeros(n)
    if direction in ("out", "both"):
        m = pd_ < ps
        np.add.at(k_plus, ps[m], w[m])
    if direction in ("in", "both"):
        m = ps < pd_
        np.add.at(k_plus, pd_[m], w[m])
    return CorePartition(snapshot.date, snapshot.vertices[order], k_plus, int(np.argmax(k_plus)) + 1)


@dataclass(frozen=True)
class CoreSizeSeries:
    dates: np.ndarray
    sizes: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.sizes.mean())

    @property
    def std(self) -> float:
        return float(self.sizes.std(ddof=1)) if self.sizes.size > 1 else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"date": pd.DatetimeIndex(self.dates), "core_size": self.sizes})


def core_size_series(snapshots: Sequence[GraphSnapshot | CorePartition], **kwargs) -> CoreSizeSeries:
    parts = [s if isinstance(s, CorePartition) else rich_core(s, **kwargs) for s in snapshots if not isinstance(s, GraphSnapshot) or s.n_vertices]
    if not parts:
        raise ValueError("no non-empty snapshots")
    return CoreSizeSeries(np.array([p.date for p in parts], dtype="datetime64[D]"), np.array([p.size for p in parts], dtype=np.int64))


def zscore_events(series: CoreSizeSeries, event_dates) -> pd.DataFrame:
    """Standard score of the core size on each event date (sample std)."""
    sd = series.std
    if not sd > 0:
        raise ValueError("core-size series has zero variance")
    idx = {d: i for i, d in enumerate(series.dates.astype("datetime64[D]"))}
    rows = []
    for d in event_dates:
        day = np.datetime64(pd.Timestamp(d).date(), "D")
        if day not in idx:
            raise KeyError(f"{day} is outside the core-size series")
        v = int(series.sizes[idx[day]])
        rows.append((pd.Timestamp(day), v, (v - series.mean) / sd))
    return pd.DataFrame(rows, columns=["date", "core_size", "z"])


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float
    loc: float
    scale: float


def ks_normal(values, loc: float | None = None, scale: float | None = None) -> KSResult:
    """One-sample Kolmogorov-Smirnov distance to a normal distribution.

    Parameters default to the sample mean and sample standard deviation; the
    p-value is the asymptotic Kolmogorov tail at ``sqrt(n) * D``.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    if n < 8:
        raise ValueError("need at least 8 observations")
    loc = float(x.mean()) if loc is None else float(loc)
    scale = float(x.std(ddof=1)) if scale is None else float(scale)
    if not scale > 0:
        raise ValueError("zero variance")
    cdf = norm.cdf(x, loc=loc, scale=scale)
    i = np.arange(1, n + 1)
    d = float(max((i / n - cdf).max(), (cdf - (i - 1) / n).max()))
    return KSResult(d, float(kolmogorov(np.sqrt(n) * d)), loc, scale)


def core_category_fraction(partition: CorePartition, merchant_category: Mapping[str, int] | pd.Series) -> pd.Series:
    """Share of core vertices per category."""
    cats = pd.Series([merchant_category[v] for v in partition.core])
    return cats.value_counts(normalize=True).sort_index().rename("fraction")


def _skeleton(snapshot: GraphSnapshot) -> sp.csr_matrix:
    n = snapshot.n_vertices
    keep = snapshot.src != snapshot.dst
    a = sp.csr_matrix((np.ones(int(keep.sum())), (snapshot.src[keep], snapshot.dst[keep])), shape=(n, n))
    a = ((a + a.T) > 0).astype(np.float64)
    return a.tocsr()


def kshell(snapshot: GraphSnapshot) -> pd.Series:
    """Shell index of every vertex on the undirected simple skeleton.

    Peels in waves: at level ``k`` every remaining vertex of degree ``<= k``
    is removed (repeatedly) and gets shell ``k``; ``k`` then rises to the
    smallest remaining degree.
    """
    n = snapshot.n_vertices
    A = _skeleton(snapshot)
    deg = np.asarray(A.sum(axis=1)).ravel()
    alive = np.ones(n, dtype=bool)
    shell = np.zeros(n, dtype=np.int64)
    k = 0
    while alive.any():
        k = max(k, int(deg[alive].min()))
        while True:
            drop = alive & (deg <= k)
            if not drop.any():
                break
            shell[drop] = k
            alive[drop] = False
            deg = deg - A @ drop.astype(np.float64)
    return pd.Series(shell, index=pd.Index(snapshot.vertices, name="vertex"), name="shell")


def shell_dynamics(snapshots: Sequence[GraphSnapshot], step: int = 1) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Shell transitions between snapshots ``step`` apart, and in-weight per shell.

    A vertex absent from a snapshot is in shell 0. Returns
    ``(transitions[shell_from, shell_to, count], mass[date, shell, in_weight])``.
    """
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    shells = [kshell(s) for s in snapshots]
    trans = []
    for a, b in zip(shells[:-step], shells[step:]):
        both = a.index.union(b.index)
        fa = a.reindex(both, fill_value=0).to_numpy()
        fb = b.reindex(both, fill_value=0).to_numpy()
        trans.append(pd.DataFrame({"shell_from": fa, "shell_to": fb}))
    t = pd.concat(trans, ignore_index=True)
    counts = t.groupby(["shell_from", "shell_to"]).size().rename("count").reset_index()
    mass = []
    for snap, sh in zip(snapshots, shells):
        inw = snap.in_strength()
        g = pd.Series(inw).groupby(sh.to_numpy()).sum()
        mass.extend((pd.Timestamp(snap.date), int(k), float(v)) for k, v in g.items())
    return counts, pd.DataFrame(mass, columns=["date", "shell", "in_weight"])
