"""1d-SAX symbolization of trajectories and k-means clustering of the words.

Each segment of a standardized series is summarized by its least-squares
line. The line's mean is quantized against standard-normal quantiles and its
slope against quantiles of a zero-mean normal with variance ``0.03 / L``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score
from sklearn.utils.validation import check_is_fitted

DEFAULT_K_RANGE = tuple(range(2, 11))
DEFAULT_L_RANGE = (5, 10, 15, 20, 30)


def standardize(series) -> np.ndarray:
    """Zero mean and unit (population) variance; missing values are filled
    forward, leading gaps from the first observation."""
    x = pd.Series(np.asarray(series, dtype=np.float64)).ffill().bfill().to_numpy()
    if x.size < 2:
        raise ValueError("need at least two points to standardize")
    if np.isnan(x).all():
        raise ValueError("series has no observations")
    sd = x.std()
    if sd <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("cannot standardize a constant series")
    return (x - x.mean()) / sd


@dataclass(frozen=True)
class SaxConfig:
    segment_length: int = 15
    alphabet_size: int = 8
    mean_levels: int = 4
    slope_levels: int = 2
    slope_variance: float | None = None

    def __post_init__(self):
        if self.segment_length < 2:
            raise ValueError("segment_length must be >= 2")
        if self.mean_levels < 1 or self.slope_levels < 1:
            raise ValueError("level counts must be positive")
        if self.mean_levels * self.slope_levels != self.alphabet_size:
            raise ValueError("alphabet_size must equal mean_levels * slope_levels")

    @property
    def mean_breakpoints(self) -> np.ndarray:
        return norm.ppf(np.arange(1, self.mean_levels) / self.mean_levels)

    @property
    def slope_breakpoints(self) -> np.ndarray:
        var = self.slope_variance if self.slope_variance is not None else 0.03 / self.segment_length
        return norm.ppf(np.arange(1, self.slope_levels) / self.slope_levels, scale=np.sqrt(var))


@dataclass(frozen=True)
class SaxWord:
    mean_level: np.ndarray
    slope_level: np.ndarray
    short_tail: bool

    def __len__(self) -> int:
        return int(self.mean_level.size)


def segment_regression(X, segment_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment least-squares mean and slope for each row of ``X``.

    The last segment may be shorter; a one-point segment has slope 0.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, T = X.shape
    n_seg = -(-T // segment_length)
    pad = n_seg * segment_length - T
    Xp = np.concatenate([X, np.zeros((n, pad))], axis=1).reshape(n, n_seg, segment_length)
    valid = np.ones(n_seg * segment_length, dtype=bool)
    if pad:
        valid[T:] = False
    valid = valid.reshape(n_seg, segment_length)
    cnt = valid.sum(axis=1)
    t = np.broadcast_to(np.arange(segment_length, dtype=np.float64), valid.shape)
    tbar = (t * valid).sum(axis=1) / cnt
    tc = np.where(valid, t - tbar[:, None], 0.0)
    sxx = (tc**2).sum(axis=1)
    means = (Xp * valid).sum(axis=2) / cnt
    with np.errstate(invalid="ignore", divide="ignore"):
        slopes = np.where(sxx > 0, (Xp * tc).sum(axis=2) / np.where(sxx > 0, sxx, 1.0), 0.0)
    return means, slopes


def _quantize(values: np.ndarray, breakpoints: np.ndarray) -> np.ndarray:
    return np.searchsorted(breakpoints, values, side="right").astype(np.int64)


def sax_levels(X, config: SaxConfig = SaxConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Mean and slope levels, each of shape (n_series, n_segments)."""
    means, slopes = segment_regression(X, config.segment_length)
    return _quantize(means, config.mean_breakpoints), _quantize(slopes, config.slope_breakpoints)


def sax_encode(series, config: SaxConfig = SaxConfig()) -> SaxWord:
    x = np.asarray(series, dtype=np.float64)
    m, s = sax_levels(x[None, :], config)
    return SaxWord(m[0], s[0], short_tail=bool(x.size % config.segment_length))


def symbols(word: SaxWord, config: SaxConfig = SaxConfig()) -> np.ndarray:
    """Single-integer symbols ``mean_level * slope_levels + slope_level``."""
    return word.mean_level * config.slope_levels + word.slope_level


def embed(X, config: SaxConfig = SaxConfig()) -> np.ndarray:
    """Numeric embedding: per segment the (mean level, slope level) pair."""
    m, s = sax_levels(X, config)
    return np.stack([m, s], axis=2).reshape(m.shape[0], -1).astype(np.float64)


class OneDSAX(TransformerMixin, BaseEstimator):
    """Transformer from standardized series (rows) to the 1d-SAX embedding."""

    def __init__(self, segment_length=15, alphabet_size=8, mean_levels=4, slope_variance=None):
        self.segment_length = segment_length
        self.alphabet_size = alphabet_size
        self.mean_levels = mean_levels
        self.slope_variance = slope_variance

    def _config(self) -> SaxConfig:
        if self.alphabet_size % self.mean_levels:
            raise ValueError("alphabet_size must be a multiple of mean_levels")
        return SaxConfig(self.segment_length, self.alphabet_size, self.mean_levels, self.alphabet_size // self.mean_levels, self.slope_variance)

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.config_ = self._config()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected series of length {self.n_features_in_}, got {X.shape[1]}")
        return embed(X, self.config_)


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def cluster(embedding, k: int = 6, seed: int = 0, n_init: int = 10) -> ClusterModel:
    """k-means (k-means++ seeding, Euclidean) on a word embedding."""
    Z = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > Z.shape[0]:
        raise ValueError(f"k={k} exceeds the number of series ({Z.shape[0]})")
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit(Z)
    return ClusterModel(km.cluster_centers_, km.labels_.astype(np.int64), float(km.inertia_))


def silhouette_grid(series, k_range: Iterable[int] = DEFAULT_K_RANGE, L_range: Iterable[int] = DEFAULT_L_RANGE, seed: int = 0, mean_levels: int = 4, alphabet_size: int = 8) -> tuple[pd.DataFrame, tuple[int, int]]:
    """Mean silhouette for every (k, L); NaN where it is undefined.

    ``series`` holds standardized trajectories as rows. Returns the grid and
    the (k, L) of its maximum.
    """
    X = np.atleast_2d(np.asarray(series, dtype=np.float64))
    k_range, L_range = list(k_range), list(L_range)
    if not k_range or not L_range:
        raise ValueError("k_range and L_range must be non-empty")
    rows = []
    for L in L_range:
        Z = embed(X, SaxConfig(L, alphabet_size, mean_levels, alphabet_size // mean_levels))
        for k in k_range:
            score = np.nan
            if 2 <= k < Z.shape[0]:
                labels = cluster(Z, k, seed).labels
                if 1 < np.unique(labels).size < Z.shape[0]:
                    score = float(silhouette_score(Z, labels))
            rows.append((k, L, score))
    grid = pd.DataFrame(rows, columns=["k", "L", "silhouette"])
    if grid["silhouette"].notna().any():
        best = grid.loc[grid["silhouette"].idxmax()]
        arg = (int(best["k"]), int(best["L"]))
    else:
        arg = (None, None)
    return grid, arg


def composition(labels: Mapping[str, int] | pd.Series, metadata: Mapping[str, object] | pd.Series) -> tuple[pd.DataFrame, int]:
    """Category make-up of each cluster against the whole clustered set.

    Returns a table with columns cluster, category, n, proportion,
    dataset_proportion, relative_difference, and the number of clustered
    merchants dropped for lack of metadata.
    """
    lab = pd.Series(labels)
    meta = pd.Series(metadata)
    known = lab.index.isin(meta.index)
    n_missing = int((~known).sum())
    lab = lab[known]
    frame = pd.DataFrame({"cluster": lab.to_numpy(), "category": meta.reindex(lab.index).to_numpy()})
    if frame.empty:
        return pd.DataFrame(columns=["cluster", "category", "n", "proportion", "dataset_proportion", "relative_difference"]), n_missing
    counts = frame.groupby(["cluster", "category"]).size().unstack(fill_value=0)
    prop = counts.div(counts.sum(axis=1), axis=0)
    total = counts.sum(axis=0)
    base = total / total.sum()
    rel = (prop - base) / base
    out = pd.DataFrame(
        {
            "n": counts.stack(),
            "proportion": prop.stack(),
            "dataset_proportion": pd.DataFrame(np.broadcast_to(base.to_numpy(), prop.shape), index=prop.index, columns=prop.columns).stack(),
            "relative_difference": rel.stack(),
        }
    ).reset_index()
    return out.sort_values(["cluster", "category"], kind="mergesort").reset_index(drop=True), n_missing


def prepare_trajectories(panel: pd.DataFrame, min_presence: float = 0.5) -> tuple[np.ndarray, list[str], dict[str, int]]:
    """Standardized rows for every merchant column of a (date x merchant) panel.

    Merchants present in fewer than ``min_presence`` of the dates, or
    constant after filling, are left out; the counts are returned.
    """
    presence = panel.notna().mean(axis=0)
    sparse = presence < min_presence
    kept = panel.loc[:, ~sparse]
    rows, ids, constant = [], [], 0
    for m in kept.columns:
        try:
            rows.append(standardize(kept[m].to_numpy()))
            ids.append(str(m))
        except ValueError:
            constant += 1
    X = np.vstack(rows) if rows else np.zeros((0, len(panel.index)))
    return X, ids, {"sparse": int(sparse.sum()), "constant": constant}


class TrajectoryClusterer(ClusterMixin, BaseEstimator):
    """Standardize, encode and cluster the columns of a rank panel."""

    def __init__(self, n_clusters=6, segment_length=15, alphabet_size=8, mean_levels=4, min_presence=0.5, seed=0, n_init=10):
        self.n_clusters = n_clusters
        self.segment_length = segment_length
        self.alphabet_size = alphabet_size
        self.mean_levels = mean_levels
        self.min_presence = min_presence
        self.seed = seed
        self.n_init = n_init

    def fit(self, panel: pd.DataFrame, y=None):
        X, ids, dropped = prepare_trajectories(panel, self.min_presence)
        self.encoder_ = OneDSAX(self.segment_length, self.alphabet_size, self.mean_levels).fit(X)
        self.embedding_ = self.encoder_.transform(X)
        self.model_ = cluster(self.embedding_, self.n_clusters, self.seed, self.n_init)
        self.merchants_ = ids
        self.labels_ = self.model_.labels
        self.dropped_ = dropped
        return self

    def assignments(self) -> pd.DataFrame:
        check_is_fitted(self, "model_")
        return pd.DataFrame({"merchant_id": self.merchants_, "cluster": self.labels_})

    def centroid_profiles(self) -> pd.DataFrame:
        check_is_fitted(self, "model_")
        c = self.model_.centroids.reshape(self.model_.k, -1, 2)
        k, s = np.meshgrid(np.arange(c.shape[0]), np.arange(c.shape[1]), indexing="ij")
        return pd.DataFrame({"cluster": k.ravel(), "segment": s.ravel(), "mean_level": c[:, :, 0].ravel(), "slope_level": c[:, :, 1].ravel()})
