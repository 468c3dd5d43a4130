"""Kullback-Leibler shock detection over expenditure share vectors.

Two daily series per district:

* D1 compares the district's ``w``-day share window starting at day ``j``
  with the average share vector of the whole dataset.
* D2 averages the divergence between the district's shares on day ``j`` and
  each of its ``w`` immediately preceding days.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .data import SharePanel, ShareVector

DEFAULT_EPSILON = 1e-9


class StrictSupportError(ValueError):
    """Q has a zero where P has mass and smoothing is disabled."""


def _as_dist(x) -> np.ndarray:
    if isinstance(x, ShareVector):
        return x.shares
    return np.asarray(x, dtype=np.float64)


def smooth(q: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Additive smoothing along the last axis followed by renormalisation."""
    q = q + epsilon
    return q / q.sum(axis=-1, keepdims=True)


def kld_rows(p: np.ndarray, q: np.ndarray, epsilon: float = DEFAULT_EPSILON, strict: bool = False) -> np.ndarray:
    """Row-wise KLD in bits along the last axis; inputs broadcast."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    if strict:
        if np.any((q <= 0) & (p > 0)):
            raise StrictSupportError("Q(k) = 0 where P(k) > 0")
    elif epsilon > 0:
        q = smooth(q, epsilon)
    pos = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * np.log2(np.where(pos, p, 1.0) / np.where(pos, q, 1.0)), 0.0)
    return terms.sum(axis=-1)


def kld(p, q, epsilon: float = DEFAULT_EPSILON, strict: bool = False) -> float:
    """KLD(P || Q) in bits, with ``0 log 0 = 0``."""
    p, q = _as_dist(p), _as_dist(q)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(kld_rows(p, q, epsilon=epsilon, strict=strict))


@dataclass(frozen=True)
class DivergenceSeries:
    district_id: str
    dates: np.ndarray
    values: np.ndarray
    kind: str
    window_w: int

    def __post_init__(self):
        if len(self.dates) != len(self.values):
            raise ValueError("dates and values differ in length")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates.astype("int64")) > 0):
            raise ValueError("dates must be strictly increasing")

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=pd.DatetimeIndex(self.dates), name=self.district_id)


def d1_matrix(panel: SharePanel, w: int = 7, reference=None, epsilon: float = DEFAULT_EPSILON, strict: bool = False):
    """D1 for every district; NaN where the window is empty.

    Returns ``(values, dates)`` with ``values`` of shape (D, n_windows) and
    ``dates`` the window start days.
    """
    shares, empty = panel.window_shares(w)
    ref = panel.country_reference() if reference is None else _as_dist(reference)
    if ref.shape != (shares.shape[-1],):
        raise ValueError("reference dimension mismatch")
    values = kld_rows(shares, ref, epsilon=epsilon, strict=strict)
    values[empty] = np.nan
    return values, panel.dates[: values.shape[1]]


def d2_matrix(panel: SharePanel, w: int = 7, share_window: int = 1, epsilon: float = DEFAULT_EPSILON, strict: bool = False):
    """D2 for every district; NaN where the day is empty or lacks history.

    The reference days for day ``j`` are ``j - w .. j - 1``; empty reference
    days are left out of the average.
    """
    if w < 1:
        raise ValueError("w must be >= 1")
    shares, empty = panel.window_shares(share_window)
    n_dist, n_win, _ = shares.shape
    acc = np.zeros((n_dist, n_win))
    cnt = np.zeros((n_dist, n_win))
    for lag in range(1, w + 1):
        if lag >= n_win:
            break
        cur, ref = shares[:, lag:], shares[:, :-lag]
        ok = ~empty[:, lag:] & ~empty[:, :-lag]
        vals = np.zeros(cur.shape[:2])
        if ok.any():
            vals[ok] = kld_rows(cur[ok], ref[ok], epsilon=epsilon, strict=strict)
        acc[:, lag:] += vals
        cnt[:, lag:] += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        values = acc / cnt
    values[:, :w] = np.nan
    values[empty | (cnt == 0)] = np.nan
    return values, panel.dates[:n_win]


def _series_from_row(district_id, dates, row, kind, w) -> DivergenceSeries:
    keep = ~np.isnan(row)
    return DivergenceSeries(str(district_id), dates[keep], row[keep], kind, w)


def d1_series(panel: SharePanel, district_id: str, w: int = 7, reference=None, epsilon: float = DEFAULT_EPSILON, strict: bool = False) -> DivergenceSeries:
    d = panel.district_index(district_id)
    values, dates = d1_matrix(panel, w, reference=reference, epsilon=epsilon, strict=strict)
    return _series_from_row(district_id, dates, values[d], "d1", w)


def d2_series(panel: SharePanel, district_id: str, w: int = 7, share_window: int = 1, epsilon: float = DEFAULT_EPSILON, strict: bool = False) -> DivergenceSeries:
    d = panel.district_index(district_id)
    values, dates = d2_matrix(panel, w, share_window=share_window, epsilon=epsilon, strict=strict)
    return _series_from_row(district_id, dates, values[d], "d2", w)


@dataclass(frozen=True)
class QuantilePanel:
    dates: np.ndarray
    mean: np.ndarray
    q25: np.ndarray
    q50: np.ndarray
    q75: np.ndarray
    n_districts: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "date": pd.DatetimeIndex(self.dates),
                "mean": self.mean,
                "q25": self.q25,
                "q50": self.q50,
                "q75": self.q75,
                "n_districts": self.n_districts,
            }
        )


def divergence_panel(series: Sequence[DivergenceSeries], min_districts: int = 4) -> QuantilePanel:
    """Per-date mean and quartiles across districts (linear interpolation)."""
    series = [s for s in series if len(s.values)]
    if not series:
        raise ValueError("no districts with a non-empty series")
    if len(series) < min_districts:
        raise ValueError(f"need at least {min_districts} districts, got {len(series)}")
    frame = pd.concat([s.to_series() for s in series], axis=1)
    values = frame.to_numpy()
    keep = ~np.all(np.isnan(values), axis=1)
    values = values[keep]
    q25, q50, q75 = np.nanpercentile(values, [25, 50, 75], axis=1, method="linear")
    return QuantilePanel(
        dates=frame.index.to_numpy()[keep].astype("datetime64[D]"),
        mean=np.nanmean(values, axis=1),
        q25=q25,
        q50=q50,
        q75=q75,
        n_districts=(~np.isnan(values)).sum(axis=1),
    )


class DivergenceDetector(TransformerMixin, BaseEstimator):
    """Turn a :class:`SharePanel` into long-format divergence series.

    Parameters
    ----------
    kind : {'d1', 'd2'}
    w : int
        Window length for D1, number of reference days for D2.
    epsilon : float
        Additive smoothing applied to the reference distribution.
    strict : bool
        Disable smoothing and raise on unsupported mass instead.
    share_window : int
        Length in days of the share vectors compared by D2.
    """

    def __init__(self, kind="d1", w=7, epsilon=DEFAULT_EPSILON, strict=False, share_window=1):
        self.kind = kind
        self.w = w
        self.epsilon = epsilon
        self.strict = strict
        self.share_window = share_window

    def fit(self, panel: SharePanel, y=None):
        if self.kind not in ("d1", "d2"):
            raise ValueError(f"kind must be 'd1' or 'd2', got {self.kind!r}")
        if self.w < 1:
            raise ValueError("w must be >= 1")
        self.reference_ = panel.country_reference()
        self.districts_ = panel.districts
        return self

    def matrix(self, panel: SharePanel):
        if self.kind == "d1":
            return d1_matrix(panel, self.w, reference=self.reference_, epsilon=self.epsilon, strict=self.strict)
        return d2_matrix(panel, self.w, share_window=self.share_window, epsilon=self.epsilon, strict=self.strict)

    def series(self, panel: SharePanel) -> list[DivergenceSeries]:
        values, dates = self.matrix(panel)
        return [_series_from_row(d, dates, values[i], self.kind, self.w) for i, d in enumerate(panel.districts)]

    def transform(self, panel: SharePanel) -> pd.DataFrame:
        rows = []
        for s in self.series(panel):
            rows.append(
                pd.DataFrame(
                    {
                        "date": pd.DatetimeIndex(s.dates),
                        "district_id": s.district_id,
                        "kind": s.kind,
                        "value": s.values,
                    }
                )
            )
        if not rows:
            return pd.DataFrame(columns=["date", "district_id", "kind", "value"])
        return pd.concat(rows, ignore_index=True)

