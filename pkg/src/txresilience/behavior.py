"""Per-user mobility Markov chains over merchants and week-over-week nDCG.

A user's chain for a window is built from consecutive purchase pairs; its
stationary vector is folded onto COICOP categories, sorted into a relevance
list, and scored with DCG. The ratio of consecutive DCGs (windows shifted by
one week) measures how much the category profile moved.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from .data import TransactionTable

WINDOW_DAYS = 28
STEP_DAYS = 7


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MobilityChain:
    user_id: str
    states: tuple[str, ...]
    counts: np.ndarray
    transition: np.ndarray
    window_start: np.datetime64
    window_days: int = WINDOW_DAYS

    def __post_init__(self):
        n = len(self.states)
        if n < 1 or self.transition.shape != (n, n):
            raise ValueError("transition matrix must be N x N with N >= 1")


def transition_from_sequence(codes: np.ndarray, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair counts of a state-code sequence and the row-stochastic matrix.

    Rows without an observed outgoing transition become uniform.
    """
    counts = np.zeros((n_states, n_states))
    if codes.size > 1:
        np.add.at(counts, (codes[:-1], codes[1:]), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        trans = np.where(rows > 0, counts / np.where(rows > 0, rows, 1.0), 1.0 / n_states)
    return counts, trans


def _ordered_user_rows(table: TransactionTable, user_id: str) -> pd.DataFrame:
    f = table.frame
    sub = f[f["client_id"] == str(user_id)]
    return sub.sort_values(["timestamp", "merchant_id"], kind="mergesort")


def build_chain(table: TransactionTable, user_id: str, window_start, window_days: int = WINDOW_DAYS) -> MobilityChain | None:
    """Chain of one user's purchases in ``[window_start, window_start + window_days)``.

    Returns ``None`` when the user has fewer than two purchases there.
    """
    start = np.datetime64(pd.Timestamp(window_start).date(), "D")
    sub = _ordered_user_rows(table, user_id)
    days = sub["timestamp"].to_numpy().astype("datetime64[D]")
    sub = sub[(days >= start) & (days < start + np.timedelta64(window_days, "D"))]
    if len(sub) < 2:
        return None
    states, codes = np.unique(sub["merchant_id"].to_numpy(), return_inverse=True)
    counts, trans = transition_from_sequence(codes, len(states))
    return MobilityChain(str(user_id), tuple(states), counts, trans, start, window_days)


def stationary(chain_or_matrix, tol: float = 1e-10, max_doublings: int = 64) -> np.ndarray:
    """Stationary vector by power iteration.

    Iterates the lazy chain ``(I + T) / 2`` (same fixed points, aperiodic, so
    the iteration also converges on periodic chains) and squares the
    iteration matrix each round, so round ``r`` has applied ``2**r`` steps.
    Stops once ``max |pi T - pi| <= tol``.
    """
    T = chain_or_matrix.transition if isinstance(chain_or_matrix, MobilityChain) else np.asarray(chain_or_matrix, dtype=np.float64)
    n = T.shape[0]
    if n == 1:
        return np.ones(1)
    P = 0.5 * (np.eye(n) + T)
    v = np.full(n, 1.0 / n)
    residual = np.inf
    for _ in range(max_doublings):
        residual = np.abs(v @ T - v).max()
        if residual <= tol:
            return v
        v = v @ P
        v = v / v.sum()
        P = P @ P
    residual = np.abs(v @ T - v).max()
    if residual <= tol:
        return v
    raise NonConvergenceError(f"stationary vector did not converge: residual {residual:.3e} after 2**{max_doublings} steps")


@dataclass(frozen=True)
class RelevanceList:
    categories: tuple[int, ...]
    masses: np.ndarray


def category_relevance(pi, states, merchant_category: Mapping[str, int] | pd.Series) -> RelevanceList:
    """Merge stationary mass per category, sorted by decreasing mass."""
    pi = np.asarray(pi, dtype=np.float64)
    cats = []
    for s in states:
        try:
            cats.append(int(merchant_category[s]))
        except KeyError:
            raise KeyError(f"merchant {s!r} has no category") from None
    cats = np.asarray(cats)
    uniq, inv = np.unique(cats, return_inverse=True)
    mass = np.bincount(inv, weights=pi, minlength=uniq.size)
    order = np.lexsort((uniq, -mass))
    return RelevanceList(tuple(int(c) for c in uniq[order]), mass[order])


def dcg(rel) -> float:
    rel = rel.masses if isinstance(rel, RelevanceList) else np.asarray(rel, dtype=np.float64)
    i = np.arange(1, rel.size + 1)
    return float(np.sum((np.exp2(rel) - 1.0) / np.log2(i + 1)))


def ndcg(dcg_now: float, dcg_prev: float) -> float:
    """Ratio of consecutive DCGs; NaN when the earlier one is zero."""
    if dcg_prev <= 0 or not np.isfinite(dcg_prev):
        return float("nan")
    return float(dcg_now / dcg_prev)


def window_starts(first_day, last_day, window_days: int = WINDOW_DAYS, step_days: int = STEP_DAYS) -> list[np.datetime64]:
    """Starts of every full window inside ``[first_day, last_day]``."""
    first = np.datetime64(pd.Timestamp(first_day).date(), "D")
    last = np.datetime64(pd.Timestamp(last_day).date(), "D")
    out = []
    s = first
    while s + np.timedelta64(window_days - 1, "D") <= last:
        out.append(s)
        s = s + np.timedelta64(step_days, "D")
    return out


def iter_windows(first_day, last_day, window_days: int = WINDOW_DAYS, step_days: int = STEP_DAYS) -> Iterator[tuple[np.datetime64, np.datetime64]]:
    for s in window_starts(first_day, last_day, window_days, step_days):
        yield s, s + np.timedelta64(window_days, "D")


def hash_id(user_id: str) -> str:
    return hashlib.sha256(str(user_id).encode("utf-8")).hexdigest()[:16]


def user_behavior(table: TransactionTable, window_days: int = WINDOW_DAYS, step_days: int = STEP_DAYS, tol: float = 1e-10) -> pd.DataFrame:
    """DCG and nDCG per (user, window).

    Columns: client_id, district_id, window_start, week_end, n_tx, n_states,
    dcg, ndcg, residual. ``week_end`` is the exclusive end of the window, so
    the value at ``week_end`` reflects the week just added. Windows with
    fewer than two purchases are absent; ``ndcg`` is NaN when the previous
    window is absent.
    """
    f = table.frame
    first, last = table.date_range
    starts = window_starts(first, last, window_days, step_days)
    if not starts:
        return pd.DataFrame(columns=["client_id", "district_id", "window_start", "week_end", "n_tx", "n_states", "dcg", "ndcg", "residual"])
    starts_i = np.array([s.astype("int64") for s in starts])

    client_codes, client_names = pd.factorize(f["client_id"], sort=True)
    merch_codes, merch_names = pd.factorize(f["merchant_id"], sort=True)
    mcat = table.merchant_categories().reindex(merch_names).to_numpy()
    day = table.days.astype("int64")
    ts = f["timestamp"].to_numpy().astype("int64")
    order = np.lexsort((merch_codes, ts, client_codes))
    client_codes, merch_codes, day = client_codes[order], merch_codes[order], day[order]
    district = f["district_id"].to_numpy()[order]

    bounds = np.flatnonzero(np.diff(client_codes)) + 1
    seg_start = np.concatenate([[0], bounds])
    seg_end = np.concatenate([bounds, [client_codes.size]])

    rows = []
    for a, b in zip(seg_start, seg_end):
        uday = day[a:b]
        umer = merch_codes[a:b]
        uid = client_names[client_codes[a]]
        udist = pd.Series(district[a:b]).mode().iloc[0]
        lo = np.searchsorted(uday, starts_i, side="left")
        hi = np.searchsorted(uday, starts_i + window_days, side="left")
        prev_dcg = np.nan
        for s, l, h in zip(starts_i, lo, hi):
            n_tx = h - l
            if n_tx < 2:
                prev_dcg = np.nan
                continue
            seq = umer[l:h]
            states, codes = np.unique(seq, return_inverse=True)
            if states.size == 1:
                pi = np.ones(1)
                residual = 0.0
                masses = np.ones(1)
            else:
                _, T = transition_from_sequence(codes, states.size)
                pi = stationary(T, tol=tol)
                residual = float(np.abs(pi @ T - pi).max())
                cats = mcat[states]
                uc, inv = np.unique(cats, return_inverse=True)
                masses = np.sort(np.bincount(inv, weights=pi, minlength=uc.size))[::-1]
            g = float(np.sum((np.exp2(masses) - 1.0) / np.log2(np.arange(2, masses.size + 2))))
            rows.append((uid, udist, s, s + window_days, n_tx, states.size, g, g / prev_dcg if prev_dcg > 0 else np.nan, residual))
            prev_dcg = g
    out = pd.DataFrame(rows, columns=["client_id", "district_id", "window_start", "week_end", "n_tx", "n_states", "dcg", "ndcg", "residual"])
    for col in ("window_start", "week_end"):
        out[col] = out[col].to_numpy().astype("datetime64[D]")
    return out


def mean_ndcg(user_frame: pd.DataFrame) -> pd.DataFrame:
    """District mean of per-user nDCG per week; users with undefined values are skipped."""
    valid = user_frame.dropna(subset=["ndcg"])
    grouped = valid.groupby(["district_id", "week_end"])["ndcg"]
    out = grouped.agg(mean_ndcg="mean", n_users="size").reset_index()
    return out.sort_values(["district_id", "week_end"]).reset_index(drop=True)
