"""Transaction ingestion, expenditure share vectors and AMP demographics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .coicop import N_CATEGORIES, MccMapping, default_mapping

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("client_id", "merchant_id", "date", "amount", "mcc", "district_id")
OPTIONAL_COLUMNS = ("region_id",)
TABLE_COLUMNS = (
    "client_id",
    "merchant_id",
    "timestamp",
    "amount",
    "mcc",
    "district_id",
    "region_id",
    "coicop",
)


class SchemaError(ValueError):
    """Input lacks a mandatory column."""


class UnknownDistrictError(KeyError):
    pass


def _as_day(value) -> np.datetime64:
    return np.datetime64(pd.Timestamp(value).date(), "D")


@dataclass(frozen=True)
class TransactionTable:
    """Validated transactions, one row per card purchase.

    ``frame`` holds the columns in ``TABLE_COLUMNS``. Rows are kept in a
    canonical order (timestamp, client, merchant) so every consumer sees
    the same sequence.
    """

    frame: pd.DataFrame

    def __post_init__(self):
        missing = [c for c in TABLE_COLUMNS if c not in self.frame.columns]
        if missing:
            raise SchemaError(f"transaction frame missing columns {missing}")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, mapping: MccMapping | None = None) -> "TransactionTable":
        frame = frame.copy()
        if "coicop" not in frame.columns:
            mapping = mapping if mapping is not None else default_mapping()
            frame["coicop"] = mapping.map_array(frame["mcc"].to_numpy())
        if "region_id" not in frame.columns:
            frame["region_id"] = ""
        frame = frame.loc[:, list(TABLE_COLUMNS)]
        frame["timestamp"] = pd.to_datetime(frame["timestamp"])
        frame["amount"] = frame["amount"].astype(np.float64)
        frame["mcc"] = frame["mcc"].astype(np.int16)
        frame["coicop"] = frame["coicop"].astype(np.int8)
        for col in ("client_id", "merchant_id", "district_id", "region_id"):
            frame[col] = frame[col].astype(str)
        frame = frame.sort_values(["timestamp", "client_id", "merchant_id"], kind="mergesort")
        return cls(frame.reset_index(drop=True))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def days(self) -> np.ndarray:
        return self.frame["timestamp"].to_numpy().astype("datetime64[D]")

    @property
    def districts(self) -> list[str]:
        return sorted(self.frame["district_id"].unique())

    @property
    def date_range(self) -> tuple[np.datetime64, np.datetime64]:
        d = self.days
        return d.min(), d.max()

    def merchant_categories(self) -> pd.Series:
        """Merchant -> COICOP code (most frequent code if a merchant has several MCCs)."""
        f = self.frame
        counts = f.groupby(["merchant_id", "coicop"]).size().rename("n").reset_index()
        counts = counts.sort_values(["merchant_id", "n", "coicop"], ascending=[True, False, True])
        return counts.drop_duplicates("merchant_id").set_index("merchant_id")["coicop"].astype(int)

    def merchant_districts(self) -> pd.Series:
        f = self.frame
        counts = f.groupby(["merchant_id", "district_id"]).size().rename("n").reset_index()
        counts = counts.sort_values(["merchant_id", "n", "district_id"], ascending=[True, False, True])
        return counts.drop_duplicates("merchant_id").set_index("merchant_id")["district_id"]

    def to_csv_frame(self) -> pd.DataFrame:
        """Frame in the external delimited-text layout."""
        f = self.frame
        ts = f["timestamp"]
        has_time = bool((ts != ts.dt.normalize()).any())
        date = ts.dt.strftime("%Y-%m-%dT%H:%M:%S" if has_time else "%Y-%m-%d")
        return pd.DataFrame(
            {
                "client_id": f["client_id"],
                "merchant_id": f["merchant_id"],
                "date": date,
                "amount": f["amount"].map(lambda a: f"{a:.2f}"),
                "mcc": f["mcc"].map(lambda m: f"{m:04d}"),
                "district_id": f["district_id"],
                "region_id": f["region_id"],
            }
        )


@dataclass(frozen=True)
class IngestResult:
    table: TransactionTable
    rejects: pd.DataFrame  # columns: line, reason
    n_read: int

    @property
    def n_rejected(self) -> int:
        return len(self.rejects)


def _read_source(source) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        return source.astype(str).copy()
    if isinstance(source, (str, Path)) or hasattr(source, "read"):
        return pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True)
    return pd.DataFrame.from_records(list(source)).astype(str)


def ingest_transactions(
    source,
    schema: Mapping[str, str] | None = None,
    mapping: MccMapping | None = None,
    date_range: tuple | None = None,
) -> IngestResult:
    """Validate raw transaction rows into a :class:`TransactionTable`.

    ``source`` may be a CSV path, an open text stream, a DataFrame or an
    iterable of dict records. ``schema`` maps canonical column names to the
    names used by the source. Bad rows are not dropped silently: each one
    is reported in ``rejects`` with its line number (header is line 1).
    """
    raw = _read_source(source)
    if schema:
        raw = raw.rename(columns={v: k for k, v in schema.items()})
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")

    n = len(raw)
    lines = np.arange(n) + 2
    reasons = pd.Series("", index=raw.index, dtype=object)

    def flag(mask, reason):
        mask = mask & (reasons == "")
        reasons[mask] = reason

    ts = pd.to_datetime(raw["date"].str.strip(), errors="coerce", format="ISO8601")
    flag(ts.isna(), "unparseable timestamp")
    amount = pd.to_numeric(raw["amount"].str.strip(), errors="coerce")
    flag(amount.isna() | ~np.isfinite(amount.fillna(0.0)), "unparseable amount")
    flag(amount < 0, "negative amount")
    mcc_text = raw["mcc"].str.strip()
    flag(~mcc_text.str.fullmatch(r"\d{1,4}"), "bad mcc")
    for col in ("client_id", "merchant_id", "district_id"):
        flag(raw[col].str.strip() == "", f"empty {col}")
    if date_range is not None:
        lo, hi = (pd.Timestamp(d) for d in date_range)
        hi_excl = hi.normalize() + pd.Timedelta(days=1)
        flag((ts < lo) | (ts >= hi_excl), "timestamp outside date range")

    ok = (reasons == "").to_numpy()
    frame = pd.DataFrame(
        {
            "client_id": raw["client_id"].str.strip()[ok],
            "merchant_id": raw["merchant_id"].str.strip()[ok],
            "timestamp": ts[ok],
            "amount": amount[ok],
            "mcc": mcc_text[ok].astype(int),
            "district_id": raw["district_id"].str.strip()[ok],
            "region_id": (raw["region_id"].str.strip()[ok] if "region_id" in raw.columns else ""),
        }
    )
    rejects = pd.DataFrame({"line": lines[~ok], "reason": reasons.to_numpy()[~ok]})
    if len(rejects):
        logger.warning("rejected %d of %d rows", len(rejects), n)
    table = TransactionTable.from_frame(frame, mapping=mapping)
    return IngestResult(table=table, rejects=rejects.reset_index(drop=True), n_read=n)


# ---------------------------------------------------------------------------
# share vectors


@dataclass(frozen=True)
class ShareVector:
    district_id: str
    window_start: np.datetime64
    window_length_days: int
    shares: np.ndarray
    empty: bool = False
    total: float = 0.0

    def __post_init__(self):
        if self.shares.shape != (N_CATEGORIES,):
            raise ValueError(f"share vector must have {N_CATEGORIES} components")
        if self.window_length_days < 1:
            raise ValueError("window length must be >= 1 day")


def _weights(frame: pd.DataFrame, weight: str) -> np.ndarray:
    if weight == "amount":
        return frame["amount"].to_numpy(np.float64)
    if weight == "count":
        return np.ones(len(frame))
    raise ValueError(f"weight must be 'amount' or 'count', got {weight!r}")


def share_vector(table: TransactionTable, district_id: str, window_start, w: int, weight: str = "amount") -> ShareVector:
    """Expenditure shares over the 15 categories for one district and the
    half-open day window ``[window_start, window_start + w)``."""
    if w < 1:
        raise ValueError("w must be >= 1 day")
    f = table.frame
    in_district = (f["district_id"] == str(district_id)).to_numpy()
    if not in_district.any():
        raise UnknownDistrictError(district_id)
    start = _as_day(window_start)
    days = table.days
    sel = in_district & (days >= start) & (days < start + np.timedelta64(w, "D"))
    sums = np.bincount(
        f["coicop"].to_numpy()[sel].astype(np.int64) - 1,
        weights=_weights(f, weight)[sel],
        minlength=N_CATEGORIES,
    )
    total = float(sums.sum())
    if total <= 0:
        return ShareVector(str(district_id), start, w, np.zeros(N_CATEGORIES), empty=True, total=0.0)
    return ShareVector(str(district_id), start, w, sums / total, empty=False, total=total)


@dataclass(frozen=True)
class SharePanel:
    """Daily per-district, per-category expenditure mass.

    ``mass[d, t, k]`` is the total weight spent in district ``districts[d]``
    on day ``start + t`` in category ``k + 1``.
    """

    districts: tuple[str, ...]
    start: np.datetime64
    mass: np.ndarray
    weight: str = "amount"

    @classmethod
    def from_table(cls, table: TransactionTable, weight: str = "amount", start=None, end=None) -> "SharePanel":
        f = table.frame
        days = table.days
        start = days.min() if start is None else _as_day(start)
        end = days.max() if end is None else _as_day(end)
        n_days = int((end - start) / np.timedelta64(1, "D")) + 1
        districts = tuple(table.districts)
        d_index = pd.Index(districts).get_indexer(f["district_id"])
        t_index = ((days - start) / np.timedelta64(1, "D")).astype(np.int64)
        keep = (t_index >= 0) & (t_index < n_days)
        k_index = f["coicop"].to_numpy().astype(np.int64) - 1
        flat = (d_index[keep] * n_days + t_index[keep]) * N_CATEGORIES + k_index[keep]
        mass = np.bincount(
            flat,
            weights=_weights(f, weight)[keep],
            minlength=len(districts) * n_days * N_CATEGORIES,
        ).reshape(len(districts), n_days, N_CATEGORIES)
        return cls(districts, start, mass, weight)

    @property
    def n_days(self) -> int:
        return self.mass.shape[1]

    @property
    def dates(self) -> np.ndarray:
        return self.start + np.arange(self.n_days).astype("timedelta64[D]")

    def district_index(self, district_id: str) -> int:
        try:
            return self.districts.index(str(district_id))
        except ValueError:
            raise UnknownDistrictError(district_id) from None

    def window_mass(self, w: int) -> np.ndarray:
        """Mass summed over every ``w``-day window; shape (D, n_days - w + 1, K)."""
        if w < 1:
            raise ValueError("w must be >= 1 day")
        csum = np.concatenate([np.zeros_like(self.mass[:, :1]), np.cumsum(self.mass, axis=1)], axis=1)
        return csum[:, w:] - csum[:, :-w]

    def window_shares(self, w: int) -> tuple[np.ndarray, np.ndarray]:
        """Shares per (district, window start) and the flagged-empty mask."""
        wm = self.window_mass(w)
        totals = wm.sum(axis=2)
        empty = totals <= 0
        with np.errstate(invalid="ignore", divide="ignore"):
            shares = np.where(empty[..., None], 0.0, wm / np.where(empty, 1.0, totals)[..., None])
        return shares, empty

    def share_frame(self, w: int) -> pd.DataFrame:
        """Wide table of ``w``-day shares: one row per (window start, district)."""
        shares, empty = self.window_shares(w)
        n_d, n_t, n_k = shares.shape
        starts = self.dates[:n_t]
        out = pd.DataFrame(
            {
                "window_start": pd.DatetimeIndex(np.tile(starts, n_d)).strftime("%Y-%m-%d"),
                "district_id": np.repeat(np.array(self.districts, dtype=object), n_t),
                "empty": empty.ravel(),
            }
        )
        cols = pd.DataFrame(shares.reshape(n_d * n_t, n_k), columns=[f"share_{k + 1:02d}" for k in range(n_k)])
        return pd.concat([out, cols], axis=1)

    def country_reference(self) -> np.ndarray:
        """Average shares over every transaction of the panel."""
        total = self.mass.sum(axis=(0, 1))
        return total / total.sum()

    def daily_totals(self) -> np.ndarray:
        return self.mass.sum(axis=2)

    def permuted(self, order) -> "SharePanel":
        """Same panel with the category axis reordered."""
        return SharePanel(self.districts, self.start, self.mass[:, :, np.asarray(order)], self.weight)


# ---------------------------------------------------------------------------
# demographics


def _monthly_spend(table: TransactionTable) -> pd.DataFrame:
    f = table.frame
    month = f["timestamp"].dt.to_period("M")
    return f.assign(month=month).groupby(["client_id", "month"])["amount"].sum().rename("spend").reset_index()


def amp_table(table: TransactionTable, min_monthly: float = 30.0, threshold: str = "per_month") -> pd.Series:
    """Average monthly purchase for every included client.

    ``threshold='per_month'`` keeps clients spending more than ``min_monthly``
    in every active month; ``'total'`` only requires the overall average to
    exceed it.
    """
    monthly = _monthly_spend(table)
    grouped = monthly.groupby("client_id")["spend"]
    amp = grouped.sum() / grouped.size()
    if threshold == "per_month":
        keep = grouped.min() > min_monthly
    elif threshold == "total":
        keep = amp > min_monthly
    else:
        raise ValueError(f"threshold must be 'per_month' or 'total', got {threshold!r}")
    return amp[keep].rename("amp")


def compute_amp(table: TransactionTable, client_id: str, min_monthly: float = 30.0, threshold: str = "per_month") -> float | None:
    """AMP of one client, or ``None`` when the client is excluded or absent."""
    sub = table.frame[table.frame["client_id"] == str(client_id)]
    if sub.empty:
        return None
    amps = amp_table(TransactionTable(sub), min_monthly=min_monthly, threshold=threshold)
    return float(amps.iloc[0]) if len(amps) else None


def split_classes(amp: Mapping[str, float] | pd.Series, n_classes: int = 9) -> pd.Series:
    """Assign clients to ``n_classes`` economic classes.

    Clients are sorted by AMP and placed by the cumulative AMP share reached
    at their own position; class ``c`` covers cumulative share in
    ``((c - 1) / n, c / n]``.
    """
    amp = pd.Series(amp, dtype=np.float64)
    if len(amp) < n_classes:
        raise ValueError(f"need at least {n_classes} clients, got {len(amp)}")
    if (amp < 0).any() or amp.sum() <= 0:
        raise ValueError("AMP values must be non-negative and not all zero")
    order = sorted(amp.index, key=lambda c: (amp[c], str(c)))
    values = amp.loc[order].to_numpy()
    cum = np.cumsum(values) / values.sum()
    cls = np.ceil(cum * n_classes - 1e-9).astype(int)
    cls = np.clip(cls, 1, n_classes)
    return pd.Series(cls, index=pd.Index(order, name=amp.index.name), name="class").loc[amp.index]


def compute_gini(values) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = values.size
    if n == 0:
        raise ValueError("need at least one value")
    if (values < 0).any():
        raise ValueError("values must be non-negative")
    total = values.sum()
    if total <= 0:
        raise ValueError("GINI undefined for all-zero input")
    i = np.arange(1, n + 1)
    g = float(np.sum((2 * i - n - 1) * values) / (n * total))
    return min(max(g, 0.0), 1.0)


@dataclass(frozen=True)
class DemographicSummary:
    amp_per_client: pd.Series
    class_assignment: pd.Series
    gini: float
    class_table: pd.DataFrame = field(repr=False)


def demographics(table: TransactionTable, min_monthly: float = 30.0, threshold: str = "per_month", n_classes: int = 9) -> DemographicSummary:
    amp = amp_table(table, min_monthly=min_monthly, threshold=threshold)
    classes = split_classes(amp, n_classes=n_classes)
    class_table = (
        pd.DataFrame({"amp": amp, "class": classes})
        .groupby("class")["amp"]
        .agg(n_clients="size", mean_amp="mean")
        .reindex(range(1, n_classes + 1), fill_value=0)
        .reset_index()
    )
    return DemographicSummary(amp, classes, compute_gini(amp.to_numpy()), class_table)
