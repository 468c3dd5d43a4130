"""Counterfactual impact of an intervention on district consumption.

The counterfactual for a district is a linear regression on a control series
fitted over the pre-period. Uncertainty in the cumulative post-period effect
comes from a moving-block bootstrap of the pre-period residuals: each
replicate refits the regression on a resampled pre-period and adds resampled
noise to the post-period prediction.
"""
from __future__ import annotations

import datetime as dt
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import TransactionTable

DEFAULT_INTERVENTION = dt.date(2017, 2, 15)
MIN_PRE_POINTS = 28
MIN_BOOTSTRAP = 100
LABELS = ("negative", "positive", "neutral")


@dataclass(frozen=True)
class InterventionSpec:
    intervention_date: dt.date
    pre_start: dt.date
    post_end: dt.date

    def __post_init__(self):
        if not self.pre_start < self.intervention_date <= self.post_end:
            raise ValueError("need pre_start < intervention_date <= post_end")

    @property
    def pre_period(self) -> tuple[dt.date, dt.date]:
        return self.pre_start, self.intervention_date - dt.timedelta(days=1)

    @property
    def post_period(self) -> tuple[dt.date, dt.date]:
        return self.intervention_date, self.post_end

    def split(self, index: pd.DatetimeIndex) -> tuple[np.ndarray, np.ndarray]:
        """Boolean masks of ``index`` falling in the pre and post periods."""
        d = index.to_numpy().astype("datetime64[D]")
        lo, cut, hi = (np.datetime64(x, "D") for x in (self.pre_start, self.intervention_date, self.post_end))
        return (d >= lo) & (d < cut), (d >= cut) & (d <= hi)


@dataclass(frozen=True)
class CounterfactualModel:
    intercept: float
    slope: float
    slope_se: float
    control_pre: np.ndarray
    fitted_pre: np.ndarray
    residuals: np.ndarray

    @property
    def n_pre(self) -> int:
        return self.residuals.size

    def predict(self, control) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(control, dtype=np.float64)


@dataclass(frozen=True)
class CausalResult:
    district_id: str
    dates: np.ndarray
    observed: np.ndarray
    counterfactual: np.ndarray
    pointwise_effect: np.ndarray
    cumulative_effect: float
    relative_effect: float
    interval: tuple[float, float]
    confidence: float
    label: str

    def __post_init__(self):
        if self.label != label_for(*self.interval):
            raise ValueError("label disagrees with the interval")


def label_for(lo: float, hi: float) -> str:
    if hi < 0:
        return "negative"
    if lo > 0:
        return "positive"
    return "neutral"


def _align(observed, control) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(observed, pd.Series) and isinstance(control, pd.Series):
        if not observed.index.equals(control.index):
            raise ValueError("observed and control are not aligned by date")
    y = np.asarray(observed, dtype=np.float64)
    x = np.asarray(control, dtype=np.float64)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("observed and control must be 1-d and equally long")
    if not (np.isfinite(y).all() and np.isfinite(x).all()):
        raise ValueError("series contain non-finite values")
    return y, x


def _ols(x: np.ndarray, y: np.ndarray):
    """Intercept and slope of ``y ~ x``; ``y`` may carry replicates on axis 0."""
    xc = x - x.mean()
    sxx = xc @ xc
    b = (y - y.mean(axis=-1, keepdims=True)) @ xc / sxx
    a = y.mean(axis=-1) - b * x.mean()
    return a, b, sxx


def fit_counterfactual(observed_pre, control_pre) -> CounterfactualModel:
    """Least-squares fit of ``observed = a + b * control`` on the pre-period."""
    y, x = _align(observed_pre, control_pre)
    if y.size < MIN_PRE_POINTS:
        raise ValueError(f"need at least {MIN_PRE_POINTS} pre-period points, got {y.size}")
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("control series is constant; slope is not identifiable")
    a, b, sxx = _ols(x, y)
    fitted = a + b * x
    resid = y - fitted
    s2 = resid @ resid / (y.size - 2)
    return CounterfactualModel(float(a), float(b), float(np.sqrt(s2 / sxx)), x, fitted, resid)


def block_bootstrap_indices(n: int, size: int, block_length: int, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Moving-block resampling: ``n_samples`` rows of ``size`` indices into ``range(n)``."""
    block = min(block_length, n)
    n_blocks = -(-size // block)
    starts = rng.integers(0, n - block + 1, size=(n_samples, n_blocks))
    idx = (starts[:, :, None] + np.arange(block)).reshape(n_samples, -1)
    return idx[:, :size]


def estimate_impact(
    model: CounterfactualModel,
    observed_post,
    control_post,
    n_bootstrap: int = 1000,
    confidence: float = 0.95,
    block_length: int = 7,
    seed=0,
    district_id: str = "",
    dates=None,
) -> CausalResult:
    """Pointwise and cumulative effect with a bootstrap interval."""
    if n_bootstrap < MIN_BOOTSTRAP:
        raise ValueError(f"n_bootstrap must be >= {MIN_BOOTSTRAP}")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    y, x = _align(observed_post, control_post)
    if y.size == 0:
        raise ValueError("post-period is empty")
    if dates is None and isinstance(observed_post, pd.Series):
        dates = observed_post.index.to_numpy()
    dates = np.asarray(dates if dates is not None else np.arange(y.size))

    counterfactual = model.predict(x)
    effect = y - counterfactual
    cumulative = float(effect.sum())

    rng = np.random.default_rng(seed)
    n = model.n_pre
    # residuals of a two-parameter fit understate the noise variance by (n - 2) / n
    resid = model.residuals * np.sqrt(n / (n - 2))
    pre_idx = block_bootstrap_indices(n, n, block_length, rng, n_bootstrap)
    post_idx = block_bootstrap_indices(n, y.size, block_length, rng, n_bootstrap)
    y_star = model.fitted_pre + resid[pre_idx]
    a_star, b_star, _ = _ols(model.control_pre, y_star)
    cf_star = a_star[:, None] + b_star[:, None] * x + resid[post_idx]
    samples = (y - cf_star).sum(axis=1)
    alpha = 1.0 - confidence
    lo, hi = np.percentile(samples, [100 * alpha / 2, 100 * (1 - alpha / 2)])

    # residuals of an exact fit are rounding noise; do not let them pick a sign
    tol = 1e-9 * (np.abs(counterfactual).sum() + np.abs(y).sum() + 1.0)
    lo = 0.0 if abs(lo) <= tol else float(lo)
    hi = 0.0 if abs(hi) <= tol else float(hi)
    if abs(cumulative) <= tol:
        cumulative = 0.0
    mass = counterfactual.sum()
    return CausalResult(
        district_id=str(district_id),
        dates=dates,
        observed=y,
        counterfactual=counterfactual,
        pointwise_effect=effect,
        cumulative_effect=cumulative,
        relative_effect=float(cumulative / mass) if mass != 0 else float("nan"),
        interval=(lo, hi),
        confidence=confidence,
        label=label_for(lo, hi),
    )


def classify_districts(results: Sequence[CausalResult]) -> tuple[pd.DataFrame, dict[str, int]]:
    """Label table ordered by district id, plus counts per label."""
    rows = [
        (r.district_id, r.label, r.cumulative_effect, r.relative_effect, r.interval[0], r.interval[1], r.confidence)
        for r in results
    ]
    table = pd.DataFrame(rows, columns=["district_id", "label", "cumulative_effect", "relative_effect", "lo", "hi", "confidence"])
    table = table.sort_values("district_id", kind="mergesort").reset_index(drop=True)
    counts = {lab: int((table["label"] == lab).sum()) for lab in LABELS}
    return table, counts


def district_daily_series(table: TransactionTable, weight: str = "amount") -> pd.DataFrame:
    """Daily consumption per district (columns) over the full date range, zero filled."""
    f = table.frame
    if weight not in ("amount", "count"):
        raise ValueError("weight must be 'amount' or 'count'")
    vals = f["amount"].to_numpy() if weight == "amount" else np.ones(len(f))
    frame = pd.DataFrame({"date": table.days, "district_id": f["district_id"].to_numpy(), "v": vals})
    out = frame.pivot_table(index="date", columns="district_id", values="v", aggfunc="sum", fill_value=0.0)
    first, last = table.date_range
    out = out.reindex(pd.date_range(first, last, freq="D"), fill_value=0.0)
    out.index.name = "date"
    out.columns.name = None
    return out.astype(np.float64)


def district_seed(seed: int, district_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(str(district_id).encode("utf-8"))])


def _control_series(daily: pd.DataFrame, control) -> tuple[pd.Series, set[str]]:
    if isinstance(control, pd.Series):
        return control.reindex(daily.index).astype(np.float64), set()
    ids = [control] if isinstance(control, str) else list(control)
    missing = [c for c in ids if c not in daily.columns]
    if missing:
        raise KeyError(f"unknown control district(s): {missing}")
    return daily[ids].sum(axis=1), set(ids)


def causal_impact(
    daily: pd.DataFrame,
    control,
    intervention_date=DEFAULT_INTERVENTION,
    districts: Sequence[str] | None = None,
    n_bootstrap: int = 1000,
    confidence: float = 0.95,
    block_length: int = 7,
    seed: int = 0,
) -> list[CausalResult]:
    """Run the counterfactual analysis for every non-control district of ``daily``.

    ``control`` is a district id, a list of ids (summed) or a date-indexed
    series. Each district bootstraps with its own generator derived from
    ``seed`` and its id, so results do not depend on processing order.
    """
    x, used = _control_series(daily, control)
    if x.isna().any():
        raise ValueError("control series does not cover the date range")
    day0 = pd.Timestamp(intervention_date).date()
    spec = InterventionSpec(day0, daily.index[0].date(), daily.index[-1].date())
    pre, post = spec.split(daily.index)
    targets = [d for d in (districts if districts is not None else daily.columns) if d not in used]
    results = []
    for d in targets:
        y = daily[d]
        model = fit_counterfactual(y[pre], x[pre])
        results.append(
            estimate_impact(
                model, y[post], x[post],
                n_bootstrap=n_bootstrap, confidence=confidence, block_length=block_length,
                seed=district_seed(seed, d), district_id=d,
            )
        )
    return results


class ControlRegression(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`fit_counterfactual` (one control feature)."""

    def fit(self, X, y):
        x = np.asarray(X, dtype=np.float64)
        if x.ndim == 2:
            if x.shape[1] != 1:
                raise ValueError("expected a single control column")
            x = x[:, 0]
        self.model_ = fit_counterfactual(np.asarray(y, dtype=np.float64), x)
        self.intercept_ = self.model_.intercept
        self.coef_ = np.array([self.model_.slope])
        self.coef_se_ = np.array([self.model_.slope_se])
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        x = np.asarray(X, dtype=np.float64)
        return self.model_.predict(x[:, 0] if x.ndim == 2 else x)


class ImpactClassifier(BaseEstimator):
    """Label every district of a daily consumption frame.

    ``fit`` stores ``results_``, the label ``table_`` and ``counts_``.
    """

    def __init__(self, control=None, intervention_date=DEFAULT_INTERVENTION, confidence=0.95, n_bootstrap=1000, block_length=7, seed=0):
        self.control = control
        self.intervention_date = intervention_date
        self.confidence = confidence
        self.n_bootstrap = n_bootstrap
        self.block_length = block_length
        self.seed = seed

    def fit(self, daily: pd.DataFrame, y=None):
        if self.control is None:
            raise ValueError("a control district or series is required")
        self.results_ = causal_impact(
            daily, self.control, self.intervention_date,
            n_bootstrap=self.n_bootstrap, confidence=self.confidence,
            block_length=self.block_length, seed=self.seed,
        )
        self.table_, self.counts_ = classify_districts(self.results_)
        return self

    def predict(self, daily: pd.DataFrame | None = None) -> pd.Series:
        if daily is not None:
            self.fit(daily)
        check_is_fitted(self, "table_")
        return self.table_.set_index("district_id")["label"]
