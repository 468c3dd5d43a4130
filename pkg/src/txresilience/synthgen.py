"""Seeded synthetic card-transaction generator with planted shocks.

Agents live in districts, hold a small personal pool of merchants per
category and buy a Poisson number of items per day. Category choice follows
the district preference vector tilted by a weekly profile whose
volume-weighted mean is exactly the configured preference. Merchant
popularity within a category is Zipf-like. Shocks are applied afterwards to
the generated table, so the same code can perturb any real table too.
"""
from __future__ import annotations

import datetime as dt
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from .coicop import FOOD, HEALTH, N_CATEGORIES, MccMapping, default_mapping
from .data import TransactionTable

SHOCK_KINDS = ("consumption-drop", "consumption-surge", "category-shift", "edge-thinning")
LEISURE = (3, 9, 11)
AGENT_CHUNK = 1000

# Zipf-like default mix: food dominant, long tail of rare categories.
DEFAULT_PREFERENCES = (
    0.26, 0.03, 0.08, 0.05, 0.06, 0.08, 0.12, 0.05,
    0.07, 0.03, 0.10, 0.03, 0.02, 0.01, 0.01,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShockSpec:
    """A planted perturbation.

    ``start``/``end`` are inclusive days. ``categories`` filters the rows a
    drop or surge acts on and names the source categories of a shift;
    ``target_category`` is where a shift sends the mass. Edge thinning sends
    a fraction ``magnitude`` of the non-necessity purchases of each affected
    agent to that agent's most used necessity merchant.

    A surge adds, for a fraction ``magnitude`` of the affected purchases, one
    more purchase the same day. With ``spread="same"`` it stays in the
    category of the purchase that triggered it; with ``spread="uniform"``
    its category is drawn uniformly from all categories, as on a festival
    when people buy outside their usual mix.
    """

    kind: str
    magnitude: float
    start: dt.date
    end: dt.date
    districts: tuple[str, ...] | None = None
    categories: tuple[int, ...] | None = None
    target_category: int | None = None
    necessity: tuple[int, ...] = (FOOD, HEALTH)
    spread: str = "same"

    def __post_init__(self):
        if self.spread not in ("same", "uniform"):
            raise ConfigError("spread must be 'same' or 'uniform'")
        if self.kind not in SHOCK_KINDS:
            raise ConfigError(f"unknown shock kind {self.kind!r}")
        if not 0 < self.magnitude <= 1:
            raise ConfigError("shock magnitude must lie in (0, 1]")
        if self.end < self.start:
            raise ConfigError("shock window is empty")
        if self.kind == "category-shift" and (not self.categories or self.target_category is None):
            raise ConfigError("category-shift needs categories and target_category")

    @classmethod
    def from_dict(cls, d: dict) -> "ShockSpec":
        d = dict(d)
        for key in ("start", "end"):
            d[key] = pd.Timestamp(d[key]).date()
        if d.get("districts") is not None:
            d["districts"] = tuple(str(x) for x in d["districts"])
        if d.get("categories") is not None:
            d["categories"] = tuple(int(x) for x in d["categories"])
        if d.get("necessity") is not None:
            d["necessity"] = tuple(int(x) for x in d["necessity"])
        return cls(**d)


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 1000
    n_merchants: int = 300
    n_districts: int = 6
    start_date: dt.date = dt.date(2017, 1, 1)
    n_days: int = 120
    purchase_rate: float = 0.4
    rate_shape: float = 4.0
    preferences: tuple[float, ...] = DEFAULT_PREFERENCES
    district_preferences: dict | None = None
    preference_concentration: float = 0.0
    district_weights: tuple[float, ...] | None = None
    weekly_volume: float = 0.2
    weekly_category: float = 0.3
    pool_size: int = 3
    zipf_exponent: float = 1.0
    amount_mu: float = 3.0
    amount_sigma: float = 0.6
    agent_scale_sigma: float = 0.5
    region_id: str = "R01"
    shocks: tuple[ShockSpec, ...] = ()

    def __post_init__(self):
        if self.n_merchants < 1:
            raise ConfigError("infeasible config: need at least one merchant")
        if self.n_agents < 1 or self.n_districts < 1 or self.n_days < 1:
            raise ConfigError("n_agents, n_districts and n_days must be positive")
        prefs = np.asarray(self.preferences, dtype=float)
        if prefs.shape != (N_CATEGORIES,) or (prefs < 0).any() or prefs.sum() <= 0:
            raise ConfigError(f"preferences must be {N_CATEGORIES} non-negative weights")
        if self.district_weights is not None and len(self.district_weights) != self.n_districts:
            raise ConfigError("district_weights length must equal n_districts")
        end = self.end_date
        ids = set(self.district_ids)
        for s in self.shocks:
            if s.start < self.start_date or s.end > end:
                raise ConfigError(f"shock window {s.start}..{s.end} outside the date range")
            if s.districts is not None and not set(s.districts) <= ids:
                raise ConfigError(f"unknown district in shock: {sorted(set(s.districts) - ids)}")

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.n_days - 1)

    @property
    def district_ids(self) -> list[str]:
        return [f"D{i + 1:02d}" for i in range(self.n_districts)]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "start_date" in d:
            d["start_date"] = pd.Timestamp(d["start_date"]).date()
        for key in ("preferences", "district_weights"):
            if d.get(key) is not None:
                d[key] = tuple(float(x) for x in d[key])
        d["shocks"] = tuple(ShockSpec.from_dict(s) for s in d.get("shocks") or ())
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        """Read a YAML scenario file; bare names load a shipped preset."""
        p = Path(path)
        if not p.exists() and p.suffix == "" and "/" not in str(path):
            text = resources.files("txresilience").joinpath(f"scenarios/{path}.yaml").read_text("utf-8")
        else:
            text = p.read_text("utf-8")
        return cls.from_dict(yaml.safe_load(text) or {})


@dataclass
class World:
    """Static part of a scenario: districts, merchants and agent habits."""

    config: ScenarioConfig
    district_ids: list[str]
    district_prefs: np.ndarray  # (D, K) over categories with merchants
    merchant_category: np.ndarray  # (M,) 1-based COICOP
    merchant_mcc: np.ndarray
    merchant_district: np.ndarray
    agent_district: np.ndarray
    agent_rate: np.ndarray
    agent_scale: np.ndarray
    pools: np.ndarray  # (A, K, pool_size) merchant index or -1
    day_prefs: np.ndarray = field(repr=False)  # (D, 7, K)
    day_volume: np.ndarray = field(repr=False)  # (7,)


def _weekly_profile(cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Volume factor per weekday (Mon=0) and the category tilt coefficient.

    The tilt is zero-mean under the volume weights, so averaging the tilted
    preferences over a week returns the configured ones.
    """
    weekend = np.array([0, 0, 0, 0, 0, 1, 1], dtype=bool)
    volume = np.where(weekend, 1.0 + cfg.weekly_volume, 1.0)
    tilt = np.where(weekend, 1.0, -(2 * volume[5]) / (5 * volume[0]))
    return volume, tilt


def _day_preferences(prefs: np.ndarray, cfg: ScenarioConfig, tilt: np.ndarray) -> np.ndarray:
    leisure = np.zeros(N_CATEGORIES)
    leisure[[c - 1 for c in LEISURE]] = 1.0
    out = np.empty((prefs.shape[0], 7, N_CATEGORIES))
    for d, p in enumerate(prefs):
        m = float(p @ leisure)
        delta = p * (leisure - m)
        # keep every weekday's distribution non-negative
        amp = min(cfg.weekly_category, 0.95 / (np.abs(tilt).max() * max(m, 1.0 - m, 1e-12)))
        for dow in range(7):
            out[d, dow] = p + amp * tilt[dow] * delta
    return np.clip(out, 0.0, None)


def build_world(cfg: ScenarioConfig, seed: int, mapping: MccMapping | None = None) -> World:
    mapping = mapping if mapping is not None else default_mapping()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    D, M, A, K = cfg.n_districts, cfg.n_merchants, cfg.n_agents, N_CATEGORIES

    base = np.asarray(cfg.preferences, dtype=float)
    base = base / base.sum()

    # merchants: one per preferred category first, the rest by preference
    cats = [k for k in np.argsort(-base, kind="stable") if base[k] > 0]
    first = cats[: min(M, len(cats))]
    rest = rng.choice(K, size=M - len(first), p=base) if M > len(first) else np.array([], dtype=int)
    merchant_cat0 = np.concatenate([np.asarray(first, dtype=int), rest.astype(int)])
    merchant_category = merchant_cat0 + 1
    merchant_mcc = np.empty(M, dtype=np.int16)
    for k in range(1, K + 1):
        idx = np.flatnonzero(merchant_category == k)
        if idx.size:
            merchant_mcc[idx] = rng.choice(mapping.mccs_for(k), size=idx.size)
    merchant_district = rng.integers(0, D, size=M)

    has_merchant = np.bincount(merchant_cat0, minlength=K) > 0
    prefs = np.tile(base, (D, 1))
    if cfg.preference_concentration > 0:
        prefs = np.array([rng.dirichlet(cfg.preference_concentration * base + 1e-12) for _ in range(D)])
    if cfg.district_preferences:
        for key, vec in cfg.district_preferences.items():
            d = cfg.district_ids.index(str(key))
            prefs[d] = np.asarray(vec, dtype=float)
    prefs = prefs * has_merchant
    prefs = prefs / prefs.sum(axis=1, keepdims=True)

    dw = np.ones(D) if cfg.district_weights is None else np.asarray(cfg.district_weights, dtype=float)
    agent_district = np.sort(rng.choice(D, size=A, p=dw / dw.sum()))
    agent_rate = cfg.purchase_rate * rng.gamma(cfg.rate_shape, 1.0 / cfg.rate_shape, size=A)
    agent_scale = np.exp(rng.normal(0.0, cfg.agent_scale_sigma, size=A))

    pools = np.full((A, K, cfg.pool_size), -1, dtype=np.int64)
    for k in range(K):
        idx = np.flatnonzero(merchant_cat0 == k)
        if not idx.size:
            continue
        pop = (np.arange(1, idx.size + 1, dtype=float)) ** (-cfg.zipf_exponent)
        pools[:, k, :] = rng.choice(idx, size=(A, cfg.pool_size), p=pop / pop.sum())

    volume, tilt = _weekly_profile(cfg)
    return World(
        config=cfg,
        district_ids=cfg.district_ids,
        district_prefs=prefs,
        merchant_category=merchant_category,
        merchant_mcc=merchant_mcc,
        merchant_district=merchant_district,
        agent_district=agent_district,
        agent_rate=agent_rate,
        agent_scale=agent_scale,
        pools=pools,
        day_prefs=_day_preferences(prefs, cfg, tilt),
        day_volume=volume,
    )


def _generate_chunk(world: World, agents: np.ndarray, seed_seq: np.random.SeedSequence) -> pd.DataFrame:
    cfg = world.config
    rng = np.random.default_rng(seed_seq)
    start = np.datetime64(cfg.start_date, "D")
    days = np.arange(cfg.n_days)
    dow = (start + days).astype("datetime64[D]").view("int64")
    dow = (dow + 3) % 7  # 1970-01-01 was a Thursday
    lam = world.agent_rate[agents, None] * world.day_volume[dow][None, :]
    counts = rng.poisson(lam)
    a_idx = np.repeat(np.repeat(agents, cfg.n_days), counts.ravel())
    d_idx = np.repeat(np.tile(days, agents.size), counts.ravel())
    n = a_idx.size
    if n == 0:
        return pd.DataFrame(columns=["agent", "day", "second", "merchant", "amount"])

    district = world.agent_district[a_idx]
    cdf = np.cumsum(world.day_prefs[district, dow[d_idx]], axis=1)
    u = rng.random(n) * cdf[:, -1]
    cat = np.minimum((cdf < u[:, None]).sum(axis=1), N_CATEGORIES - 1)

    ps = cfg.pool_size
    pw = 1.0 / np.arange(1, ps + 1)
    slot = rng.choice(ps, size=n, p=pw / pw.sum())
    merchant = world.pools[a_idx, cat, slot]

    amount = world.agent_scale[a_idx] * rng.lognormal(cfg.amount_mu, cfg.amount_sigma, size=n)
    amount = np.round(np.maximum(amount, 0.01), 2)
    second = rng.integers(6 * 3600, 23 * 3600, size=n)
    return pd.DataFrame({"agent": a_idx, "day": d_idx, "second": second, "merchant": merchant, "amount": amount})


def _frame_to_table(world: World, raw: pd.DataFrame) -> TransactionTable:
    cfg = world.config
    raw = raw.sort_values(["day", "agent", "second", "merchant"], kind="mergesort")
    start = pd.Timestamp(cfg.start_date)
    ts = start + pd.to_timedelta(raw["day"].to_numpy(), unit="D") + pd.to_timedelta(raw["second"].to_numpy(), unit="s")
    m = raw["merchant"].to_numpy()
    a = raw["agent"].to_numpy()
    frame = pd.DataFrame(
        {
            "client_id": [f"C{i:06d}" for i in a],
            "merchant_id": [f"M{i:05d}" for i in m],
            "timestamp": ts,
            "amount": raw["amount"].to_numpy(),
            "mcc": world.merchant_mcc[m],
            "district_id": np.asarray(world.district_ids)[world.agent_district[a]],
            "region_id": cfg.region_id,
            "coicop": world.merchant_category[m],
        }
    )
    return TransactionTable.from_frame(frame)


@dataclass(frozen=True)
class GenerationResult:
    table: TransactionTable
    world: World
    n_emitted: int


def generate(cfg: ScenarioConfig, seed: int, n_jobs: int = 1, mapping: MccMapping | None = None) -> GenerationResult:
    """Generate the scenario's transactions, shocks included.

    Agents are processed in fixed-size chunks with seeds spawned from
    ``seed``, so ``n_jobs`` never changes the output.
    """
    world = build_world(cfg, seed, mapping=mapping)
    chunks = [np.arange(i, min(i + AGENT_CHUNK, cfg.n_agents)) for i in range(0, cfg.n_agents, AGENT_CHUNK)]
    seeds = np.random.SeedSequence([int(seed), 1]).spawn(len(chunks))
    if n_jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(lambda args: _generate_chunk(world, *args), zip(chunks, seeds)))
    else:
        parts = [_generate_chunk(world, c, s) for c, s in zip(chunks, seeds)]
    table = _frame_to_table(world, pd.concat(parts, ignore_index=True))
    shock_seeds = np.random.SeedSequence([int(seed), 2]).spawn(max(len(cfg.shocks), 1))
    for spec, ss in zip(cfg.shocks, shock_seeds):
        table = inject_shock(table, spec, seed=ss)
    return GenerationResult(table=table, world=world, n_emitted=len(table))


# ---------------------------------------------------------------------------
# shocks


def _affected(table: TransactionTable, spec: ShockSpec) -> np.ndarray:
    f = table.frame
    days = table.days
    mask = (days >= np.datetime64(spec.start, "D")) & (days <= np.datetime64(spec.end, "D"))
    if spec.districts is not None:
        known = set(f["district_id"].unique())
        unknown = set(spec.districts) - known
        if unknown:
            raise ConfigError(f"unknown district in shock: {sorted(unknown)}")
        mask &= f["district_id"].isin(spec.districts).to_numpy()
    return mask


def _favourite(f: pd.DataFrame, categories: Sequence[int]) -> pd.Series:
    """Each client's most used merchant among ``categories`` (ties: merchant id)."""
    sub = f[f["coicop"].isin(categories)]
    counts = sub.groupby(["client_id", "merchant_id"]).size().rename("n").reset_index()
    counts = counts.sort_values(["client_id", "n", "merchant_id"], ascending=[True, False, True])
    return counts.drop_duplicates("client_id").set_index("client_id")["merchant_id"]


def _popular(f: pd.DataFrame, categories: Sequence[int]) -> pd.Series:
    sub = f[f["coicop"].isin(categories)]
    return sub.groupby("merchant_id").size().sort_index()


def _reassign(f: pd.DataFrame, rows: np.ndarray, categories: Sequence[int], rng: np.random.Generator, history: pd.DataFrame | None = None) -> pd.DataFrame:
    """Send ``rows`` to each client's favourite merchant in ``categories``;
    clients without one get a popularity-weighted draw. Favourites and
    popularity come from ``history`` (default ``f``)."""
    history = f if history is None else history
    meta = history.drop_duplicates("merchant_id").set_index("merchant_id")[["mcc", "coicop"]]
    fav = _favourite(history, categories)
    clients = f["client_id"].to_numpy()[rows]
    new = fav.reindex(clients).to_numpy()
    missing = pd.isna(new)
    if missing.any():
        pop = _popular(history, categories)
        if pop.empty:
            raise ConfigError(f"no merchant in categories {list(categories)} to shift purchases to")
        new[missing] = rng.choice(pop.index.to_numpy(), size=int(missing.sum()), p=(pop / pop.sum()).to_numpy())
    f = f.copy()
    col = {c: f.columns.get_loc(c) for c in ("merchant_id", "mcc", "coicop")}
    f.iloc[rows, col["merchant_id"]] = new
    f.iloc[rows, col["mcc"]] = meta.loc[new, "mcc"].to_numpy()
    f.iloc[rows, col["coicop"]] = meta.loc[new, "coicop"].to_numpy()
    return f


def inject_shock(table: TransactionTable, spec: ShockSpec, seed=0) -> TransactionTable:
    """Apply one planted shock to ``table``; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    f = table.frame
    mask = _affected(table, spec)
    if spec.kind in ("consumption-drop", "consumption-surge") and spec.categories:
        mask &= f["coicop"].isin(spec.categories).to_numpy()
    rows = np.flatnonzero(mask)
    hit = rows[rng.random(rows.size) < spec.magnitude]

    if spec.kind == "consumption-drop":
        out = f.drop(index=f.index[hit])
    elif spec.kind == "consumption-surge":
        extra = f.iloc[hit].copy()
        day_end = extra["timestamp"].dt.normalize() + pd.Timedelta(hours=23, minutes=59, seconds=59)
        span = (day_end - extra["timestamp"]).dt.total_seconds().to_numpy()
        extra["timestamp"] = extra["timestamp"] + pd.to_timedelta(np.floor(rng.random(len(extra)) * span), unit="s")
        if spec.spread == "uniform":
            cats = np.unique(f["coicop"].to_numpy())
            extra["coicop"] = rng.choice(cats, size=len(extra))
            out = pd.concat([f, extra], ignore_index=True)
            base = len(f)
            for c in cats:
                rows = base + np.flatnonzero(extra["coicop"].to_numpy() == c)
                if rows.size:
                    out = _reassign(out, rows, [int(c)], rng, history=f)
        else:
            # one of the client's merchants in the same category
            order = np.lexsort((f["merchant_id"].to_numpy(), f["coicop"].to_numpy(), f["client_id"].to_numpy()))
            key = f["client_id"].to_numpy()[order].astype(object) + "|" + f["coicop"].to_numpy()[order].astype(str)
            uniq, first, sizes = np.unique(key, return_index=True, return_counts=True)
            extra_key = extra["client_id"].to_numpy().astype(object) + "|" + extra["coicop"].to_numpy().astype(str)
            g = np.searchsorted(uniq, extra_key)
            offset = np.floor(rng.random(len(extra)) * sizes[g]).astype(np.int64)
            picks = f["merchant_id"].to_numpy()[order[first[g] + offset]]
            meta = f.drop_duplicates("merchant_id").set_index("merchant_id")["mcc"]
            extra["merchant_id"] = picks
            extra["mcc"] = meta.loc[picks].to_numpy()
            out = pd.concat([f, extra], ignore_index=True)
    elif spec.kind == "category-shift":
        src = f["coicop"].to_numpy()[hit]
        hit = hit[np.isin(src, spec.categories)]
        out = _reassign(f, hit, [spec.target_category], rng)
    else:  # edge-thinning
        cats = f["coicop"].to_numpy()[hit]
        hit = hit[~np.isin(cats, spec.necessity)]
        out = _reassign(f, hit, list(spec.necessity), rng)
    return TransactionTable.from_frame(out)


def lognormal_amp_config(gini_target: float = 0.655, **overrides) -> ScenarioConfig:
    """Scenario whose per-agent spending scale is log-normal with the
    dispersion that gives ``gini_target`` in the limit (G = 2 Phi(s / sqrt 2) - 1).

    The AMP Gini measured on the generated data comes out about 0.025 lower,
    since clients under the monthly threshold are excluded; the default
    lands it near 0.63.
    """
    from scipy.stats import norm

    sigma = float(np.sqrt(2) * norm.ppf((gini_target + 1) / 2))
    base = dict(n_agents=4000, n_merchants=300, n_districts=4, n_days=120, agent_scale_sigma=sigma, rate_shape=50.0)
    base.update(overrides)
    return ScenarioConfig(**base)


def with_shocks(cfg: ScenarioConfig, shocks: Sequence[ShockSpec]) -> ScenarioConfig:
    return replace(cfg, shocks=tuple(shocks))
