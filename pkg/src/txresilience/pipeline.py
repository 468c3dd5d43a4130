"""Stage runner: every stage reads its inputs from, and writes its outputs to,
the output directory, so stages can be rerun one at a time."""
from __future__ import annotations

import configparser
import json
import datetime as dt
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import behavior, causal, corestructure, divergence, sax, synthgen, txgraph
from .coicop import MccMapping
from .data import SharePanel, TransactionTable, demographics, ingest_transactions
from .io import TABLE_FORMATS, build_manifest, read_table, write_json, write_table

logger = logging.getLogger(__name__)

OUTPUT_ENV = "TXRES_OUTPUT_DIR"
# "synth" only runs on request; "ingest" generates the data when a scenario is set
STAGES = ("synth", "ingest", "demographics", "divergence", "causal", "behavior", "graph", "rank", "cluster", "core")
DEPENDS = {
    "synth": (),
    "ingest": (),
    "demographics": ("ingest",),
    "divergence": ("ingest",),
    "causal": ("ingest",),
    "behavior": ("ingest",),
    "graph": ("ingest",),
    "rank": ("graph",),
    "cluster": ("rank",),
    "core": ("graph",),
}


class ConfigError(ValueError):
    pass


def _date(value) -> dt.date | None:
    if value in (None, ""):
        return None
    return pd.Timestamp(value).date()


def _list(value) -> tuple[str, ...]:
    if value in (None, ""):
        return ()
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(str(v) for v in value)


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters.

    Either ``input`` (a transactions file) or ``scenario`` (a synthetic
    scenario name or file) provides the data.
    """

    input: str | None = None
    scenario: str | None = None
    mapping: str | None = None
    output_dir: str = "txres-out"
    seed: int = 0
    n_jobs: int = 1
    start: dt.date | None = None
    end: dt.date | None = None
    weight: str = "amount"
    w: int = 7
    d2_share_window: int = 1
    intervention_date: dt.date = causal.DEFAULT_INTERVENTION
    control: tuple[str, ...] = ()
    confidence: float = 0.95
    n_bootstrap: int = 1000
    min_monthly: float = 30.0
    sax_L: int = 15
    sax_N: int = 8
    sax_mean_levels: int = 4
    k: int = 6
    min_presence: float = 0.5
    alpha: float = txgraph.ALPHA
    tol: float = 1e-10
    rank_mode: str = "ordinal"
    half_width: int = txgraph.HALF_WIDTH
    events: tuple[dt.date, ...] = ()
    divergence_kinds: tuple[str, ...] = ("d1", "d2")
    behavior_users: bool = False
    output_format: str = "csv"
    stages: tuple[str, ...] = STAGES[1:]

    def validate(self, require_source: bool = True) -> "PipelineConfig":
        if self.input is not None and self.scenario is not None:
            raise ConfigError("give either input or scenario, not both")
        if require_source and self.input is None and self.scenario is None:
            raise ConfigError("no input file or scenario configured")
        for key in ("input", "mapping"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{key} file not found: {value}")
        if self.output_format not in TABLE_FORMATS:
            raise ConfigError(f"output_format must be one of {sorted(TABLE_FORMATS)}")
        if not set(self.divergence_kinds) <= {"d1", "d2"} or not self.divergence_kinds:
            raise ConfigError("divergence_kinds must be a subset of d1, d2")
        if self.rank_mode not in ("ordinal", "score"):
            raise ConfigError("rank_mode must be 'ordinal' or 'score'")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stage(s): {sorted(unknown)}")
        if self.w < 1 or self.d2_share_window < 1:
            raise ConfigError("w and d2_share_window must be >= 1")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")
        if self.n_bootstrap < causal.MIN_BOOTSTRAP:
            raise ConfigError(f"n_bootstrap must be >= {causal.MIN_BOOTSTRAP}")
        if self.sax_L < 2 or self.k < 1 or self.sax_N % self.sax_mean_levels:
            raise ConfigError("invalid SAX parameters")
        if not 0 < self.alpha < 1 or self.tol <= 0:
            raise ConfigError("alpha must lie in (0, 1) and tol be positive")
        if self.weight not in ("amount", "count"):
            raise ConfigError("weight must be 'amount' or 'count'")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kw = {}
        for key, raw in values.items():
            if raw is None:
                continue
            default = known[key].default
            if key in ("start", "end", "intervention_date"):
                kw[key] = _date(raw)
            elif key == "events":
                kw[key] = tuple(_date(v) for v in _list(raw))
            elif key in ("control", "stages", "divergence_kinds"):
                kw[key] = _list(raw)
            elif isinstance(default, bool):
                kw[key] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path, section: str = "pipeline") -> "PipelineConfig":
        """Read a flat ``key = value`` INI file; relative paths resolve
        against the file's directory. ``TXRES_OUTPUT_DIR`` overrides
        ``output_dir``."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read(path, encoding="utf-8")
        if section not in parser:
            raise ConfigError(f"config file has no [{section}] section")
        values = dict(parser[section])
        for key in ("input", "mapping", "output_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(path.parent / values[key])
        if values.get("scenario"):
            p = path.parent / values["scenario"]
            if p.exists():
                values["scenario"] = str(p)
        cfg = cls.from_mapping(values)
        return cfg.with_env()

    def with_env(self) -> "PipelineConfig":
        env = os.environ.get(OUTPUT_ENV)
        return replace(self, output_dir=env) if env else self

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass
class StageReport:
    name: str
    status: str = "pending"
    seconds: float = 0.0
    counts: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    error: str | None = None


@dataclass
class RunReport:
    stages: list[StageReport]
    manifest: dict[str, str]

    @property
    def ok(self) -> bool:
        return all(s.status == "ok" for s in self.stages)

    def stage(self, name: str) -> StageReport:
        return next(s for s in self.stages if s.name == name)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "stages": [asdict(s) for s in self.stages], "manifest": self.manifest}


class _Context:
    """Output directory plus a cache of the loaded transaction table."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._table: TransactionTable | None = None

    def path(self, name: str) -> Path:
        return self.out / name

    def table(self) -> TransactionTable:
        if self._table is None:
            p = self.path("transactions.csv")
            if not p.is_file():
                raise FileNotFoundError(f"{p} missing; run the ingest or synth stage first")
            self._table = ingest_transactions(p, mapping=self.mapping()).table
        return self._table

    def mapping(self) -> MccMapping | None:
        return MccMapping.load(self.cfg.mapping) if self.cfg.mapping else None

    def reset_table(self) -> None:
        self._table = None

    def write(self, frame: pd.DataFrame, name: str, report: StageReport) -> None:
        """Result table in the configured format; ``name`` has no extension."""
        ext, writer = TABLE_FORMATS[self.cfg.output_format]
        frame = frame.assign(**{c: frame[c].dt.strftime("%Y-%m-%d") for c in frame.columns if pd.api.types.is_datetime64_any_dtype(frame[c])})
        writer(frame, self.path(name + ext))
        report.outputs.append(name + ext)

    def write_intermediate(self, frame: pd.DataFrame, name: str, report: StageReport) -> None:
        """Tables read back by later stages are always CSV."""
        write_table(frame, self.path(name))
        report.outputs.append(name)


# ---------------------------------------------------------------------------
# stages


def stage_synth(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    if cfg.scenario is None:
        raise ConfigError("synth needs a scenario")
    scen = synthgen.ScenarioConfig.load(cfg.scenario)
    res = synthgen.generate(scen, cfg.seed, n_jobs=cfg.n_jobs)
    ctx.write_intermediate(res.table.to_csv_frame(), "transactions.csv", rep)
    # later stages reload through the ingestion path, like file input
    ctx.reset_table()
    rep.counts.update(rows=len(res.table), agents=scen.n_agents, merchants=scen.n_merchants)


def stage_ingest(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    if cfg.scenario is not None:
        stage_synth(ctx, rep)
        rep.counts.update(rejected=0)
        return
    rng = None
    if cfg.start or cfg.end:
        rng = (cfg.start or dt.date(1900, 1, 1), cfg.end or dt.date(2199, 12, 31))
    res = ingest_transactions(cfg.input, mapping=ctx.mapping(), date_range=rng)
    ctx.write_intermediate(res.table.to_csv_frame(), "transactions.csv", rep)
    ctx.write(res.rejects, "rejects", rep)
    ctx.reset_table()
    table = ctx.table()
    rep.counts.update(read=res.n_read, rows=len(table), rejected=res.n_rejected)


def stage_demographics(ctx: _Context, rep: StageReport) -> None:
    s = demographics(ctx.table(), min_monthly=ctx.cfg.min_monthly)
    ids = s.amp_per_client.index
    amp = pd.DataFrame({"client": [behavior.hash_id(c) for c in ids], "amp": s.amp_per_client.to_numpy(), "class": s.class_assignment.reindex(ids).to_numpy()})
    ctx.write(amp.sort_values("client").reset_index(drop=True), "demographics_amp", rep)
    ctx.write(s.class_table.assign(gini=s.gini), "demographics_classes", rep)
    rep.counts.update(clients=len(amp), gini=round(s.gini, 6))


def stage_divergence(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    panel = SharePanel.from_table(ctx.table(), weight=cfg.weight)
    ctx.write(panel.share_frame(cfg.w), "shares", rep)
    ctx.write(pd.DataFrame({"coicop": np.arange(1, panel.mass.shape[2] + 1), "share": panel.country_reference()}), "country_reference", rep)
    for kind in cfg.divergence_kinds:
        det = divergence.DivergenceDetector(kind=kind, w=cfg.w, share_window=cfg.d2_share_window).fit(panel)
        long = det.transform(panel)
        ctx.write(long, f"divergence_{kind}", rep)
        series = det.series(panel)
        if sum(1 for s in series if len(s.values)) >= 4:
            ctx.write(divergence.divergence_panel(series).to_frame(), f"divergence_panel_{kind}", rep)
        rep.counts[f"{kind}_rows"] = len(long)


def _default_control(daily: pd.DataFrame) -> str:
    totals = daily.sum(axis=0)
    return str(totals.sort_values(ascending=False, kind="mergesort").index[0])


def stage_causal(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    daily = causal.district_daily_series(ctx.table(), weight=cfg.weight)
    control = list(cfg.control) if cfg.control else _default_control(daily)
    results = causal.causal_impact(
        daily, control, cfg.intervention_date,
        n_bootstrap=cfg.n_bootstrap, confidence=cfg.confidence, seed=cfg.seed,
    )
    table, counts = causal.classify_districts(results)
    ctx.write(table, "causal", rep)
    effects = pd.concat(
        [pd.DataFrame({"date": pd.DatetimeIndex(r.dates), "district_id": r.district_id, "observed": r.observed, "counterfactual": r.counterfactual, "effect": r.pointwise_effect}) for r in results],
        ignore_index=True,
    )
    ctx.write(effects, "causal_pointwise", rep)
    rep.counts.update(control=",".join(control) if isinstance(control, list) else control, **counts)


def stage_behavior(ctx: _Context, rep: StageReport) -> None:
    users = behavior.user_behavior(ctx.table())
    means = behavior.mean_ndcg(users)
    ctx.write(means, "behavior_mean_ndcg", rep)
    if ctx.cfg.behavior_users:
        out = users.assign(client_id=users["client_id"].map(behavior.hash_id)).rename(columns={"client_id": "client"})
        ctx.write(out, "behavior_users", rep)
    rep.counts.update(user_windows=len(users), district_weeks=len(means), max_residual=float(users["residual"].max()) if len(users) else 0.0)


def stage_graph(ctx: _Context, rep: StageReport) -> None:
    snaps = txgraph.build_snapshots(ctx.table(), half_width=ctx.cfg.half_width)
    edges = txgraph.edge_list(snaps)
    ctx.write_intermediate(edges.assign(t=pd.DatetimeIndex(edges["t"]).strftime("%Y-%m-%d")), "graph_edges.csv", rep)
    rep.counts.update(snapshots=len(snaps), edges=len(edges))


def _snapshots(ctx: _Context) -> list[txgraph.GraphSnapshot]:
    p = ctx.path("graph_edges.csv")
    if not p.is_file():
        raise FileNotFoundError(f"{p} missing; run the graph stage first")
    edges = read_table(p, dtype={"src": str, "dst": str})
    return txgraph.snapshots_from_edge_list(edges)


def stage_rank(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    panel = txgraph.rank_panel(_snapshots(ctx), alpha=cfg.alpha, tol=cfg.tol, mode=cfg.rank_mode, n_jobs=cfg.n_jobs)
    long = txgraph.rank_long(panel)
    ctx.write_intermediate(long.assign(date=pd.DatetimeIndex(long["date"]).strftime("%Y-%m-%d")), "ranks.csv", rep)
    rep.counts.update(dates=panel.shape[0], merchants=panel.shape[1])


def stage_cluster(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    p = ctx.path("ranks.csv")
    if not p.is_file():
        raise FileNotFoundError(f"{p} missing; run the rank stage first")
    panel = txgraph.rank_panel_from_long(read_table(p, dtype={"merchant_id": str}))
    model = sax.TrajectoryClusterer(n_clusters=cfg.k, segment_length=cfg.sax_L, alphabet_size=cfg.sax_N, mean_levels=cfg.sax_mean_levels, min_presence=cfg.min_presence, seed=cfg.seed).fit(panel)
    assign = model.assignments()
    ctx.write(assign, "clusters", rep)
    ctx.write(model.centroid_profiles(), "cluster_centroids", rep)
    X, _, _ = sax.prepare_trajectories(panel, cfg.min_presence)
    ks = sorted({*range(2, 11), cfg.k})
    Ls = sorted({5, 10, 15, 20, 30, cfg.sax_L})
    grid, best = sax.silhouette_grid(X, ks, [L for L in Ls if L <= X.shape[1]], seed=cfg.seed, mean_levels=cfg.sax_mean_levels, alphabet_size=cfg.sax_N)
    ctx.write(grid, "silhouette", rep)
    table = ctx.table()
    labels = assign.set_index("merchant_id")["cluster"]
    comp_cat, miss = sax.composition(labels, table.merchant_categories())
    comp_dist, _ = sax.composition(labels, table.merchant_districts())
    ctx.write(comp_cat, "cluster_composition_category", rep)
    ctx.write(comp_dist, "cluster_composition_district", rep)
    rep.counts.update(clustered=len(assign), best_k=best[0], best_L=best[1], missing_metadata=miss, **{f"dropped_{k}": v for k, v in model.dropped_.items()})


def stage_core(ctx: _Context, rep: StageReport) -> None:
    cfg = ctx.cfg
    snaps = [s for s in _snapshots(ctx) if s.n_vertices]
    parts = [corestructure.rich_core(s) for s in snaps]
    series = corestructure.core_size_series(parts)
    ctx.write(series.to_frame().assign(date=lambda d: d["date"].dt.strftime("%Y-%m-%d")), "core_size", rep)
    if cfg.events:
        z = corestructure.zscore_events(series, cfg.events)
        ctx.write(z.assign(date=z["date"].dt.strftime("%Y-%m-%d")), "core_events", rep)
    if series.sizes.size >= 8 and series.std > 0:
        ks = corestructure.ks_normal(series.sizes)
        ctx.write(pd.DataFrame([{"D": ks.statistic, "p_value": ks.pvalue, "mean": ks.loc, "std": ks.scale, "n": series.sizes.size}]), "core_ks", rep)
    cats = ctx.table().merchant_categories()
    frac = pd.concat(
        [corestructure.core_category_fraction(p, cats).rename_axis("coicop").reset_index().assign(date=pd.Timestamp(p.date).strftime("%Y-%m-%d")) for p in parts],
        ignore_index=True,
    )
    ctx.write(frac[["date", "coicop", "fraction"]], "core_categories", rep)
    if len(snaps) >= 2:
        trans, mass = corestructure.shell_dynamics(snaps)
        ctx.write(trans, "shell_transitions", rep)
        ctx.write(mass.assign(date=mass["date"].dt.strftime("%Y-%m-%d")), "shell_mass", rep)
    rep.counts.update(snapshots=len(parts), mean_core=round(series.mean, 6), std_core=round(series.std, 6), maximal=all(p.is_maximal() for p in parts))


STAGE_FUNCS: dict[str, Callable[[_Context, StageReport], None]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "demographics": stage_demographics,
    "divergence": stage_divergence,
    "causal": stage_causal,
    "behavior": stage_behavior,
    "graph": stage_graph,
    "rank": stage_rank,
    "cluster": stage_cluster,
    "core": stage_core,
}


def run_stages(cfg: PipelineConfig, stages=None, write_manifest: bool = True) -> RunReport:
    """Run ``stages`` (default: the configured ones) in dependency order.

    A failing stage is recorded and its dependents are skipped; the others
    still run. Stages not requested are assumed to have produced their
    outputs in an earlier invocation.
    """
    stages = tuple(stages) if stages is not None else cfg.stages
    ctx = _Context(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    reports: list[StageReport] = []
    failed: set[str] = set()
    for name in STAGES:
        if name not in stages:
            continue
        rep = StageReport(name)
        reports.append(rep)
        blocked = [d for d in DEPENDS[name] if d in failed]
        if blocked:
            rep.status = "skipped"
            rep.error = f"dependency failed: {', '.join(blocked)}"
            failed.add(name)
            logger.warning("stage=%s status=skipped reason=%r", name, rep.error)
            continue
        t0 = time.perf_counter()
        try:
            STAGE_FUNCS[name](ctx, rep)
            rep.status = "ok"
        except Exception as exc:  # isolate stage failures
            rep.status = "failed"
            rep.error = f"{type(exc).__name__}: {exc}"
            failed.add(name)
            logger.error("stage=%s status=failed error=%r", name, rep.error)
            logger.debug("%s", traceback.format_exc())
        rep.seconds = round(time.perf_counter() - t0, 3)
        if rep.status == "ok":
            logger.info("stage=%s status=ok seconds=%.3f counts=%s", name, rep.seconds, rep.counts)
    outputs = sorted({o for r in reports for o in r.outputs})
    manifest = build_manifest(ctx.out, outputs)
    if write_manifest and set(stages) != set(STAGES[1:]):
        # partial run: keep entries of earlier stages whose files still exist
        old = ctx.path("manifest.json")
        if old.is_file():
            prev = json.loads(old.read_text("utf-8"))
            kept = [f for f in prev if f not in manifest and ctx.path(f).is_file()]
            manifest = dict(sorted({**build_manifest(ctx.out, kept), **manifest}.items()))
    report = RunReport(reports, manifest)
    if write_manifest:
        write_json(manifest, ctx.path("manifest.json"))
        write_json({"config": cfg.to_dict(), **report.to_dict()}, ctx.path("report.json"))
    return report


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Validate ``cfg`` and run every configured stage."""
    return run_stages(cfg.validate())
