"""End-to-end walk-forward driver: data -> features -> train -> backtest -> report.

Stages are separable (the CLI exposes each) but share this module's
artifact layout under one output directory:

    config.resolved.json      validated config actually used
    panel.csv                 feature panel (features stage only)
    checkpoints/period_NNN.ens   ensemble checkpoint after each period
    scores/scores.csv         per (ensemble, date, ticker) ranking scores
    ledgers/<name>.csv        one ledger per strategy (+ market)
    report/nav_<name>.csv     NAV curves
    report/metrics.json       metric reports per strategy vs market
    report/grid.csv           headline strategy grid
    manifest.json             config hash + artifact checksums
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import os
from contextlib import contextmanager

import numpy as np

from . import __version__
from .analytics import build_metric_grid, build_report, grid_to_csv, load_risk_free
from .backtest import BacktestLedger, combine_strategies, rank_for_day, simulate
from .config import RunConfig
from .dataset import LOOKAHEAD, build_split_plans, make_samples, return_matrix
from .errors import ConfigError, DataError
from .indicators import assemble_panel, make_spec
from .market_data import Universe, apply_dead_stock_rule, filter_by_dollar_volume, load_ohlcv
from .models import (
    ArchConfig,
    EnsembleState,
    TrainConfig,
    build_model,
    ensemble_weights,
    predict_batch,
    save_ensemble,
    train_period,
)

SCORES_HEADER = ["ensemble", "period", "date", "ticker", "score"]


@contextmanager
def run_lock(out_dir: str):
    """One process owns a run directory at a time."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {out_dir} is locked by another process "
                          f"(remove {lock_path} if that process is gone)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


def load_universe(cfg: RunConfig) -> Universe:
    start = dt.date.fromisoformat(cfg.start) if cfg.start else None
    end = dt.date.fromisoformat(cfg.end) if cfg.end else None
    u = load_ohlcv(cfg.ohlcv_path, cfg.sector_path, start=start, end=end,
                   price_floor=cfg.price_floor)
    u = filter_by_dollar_volume(u, cfg.dollar_volume_floor)
    return apply_dead_stock_rule(u, cfg.price_floor)


def build_panel(cfg: RunConfig, universe: Universe):
    specs = [make_spec(name) for name in cfg.technical]
    return assemble_panel(universe, basic=cfg.use_basic, specs=specs)


def plan_periods(cfg: RunConfig, panel) -> list:
    try:
        plans = build_split_plans(
            len(panel.dates),
            m=cfg.m,
            std_days=cfg.std_days,
            trainval_days=cfg.trainval_days,
            test_days=cfg.test_days,
            offset=panel.first_all_valid_day,
        )
    except DataError as exc:
        # the window scheme is configuration; not fitting the data is a
        # config infeasibility, caught before any training compute
        raise ConfigError(str(exc)) from exc
    if cfg.max_periods is not None:
        plans = plans[: cfg.max_periods]
    return plans


def _member_seeds(cfg: RunConfig) -> np.ndarray:
    ss = np.random.SeedSequence(cfg.seed)
    return ss.generate_state(cfg.n_ensembles * cfg.n_members, dtype=np.uint64)


def _arch_from_config(cfg: RunConfig, n_features: int) -> ArchConfig:
    hp = TrainConfig.for_loss(cfg.loss)
    return ArchConfig(
        m=cfg.m,
        n=n_features,
        conv=tuple(tuple(c) for c in cfg.conv),
        dense=tuple(cfg.dense),
        dropout=hp.dropout if cfg.dropout is None else cfg.dropout,
        leaky_slope=cfg.leaky_slope,
        loss=cfg.loss,
    )


def _scores_from_outputs(outputs: np.ndarray, classification: bool) -> np.ndarray:
    if classification:
        return outputs @ np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    return outputs[:, 0]


def _alive_tickers(universe: Universe, anchor: int) -> list[str]:
    """Stocks not yet dead at the buy open (day anchor + 1)."""
    alive = []
    buy_day = universe.calendar[anchor + 1]
    for s in universe.stocks:
        if s.death_date is None or s.death_date > buy_day:
            alive.append(s.ticker)
    return alive


def train_walk_forward(cfg: RunConfig, universe: Universe, panel, plans,
                       log=lambda msg: None) -> dict:
    """Train all ensembles across the walk-forward periods.

    Returns {"ensembles": [EnsembleState...], "scores": scores_rows,
    "rankings": {ensemble_index: [DailyRanking...]}, "histories": [...]}
    where scores_rows feed scores.csv.
    """
    arch = _arch_from_config(cfg, panel.n_features)
    hp_overrides = {"batch_size": cfg.batch_size, "max_epochs": cfg.max_epochs}
    if cfg.dropout is not None:
        hp_overrides["dropout"] = cfg.dropout
    hp = TrainConfig.for_loss(cfg.loss, **hp_overrides)
    seeds = _member_seeds(cfg)
    ensembles = []
    for e in range(cfg.n_ensembles):
        members = [
            build_model(arch, int(seeds[e * cfg.n_members + i]))
            for i in range(cfg.n_members)
        ]
        ensembles.append(EnsembleState(members=members, combine_mode=cfg.combine_mode,
                                       window=cfg.moe_window))
    log(f"model parameter count: {ensembles[0].members[0].param_count}")

    scores_rows: list[tuple] = []
    rankings: dict[int, list] = {e: [] for e in range(cfg.n_ensembles)}
    histories: list[dict] = []
    classification = arch.loss_kind.classification

    for plan in plans:
        samples = make_samples(panel, universe, plan, m=cfg.m,
                               thresholds=cfg.label_thresholds, cap=cfg.return_cap,
                               val_days=cfg.val_days)
        test = samples["test"]
        test_days = sorted(set(test.anchor_days.tolist()))
        for e, ens in enumerate(ensembles):
            period_histories = []
            for mi, member in enumerate(ens.members):
                hist = train_period(member, samples["train"], samples["val"], hp)
                period_histories.append(hist)
                log(f"period {plan.period_index} ensemble {e} member {mi}: "
                    f"{hist['epochs']} epochs, val loss {hist['val_loss'][-1]:.6g}")
            histories.append({"period": plan.period_index, "ensemble": e,
                              "members": period_histories})

            weights = ensemble_weights(ens)
            member_outputs = [
                predict_batch(m, test.windows, test.sector_ids) for m in ens.members
            ]
            ens_outputs = np.tensordot(weights, np.stack(member_outputs), axes=1)
            ens_scores = _scores_from_outputs(ens_outputs, classification)

            # per-day rankings for the strategy simulations
            per_day_scores: dict[int, dict[str, float]] = {d: {} for d in test_days}
            for i in range(len(test)):
                per_day_scores[int(test.anchor_days[i])][test.tickers[i]] = float(ens_scores[i])
            period_rankings = []
            for d in test_days:
                date = panel.dates[d]
                ranking = rank_for_day(date, per_day_scores[d])
                period_rankings.append((d, ranking))
                for ticker, sc in ranking.entries:
                    scores_rows.append((e, plan.period_index, date.isoformat(), ticker, sc))
            rankings[e].extend(period_rankings)

            # each member's own top-k return this period drives next period's weights
            returns_by_day = _returns_for_days(universe, test_days)
            member_period_returns = []
            for outputs in member_outputs:
                m_scores = _scores_from_outputs(outputs, classification)
                m_day_scores: dict[int, dict[str, float]] = {d: {} for d in test_days}
                for i in range(len(test)):
                    m_day_scores[int(test.anchor_days[i])][test.tickers[i]] = float(m_scores[i])
                m_rankings = [rank_for_day(panel.dates[d], m_day_scores[d]) for d in test_days]
                led = simulate("topk", m_rankings, returns_by_day, k=cfg.k,
                               rebalance_mode=cfg.rebalance_mode)
                member_period_returns.append(led.final_value - 1.0)
            ens.record_period_returns(member_period_returns)
    return {"ensembles": ensembles, "scores": scores_rows, "rankings": rankings,
            "histories": histories, "param_count": ensembles[0].members[0].param_count}


def _returns_for_days(universe: Universe, anchors: list[int]) -> list[dict[str, float]]:
    rmat = return_matrix(universe)
    tickers = universe.tickers
    return [
        {tickers[si]: float(rmat[si, d]) for si in range(universe.n_stocks)}
        for d in anchors
    ]


def run_strategies(cfg: RunConfig, universe: Universe, panel,
                   rankings: dict[int, list]) -> dict[str, BacktestLedger]:
    """Simulate the configured strategies over all collected test days.

    With several ensembles, each strategy is simulated per ensemble and
    the ledgers are integrated with equal weights.
    """
    ledgers: dict[str, BacktestLedger] = {}
    anchor_days = [d for d, _ in rankings[0]]
    returns_by_day = _returns_for_days(universe, anchor_days)
    alive_by_day = [_alive_tickers(universe, d) for d in anchor_days]
    for strategy in cfg.strategies:
        per_ensemble = []
        for e in sorted(rankings):
            ranks = [r for _, r in rankings[e]]
            per_ensemble.append(
                simulate(strategy, ranks, returns_by_day, k=cfg.k,
                         alive_by_day=alive_by_day, rebalance_mode=cfg.rebalance_mode)
            )
        led = per_ensemble[0] if len(per_ensemble) == 1 else combine_strategies(per_ensemble)
        led.strategy = strategy
        ledgers[strategy] = led
    if "market_equal_weight" not in ledgers:
        ranks = [r for _, r in rankings[0]]
        ledgers["market_equal_weight"] = simulate(
            "market_equal_weight", ranks, returns_by_day, alive_by_day=alive_by_day
        )
    return ledgers


def write_scores_csv(scores_rows: list[tuple], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for row in scores_rows:
            writer.writerow([row[0], row[1], row[2], row[3], repr(row[4])])


def read_scores_csv(path: str) -> dict[int, list]:
    """Rebuild per-ensemble daily rankings from a scores.csv."""
    from .backtest import DailyRanking

    per_day: dict[tuple[int, str], dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise DataError(f"{path}: not a scores file")
        for row in reader:
            e, _period, date, ticker, sc = int(row[0]), row[1], row[2], row[3], float(row[4])
            per_day.setdefault((e, date), {})[ticker] = sc
    rankings: dict[int, list] = {}
    for (e, date) in sorted(per_day):
        entries = tuple(sorted(per_day[(e, date)].items(), key=lambda kv: (-kv[1], kv[0])))
        rankings.setdefault(e, []).append(
            (date, DailyRanking(date=dt.date.fromisoformat(date), entries=entries))
        )
    # replace date keys by panel day indices later; callers only need order
    return rankings


def write_report(cfg: RunConfig, ledgers: dict[str, BacktestLedger], out_dir: str,
                 extra: dict | None = None) -> dict:
    report_dir = os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    market = ledgers["market_equal_weight"]
    rf = np.zeros(len(market.daily_returns))
    if cfg.rf_path:
        rf = load_risk_free(cfg.rf_path, list(market.dates))

    reports = {}
    for name, led in sorted(ledgers.items()):
        bench = market if name != "market_equal_weight" else None
        reports[name] = json.loads(
            build_report(led, bench, rf_daily=rf, paired_t=cfg.paired_t_test).to_json()
        )
        led.nav_to_csv(os.path.join(report_dir, f"nav_{name}.csv"))

    grid = build_metric_grid(
        {k: v for k, v in ledgers.items() if k != "market_equal_weight"}, rf_daily=rf
    ) if "topk" in ledgers else {}
    payload = {
        "model": cfg.loss,
        "n_test_days": len(market.daily_returns),
        "strategies": reports,
        "grid": grid,
    }
    if extra:
        payload.update(extra)
    with open(os.path.join(report_dir, "metrics.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if grid:
        grid_to_csv({cfg.loss: grid}, os.path.join(report_dir, "grid.csv"))
    return payload


def write_manifest(cfg: RunConfig, out_dir: str) -> None:
    entries = {}
    for root, _dirs, files in os.walk(out_dir):
        for name in sorted(files):
            if name in ("manifest.json", ".lock"):
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            with open(path, "rb") as fh:
                entries[rel] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "config_sha256": cfg.sha256(),
        "package_version": __version__,
        "artifacts": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_pipeline(cfg: RunConfig, out_dir: str, log=lambda msg: None) -> dict:
    """The full walk-forward loop, producing every artifact."""
    universe = load_universe(cfg)
    log(f"universe: {universe.n_stocks} stocks x {universe.n_days} days")
    panel = build_panel(cfg, universe)
    plans = plan_periods(cfg, panel)  # fail-fast before training
    log(f"walk-forward periods: {len(plans)}")

    with run_lock(out_dir):
        with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
            fh.write(cfg.to_json())
            fh.write("\n")
        result = train_walk_forward(cfg, universe, panel, plans, log=log)

        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        for e, ens in enumerate(result["ensembles"]):
            save_ensemble(ens, os.path.join(ckpt_dir, f"ensemble_{e}.ens"))

        scores_dir = os.path.join(out_dir, "scores")
        os.makedirs(scores_dir, exist_ok=True)
        write_scores_csv(result["scores"], os.path.join(scores_dir, "scores.csv"))

        ledgers = run_strategies(cfg, universe, panel, result["rankings"])
        ledger_dir = os.path.join(out_dir, "ledgers")
        os.makedirs(ledger_dir, exist_ok=True)
        for name, led in sorted(ledgers.items()):
            led.to_csv(os.path.join(ledger_dir, f"{name}.csv"))

        payload = write_report(cfg, ledgers, out_dir, extra={
            "periods": len(plans),
            "param_count": result["param_count"],
        })
        write_manifest(cfg, out_dir)
    return payload
