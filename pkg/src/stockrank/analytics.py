"""Risk and performance metrics over backtest ledgers.

Conventions: 252 trading days per year, geometric annualization, sample
(n-1) standard deviations, Sharpe annualized by sqrt(252) with the
*portfolio* volatility in the denominator (not the excess volatility).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from .backtest import BacktestLedger
from .errors import DataError, NumericError

TRADING_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class MetricsReport:
    """One strategy's metric row; undefined metrics are None with a flag."""

    final_value: float
    annual_return: float
    sharpe: float | None
    max_drawdown: float
    mdd_duration_days: int
    t_value: float | None
    p_value: float | None
    flags: tuple[str, ...] = ()

    def to_json(self) -> str:
        payload = asdict(self)
        payload["flags"] = list(self.flags)
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        payload = json.loads(text)
        payload["flags"] = tuple(payload["flags"])
        return MetricsReport(**payload)


def sharpe_ratio(portfolio_returns, rf_daily=0.0) -> float:
    """Annualized mean excess return over portfolio volatility."""
    r = np.asarray(portfolio_returns, dtype=np.float64)
    if r.size < 2:
        raise NumericError(f"sharpe ratio needs >= 2 days, got {r.size}")
    rf = np.broadcast_to(np.asarray(rf_daily, dtype=np.float64), r.shape)
    sigma = r.std(ddof=1)
    if sigma == 0.0:
        raise NumericError("sharpe ratio undefined: zero return volatility")
    return float((r - rf).mean() / sigma * math.sqrt(TRADING_DAYS_PER_YEAR))


def annualize_return(final_value: float, n_days: int) -> float:
    """Geometric annualization of a total-value ratio over n trading days."""
    if final_value <= 0:
        raise NumericError(f"final value must be positive, got {final_value}")
    if n_days < 1:
        raise NumericError(f"n_days must be >= 1, got {n_days}")
    return float(final_value ** (TRADING_DAYS_PER_YEAR / n_days) - 1.0)


def max_drawdown(values) -> tuple[float, int, int]:
    """Worst peak-to-trough NAV decline.

    Returns (drawdown <= 0, peak index, trough index); indices are 0-based
    positions in the series, with the first of any tied troughs reported.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise NumericError("max_drawdown of an empty series")
    peak_idx = 0
    best_dd = 0.0
    best_peak = 0
    best_trough = 0
    for i in range(v.size):
        if v[i] > v[peak_idx]:
            peak_idx = i
        dd = v[i] / v[peak_idx] - 1.0
        if dd < best_dd:
            best_dd = dd
            best_peak = peak_idx
            best_trough = i
    return float(best_dd), best_peak, best_trough


def mdd_duration(values) -> int:
    """Longest stretch (days) from a NAV peak back to that level.

    A final episode that never recovers is censored at the last day.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise NumericError("mdd_duration of an empty series")
    peak_idx = 0
    in_drawdown = False
    longest = 0
    for i in range(1, v.size):
        if v[i] >= v[peak_idx]:
            if in_drawdown:
                longest = max(longest, i - peak_idx)
                in_drawdown = False
            peak_idx = i
        else:
            in_drawdown = True
    if in_drawdown:
        longest = max(longest, (v.size - 1) - peak_idx)
    return int(longest)


def t_test_vs_market(strategy_returns, market_returns, paired: bool = True) -> tuple[float, float]:
    """t statistic and two-sided p-value of strategy vs benchmark returns.

    Paired (default): one-sample t on the daily differences. Unpaired:
    Welch's two-sample t. p-values use the Student-t CDF.
    """
    a = np.asarray(strategy_returns, dtype=np.float64)
    b = np.asarray(market_returns, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"return series must be equal-length 1-D, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise NumericError("t-test needs at least 2 observations")
    if paired:
        d = a - b
        sd = d.std(ddof=1)
        if sd == 0.0:
            if d.mean() == 0.0:
                return 0.0, 1.0  # identical series: no evidence either way
            raise NumericError("t-test undefined: zero variance of differences")
        t = d.mean() / (sd / math.sqrt(n))
        dof = n - 1
    else:
        va, vb = a.var(ddof=1), b.var(ddof=1)
        if va == 0.0 and vb == 0.0:
            raise NumericError("t-test undefined: both series have zero variance")
        se2 = va / n + vb / n
        t = (a.mean() - b.mean()) / math.sqrt(se2)
        dof = se2**2 / ((va / n) ** 2 / (n - 1) + (vb / n) ** 2 / (n - 1))
    p = float(2.0 * sps.t.sf(abs(t), dof))
    return float(t), p


def build_report(
    ledger: BacktestLedger,
    market_ledger: BacktestLedger | None = None,
    rf_daily=0.0,
    paired_t: bool = True,
) -> MetricsReport:
    """Assemble the full metric row for one ledger."""
    returns = np.asarray(ledger.daily_returns, dtype=np.float64)
    values = np.asarray(ledger.values, dtype=np.float64)
    if returns.size == 0:
        raise DataError("ledger is empty")
    flags: list[str] = []

    try:
        sharpe = sharpe_ratio(returns, rf_daily)
    except NumericError:
        sharpe = None
        flags.append("sharpe_undefined")

    dd, _peak, _trough = max_drawdown(values)
    t_value = p_value = None
    if market_ledger is not None:
        if market_ledger.dates != ledger.dates:
            raise DataError("market ledger does not cover the same dates")
        try:
            t_value, p_value = t_test_vs_market(
                returns, np.asarray(market_ledger.daily_returns), paired=paired_t
            )
            if returns.size < 30:
                flags.append("small_sample_t")
        except NumericError:
            flags.append("t_test_undefined")

    return MetricsReport(
        final_value=float(values[-1]),
        annual_return=annualize_return(float(values[-1]), returns.size),
        sharpe=sharpe,
        max_drawdown=dd,
        mdd_duration_days=mdd_duration(values),
        t_value=t_value,
        p_value=p_value,
        flags=tuple(flags),
    )


#: Row labels of the strategy metric grid, in output order.
GRID_ROWS = (
    "Final Value",
    "Annual Return",
    "Top 10 SR",
    "Bottom 10 SR",
    "Long-Short 10 SR",
    "Top Decile SR",
    "Bottom Decile SR",
    "Long-Short Decile SR",
)

_GRID_SOURCES = {
    "Top 10 SR": "topk",
    "Bottom 10 SR": "bottomk",
    "Long-Short 10 SR": "long_short_k",
    "Top Decile SR": "top_decile",
    "Bottom Decile SR": "bottom_decile",
    "Long-Short Decile SR": "long_short_decile",
}


def build_metric_grid(ledgers: dict[str, BacktestLedger], rf_daily=0.0) -> dict[str, float | None]:
    """Headline grid: final value and annual return of the top-k portfolio
    plus Sharpe ratios of every strategy variant present."""
    if "topk" not in ledgers:
        raise DataError("metric grid needs at least the topk ledger")
    top = ledgers["topk"]
    grid: dict[str, float | None] = {
        "Final Value": top.final_value,
        "Annual Return": annualize_return(top.final_value, len(top.daily_returns)),
    }
    for row, strategy in _GRID_SOURCES.items():
        led = ledgers.get(strategy)
        if led is None:
            grid[row] = None
            continue
        try:
            grid[row] = sharpe_ratio(np.asarray(led.daily_returns), rf_daily)
        except NumericError:
            grid[row] = None
    return grid


def grid_to_csv(grids: dict[str, dict[str, float | None]], path: str) -> None:
    """Write one column per model, one row per GRID_ROWS label."""
    models = sorted(grids)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Metric"] + models)
        for row in GRID_ROWS:
            writer.writerow([row] + [
                ("" if grids[m].get(row) is None else repr(grids[m][row])) for m in models
            ])


def load_risk_free(path: str | None, calendar: list[dt.date]) -> np.ndarray:
    """Daily risk-free rates aligned to a calendar.

    The CSV holds ``date,annual_rate`` rows; each calendar day takes the
    most recent known annual rate divided by 252. Missing file means zero.
    """
    if path is None:
        return np.zeros(len(calendar))
    known: list[tuple[dt.date, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "annual_rate"]:
            raise DataError(f"{path}: expected header date,annual_rate")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns")
            try:
                known.append((dt.date.fromisoformat(row[0].strip()), float(row[1])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    known.sort()
    if not known:
        return np.zeros(len(calendar))
    out = np.zeros(len(calendar))
    rates = [r for _, r in known]
    dates = [d for d, _ in known]
    for i, day in enumerate(calendar):
        pos = np.searchsorted(np.array(dates, dtype="datetime64[D]"),
                              np.datetime64(day, "D"), side="right") - 1
        out[i] = rates[pos] / TRADING_DAYS_PER_YEAR if pos >= 0 else 0.0
    return out
