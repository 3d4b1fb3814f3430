"""Walk-forward splits, per-stock standardization, labels, and weights.

Day indices below always refer to the feature panel's calendar. For an
anchor day T, the prediction target is the open-to-open return from day
T+1 to day T+2, so the last usable anchor needs two future opens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .indicators import FeaturePanel
from .market_data import StockSeries, Universe

STD_DAYS = 200
TRAINVAL_DAYS = 200
TEST_DAYS = 20
TRAIN_DAYS = 180  # leading part of the train/val window; the rest validates
LOOKAHEAD = 2  # opens at T+1 and T+2 label anchor day T
SIGMA_EPS = 1e-8
RETURN_CAP = 0.5
LABEL_NAMES = ("strong_sell", "sell", "hold", "buy", "strong_buy")
N_CLASSES = 5
DEFAULT_THRESHOLDS = (0.01, 0.03)


@dataclass(frozen=True)
class SplitPlan:
    """Half-open day-index ranges for one walk-forward period."""

    period_index: int
    std_range: tuple[int, int]
    trainval_range: tuple[int, int]
    test_range: tuple[int, int]

    def __post_init__(self):
        s0, s1 = self.std_range
        t0, t1 = self.trainval_range
        e0, e1 = self.test_range
        if not (s0 < s1 and t0 < t1 and e0 < e1):
            raise DataError(f"split plan ranges must be non-empty: {self}")
        if not (s1 == t0 and t1 == e0):
            raise DataError(f"split plan ranges are not contiguous: {self}")


@dataclass(frozen=True)
class StandardizationStats:
    """Per (stock, feature) mean and standard deviation over the std range."""

    mean: np.ndarray  # (n_stocks, n_features)
    std: np.ndarray  # (n_stocks, n_features), >= 0


@dataclass(frozen=True)
class Sample:
    """One (stock, day) training example."""

    ticker: str
    anchor_day: int
    window: np.ndarray  # (m, n) standardized features, chronological rows
    label: np.ndarray  # one-hot 5-vector
    r_d: float  # realized next-day open-to-open return
    weight: float  # |r| capped at RETURN_CAP
    sector_id: int


class SampleSet:
    """Columnar batch of samples; indexable back into Sample objects."""

    def __init__(self, tickers, anchor_days, windows, labels, returns, weights, sector_ids):
        self.tickers = list(tickers)
        self.anchor_days = np.asarray(anchor_days, dtype=int)
        self.windows = np.asarray(windows, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.returns = np.asarray(returns, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.sector_ids = np.asarray(sector_ids, dtype=int)

    def __len__(self) -> int:
        return len(self.tickers)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            ticker=self.tickers[i],
            anchor_day=int(self.anchor_days[i]),
            window=self.windows[i],
            label=self.labels[i],
            r_d=float(self.returns[i]),
            weight=float(self.weights[i]),
            sector_id=int(self.sector_ids[i]),
        )


def build_split_plans(
    calendar_len: int,
    m: int = 20,
    std_days: int = STD_DAYS,
    trainval_days: int = TRAINVAL_DAYS,
    test_days: int = TEST_DAYS,
    offset: int = 0,
) -> list[SplitPlan]:
    """All walk-forward plans that fit on a calendar of the given length.

    With defaults, plan 0 standardizes on days [0, 200), trains/validates
    on [200, 400), and tests on [400, 420); each later plan shifts
    everything 20 days. A plan is kept only while its last test anchor
    still has the two future opens its label needs. ``offset`` shifts all
    ranges forward (used when leading days are feature warmup).
    """
    minimum = offset + std_days + trainval_days + test_days + (m - 1) + LOOKAHEAD
    if calendar_len < minimum:
        raise DataError(
            f"calendar has {calendar_len} days; walk-forward needs at least {minimum}"
        )
    plans = []
    period = 0
    while True:
        s0 = offset + period * test_days
        t0 = s0 + std_days
        e0 = t0 + trainval_days
        e1 = e0 + test_days
        if e1 - 1 + LOOKAHEAD >= calendar_len:
            break
        plans.append(
            SplitPlan(
                period_index=period,
                std_range=(s0, t0),
                trainval_range=(t0, e0),
                test_range=(e0, e1),
            )
        )
        period += 1
    return plans


def standardize(
    panel: FeaturePanel, plan: SplitPlan
) -> tuple[np.ndarray, StandardizationStats]:
    """Standardize the plan's span with stats from its std range.

    Returns the standardized slice covering days [std_start, test_end) and
    the per-(stock, feature) stats. Stats use the population standard
    deviation; sigma below SIGMA_EPS is clamped so constant features map
    to large finite values instead of crashing.
    """
    s0, s1 = plan.std_range
    if int(panel.valid_start.max()) > s0:
        raise DataError(
            f"std range starts at day {s0} but some features are valid only "
            f"from day {int(panel.valid_start.max())}"
        )
    base = panel.values[:, s0:s1, :]
    mean = base.mean(axis=1)
    std = base.std(axis=1)
    stats = StandardizationStats(mean=mean, std=std)
    span = panel.values[:, s0 : plan.test_range[1], :]
    scaled = (span - mean[:, None, :]) / np.maximum(std, SIGMA_EPS)[:, None, :]
    return scaled, stats


def daily_return(s: StockSeries, T: int) -> float:
    """Open-to-open fractional return attributed to anchor day T.

    r = (open[T+2] - open[T+1]) / open[T+1]; forced to 0 once the stock is
    dead by day T+2 (its quotes are no longer tradeable).
    """
    if T < 0 or T + LOOKAHEAD >= len(s.bars):
        raise DataError(f"anchor day {T} needs opens at days {T + 1} and {T + 2}")
    if s.death_date is not None and s.bars[T + 2].date >= s.death_date:
        return 0.0
    o1 = s.bars[T + 1].open
    o2 = s.bars[T + 2].open
    return (o2 - o1) / o1


def return_matrix(u: Universe) -> np.ndarray:
    """(n_stocks, n_days - 2) matrix of daily_return over all valid anchors."""
    out = np.empty((u.n_stocks, u.n_days - LOOKAHEAD), dtype=np.float64)
    for si, s in enumerate(u.stocks):
        opens = s.opens()
        r = (opens[2:] - opens[1:-1]) / opens[1:-1]
        if s.death_date is not None:
            dates = [b.date for b in s.bars]
            dead_from = dates.index(s.death_date)
            # anchor T is zeroed when day T+2 is on/after the death date
            r[max(0, dead_from - LOOKAHEAD) :] = 0.0
        out[si] = r
    return out


def assign_label(r: float, thresholds: tuple[float, float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """Map a return to its one-hot class vector.

    Boundaries: r >= hi is strong buy, lo < r < hi buy, -lo < r <= lo hold,
    -hi < r <= -lo sell, r <= -hi strong sell (lo, hi = 1%, 3% by default).
    """
    if not np.isfinite(r):
        raise DataError(f"non-finite return {r!r}")
    lo, hi = thresholds
    if not 0 < lo < hi:
        raise DataError(f"label thresholds must satisfy 0 < lo < hi, got {thresholds}")
    if r >= hi:
        idx = 4
    elif r > lo:
        idx = 3
    elif r > -lo:
        idx = 2
    elif r > -hi:
        idx = 1
    else:
        idx = 0
    out = np.zeros(N_CLASSES, dtype=np.float64)
    out[idx] = 1.0
    return out


def cap_return(r: float, cap: float = RETURN_CAP) -> float:
    """Loss weight: |r| clipped at the cap (0.5 by default)."""
    if not np.isfinite(r):
        raise DataError(f"non-finite return {r!r}")
    return min(abs(r), cap)


def make_samples(
    panel: FeaturePanel,
    universe: Universe,
    plan: SplitPlan,
    m: int = 20,
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS,
    cap: float = RETURN_CAP,
    val_days: int = TRAINVAL_DAYS - TRAIN_DAYS,
) -> dict[str, SampleSet]:
    """Build train/val/test SampleSets for one walk-forward period.

    The train/val window is split temporally: its trailing ``val_days``
    anchors validate (20 by default, so 180 train / 20 val), everything
    before them trains. Windows may reach back into the std range (those
    days are standardized with the same stats).
    """
    if panel.tickers != universe.tickers:
        raise DataError("panel and universe list different tickers")
    scaled, _ = standardize(panel, plan)
    offset = plan.std_range[0]  # scaled[:, d - offset, :] is panel day d
    returns = return_matrix(universe)

    t0, t1 = plan.trainval_range
    e0, e1 = plan.test_range
    if not 0 < val_days < t1 - t0:
        raise DataError(f"val_days must be inside the train/val window, got {val_days}")
    ranges = {
        "train": range(t0, t1 - val_days),
        "val": range(t1 - val_days, t1),
        "test": range(e0, e1),
    }
    out: dict[str, SampleSet] = {}
    for split, anchors in ranges.items():
        tickers, days, windows, labels, rets, weights, sectors = [], [], [], [], [], [], []
        for si, stock in enumerate(universe.stocks):
            for T in anchors:
                if T - m + 1 < offset:
                    raise DataError(
                        f"anchor day {T} reaches before the standardized span"
                    )
                r = float(returns[si, T])
                tickers.append(stock.ticker)
                days.append(T)
                windows.append(scaled[si, T - m + 1 - offset : T + 1 - offset, :])
                labels.append(assign_label(r, thresholds))
                rets.append(r)
                weights.append(cap_return(r, cap))
                sectors.append(stock.sector_id)
        out[split] = SampleSet(tickers, days, windows, labels, rets, weights, sectors)
    return out
