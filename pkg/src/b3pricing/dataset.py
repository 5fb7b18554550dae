"""Join option quotes with PETR4 and SELIC series into the training dataset."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ingest import OptionQuote, ParseReport, filter_records, load_options_dir
from .pricing import bs_call_price, price_dataset

logger = logging.getLogger(__name__)

VOL_WINDOW = 21
TRADING_DAYS = 252
DAYS_PER_YEAR = 365
CSV_COLUMNS = (
    "trade_date",
    "expiration",
    "ticker",
    "strike",
    "premium",
    "stock_price",
    "volatility",
    "selic_rate",
    "tte",
    "bs_price",
)


class DataError(ValueError):
    """Input series or rows violate a dataset contract."""


@dataclass(frozen=True)
class MarketSnapshot:
    date: dt.date
    price: float
    daily_return: float
    volatility: float


@dataclass(frozen=True)
class DatasetRow:
    trade_date: dt.date
    expiration: dt.date
    ticker: str
    strike: float
    premium: float
    stock_price: float
    volatility: float
    selic_rate: float
    tte: float
    bs_price: float = math.nan
    # file's implied vol as a fraction; kept in memory only, not a CSV column
    implied_vol: float = math.nan

    @property
    def days_to_expiry(self) -> int:
        return (self.expiration - self.trade_date).days


@dataclass(frozen=True)
class SplitSpec:
    train_val_cutoff: dt.date = dt.date(2024, 10, 31)
    val_fraction: float = 0.20
    shuffle_seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


# ---------------------------------------------------------------- market series


def compute_rolling_volatility(prices: Sequence[tuple[dt.date, float]]) -> list[MarketSnapshot]:
    """Annualized 21-day rolling volatility of daily simple returns.

    ``volatility_t = stdev(returns[t-20..t], ddof=1) * sqrt(252)``. The first 21
    return dates have an incomplete window and are omitted, so fewer than 22
    prices give an empty result.
    """
    dates = [d for d, _ in prices]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise DataError("price dates must be strictly ascending")
    closes = np.array([c for _, c in prices], dtype=np.float64)
    if np.any(~(closes > 0)):
        raise DataError("closes must be positive")
    if len(closes) <= VOL_WINDOW:
        return []
    returns = closes[1:] / closes[:-1] - 1.0
    windows = np.lib.stride_tricks.sliding_window_view(returns, VOL_WINDOW)
    vols = windows.std(axis=1, ddof=1) * math.sqrt(TRADING_DAYS)
    return [
        MarketSnapshot(dates[VOL_WINDOW + i], float(closes[VOL_WINDOW + i]), float(returns[VOL_WINDOW - 1 + i]), float(v))
        for i, v in enumerate(vols)
    ]


def compute_tte(trade_date: dt.date, expiration: dt.date) -> float:
    """Calendar days to expiry over 365."""
    days = (expiration - trade_date).days
    if days <= 0:
        raise DataError(f"expiration {expiration} not after trade date {trade_date}")
    return days / DAYS_PER_YEAR


@dataclass
class JoinResult:
    rows: list[DatasetRow]
    dropped: int
    stock_dates: list[dt.date]
    selic_dates: list[dt.date]


def _asof_index(dates: list[dt.date], when: dt.date) -> int:
    return bisect.bisect_right(dates, when) - 1


def asof_join(
    quotes: Iterable[OptionQuote],
    stock: Sequence[MarketSnapshot],
    selic: Sequence[tuple[dt.date, float]],
) -> JoinResult:
    """Attach the snapshot and SELIC rate in force on each quote's trade date.

    An exact date match wins; otherwise the latest strictly earlier date is
    used. Quotes with nothing at or before their trade date are dropped.
    ``selic`` rates must already be fractions.
    """
    if not stock:
        raise DataError("empty stock series")
    stock_dates = [s.date for s in stock]
    selic_dates = [d for d, _ in selic]
    if stock_dates != sorted(stock_dates) or selic_dates != sorted(selic_dates):
        raise DataError("market series must be sorted by date")

    result = JoinResult([], 0, [], [])
    for q in quotes:
        i = _asof_index(stock_dates, q.trade_date)
        j = _asof_index(selic_dates, q.trade_date)
        if i < 0 or j < 0:
            result.dropped += 1
            continue
        snap = stock[i]
        result.rows.append(
            DatasetRow(
                trade_date=q.trade_date,
                expiration=q.expiration,
                ticker=q.ticker,
                strike=q.strike,
                premium=q.premium,
                stock_price=snap.price,
                volatility=snap.volatility,
                selic_rate=selic[j][1],
                tte=compute_tte(q.trade_date, q.expiration),
                implied_vol=q.implied_vol / 100.0,
            )
        )
        result.stock_dates.append(stock_dates[i])
        result.selic_dates.append(selic_dates[j])
    return result


# ------------------------------------------------------------------ CSV in/out


def _read_series(path: os.PathLike | str) -> list[tuple[dt.date, float]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, start=1):
            if not rec or not rec[0].strip():
                continue
            try:
                out.append((dt.date.fromisoformat(rec[0].strip()), float(rec[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue  # header
                raise DataError(f"{path}:{lineno}: cannot parse {rec!r}") from None
    out.sort(key=lambda t: t[0])
    return out


def read_stock_csv(path) -> list[tuple[dt.date, float]]:
    """Read ``date,close`` rows."""
    return _read_series(path)


def read_selic_csv(path) -> list[tuple[dt.date, float]]:
    """Read ``date,annual_rate_percent`` rows, returning fractional rates."""
    return [(d, pct / 100.0) for d, pct in _read_series(path)]


def _fmt(x: float) -> str:
    return repr(float(x))


def rows_to_csv(rows: Iterable[DatasetRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [
                r.trade_date.isoformat(),
                r.expiration.isoformat(),
                r.ticker,
                _fmt(r.strike),
                _fmt(r.premium),
                _fmt(r.stock_price),
                _fmt(r.volatility),
                _fmt(r.selic_rate),
                _fmt(r.tte),
                _fmt(r.bs_price),
            ]
        )
    return buf.getvalue()


def write_dataset_csv(rows: Iterable[DatasetRow], path: os.PathLike | str) -> None:
    Path(path).write_bytes(rows_to_csv(rows).encode("utf-8"))


def read_dataset_csv(path: os.PathLike | str) -> list[DatasetRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(
                    DatasetRow(
                        trade_date=dt.date.fromisoformat(rec["trade_date"]),
                        expiration=dt.date.fromisoformat(rec["expiration"]),
                        ticker=rec["ticker"],
                        strike=float(rec["strike"]),
                        premium=float(rec["premium"]),
                        stock_price=float(rec["stock_price"]),
                        volatility=float(rec["volatility"]),
                        selic_rate=float(rec["selic_rate"]),
                        tte=float(rec["tte"]),
                        bs_price=float(rec["bs_price"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return rows


# ---------------------------------------------------------------------- build


def _sort_key(r: DatasetRow):
    return (r.trade_date, r.ticker, r.expiration, r.strike, r.premium)


@dataclass
class BuildReport:
    quotes_parsed: int = 0
    quotes_filtered_out: int = 0
    quotes_unjoined: int = 0
    rows_written: int = 0
    parse: ParseReport = field(default_factory=ParseReport)

    def to_dict(self) -> dict:
        return {
            "quotes_parsed": self.quotes_parsed,
            "quotes_filtered_out": self.quotes_filtered_out,
            "quotes_unjoined": self.quotes_unjoined,
            "rows_written": self.rows_written,
            "parse_errors": len(self.parse.errors),
            "parse_warnings": len(self.parse.warnings),
        }


def assemble_rows(
    quotes: Sequence[OptionQuote],
    stock_prices: Sequence[tuple[dt.date, float]],
    selic: Sequence[tuple[dt.date, float]],
    report: Optional[BuildReport] = None,
) -> list[DatasetRow]:
    """filter -> volatility -> as-of join -> BS price -> deterministic sort."""
    report = report if report is not None else BuildReport()
    report.quotes_parsed = len(quotes)
    kept = filter_records(quotes)
    report.quotes_filtered_out = len(quotes) - len(kept)
    snapshots = compute_rolling_volatility(stock_prices)
    joined = asof_join(kept, snapshots, selic)
    report.quotes_unjoined = joined.dropped
    rows = sorted(price_dataset(joined.rows), key=_sort_key)
    report.rows_written = len(rows)
    return rows


def build_dataset(
    options_dir: os.PathLike | str,
    stock_csv: os.PathLike | str,
    selic_csv: os.PathLike | str,
    out_csv: os.PathLike | str,
) -> tuple[list[DatasetRow], BuildReport]:
    report = BuildReport()
    quotes, report.parse = load_options_dir(options_dir)
    rows = assemble_rows(quotes, read_stock_csv(stock_csv), read_selic_csv(selic_csv), report)
    write_dataset_csv(rows, out_csv)
    logger.info("wrote %d rows to %s", len(rows), out_csv)
    return rows, report


# ---------------------------------------------------------------------- split


def split_dataset(rows: Sequence[DatasetRow], spec: SplitSpec = SplitSpec()):
    """Chronological test holdout plus a seeded random train/val split.

    Rows traded after ``spec.train_val_cutoff`` form the test set. The rest are
    permuted with ``spec.shuffle_seed`` and ``round(val_fraction * n)`` of them
    go to validation.
    """
    if not rows:
        raise DataError("no rows to split")
    pre = [r for r in rows if r.trade_date <= spec.train_val_cutoff]
    test = [r for r in rows if r.trade_date > spec.train_val_cutoff]
    if not pre:
        raise DataError(f"no rows on or before cutoff {spec.train_val_cutoff}")
    n_val = int(math.floor(spec.val_fraction * len(pre) + 0.5))
    perm = np.random.default_rng(spec.shuffle_seed).permutation(len(pre))
    val = [pre[i] for i in sorted(perm[:n_val])]
    train = [pre[i] for i in sorted(perm[n_val:])]
    return train, val, test


# ------------------------------------------------------------------- features


def featurize(row: DatasetRow) -> np.ndarray:
    """[ln S, ln K, tte, vol, rate]."""
    if not (row.stock_price > 0 and row.strike > 0):
        raise DataError("spot and strike must be positive to take logs")
    return np.array([math.log(row.stock_price), math.log(row.strike), row.tte, row.volatility, row.selic_rate])


def feature_matrix(rows: Sequence[DatasetRow]) -> np.ndarray:
    if not rows:
        return np.empty((0, 5))
    cols = np.array(
        [(r.stock_price, r.strike, r.tte, r.volatility, r.selic_rate) for r in rows], dtype=np.float64
    )
    if np.any(~(cols[:, :2] > 0)):
        raise DataError("spot and strike must be positive to take logs")
    cols[:, 0] = np.log(cols[:, 0])
    cols[:, 1] = np.log(cols[:, 1])
    return cols


def unfeaturize(features: np.ndarray) -> tuple[float, float]:
    return math.exp(features[0]), math.exp(features[1])


def targets(rows: Sequence[DatasetRow]) -> tuple[np.ndarray, np.ndarray]:
    """(market premium, BS price) arrays."""
    m = np.array([r.premium for r in rows], dtype=np.float64)
    bs = np.array([r.bs_price for r in rows], dtype=np.float64)
    return m, bs


# ------------------------------------------------------------------ synthetic

_MONTH_CODES = "ABCDEFGHIJKL"  # B3 call series letters, January..December
SYNTH_START = dt.date(2016, 11, 1)
SYNTH_END = dt.date(2025, 1, 31)


def _business_days(start: dt.date, end: dt.date) -> list[dt.date]:
    days = (end - start).days + 1
    return [d for d in (start + dt.timedelta(i) for i in range(days)) if d.weekday() < 5]


def generate_synthetic(n: int, seed: int = 0, noise_sd: float = 0.05) -> list[DatasetRow]:
    """Rows priced exactly by Black-Scholes with Gaussian noise on the premium.

    S ~ U[8, 45], K/S ~ U[0.6, 1.5], sigma ~ U[0.15, 0.9], r ~ U[0.02, 0.15];
    days to expiry is 1, 2 or 3 months (31/61/91 days, jittered by up to 3
    days downward). Trade dates are uniform over business days between
    Nov 2016 and Jan 2025 so the default split cutoff yields a test set.
    The premium is ``max(bs + N(0, noise_sd), 0)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    bdays = _business_days(SYNTH_START, SYNTH_END)
    trade_idx = rng.integers(0, len(bdays), size=n)
    S = rng.uniform(8.0, 45.0, size=n)
    K = S * rng.uniform(0.6, 1.5, size=n)
    sigma = rng.uniform(0.15, 0.9, size=n)
    r = rng.uniform(0.02, 0.15, size=n)
    months = rng.integers(1, 4, size=n)
    days = np.array([31, 61, 91])[months - 1] - rng.integers(0, 4, size=n)
    noise = rng.standard_normal(n) * noise_sd

    rows = []
    for i in range(n):
        trade = bdays[trade_idx[i]]
        expiry = trade + dt.timedelta(days=int(days[i]))
        strike = float(K[i])
        tte = compute_tte(trade, expiry)
        bs = bs_call_price(float(S[i]), strike, float(r[i]), float(sigma[i]), tte)
        premium = max(bs + float(noise[i]), 0.0) if noise_sd > 0 else bs
        ticker = f"PETR{_MONTH_CODES[expiry.month - 1]}{int(round(strike * 10))}"
        rows.append(
            DatasetRow(
                trade_date=trade,
                expiration=expiry,
                ticker=ticker,
                strike=strike,
                premium=premium,
                stock_price=float(S[i]),
                volatility=float(sigma[i]),
                selic_rate=float(r[i]),
                tte=tte,
                bs_price=bs,
            )
        )
    rows.sort(key=_sort_key)
    return rows

