"""MAE breakdowns of model and Black-Scholes prices against market premiums."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import DatasetRow

CATEGORIES = ("1M", "2M", "3M")
RANGE_LO = 3.0
RANGE_HI = 19.0


def mae(actual, predicted) -> float:
    """Mean absolute error."""
    y = np.asarray(actual, dtype=np.float64).reshape(-1)
    yhat = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if len(y) != len(yhat):
        raise ValueError(f"length mismatch: {len(y)} vs {len(yhat)}")
    if len(y) == 0:
        raise ValueError("mae of an empty series")
    return float(np.abs(y - yhat).mean())


@dataclass(frozen=True)
class MaePair:
    model: float
    bs: float
    count: int


def category_for_days(days: int) -> str:
    if days <= 0 or days > 92:
        raise ValueError(f"{days} days to expiry is outside (0, 92]")
    if days <= 31:
        return "1M"
    if days <= 62:
        return "2M"
    return "3M"


def expiration_category(row: DatasetRow) -> str:
    return category_for_days((row.expiration - row.trade_date).days)


def _arrays(rows: Sequence[DatasetRow], predictions):
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if len(pred) != len(rows):
        raise ValueError(f"{len(pred)} predictions for {len(rows)} rows")
    m = np.array([r.premium for r in rows], dtype=np.float64)
    bs = np.array([r.bs_price for r in rows], dtype=np.float64)
    return m, pred, bs


def _grouped(keys: Sequence, m, pred, bs) -> dict:
    if len(keys) == 0:
        return {}
    uniq, inv = np.unique(np.asarray(keys, dtype=object), return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq))
    err_model = np.bincount(inv, weights=np.abs(pred - m), minlength=len(uniq))
    err_bs = np.bincount(inv, weights=np.abs(bs - m), minlength=len(uniq))
    return {
        k: MaePair(float(em / c), float(eb / c), int(c))
        for k, c, em, eb in zip(uniq.tolist(), counts, err_model, err_bs)
    }


def overall_mae(rows, predictions) -> MaePair:
    m, pred, bs = _arrays(rows, predictions)
    return MaePair(mae(m, pred), mae(m, bs), len(m))


def bracket_mae(rows, predictions, width: float = 1.0) -> dict[int, MaePair]:
    """Group by ``floor(premium / width)``; empty brackets are omitted."""
    m, pred, bs = _arrays(rows, predictions)
    keys = np.floor(m / width).astype(int).tolist()
    return _grouped(keys, m, pred, bs)


def category_mae(rows, predictions) -> dict[str, MaePair]:
    m, pred, bs = _arrays(rows, predictions)
    return _grouped([expiration_category(r) for r in rows], m, pred, bs)


def month_mae(rows, predictions, key: str = "trade") -> dict[str, MaePair]:
    """Per calendar month of the trade date (``key="trade"``) or expiration."""
    m, pred, bs = _arrays(rows, predictions)
    attr = {"trade": "trade_date", "expiration": "expiration"}[key]
    return _grouped([getattr(r, attr).strftime("%Y-%m") for r in rows], m, pred, bs)


@dataclass(frozen=True)
class RangeReport:
    lo: float
    hi: float
    model: Optional[float]
    bs: Optional[float]
    count: int
    share: float
    empty: bool

    @property
    def ratio(self) -> Optional[float]:
        """model MAE / BS MAE."""
        if self.empty or not self.bs:
            return None
        return self.model / self.bs

    @property
    def reduction(self) -> Optional[float]:
        """1 - ratio, the fractional MAE reduction of the model over BS."""
        return None if self.ratio is None else 1.0 - self.ratio


def range_report(rows, predictions, lo: float = RANGE_LO, hi: float = RANGE_HI) -> RangeReport:
    m, pred, bs = _arrays(rows, predictions)
    inside = (m >= lo) & (m <= hi)
    count = int(inside.sum())
    share = count / len(m) if len(m) else 0.0
    if count == 0:
        return RangeReport(lo, hi, None, None, 0, share, True)
    return RangeReport(lo, hi, mae(m[inside], pred[inside]), mae(m[inside], bs[inside]), count, share, False)


@dataclass(frozen=True)
class DailyAverage:
    date: dt.date
    actual: float
    model: float
    bs: float
    count: int


def daily_average_report(rows, predictions) -> list[DailyAverage]:
    m, pred, bs = _arrays(rows, predictions)
    if not rows:
        return []
    dates = np.array([r.trade_date.toordinal() for r in rows])
    uniq, inv = np.unique(dates, return_inverse=True)
    c = np.bincount(inv)
    sums = [np.bincount(inv, weights=a) for a in (m, pred, bs)]
    return [
        DailyAverage(dt.date.fromordinal(int(d)), float(sa / n), float(sp / n), float(sb / n), int(n))
        for d, n, sa, sp, sb in zip(uniq, c, *sums)
    ]


@dataclass(frozen=True)
class TickerScore:
    ticker: str
    model: float
    bs: float
    count: int


def ticker_rankings(rows, predictions, k: int = 10) -> dict[str, dict[str, list[TickerScore]]]:
    """Per expiration category, the ``k`` best and ``k`` worst tickers by model MAE."""
    m, pred, bs = _arrays(rows, predictions)
    cats = [expiration_category(r) for r in rows]
    out = {}
    for cat in CATEGORIES:
        idx = [i for i, c in enumerate(cats) if c == cat]
        if not idx:
            continue
        groups = _grouped([rows[i].ticker for i in idx], m[idx], pred[idx], bs[idx])
        scores = [TickerScore(t, p.model, p.bs, p.count) for t, p in groups.items()]
        best = sorted(scores, key=lambda s: (s.model, s.ticker))[:k]
        worst = sorted(scores, key=lambda s: (-s.model, s.ticker))[:k]
        out[cat] = {"best": best, "worst": worst}
    return out


@dataclass
class EvalReport:
    overall: MaePair
    by_trade_month: dict[str, MaePair]
    by_expiration_month: dict[str, MaePair]
    brackets: dict[int, MaePair]
    categories: dict[str, MaePair]
    in_range: RangeReport
    in_range_categories: dict[str, MaePair]
    daily: list[DailyAverage]
    tickers: dict[str, dict[str, list[TickerScore]]] = field(default_factory=dict)


def evaluate(rows: Sequence[DatasetRow], model_predictions, k: int = 10) -> EvalReport:
    """Full breakdown; negative model predictions are clamped to 0 first."""
    if not rows:
        raise ValueError("nothing to evaluate")
    pred = np.maximum(np.asarray(model_predictions, dtype=np.float64), 0.0)
    rr = range_report(rows, pred)
    in_range_idx = [i for i, r in enumerate(rows) if RANGE_LO <= r.premium <= RANGE_HI]
    return EvalReport(
        overall=overall_mae(rows, pred),
        by_trade_month=month_mae(rows, pred, "trade"),
        by_expiration_month=month_mae(rows, pred, "expiration"),
        brackets=bracket_mae(rows, pred),
        categories=category_mae(rows, pred),
        in_range=rr,
        in_range_categories=category_mae([rows[i] for i in in_range_idx], pred[in_range_idx]) if in_range_idx else {},
        daily=daily_average_report(rows, pred),
        tickers=ticker_rankings(rows, pred, k),
    )


# ---------------------------------------------------------------- serialization


def _g(x) -> str:
    return "" if x is None else repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _table(title: str, pairs: dict) -> list[str]:
    lines = [f"## {title}", f"{'key':<12} {'n':>8} {'mae_model':>12} {'mae_bs':>12}"]
    for key, p in pairs.items():
        lines.append(f"{str(key):<12} {p.count:>8} {p.model:>12.6f} {p.bs:>12.6f}")
    return lines + [""]


def format_report(report: EvalReport) -> str:
    rr = report.in_range
    lines = _table("overall", {"all": report.overall})
    lines += [f"## range [{rr.lo:g}, {rr.hi:g}]"]
    if rr.empty:
        lines += ["empty: no premiums in range", f"share {rr.share:.6f}", ""]
    else:
        lines += [
            f"n {rr.count}  share {rr.share:.6f}",
            f"mae_model {rr.model:.6f}  mae_bs {rr.bs:.6f}",
            "ratio model/bs undefined (mae_bs is 0)"
            if rr.ratio is None
            else f"ratio model/bs {rr.ratio:.6f}  reduction {rr.reduction:.6f}",
            "",
        ]
    lines += _table("expiration category", report.categories)
    lines += _table(f"expiration category, premium in [{rr.lo:g}, {rr.hi:g}]", report.in_range_categories)
    lines += _table("trade month", report.by_trade_month)
    lines += _table("expiration month", report.by_expiration_month)
    lines += _table("1 BRL premium bracket", report.brackets)
    for cat, lists in report.tickers.items():
        for which in ("best", "worst"):
            lines += _table(f"{which} tickers {cat}", {s.ticker: MaePair(s.model, s.bs, s.count) for s in lists[which]})
    return "\n".join(lines)


def summary_dict(report: EvalReport) -> dict:
    rr = report.in_range
    return {
        "overall": asdict(report.overall),
        "range": {
            "lo": rr.lo,
            "hi": rr.hi,
            "model": rr.model,
            "bs": rr.bs,
            "count": rr.count,
            "share": rr.share,
            "empty": rr.empty,
            "ratio": rr.ratio,
            "reduction": rr.reduction,
        },
        "categories": {k: asdict(v) for k, v in report.categories.items()},
    }


def write_report(report: EvalReport, out_dir: os.PathLike | str) -> list[Path]:
    """report.txt, summary.json and the plot-ready CSV series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (
        "report.txt", "summary.json", "daily_avg.csv", "brackets.csv", "categories.csv", "tickers.csv", "months.csv"
    )}  # fmt: skip
    paths["report.txt"].write_text(format_report(report) + "\n", encoding="utf-8")
    paths["summary.json"].write_text(json.dumps(summary_dict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(
        paths["daily_avg.csv"],
        ("date", "actual", "model", "bs", "count"),
        [(d.date.isoformat(), _g(d.actual), _g(d.model), _g(d.bs), d.count) for d in report.daily],
    )
    _write_csv(
        paths["brackets.csv"],
        ("bracket", "mae_model", "mae_bs", "count"),
        [(k, _g(p.model), _g(p.bs), p.count) for k, p in report.brackets.items()],
    )
    cat_rows = [("all", k, _g(p.model), _g(p.bs), p.count) for k, p in report.categories.items()]
    cat_rows += [("in_range", k, _g(p.model), _g(p.bs), p.count) for k, p in report.in_range_categories.items()]
    _write_csv(paths["categories.csv"], ("subset", "category", "mae_model", "mae_bs", "count"), cat_rows)
    _write_csv(
        paths["tickers.csv"],
        ("category", "list", "rank", "ticker", "mae_model", "mae_bs", "count"),
        [
            (cat, which, i + 1, s.ticker, _g(s.model), _g(s.bs), s.count)
            for cat, lists in report.tickers.items()
            for which in ("best", "worst")
            for i, s in enumerate(lists[which])
        ],
    )
    month_rows = [("trade", k, _g(p.model), _g(p.bs), p.count) for k, p in report.by_trade_month.items()]
    month_rows += [("expiration", k, _g(p.model), _g(p.bs), p.count) for k, p in report.by_expiration_month.items()]
    _write_csv(paths["months.csv"], ("keyed_by", "month", "mae_model", "mae_bs", "count"), month_rows)
    return list(paths.values())
