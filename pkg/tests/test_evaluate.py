import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from b3pricing.dataset import DatasetRow, generate_synthetic
from b3pricing.evaluate import (
    bracket_mae,
    category_for_days,
    daily_average_report,
    evaluate,
    expiration_category,
    mae,
    overall_mae,
    range_report,
    ticker_rankings,
    write_report,
)

from checks import evaluator_deviation

D0 = dt.date(2024, 11, 4)


def _row(premium, ticker="PETRA1", days=30, trade=D0, bs=None):
    return DatasetRow(
        trade, trade + dt.timedelta(days=days), ticker, 10.0, premium, 10.0, 0.3, 0.1, days / 365,
        premium if bs is None else bs,
    )  # fmt: skip


class TestMae:
    def test_zero(self):
        assert mae([1, 2], [1, 2]) == 0.0

    def test_one(self):
        assert mae([0, 2], [1, 1]) == 1.0

    def test_random_vs_one_liner(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=1000), rng.normal(size=1000)
        assert abs(mae(a, b) - sum(abs(x - y) for x, y in zip(a, b)) / 1000) <= 1e-12

    @pytest.mark.parametrize("a,b", [([], []), ([1.0], [1.0, 2.0])])
    def test_errors(self, a, b):
        with pytest.raises(ValueError):
            mae(a, b)


class TestBrackets:
    def test_flooring(self):
        rows = [_row(p) for p in (0.5, 1.5, 1.7)]
        got = bracket_mae(rows, [0.5, 1.5, 1.7])
        assert {k: v.count for k, v in got.items()} == {0: 1, 1: 2}

    def test_single_row(self):
        got = bracket_mae([_row(2.5)], [3.25])
        assert got[2].model == 0.75 and got[2].count == 1


class TestCategory:
    @pytest.mark.parametrize("days,cat", [(1, "1M"), (30, "1M"), (31, "1M"), (32, "2M"), (62, "2M"), (63, "3M"), (73, "3M"), (92, "3M")])
    def test_boundaries(self, days, cat):
        assert category_for_days(days) == cat
        assert expiration_category(_row(1.0, days=days)) == cat

    @pytest.mark.parametrize("days", [0, -1, 93])
    def test_out_of_window(self, days):
        with pytest.raises(ValueError):
            category_for_days(days)


class TestRange:
    def test_all_inside(self):
        rr = range_report([_row(3.0), _row(19.0), _row(10.0)], [3.0, 19.0, 11.0])
        assert rr.share == 1.0 and rr.count == 3 and rr.model == pytest.approx(1 / 3)

    def test_none_inside(self):
        rr = range_report([_row(1.0), _row(25.0)], [1.0, 1.0])
        assert rr.empty and rr.model is None and rr.ratio is None and rr.share == 0.0

    @given(st.lists(st.floats(0, 30), min_size=1, max_size=60))
    def test_share_matches_count(self, premiums):
        rows = [_row(p) for p in premiums]
        rr = range_report(rows, premiums)
        assert abs(rr.share - sum(3 <= p <= 19 for p in premiums) / len(premiums)) <= 1e-12

    def test_ratio_and_reduction(self):
        rr = range_report([_row(5.0, bs=7.0)], [6.0])
        assert rr.ratio == 0.5 and rr.reduction == 0.5


def test_daily_average():
    out = daily_average_report([_row(1.0), _row(3.0)], [1.0, 1.0])
    assert len(out) == 1 and out[0].actual == 2.0 and out[0].model == 1.0


class TestTickers:
    def test_truncation(self):
        rows = [_row(1.0, ticker=t) for t in ("PETRA1", "PETRA2", "PETRA3")]
        got = ticker_rankings(rows, [1.0, 1.5, 3.0], k=10)
        assert [s.ticker for s in got["1M"]["best"]] == ["PETRA1", "PETRA2", "PETRA3"]
        assert [s.ticker for s in got["1M"]["worst"]] == ["PETRA3", "PETRA2", "PETRA1"]

    def test_exact_ticker_ranks_best(self):
        rows = [_row(2.0, ticker="PETRB9", days=45), _row(2.0, ticker="PETRB1", days=45)]
        got = ticker_rankings(rows, [2.0, 2.4], k=1)
        assert got["2M"]["best"][0].ticker == "PETRB9" and got["2M"]["best"][0].model == 0.0
        assert "1M" not in got


def test_negative_predictions_clamped():
    rep = evaluate([_row(0.5)], [-2.0])
    assert rep.overall.model == 0.5


def test_oracle_equivalence_small():
    dev, partition = evaluator_deviation(n=2000, seed=3)
    assert dev <= 1e-9 and partition <= 1e-9


def test_write_report_deterministic(tmp_path):
    rows = generate_synthetic(500, seed=2)
    preds = np.array([r.bs_price for r in rows]) * 1.1
    a = write_report(evaluate(rows, preds), tmp_path / "a")
    b = write_report(evaluate(rows, preds), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["overall"]["count"] == 500
