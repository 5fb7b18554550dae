import datetime as dt
import os
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b3pricing.ingest import (
    DEFAULT_BASE_URL,
    ExtractionError,
    FetchStatus,
    OptionQuote,
    ParseError,
    build_download_url,
    date_from_name,
    extract_archive,
    fetch_archives,
    filter_records,
    keep_quote,
    load_options_dir,
    parse_option_file,
    parse_option_line,
    render_option_line,
    write_extracted,
)

from conftest import SAMPLE_LINES, TRADE_DATE, make_zip, option_file

PREFIX = "https://www.b3.com.br/pesquisapregao/download?filelist="


class TestDownloadUrl:
    @pytest.mark.parametrize(
        "date,suffix",
        [
            (dt.date(2016, 11, 4), "PE161104.ex_"),
            (dt.date(2025, 1, 2), "PE250102.ex_"),
            (dt.date(2000, 1, 9), "PE000109.ex_"),
        ],
    )
    def test_examples(self, date, suffix):
        assert build_download_url(date) == PREFIX + suffix

    @given(st.dates(dt.date(2000, 1, 1), dt.date(2099, 12, 31)))
    def test_fixed_length_and_invertible(self, d):
        url = build_download_url(d)
        assert len(url) == len(PREFIX) + 12 == 67
        assert date_from_name(url.rsplit("=", 1)[1]) == d

    def test_custom_base(self):
        assert build_download_url(dt.date(2016, 11, 4), "http://localhost:1") == "http://localhost:1?filelist=PE161104.ex_"
        assert DEFAULT_BASE_URL + "?filelist=" == PREFIX


class TestParseLine:
    def test_sample_first_row(self):
        q = parse_option_line(SAMPLE_LINES[0], TRADE_DATE)
        assert q == OptionQuote("PETRA34", "call", "european", dt.date(2017, 1, 16), 19.25, 0.56, 51.14, TRADE_DATE)

    def test_sample_third_row(self):
        q = parse_option_line(SAMPLE_LINES[2], TRADE_DATE)
        assert (q.strike, q.premium) == (14.75, 2.34)

    def test_unknown_type(self):
        with pytest.raises(ParseError, match="type"):
            parse_option_line("X,Q,E,20170116,1.0,1.0,1.0", TRADE_DATE, line_no=9)

    @pytest.mark.parametrize(
        "line,reason",
        [
            ("PETRA34,C,E,20170116,19.25,0.56", "7 fields"),
            ("PETRA34,C,Z,20170116,19.25,0.56,51.14", "style"),
            ("PETRA34,C,E,2017011,19.25,0.56,51.14", "date"),
            ("PETRA34,C,E,20170231,19.25,0.56,51.14", "date"),
            ("PETRA34,C,E,20170116,abc,0.56,51.14", "strike"),
            ("PETRA34,C,E,20170116,19.25,nan,51.14", "non-finite"),
            ("PETRA34,C,E,20170116,0,0.56,51.14", "positive"),
            ("PETRA34,C,E,20170116,19.25,-1,51.14", "negative"),
            (",C,E,20170116,19.25,0.56,51.14", "empty"),
        ],
    )
    def test_rejections_carry_line_number(self, line, reason):
        with pytest.raises(ParseError, match=reason) as info:
            parse_option_line(line, TRADE_DATE, line_no=42)
        assert info.value.line_no == 42

    def test_put_and_american(self):
        q = parse_option_line("PETRM20,V,A,20170116,20,1,30", TRADE_DATE)
        assert (q.option_type, q.style) == ("put", "american")


class TestParseFile:
    def test_header_skipped_and_errors_collected(self):
        text = option_file([SAMPLE_LINES[0], "garbage", "", SAMPLE_LINES[1], "X,Q,E,20170116,1.0,1.0,1.0"])
        quotes, report = parse_option_file(text, TRADE_DATE, "f.txt")
        assert [q.ticker for q in quotes] == ["PETRA34", "PETRA70"]
        assert report.lines_read == 4
        assert [(i.line_no, i.fatal) for i in report.issues] == [(3, True), (6, True)]
        assert report.issues[1].line == "X,Q,E,20170116,1.0,1.0,1.0"

    def test_extra_fields_warn(self):
        quotes, report = parse_option_file(option_file([SAMPLE_LINES[0] + ",extra"]), TRADE_DATE)
        assert len(quotes) == 1
        assert report.errors == [] and len(report.warnings) == 1

    def test_header_only(self):
        quotes, report = parse_option_file("20161104\n", TRADE_DATE)
        assert quotes == [] and report.lines_read == 0


quote_strategy = st.builds(
    OptionQuote,
    ticker=st.from_regex(r"[A-Z]{4}[A-X][0-9]{1,4}", fullmatch=True),
    option_type=st.sampled_from(["call", "put"]),
    style=st.sampled_from(["european", "american"]),
    expiration=st.dates(dt.date(2000, 1, 1), dt.date(2099, 12, 31)),
    strike=st.floats(1e-4, 1e6, allow_nan=False, allow_infinity=False),
    premium=st.floats(0, 1e6, allow_nan=False, allow_infinity=False),
    implied_vol=st.floats(0, 1e4, allow_nan=False, allow_infinity=False),
    trade_date=st.just(TRADE_DATE),
)


@settings(max_examples=300)
@given(quote_strategy)
def test_render_parse_round_trip(q):
    assert parse_option_line(render_option_line(q), q.trade_date) == q


def _q(ticker="PETRA34", days=60, type_="call", style="european"):
    return OptionQuote(ticker, type_, style, TRADE_DATE + dt.timedelta(days=days), 10.0, 1.0, 40.0, TRADE_DATE)


class TestFilter:
    @pytest.mark.parametrize(
        "quote,kept",
        [
            (_q(days=60), True),
            (_q(ticker="VALEA34"), False),
            (_q(days=0), False),
            (_q(days=-3), False),
            (_q(days=1), True),
            (_q(days=92), True),
            (_q(days=93), False),
            (_q(type_="put"), False),
            (_q(style="american"), False),
        ],
    )
    def test_rules(self, quote, kept):
        assert keep_quote(quote) is kept
        assert filter_records([quote]) == ([quote] if kept else [])

    @given(st.lists(quote_strategy, max_size=30))
    def test_idempotent_and_order_preserving(self, quotes):
        once = filter_records(quotes)
        assert filter_records(once) == once
        assert once == [q for q in quotes if q in once]


class TestExtract:
    def test_two_files(self):
        payload = make_zip({"a.txt": option_file(SAMPLE_LINES[:1]), "b.txt": option_file(SAMPLE_LINES[1:])})
        files = extract_archive(payload, "PE161104.ex_")
        assert [(f.name, f.trade_date) for f in files] == [("a.txt", TRADE_DATE), ("b.txt", TRADE_DATE)]
        assert files[1].text.splitlines()[1] == SAMPLE_LINES[1]

    def test_empty_archive(self):
        assert extract_archive(make_zip({}), "PE161104.ex_") == []

    def test_truncated(self):
        payload = make_zip({"a.txt": option_file(SAMPLE_LINES)})
        with pytest.raises(ExtractionError) as info:
            extract_archive(payload[: len(payload) // 2], "PE161104.ex_")
        assert info.value.trade_date == TRADE_DATE

    def test_nested_with_dated_folder(self):
        inner = {"PE161104/opcoes.txt": option_file(SAMPLE_LINES)}
        files = extract_archive(make_zip({"outer.zip": inner}))
        assert len(files) == 1 and files[0].trade_date == TRADE_DATE

    def test_non_text_member(self):
        with pytest.raises(ExtractionError, match="UTF-8"):
            extract_archive(make_zip({"a.txt": b"\xff\xfe\x00bad"}), "PE161104.ex_")

    def test_write_and_load(self, tmp_path):
        payload = make_zip({"opcoes.txt": option_file(SAMPLE_LINES + ["bad line"])})
        paths = write_extracted(extract_archive(payload, "PE161104.ex_"), tmp_path)
        assert [p.name for p in paths] == ["2016-11-04_opcoes.txt"]
        quotes, report = load_options_dir(tmp_path)
        assert [q.ticker for q in quotes] == ["PETRA34", "PETRA70", "PETRA4"]
        assert all(q.trade_date == TRADE_DATE for q in quotes)
        assert len(report.errors) == 1 and report.errors[0].source == "2016-11-04_opcoes.txt"


class FakeTransport:
    """Counts concurrent calls; answers from a date -> (code, body) table."""

    def __init__(self, responses=None, default=(404, b""), delay=0.02):
        self.responses = responses or {}
        self.default = default
        self.delay = delay
        self.lock = threading.Lock()
        self.in_flight = self.peak = 0
        self.calls: list[str] = []

    def __call__(self, url):
        with self.lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
            self.calls.append(url)
        try:
            time.sleep(self.delay)
            resp = self.responses.get(date_from_name(url.rsplit("=", 1)[1]), self.default)
            if isinstance(resp, Exception):
                raise resp
            return resp
        finally:
            with self.lock:
                self.in_flight -= 1


ARCHIVE = make_zip({"opcoes.txt": option_file(SAMPLE_LINES)})


class TestFetch:
    def test_single_good_date(self, tmp_path):
        fake = FakeTransport({TRADE_DATE: (200, ARCHIVE)})
        man = fetch_archives(TRADE_DATE, TRADE_DATE, tmp_path, 1, transport=fake, backoff=0)
        assert man.status == {TRADE_DATE: FetchStatus.SUCCESS}
        assert (tmp_path / "raw" / "PE161104.ex_").read_bytes() == ARCHIVE

    def test_failure_paths_persist_nothing(self, tmp_path):
        sat, sun = dt.date(2016, 11, 5), dt.date(2016, 11, 6)
        fake = FakeTransport({sat: (200, b"<html>closed</html>"), sun: (404, b"")})
        man = fetch_archives(sat, sun, tmp_path, 2, transport=fake, backoff=0)
        assert man.status == {sat: FetchStatus.INVALID_PAYLOAD, sun: FetchStatus.HTTP_FAILURE}
        assert list((tmp_path / "raw").iterdir()) == []

    def test_network_exception_is_per_date(self, tmp_path):
        fake = FakeTransport({TRADE_DATE: ConnectionError("boom")})
        man = fetch_archives(TRADE_DATE, TRADE_DATE, tmp_path, transport=fake, retries=2, backoff=0)
        assert man.status[TRADE_DATE] is FetchStatus.HTTP_FAILURE
        assert len(fake.calls) == 3

    def test_peak_in_flight_bounded(self, tmp_path):
        start = dt.date(2016, 11, 1)
        fake = FakeTransport(default=(200, ARCHIVE), delay=0.05)
        man = fetch_archives(start, start + dt.timedelta(days=9), tmp_path, 3, transport=fake, backoff=0)
        assert len(man.succeeded) == 10
        assert 1 <= fake.peak <= 3
        assert len(fake.calls) == 10

    def test_retry_recovers(self, tmp_path):
        answers = iter([(503, b""), (200, ARCHIVE)])
        man = fetch_archives(TRADE_DATE, TRADE_DATE, tmp_path, transport=lambda url: next(answers), backoff=0)
        assert man.succeeded == [TRADE_DATE]

    def test_skip_weekends(self, tmp_path):
        fake = FakeTransport(default=(200, ARCHIVE))
        man = fetch_archives(dt.date(2016, 11, 4), dt.date(2016, 11, 7), tmp_path, transport=fake, skip_weekends=True)
        assert [s.value for s in man.status.values()] == ["success", "skipped-weekend", "skipped-weekend", "success"]
        assert len(fake.calls) == 2

    @pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
    def test_unwritable_target(self, tmp_path):
        tmp_path.chmod(0o500)
        try:
            with pytest.raises(OSError):
                fetch_archives(TRADE_DATE, TRADE_DATE, tmp_path / "x", transport=FakeTransport())
        finally:
            tmp_path.chmod(0o700)

    def test_target_is_a_file(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            fetch_archives(TRADE_DATE, TRADE_DATE, blocker, transport=FakeTransport())

    def test_bad_range(self, tmp_path):
        with pytest.raises(ValueError):
            fetch_archives(TRADE_DATE, TRADE_DATE - dt.timedelta(days=1), tmp_path, transport=FakeTransport())
