"""Download, extract, parse and filter B3 daily option files (PEyymmdd.ex_).

Body lines are comma separated::

    PETRA34,C,E,20170116,19.25,0.56,51.14

i.e. option code, type (C call / V put), style (A american / E european),
expiration YYYYMMDD, strike, reference premium and implied volatility (percent).
The first line of every inner file is a YYYYMMDD generation-date header.
"""

from __future__ import annotations

import datetime as dt
import io
import logging
import os
import re
import threading
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://www.b3.com.br/pesquisapregao/download"
DEFAULT_CONCURRENCY = 30
MAX_DAYS_TO_EXPIRY = 92
UNDERLYING_PREFIX = "PETR"

_ZIP_MAGIC = (b"PK\x03\x04", b"PK\x05\x06")
_ARCHIVE_NAME = re.compile(r"PE(\d{2})(\d{2})(\d{2})", re.IGNORECASE)
_NESTED_SUFFIXES = (".zip", ".ex_", ".ex")

_TYPES = {"C": "call", "V": "put"}
_STYLES = {"A": "american", "E": "european"}
_TYPE_CODES = {v: k for k, v in _TYPES.items()}
_STYLE_CODES = {v: k for k, v in _STYLES.items()}


@dataclass(frozen=True)
class OptionQuote:
    ticker: str
    option_type: str
    style: str
    expiration: dt.date
    strike: float
    premium: float
    implied_vol: float
    trade_date: dt.date


# --------------------------------------------------------------------------- URLs


def archive_name(date: dt.date) -> str:
    return f"PE{date:%y%m%d}.ex_"


def build_download_url(date: dt.date, base_url: str = DEFAULT_BASE_URL) -> str:
    """URL of the daily options archive for ``date``.

    >>> build_download_url(dt.date(2016, 11, 4))
    'https://www.b3.com.br/pesquisapregao/download?filelist=PE161104.ex_'
    """
    return f"{base_url}?filelist={archive_name(date)}"


def date_from_name(name: str) -> Optional[dt.date]:
    """Recover the trading date from a ``PEyymmdd`` archive or folder name."""
    for match in _ARCHIVE_NAME.finditer(Path(name).name.upper()):
        yy, mm, dd = (int(g) for g in match.groups())
        try:
            return dt.date(2000 + yy, mm, dd)
        except ValueError:
            continue
    return None


# -------------------------------------------------------------------------- fetch


class FetchStatus(str, Enum):
    SUCCESS = "success"
    HTTP_FAILURE = "http-failure"
    INVALID_PAYLOAD = "invalid-payload"
    SKIPPED_WEEKEND = "skipped-weekend"


@dataclass
class FetchManifest:
    start: dt.date
    end: dt.date
    concurrency: int = DEFAULT_CONCURRENCY
    status: dict[dt.date, FetchStatus] = field(default_factory=dict)
    paths: dict[dt.date, Path] = field(default_factory=dict)

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.end < self.start:
            raise ValueError("empty date range")

    @property
    def succeeded(self) -> list[dt.date]:
        return [d for d, s in self.status.items() if s is FetchStatus.SUCCESS]

    def to_dict(self) -> dict:
        return {
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "concurrency": self.concurrency,
            "status": {d.isoformat(): s.value for d, s in self.status.items()},
        }


# (status_code, body); raising any exception counts as a network failure
Transport = Callable[[str], "tuple[int, bytes]"]


def requests_transport(timeout: float = 60.0) -> Transport:
    import requests

    local = threading.local()

    def get(url: str) -> tuple[int, bytes]:
        session = getattr(local, "session", None)
        if session is None:
            session = local.session = requests.Session()
        resp = session.get(url, timeout=timeout)
        return resp.status_code, resp.content

    return get


def date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]


def is_archive(payload: bytes) -> bool:
    return bool(payload) and payload[:4] in _ZIP_MAGIC


def _fetch_one(url: str, transport: Transport, retries: int, backoff: float) -> tuple[FetchStatus, bytes]:
    status = FetchStatus.HTTP_FAILURE
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            code, body = transport(url)
        except Exception as exc:  # network errors are per-date, never fatal
            logger.debug("GET %s failed: %s", url, exc)
            status = FetchStatus.HTTP_FAILURE
            continue
        if code != 200:
            status = FetchStatus.HTTP_FAILURE
        elif not is_archive(body):
            status = FetchStatus.INVALID_PAYLOAD
        else:
            return FetchStatus.SUCCESS, body
    return status, b""


def fetch_archives(
    start: dt.date,
    end: dt.date,
    out_dir: os.PathLike | str,
    concurrency: int = DEFAULT_CONCURRENCY,
    transport: Optional[Transport] = None,
    base_url: str = DEFAULT_BASE_URL,
    retries: int = 1,
    backoff: float = 0.5,
    skip_weekends: bool = False,
) -> FetchManifest:
    """Download every daily archive in ``[start, end]`` into ``out_dir/raw``.

    At most ``concurrency`` requests are in flight. A failed date is retried
    ``retries`` times with exponential backoff and then recorded in the
    manifest; only an unwritable ``out_dir`` aborts the batch (``OSError``).
    """
    manifest = FetchManifest(start, end, concurrency)
    raw_dir = Path(out_dir) / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(raw_dir, os.W_OK):
        raise PermissionError(f"cannot write to {raw_dir}")
    transport = transport or requests_transport()

    dates = date_range(start, end)
    todo = []
    for d in dates:
        if skip_weekends and d.weekday() >= 5:
            manifest.status[d] = FetchStatus.SKIPPED_WEEKEND
        else:
            todo.append(d)

    def work(d: dt.date) -> tuple[FetchStatus, bytes]:
        return _fetch_one(build_download_url(d, base_url), transport, retries, backoff)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = dict(zip(todo, pool.map(work, todo)))

    for d in dates:
        if d not in results:
            continue
        status, body = results[d]
        manifest.status[d] = status
        if status is FetchStatus.SUCCESS:
            path = raw_dir / archive_name(d)
            path.write_bytes(body)
            manifest.paths[d] = path
        else:
            logger.info("%s: %s", d, status.value)
    manifest.status = dict(sorted(manifest.status.items()))
    return manifest


# ------------------------------------------------------------------------ extract


class ExtractionError(Exception):
    def __init__(self, message: str, trade_date: Optional[dt.date] = None):
        super().__init__(f"{trade_date}: {message}" if trade_date else message)
        self.trade_date = trade_date


class ExtractedFile(NamedTuple):
    name: str
    text: str
    trade_date: Optional[dt.date]


def _walk_zip(payload: bytes, prefix: str, trade_date, out: list, depth: int = 0) -> None:
    if depth > 4:
        raise ExtractionError("archive nesting too deep", trade_date)
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        for info in sorted(zf.infolist(), key=lambda i: i.filename):
            if info.is_dir():
                continue
            data = zf.read(info)
            path = f"{prefix}{info.filename}"
            inner_date = trade_date
            if inner_date is None:
                for part in Path(path).parts[:-1]:
                    inner_date = date_from_name(part) or inner_date
            if info.filename.lower().endswith(_NESTED_SUFFIXES) and is_archive(data):
                nested_date = inner_date or date_from_name(info.filename)
                _walk_zip(data, path + "/", nested_date, out, depth + 1)
                continue
            try:
                text = data.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ExtractionError(f"{path} is not ASCII/UTF-8 text ({exc})", trade_date) from exc
            flat = Path(path).name
            out.append(ExtractedFile(flat, text, inner_date))


def extract_archive(payload: bytes, archive_name: str = "") -> list[ExtractedFile]:
    """Unpack a ``.ex_`` container (a ZIP, possibly holding nested ZIPs).

    Directory structure is flattened; each file is tagged with the trading
    date recovered from the archive name or the innermost dated folder.
    """
    trade_date = date_from_name(archive_name) if archive_name else None
    out: list[ExtractedFile] = []
    try:
        _walk_zip(payload, "", trade_date, out)
    except ExtractionError:
        raise
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError, ValueError) as exc:
        raise ExtractionError(f"corrupt archive: {exc}", trade_date) from exc
    return out


def write_extracted(files: Iterable[ExtractedFile], txt_dir: os.PathLike | str) -> list[Path]:
    """Store files as ``txt_dir/yyyy-mm-dd_<inner-name>.txt``."""
    txt_dir = Path(txt_dir)
    txt_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        if f.trade_date is None:
            raise ExtractionError(f"no trading date for {f.name}")
        stem = f.name[:-4] if f.name.lower().endswith(".txt") else f.name
        path = txt_dir / f"{f.trade_date.isoformat()}_{stem}.txt"
        path.write_text(f.text, encoding="utf-8")
        written.append(path)
    return written


# -------------------------------------------------------------------------- parse


class ParseError(ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)
        self.reason = message
        self.line_no = line_no


@dataclass(frozen=True)
class ParseIssue:
    source: str
    line_no: int
    reason: str
    line: str
    fatal: bool = True


@dataclass
class ParseReport:
    lines_read: int = 0
    quotes: int = 0
    issues: list[ParseIssue] = field(default_factory=list)

    @property
    def errors(self) -> list[ParseIssue]:
        return [i for i in self.issues if i.fatal]

    @property
    def warnings(self) -> list[ParseIssue]:
        return [i for i in self.issues if not i.fatal]

    def merge(self, other: "ParseReport") -> None:
        self.lines_read += other.lines_read
        self.quotes += other.quotes
        self.issues.extend(other.issues)


def _parse_yyyymmdd(value: str, what: str, line_no) -> dt.date:
    value = value.strip()
    if len(value) != 8 or not value.isdigit():
        raise ParseError(f"bad {what} date {value!r}", line_no)
    try:
        return dt.date(int(value[:4]), int(value[4:6]), int(value[6:]))
    except ValueError:
        raise ParseError(f"bad {what} date {value!r}", line_no) from None


def _parse_number(value: str, what: str, line_no) -> float:
    try:
        x = float(value)
    except ValueError:
        raise ParseError(f"bad {what} {value!r}", line_no) from None
    if x != x or x in (float("inf"), float("-inf")):
        raise ParseError(f"non-finite {what}", line_no)
    return x


def parse_option_line(line: str, trade_date: dt.date, line_no: Optional[int] = None) -> OptionQuote:
    fields = [f.strip() for f in line.strip().split(",")]
    if len(fields) < 7:
        raise ParseError(f"expected 7 fields, got {len(fields)}", line_no)
    ticker, type_code, style_code, exp, strike, premium, iv = fields[:7]
    if not ticker:
        raise ParseError("empty option code", line_no)
    if type_code not in _TYPES:
        raise ParseError(f"unknown option type {type_code!r}", line_no)
    if style_code not in _STYLES:
        raise ParseError(f"unknown option style {style_code!r}", line_no)
    quote = OptionQuote(
        ticker=ticker,
        option_type=_TYPES[type_code],
        style=_STYLES[style_code],
        expiration=_parse_yyyymmdd(exp, "expiration", line_no),
        strike=_parse_number(strike, "strike", line_no),
        premium=_parse_number(premium, "premium", line_no),
        implied_vol=_parse_number(iv, "implied volatility", line_no),
        trade_date=trade_date,
    )
    if quote.strike <= 0:
        raise ParseError("strike must be positive", line_no)
    if quote.premium < 0 or quote.implied_vol < 0:
        raise ParseError("negative premium or implied volatility", line_no)
    return quote


def render_option_line(q: OptionQuote) -> str:
    """Inverse of :func:`parse_option_line`; floats use shortest round-trip repr."""
    return ",".join(
        [
            q.ticker,
            _TYPE_CODES[q.option_type],
            _STYLE_CODES[q.style],
            f"{q.expiration:%Y%m%d}",
            repr(float(q.strike)),
            repr(float(q.premium)),
            repr(float(q.implied_vol)),
        ]
    )


def parse_option_file(text: str, trade_date: dt.date, source: str = "") -> tuple[list[OptionQuote], ParseReport]:
    """Parse one inner file. Bad lines go to the report instead of raising."""
    report = ParseReport()
    quotes = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line_no == 1 or not line.strip():
            continue
        report.lines_read += 1
        try:
            quote = parse_option_line(line, trade_date, line_no)
        except ParseError as exc:
            report.issues.append(ParseIssue(source, line_no, exc.reason, line))
            continue
        n_fields = line.count(",") + 1
        if n_fields > 7:
            report.issues.append(ParseIssue(source, line_no, f"{n_fields - 7} extra field(s) ignored", line, fatal=False))
        quotes.append(quote)
    report.quotes = len(quotes)
    return quotes, report


_TXT_NAME = re.compile(r"^(\d{4}-\d{2}-\d{2})_")


def load_options_dir(txt_dir: os.PathLike | str) -> tuple[list[OptionQuote], ParseReport]:
    """Parse every ``yyyy-mm-dd_*.txt`` file in ``txt_dir`` (sorted by name)."""
    quotes: list[OptionQuote] = []
    report = ParseReport()
    for path in sorted(Path(txt_dir).glob("*.txt")):
        m = _TXT_NAME.match(path.name)
        if not m:
            logger.warning("skipping %s: no trading-date prefix", path.name)
            continue
        trade_date = dt.date.fromisoformat(m.group(1))
        try:
            text = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ExtractionError(f"{path.name} is not ASCII/UTF-8 text ({exc})", trade_date) from exc
        q, r = parse_option_file(text, trade_date, path.name)
        quotes.extend(q)
        report.merge(r)
    return quotes, report


# ------------------------------------------------------------------------- filter


def keep_quote(q: OptionQuote) -> bool:
    days = (q.expiration - q.trade_date).days
    return (
        q.ticker.startswith(UNDERLYING_PREFIX)
        and q.style == "european"
        and q.option_type == "call"
        and 0 < days <= MAX_DAYS_TO_EXPIRY
    )


def filter_records(quotes: Iterable[OptionQuote]) -> list[OptionQuote]:
    """PETR European calls expiring within (0, 92] calendar days."""
    return [q for q in quotes if keep_quote(q)]
