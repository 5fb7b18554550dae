import datetime as dt
import io
import sys
import zipfile
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from b3pricing.dataset import DatasetRow  # noqa: E402

# Sample quote lines: trade date 2016-11-04, PETR4 at 15.34, SELIC 14.0 %
SAMPLE_LINES = [
    "PETRA34,C,E,20170116,19.25,0.56,51.14",
    "PETRA70,C,E,20170116,10.75,5.60,60.85",
    "PETRA4,C,E,20170116,14.75,2.34,51.79",
]
TRADE_DATE = dt.date(2016, 11, 4)


def make_zip(members: dict) -> bytes:
    """Build a ZIP in memory from {name: bytes | str | dict (nested zip)}."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in members.items():
            if isinstance(data, dict):
                data = make_zip(data)
            if isinstance(data, str):
                data = data.encode("ascii")
            zf.writestr(name, data)
    return buf.getvalue()


def option_file(lines, header="20161104") -> str:
    return "\n".join([header, *lines]) + "\n"


@pytest.fixture
def sample_rows():
    return [
        DatasetRow(TRADE_DATE, dt.date(2017, 1, 16), t, k, m, 15.34, 0.35, 0.14, 73 / 365)
        for t, k, m in (("PETRA34", 19.25, 0.56), ("PETRA70", 10.75, 5.60), ("PETRA4", 14.75, 2.34))
    ]


_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
