import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def gsp_stale_read_records():
    """Two clients over a key-value store; client 1 reads B locally and sees 0.

    wr(A,2) | .        client 1 / client 2
    .       | wr(B,1)
    .       | wr(A,1)
    .       | rd(A)
    rd(B)->0| .

    The global sequence orders rd(A) (which folded in wr(B,1)) before
    rd(B), but rd(B) was answered from a local state lacking wr(B,1).
    """
    return [
        {"rec": "invoke", "t": 0, "client": "c1", "op": "wrA2", "kind": "C"},
        {"rec": "apply", "t": 1, "server": "c1-local", "op": "wrA2", "kind": "C"},
        {"rec": "invoke", "t": 2, "client": "c2", "op": "wrB1", "kind": "C"},
        {"rec": "apply", "t": 3, "server": "c2-local", "op": "wrB1", "kind": "C"},
        {"rec": "invoke", "t": 4, "client": "c2", "op": "wrA1", "kind": "C"},
        {"rec": "apply", "t": 5, "server": "c2-local", "op": "wrA1", "kind": "C"},
        {"rec": "invoke", "t": 6, "client": "c2", "op": "rdA", "kind": "T"},
        {"rec": "commit", "t": 7, "op": "rdA", "snapshot": ["wrA2", "wrB1", "wrA1"], "recovery": False},
        {"rec": "apply", "t": 7, "server": "c2-local", "op": "wrA2", "kind": "C"},
        {"rec": "apply", "t": 7, "server": "c2-local", "op": "rdA", "kind": "T"},
        {"rec": "invoke", "t": 8, "client": "c1", "op": "rdB", "kind": "T"},
        {"rec": "commit", "t": 9, "op": "rdB", "snapshot": ["wrA2"], "recovery": False},
        {"rec": "apply", "t": 9, "server": "c1-local", "op": "rdB", "kind": "T"},
    ]


@pytest.fixture
def gsp_records():
    return gsp_stale_read_records()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, _order, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=_order):
        terminalreporter.write_line(line(key))
