import dataclasses
import socket
import threading
from types import MappingProxyType

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ems.cime_io import (CsvAppender, DeltaStreamError, GrideSemanticError, GrideSyntaxError,
                         GridFile, GroupAssembler, JsonlWriter, ReportFileError, graph_signature,
                         parse_delta_stream, parse_grid, read_jsonl, receive_replay,
                         serialize_deltas, serialize_grid, serve_replay, write_csv, write_json)
from ems.cime_io.gride import fmt
from ems.grid_model import SnapshotDelta
from fixtures import DELTAS, GRID, small_measurements, synthetic_grid

def test_parse_small_file():
    gf = parse_grid(GRID)
    g = gf.graph
    assert g.substations["S1"].name == "North yard" and g.substations["S2"].name == "S2"
    assert g.devices["G1"].slack and g.devices["G1"].vset == 1.02
    assert g.status == {"CB1": True}
    assert gf.measurements["P12"].end == "from" and gf.measurements["P12"].sigma is None
    assert parse_grid(GRID.encode()).graph.links["L1"].b == 0.02


def test_columns_may_come_in_any_order():
    text = GRID.replace("@ device status\n# CB1 closed", "@ status device\n# open CB1")
    assert parse_grid(text).graph.status == {"CB1": False}


def test_round_trip_is_exact():
    g, _ = synthetic_grid(4, seed=9)
    gf = GridFile(g, small_measurements(g))
    text = serialize_grid(gf)
    back = parse_grid(text)
    assert graph_signature(back) == graph_signature(gf)
    assert serialize_grid(back) == text


@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r"),
               max_size=20))
@settings(max_examples=200, deadline=None)
def test_free_text_names_round_trip(name):
    g, _ = synthetic_grid(2, seed=0)
    subs = dict(g.substations)
    subs["S1"] = dataclasses.replace(subs["S1"], name=name)
    g = dataclasses.replace(g, substations=MappingProxyType(subs))
    back = parse_grid(serialize_grid(g))
    assert back.graph.substations["S1"].name == name


def test_quoting_rules():
    assert fmt("plain") == "plain"
    assert fmt("two words") == '"two words"'
    assert fmt("") == '""' and fmt("-") == '"-"' and fmt(None) == "-"
    assert fmt('say "hi"') == '"say \\"hi\\""'
    assert fmt(True) == "1" and fmt(0.1) == "0.1"
    with pytest.raises(ValueError, match="line break"):
        fmt("a\nb")


def test_syntax_errors_are_collected_with_positions():
    bad = (GRID.replace("# LD2 S2 load 0.9 0.1 - -", "# LD2 S2 load zero 0.1 - -")
           .replace("# L1 LINE E1 E2 0.01 0.1 0.02", "# L1 LINE E1 E2 0.01")
           .replace("<Status>", "<Statuz>"))
    with pytest.raises(GrideSyntaxError) as exc:
        parse_grid(bad)
    diags = exc.value.diagnostics
    assert len(diags) >= 3
    lines = [d.line for d in diags]
    assert lines == sorted(lines)
    msgs = " | ".join(str(d) for d in diags)
    assert "bad value 'zero' for p" in msgs
    assert "expected 7 fields, got 5" in msgs
    assert "unknown table '<Statuz>'" in msgs
    first = diags[0]
    assert (first.line, first.column) == (17, 15)


def test_unterminated_quote_and_bad_bytes():
    with pytest.raises(GrideSyntaxError, match="unterminated quoted string"):
        parse_grid(GRID.replace('"North yard"', '"North yard'))
    with pytest.raises(GrideSyntaxError, match="invalid UTF-8") as exc:
        parse_grid(GRID.encode().replace(b"North", b"N\xffrth"))
    assert (exc.value.diagnostics[0].line, exc.value.diagnostics[0].column) == (9, 8)


@pytest.mark.parametrize("edit, msg", [
    (("# S2 -", "# S1 -"), "duplicate substation id S1"),
    (("# LD2 S2 load", "# LD2 S9 load"), "unknown substation S9"),
    (("# BB2 1 E2 1", "# BB1 1 E2 1"), "crosses substations"),
    (("# L1 LINE E1 E2", "# L1 LINE E1 BB2"), "must be a line-terminal"),
    (("# CB1 closed", "# BB1 closed"), "non-switch device BB1"),
    (("@ device status\n# CB1 closed\n", "@ device status\n"), "switch CB1 has no status"),
    (("# P12 PFLOW L1 from", "# P12 PFLOW L9 from"), "unknown link L9"),
    (("# V1 V BB1 - 0.004", "# V1 V BB1 - -0.5"), "non-positive sigma"),
    (("# version 1", "# version 7"), "unsupported format version 7"),
])
def test_semantic_errors(edit, msg):
    with pytest.raises(GrideSemanticError, match=msg) as exc:
        parse_grid(GRID.replace(*edit))
    assert exc.value.diagnostics[0].line > 0 or "status" in msg


@pytest.mark.parametrize("text, msg", [
    ("1 SWITCH CB1 ajar\n", "bad switch status"),
    ("1 FOO CB1 1\n", "unknown record kind"),
    ("x MEAS V1 1\n", "bad timestamp"),
    ("1 MEAS V1 nan\n", "non-finite"),
    ("1 INJ LD2 0.3\n", "<device>:P|Q"),
    ("1 MEAS V1\n", "4 fields|got 3 fields"),
    ("5 MEAS V1 1\n2 MEAS V1 1\n", "out of order"),
    ("-1 MEAS V1 1\n", "negative timestamp"),
])
def test_delta_stream_errors(text, msg):
    with pytest.raises(DeltaStreamError, match=msg):
        parse_delta_stream(text)
    with pytest.raises(DeltaStreamError, match="not UTF-8"):
        parse_delta_stream(b"1 MEAS V\xe91 1\n")


def test_assembler_commits_only_on_blank_line_and_handles_split_utf8():
    asm = GroupAssembler()
    assert asm.feed(b"3 MEAS V1 1.0\n3 MEAS V\xc3") == []
    assert asm.feed(b"\xa92 2.0\n") == [] and asm.partial
    (d,) = asm.feed(b"\n")
    assert d.measurements == {"V1": 1.0, "Vé2": 2.0}
    asm.feed(b"9 MEAS V1 0.5\n")
    asm.reset()
    assert not asm.partial and len(asm.committed) == 1
    asm.feed(b"END\n")
    assert asm.finished


def _deltas(n=30):
    return [SnapshotDelta(t, {"CB1": bool(t % 2)}, {"V1": 1.0 + t / 1e4}, {("LD2", "P"): 0.9 + t / 1e3})
            for t in range(1, n + 1)]


def test_replay_round_trip_is_byte_identical():
    deltas = _deltas()
    with serve_replay(deltas) as srv:
        got = []
        asm = receive_replay(srv.address, on_group=got.append)
    assert "".join(asm.raw).encode() == serialize_deltas(deltas).encode()
    assert got == deltas and srv.completed == 1


def test_replay_resumes_after_a_cut_mid_group():
    deltas = _deltas()
    cut = len(serialize_deltas(deltas[:11]).encode()) + 7
    with serve_replay(deltas, drop_after_bytes=cut) as srv:
        got = []
        asm = receive_replay(srv.address, on_group=got.append)
    assert got == deltas and len(got) == len({d.t for d in got})
    assert srv.sessions == 2 and srv.completed == 1
    assert "".join(asm.raw) == serialize_deltas(deltas)


def test_replay_gives_up_after_repeated_breaks():
    srv = socket.create_server(("127.0.0.1", 0))
    stop = threading.Event()

    def rude():
        srv.settimeout(0.2)
        while not stop.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                continue
            with conn:
                conn.recv(64)
                conn.sendall(b"1 MEAS V1 1.0\n")

    th = threading.Thread(target=rude, daemon=True)
    th.start()
    try:
        with pytest.raises(ConnectionError, match="kept breaking"):
            receive_replay(srv.getsockname()[:2], max_reconnects=2, timeout=2)
    finally:
        stop.set()
        th.join()
        srv.close()


def test_jsonl_survives_a_torn_tail(tmp_path):
    path = tmp_path / "r.jsonl"
    with JsonlWriter(path) as w:
        w.write({"t": 1})
        w.write({"t": 2})
    with open(path, "a") as fh:
        fh.write('{"t": 3, "x"')
    assert read_jsonl(path) == [{"t": 1}, {"t": 2}]


def test_csv_appender_checks_header(tmp_path):
    path = tmp_path / "a.csv"
    with CsvAppender(path, ["t", "v"]) as w:
        w.write([1, 2.5])
        with pytest.raises(ValueError):
            w.write([1])
    with CsvAppender(path, ["t", "v"]) as w:
        w.write([2, 3.5])
    assert path.read_text() == "t,v\n1,2.5\n2,3.5\n"
    with pytest.raises(ReportFileError, match="does not match"):
        CsvAppender(path, ["t", "w"])


def test_atomic_writers(tmp_path):
    write_csv(tmp_path / "x.csv", ["a"], [[1], [2]])
    write_json(tmp_path / "x.json", {"b": [1, 2]})
    assert (tmp_path / "x.csv").read_text() == "a\n1\n2\n"
    assert not list(tmp_path.glob("*.tmp"))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ReportFileError):
        write_json(blocker / "sub" / "y.json", {})
