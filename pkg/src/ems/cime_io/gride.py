"""Reader and writer for the ``.gride`` grid description format.

The layout follows CIM/E's tabular style::

    // comment
    <Device>
    @ id substation kind p q vset slack b
    # BB1 S1 busbar-section - - - - -
    </Device>

A table opens with ``<Name>`` and closes with ``</Name>``. The ``@`` line
names the columns (any order, required columns must be present); ``#`` lines
are records; ``-`` is an empty value. Tables: Header, Substation, Device,
Connection, Link, Status, Measurement. See docs/gride-format.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType

from ..grid_model import (MEASUREMENT_KINDS, Connection, Device, DeviceKind, GridModelError, Link,
                          MeasurementDef, NodeBreakerGraph, Substation)

FORMAT_VERSION = 1

TABLES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    # name: (all columns in canonical order, required columns)
    "Header": (("key", "value"), ("key", "value")),
    "Substation": (("id", "name"), ("id",)),
    "Device": (("id", "substation", "kind", "p", "q", "vset", "slack", "b"),
               ("id", "substation", "kind")),
    "Connection": (("device_a", "terminal_a", "device_b", "terminal_b"),
                   ("device_a", "terminal_a", "device_b", "terminal_b")),
    "Link": (("id", "kind", "from", "to", "r", "x", "b", "tap", "rate"),
             ("id", "kind", "from", "to", "r", "x")),
    "Status": (("device", "status"), ("device", "status")),
    "Measurement": (("id", "kind", "location", "end", "sigma", "value"),
                    ("id", "kind", "location")),
}
HEADER_KEYS = ("version", "mva_base", "vmin", "vmax")


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str
    expected: str | None = None

    def __str__(self) -> str:
        s = f"{self.line}:{self.column}: {self.message}"
        return s + (f" (expected {self.expected})" if self.expected else "")


class GrideError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics[:5]))


class GrideSyntaxError(GrideError):
    pass


class GrideSemanticError(GrideError):
    pass


@dataclass(frozen=True, eq=False)
class GridFile:
    graph: NodeBreakerGraph
    measurements: dict[str, MeasurementDef] = field(default_factory=dict)
    version: int = FORMAT_VERSION


@dataclass
class _Row:
    table: str
    line: int
    cells: dict[str, tuple[str, int]]     # column -> (token, column number)


class _Quoted(str):
    """A token that was written in quotes, so ``-`` is text rather than empty."""


def _lex(text: str):
    """Split a line into ``(token, column)`` pairs, dropping a ``//`` comment.

    Double-quoted tokens may hold whitespace, ``//`` and the escapes ``\\"`` and
    ``\\\\``. Returns ``(tokens, error)`` where ``error`` is ``(column, message)``
    for an unterminated quote, else None.
    """
    out, i, n = [], 0, len(text)
    while i < n:
        while i < n and text[i].isspace():
            i += 1
        if i >= n or text.startswith("//", i):
            break
        if text[i] == '"':
            buf, j = [], i + 1
            while j < n and text[j] != '"':
                if text[j] == "\\" and j + 1 < n:
                    j += 1
                buf.append(text[j])
                j += 1
            if j >= n:
                return out, (i + 1, "unterminated quoted string")
            out.append((_Quoted("".join(buf)), i + 1))
            i = j + 1
            continue
        j = i
        while j < n and not text[j].isspace() and not text.startswith("//", j):
            j += 1
        out.append((text[i:j], i + 1))
        i = j
    return out, None


def _split_lines(text: str) -> list[str]:
    """Lines split on LF only (CRLF tolerated); other Unicode breaks are ordinary text."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln[:-1] if ln.endswith("\r") else ln for ln in lines]


def _scan(text: str):
    """Syntax pass: split into tables of rows, collecting every syntax error."""
    errors: list[Diagnostic] = []
    tables: dict[str, list[_Row]] = {name: [] for name in TABLES}
    seen: set[str] = set()
    current = None
    columns = None
    lines = _split_lines(text)
    for lineno, raw in enumerate(lines, 1):
        toks, err = _lex(raw)
        if err:
            errors.append(Diagnostic(lineno, err[0], err[1], 'closing \'"\''))
            continue
        if not toks:
            continue
        col0 = toks[0][1]
        line = raw.rstrip()
        stripped = raw[col0 - 1:].split("//", 1)[0].rstrip()
        if stripped.startswith("</"):
            name = stripped[2:-1] if stripped.endswith(">") else None
            if current is None or name != current:
                errors.append(Diagnostic(lineno, col0, f"unexpected {stripped!r}",
                                         f"</{current}>" if current else "a table header"))
            current, columns = None, None
            continue
        if stripped.startswith("<"):
            if current is not None:
                errors.append(Diagnostic(lineno, col0, f"table <{current}> is not closed",
                                         f"</{current}>"))
            name = stripped[1:-1] if stripped.endswith(">") else stripped[1:]
            if not stripped.endswith(">") or name not in TABLES:
                errors.append(Diagnostic(lineno, col0, f"unknown table {stripped!r}",
                                         "one of " + ", ".join(f"<{t}>" for t in TABLES)))
                current, columns = "?", None
                continue
            if name in seen:
                errors.append(Diagnostic(lineno, col0, f"table <{name}> repeated"))
            seen.add(name)
            current, columns = name, None
            continue
        if current is None:
            errors.append(Diagnostic(lineno, col0, "content outside a table", "<Table>"))
            continue
        if current == "?":
            continue
        head, hcol = toks[0]
        if head == "@":
            allowed, required = TABLES[current]
            names = [t for t, _ in toks[1:]]
            bad = False
            for t, c in toks[1:]:
                if t not in allowed:
                    errors.append(Diagnostic(lineno, c, f"unknown column {t!r} in <{current}>",
                                             "one of " + " ".join(allowed)))
                    bad = True
            if len(set(names)) != len(names):
                errors.append(Diagnostic(lineno, hcol, "duplicate column name"))
                bad = True
            missing = [r for r in required if r not in names]
            if missing:
                errors.append(Diagnostic(lineno, hcol, f"missing required column(s) {missing}",
                                         " ".join(required)))
                bad = True
            columns = [] if bad else names
            continue
        if head != "#":
            errors.append(Diagnostic(lineno, hcol, f"unexpected token {head!r}", "'@' or '#'"))
            continue
        if columns is None:
            errors.append(Diagnostic(lineno, hcol, "record before column header", "'@' line"))
            continue
        if not columns:
            continue  # header already reported
        vals = toks[1:]
        if len(vals) != len(columns):
            c = vals[len(columns)][1] if len(vals) > len(columns) else len(line) + 1
            errors.append(Diagnostic(lineno, c, f"expected {len(columns)} fields, got {len(vals)}",
                                     " ".join(columns)))
            continue
        tables[current].append(_Row(current, lineno, dict(zip(columns, vals))))
    if current is not None and current != "?":
        errors.append(Diagnostic(len(lines) + 1, 1, f"table <{current}> is not closed",
                                 f"</{current}>"))
    return tables, errors


class _Reader:
    """Typed field access over scanned rows; conversion failures are syntax errors."""

    def __init__(self):
        self.errors: list[Diagnostic] = []

    def get(self, row: _Row, col: str, conv=str, default=None, expected=None):
        cell = row.cells.get(col)
        if cell is None or (cell[0] == "-" and not isinstance(cell[0], _Quoted)):
            if cell is not None and col in TABLES[row.table][1]:
                self.errors.append(Diagnostic(row.line, cell[1], f"{col} may not be empty",
                                              expected or col))
            return default
        tok, c = cell
        try:
            v = conv(tok)
        except (ValueError, KeyError):
            self.errors.append(Diagnostic(row.line, c, f"bad value {tok!r} for {col}",
                                          expected or conv.__name__))
            return default
        return v


def _float(tok: str) -> float:
    v = float(tok)
    if not math.isfinite(v):
        raise ValueError(tok)
    return v


def _int(tok: str) -> int:
    return int(tok)


def _bool(tok: str) -> bool:
    if tok in ("1", "true", "yes"):
        return True
    if tok in ("0", "false", "no"):
        return False
    raise ValueError(tok)


def _status(tok: str) -> bool:
    t = tok.lower()
    if t in ("closed", "1"):
        return True
    if t in ("open", "0"):
        return False
    raise ValueError(tok)


def _ident(tok: str) -> str:
    if not tok or any(ch in tok for ch in ":<>@#") or tok == "-":
        raise ValueError(tok)
    return tok


def parse_grid(text: str | bytes) -> GridFile:
    """Parse ``.gride`` text into a validated node-breaker graph plus measurements.

    All syntax errors are collected and raised together as
    :class:`GrideSyntaxError`; validation stops at the first semantic error
    (:class:`GrideSemanticError`). Both carry line/column diagnostics.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            head = text[: exc.start]
            line = head.count(b"\n") + 1
            col = exc.start - (head.rfind(b"\n") + 1) + 1
            raise GrideSyntaxError([Diagnostic(line, col, f"invalid UTF-8 ({exc.reason})")]) from None
    tables, errors = _scan(text)
    rd = _Reader()

    header = {"version": FORMAT_VERSION, "mva_base": 100.0, "vmin": 0.94, "vmax": 1.06}
    header_line = {}
    for row in tables["Header"]:
        key = rd.get(row, "key")
        if key not in HEADER_KEYS:
            rd.errors.append(Diagnostic(row.line, row.cells["key"][1], f"unknown header key {key!r}",
                                        " ".join(HEADER_KEYS)))
            continue
        conv = _int if key == "version" else _float
        val = rd.get(row, "value", conv)
        if val is not None:
            header[key] = val
            header_line[key] = row

    subs = []
    for row in tables["Substation"]:
        sid = rd.get(row, "id", _ident, expected="identifier")
        subs.append((row, sid, rd.get(row, "name", default=sid)))

    devs = []
    for row in tables["Device"]:
        devs.append((row, dict(
            id=rd.get(row, "id", _ident, expected="identifier"),
            substation=rd.get(row, "substation", _ident, expected="identifier"),
            kind=rd.get(row, "kind", DeviceKind, expected="device kind"),
            p=rd.get(row, "p", _float, 0.0), q=rd.get(row, "q", _float, 0.0),
            vset=rd.get(row, "vset", _float), slack=rd.get(row, "slack", _bool, False),
            b=rd.get(row, "b", _float, 0.0))))

    conns = []
    for row in tables["Connection"]:
        conns.append((row, (rd.get(row, "device_a", _ident, expected="identifier"),
                            rd.get(row, "terminal_a", _int),
                            rd.get(row, "device_b", _ident, expected="identifier"),
                            rd.get(row, "terminal_b", _int))))

    links = []
    for row in tables["Link"]:
        kind = rd.get(row, "kind")
        if kind is not None and kind not in ("LINE", "XFMR"):
            rd.errors.append(Diagnostic(row.line, row.cells["kind"][1], f"bad link kind {kind!r}",
                                        "LINE or XFMR"))
        links.append((row, dict(
            id=rd.get(row, "id", _ident, expected="identifier"), kind=kind,
            from_device=rd.get(row, "from", _ident, expected="identifier"),
            to_device=rd.get(row, "to", _ident, expected="identifier"),
            r=rd.get(row, "r", _float, 0.0), x=rd.get(row, "x", _float, 0.0),
            b=rd.get(row, "b", _float, 0.0), tap=rd.get(row, "tap", _float, 1.0),
            rate=rd.get(row, "rate", _float, 0.0))))

    stats = []
    for row in tables["Status"]:
        stats.append((row, rd.get(row, "device", _ident, expected="identifier"),
                      rd.get(row, "status", _status, expected="open or closed")))

    meas = []
    for row in tables["Measurement"]:
        kind = rd.get(row, "kind")
        if kind is not None and kind not in MEASUREMENT_KINDS:
            rd.errors.append(Diagnostic(row.line, row.cells["kind"][1],
                                        f"bad measurement kind {kind!r}",
                                        " ".join(MEASUREMENT_KINDS)))
        end = rd.get(row, "end")
        if end is not None and end not in ("from", "to"):
            rd.errors.append(Diagnostic(row.line, row.cells["end"][1], f"bad end {end!r}",
                                        "from, to or -"))
        meas.append((row, dict(
            id=rd.get(row, "id", _ident, expected="identifier"), kind=kind,
            location=rd.get(row, "location", _ident, expected="identifier"), end=end,
            sigma=rd.get(row, "sigma", _float), value=rd.get(row, "value", _float))))

    errors += rd.errors
    if errors:
        raise GrideSyntaxError(sorted(errors, key=lambda d: (d.line, d.column)))

    # ---- semantic pass: stop at the first problem
    def fail(row: _Row, col: str, msg: str):
        c = row.cells[col][1] if col in row.cells else 1
        raise GrideSemanticError([Diagnostic(row.line, c, msg)])

    if header["version"] != FORMAT_VERSION:
        fail(header_line["version"], "value", f"unsupported format version {header['version']}")
    if header["mva_base"] <= 0:
        fail(header_line["mva_base"], "value", "mva_base must be positive")

    substations: dict[str, Substation] = {}
    where: dict[str, int] = {}
    for row, sid, name in subs:
        if sid in substations:
            fail(row, "id", f"duplicate substation id {sid} (lines {where[sid]} and {row.line})")
        substations[sid] = Substation(sid, name)
        where[sid] = row.line

    devices: dict[str, Device] = {}
    dwhere: dict[str, int] = {}
    for row, d in devs:
        if d["id"] in devices:
            fail(row, "id", f"duplicate device id {d['id']} (lines {dwhere[d['id']]} and {row.line})")
        if d["substation"] not in substations:
            fail(row, "substation", f"device {d['id']} references unknown substation {d['substation']}")
        devices[d["id"]] = Device(**d)
        dwhere[d["id"]] = row.line

    connections = []
    for row, (da, ta, db, tb) in conns:
        for col, dev_id, term in (("device_a", da, ta), ("device_b", db, tb)):
            dev = devices.get(dev_id)
            if dev is None:
                fail(row, col, f"connection references unknown device {dev_id}")
            if not 1 <= term <= dev.kind.terminals:
                fail(row, col.replace("device", "terminal"), f"device {dev_id} has no terminal {term}")
        if devices[da].substation != devices[db].substation:
            fail(row, "device_b", f"connection {da}-{db} crosses substations")
        connections.append(Connection(da, ta, db, tb))

    link_map: dict[str, Link] = {}
    lwhere: dict[str, int] = {}
    for row, lk in links:
        if lk["id"] in link_map:
            fail(row, "id", f"duplicate link id {lk['id']} (lines {lwhere[lk['id']]} and {row.line})")
        want = DeviceKind.LINE_END if lk["kind"] == "LINE" else DeviceKind.WINDING
        for col in ("from", "to"):
            dev_id = lk["from_device" if col == "from" else "to_device"]
            dev = devices.get(dev_id)
            if dev is None:
                fail(row, col, f"link {lk['id']} references unknown device {dev_id}")
            if dev.kind is not want:
                fail(row, col, f"link {lk['id']} end {dev_id} must be a {want.value}")
        if lk["kind"] == "LINE" and (devices[lk["from_device"]].substation
                                     == devices[lk["to_device"]].substation):
            fail(row, "to", f"line {lk['id']} endpoints lie in one substation")
        if lk["tap"] <= 0:
            fail(row, "tap", f"link {lk['id']} has non-positive tap")
        link_map[lk["id"]] = Link(**lk)
        lwhere[lk["id"]] = row.line

    status: dict[str, bool] = {}
    swhere: dict[str, int] = {}
    for row, dev_id, closed in stats:
        dev = devices.get(dev_id)
        if dev is None:
            fail(row, "device", f"status for unknown device {dev_id}")
        if not dev.kind.is_switch:
            fail(row, "device", f"status for non-switch device {dev_id}")
        if dev_id in status:
            fail(row, "device", f"duplicate status for {dev_id} (lines {swhere[dev_id]} and {row.line})")
        status[dev_id] = closed
        swhere[dev_id] = row.line
    for dev_id, dev in devices.items():
        if dev.kind.is_switch and dev_id not in status:
            raise GrideSemanticError([Diagnostic(dwhere[dev_id], 1, f"switch {dev_id} has no status")])

    measurements: dict[str, MeasurementDef] = {}
    mwhere: dict[str, int] = {}
    for row, m in meas:
        if m["id"] in measurements:
            fail(row, "id", f"duplicate measurement id {m['id']} (lines {mwhere[m['id']]} and {row.line})")
        if m["kind"] in ("PFLOW", "QFLOW"):
            if m["location"] not in link_map:
                fail(row, "location", f"flow measurement {m['id']} references unknown link {m['location']}")
            if m["end"] is None:
                fail(row, "end", f"flow measurement {m['id']} needs an end")
        else:
            if m["location"] not in devices:
                fail(row, "location", f"measurement {m['id']} references unknown device {m['location']}")
            if m["end"] is not None:
                fail(row, "end", f"measurement {m['id']} takes no end")
        if m["sigma"] is not None and m["sigma"] <= 0:
            fail(row, "sigma", f"measurement {m['id']} has non-positive sigma")
        measurements[m["id"]] = MeasurementDef(**m)
        mwhere[m["id"]] = row.line

    graph = NodeBreakerGraph(
        MappingProxyType(substations), MappingProxyType(devices), tuple(connections),
        MappingProxyType(link_map), MappingProxyType(status), header["mva_base"],
        header["vmin"], header["vmax"])
    try:
        graph.validate()
    except GridModelError as exc:
        raise GrideSemanticError([Diagnostic(0, 0, str(exc))]) from None
    return GridFile(graph, measurements, int(header["version"]))


def fmt(v) -> str:
    """Shortest round-trippable text for a field value; ``-`` for None."""
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if "\n" in s or "\r" in s:
        raise ValueError(f"field value {s!r} contains a line break")
    if not s or s == "-" or '"' in s or "//" in s or any(ch.isspace() for ch in s):
        return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return s


def _table(name: str, rows) -> list[str]:
    cols = TABLES[name][0]
    out = [f"<{name}>", "@ " + " ".join(cols)]
    out += ["# " + " ".join(fmt(v) for v in r) for r in rows]
    out.append(f"</{name}>")
    return out


def serialize_grid(gf: GridFile | NodeBreakerGraph, measurements=None) -> str:
    if isinstance(gf, NodeBreakerGraph):
        gf = GridFile(gf, dict(measurements or {}))
    g = gf.graph
    lines = ["// gride grid description"]
    lines += _table("Header", [("version", gf.version), ("mva_base", float(g.mva_base)),
                               ("vmin", float(g.vmin)), ("vmax", float(g.vmax))])
    lines += _table("Substation", [(s.id, s.name) for s in g.substations.values()])
    lines += _table("Device", [(d.id, d.substation, d.kind.value, d.p, d.q, d.vset, d.slack, d.b)
                               for d in g.devices.values()])
    lines += _table("Connection", [(c.device_a, c.terminal_a, c.device_b, c.terminal_b)
                                   for c in g.connections])
    lines += _table("Link", [(k.id, k.kind, k.from_device, k.to_device, k.r, k.x, k.b, k.tap, k.rate)
                             for k in g.links.values()])
    lines += _table("Status", [(s, "closed" if c else "open") for s, c in g.status.items()])
    lines += _table("Measurement", [(m.id, m.kind, m.location, m.end, m.sigma, m.value)
                                    for m in gf.measurements.values()])
    return "\n".join(lines) + "\n"


def graph_signature(gf: GridFile) -> tuple:
    """Structural identity of a parsed file, for round-trip comparisons."""
    g = gf.graph
    return (gf.version, g.mva_base, g.vmin, g.vmax, tuple(g.substations.items()),
            tuple(g.devices.items()), g.connections, tuple(g.links.items()),
            tuple(g.status.items()), tuple(gf.measurements.items()))
