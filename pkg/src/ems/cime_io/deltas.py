"""Delta-record streams: ``t kind id value`` per line.

Kinds are ``SWITCH`` (value ``open``/``closed`` or 0/1), ``MEAS`` (measured
value) and ``INJ`` (id ``<device>:P`` or ``<device>:Q``, per-unit value).
Records sharing a timestamp form one snapshot delta. The writer ends every
timestamp group with a blank line; the reader accepts blank lines anywhere,
and streaming consumers use them as group commit markers.
"""

from __future__ import annotations

import codecs
import math
from types import MappingProxyType
from typing import Iterable, Iterator

from ..grid_model import SnapshotDelta

KINDS = ("SWITCH", "MEAS", "INJ")


class DeltaStreamError(ValueError):
    def __init__(self, line: int, message: str, t: int | None = None):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.t = t


def parse_record(line: str, lineno: int = 0):
    """Parse one record line into ``(t, kind, target, value)``."""
    parts = line.split()
    if len(parts) != 4:
        raise DeltaStreamError(lineno, f"expected 't kind id value', got {len(parts)} fields")
    ts, kind, target, val = parts
    try:
        t = int(ts)
    except ValueError:
        raise DeltaStreamError(lineno, f"bad timestamp {ts!r}") from None
    if t < 0:
        raise DeltaStreamError(lineno, f"negative timestamp {t}", t)
    if kind not in KINDS:
        raise DeltaStreamError(lineno, f"unknown record kind {kind!r}", t)
    if kind == "SWITCH":
        v = val.lower()
        if v in ("closed", "1"):
            value = True
        elif v in ("open", "0"):
            value = False
        else:
            raise DeltaStreamError(lineno, f"bad switch status {val!r}", t)
        return t, kind, target, value
    try:
        value = float(val)
    except ValueError:
        raise DeltaStreamError(lineno, f"bad value {val!r}", t) from None
    if not math.isfinite(value):
        raise DeltaStreamError(lineno, f"non-finite value {val!r}", t)
    if kind == "INJ":
        dev, sep, comp = target.rpartition(":")
        if not sep or not dev or comp not in ("P", "Q"):
            raise DeltaStreamError(lineno, f"injection target must be '<device>:P|Q', got {target!r}", t)
        return t, kind, (dev, comp), value
    return t, kind, target, value


def _build(t: int, records) -> SnapshotDelta:
    sw, me, inj = {}, {}, {}
    for kind, target, value in records:
        {"SWITCH": sw, "MEAS": me, "INJ": inj}[kind][target] = value
    return SnapshotDelta(t, MappingProxyType(sw), MappingProxyType(me), MappingProxyType(inj))


def _decode(data: bytes, lineno: int = 0) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DeltaStreamError(lineno, f"not UTF-8: {exc.reason} at byte {exc.start}") from None


def _lines(source) -> Iterator[str]:
    if isinstance(source, bytes):
        source = _decode(source)
    if isinstance(source, str):
        for line in source.split("\n"):
            yield line.rstrip("\r")
        return
    for lineno, chunk in enumerate(source, 1):
        if isinstance(chunk, bytes):
            chunk = _decode(chunk, lineno)
        yield chunk.rstrip("\r\n")


def parse_delta_stream(source: str | bytes | Iterable) -> list[SnapshotDelta]:
    """Group records by timestamp; timestamps must be non-decreasing."""
    out: list[SnapshotDelta] = []
    cur_t = None
    recs: list = []
    for lineno, line in enumerate(_lines(source), 1):
        s = line.strip()
        if not s or s.startswith("//"):
            continue
        t, kind, target, value = parse_record(s, lineno)
        if cur_t is not None and t < cur_t:
            raise DeltaStreamError(lineno, f"timestamp {t} is out of order (after {cur_t})", t)
        if t != cur_t:
            if cur_t is not None:
                out.append(_build(cur_t, recs))
            cur_t, recs = t, []
        recs.append((kind, target, value))
    if cur_t is not None:
        out.append(_build(cur_t, recs))
    return out


def record_lines(d: SnapshotDelta) -> list[str]:
    lines = [f"{d.t} SWITCH {s} {'closed' if c else 'open'}" for s, c in d.switches.items()]
    lines += [f"{d.t} MEAS {m} {float(v)!r}" for m, v in d.measurements.items()]
    lines += [f"{d.t} INJ {dev}:{comp} {float(v)!r}" for (dev, comp), v in d.injections.items()]
    return lines


def serialize_group(d: SnapshotDelta) -> str:
    """One timestamp group, terminated by a blank line."""
    return "".join(line + "\n" for line in record_lines(d)) + "\n"


def serialize_deltas(deltas: Iterable[SnapshotDelta]) -> str:
    return "".join(serialize_group(d) for d in deltas)


class GroupAssembler:
    """Incremental reader for a newline-framed stream.

    Records are buffered until a blank line commits their group; anything
    left uncommitted when the stream breaks is dropped by :meth:`reset`.
    """

    def __init__(self):
        self._buf = ""
        self._dec = codecs.getincrementaldecoder("utf-8")()
        self._pending: list[str] = []
        self.committed: list[SnapshotDelta] = []
        self.raw: list[str] = []
        self.last_t: int | None = None
        self.finished = False

    def feed(self, data: bytes | str) -> list[SnapshotDelta]:
        if isinstance(data, bytes):
            try:
                data = self._dec.decode(data)
            except UnicodeDecodeError as exc:
                raise DeltaStreamError(0, f"stream is not UTF-8: {exc.reason}") from None
        self._buf += data
        new = []
        while "\n" in self._buf:
            line, self._buf = self._buf.split("\n", 1)
            if line.strip() == "END" and not self._pending:
                self.finished = True
                continue
            if line.strip():
                self._pending.append(line)
                continue
            if not self._pending:
                continue
            group = parse_delta_stream(self._pending)
            if len(group) != 1:
                raise DeltaStreamError(0, "a committed group spans several timestamps")
            d = group[0]
            if self.last_t is not None and d.t < self.last_t:
                raise DeltaStreamError(0, f"timestamp {d.t} is out of order", d.t)
            self.raw.append("".join(p + "\n" for p in self._pending) + "\n")
            self._pending = []
            self.committed.append(d)
            self.last_t = d.t
            new.append(d)
        return new

    @property
    def partial(self) -> bool:
        return bool(self._pending or self._buf)

    def reset(self) -> None:
        self.finished = False
        self._buf = ""
        self._dec.reset()
        self._pending = []
