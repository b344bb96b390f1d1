"""SCADA-feed emulation: serve delta groups over TCP, and a reconnecting client.

Session protocol (newline framed): the client sends ``RESUME <n>`` where ``n``
is the number of groups it has already committed (``0`` on first connect);
the server then streams the remaining groups, each flushed as one write and
terminated by a blank line, and finishes with an ``END`` line. A connection
that closes without ``END`` is a broken session.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Sequence

from ..grid_model import SnapshotDelta
from .deltas import GroupAssembler, serialize_group

log = logging.getLogger(__name__)


class ReplayServer:
    """One client per session; sessions are served one after another.

    ``rate`` is timestamp groups per second; ``None`` or ``inf`` sends as
    fast as possible. ``drop_after_bytes`` (fault injection) cuts the first
    session after that many payload bytes.
    """

    def __init__(self, deltas: Sequence[SnapshotDelta], endpoint=("127.0.0.1", 0),
                 rate: float | None = None, drop_after_bytes: int | None = None):
        self.groups = [serialize_group(d).encode("utf-8") for d in deltas]
        self.rate = rate
        self.drop_after_bytes = drop_after_bytes
        self.sessions = 0
        self.completed = 0
        try:
            self._sock = socket.create_server(endpoint)
        except OSError as exc:
            raise ConnectionError(f"cannot bind replay endpoint {endpoint}: {exc}") from exc
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    @property
    def address(self):
        return self._sock.getsockname()[:2]

    def start(self) -> "ReplayServer":
        if not self._thread.is_alive() and not self._stop.is_set():
            self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _serve(self):
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                self.sessions += 1
                try:
                    self._session(conn, first=self.sessions == 1)
                except OSError as exc:
                    log.info("replay client went away: %s", exc)

    def _session(self, conn: socket.socket, first: bool):
        conn.settimeout(5)
        buf = b""
        while b"\n" not in buf:
            chunk = conn.recv(256)
            if not chunk:
                return
            buf += chunk
        req = buf.split(b"\n", 1)[0].decode("ascii", "replace").split()
        start = int(req[1]) if len(req) == 2 and req[0] == "RESUME" and req[1].isdigit() else 0
        budget = self.drop_after_bytes if first else None
        interval = 0.0 if not self.rate or self.rate == float("inf") else 1.0 / self.rate
        for payload in self.groups[start:]:
            if budget is not None:
                if len(payload) >= budget:
                    conn.sendall(payload[:budget])
                    conn.shutdown(socket.SHUT_RDWR)
                    return
                budget -= len(payload)
            conn.sendall(payload)
            if interval:
                time.sleep(interval)
        conn.sendall(b"END\n")
        self.completed += 1


def serve_replay(deltas: Sequence[SnapshotDelta], endpoint=("127.0.0.1", 0),
                 rate: float | None = None, **kw) -> ReplayServer:
    return ReplayServer(deltas, endpoint, rate, **kw).start()


def receive_replay(address, max_reconnects: int = 5, timeout: float = 10.0,
                   on_group=None) -> GroupAssembler:
    """Consume a replay feed, reconnecting after a broken session.

    Only complete timestamp groups are ever handed to ``on_group``; a group
    cut by a disconnect is discarded and re-requested.
    """
    asm = GroupAssembler()
    for _attempt in range(max_reconnects + 1):
        with socket.create_connection(address, timeout=timeout) as s:
            s.sendall(f"RESUME {len(asm.committed)}\n".encode("ascii"))
            while True:
                try:
                    chunk = s.recv(65536)
                except (ConnectionResetError, socket.timeout):
                    chunk = b""
                if not chunk:
                    break
                for d in asm.feed(chunk):
                    if on_group is not None:
                        on_group(d)
        if asm.finished:
            return asm
        asm.reset()
    raise ConnectionError("replay feed kept breaking mid-group")
