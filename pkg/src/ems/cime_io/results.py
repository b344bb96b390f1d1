"""Append-only report files: JSON lines and headed CSV.

Every record is flushed and fsync'd as it is written, so a crash can at worst
leave one truncated final line; readers drop such a line.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path


class ReportFileError(OSError):
    pass


def _open_append(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "a", encoding="utf-8", newline="")
    except OSError as exc:
        raise ReportFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _sync(fh) -> None:
    fh.flush()
    os.fsync(fh.fileno())


class JsonlWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = _open_append(self.path)

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True, allow_nan=True) + "\n")
        _sync(self._fh)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    """Records of a JSON-lines file; an unterminated last line (torn write) is ignored."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    complete = lines[:-1]          # the piece after the final newline is empty or torn
    return [json.loads(line) for line in complete if line.strip()]


class CsvAppender:
    """CSV file with a fixed header; an existing file must carry the same header."""

    def __init__(self, path, header):
        self.path = Path(path)
        self.header = list(header)
        existing = self.path.exists() and self.path.stat().st_size > 0
        if existing:
            with open(self.path, encoding="utf-8", newline="") as fh:
                first = next(csv.reader(fh), None)
            if first != self.header:
                raise ReportFileError(f"{self.path}: header {first} does not match {self.header}")
        self._fh = _open_append(self.path)
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if not existing:
            self._writer.writerow(self.header)
            _sync(self._fh)

    def write(self, row) -> None:
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} fields, header has {len(self.header)}")
        self._writer.writerow(row)
        _sync(self._fh)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, header, rows) -> None:
    """Write a complete CSV in one go (atomic replace)."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(buf.getvalue(), encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportFileError(f"cannot write {path}: {exc.strerror or exc}") from exc
