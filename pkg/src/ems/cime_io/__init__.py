"""File formats and transport: grid files, delta streams, socket replay, reports."""

from .deltas import (DeltaStreamError, GroupAssembler, parse_delta_stream, serialize_deltas,
                     serialize_group)
from .gride import (Diagnostic, GrideError, GrideSemanticError, GrideSyntaxError, GridFile,
                    graph_signature, parse_grid, serialize_grid)
from .replay import ReplayServer, receive_replay, serve_replay
from .results import (CsvAppender, JsonlWriter, ReportFileError, read_jsonl, write_csv,
                      write_json)

__all__ = [
    "CsvAppender", "DeltaStreamError", "Diagnostic", "GridFile", "GrideError",
    "GrideSemanticError", "GrideSyntaxError", "GroupAssembler", "JsonlWriter", "ReplayServer",
    "ReportFileError", "graph_signature", "parse_delta_stream", "parse_grid", "read_jsonl",
    "receive_replay", "serialize_deltas", "serialize_grid", "serialize_group", "serve_replay",
    "write_csv", "write_json",
]
