"""Evolving-graph EMS analysis: topology processing, state estimation,
fast-decoupled power flow and N-1 contingency analysis."""

__version__ = "0.1.0"
