"""Reactive optimal power flow with shunt switching: SDP bounds, local heuristics, branch-and-bound."""

__version__ = "0.1.0"
