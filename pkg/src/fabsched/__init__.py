"""Wafer-fab dispatching testbed: stochastic discrete-event simulator,
hierarchical dispatching heuristics, and an attention dispatcher trained with
self-supervised encoding pretraining plus evolution strategies."""

__version__ = "0.1.0"
