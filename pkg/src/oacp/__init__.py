"""Observable atomic consistency over CvRDTs, simulated.

Modules: :mod:`crdt` (lattice states), :mod:`consistency` (orders and the
OAC checker), :mod:`simnet` (discrete-event network), :mod:`rtob` (replicated
log), :mod:`protocol` (OACP and O2ACP servers and clients), :mod:`baselines`
(log-everything comparisons) and :mod:`harness` (workloads, metrics, runs).
"""

__version__ = "0.1.0"
