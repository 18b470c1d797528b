"""TCP data path on an RMT match-action pipeline, modelled in software.

The pipeline substrate lives in :mod:`laminar_sim.rmt`, the receive and
transmit blocks in :mod:`laminar_sim.rx` and :mod:`laminar_sim.tx`, and the
full program in :mod:`laminar_sim.pipeline`.  :mod:`laminar_sim.netsim`
wraps pipelines, control planes and host libraries into a discrete-event
network; :mod:`laminar_sim.scenario` drives it from YAML.
"""
from __future__ import annotations

from .control import ControlPlane, Policy
from .host import HostConnection, OracleReassembler
from .netsim import ConfigError, InvariantViolation, Network, StatsReport
from .params import DatapathConfig
from .pipeline import LaminarProgram, build_laminar_program
from .rmt import ConstraintFault, MalformedManifest, Manifest, PHV, check_program

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConstraintFault", "ControlPlane", "DatapathConfig", "HostConnection",
    "InvariantViolation", "LaminarProgram", "MalformedManifest", "Manifest", "Network",
    "OracleReassembler", "PHV", "Policy", "StatsReport", "build_laminar_program", "check_program",
]
