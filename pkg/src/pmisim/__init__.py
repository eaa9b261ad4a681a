from __future__ import annotations

from .bus import BusMessage, InProcessBus, connect_tcp, serve_tcp
from .codebook import Codebook, CodebookConfig, build_codebook, get_pm
from .config import ExperimentConfig, Scenario, load_config
from .errors import PmisimError
from .harness import Experiment, compare, evaluate, run_episode, train
from .model import Assignment, ControlDirective, CsiReport, RecordModel
from .network import RanSimulator
from .rl import A2cConfig, PolicyValueNet
from .topology import Topology
from .xapp import XApp, make_agent

__all__ = [
    "A2cConfig",
    "Assignment",
    "BusMessage",
    "Codebook",
    "CodebookConfig",
    "ControlDirective",
    "CsiReport",
    "Experiment",
    "ExperimentConfig",
    "InProcessBus",
    "PmisimError",
    "PolicyValueNet",
    "RanSimulator",
    "RecordModel",
    "Scenario",
    "Topology",
    "XApp",
    "build_codebook",
    "compare",
    "connect_tcp",
    "evaluate",
    "get_pm",
    "load_config",
    "make_agent",
    "run_episode",
    "serve_tcp",
    "train",
]
