from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Literal, Mapping, Optional

import yaml
from pydantic import ConfigDict, Field, model_validator

from .codebook import CodebookConfig
from .errors import ConfigError, SchemaError
from .model import RecordModel
from .rl import A2cConfig

_SECTION = ConfigDict(extra="forbid", validate_assignment=True)

AGENT_KINDS = ("follow_pmi", "a2c", "inter_a2c", "random")
AgentKind = Literal["follow_pmi", "a2c", "inter_a2c", "random"]


class Scenario(RecordModel):
    """Network layout and radio parameters (large-scale part)."""

    model_config = _SECTION

    num_sites: int = Field(default=7, ge=1)
    sectors_per_site: int = Field(default=3, ge=1)
    isd: float = 500.0
    carrier_freq: float = Field(default=3.7, gt=0.0)
    bandwidth: float = Field(default=10.0, gt=0.0)
    num_prbs: int = Field(default=52, ge=1)
    num_subbands: int = Field(default=6, ge=1)
    prb_bandwidth_hz: float = Field(default=180_000.0, gt=0.0)
    ues_per_cell: int = Field(default=10, ge=0)
    ue_antennas: int = Field(default=2, ge=1)
    bs_power: float = 43.0
    bs_height: float = Field(default=25.0, gt=0.0)
    ue_height: float = Field(default=1.5, gt=0.0)
    noise_figure: float = 9.0
    min_ue_distance: float = Field(default=35.0, ge=10.0)
    antenna_max_gain: float = 0.0
    antenna_hpbw: float = Field(default=65.0, gt=0.0)
    antenna_max_attenuation: float = Field(default=30.0, ge=0.0)
    max_neighbors: int = Field(default=9, ge=0)
    edge_rsrp_dbm: float = -100.0
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self) -> Scenario:
        if self.isd <= 0:
            raise ValueError("isd must be positive")
        if self.num_subbands > self.num_prbs:
            raise ValueError("num_prbs must be >= num_subbands")
        return self

    @property
    def num_cells(self) -> int:
        return self.num_sites * self.sectors_per_site

    def subband_sizes(self) -> List[int]:
        """PRB count per subband; sizes differ by at most one PRB."""
        base, extra = divmod(self.num_prbs, self.num_subbands)
        return [base + (1 if s < extra else 0) for s in range(self.num_subbands)]

    def subband_of_prb(self) -> List[int]:
        out: List[int] = []
        for s, size in enumerate(self.subband_sizes()):
            out.extend([s] * size)
        return out


class PhyConfig(RecordModel):
    model_config = _SECTION

    traffic: Literal["fixed_rate", "full_buffer"] = "fixed_rate"
    demand_mbps: float = Field(default=1.0, ge=0.0)
    rho: float = Field(default=0.9, ge=0.0, le=1.0)
    thermal_density: float = -174.0
    tti_ms: float = Field(default=1.0, gt=0.0)


class RewardConfig(RecordModel):
    model_config = _SECTION

    target_se: float = 2.5
    alpha: float = Field(default=0.7, ge=0.0)
    prb_target: float = Field(default=0.85, ge=0.0, le=1.0)
    invalid_action_penalty: float = Field(default=-10.0, le=0.0)


class XAppConfig(RecordModel):
    """Normalization and grouping constants of the decision layer."""

    model_config = _SECTION

    thr_cap_mbps: float = Field(default=50.0, gt=0.0)
    max_ues_per_cell: int = Field(default=50, ge=1)
    interference_decades: float = Field(default=6.0, gt=0.0)
    high_interference_fraction: float = Field(default=0.2, gt=0.0, le=1.0)


class BusConfig(RecordModel):
    model_config = _SECTION

    tcp_addr: Optional[str] = None

    def tcp_endpoint(self) -> Optional[tuple[str, int]]:
        if not self.tcp_addr:
            return None
        host, _, port = self.tcp_addr.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bus.tcp_addr must be host:port, got {self.tcp_addr}")
        return host, int(port)


class ExperimentConfig(RecordModel):
    model_config = _SECTION

    scenario: Scenario = Field(default_factory=Scenario)
    phy: PhyConfig = Field(default_factory=PhyConfig)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    xapp: XAppConfig = Field(default_factory=XAppConfig)
    rl: A2cConfig = Field(default_factory=A2cConfig)
    bus: BusConfig = Field(default_factory=BusConfig)
    agent: AgentKind = "inter_a2c"
    episodes: int = Field(default=2000, ge=1)
    ttis_per_episode: int = Field(default=10, ge=1)
    eval_episodes: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    out_dir: str = "out"
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    log_every: int = Field(default=100, ge=1)
    smoothing_window: int = Field(default=100, ge=1)


def expand_dotted(tree: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Expands flat dotted keys ("bus.tcp_addr") into nested dicts. Nested and
    flat spellings may be mixed in one document.
    """
    out: Dict[str, Any] = {}
    for key, value in tree.items():
        if isinstance(value, Mapping):
            value = expand_dotted(value)
        set_dotted(out, key, value)
    return out


def set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Key {key} conflicts with scalar {part}")
        node = child
    leaf = parts[-1]
    if isinstance(value, dict) and isinstance(node.get(leaf), dict):
        for k, v in value.items():
            set_dotted(node[leaf], k, v)
    else:
        node[leaf] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Parses a `key=value` override; the value is read as a YAML scalar."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"Override must look like key=value, got {text}")
    return key.strip(), yaml.safe_load(raw)


def read_config_tree(path: os.PathLike) -> Dict[str, Any]:
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    try:
        with open(path, "r", encoding="utf-8") as f:
            if suffix in (".yaml", ".yml"):
                tree = yaml.safe_load(f) or {}
            else:
                tree = json.load(f)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"Config {path} must hold a mapping at top level")
    return tree


def load_config(
    path: Optional[os.PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Loads an experiment configuration from a JSON or YAML file (or the
    defaults when `path` is None) and applies dotted-key overrides.
    """
    tree = expand_dotted(read_config_tree(path)) if path else {}
    for key, value in (overrides or {}).items():
        set_dotted(tree, key, value)
    try:
        return ExperimentConfig.from_native_tree(tree)
    except SchemaError as exc:
        raise ConfigError(str(exc)) from exc
