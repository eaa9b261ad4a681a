"""
Experiment orchestration: wires simulator, bus and xApp into the TTI loop
and implements the run/train/eval/compare workflows with their CSV and
JSON outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import ConfigDict, Field

from .bus import InProcessBus, TcpBusServer, serve_tcp
from .codebook import Codebook, build_codebook
from .config import ExperimentConfig
from .errors import (
    ConfigError,
    DecodeError,
    ScenarioMismatchError,
    StateError,
    SubjectError,
    TrainingDivergedError,
)
from .log import get_logger
from .model import RecordModel
from .network import AppliedDirective, RanSimulator
from .phy import TtiRealization
from .rl import Checkpoint
from .topology import Topology
from .utils import keyed_rng, trailing_mean
from .xapp import Decision, PolicyAgent, RewardBreakdown, XApp, make_agent

logger = get_logger(__name__)

RL_AGENTS = ("a2c", "inter_a2c")
COMPARED_AGENTS = ("follow_pmi", "a2c", "inter_a2c")
# pairs reported as (minuend, subtrahend) in comparison.csv
COMPARED_DELTAS = (
    ("inter_a2c", "follow_pmi"),
    ("inter_a2c", "a2c"),
    ("a2c", "follow_pmi"),
)
SUMMARY_KEYS = (
    "mean_se",
    "mean_thr",
    "mean_prb_util",
    "mean_interference",
    "net_mean_se",
    "net_mean_thr",
    "mean_reward",
)
EVAL_EPISODE_OFFSET = 1_000_000

_STREAM_AGENT = 4


class MetricsRow(RecordModel):
    """
    One logged decision: the optimized cell's metrics realized in the TTI
    after the directive took effect, network-wide aggregates of the same
    TTI and the reward breakdown.
    """

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    episode: int = Field(ge=0)
    tti: int = Field(ge=0)
    pci: int = Field(ge=0)
    agent: str
    mean_se: float
    mean_thr: float
    prb_util: float
    cell_interference: float
    reward: float
    group: str
    pmi_r1: int = -1
    pmi_r2: int = -1
    gamma_u: float
    interference_cost: float
    action_penalty: float = 0.0
    degenerate: bool = False
    invalid: bool = False
    net_mean_se: float
    net_mean_thr: float
    net_prb_util: float
    net_interference: float


METRICS_HEADER = list(MetricsRow.model_fields)


@dataclass
class EpisodeResult:
    episode: int
    rows: List[MetricsRow] = field(default_factory=list)
    realized: List[TtiRealization] = field(default_factory=list)
    channel_hashes: List[str] = field(default_factory=list)
    applied: List[AppliedDirective] = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.reward for r in self.rows]))


def make_row(
    episode: int,
    agent: str,
    decision: Decision,
    breakdown: RewardBreakdown,
    realized: TtiRealization,
) -> MetricsRow:
    members = realized.cell_members[decision.pci]
    action = decision.action
    return MetricsRow(
        episode=episode,
        tti=decision.tti,
        pci=decision.pci,
        agent=agent,
        mean_se=float(np.mean(realized.se[members])),
        mean_thr=float(np.mean(realized.thr_mbps[members])),
        prb_util=float(realized.utilization[decision.pci]),
        cell_interference=realized.i_cell[decision.pci],
        reward=breakdown.total,
        group=decision.group.kind.name,
        pmi_r1=action.pmi_r1 if action else -1,
        pmi_r2=action.pmi_r2 if action else -1,
        gamma_u=breakdown.gamma_u,
        interference_cost=breakdown.interference_cost,
        action_penalty=breakdown.action_penalty,
        degenerate=breakdown.degenerate,
        invalid=breakdown.invalid,
        net_mean_se=float(np.mean(realized.se)),
        net_mean_thr=float(np.mean(realized.thr_mbps)),
        net_prb_util=float(np.mean(realized.utilization)),
        net_interference=float(np.mean(realized.i_cell)),
    )


class Experiment:
    """
    One simulator, bus and xApp for a single agent. The topology can be
    shared between experiments of a comparison.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        agent_kind: Optional[str] = None,
        checkpoint: Optional[Checkpoint] = None,
        topology: Optional[Topology] = None,
        codebook: Optional[Codebook] = None,
    ):
        self.cfg = cfg
        self.kind = agent_kind or cfg.agent
        self.bus = InProcessBus()
        self.sim = RanSimulator(cfg, topology, codebook)
        self.sim.attach(self.bus)
        cb = self.sim.codebook
        self.agent = make_agent(
            self.kind,
            cb.size(1),
            cb.size(2),
            cfg.rl,
            keyed_rng(cfg.seed, _STREAM_AGENT),
            checkpoint,
        )
        self.xapp = XApp(
            self.agent, self.bus, cfg, self.sim.sigma2, cb.size(1), cb.size(2)
        )
        self.server: Optional[TcpBusServer] = None

    def __enter__(self) -> Experiment:
        endpoint = self.cfg.bus.tcp_endpoint()
        if endpoint is not None:
            self.server = serve_tcp(self.bus, endpoint)
        return self

    def __exit__(self, *exc) -> None:
        if self.server is not None:
            self.server.stop()
            self.server = None

    @property
    def learner_agent(self) -> Optional[PolicyAgent]:
        return self.agent if isinstance(self.agent, PolicyAgent) else None

    def set_training(self, training: bool) -> None:
        if self.learner_agent is not None:
            self.learner_agent.training = training


def run_episode(exp: Experiment, episode: int, greedy: bool = False) -> EpisodeResult:
    """
    Runs one episode of `ttis_per_episode` decisions. Each TTI: cells
    publish CSI, the xApp decides and publishes control, the simulator
    realizes the next TTI and the decision is rewarded on that outcome.
    """
    sim, xapp = exp.sim, exp.xapp
    result = EpisodeResult(episode)
    sim.reset(episode)
    xapp.reset()
    steps = exp.cfg.ttis_per_episode
    for step in range(1, steps + 1):
        try:
            sim.publish_reports()
            decision = xapp.decide(sim.tti, greedy=greedy)
            realized = sim.advance()
        except (OSError, SubjectError, DecodeError) as exc:
            logger.error("Episode %d aborted at tti %d: %s", episode, sim.tti, exc)
            raise StateError(f"bus failure in episode {episode}: {exc}") from exc
        result.realized.append(realized)
        if decision is None:
            continue
        breakdown = xapp.score(decision, realized)
        exp.agent.record(breakdown.total, done=step == steps)
        result.rows.append(make_row(episode, exp.kind, decision, breakdown, realized))
    exp.agent.end_episode()
    result.channel_hashes = list(sim.channel_hashes)
    result.applied = list(sim.applied)
    return result


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path: str, rows: Sequence[MetricsRow]) -> None:
    write_csv(
        path,
        METRICS_HEADER,
        ([getattr(r, k) for k in METRICS_HEADER] for r in rows),
    )


def read_metrics(path: str) -> List[MetricsRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [MetricsRow.from_native_tree(r) for r in csv.DictReader(f)]


def empirical_cdf(values: Iterable[float]) -> List[tuple]:
    ordered = sorted(float(v) for v in values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]


def hash_sequence(hashes: Iterable[str]) -> str:
    digest = hashlib.sha256()
    for h in hashes:
        digest.update(h.encode("ascii"))
    return digest.hexdigest()


def summarize(
    rows: Sequence[MetricsRow], agent: str, episodes: int, channel_digest: str
) -> Dict[str, object]:
    """Means of the metrics columns; recomputable from metrics.csv."""

    def mean(key: str) -> float:
        return float(np.mean([getattr(r, key) for r in rows])) if rows else 0.0

    return {
        "agent": agent,
        "episodes": episodes,
        "decisions": len(rows),
        "mean_se": mean("mean_se"),
        "mean_thr": mean("mean_thr"),
        "mean_prb_util": mean("prb_util"),
        "mean_interference": mean("cell_interference"),
        "net_mean_se": mean("net_mean_se"),
        "net_mean_thr": mean("net_mean_thr"),
        "mean_reward": mean("reward"),
        "channel_digest": channel_digest,
    }


def _agent_checkpoint_path(out_dir: str, kind: str) -> str:
    return os.path.join(out_dir, f"checkpoint_{kind}.json")


def train(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    topology: Optional[Topology] = None,
) -> str:
    """
    Trains the configured RL agent for `episodes` episodes, writing
    reward_curve.csv and the final checkpoint; returns the checkpoint path.
    """
    if cfg.agent not in RL_AGENTS:
        raise ConfigError(f"agent {cfg.agent} is not trainable")
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    exp = Experiment(cfg, topology=topology)
    exp.set_training(True)
    learner = exp.learner_agent
    curve: List[float] = []
    with exp:
        for episode in range(cfg.episodes):
            try:
                result = run_episode(exp, episode)
            except TrainingDivergedError:
                dump = os.path.join(out_dir, "diverged_state.json")
                learner.checkpoint().save(dump)
                logger.error(
                    "Training diverged in episode %d, state dumped to %s",
                    episode,
                    dump,
                )
                raise
            curve.append(result.mean_reward)
            if (episode + 1) % cfg.log_every == 0:
                recent = curve[-cfg.log_every :]
                logger.info(
                    "Episode %d/%d: mean reward %.4f (last %d)",
                    episode + 1,
                    cfg.episodes,
                    float(np.mean(recent)),
                    len(recent),
                )

    smoothed = trailing_mean(curve, cfg.smoothing_window)
    write_csv(
        os.path.join(out_dir, "reward_curve.csv"),
        ["episode", "mean_reward", "smoothed_reward"],
        ((i, r, s) for i, (r, s) in enumerate(zip(curve, smoothed))),
    )
    path = _agent_checkpoint_path(out_dir, cfg.agent)
    learner.checkpoint().save(path)
    logger.info("Saved %s checkpoint to %s", cfg.agent, path)
    return path


@dataclass
class EvalResult:
    summary: Dict[str, object]
    rows: List[MetricsRow]
    channel_hashes: List[str]


def evaluate(
    cfg: ExperimentConfig,
    checkpoint_path: Optional[str] = None,
    out_dir: Optional[str] = None,
    require_checkpoint: bool = True,
    topology: Optional[Topology] = None,
) -> EvalResult:
    """
    Greedy evaluation over `eval_episodes` episodes; writes metrics.csv,
    cdf_se.csv, cdf_thr.csv, per_cell_se.csv and summary.json.
    """
    checkpoint = None
    if checkpoint_path:
        checkpoint = Checkpoint.load(checkpoint_path)
        if checkpoint.agent != cfg.agent:
            raise ConfigError(
                f"checkpoint was trained for {checkpoint.agent}, not {cfg.agent}"
            )
    elif require_checkpoint and cfg.agent in RL_AGENTS:
        raise ConfigError(f"evaluating {cfg.agent} requires a checkpoint")

    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    exp = Experiment(cfg, checkpoint=checkpoint, topology=topology)
    exp.set_training(False)
    rows: List[MetricsRow] = []
    hashes: List[str] = []
    se_samples: List[float] = []
    thr_samples: List[float] = []
    num_cells = exp.sim.num_cells
    cell_se = [[] for _ in range(num_cells)]
    cell_thr = [[] for _ in range(num_cells)]
    cell_interf = [[] for _ in range(num_cells)]
    with exp:
        for i in range(cfg.eval_episodes):
            result = run_episode(exp, EVAL_EPISODE_OFFSET + i, greedy=True)
            rows.extend(result.rows)
            hashes.extend(result.channel_hashes)
            for realized in result.realized:
                se_samples.extend(float(v) for v in realized.se)
                thr_samples.extend(float(v) for v in realized.thr_mbps)
                for pci, members in enumerate(realized.cell_members):
                    if members:
                        cell_se[pci].append(float(np.mean(realized.se[members])))
                        cell_thr[pci].append(
                            float(np.mean(realized.thr_mbps[members]))
                        )
                    cell_interf[pci].append(realized.i_cell[pci])

    write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    write_csv(os.path.join(out_dir, "cdf_se.csv"), ["se", "cdf"], empirical_cdf(se_samples))
    write_csv(
        os.path.join(out_dir, "cdf_thr.csv"),
        ["thr_mbps", "cdf"],
        empirical_cdf(thr_samples),
    )
    write_csv(
        os.path.join(out_dir, "per_cell_se.csv"),
        ["pci", "mean_se", "mean_thr", "mean_interference"],
        (
            (
                pci,
                float(np.mean(cell_se[pci])) if cell_se[pci] else 0.0,
                float(np.mean(cell_thr[pci])) if cell_thr[pci] else 0.0,
                float(np.mean(cell_interf[pci])) if cell_interf[pci] else 0.0,
            )
            for pci in range(num_cells)
        ),
    )
    summary = summarize(rows, cfg.agent, cfg.eval_episodes, hash_sequence(hashes))
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(
        "Evaluated %s: mean SE %.4f, mean thr %.4f Mbit/s, mean reward %.4f",
        cfg.agent,
        summary["mean_se"],
        summary["mean_thr"],
        summary["mean_reward"],
    )
    return EvalResult(summary, rows, hashes)


def check_same_scenario(cfgs: Mapping[str, ExperimentConfig]) -> None:
    first_kind, first = next(iter(cfgs.items()))
    for kind, cfg in cfgs.items():
        if cfg.scenario != first.scenario:
            raise ScenarioMismatchError(
                f"{kind} uses a different scenario than {first_kind}"
            )
        if (cfg.phy, cfg.ttis_per_episode, cfg.eval_episodes) != (
            first.phy,
            first.ttis_per_episode,
            first.eval_episodes,
        ):
            raise ScenarioMismatchError(
                f"{kind} uses different traffic or episode settings than "
                f"{first_kind}"
            )


def compare(cfgs: Mapping[str, ExperimentConfig], out_dir: str) -> List[Dict]:
    """
    Evaluates each agent on the same scenario, training RL agents that lack
    a checkpoint, and writes comparison.csv with one summary row per agent
    and the pairwise deltas.
    """
    missing = [k for k in COMPARED_AGENTS if k not in cfgs]
    if missing:
        raise ConfigError(f"compare needs configs for {missing}")
    check_same_scenario(cfgs)
    os.makedirs(out_dir, exist_ok=True)
    topology = Topology(cfgs[COMPARED_AGENTS[0]].scenario)

    summaries: Dict[str, Dict] = {}
    digests: Dict[str, str] = {}
    for kind in COMPARED_AGENTS:
        cfg = cfgs[kind]
        agent_dir = os.path.join(out_dir, kind)
        checkpoint = cfg.checkpoints.get(kind)
        if kind in RL_AGENTS and not checkpoint:
            logger.info("No %s checkpoint, training one", kind)
            checkpoint = train(cfg, agent_dir, topology=topology)
        result = evaluate(cfg, checkpoint, agent_dir, topology=topology)
        summaries[kind] = result.summary
        digests[kind] = str(result.summary["channel_digest"])

    if len(set(digests.values())) != 1:
        raise ScenarioMismatchError(f"channel realizations differ: {digests}")

    table = []
    for kind in COMPARED_AGENTS:
        row = {"row_type": "summary", "agent": kind}
        row.update({k: summaries[kind][k] for k in SUMMARY_KEYS})
        table.append(row)
    for a, b in COMPARED_DELTAS:
        row = {"row_type": "delta", "agent": f"{a}-{b}"}
        row.update(
            {k: float(summaries[a][k]) - float(summaries[b][k]) for k in SUMMARY_KEYS}
        )
        table.append(row)
    header = ["row_type", "agent", *SUMMARY_KEYS]
    write_csv(
        os.path.join(out_dir, "comparison.csv"),
        header,
        ([row[k] for k in header] for row in table),
    )
    return table


def dump_codebook(cfg: ExperimentConfig, path: str) -> int:
    """Writes every precoder as CSV; returns the number of entries."""
    cb = build_codebook(cfg.codebook)
    rows = []
    for rank in (1, 2):
        for j, matrix in enumerate(cb.stack(rank)):
            l, m, i13, n = cb.index_tuple(rank, j)
            entries = [[float(z.real), float(z.imag)] for z in matrix.ravel()]
            rows.append((rank, j, l, m, i13, n, json.dumps(entries)))
    write_csv(path, ["rank", "j", "i11", "i12", "i13", "i2", "entries"], rows)
    return len(rows)
