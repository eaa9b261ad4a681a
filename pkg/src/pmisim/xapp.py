"""
The decision layer hosted on the controller: target-cell selection,
state construction, action decoding, reward computation and the agents
that choose PMIs (Follow-PMI, A2C, Inter-A2C and a uniform random
baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bus import InProcessBus, Subscription, ctrl_subject
from .config import ExperimentConfig, RewardConfig, XAppConfig
from .errors import ActionError, StateError
from .log import get_logger
from .model import Assignment, ControlDirective, CsiReport
from .phy import MAX_CQI, TtiRealization, cqi_to_se
from .rl import (
    A2cConfig,
    A2cLearner,
    Checkpoint,
    PolicyValueNet,
    Trajectory,
    TrajectoryStep,
    UpdateStats,
    log_prob,
    sample_action,
)
from .utils import exact_sum

logger = get_logger(__name__)

STATE_DIM = 6


class GroupKind(IntEnum):
    EDGE = 0
    HIGH_INTERFERENCE = 1
    ALL = 2


@dataclass(frozen=True)
class PrioritizationGroup:
    kind: GroupKind
    members: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class MdpState:
    nu: float
    cqi_max: float
    interference: float
    psi: float
    avrg_thrp: float
    tot_ues: float
    # nu fell back to the whole cell because the group covered every UE
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.nu,
                self.cqi_max,
                self.interference,
                self.psi,
                self.avrg_thrp,
                self.tot_ues,
            ]
        )


@dataclass(frozen=True)
class AgentAction:
    group: GroupKind
    pmi_r1: int
    pmi_r2: int
    assignments: Tuple[Assignment, ...] = ()


@dataclass(frozen=True)
class RewardBreakdown:
    gamma_u: float
    gamma_target: float
    alpha: float
    interference_cost: float
    prb_util: float
    prb_target: float
    total: float
    degenerate: bool = False
    invalid: bool = False
    # nonzero only for a rejected action
    action_penalty: float = 0.0

    def recompute(self) -> float:
        return (
            reward_total(
                self.gamma_u,
                self.gamma_target,
                self.alpha,
                self.interference_cost,
                self.prb_util,
                self.prb_target,
            )
            + self.action_penalty
        )


def reward_total(gamma_u, gamma_target, alpha, cost, util, util_target) -> float:
    return (gamma_u - gamma_target) - alpha * cost - abs(util - util_target)


def ue_interference(report: CsiReport) -> float:
    return exact_sum(report.interf_mw)


def cell_interference(reports: Sequence[CsiReport]) -> Dict[int, float]:
    """I_k per cell: the exact sum of its UEs' i_{u,k}."""
    per_cell: Dict[int, List[float]] = {}
    for r in reports:
        per_cell.setdefault(int(r.pci), []).append(ue_interference(r))
    return {pci: exact_sum(v) for pci, v in sorted(per_cell.items())}


def select_target_cell(interference) -> int:
    """
    The cell with the largest total interference, lowest PCI on ties.
    Accepts a sequence indexed by PCI or a {pci: I_k} mapping.
    """
    items = (
        sorted(interference.items())
        if isinstance(interference, Mapping)
        else list(enumerate(interference))
    )
    if not items:
        raise StateError("no cells to choose from")
    best_pci, best = items[0]
    for pci, value in items[1:]:
        if value > best:
            best_pci, best = pci, value
    return int(best_pci)


def high_interference_count(num_ues: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * num_ues))


def identify_groups(
    reports: Sequence[CsiReport],
    edge_rsrp_dbm: float = -100.0,
    fraction: float = 0.2,
) -> Dict[GroupKind, PrioritizationGroup]:
    """Edge, high-interference and all-UE groups of one cell's reports."""
    ordered = sorted(reports, key=lambda r: r.ue)
    edge = tuple(int(r.ue) for r in ordered if r.rsrp_dbm < edge_rsrp_dbm)
    by_interference = sorted(ordered, key=lambda r: (-ue_interference(r), r.ue))
    top = high_interference_count(len(ordered), fraction) if ordered else 0
    high = tuple(int(r.ue) for r in by_interference[:top])
    everyone = tuple(int(r.ue) for r in ordered)
    return {
        GroupKind.EDGE: PrioritizationGroup(GroupKind.EDGE, edge),
        GroupKind.HIGH_INTERFERENCE: PrioritizationGroup(
            GroupKind.HIGH_INTERFERENCE, high
        ),
        GroupKind.ALL: PrioritizationGroup(GroupKind.ALL, everyone),
    }


def normalize_interference(value: float, i_ref: float, decades: float) -> float:
    """clamp(log10(I / I_ref) / decades, 0, 1); zero interference maps to 0."""
    if value <= 0.0:
        return 0.0
    return min(max(math.log10(value / i_ref) / decades, 0.0), 1.0)


def build_state(
    reports: Sequence[CsiReport],
    group: PrioritizationGroup,
    i_ref: float,
    num_prbs: int,
    cfg: XAppConfig,
) -> MdpState:
    if not reports:
        raise StateError("cannot build a state for a cell without UEs")
    members = set(group.members)
    rest = [r for r in reports if r.ue not in members]
    degenerate = not rest
    basis = rest or list(reports)
    n = len(reports)
    i_k = exact_sum(ue_interference(r) for r in reports)
    return MdpState(
        nu=float(np.mean([r.wb_cqi for r in basis])) / MAX_CQI,
        cqi_max=max(r.wb_cqi for r in reports) / MAX_CQI,
        interference=normalize_interference(
            i_k, i_ref, cfg.interference_decades
        ),
        psi=min(float(np.mean([r.prbs for r in reports])) / num_prbs, 1.0),
        avrg_thrp=min(
            float(np.mean([r.thr_mbps for r in reports])) / cfg.thr_cap_mbps,
            1.0,
        ),
        tot_ues=min(n / cfg.max_ues_per_cell, 1.0),
        degenerate=degenerate,
    )


def decode_action(
    indices: Sequence[int], size_r1: int, size_r2: int, plain: bool = False
) -> AgentAction:
    """
    Inter-A2C actions are (group, pmi_r1, pmi_r2); plain A2C actions are
    (pmi_r1, pmi_r2) with the group fixed to every UE.
    """
    indices = [int(i) for i in indices]
    if plain:
        if len(indices) != 2:
            raise ActionError(f"plain action needs 2 indices, got {indices}")
        group, j1, j2 = int(GroupKind.ALL), indices[0], indices[1]
    else:
        if len(indices) != 3:
            raise ActionError(f"action needs 3 indices, got {indices}")
        group, j1, j2 = indices
    if not 0 <= group < len(GroupKind):
        raise ActionError(f"group index {group} out of range")
    if not 0 <= j1 < size_r1:
        raise ActionError(f"rank-1 PMI {j1} out of range [0, {size_r1})")
    if not 0 <= j2 < size_r2:
        raise ActionError(f"rank-2 PMI {j2} out of range [0, {size_r2})")
    return AgentAction(GroupKind(group), j1, j2)


def resolve_assignments(
    action: AgentAction,
    group: PrioritizationGroup,
    reports: Mapping[int, CsiReport],
) -> List[Assignment]:
    """Wideband assignment per group member, at the member's reported rank."""
    out = []
    for ue in group.members:
        ri = int(reports[ue].ri)
        pmi = action.pmi_r1 if ri == 1 else action.pmi_r2
        out.append(Assignment(ue=ue, ri=ri, pmi=pmi, subbands="all"))
    return out


def compute_reward(
    wb_cqi: Sequence[int],
    i_ue: Sequence[float],
    prb_util: float,
    i_ref: float,
    reward_cfg: RewardConfig,
    xapp_cfg: XAppConfig,
    degenerate: bool = False,
) -> RewardBreakdown:
    """
    r = (gamma_u - gamma_target) - alpha * cost - |util - util_target| over
    the selected UEs' realized CQI and interference.
    """
    if len(wb_cqi) == 0:
        raise StateError("reward needs at least one UE")
    gamma_u = float(np.mean([cqi_to_se(int(c)) for c in wb_cqi]))
    cost = float(
        np.mean(
            [
                normalize_interference(v, i_ref, xapp_cfg.interference_decades)
                for v in i_ue
            ]
        )
    )
    total = reward_total(
        gamma_u,
        reward_cfg.target_se,
        reward_cfg.alpha,
        cost,
        prb_util,
        reward_cfg.prb_target,
    )
    return RewardBreakdown(
        gamma_u=gamma_u,
        gamma_target=reward_cfg.target_se,
        alpha=reward_cfg.alpha,
        interference_cost=cost,
        prb_util=float(prb_util),
        prb_target=reward_cfg.prb_target,
        total=total,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class PolicyOutput:
    indices: Tuple[int, ...]
    log_prob: float
    value: float


@dataclass
class StepContext:
    tti: int
    pci: int
    state: MdpState
    groups: Dict[GroupKind, PrioritizationGroup]
    cell_reports: Dict[int, CsiReport]
    reports: Dict[int, CsiReport]


@dataclass
class Decision:
    tti: int
    pci: int
    state: MdpState
    group: PrioritizationGroup
    # UEs whose realized metrics make up the reward
    selected: Tuple[int, ...]
    action: Optional[AgentAction] = None
    policy: Optional[PolicyOutput] = None
    directives: List[ControlDirective] = field(default_factory=list)
    invalid: bool = False
    degenerate: bool = False


class XAppAgent:
    kind = ""
    # plain agents never prioritize a group
    plain = False

    def reset(self) -> None:
        pass

    def act(self, ctx: StepContext, greedy: bool) -> Optional[PolicyOutput]:
        """
        Choose action indices for the target cell. Returning None means the
        agent controls cells directly through `control`.
        Implementations must override this method.
        """
        raise NotImplementedError("Subclasses must implement act")

    def control(self, ctx: StepContext) -> List[ControlDirective]:
        return []

    def record(self, reward: float, done: bool) -> None:
        pass

    def end_episode(self) -> None:
        pass


class FollowPmiAgent(XAppAgent):
    """
    Mirrors every UE's reported per-subband PMIs back as the commitment. A
    UE without a current report keeps its previous assignment.
    """

    kind = "follow_pmi"

    def __init__(self):
        self._held: Dict[int, List[Assignment]] = {}
        self._cells: Dict[int, List[int]] = {}

    def reset(self) -> None:
        self._held.clear()
        self._cells.clear()

    def act(self, ctx: StepContext, greedy: bool) -> Optional[PolicyOutput]:
        return None

    def control(self, ctx: StepContext) -> List[ControlDirective]:
        for report in ctx.reports.values():
            self._held[report.ue] = mirror_assignments(report)
            cell = self._cells.setdefault(report.pci, [])
            if report.ue not in cell:
                cell.append(report.ue)
        directives = []
        for pci in sorted(self._cells):
            assignments = []
            for ue in sorted(self._cells[pci]):
                assignments.extend(self._held[ue])
            directives.append(
                ControlDirective(
                    pci=pci, tti=ctx.tti, agent=self.kind, assignments=assignments
                )
            )
        return directives


def mirror_assignments(report: CsiReport) -> List[Assignment]:
    by_pmi: Dict[int, List[int]] = {}
    for s, j in enumerate(report.pmi):
        by_pmi.setdefault(j, []).append(s)
    return [
        Assignment(ue=report.ue, ri=report.ri, pmi=j, subbands=subbands)
        for j, subbands in sorted(by_pmi.items())
    ]


class RandomAgent(XAppAgent):
    """Uniform random Inter-A2C actions."""

    kind = "random"

    def __init__(self, head_sizes: Sequence[int], rng: np.random.Generator):
        self.head_sizes = tuple(head_sizes)
        self.rng = rng

    def act(self, ctx: StepContext, greedy: bool) -> Optional[PolicyOutput]:
        indices = tuple(int(self.rng.integers(n)) for n in self.head_sizes)
        return PolicyOutput(
            indices, -float(np.sum(np.log(self.head_sizes))), 0.0
        )


class PolicyAgent(XAppAgent):
    """
    Actor-critic agent. Learns on-line while `training` is set, updating
    every `n_steps` decisions and at episode end.
    """

    def __init__(
        self,
        head_sizes: Sequence[int],
        cfg: A2cConfig,
        rng: np.random.Generator,
        net: Optional[PolicyValueNet] = None,
    ):
        self.cfg = cfg
        self.rng = rng
        self.net = net or PolicyValueNet(STATE_DIM, cfg.hidden, head_sizes, rng)
        if tuple(self.net.head_sizes) != tuple(head_sizes):
            raise ActionError(
                f"network heads {self.net.head_sizes} != {tuple(head_sizes)}"
            )
        self.learner = A2cLearner(self.net, cfg)
        self.trajectory = Trajectory()
        self.training = True
        self.last_stats: Optional[UpdateStats] = None
        self._pending: Optional[Tuple[np.ndarray, PolicyOutput]] = None

    def reset(self) -> None:
        # an episode cut short still closes its trajectory
        self._pending = None
        if self.training:
            self._learn(0.0)

    def _learn(self, bootstrap_value: float) -> None:
        if not len(self.trajectory):
            return
        batch = self.learner.make_batch(self.trajectory, bootstrap_value)
        self.trajectory.clear()
        self.last_stats = self.learner.update(batch)

    def act(self, ctx: StepContext, greedy: bool) -> Optional[PolicyOutput]:
        state = ctx.state.as_array()
        fp = self.net.forward(state)
        if self.training and len(self.trajectory) >= self.cfg.n_steps:
            self._learn(float(fp.values[0]))
            fp = self.net.forward(state)
        indices = []
        total_log_prob = 0.0
        for logits in fp.logits:
            z = logits[0]
            a = int(np.argmax(z)) if greedy else sample_action(z, self.rng)
            indices.append(a)
            total_log_prob += log_prob(z, a)
        out = PolicyOutput(tuple(indices), total_log_prob, float(fp.values[0]))
        self._pending = (state, out)
        return out

    def record(self, reward: float, done: bool) -> None:
        if not self.training or self._pending is None:
            return
        state, out = self._pending
        self._pending = None
        self.trajectory.append(
            TrajectoryStep(state, out.indices, out.log_prob, reward, out.value, done)
        )
        if done:
            self._learn(0.0)

    def end_episode(self) -> None:
        # the last logged decision may not be the last TTI of the episode
        self._pending = None
        if self.training:
            self.trajectory.close()
            self._learn(0.0)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_net(self.net, self.kind)


class A2cAgent(PolicyAgent):
    kind = "a2c"
    plain = True


class InterA2cAgent(PolicyAgent):
    kind = "inter_a2c"


def head_sizes(kind: str, size_r1: int, size_r2: int) -> Tuple[int, ...]:
    if kind == "a2c":
        return (size_r1, size_r2)
    return (len(GroupKind), size_r1, size_r2)


def make_agent(
    kind: str,
    size_r1: int,
    size_r2: int,
    cfg: A2cConfig,
    rng: np.random.Generator,
    checkpoint: Optional[Checkpoint] = None,
) -> XAppAgent:
    if kind == "follow_pmi":
        return FollowPmiAgent()
    heads = head_sizes(kind, size_r1, size_r2)
    if kind == "random":
        return RandomAgent(heads, rng)
    net = None
    if checkpoint is not None:
        checkpoint.check_architecture(STATE_DIM, cfg.hidden, heads)
        net = checkpoint.to_net()
    if kind == "a2c":
        return A2cAgent(heads, cfg, rng, net)
    if kind == "inter_a2c":
        return InterA2cAgent(heads, cfg, rng, net)
    raise ActionError(f"unknown agent kind {kind}")


class XApp:
    """
    Hosts one agent on the bus: collects CSI indications, picks the most
    interfered cell, builds its state, asks the agent for an action and
    publishes the resulting control directives.
    """

    def __init__(
        self,
        agent: XAppAgent,
        bus: InProcessBus,
        cfg: ExperimentConfig,
        i_ref: float,
        size_r1: int,
        size_r2: int,
    ):
        self.agent = agent
        self.bus = bus
        self.cfg = cfg
        self.i_ref = i_ref
        self.size_r1 = size_r1
        self.size_r2 = size_r2
        self.csi: Subscription = bus.subscribe("csi.>")
        self.latest: Dict[int, CsiReport] = {}
        self.previous_group = GroupKind.ALL

    def reset(self) -> None:
        self.csi.drain()
        self.latest.clear()
        self.previous_group = GroupKind.ALL
        self.agent.reset()

    def collect(self, tti: int) -> Dict[int, CsiReport]:
        """Drains the CSI queue; returns the reports issued at `tti`."""
        for message in self.csi.drain():
            self.latest[message.payload.ue] = message.payload
        return {ue: r for ue, r in self.latest.items() if r.tti == tti}

    def decide(self, tti: int, greedy: bool = False) -> Optional[Decision]:
        reports = self.collect(tti)
        if not reports:
            logger.warning("No current CSI at tti %d, skipping", tti)
            return None
        i_k = cell_interference(list(reports.values()))
        pci = select_target_cell(i_k)
        cell_reports = {
            ue: r for ue, r in sorted(reports.items()) if r.pci == pci
        }
        groups = identify_groups(
            list(cell_reports.values()),
            self.cfg.scenario.edge_rsrp_dbm,
            self.cfg.xapp.high_interference_fraction,
        )
        state = build_state(
            list(cell_reports.values()),
            groups[self.previous_group],
            self.i_ref,
            self.cfg.scenario.num_prbs,
            self.cfg.xapp,
        )
        ctx = StepContext(tti, pci, state, groups, cell_reports, reports)
        everyone = groups[GroupKind.ALL]
        out = self.agent.act(ctx, greedy)

        if out is None:
            decision = Decision(
                tti, pci, state, everyone, everyone.members,
                directives=self.agent.control(ctx),
            )
        else:
            decision = self._decode(ctx, out)
        for directive in decision.directives:
            self.bus.publish(ctrl_subject(directive.pci), directive)
        logger.debug(
            "tti %d: cell %d, group %s, action %s",
            tti, pci, decision.group.kind.name,
            decision.policy.indices if decision.policy else None,
        )
        return decision

    def _decode(self, ctx: StepContext, out: PolicyOutput) -> Decision:
        everyone = ctx.groups[GroupKind.ALL]
        try:
            action = decode_action(
                out.indices, self.size_r1, self.size_r2, plain=self.agent.plain
            )
        except ActionError as exc:
            logger.warning("Rejected action %s: %s", out.indices, exc)
            return Decision(
                ctx.tti, ctx.pci, ctx.state, everyone, everyone.members,
                policy=out, invalid=True,
            )
        self.previous_group = action.group
        group = ctx.groups[action.group]
        if not group.members:
            noop = ControlDirective(pci=ctx.pci, tti=ctx.tti, agent=self.agent.kind)
            return Decision(
                ctx.tti, ctx.pci, ctx.state, group, everyone.members,
                action=action, policy=out, directives=[noop], degenerate=True,
            )
        assignments = resolve_assignments(action, group, ctx.cell_reports)
        action = AgentAction(
            action.group, action.pmi_r1, action.pmi_r2, tuple(assignments)
        )
        directive = ControlDirective(
            pci=ctx.pci, tti=ctx.tti, agent=self.agent.kind, assignments=assignments
        )
        return Decision(
            ctx.tti, ctx.pci, ctx.state, group, group.members,
            action=action, policy=out, directives=[directive],
        )

    def score(self, decision: Decision, realized: TtiRealization) -> RewardBreakdown:
        """Reward of `decision` from the metrics realized after it took effect."""
        ues = list(decision.selected)
        breakdown = compute_reward(
            [int(realized.wb_cqi[u]) for u in ues],
            [realized.i_ue[u] for u in ues],
            float(realized.utilization[decision.pci]),
            self.i_ref,
            self.cfg.reward,
            self.cfg.xapp,
            degenerate=decision.degenerate,
        )
        if not decision.invalid:
            return breakdown
        # a rejected action sends no directive; its no-op outcome is penalized
        penalty = self.cfg.reward.invalid_action_penalty
        return replace(
            breakdown,
            invalid=True,
            action_penalty=penalty,
            total=breakdown.total + penalty,
        )
