"""
The simulated RAN: cells, UEs, fading channels and the per-TTI loop of
PMI selection, precoder commitment, scheduling and link evaluation,
attached to the control bus.

Timing: the report of TTI t carries the PMIs the UEs select on H(t) and
the metrics realized at t-1. Precoders transmitted at TTI t+1 follow the
latest reports (one TTI of CSI delay) unless a directive published at t
overrides them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .bus import InProcessBus, Subscription, csi_subject
from .channel import ChannelModel, NoiseModel, noise_power
from .codebook import Codebook, build_codebook
from .config import ExperimentConfig
from .csi import PmiSelection, build_report, select_pmi_batch
from .errors import StateError
from .log import get_logger
from .model import ControlDirective, CsiReport
from .phy import TtiRealization, realize_tti, schedule_prbs
from .topology import Topology
from .utils import dbm_to_mw

logger = get_logger(__name__)


@dataclass(frozen=True)
class AppliedDirective:
    pci: int
    issued_tti: int
    effective_tti: int
    agent: str
    num_ues: int


@dataclass(frozen=True)
class Override:
    ri: int
    pmi: Tuple[int, ...]  # one entry per subband


class RanSimulator:
    """
    Owns the large-scale topology for its lifetime; fading is re-seeded
    per episode. Not thread-safe: the TTI loop is driven by one caller.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        topology: Optional[Topology] = None,
        codebook: Optional[Codebook] = None,
    ):
        sc = cfg.scenario
        self.cfg = cfg
        self.topology = topology or Topology(sc)
        self.codebook = codebook or build_codebook(cfg.codebook)
        self.num_subbands = sc.num_subbands
        self.channel = ChannelModel(
            self.topology, cfg.codebook.ports, sc.num_subbands, cfg.phy.rho
        )
        self.noise = NoiseModel(
            sc.noise_figure, cfg.phy.thermal_density, sc.prb_bandwidth_hz
        )
        self.sigma2 = noise_power(self.noise, 1)
        self.p_prb = dbm_to_mw(sc.bs_power) / sc.num_prbs
        self.subband_of_prb = np.array(sc.subband_of_prb(), dtype=int)
        self.members = self.topology.cell_members
        self._serving = self.topology.serving
        self._rsrp = self.topology.rsrp[
            np.arange(self.topology.num_ues), self._serving
        ]

        # rank-1 and rank-2 precoders padded to two columns, rank 2 after rank 1
        rank1 = self.codebook.stack(1)
        pad = np.zeros(rank1.shape[:-1] + (1,), dtype=complex)
        self._w_table = np.concatenate(
            [np.concatenate([rank1, pad], axis=-1), self.codebook.stack(2)]
        )
        self._rank2_offset = len(rank1)

        self._ctrl: Optional[Subscription] = None
        self.bus: Optional[InProcessBus] = None
        self.episode = 0
        self.tti = 0
        self.overrides: Dict[int, Dict[int, Override]] = {}
        self.reported_ri = np.ones(self.topology.num_ues, dtype=int)
        self.reported_pmi = np.zeros(
            (self.topology.num_ues, sc.num_subbands), dtype=int
        )
        self.reported_se = np.zeros((self.topology.num_ues, sc.num_subbands))
        self.committed_rank = self.reported_ri.copy()
        self.committed_pmi = self.reported_pmi.copy()
        self.previous: Optional[TtiRealization] = None
        self.latest: Optional[TtiRealization] = None
        self.channel_hashes: List[str] = []
        self.applied: List[AppliedDirective] = []
        self.rejected = 0
        self.stale = 0

    @property
    def num_cells(self) -> int:
        return self.topology.num_cells

    @property
    def num_ues(self) -> int:
        return self.topology.num_ues

    def attach(self, bus: InProcessBus) -> None:
        self.bus = bus
        self._ctrl = bus.subscribe("ctrl.cell.*")

    def _select(self) -> None:
        h = self.channel.matrices()[:, 0] * np.sqrt(self.p_prb)
        ri, pmi, se = select_pmi_batch(h, self.codebook, self.sigma2)
        self.reported_ri = ri.astype(int)
        self.reported_pmi = pmi.astype(int)
        self.reported_se = se

    def _commitments(self) -> Tuple[np.ndarray, np.ndarray]:
        rank = self.reported_ri.copy()
        pmi = self.reported_pmi.copy()
        for cell_overrides in self.overrides.values():
            for ue, ov in cell_overrides.items():
                rank[ue] = ov.ri
                pmi[ue] = ov.pmi
        return rank, pmi

    def _realize(self, rank: np.ndarray, pmi: np.ndarray) -> TtiRealization:
        sc = self.cfg.scenario
        phy = self.cfg.phy
        index = pmi + np.where(rank == 2, self._rank2_offset, 0)[:, None]
        ue_w = self._w_table[index]
        last_se = None
        if self.latest is not None:
            last_se = {u: float(v) for u, v in enumerate(self.latest.se)}
        demand_bits = phy.demand_mbps * 1e6 * phy.tti_ms * 1e-3
        allocations = [
            schedule_prbs(
                members,
                sc.num_prbs,
                self.tti,
                full_buffer=phy.traffic == "full_buffer",
                demand_bits=demand_bits,
                se=last_se,
                prb_bandwidth_hz=sc.prb_bandwidth_hz,
                tti_s=phy.tti_ms * 1e-3,
            )
            for members in self.members
        ]
        realization = realize_tti(
            self.tti,
            self.channel.matrices(),
            self.topology.tracked_cells,
            ue_w,
            rank,
            allocations,
            self.members,
            self.subband_of_prb,
            self.p_prb,
            self.sigma2,
            sc.prb_bandwidth_hz,
        )
        self.channel_hashes.append(self.channel.draw_hash())
        self.committed_rank, self.committed_pmi = rank, pmi
        self.previous, self.latest = self.latest, realization
        return realization

    def reset(self, episode: int) -> TtiRealization:
        """
        Starts an episode: clears overrides and realizes TTIs 0 and 1
        under plain UE feedback, leaving the clock at TTI 1.
        """
        self.episode = episode
        self.tti = 0
        self.overrides = {}
        self.previous = self.latest = None
        self.channel_hashes = []
        self.applied = []
        if self._ctrl is not None:
            self._ctrl.drain()
        self.channel.reset(episode)
        self._select()
        self._realize(self.reported_ri, self.reported_pmi)
        return self._step()

    def _step(self) -> TtiRealization:
        rank, pmi = self._commitments()
        self.tti += 1
        self.channel.advance()
        realization = self._realize(rank, pmi)
        self._select()
        return realization

    def advance(self) -> TtiRealization:
        """
        Applies the directives issued at the current TTI, moves to the
        next TTI and realizes it.
        """
        if self.latest is None:
            raise StateError("simulator used before reset")
        if self._ctrl is not None:
            for message in self._ctrl.drain():
                self.submit(message.payload)
        return self._step()

    def submit(self, directive: ControlDirective) -> bool:
        """Validates and applies one directive; returns whether it was applied."""
        if directive.tti < self.tti:
            logger.warning(
                "Discarding stale directive for cell %d (tti %d < %d)",
                directive.pci,
                directive.tti,
                self.tti,
            )
            self.stale += 1
            return False
        try:
            overrides = self._validate(directive)
        except StateError as exc:
            logger.warning("Rejecting directive from %s: %s", directive.agent, exc)
            self.rejected += 1
            return False
        if directive.is_noop:
            return True
        self.overrides[directive.pci] = overrides
        self.applied.append(
            AppliedDirective(
                directive.pci,
                directive.tti,
                self.tti + 1,
                directive.agent,
                len(overrides),
            )
        )
        return True

    def _validate(self, directive: ControlDirective) -> Dict[int, Override]:
        if directive.tti > self.tti:
            raise StateError(f"directive tti {directive.tti} is in the future")
        if not 0 <= directive.pci < self.num_cells:
            raise StateError(f"unknown cell {directive.pci}")
        attached = set(self.members[directive.pci])
        per_ue: Dict[int, Tuple[int, List[Optional[int]]]] = {}
        for a in directive.assignments:
            if a.ue not in attached:
                raise StateError(f"ue {a.ue} is not attached to {directive.pci}")
            if not self.codebook.is_valid(a.ri, a.pmi):
                raise StateError(f"PMI {a.pmi} invalid for rank {a.ri}")
            subbands = (
                range(self.num_subbands) if a.subbands == "all" else a.subbands
            )
            ri, slots = per_ue.setdefault(
                a.ue, (a.ri, [None] * self.num_subbands)
            )
            if ri != a.ri:
                raise StateError(f"ue {a.ue} assigned two ranks")
            for s in subbands:
                if not 0 <= s < self.num_subbands:
                    raise StateError(f"subband {s} out of range")
                slots[s] = a.pmi

        overrides = {}
        for ue, (ri, slots) in per_ue.items():
            if any(j is None for j in slots):
                if ri != self.reported_ri[ue]:
                    raise StateError(
                        f"partial rank-{ri} override for rank-"
                        f"{self.reported_ri[ue]} ue {ue}"
                    )
                slots = [
                    int(self.reported_pmi[ue, s]) if j is None else j
                    for s, j in enumerate(slots)
                ]
            overrides[ue] = Override(ri, tuple(slots))
        return overrides

    def reports(self) -> List[CsiReport]:
        """CSI of every UE for the current TTI."""
        if self.previous is None:
            raise StateError("simulator used before reset")
        m = self.previous
        out = []
        for ue in range(self.num_ues):
            selection = PmiSelection(
                int(self.reported_ri[ue]),
                [int(j) for j in self.reported_pmi[ue]],
                [float(v) for v in self.reported_se[ue]],
            )
            out.append(
                build_report(
                    ue=ue,
                    pci=int(self._serving[ue]),
                    tti=self.tti,
                    selection=selection,
                    num_subbands=self.num_subbands,
                    subband_cqi=m.subband_cqi[ue],
                    wb_cqi=int(m.wb_cqi[ue]),
                    rsrp_dbm=float(self._rsrp[ue]),
                    thr_mbps=float(m.thr_mbps[ue]),
                    interf_mw=m.iota[ue],
                    prbs=int(m.prbs[ue]),
                )
            )
        return out

    def publish_reports(self) -> int:
        if self.bus is None:
            raise StateError("simulator is not attached to a bus")
        reports = self.reports()
        for report in reports:
            self.bus.publish(csi_subject(report.pci, report.ue), report)
        return len(reports)
