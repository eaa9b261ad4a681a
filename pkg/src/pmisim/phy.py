"""
Per-TTI link evaluation: SNR and spectral efficiency, post-selection SINR
with neighbor-cell interference, CQI mapping, PRB scheduling and
throughput.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, StateError
from .utils import exact_sum


class CqiEntry(NamedTuple):
    cqi: int
    modulation: str
    code_rate_x1024: int
    efficiency: float


# TS 38.214 Table 5.2.2.1-2 (4-bit CQI, up to 64QAM)
CQI_TABLE: List[CqiEntry] = [
    CqiEntry(1, "QPSK", 78, 0.1523),
    CqiEntry(2, "QPSK", 120, 0.2344),
    CqiEntry(3, "QPSK", 193, 0.3770),
    CqiEntry(4, "QPSK", 308, 0.6016),
    CqiEntry(5, "QPSK", 449, 0.8770),
    CqiEntry(6, "QPSK", 602, 1.1758),
    CqiEntry(7, "16QAM", 378, 1.4766),
    CqiEntry(8, "16QAM", 490, 1.9141),
    CqiEntry(9, "16QAM", 616, 2.4063),
    CqiEntry(10, "64QAM", 466, 2.7305),
    CqiEntry(11, "64QAM", 567, 3.3223),
    CqiEntry(12, "64QAM", 666, 3.9023),
    CqiEntry(13, "64QAM", 772, 4.5234),
    CqiEntry(14, "64QAM", 873, 5.1152),
    CqiEntry(15, "64QAM", 948, 5.5547),
]
CQI_EFFICIENCY = np.array([e.efficiency for e in CQI_TABLE])
_CQI_SE_WITH_ZERO = np.concatenate([[0.0], CQI_EFFICIENCY])
MAX_CQI = 15


@dataclass(frozen=True)
class LinkMetrics:
    snr: float
    sinr: float
    se: float
    cqi: int
    rank_used: int
    pmi_used: int


@dataclass(frozen=True)
class InterferenceRecord:
    iota: List[float]
    i_uk: float


@dataclass
class PrbAllocation:
    per_ue: Dict[int, int]
    num_prbs: int
    # owning UE of every PRB, -1 when unused
    prb_owner: np.ndarray
    truncated: bool = False

    @property
    def total_used(self) -> int:
        return sum(self.per_ue.values())

    @property
    def utilization(self) -> float:
        return self.total_used / self.num_prbs


def effective_gain(hw: np.ndarray, rank) -> np.ndarray:
    """
    Per-layer effective power gain of the precoded channel HW.

    `hw` has shape (..., Nr, 2) with the second column zero for rank-1
    precoders. Rank 1 gives ||HW||^2. Rank 2 gives the geometric mean of
    the zero-forcing per-layer gains, det(G) / sqrt(G11 G22) with
    G = (HW)^H (HW); it vanishes when HW is rank deficient.
    """
    c1 = hw[..., 0]
    c2 = hw[..., 1]
    g11 = np.sum(np.abs(c1) ** 2, axis=-1)
    g22 = np.sum(np.abs(c2) ** 2, axis=-1)
    g12 = np.sum(np.conj(c1) * c2, axis=-1)
    det = np.maximum(g11 * g22 - np.abs(g12) ** 2, 0.0)
    denom = np.sqrt(g11 * g22)
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = np.where(denom > 0.0, det / denom, 0.0)
    return np.where(np.asarray(rank) == 2, g2, g11)


def _pad_rank(w: np.ndarray) -> np.ndarray:
    if w.shape[-1] == 2:
        return w
    pad = np.zeros(w.shape[:-1] + (1,), dtype=w.dtype)
    return np.concatenate([w, pad], axis=-1)


def precoded_snr(h: np.ndarray, w: np.ndarray, sigma2: float) -> float:
    """SNR of channel H (Nr x Nt) precoded by W (Nt x r) over noise sigma2."""
    if sigma2 <= 0.0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    rank = w.shape[-1]
    if rank not in (1, 2):
        raise DomainError(f"precoder rank must be 1 or 2, got {rank}")
    hw = _pad_rank(h @ w)
    return float(effective_gain(hw, rank)) / sigma2


def spectral_efficiency(rank: int, snr: float) -> float:
    if snr < 0.0:
        raise DomainError(f"snr must be non-negative, got {snr}")
    return rank * math.log2(1.0 + snr)


def capacity_to_cqi(capacity):
    """Largest CQI whose efficiency does not exceed `capacity` (bit/s/Hz)."""
    return np.searchsorted(CQI_EFFICIENCY, capacity, side="right")


def sinr_to_cqi(sinr: float) -> int:
    if not sinr >= 0.0:
        raise DomainError(f"sinr must be non-negative, got {sinr}")
    return bisect.bisect_right(CQI_EFFICIENCY.tolist(), math.log2(1.0 + sinr))


def cqi_to_se(cqi: int) -> float:
    if not 0 <= cqi <= MAX_CQI:
        raise DomainError(f"cqi must lie in 0..15, got {cqi}")
    return float(_CQI_SE_WITH_ZERO[cqi])


def cqi_to_se_array(cqi) -> np.ndarray:
    return _CQI_SE_WITH_ZERO[np.asarray(cqi, dtype=int)]


def throughput(prbs: int, se: float, prb_bandwidth_hz: float = 180_000.0) -> float:
    """Mbit/s carried by `prbs` resource blocks at spectral efficiency `se`."""
    return prbs * prb_bandwidth_hz * se / 1e6


def schedule_prbs(
    ues: Sequence[int],
    num_prbs: int,
    tti: int,
    full_buffer: bool = True,
    demand_bits: float = 0.0,
    se: Optional[Dict[int, float]] = None,
    prb_bandwidth_hz: float = 180_000.0,
    tti_s: float = 1e-3,
    min_se: float = CQI_TABLE[0].efficiency,
) -> PrbAllocation:
    """
    Round-robin PRB allocation over the attached UEs in id order. The
    starting UE rotates with the TTI. Full buffer splits the pool as
    evenly as possible; fixed rate grants each UE the PRBs its demand
    needs at its last spectral efficiency, truncated when the pool runs
    out. PRBs are handed out contiguously in service order.
    """
    if demand_bits < 0.0:
        raise DomainError("demand must be non-negative")
    ordered = sorted(ues)
    n = len(ordered)
    owner = np.full(num_prbs, -1, dtype=int)
    if n == 0:
        return PrbAllocation({}, num_prbs, owner)
    start = tti % n
    service = ordered[start:] + ordered[:start]

    grants: Dict[int, int] = {}
    truncated = False
    if full_buffer:
        base, extra = divmod(num_prbs, n)
        for k, ue in enumerate(service):
            grants[ue] = base + (1 if k < extra else 0)
    else:
        remaining = num_prbs
        for ue in service:
            if demand_bits == 0.0:
                need = 0
            else:
                eff = max((se or {}).get(ue, min_se), min_se)
                need = math.ceil(demand_bits / (prb_bandwidth_hz * tti_s * eff))
            grant = min(need, remaining)
            truncated |= grant < need
            grants[ue] = grant
            remaining -= grant

    cursor = 0
    for ue in service:
        owner[cursor : cursor + grants[ue]] = ue
        cursor += grants[ue]
    return PrbAllocation(
        {ue: grants[ue] for ue in ordered}, num_prbs, owner, truncated
    )


def sinr_post_selection(
    h_links: np.ndarray,
    serving_w: np.ndarray,
    neighbor_ws: Sequence[Optional[np.ndarray]],
    p_prb: float,
    sigma2: float,
    occupancy: Optional[Sequence[float]] = None,
    pmi: int = -1,
) -> tuple[LinkMetrics, InterferenceRecord]:
    """
    Single-UE, single-subband evaluation after precoder commitment.

    `h_links` holds the serving link first followed by the tracked
    neighbors, shape (L, Nr, Nt). `neighbor_ws[i]` is the precoder cell
    i+1 committed on this subband (None when it is idle).
    """
    if serving_w is None:
        raise StateError("serving cell has no precoder commitment")
    if sigma2 <= 0.0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    occupancy = occupancy or [1.0] * len(neighbor_ws)
    rank = serving_w.shape[-1]
    signal = p_prb * float(
        effective_gain(_pad_rank(h_links[0] @ serving_w), rank)
    )
    iota = []
    for h, w, occ in zip(h_links[1:], neighbor_ws, occupancy):
        if w is None or occ <= 0.0:
            iota.append(0.0)
            continue
        power = float(np.sum(np.abs(h @ w) ** 2))
        iota.append(p_prb * occ * power / w.shape[-1])
    i_uk = exact_sum(iota)
    snr = signal / sigma2
    sinr = signal / (i_uk + sigma2)
    cqi = sinr_to_cqi(sinr)
    metrics = LinkMetrics(
        snr=snr,
        sinr=sinr,
        se=rank * cqi_to_se(cqi),
        cqi=cqi,
        rank_used=rank,
        pmi_used=pmi,
    )
    return metrics, InterferenceRecord(iota, i_uk)


@dataclass
class TtiRealization:
    """Network-wide outcome of one TTI after precoder commitment."""

    tti: int
    snr: np.ndarray  # (U, S)
    sinr: np.ndarray  # (U, S)
    subband_cqi: np.ndarray  # (U, S)
    wb_cqi: np.ndarray  # (U,)
    rank: np.ndarray  # (U,)
    se: np.ndarray  # (U,)
    thr_mbps: np.ndarray  # (U,)
    prbs: np.ndarray  # (U,)
    iota: np.ndarray  # (U, L-1)
    i_ue: List[float]
    i_cell: List[float]
    allocations: List[PrbAllocation]
    utilization: np.ndarray  # (C,)
    cell_members: List[List[int]] = field(default_factory=list)

    def interference_record(self, ue: int) -> InterferenceRecord:
        return InterferenceRecord([float(v) for v in self.iota[ue]], self.i_ue[ue])


def realize_tti(
    tti: int,
    h: np.ndarray,
    tracked: np.ndarray,
    ue_w: np.ndarray,
    ue_rank: np.ndarray,
    allocations: List[PrbAllocation],
    cell_members: List[List[int]],
    subband_of_prb: np.ndarray,
    p_prb: float,
    sigma2: float,
    prb_bandwidth_hz: float,
) -> TtiRealization:
    """
    Vectorized post-selection evaluation of every UE on every subband.

    h: (U, L, S, Nr, Nt) channels of the tracked links, serving first.
    ue_w: (U, S, Nt, 2) committed precoders (rank-1 padded with zeros).
    """
    num_ues, num_links, num_sub = h.shape[:3]
    num_cells = len(allocations)
    if num_ues and ue_w.shape[:2] != (num_ues, num_sub):
        raise StateError("precoder commitments do not cover every UE/subband")

    # per-cell, per-subband interfering precoder: the majority PRB owner
    sizes = np.bincount(subband_of_prb, minlength=num_sub)
    cell_w = np.zeros((num_cells,) + ue_w.shape[1:], dtype=complex)
    cell_rank = np.zeros((num_cells, num_sub), dtype=int)
    occupancy = np.zeros((num_cells, num_sub))
    ue_sub_prbs = np.zeros((num_ues, num_sub))
    for c, alloc in enumerate(allocations):
        for s in range(num_sub):
            owners = alloc.prb_owner[subband_of_prb == s]
            owners = owners[owners >= 0]
            if len(owners) == 0:
                continue
            ids, counts = np.unique(owners, return_counts=True)
            major = ids[np.argmax(counts)]
            cell_w[c, s] = ue_w[major, s]
            cell_rank[c, s] = ue_rank[major]
            occupancy[c, s] = len(owners) / sizes[s]
            ue_sub_prbs[ids, s] += counts

    hw_serv = np.einsum("usrt,ustk->usrk", h[:, 0], ue_w)
    gain = effective_gain(hw_serv, ue_rank[:, None])
    signal = p_prb * gain

    nb = tracked[:, 1:]
    if num_links > 1:
        hw_nb = np.einsum("ulsrt,ulstk->ulsrk", h[:, 1:], cell_w[nb])
        power = np.sum(np.abs(hw_nb) ** 2, axis=(-2, -1))
        rank_nb = cell_rank[nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            per_stream = np.where(rank_nb > 0, power / np.maximum(rank_nb, 1), 0.0)
        iota_sub = p_prb * occupancy[nb] * per_stream  # (U, L-1, S)
    else:
        iota_sub = np.zeros((num_ues, 0, num_sub))
    interference = iota_sub.sum(axis=1)

    snr = signal / sigma2
    sinr = signal / (interference + sigma2)
    capacity = np.log2(1.0 + sinr)
    subband_cqi = capacity_to_cqi(capacity)

    prbs = ue_sub_prbs.sum(axis=1)
    weights = np.where(
        prbs[:, None] > 0,
        ue_sub_prbs / np.maximum(prbs[:, None], 1),
        1.0 / num_sub,
    )
    wb_cqi = capacity_to_cqi(np.sum(weights * capacity, axis=1))
    se = ue_rank * cqi_to_se_array(wb_cqi)
    thr = prbs * prb_bandwidth_hz * se / 1e6

    iota = np.einsum("uls,us->ul", iota_sub, weights)
    i_ue = [exact_sum(row) for row in iota]
    i_cell = [exact_sum(i_ue[u] for u in members) for members in cell_members]
    utilization = np.array([a.utilization for a in allocations])
    return TtiRealization(
        tti=tti,
        snr=snr,
        sinr=sinr,
        subband_cqi=subband_cqi,
        wb_cqi=wb_cqi,
        rank=ue_rank.copy(),
        se=se,
        thr_mbps=thr,
        prbs=prbs.astype(int),
        iota=iota,
        i_ue=i_ue,
        i_cell=i_cell,
        allocations=allocations,
        utilization=utilization,
        cell_members=cell_members,
    )
