"""UE-side CSI: frequency-selective PMI/RI selection and report assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .codebook import Codebook
from .errors import DomainError, StateError
from .model import CsiReport
from .phy import effective_gain


@dataclass(frozen=True)
class PmiSelection:
    ri: int
    pmi: List[int]
    se: List[float]


def candidate_se(h: np.ndarray, codebook: Codebook, sigma2: float):
    """
    Noise-limited spectral efficiency of every codebook entry on every
    subband.

    `h` has shape (..., S, Nr, Nt). Returns (se1, se2) with shapes
    (..., S, J1) and (..., S, J2); an empty rank set yields a zero-width
    array.
    """
    if sigma2 <= 0.0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    h = np.asarray(h)[..., None, :, :]
    out = []
    for rank in (1, 2):
        stack = codebook.stack(rank)
        if len(stack) == 0:
            out.append(np.zeros(h.shape[:-3] + (0,)))
            continue
        hw = h @ stack
        if rank == 1:
            hw = np.concatenate([hw, np.zeros_like(hw)], axis=-1)
        snr = effective_gain(hw, rank) / sigma2
        out.append(rank * np.log2(1.0 + snr))
    return out[0], out[1]


def select_pmi_batch(h: np.ndarray, codebook: Codebook, sigma2: float):
    """
    Vectorized PMI/RI selection for a batch of UEs, h: (U, S, Nr, Nt).
    Returns (ri (U,), pmi (U, S), se (U, S)).
    """
    se1, se2 = candidate_se(h, codebook, sigma2)
    num_sub = se1.shape[-2]
    lead = se1.shape[:-2]
    best = []
    for se in (se1, se2):
        if se.shape[-1] == 0:
            best.append(
                (
                    np.full(lead, -np.inf),
                    np.zeros(lead + (num_sub,), dtype=int),
                    np.zeros(lead + (num_sub,)),
                )
            )
            continue
        idx = np.argmax(se, axis=-1)
        val = np.take_along_axis(se, idx[..., None], axis=-1)[..., 0]
        best.append((val.sum(axis=-1), idx, val))
    # rank 2 only when it strictly wins the wideband sum
    use2 = best[1][0] > best[0][0]
    ri = np.where(use2, 2, 1)
    pmi = np.where(use2[..., None], best[1][1], best[0][1])
    se = np.where(use2[..., None], best[1][2], best[0][2])
    return ri, pmi, se


def ue_select_pmi(
    h_subbands: np.ndarray, codebook: Codebook, sigma2: float
) -> PmiSelection:
    """
    Per subband, evaluates every (rank, PMI) candidate; the wideband rank
    is the one with the larger sum of best-per-subband SE, and the PMI of
    each subband is the argmax within that rank (ties to the lowest j).
    """
    ri, pmi, se = select_pmi_batch(h_subbands[None], codebook, sigma2)
    return PmiSelection(
        int(ri[0]), [int(j) for j in pmi[0]], [float(v) for v in se[0]]
    )


def build_report(
    ue: int,
    pci: int,
    tti: int,
    selection: PmiSelection,
    num_subbands: int,
    subband_cqi: Sequence[int],
    wb_cqi: int,
    rsrp_dbm: float,
    thr_mbps: float,
    interf_mw: Sequence[float],
    prbs: int = 0,
    codebook: Codebook | None = None,
) -> CsiReport:
    """
    Assembles the CSI indication of one UE. PMIs come from this TTI's
    selection; CQI, throughput, PRBs and interference are the values
    realized in the previous TTI.
    """
    if len(selection.pmi) != num_subbands:
        raise StateError(
            f"ue {ue}: PMI selection covers {len(selection.pmi)} of "
            f"{num_subbands} subbands"
        )
    if len(subband_cqi) != num_subbands:
        raise StateError(f"ue {ue}: CQI missing for some subbands")
    if codebook is not None:
        for j in selection.pmi:
            if not codebook.is_valid(selection.ri, j):
                raise StateError(
                    f"ue {ue}: PMI {j} invalid for rank {selection.ri}"
                )
    return CsiReport(
        ue=ue,
        pci=pci,
        tti=tti,
        ri=selection.ri,
        pmi=list(selection.pmi),
        cqi=[int(c) for c in subband_cqi],
        wb_cqi=int(wb_cqi),
        rsrp_dbm=float(rsrp_dbm),
        thr_mbps=float(thr_mbps),
        interf_mw=[float(v) for v in interf_mw],
        prbs=int(prbs),
    )
