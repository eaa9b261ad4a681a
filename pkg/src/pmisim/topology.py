"""
Hexagonal multi-site layout, UE drop and large-scale link budget.

The propagation model is a reduced 3GPP TR 38.901 Urban Macro: distance
dependent LOS probability, LOS/NLOS pathloss, log-normal shadowing and the
parabolic sector pattern. UEs are stationary, so LOS state and shadowing
are drawn once per (UE, site) and shared by the sectors of a site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np

from .config import Scenario
from .errors import ConfigError, DomainError
from .log import get_logger
from .utils import db_to_linear, keyed_rng

logger = get_logger(__name__)

SUPPORTED_SITE_COUNTS = {1: 0, 7: 1, 19: 2}
SPEED_OF_LIGHT = 299_792_458.0
SHADOWING_STD_LOS = 4.0
SHADOWING_STD_NLOS = 6.0

_STREAM_DROP = 1
_STREAM_LINK = 2


@dataclass(frozen=True)
class CellGeometry:
    pci: int
    site: int
    site_position: Tuple[float, float]
    # None for an omnidirectional (single sector) site
    boresight_azimuth: Optional[float]


@dataclass(frozen=True)
class LinkBudget:
    pathloss: float
    shadowing: float
    antenna_gain: float
    rsrp: float
    is_serving: bool
    los: bool


def hex_site_positions(num_sites: int, isd: float) -> np.ndarray:
    """
    Site coordinates of a hexagonal grid with the given number of rings,
    ordered ring by ring and counter-clockwise from the +x axis.
    """
    if num_sites not in SUPPORTED_SITE_COUNTS:
        raise ConfigError(
            f"num_sites must be one of {sorted(SUPPORTED_SITE_COUNTS)}, "
            f"got {num_sites}"
        )
    rings = SUPPORTED_SITE_COUNTS[num_sites]
    sites = []
    for q in range(-rings, rings + 1):
        for r in range(-rings, rings + 1):
            ring = max(abs(q), abs(r), abs(q + r))
            if ring > rings:
                continue
            x = isd * (q + r / 2.0)
            y = isd * (math.sqrt(3.0) / 2.0) * r
            angle = round(math.degrees(math.atan2(y, x)) % 360.0, 9)
            sites.append((ring, angle, x, y))
    sites.sort()
    return np.array([(x, y) for _, _, x, y in sites], dtype=float)


def sector_boresights(sectors_per_site: int) -> List[Optional[float]]:
    if sectors_per_site == 1:
        return [None]
    step = 360.0 / sectors_per_site
    return [(30.0 + i * step) % 360.0 for i in range(sectors_per_site)]


def _wrap_degrees(angle):
    return (np.asarray(angle) + 180.0) % 360.0 - 180.0


def _inside_site_hexagon(dx, dy, isd: float):
    inside = np.ones(np.shape(dx), dtype=bool)
    for k in range(6):
        theta = math.radians(60.0 * k)
        inside &= dx * math.cos(theta) + dy * math.sin(theta) <= isd / 2.0
    return inside


def build_layout(
    scenario: Scenario,
) -> Tuple[List[CellGeometry], np.ndarray, np.ndarray]:
    """
    Places sites on the hex grid and drops `ues_per_cell` UEs uniformly in
    every cell's dominance area (the sector wedge of the site hexagon).

    Returns the cells, the UE positions (U, 2) and the cell each UE was
    dropped in. Deterministic given the scenario seed.
    """
    sites = hex_site_positions(scenario.num_sites, scenario.isd)
    boresights = sector_boresights(scenario.sectors_per_site)
    half_width = 180.0 / scenario.sectors_per_site
    radius = scenario.isd / math.sqrt(3.0)

    cells: List[CellGeometry] = []
    positions = []
    drop_cell = []
    for site, (sx, sy) in enumerate(sites):
        for sector, boresight in enumerate(boresights):
            pci = site * scenario.sectors_per_site + sector
            cells.append(CellGeometry(pci, site, (sx, sy), boresight))
            rng = keyed_rng(scenario.seed, _STREAM_DROP, pci)
            placed = 0
            while placed < scenario.ues_per_cell:
                dx, dy = rng.uniform(-radius, radius, size=2)
                if math.hypot(dx, dy) < scenario.min_ue_distance:
                    continue
                if not _inside_site_hexagon(dx, dy, scenario.isd):
                    continue
                if boresight is not None:
                    bearing = math.degrees(math.atan2(dy, dx))
                    if abs(_wrap_degrees(bearing - boresight)) > half_width:
                        continue
                positions.append((sx + dx, sy + dy))
                drop_cell.append(pci)
                placed += 1
    ue_positions = np.array(positions, dtype=float).reshape(-1, 2)
    return cells, ue_positions, np.array(drop_cell, dtype=int)


def los_probability_uma(d2d, ue_height: float = 1.5):
    """LOS probability of the UMa scenario (outdoor UE)."""
    d = np.maximum(np.asarray(d2d, dtype=float), 1e-9)
    if ue_height <= 13.0:
        c_prime = 0.0
    else:
        c_prime = ((ue_height - 13.0) / 10.0) ** 1.5
    p = (18.0 / d + np.exp(-d / 63.0) * (1.0 - 18.0 / d)) * (
        1.0 + c_prime * 1.25 * (d / 100.0) ** 3 * np.exp(-d / 150.0)
    )
    return np.where(d <= 18.0, 1.0, p)


def pathloss_uma_array(d2d, bs_height, ue_height, freq_ghz, los):
    """Vectorized UMa pathloss in dB; no range checking."""
    d2d = np.asarray(d2d, dtype=float)
    d3d = np.sqrt(d2d**2 + (bs_height - ue_height) ** 2)
    log_f = 20.0 * math.log10(freq_ghz)
    d_bp = (
        4.0 * (bs_height - 1.0) * (ue_height - 1.0) * freq_ghz * 1e9
        / SPEED_OF_LIGHT
    )
    pl1 = 28.0 + 22.0 * np.log10(d3d) + log_f
    pl2 = (
        28.0
        + 40.0 * np.log10(d3d)
        + log_f
        - 9.0 * math.log10(d_bp**2 + (bs_height - ue_height) ** 2)
    )
    pl_los = np.where(d2d <= d_bp, pl1, pl2)
    pl_nlos = (
        13.54
        + 39.08 * np.log10(d3d)
        + log_f
        - 0.6 * (ue_height - 1.5)
    )
    return np.where(los, pl_los, np.maximum(pl_los, pl_nlos))


def pathloss_uma(
    d2d: float,
    bs_height: float = 25.0,
    ue_height: float = 1.5,
    freq_ghz: float = 3.7,
    los: bool = True,
) -> float:
    """
    UMa pathloss in dB between a site and a UE at 2D distance `d2d` m.
    The NLOS value is never below the LOS value at the same geometry.
    """
    if not 10.0 <= d2d <= 5000.0:
        raise DomainError(f"d2d must lie in [10, 5000] m, got {d2d}")
    return float(pathloss_uma_array(d2d, bs_height, ue_height, freq_ghz, los))


def sector_gain(
    bearing_deg,
    boresight_deg: Optional[float],
    max_gain: float = 0.0,
    hpbw: float = 65.0,
    max_attenuation: float = 30.0,
):
    """3GPP parabolic horizontal sector pattern in dB."""
    if boresight_deg is None:
        return np.full(np.shape(bearing_deg), max_gain, dtype=float)
    phi = _wrap_degrees(np.asarray(bearing_deg, dtype=float) - boresight_deg)
    return max_gain - np.minimum(12.0 * (phi / hpbw) ** 2, max_attenuation)


def rsrp(
    bs_power: float, pathloss: float, shadowing: float, antenna_gain: float
) -> float:
    return bs_power - pathloss - shadowing + antenna_gain


class Topology:
    """
    Immutable large-scale view of the network: cells, UEs and every
    (UE, cell) link budget, with serving cells and ranked neighbor lists.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.cells, self.ue_positions, self.drop_cell = build_layout(scenario)
        self._compute_links()
        logger.info(
            "Built layout: %d cells, %d UEs, %d edge UEs",
            self.num_cells,
            self.num_ues,
            int(self.edge_mask.sum()),
        )

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_ues(self) -> int:
        return len(self.ue_positions)

    def _compute_links(self) -> None:
        sc = self.scenario
        site_xy = np.array([c.site_position for c in self.cells])
        site_of_cell = np.array([c.site for c in self.cells])
        delta = site_xy[None, :, :] - self.ue_positions[:, None, :]
        d2d = np.maximum(np.hypot(delta[..., 0], delta[..., 1]), 10.0)
        # bearing of the UE as seen from the site
        bearing = np.degrees(np.arctan2(-delta[..., 1], -delta[..., 0]))

        rng = keyed_rng(sc.seed, _STREAM_LINK)
        site_draws = (self.num_ues, sc.num_sites)
        los_uniform = rng.uniform(size=site_draws)
        shadow_normal = rng.standard_normal(size=site_draws)

        p_los = los_probability_uma(d2d, sc.ue_height)
        self.los = los_uniform[:, site_of_cell] < p_los
        self.pathloss = pathloss_uma_array(
            d2d, sc.bs_height, sc.ue_height, sc.carrier_freq, self.los
        )
        std = np.where(self.los, SHADOWING_STD_LOS, SHADOWING_STD_NLOS)
        self.shadowing = shadow_normal[:, site_of_cell] * std
        self.antenna_gain = np.empty_like(self.pathloss)
        for c, cell in enumerate(self.cells):
            self.antenna_gain[:, c] = sector_gain(
                bearing[:, c],
                cell.boresight_azimuth,
                sc.antenna_max_gain,
                sc.antenna_hpbw,
                sc.antenna_max_attenuation,
            )
        self.rsrp = sc.bs_power - self.pathloss - self.shadowing + self.antenna_gain
        self.serving = np.argmax(self.rsrp, axis=1)

        pcis = np.arange(self.num_cells)
        order = np.empty((self.num_ues, self.num_cells), dtype=int)
        for u in range(self.num_ues):
            order[u] = np.lexsort((pcis, -self.rsrp[u]))
        neighbors = [row[row != self.serving[u]] for u, row in enumerate(order)]
        count = min(sc.max_neighbors, self.num_cells - 1)
        self.neighbors = np.array(
            [n[:count] for n in neighbors], dtype=int
        ).reshape(self.num_ues, count)

    def link_budget(self, ue: int, pci: int) -> LinkBudget:
        return LinkBudget(
            pathloss=float(self.pathloss[ue, pci]),
            shadowing=float(self.shadowing[ue, pci]),
            antenna_gain=float(self.antenna_gain[ue, pci]),
            rsrp=float(self.rsrp[ue, pci]),
            is_serving=bool(self.serving[ue] == pci),
            los=bool(self.los[ue, pci]),
        )

    def serving_cell(self, ue: int) -> int:
        return int(self.serving[ue])

    def serving_rsrp(self, ue: int) -> float:
        return float(self.rsrp[ue, self.serving[ue]])

    @cached_property
    def edge_mask(self) -> np.ndarray:
        serving_rsrp = self.rsrp[np.arange(self.num_ues), self.serving]
        return serving_rsrp < self.scenario.edge_rsrp_dbm

    @cached_property
    def tracked_cells(self) -> np.ndarray:
        """(U, L) cells tracked per UE: serving first, then neighbors."""
        return np.concatenate([self.serving[:, None], self.neighbors], axis=1)

    @cached_property
    def tracked_gain(self) -> np.ndarray:
        """Linear large-scale power gain of every tracked link, (U, L)."""
        rows = np.arange(self.num_ues)[:, None]
        cols = self.tracked_cells
        gain_db = (
            -self.pathloss[rows, cols]
            - self.shadowing[rows, cols]
            + self.antenna_gain[rows, cols]
        )
        return db_to_linear(gain_db)

    def attached_ues(self, pci: int) -> List[int]:
        return [int(u) for u in np.flatnonzero(self.serving == pci)]

    @cached_property
    def cell_members(self) -> List[List[int]]:
        return [self.attached_ues(c) for c in range(self.num_cells)]
