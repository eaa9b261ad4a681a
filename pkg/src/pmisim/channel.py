from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DomainError, StateError
from .log import get_logger
from .topology import Topology
from .utils import complex_normal, keyed_rng

logger = get_logger(__name__)

_STREAM_FADING = 3


@dataclass(frozen=True)
class ChannelMatrix:
    entries: np.ndarray
    ue: int
    cell: int
    subband: int
    tti: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class NoiseModel:
    noise_figure: float = 9.0
    thermal_density: float = -174.0
    bandwidth_per_prb: float = 180_000.0


def noise_power_dbm(noise: NoiseModel, prbs: int = 1) -> float:
    if prbs < 1:
        raise DomainError(f"prbs must be >= 1, got {prbs}")
    return (
        noise.thermal_density
        + noise.noise_figure
        + 10.0 * math.log10(prbs * noise.bandwidth_per_prb)
    )


def noise_power(noise: NoiseModel, prbs: int = 1) -> float:
    """Noise power sigma^2 in mW over `prbs` resource blocks."""
    return 10.0 ** (noise_power_dbm(noise, prbs) / 10.0)


class FadingState:
    """
    Unit-variance complex Gaussian small-scale fading with AR(1) time
    correlation: G(t) = rho G(t-1) + sqrt(1 - rho^2) E(t).
    """

    def __init__(self, values: np.ndarray, rho: float):
        if not 0.0 <= rho <= 1.0:
            raise DomainError(f"rho must lie in [0, 1], got {rho}")
        self.values = values
        self.rho = rho

    @classmethod
    def initial(
        cls, rng: np.random.Generator, shape, rho: float
    ) -> FadingState:
        return cls(complex_normal(rng, shape), rho)

    def step(self, rng: np.random.Generator) -> None:
        innovation = complex_normal(rng, self.values.shape)
        self.values = self.rho * self.values + math.sqrt(
            1.0 - self.rho**2
        ) * innovation


class ChannelModel:
    """
    Per-TTI, per-subband channel matrices of every tracked link (serving
    cell plus ranked neighbors) of every UE.

    Draws are keyed by (seed, episode, tti) and laid out by (ue, link,
    subband), so they never depend on what the agents do.
    """

    def __init__(
        self,
        topology: Topology,
        num_tx: int,
        num_subbands: int,
        rho: float = 0.9,
    ):
        self.topology = topology
        self.num_rx = topology.scenario.ue_antennas
        self.num_tx = num_tx
        self.num_subbands = num_subbands
        self.rho = rho
        self.seed = topology.scenario.seed
        self.amplitude = np.sqrt(topology.tracked_gain)
        self.shape = (
            topology.num_ues,
            topology.tracked_cells.shape[1],
            num_subbands,
            self.num_rx,
            num_tx,
        )
        self.episode = 0
        self.tti = 0
        self.fading: FadingState | None = None

    def _rng(self, tti: int) -> np.random.Generator:
        return keyed_rng(self.seed, _STREAM_FADING, self.episode, tti)

    def reset(self, episode: int) -> None:
        """Re-seeds the fading process for a new episode at TTI 0."""
        self.episode = episode
        self.tti = 0
        self.fading = FadingState.initial(self._rng(0), self.shape, self.rho)

    def advance(self) -> None:
        if self.fading is None:
            raise StateError("channel model used before reset")
        self.tti += 1
        self.fading.step(self._rng(self.tti))

    def seek(self, tti: int) -> None:
        if tti < 0:
            raise DomainError(f"tti must be >= 0, got {tti}")
        if self.fading is None or tti < self.tti:
            self.reset(self.episode)
        while self.tti < tti:
            self.advance()

    def matrices(self) -> np.ndarray:
        """H for all links at the current TTI, shape (U, L, S, Nr, Nt)."""
        if self.fading is None:
            raise StateError("channel model used before reset")
        return self.amplitude[:, :, None, None, None] * self.fading.values

    def draw_channel(
        self, ue: int, pci: int, subband: int, tti: int
    ) -> ChannelMatrix:
        tracked = self.topology.tracked_cells[ue]
        hits = np.flatnonzero(tracked == pci)
        if len(hits) == 0:
            raise StateError(f"link ue={ue} cell={pci} is not tracked")
        if not 0 <= subband < self.num_subbands:
            raise StateError(f"subband {subband} out of range")
        self.seek(tti)
        entries = self.amplitude[ue, hits[0]] * self.fading.values[
            ue, hits[0], subband
        ]
        return ChannelMatrix(entries.copy(), ue, pci, subband, tti)

    def draw_hash(self) -> str:
        """SHA-256 of the current channel tensor."""
        return hashlib.sha256(
            np.ascontiguousarray(self.matrices()).tobytes()
        ).hexdigest()
