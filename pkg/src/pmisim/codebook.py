"""
3GPP Type I single-panel codebook (codebook mode 1, ranks 1 and 2).

Entries are addressed by a flat PMI index j: the position of the entry in
the lexicographic enumeration of (l, m, [offset,] n). The mapping to the
(i11, i12, i13, i2) tuple of TS 38.214 is kept for inspection.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from pydantic import ConfigDict, Field, model_validator

from .errors import CodebookIndexError, ConfigError
from .model import RecordModel

# (N1, N2) antenna layouts of the single-panel Type I codebook
SUPPORTED_LAYOUTS = {
    (2, 1),
    (2, 2),
    (4, 1),
    (3, 2),
    (6, 1),
    (4, 2),
    (8, 1),
    (4, 3),
    (6, 2),
    (12, 1),
    (4, 4),
    (8, 2),
    (16, 1),
}

PmiTuple = Tuple[int, int, int, int]


class CodebookConfig(RecordModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    n1: int = Field(default=4, ge=1)
    n2: int = Field(default=1, ge=1)
    o1: int = Field(default=4, ge=1)
    o2: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_layout(self) -> CodebookConfig:
        if (self.n1, self.n2) not in SUPPORTED_LAYOUTS:
            raise ValueError(
                f"unsupported antenna layout (n1, n2) = ({self.n1}, {self.n2})"
            )
        return self

    @property
    def ports(self) -> int:
        return 2 * self.n1 * self.n2


def rank2_offsets(cfg: CodebookConfig) -> List[Tuple[int, int]]:
    """(k1, k2) beam offsets indexed by i13 for rank 2."""
    n1, n2, o1, o2 = cfg.n1, cfg.n2, cfg.o1, cfg.o2
    if n2 == 1:
        if n1 == 2:
            return [(0, 0), (o1, 0)]
        return [(0, 0), (o1, 0), (2 * o1, 0), (3 * o1, 0)]
    if n1 == n2:
        return [(0, 0), (o1, 0), (0, o2), (o1, o2)]
    if n1 > n2:
        return [(0, 0), (o1, 0), (0, o2), (2 * o1, 0)]
    raise ConfigError(f"no rank-2 offset table for (n1, n2) = ({n1}, {n2})")


def dft_beam(cfg: CodebookConfig, l: int, m: int) -> np.ndarray:
    """Oversampled 2D DFT beam v_{l,m} of length n1*n2 (unnormalized)."""
    u = np.array(
        [cmath.exp(2j * math.pi * m * k / (cfg.o2 * cfg.n2)) for k in range(cfg.n2)]
    )
    horizontal = np.array(
        [cmath.exp(2j * math.pi * l * k / (cfg.o1 * cfg.n1)) for k in range(cfg.n1)]
    )
    return np.kron(horizontal, u)


def co_phase(n: int) -> complex:
    return cmath.exp(1j * math.pi * n / 2.0)


@dataclass(frozen=True)
class Codebook:
    """
    Rank-1 and rank-2 precoder sets. `rank1` has shape (J1, ports, 1) and
    `rank2` (J2, ports, 2); every matrix has unit Frobenius norm.
    """

    config: CodebookConfig
    rank1: np.ndarray
    rank2: np.ndarray
    tuples: Dict[int, List[PmiTuple]] = field(default_factory=dict)

    def size(self, rank: int) -> int:
        return len(self.stack(rank))

    def stack(self, rank: int) -> np.ndarray:
        if rank == 1:
            return self.rank1
        if rank == 2:
            return self.rank2
        raise CodebookIndexError(f"rank must be 1 or 2, got {rank}")

    def is_valid(self, rank: int, j: int) -> bool:
        return rank in (1, 2) and 0 <= j < self.size(rank)

    def index_tuple(self, rank: int, j: int) -> PmiTuple:
        get_pm(self, rank, j)
        return self.tuples[rank][j]

    def flat_index(self, rank: int, pmi: PmiTuple) -> int:
        try:
            return self.tuples[rank].index(tuple(pmi))
        except (KeyError, ValueError):
            raise CodebookIndexError(f"no rank-{rank} entry {pmi}") from None

    def truncated(self, size1: int, size2: int) -> Codebook:
        """A codebook keeping only the first entries of each rank."""
        return Codebook(
            self.config,
            self.rank1[:size1],
            self.rank2[:size2],
            {
                1: self.tuples.get(1, [])[:size1],
                2: self.tuples.get(2, [])[:size2],
            },
        )


def build_codebook(cfg: CodebookConfig) -> Codebook:
    n_beams1 = cfg.n1 * cfg.o1
    n_beams2 = cfg.n2 * cfg.o2
    p = cfg.ports

    rank1, tuples1 = [], []
    scale1 = 1.0 / math.sqrt(p)
    for l in range(n_beams1):
        for m in range(n_beams2):
            v = dft_beam(cfg, l, m)
            for n in range(4):
                w = scale1 * np.concatenate([v, co_phase(n) * v])
                rank1.append(w[:, None])
                tuples1.append((l, m, 0, n))

    rank2, tuples2 = [], []
    scale2 = 1.0 / math.sqrt(2 * p)
    offsets = rank2_offsets(cfg)
    for l in range(n_beams1):
        for m in range(n_beams2):
            v = dft_beam(cfg, l, m)
            for i13, (k1, k2) in enumerate(offsets):
                v2 = dft_beam(cfg, l + k1, m + k2)
                for n in range(2):
                    phi = co_phase(n)
                    first = np.concatenate([v, phi * v])
                    second = np.concatenate([v2, -phi * v2])
                    rank2.append(scale2 * np.stack([first, second], axis=1))
                    tuples2.append((l, m, i13, n))

    return Codebook(
        cfg,
        np.array(rank1, dtype=complex),
        np.array(rank2, dtype=complex),
        {1: tuples1, 2: tuples2},
    )


def get_pm(cb: Codebook, rank: int, j: int) -> np.ndarray:
    """Precoding matrix W_{rank, j}; raises CodebookIndexError when out of range."""
    stack = cb.stack(rank)
    if not 0 <= j < len(stack):
        raise CodebookIndexError(
            f"PMI {j} out of range for rank {rank} (size {len(stack)})"
        )
    return stack[j]
