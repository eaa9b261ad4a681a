import math
from typing import Iterable, Sequence

import numpy as np


def db_to_linear(value_db):
    """Convert a dB quantity (scalar or array) to linear scale."""
    return np.power(10.0, np.asarray(value_db, dtype=float) / 10.0)


def linear_to_db(value):
    """Convert a linear power (scalar or array) to dB; zero maps to -inf."""
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(value, dtype=float))


def dbm_to_mw(value_dbm: float) -> float:
    return float(10.0 ** (value_dbm / 10.0))


def mw_to_dbm(value_mw: float) -> float:
    if value_mw <= 0.0:
        return -math.inf
    return 10.0 * math.log10(value_mw)


def keyed_rng(*key: int) -> np.random.Generator:
    """
    Returns a generator whose stream is fully determined by the integer key.
    Distinct keys give statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Draws i.i.d. CN(0, 1) entries."""
    scale = math.sqrt(0.5)
    return scale * (
        rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    )


def exact_sum(values: Iterable[float]) -> float:
    """Order-independent, correctly rounded sum."""
    return math.fsum(float(v) for v in values)


def trailing_mean(values: Sequence[float], window: int) -> list[float]:
    """Running mean over the last `window` values; partial at the start."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
