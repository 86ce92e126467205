"""Vocabulary, masked sequences, unmasking schedules and the RNG contract.

Sequences are plain integer numpy arrays. Clean tokens live in ``[0, |V|)``
and the mask sentinel is ``|V|``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HAZARD_EPS = 1e-12


class ContractError(ValueError):
    """Raised when an operation's precondition on its inputs is violated."""


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocabulary size must be positive, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size

    def is_clean(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= 0) & (x < self.size)))

    def fully_masked(self, length: int) -> np.ndarray:
        return np.full(length, self.mask_id, dtype=np.int64)


@dataclass(frozen=True)
class Schedule:
    """Monotone unmasking schedule alpha: [0, 1] -> [0, 1].

    ``kind='linear'`` is alpha(t) = t; ``kind='poly'`` is alpha(t) = t**exponent.
    """

    kind: str = "linear"
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "poly"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "poly" and self.exponent <= 0:
            raise ValueError("poly schedule needs a positive exponent")

    @property
    def _p(self) -> float:
        return 1.0 if self.kind == "linear" else float(self.exponent)

    def alpha(self, t):
        return np.power(t, self._p)

    def dalpha(self, t):
        p = self._p
        if p == 1.0:
            return np.ones_like(np.asarray(t, dtype=float))
        return p * np.power(t, p - 1.0)

    def inverse(self, s):
        """t such that alpha(t) = s."""
        return np.power(s, 1.0 / self._p)


def _check_time(t: float) -> None:
    if not (0.0 <= t < 1.0 - HAZARD_EPS):
        raise ValueError(f"hazard undefined at t={t!r}; need 0 <= t < 1")


def hazard(schedule: Schedule, t: float) -> float:
    """Reveal rate alpha'(t) / (1 - alpha(t)) of a still-masked coordinate."""
    _check_time(t)
    return float(schedule.dalpha(t) / (1.0 - schedule.alpha(t)))


def mask_positions(x, mask_id: int) -> list[int]:
    return [int(i) for i in np.flatnonzero(np.asarray(x) == mask_id)]


def substitute(x, i: int, v: int, mask_id: int) -> np.ndarray:
    """Copy of ``x`` with masked position ``i`` set to clean token ``v``."""
    x = np.asarray(x)
    if x[i] != mask_id:
        raise ContractError(f"position {i} is already unmasked (token {x[i]})")
    if not 0 <= v < mask_id:
        raise ContractError(f"token {v} is not a clean token")
    out = x.copy()
    out[i] = v
    return out


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, one per worker."""
    return rng.spawn(n)
