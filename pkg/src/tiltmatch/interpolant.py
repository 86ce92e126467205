"""Masking interpolants: any-order (independent reveal times) and blockwise SAR.

Reveal times are drawn lazily on every call: position i is revealed at time t
iff U_i < alpha(t) with U_i ~ Uniform[0, 1), which is T_i <= t for T_i with
CDF alpha. Positions before ``prefix`` (a prompt) are never masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import HAZARD_EPS, ContractError, Schedule


@dataclass(frozen=True)
class SarLayout:
    """Block partition of positions ``[prefix, length)`` into blocks of ``block``."""

    length: int
    block: int
    prefix: int = 0

    def __post_init__(self):
        body = self.length - self.prefix
        if self.block <= 0 or body <= 0 or body % self.block:
            raise ValueError(
                f"block size {self.block} must divide body length {body}"
            )

    @property
    def n_blocks(self) -> int:
        return (self.length - self.prefix) // self.block

    def block_slice(self, b: int) -> slice:
        start = self.prefix + b * self.block
        return slice(start, start + self.block)

    def active(self, t: float) -> tuple[int, float]:
        """Active block b(t) = floor(M t) and local time u(t) = M t - b(t).

        t = 1 maps to the last block with u = 1.
        """
        m = self.n_blocks
        b = min(int(math.floor(m * t)), m - 1)
        return b, m * t - b


def _check_clean(x1, mask_id: int) -> np.ndarray:
    x1 = np.asarray(x1)
    if np.any(x1 >= mask_id) or np.any(x1 < 0):
        raise ContractError("interpolant source must be a clean sequence")
    return x1


def reveal_any_order(x1, s, rng, mask_id: int, prefix: int = 0) -> np.ndarray:
    """Mask each body position of ``x1`` independently; reveal with prob ``s``.

    ``x1`` may be a batch (n, L) with ``s`` of shape (n,).
    """
    x1 = np.asarray(x1)
    s = np.asarray(s, dtype=float)
    u = rng.random(x1.shape)
    keep = u < s[..., None] if s.ndim else u < s
    keep[..., :prefix] = True
    return np.where(keep, x1, mask_id)


def interpolate_any_order(x1, t: float, schedule: Schedule, rng, mask_id: int,
                          prefix: int = 0) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    x1 = _check_clean(x1, mask_id)
    return reveal_any_order(x1, float(schedule.alpha(t)), rng, mask_id, prefix)


def reveal_sar(x1, b, s, layout: SarLayout, rng, mask_id: int) -> np.ndarray:
    """SAR state with active block ``b`` and local reveal probability ``s``.

    Batched like :func:`reveal_any_order`; ``b`` and ``s`` are per-row.
    """
    x1 = np.asarray(x1)
    batched = x1.ndim == 2
    x = np.atleast_2d(x1)
    b = np.atleast_1d(np.asarray(b))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    u = rng.random(x.shape)
    pos_block = np.full(x.shape[1], -1)
    pos_block[layout.prefix:] = np.arange(x.shape[1] - layout.prefix) // layout.block
    past = pos_block[None, :] < b[:, None]
    current = pos_block[None, :] == b[:, None]
    keep = past | (current & (u < s[:, None]))
    keep[:, :layout.prefix] = True
    out = np.where(keep, x, mask_id)
    return out if batched else out[0]


def interpolate_sar(x1, t: float, layout: SarLayout, schedule: Schedule, rng,
                    mask_id: int) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    x1 = _check_clean(x1, mask_id)
    if x1.shape[-1] != layout.length:
        raise ValueError(
            f"layout length {layout.length} does not match sequence length {x1.shape[-1]}"
        )
    b, u = layout.active(t)
    return reveal_sar(x1, b, float(schedule.alpha(u)), layout, rng, mask_id)


def hazard_sar(layout: SarLayout, schedule: Schedule, t: float) -> float:
    """Global-time SAR hazard M * alpha'(u) / (1 - alpha(u))."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    _, u = layout.active(t)
    if u >= 1.0 - HAZARD_EPS:
        raise ValueError(f"SAR hazard undefined at local time u={u}")
    return float(layout.n_blocks * schedule.dalpha(u) / (1.0 - schedule.alpha(u)))


def eligible_indices(x, layout: SarLayout, t: float, mask_id: int) -> list[int]:
    """Masked positions of the active block at time ``t``."""
    b, _ = layout.active(t)
    sl = layout.block_slice(b)
    x = np.asarray(x)
    return [sl.start + int(j) for j in np.flatnonzero(x[sl] == mask_id)]
