"""Annealed DTM training: SAR rollouts into a replay buffer, per-phase
training against a frozen reference, and an exact tabular mode."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Schedule, make_rng
from .interpolant import SarLayout
from .model import Adam, clone_frozen, softmax
from .objective import DtmConfig, cdtm_loss_and_grad, sar_cdtm_loss_and_grad, train_tabular_exact
from .oracle import ExactDistribution, reward_values, terminal_law

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class RolloutConfig:
    steps: int
    block: int
    order: str = "random"
    temperature: float = 1.0

    def __post_init__(self):
        if self.order not in ("random", "confidence"):
            raise ValueError(f"unknown order policy {self.order!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")


@dataclass
class BufferConfig:
    size: int = 256
    refresh_interval: int = 32
    refresh_fraction: float = 0.25


@dataclass
class ReplayBuffer:
    """(clean sequence, reward) pairs stored oldest first."""

    x: np.ndarray
    rewards: np.ndarray
    refresh_interval: int = 32
    refresh_fraction: float = 0.25
    forward_calls: int = 0

    @property
    def capacity(self) -> int:
        return len(self.x)

    def __len__(self):
        return len(self.x)

    def n_refresh(self) -> int:
        return math.ceil(self.refresh_fraction * self.capacity)

    def refresh(self, new_x, new_rewards) -> None:
        """Evict the oldest entries and append the new ones."""
        k = len(new_x)
        self.x = np.concatenate([self.x[k:], np.asarray(new_x)])
        self.rewards = np.concatenate([self.rewards[k:], np.asarray(new_rewards, dtype=float)])

    def mean_reward(self) -> float:
        return float(self.rewards.mean())


def _check_rollout(length: int, prefix: int, cfg: RolloutConfig) -> tuple[int, int, int]:
    body = length - prefix
    if cfg.block <= 0 or body % cfg.block:
        raise ValueError(f"block size {cfg.block} must divide generated length {body}")
    n_blocks = body // cfg.block
    if cfg.steps % n_blocks:
        raise ValueError(f"block count {n_blocks} must divide step count {cfg.steps}")
    rounds = cfg.steps // n_blocks
    if cfg.block % rounds:
        raise ValueError(f"rounds per block {rounds} must divide block size {cfg.block}")
    return n_blocks, rounds, cfg.block // rounds


def sar_rollout(model, n: int, cfg: RolloutConfig, rng, prompts=None):
    """Generate ``n`` clean sequences blockwise; one batched forward per round.

    Returns (sequences, number of per-sequence forward evaluations).
    """
    rng = make_rng(rng)
    L, mask_id = model.length, model.vocab_size
    prefix = 0 if prompts is None else np.asarray(prompts).shape[1]
    n_blocks, rounds, per_round = _check_rollout(L, prefix, cfg)
    x = np.full((n, L), mask_id, dtype=np.int64)
    if prefix:
        x[:, :prefix] = prompts
    calls = 0
    rows = np.arange(n)[:, None]
    for b in range(n_blocks):
        lo = prefix + b * cfg.block
        for _ in range(rounds):
            z = model.logits(x)[:, lo:lo + cfg.block]
            calls += n
            if cfg.temperature == 0:
                tokens = z.argmax(axis=-1)
            else:
                cdf = np.cumsum(softmax(z / cfg.temperature), axis=-1)
                u = rng.random(z.shape[:2])[..., None] * cdf[..., -1:]
                tokens = np.minimum((cdf <= u).sum(axis=-1), z.shape[-1] - 1)
            if cfg.order == "random":
                score = rng.random(tokens.shape)
            else:
                # confidence is the untempered model probability of the sampled token
                score = np.take_along_axis(softmax(z), tokens[..., None], axis=-1)[..., 0]
            masked = x[:, lo:lo + cfg.block] == mask_id
            score = np.where(masked, score, -np.inf)
            # stable sort keeps ties at the lowest index
            pick = np.argsort(-score, axis=1, kind="stable")[:, :per_round]
            x[rows, lo + pick] = tokens[rows, pick]
    return x, calls


def _rewards(reward_fn, x) -> np.ndarray:
    return np.array([float(reward_fn(row)) for row in x])


def build_buffer(pi_a, reward_fn, n: int, rollout: RolloutConfig, rng, prompts=None,
                 refresh_interval: int = 32, refresh_fraction: float = 0.25) -> ReplayBuffer:
    x, calls = sar_rollout(pi_a, n, rollout, rng, prompts)
    return ReplayBuffer(x, _rewards(reward_fn, x), refresh_interval, refresh_fraction, calls)


def sample_minibatch(buffer: ReplayBuffer, s: int, rng):
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty buffer")
    idx = make_rng(rng).integers(0, len(buffer), s)
    return buffer.x[idx], buffer.rewards[idx]


def param_hash(model) -> str:
    return hashlib.sha256(model.params.tobytes()).hexdigest()[:16]


@dataclass
class PhaseLog:
    phase: int
    a: float
    records: list[dict] = field(default_factory=list)
    mean_buffer_reward: float = float("nan")
    reference_hash: str = ""


def _phases(A: float, h: float):
    a, k = 0.0, 0
    while a < A - 1e-12:
        yield k, a
        k += 1
        a = k * h


def run_dtm(base_model, reward_fn: Callable, A: float, h: float, steps_per_phase: int,
            buffer_cfg: BufferConfig, dtm_cfg: DtmConfig, rollout: RolloutConfig,
            rng, optimizer_factory=None, prompt_sampler=None, schedule: Schedule | None = None,
            on_phase_end=None, on_step=None):
    """Anneal from a = 0 to A in steps of h against frozen references.

    ``prompt_sampler(n, rng)`` supplies prompt prefixes for rollouts; the SAR
    objective's layout covers the non-prompt part. Returns (model, phase logs).
    """
    rng = make_rng(rng)
    schedule = schedule or Schedule()
    optimizer_factory = optimizer_factory or (lambda: Adam())
    theta = clone_frozen(base_model)
    logs: list[PhaseLog] = []
    for k, a in _phases(A, h):
        pi_a = clone_frozen(theta)
        ref_hash = param_hash(pi_a)
        opt = optimizer_factory()
        phase = PhaseLog(k, a, reference_hash=ref_hash)
        buffer = None
        layout = None
        rewards_seen = []
        for step in range(steps_per_phase):
            if step % buffer_cfg.refresh_interval == 0:
                n_new = buffer_cfg.size if buffer is None else buffer.n_refresh()
                prompts = prompt_sampler(n_new, rng) if prompt_sampler else None
                fresh = build_buffer(pi_a, reward_fn, n_new, rollout, rng, prompts,
                                     buffer_cfg.refresh_interval, buffer_cfg.refresh_fraction)
                if buffer is None:
                    buffer = fresh
                    prefix = 0 if prompts is None else prompts.shape[1]
                    layout = SarLayout(theta.length, rollout.block, prefix)
                else:
                    buffer.refresh(fresh.x, fresh.rewards)
                rewards_seen.extend(fresh.rewards.tolist())
            xb, rb = sample_minibatch(buffer, dtm_cfg.batch_size, rng)
            if dtm_cfg.objective == "sar":
                loss, grad, diag = sar_cdtm_loss_and_grad(xb, rb, pi_a, theta, dtm_cfg, layout,
                                                          schedule, rng)
            else:
                loss, grad, diag = cdtm_loss_and_grad(xb, rb, pi_a, theta, dtm_cfg, schedule,
                                                      rng, prefix=layout.prefix)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(
                    f"non-finite loss in phase {k} at step {step}",
                    {"phase": k, "a": a, "step": step, "loss": loss,
                     "rewards": rb.tolist(), **diag})
            grad_norm = opt.step(theta.params, grad)
            rec = {"phase_index": k, "a": a, "step": step, "loss": loss,
                   "mean_buffer_reward": buffer.mean_reward(), "grad_norm": grad_norm,
                   "mean_weight": diag["mean_weight"], "ess": diag["ess"]}
            phase.records.append(rec)
            if on_step:
                on_step(rec)
        if param_hash(pi_a) != ref_hash:
            raise RuntimeError("frozen reference changed during a phase")
        phase.mean_buffer_reward = float(np.mean(rewards_seen)) if rewards_seen else float("nan")
        log.info("phase %d a=%.3f mean buffer reward %.4f", k, a, phase.mean_buffer_reward)
        logs.append(phase)
        if on_phase_end:
            on_phase_end(k, a + h, theta, phase)
    return theta, logs


def run_dtm_exact(base_probs, rho1: ExactDistribution, reward, A: float, h: float, c: float,
                  steps_per_phase: int = 500, layout: SarLayout | None = None):
    """Exact-expectation annealing for a tabular model.

    Each phase takes the frozen table's exact terminal law as the buffer
    distribution and runs full-batch descent on the exact c-DTM loss.
    Returns (final probability table, list of per-phase dicts).
    """
    V, L = rho1.vocab_size, rho1.length
    r = reward_values(reward, rho1)
    logits = np.log(np.maximum(base_probs, 1e-300))
    logs = []
    for k, a in _phases(A, h):
        pi_a = softmax(logits)
        rho_a = terminal_law(pi_a, V, L)
        logits, n = train_tabular_exact(logits, pi_a, rho_a, r, h, c, layout,
                                        steps=steps_per_phase)
        logs.append({"phase_index": k, "a": a, "mean_reward": rho_a.expect(r), "steps": n})
    return softmax(logits), logs
