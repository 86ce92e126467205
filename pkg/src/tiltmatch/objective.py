"""The c-DTM objective: control-variate targets, exact and Monte Carlo losses,
and exact gradient-variance diagnostics.

For a clean x1 with weight w = exp(h r(x1)) the weighted target is
w * T_c = c * pi_a + (w - c) * onehot(x1^i); it is formed directly so large
weights never get divided back out.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Schedule, make_rng
from .interpolant import SarLayout, reveal_any_order, reveal_sar
from .model import forward, log_softmax, softmax
from .oracle import ExactDistribution, posterior_table, reward_values, state_rank


@dataclass
class DtmConfig:
    c: float = 1.0
    h: float = 1.0
    batch_size: int = 64
    draws_per_sequence: int = 1
    s_cap: float = 1e-3
    reward_clip: float | None = None
    objective: str = "any"

    def __post_init__(self):
        if not self.h > 0 or not math.isfinite(self.c):
            raise ValueError("need h > 0 and a finite control variate c")
        if self.objective not in ("any", "sar"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def clip(self) -> float:
        return self.reward_clip if self.reward_clip is not None else 20.0 / self.h


def tc_target(x_t, i: int, x1, pi_a, reward_value: float, h: float, c: float) -> np.ndarray:
    """Control-variate target [c pi_a + (w - c) onehot(x1^i)] / w, w = e^{h r}.

    ``pi_a`` is a model or a precomputed (L, |V|) posterior matrix for ``x_t``.
    """
    rows = pi_a if isinstance(pi_a, np.ndarray) else forward(pi_a, np.asarray(x_t))
    p = rows[i]
    w = math.exp(h * reward_value)
    out = c * p / w
    out[int(np.asarray(x1)[i])] += (w - c) / w
    return out


def beta_weight(k: int, m: int) -> float:
    """Integral of s^k (1-s)^(m-1) over [0, 1]: the hazard-weighted mass of a
    mask pattern with k revealed and m >= 1 masked positions."""
    return math.factorial(k) * math.factorial(m - 1) / math.factorial(k + m)


def _patterns(length: int, layout: SarLayout | None):
    """(revealed mask, eligible mask, weight) triples spanning the loss integral."""
    if layout is None:
        for bits in itertools.product((False, True), repeat=length):
            revealed = np.array(bits)
            m = length - int(revealed.sum())
            if m:
                yield revealed, ~revealed, beta_weight(length - m, m)
        return
    B = layout.block
    for b in range(layout.n_blocks):
        sl = layout.block_slice(b)
        for bits in itertools.product((False, True), repeat=B):
            local = np.array(bits)
            m = B - int(local.sum())
            if not m:
                continue
            revealed = np.zeros(length, dtype=bool)
            revealed[:sl.start] = True
            revealed[sl] = local
            eligible = np.zeros(length, dtype=bool)
            eligible[sl] = ~local
            yield revealed, eligible, beta_weight(B - m, m)


def exact_cdtm(theta_logits, pi_a, rho_a: ExactDistribution, reward, h: float, c: float,
               layout: SarLayout | None = None):
    """Exact expected c-DTM loss on an enumerable instance.

    ``theta_logits`` and ``pi_a`` are (n_states, L, |V|) tables (logits and
    probabilities). Returns (loss, gradient w.r.t. the logits table, per-row
    total weight). The time integral is done in closed form per mask pattern.
    """
    V, L = rho_a.vocab_size, rho_a.length
    r = reward_values(reward, rho_a)
    x1 = rho_a.sequences
    w = np.exp(h * r)
    logp = log_softmax(theta_logits)
    probs = np.exp(logp)
    grad = np.zeros_like(theta_logits)
    mass = np.zeros(theta_logits.shape[:2])
    onehot = np.eye(V)[x1]
    loss = 0.0
    live = rho_a.probs > 0
    x1, onehot, w, prob_a = x1[live], onehot[live], w[live], rho_a.probs[live]
    base = prob_a * w
    for revealed, eligible, weight in _patterns(L, layout):
        ranks = state_rank(np.where(revealed, x1, V), V)
        for i in np.flatnonzero(eligible):
            wt = c * prob_a[:, None] * pi_a[ranks, i] + ((w - c) * prob_a)[:, None] * onehot[:, i]
            loss -= weight * np.sum(wt * logp[ranks, i])
            coef = weight * base
            np.add.at(grad[:, i], ranks, coef[:, None] * probs[ranks, i] - weight * wt)
            np.add.at(mass[:, i], ranks, coef)
    return float(loss), grad, mass


def exact_cdtm_loss(theta_probs, pi_a, rho_a, reward, h, c, layout=None) -> float:
    with np.errstate(divide="ignore"):
        logits = np.log(theta_probs)
    return exact_cdtm(logits, pi_a, rho_a, reward, h, c, layout)[0]


def train_tabular_exact(theta_logits, pi_a, rho_a, reward, h, c, layout=None,
                        lr: float = 1.0, steps: int = 500, tol: float = 1e-13,
                        max_step: float = 1.0):
    """Full-batch descent on the exact loss for a tabular model.

    The gradient of each (state, position) row is preconditioned by the
    inverse row weight and the inverse current probabilities (a diagonal
    Fisher step), which keeps it a descent direction and makes convergence
    quadratic near the minimizer. Far from it, entries of the step are
    clipped to ``max_step`` so rows with tiny probabilities cannot overshoot.
    Returns (logits, steps taken).
    """
    logits = np.array(theta_logits, dtype=float)
    step = 0
    for step in range(1, steps + 1):
        _, grad, mass = exact_cdtm(logits, pi_a, rho_a, reward, h, c, layout)
        live = mass > 0
        q = softmax(logits[live])
        update = np.zeros_like(grad)
        update[live] = np.clip(grad[live] / (mass[live][:, None] * q), -max_step, max_step)
        logits -= lr * update
        logits[live] -= logits[live].max(axis=-1, keepdims=True)
        if np.max(np.abs(update)) < tol:
            break
    return logits, step


def _time_draws(rng, n: int, s_cap: float):
    s = np.minimum(rng.random(n), 1.0 - s_cap)
    return s, 1.0 / (1.0 - s)


def _mc_loss_and_grad(x_t, x1, eligible, time_w, rewards, pi_a, theta, cfg: DtmConfig):
    n, L = x_t.shape
    r = np.clip(np.asarray(rewards, dtype=float), -cfg.clip(), cfg.clip())
    logw = cfg.h * r
    w = np.exp(logw)
    z, cache = theta.logits(x_t, return_cache=True)
    logp = log_softmax(z)
    p = np.exp(logp)
    V = p.shape[-1]
    wt = (w - cfg.c)[:, None, None] * np.eye(V)[x1]
    if cfg.c != 0:
        wt = wt + cfg.c * forward(pi_a, x_t)
    scale = (time_w / n)[:, None, None] * eligible[..., None]
    per_item = -np.sum((time_w[:, None, None] * eligible[..., None]) * wt * logp, axis=(1, 2))
    loss = float(per_item.sum() / n)
    # sum_v (w T_c)(v) = w, so d/dz of -sum (w T_c) log softmax(z) is w p - w T_c
    dlogits = scale * (w[:, None, None] * p - wt)
    grad = theta.backward(cache, dlogits)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return loss, grad, {"mean_weight": float(w.mean()), "ess": ess,
                        "masked": float(eligible.sum(axis=1).mean()), "per_item": per_item}


def cdtm_loss_and_grad(x1, rewards, pi_a, theta, cfg: DtmConfig, schedule: Schedule,
                       rng, prefix: int = 0):
    """Monte Carlo c-DTM loss and gradient for a minibatch of clean sequences.

    Each item gets s ~ U(0, 1) (capped), t = alpha^{-1}(s), time weight
    1 / (1 - s), and an any-order masked state. The loss is the batch mean of
    the time-weighted sum of weighted cross-entropies over masked positions.
    """
    x1 = np.asarray(x1)
    if x1.ndim != 2 or len(x1) == 0:
        raise ValueError("empty or malformed batch")
    rng = make_rng(rng)
    mask_id = theta.vocab_size
    s, time_w = _time_draws(rng, len(x1), cfg.s_cap)
    x_t = reveal_any_order(x1, s, rng, mask_id, prefix)
    eligible = x_t == mask_id
    return _mc_loss_and_grad(x_t, x1, eligible, time_w, rewards, pi_a, theta, cfg)


def sar_cdtm_loss_and_grad(x1, rewards, pi_a, theta, cfg: DtmConfig, layout: SarLayout,
                           schedule: Schedule, rng):
    """SAR-aligned variant: blockwise states, active-block positions only,
    time weight M / (1 - s) for a uniformly drawn active block."""
    x1 = np.asarray(x1)
    if x1.ndim != 2 or len(x1) == 0:
        raise ValueError("empty or malformed batch")
    rng = make_rng(rng)
    mask_id = theta.vocab_size
    n = len(x1)
    M = layout.n_blocks
    s, time_w = _time_draws(rng, n, cfg.s_cap)
    b = rng.integers(0, M, n) if M > 1 else np.zeros(n, dtype=int)
    x_t = reveal_sar(x1, b, s, layout, rng, mask_id)
    pos_block = np.full(x1.shape[1], -1)
    pos_block[layout.prefix:] = np.arange(x1.shape[1] - layout.prefix) // layout.block
    eligible = (x_t == mask_id) & (pos_block[None, :] == b[:, None])
    return _mc_loss_and_grad(x_t, x1, eligible, M * time_w, rewards, pi_a, theta, cfg)


def grad_variance_report(rho_a: ExactDistribution, reward, theta_probs, h_values,
                         pi_a=None) -> list[dict]:
    """Exact trace-covariance of the per-sample gradients G_0 and G_1.

    Samples are (x1, mask pattern, masked position i) with probability
    rho_a(x1) * beta_weight(k, m) / L, the normalized measure of the loss
    integral. Gradients are taken w.r.t. a tabular logits parameterization,
    where grad log pi_theta(v | x_t, i) = e_v - pi_theta(. | x_t, i).
    """
    V, L = rho_a.vocab_size, rho_a.length
    r = reward_values(reward, rho_a)
    if pi_a is None:
        pi_a = posterior_table(rho_a)
    x1 = rho_a.sequences
    eye = np.eye(V)
    report = []
    for h in h_values:
        w = np.exp(h * r)
        sq = {0: 0.0, 1: 0.0}
        mean = {0: np.zeros_like(theta_probs), 1: np.zeros_like(theta_probs)}
        lotv = 0.0
        for revealed, eligible, weight in _patterns(L, None):
            ranks = state_rank(np.where(revealed, x1, V), V)
            prob = rho_a.probs * weight / L
            for i in np.flatnonzero(eligible):
                th = theta_probs[ranks, i]
                phi = eye[x1[:, i]] - th
                mu = pi_a[ranks, i] - th
                g0 = w[:, None] * phi
                g1 = w[:, None] * mu + (w - 1.0)[:, None] * phi
                for key, g in ((0, g0), (1, g1)):
                    sq[key] += float(np.sum(prob[:, None] * g * g))
                    np.add.at(mean[key][:, i], ranks, prob[:, None] * g)
                lotv += float(np.sum(prob * (1.0 - np.sum(pi_a[ranks, i] ** 2, axis=1))))
        var0 = sq[0] - float(np.sum(mean[0] ** 2))
        var1 = sq[1] - float(np.sum(mean[1] ** 2))
        report.append({"h": float(h), "var_G0": var0, "var_G1": var1,
                       "total_variance_term": lotv})
    return report
