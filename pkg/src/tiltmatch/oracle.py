"""Exact reference computations on enumerable sequence spaces.

Clean sequences are ranked mixed-radix with base |V| (position 0 most
significant). Partially masked states are ranked the same way with base
|V|+1, the mask id |V| being the top digit. A *posterior table* is an array of
shape (n_states, L, |V|) whose row ``[rank(x), i]`` is a distribution over the
clean token at position ``i`` of state ``x``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Schedule

STATE_CAP = 10_000


class UnreachableState(ValueError):
    """Conditioning on a state that has zero probability."""


class InfiniteKL(ValueError):
    """The second argument of a KL divergence misses support of the first."""


class SpaceTooLarge(ValueError):
    pass


def clean_sequences(vocab_size: int, length: int) -> np.ndarray:
    """All clean sequences, shape (|V|**L, L), in rank order."""
    return np.array(list(itertools.product(range(vocab_size), repeat=length)),
                    dtype=np.int64).reshape(-1, length)


def all_states(vocab_size: int, length: int) -> np.ndarray:
    """All partially masked states, shape ((|V|+1)**L, L), in rank order."""
    return clean_sequences(vocab_size + 1, length)


def _powers(base: int, length: int) -> np.ndarray:
    return base ** np.arange(length - 1, -1, -1, dtype=np.int64)


def clean_rank(x, vocab_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return x @ _powers(vocab_size, x.shape[-1])


def state_rank(x, vocab_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return x @ _powers(vocab_size + 1, x.shape[-1])


@dataclass
class ExactDistribution:
    probs: np.ndarray
    vocab_size: int
    length: int
    _seqs: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        n = self.vocab_size ** self.length
        if self.probs.shape != (n,):
            raise ValueError(f"expected {n} probabilities, got {self.probs.shape}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    @property
    def sequences(self) -> np.ndarray:
        if self._seqs is None:
            self._seqs = clean_sequences(self.vocab_size, self.length)
        return self._seqs

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def expect(self, values) -> float:
        return float(self.probs @ np.asarray(values, dtype=float))

    @classmethod
    def from_weights(cls, weights, vocab_size: int, length: int) -> "ExactDistribution":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(), vocab_size, length)

    @classmethod
    def random(cls, vocab_size: int, length: int, rng, concentration: float = 1.0,
               full_support: bool = True) -> "ExactDistribution":
        n = vocab_size ** length
        p = rng.dirichlet(np.full(n, concentration))
        if not full_support:
            p = p * (rng.random(n) < 0.7)
            if p.sum() == 0:
                p[rng.integers(n)] = 1.0
        elif p.min() < 1e-6:
            p = p + 1e-6
        return cls(p / p.sum(), vocab_size, length)

    @classmethod
    def point_mass(cls, x, vocab_size: int) -> "ExactDistribution":
        x = np.asarray(x)
        p = np.zeros(vocab_size ** len(x))
        p[int(clean_rank(x, vocab_size))] = 1.0
        return cls(p, vocab_size, len(x))


def reward_values(reward, dist: ExactDistribution) -> np.ndarray:
    """Reward as an array over clean ranks; accepts an array or a callable."""
    if callable(reward):
        return np.array([float(reward(x)) for x in dist.sequences])
    r = np.asarray(reward, dtype=float)
    if r.shape != dist.probs.shape:
        raise ValueError("reward table does not match the distribution")
    return r


def _log_weights(probs: np.ndarray, r: np.ndarray, delta: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(probs > 0, np.log(probs) + delta * r, -np.inf)


def tilt(rho: ExactDistribution, reward, delta: float) -> ExactDistribution:
    """Distribution proportional to rho(x) * exp(delta * r(x))."""
    r = reward_values(reward, rho)
    logw = _log_weights(rho.probs, r, delta)
    top = logw.max()
    if not np.isfinite(top):
        raise RuntimeError("tilt produced an all-zero distribution")
    w = np.exp(logw - top)
    return ExactDistribution(w / w.sum(), rho.vocab_size, rho.length)


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    on = p > 0
    if np.any(q[on] <= 0):
        raise InfiniteKL("q has zero mass where p is positive")
    return float(np.sum(p[on] * (np.log(p[on]) - np.log(q[on]))))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _completions(rho: ExactDistribution, x_t):
    """Clean ranks of all completions of ``x_t`` (masked slots filled in)."""
    x_t = np.asarray(x_t)
    masked = np.flatnonzero(x_t == rho.mask_id)
    x = x_t.copy()
    for fill in itertools.product(range(rho.vocab_size), repeat=len(masked)):
        x[masked] = fill
        yield int(clean_rank(x, rho.vocab_size)), x


def exact_posterior(rho: ExactDistribution, x_t, i: int) -> np.ndarray:
    """P[x1^i = v | x1 agrees with x_t on its unmasked positions]."""
    if np.asarray(x_t)[i] != rho.mask_id:
        raise ValueError(f"position {i} of the state is not masked")
    out = np.zeros(rho.vocab_size)
    for rank, x in _completions(rho, x_t):
        out[x[i]] += rho.probs[rank]
    total = out.sum()
    if total <= 0:
        raise UnreachableState(f"state {list(np.asarray(x_t))} has probability 0")
    return out / total


def esscher_posterior(rho_a: ExactDistribution, reward, h: float, x_t, i: int) -> np.ndarray:
    """E_a[e^{h r} 1{x1^i = v} | x_t] / E_a[e^{h r} | x_t] by enumeration."""
    if np.asarray(x_t)[i] != rho_a.mask_id:
        raise ValueError(f"position {i} of the state is not masked")
    r = reward_values(reward, rho_a)
    tokens, logw = [], []
    for rank, x in _completions(rho_a, x_t):
        if rho_a.probs[rank] > 0:
            tokens.append(x[i])
            logw.append(math.log(rho_a.probs[rank]) + h * r[rank])
    if not logw:
        raise UnreachableState(f"state {list(np.asarray(x_t))} has probability 0")
    logw = np.array(logw)
    w = np.exp(logw - logw.max())
    out = np.bincount(np.array(tokens), weights=w, minlength=rho_a.vocab_size)
    return out / w.sum()


def consistency(vocab_size: int, length: int) -> np.ndarray:
    """Boolean (n_states, n_clean): state agrees with clean sequence where revealed."""
    states = all_states(vocab_size, length)
    clean = clean_sequences(vocab_size, length)
    return np.all((states[:, None, :] == vocab_size) | (states[:, None, :] == clean[None]),
                  axis=-1)


def posterior_table(rho: ExactDistribution, reward=None, h: float = 0.0,
                    return_mass: bool = False):
    """Ground-truth (optionally h-tilted) unmasking posteriors for every state.

    Rows of unreachable states are uniform; rows at revealed positions are
    one-hot on the revealed token.
    """
    V, L = rho.vocab_size, rho.length
    probs = rho.probs
    if reward is not None and h != 0.0:
        probs = tilt(rho, reward, h).probs
    cons = consistency(V, L)
    clean = rho.sequences
    weighted = cons * probs[None, :]
    mass = weighted.sum(axis=1)
    onehot = np.eye(V)[clean]
    num = np.einsum("sc,civ->siv", weighted, onehot)
    table = np.full(num.shape, 1.0 / V)
    ok = mass > 0
    table[ok] = num[ok] / mass[ok, None, None]
    states = all_states(V, L)
    revealed = states != V
    table[revealed] = np.eye(V)[states[revealed]]
    if return_mass:
        return table, mass
    return table


def _level_order(vocab_size: int, length: int):
    states = all_states(vocab_size, length)
    n_masked = np.sum(states == vocab_size, axis=1)
    return states, n_masked


def occupation(table: np.ndarray, vocab_size: int, length: int) -> np.ndarray:
    """Probability that the reveal chain driven by ``table`` ever visits each state.

    The next reveal is a uniformly random masked coordinate; its token is drawn
    from the table row. The value at a clean state is its terminal probability.
    """
    V, L = vocab_size, length
    states, n_masked = _level_order(V, L)
    pw = _powers(V + 1, L)
    q = np.zeros(len(states))
    q[-1] = 1.0
    drop = V - np.arange(V)
    for m in range(L, 0, -1):
        level = np.flatnonzero((n_masked == m) & (q > 0))
        if level.size == 0:
            continue
        for j in range(L):
            src = level[states[level, j] == V]
            if src.size == 0:
                continue
            child = src[:, None] - drop[None, :] * pw[j]
            np.add.at(q, child, (q[src, None] / m) * table[src, j, :])
    return q


def terminal_law(table: np.ndarray, vocab_size: int, length: int,
                 cap: int = STATE_CAP) -> ExactDistribution:
    """Exact law of x_1 produced by the masked CTMC with posterior ``table``."""
    if vocab_size ** length > cap:
        raise SpaceTooLarge(f"|V|^L = {vocab_size ** length} exceeds cap {cap}")
    q = occupation(table, vocab_size, length)
    clean = clean_sequences(vocab_size, length)
    p = q[state_rank(clean, vocab_size)]
    p = np.clip(p, 0.0, None)
    return ExactDistribution(p / p.sum(), vocab_size, length)


def interpolant_occupation(rho: ExactDistribution) -> np.ndarray:
    """Occupation measure implied by the interpolant of ``rho``.

    Normalized like :func:`occupation`: probability of the state given its
    mask pattern, divided by the number of patterns with the same count.
    """
    V, L = rho.vocab_size, rho.length
    cons = consistency(V, L)
    states, n_masked = _level_order(V, L)
    k = L - n_masked
    binom = np.array([math.comb(L, int(kk)) for kk in k], dtype=float)
    return (cons @ rho.probs) / binom


def time_marginal(occ: np.ndarray, vocab_size: int, length: int, s: float) -> np.ndarray:
    """Law of x_t given revealed fraction s = alpha(t), from an occupation measure."""
    states, n_masked = _level_order(vocab_size, length)
    k = length - n_masked
    binom = np.array([math.comb(length, int(kk)) for kk in k], dtype=float)
    return s ** k * (1.0 - s) ** n_masked * binom * occ


def _masked_kl_sums(pi_p, pi_q, occ, vocab_size, length):
    states, n_masked = _level_order(vocab_size, length)
    masked = states == vocab_size
    reach = (occ > 0)[:, None] & masked
    p = pi_p[reach]
    q = pi_q[reach]
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        row = np.argwhere(bad)[0][0]
        s_idx, pos = np.argwhere(reach)[row]
        raise InfiniteKL(f"support violation at state {states[s_idx].tolist()}, position {pos}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    out = np.zeros(masked.shape)
    out[reach] = terms.sum(axis=-1)
    return out.sum(axis=1), n_masked


def path_kl(pi_p: np.ndarray, pi_q: np.ndarray, vocab_size: int, length: int,
            schedule: Schedule | None = None, n_time_points: int = 512,
            rho: ExactDistribution | None = None, quadrature: str = "midpoint") -> float:
    """KL between the path measures of the masked CTMCs driven by two tables.

    Integrates hazard(t) * E_P[sum over masked i of KL(pi_p || pi_q)] over t.
    The state law under P comes from ``rho``'s interpolant when given (then
    ``pi_p`` must be its ground-truth posterior), else from the reveal chain of
    ``pi_p``. ``quadrature`` is 'midpoint' in s = alpha(t), 't' (midpoint in
    raw time, uses ``schedule``) or 'exact' (closed-form Beta integrals).
    """
    V, L = vocab_size, length
    occ = interpolant_occupation(rho) if rho is not None else occupation(pi_p, V, L)
    kl_sum, n_masked = _masked_kl_sums(pi_p, pi_q, occ, V, L)
    live = n_masked > 0
    k = L - n_masked[live]
    m = n_masked[live]
    coeff = occ[live] * kl_sum[live]
    if quadrature == "exact":
        return float(np.sum(coeff / m))
    binom = np.array([math.comb(L, int(kk)) for kk in k], dtype=float)
    nodes = (np.arange(n_time_points) + 0.5) / n_time_points
    if quadrature == "midpoint":
        s = nodes[:, None]
        integrand = s ** k * (1.0 - s) ** (m - 1)
    elif quadrature == "t":
        schedule = schedule or Schedule()
        a = schedule.alpha(nodes)[:, None]
        integrand = schedule.dalpha(nodes)[:, None] * a ** k * (1.0 - a) ** (m - 1)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return float(np.sum(integrand.mean(axis=0) * binom * coeff))


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    path_kl: float
    tolerance: float = 1e-9

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + self.tolerance


def check_kl_bound(theta_table: np.ndarray, rho_a: ExactDistribution, reward, h: float,
                   c: float, pi_a: np.ndarray | None = None) -> BoundReport:
    """Terminal KL to the next tilt versus the scaled excess c-DTM loss."""
    from .objective import exact_cdtm_loss

    V, L = rho_a.vocab_size, rho_a.length
    r = reward_values(reward, rho_a)
    rho_next = tilt(rho_a, r, h)
    rho_theta = terminal_law(theta_table, V, L)
    lhs = kl_divergence(rho_next.probs, rho_theta.probs)
    if pi_a is None:
        pi_a = posterior_table(rho_a)
    star = posterior_table(rho_a, r, h)
    z = float(rho_a.probs @ np.exp(h * r))
    loss = exact_cdtm_loss(theta_table, pi_a, rho_a, r, h, c)
    loss_star = exact_cdtm_loss(star, pi_a, rho_a, r, h, c)
    pkl = path_kl(star, theta_table, V, L, rho=rho_next)
    return BoundReport(lhs=lhs, rhs=(loss - loss_star) / z, path_kl=pkl)
