"""Invariant suites over exact enumerable instances.

Each suite returns a list of :class:`Check` records; the registry also tags
which identity each suite exercises so ``verify all`` can assert coverage.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Schedule, make_rng
from .interpolant import SarLayout, hazard_sar
from .model import TabularModel, softmax
from .objective import (DtmConfig, cdtm_loss_and_grad, exact_cdtm, exact_cdtm_loss,
                        grad_variance_report, sar_cdtm_loss_and_grad, tc_target,
                        train_tabular_exact)
from .oracle import (ExactDistribution, all_states, check_kl_bound, esscher_posterior,
                     exact_posterior, interpolant_occupation, kl_divergence, occupation,
                     path_kl, posterior_table, state_rank, terminal_law, tilt,
                     total_variation)
from .trainer import RolloutConfig, build_buffer, run_dtm_exact


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name}\tlhs={self.lhs:.6e}\trhs={self.rhs:.6e}"
                f"\ttol={self.tolerance:.1e}\t{status}")


def _le(name, lhs, rhs, tol):
    return Check(name, float(lhs), float(rhs), tol, bool(lhs <= rhs + tol))


def _close(name, lhs, rhs, tol):
    return Check(name, float(lhs), float(rhs), tol, bool(abs(lhs - rhs) <= tol))


def standard_instance(seed: int = 0, vocab_size: int = 2, length: int = 3):
    """Random full-support rho_1 and a uniform[0, 1] reward table."""
    rng = make_rng(seed)
    rho = ExactDistribution.random(vocab_size, length, rng)
    r = rng.uniform(0.0, 1.0, vocab_size ** length)
    return rho, r


def random_state(rho: ExactDistribution, rng):
    """A masked state reachable under rho, with at least one masked position."""
    x1 = rho.sequences[rng.choice(len(rho.probs), p=rho.probs)]
    keep = rng.random(rho.length) < 0.5
    keep[rng.integers(rho.length)] = False
    return np.where(keep, x1, rho.mask_id)


def safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def perturbed_table(table, rng, scale=0.5):
    return softmax(safe_log(table) + scale * rng.normal(size=table.shape))


def suite_esscher(seed=0, n_instances=200, points=5):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        V, L = int(rng.integers(2, 4)), int(rng.integers(1, 5))
        rho = ExactDistribution.random(V, L, rng, full_support=bool(rng.random() < 0.7))
        r = rng.uniform(-1.0, 1.0, V ** L)
        h = rng.uniform(0.0, 2.0)
        tilted = tilt(rho, r, h)
        for _ in range(points):
            x = random_state(rho, rng)
            i = int(rng.choice(np.flatnonzero(x == V)))
            worst = max(worst, total_variation(esscher_posterior(rho, r, h, x, i),
                                               exact_posterior(tilted, x, i)))
    out = [_le("esscher.posterior_vs_tilted_posterior.max_tv", worst, 0.0, 1e-10)]
    rho, r = standard_instance(seed)
    comp = total_variation(tilt(tilt(rho, r, 0.7), r, 0.4).probs, tilt(rho, r, 1.1).probs)
    out.append(_le("esscher.tilt_composition.tv", comp, 0.0, 1e-14))
    phi = rng.normal(size=len(r))
    w = rho.probs * np.exp(0.8 * r)
    out.append(_close("esscher.change_of_measure", tilt(rho, r, 0.8).expect(phi),
                      float(w @ phi / w.sum()), 1e-12))
    rt = total_variation(terminal_law(posterior_table(rho), 2, 3).probs, rho.probs)
    out.append(_le("esscher.terminal_round_trip.tv", rt, 0.0, 1e-10))
    return out


def suite_unbiasedness(seed=0):
    rho, r = standard_instance(seed, 2, 3)
    V, L = 2, 3
    h = 0.9
    pi_a = posterior_table(rho)
    w = np.exp(h * r)
    worst = 0.0
    for x in all_states(V, L):
        if not np.any(x == V):
            continue
        cons = np.all((x == V) | (rho.sequences == x), axis=1)
        post = rho.probs * cons
        if post.sum() == 0:
            continue
        post = post / post.sum()
        for i in np.flatnonzero(x == V):
            rows = pi_a[state_rank(x, V)]
            target = sum(p * wi * np.eye(V)[x1[i]] for p, wi, x1 in zip(post, w, rho.sequences))
            for c in (0.0, 0.5, 1.0, 2.0):
                mix = sum(p * wi * tc_target(x, i, x1, rows, ri, h, c)
                          for p, wi, ri, x1 in zip(post, w, r, rho.sequences))
                worst = max(worst, float(np.abs(mix - target).max()))
    return [_le("unbiasedness.weighted_target_mean.max_abs", worst, 0.0, 1e-12)]


def suite_variance(seed=0, h_values=(0.0, 0.01, 0.05, 0.1)):
    rho, r = standard_instance(seed)
    rng = make_rng(seed + 1)
    pi_a = posterior_table(rho)
    theta = perturbed_table(pi_a, rng, 0.3)
    out = []
    for rec in grad_variance_report(rho, r, theta, h_values, pi_a):
        out.append(_le(f"variance.h={rec['h']:g}.var_G1_le_var_G0", rec["var_G1"],
                       rec["var_G0"], 0.0))
        if rec["h"] == 0.0:
            gap = rec["var_G0"] - rec["var_G1"]
            out.append(_close("variance.h=0.gap_equals_conditional_variance", gap,
                              rec["total_variance_term"], 1e-10))
    return out


def kl_bound_instance(rng):
    V, L = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    rho = ExactDistribution.random(V, L, rng)
    r = rng.uniform(-1.0, 1.0, V ** L)
    h = rng.uniform(0.05, 1.0)
    c = float(rng.choice([0.0, 1.0]))
    star = posterior_table(rho, r, h)
    theta = perturbed_table(star, rng, rng.uniform(0.1, 1.0))
    return rho, r, h, c, theta


def suite_kl_bound(seed=0, n_instances=100):
    rng = make_rng(seed)
    worst_bound = -np.inf
    worst_dp = -np.inf
    for _ in range(n_instances):
        rho, r, h, c, theta = kl_bound_instance(rng)
        rep = check_kl_bound(theta, rho, r, h, c)
        worst_bound = max(worst_bound, rep.lhs - rep.rhs)
        worst_dp = max(worst_dp, rep.lhs - rep.path_kl)
    rho, r = standard_instance(seed)
    star = posterior_table(rho, r, 0.5)
    at_star = check_kl_bound(star, rho, r, 0.5, 1.0)
    return [
        _le("kl_bound.max(terminal_kl - scaled_excess_loss)", worst_bound, 0.0, 1e-9),
        _le("kl_bound.max(terminal_kl - path_kl)", worst_dp, 0.0, 1e-9),
        _close("kl_bound.at_minimizer.lhs", at_star.lhs, 0.0, 1e-10),
        _close("kl_bound.at_minimizer.rhs", at_star.rhs, 0.0, 1e-10),
    ]


def trajectory_kl(pi_p, pi_q, V, L) -> float:
    """Path KL as an explicit sum over reveal orders and revealed tokens."""
    total = 0.0
    for order in itertools.permutations(range(L)):
        for tokens in itertools.product(range(V), repeat=L):
            x = np.full(L, V)
            logp = logq = 0.0
            for j in order:
                rank = state_rank(x, V)
                pp, qq = pi_p[rank, j, tokens[j]], pi_q[rank, j, tokens[j]]
                if pp == 0:
                    logp = -np.inf
                    break
                logp += math.log(pp)
                logq += math.log(qq)
                x[j] = tokens[j]
            if np.isfinite(logp):
                total += math.exp(logp) / math.factorial(L) * (logp - logq)
    return total


def suite_path_kl(seed=0):
    rng = make_rng(seed)
    out = []
    rho, r = standard_instance(seed)
    p = posterior_table(rho)
    q = perturbed_table(p, rng)
    out.append(_close("path_kl.identical_families", path_kl(p, p, 2, 3), 0.0, 1e-15))
    exact = path_kl(p, q, 2, 3, quadrature="exact")
    out.append(_close("path_kl.midpoint_vs_closed_form", path_kl(p, q, 2, 3), exact,
                      1e-6 * exact))
    out.append(_close("path_kl.time_quadrature_vs_closed_form",
                      path_kl(p, q, 2, 3, Schedule("poly", 2.0), 4096, quadrature="t"),
                      exact, 1e-5 * exact))
    out.append(_close("path_kl.chain_vs_interpolant_marginals",
                      path_kl(p, q, 2, 3, rho=rho, quadrature="exact"), exact, 1e-12))
    out.append(_close("path_kl.trajectory_sum", trajectory_kl(p, q, 2, 3), exact, 1e-12))
    occ = np.max(np.abs(occupation(p, 2, 3) - interpolant_occupation(rho)))
    out.append(_le("path_kl.occupation_round_trip", occ, 0.0, 1e-12))
    rho1 = ExactDistribution.random(3, 1, rng)
    p1 = posterior_table(rho1)
    q1 = perturbed_table(p1, rng)
    out.append(_close("path_kl.single_token", path_kl(p1, q1, 3, 1),
                      kl_divergence(p1[-1, 0], q1[-1, 0]), 1e-12))
    return out


def suite_minimizer(seed=0):
    rho, r = standard_instance(seed, 2, 2)
    h = 0.8
    pi_a = posterior_table(rho)
    star = posterior_table(rho, r, h)
    rng = make_rng(seed)
    init = rng.normal(size=star.shape)
    out = []
    trained = {}
    for c in (0.0, 1.0):
        logits, _ = train_tabular_exact(init, pi_a, rho, r, h, c)
        _, grad, mass = exact_cdtm(logits, pi_a, rho, r, h, c)
        live = mass > 0
        tv = 0.5 * np.abs(softmax(logits) - star)[live].sum(axis=-1).max()
        out.append(_le(f"minimizer.c={c:g}.max_row_tv_to_esscher", tv, 0.0, 1e-6))
        trained[c] = softmax(logits)
        _, g_star, _ = exact_cdtm(safe_log(star), pi_a, rho, r, h, c)
        out.append(_le(f"minimizer.c={c:g}.grad_norm_at_esscher",
                       float(np.abs(g_star[live]).max()), 0.0, 1e-12))
    live = exact_cdtm(safe_log(star), pi_a, rho, r, h, 1.0)[2] > 0
    tv01 = 0.5 * np.abs(trained[0.0] - trained[1.0])[live].sum(axis=-1).max()
    out.append(_le("minimizer.control_variate_invariance.max_row_tv", tv01, 0.0, 1e-5))
    # curvature along sum-zero directions of every live row, by second differences
    base = exact_cdtm_loss(star, pi_a, rho, r, h, 1.0)
    min_curv = np.inf
    for s_idx, i in zip(*np.nonzero(live)):
        for v in range(rho.vocab_size - 1):
            d = np.zeros_like(star)
            d[s_idx, i, v], d[s_idx, i, v + 1] = 1.0, -1.0
            eps = 1e-3
            lp = exact_cdtm(safe_log(star) + eps * d, pi_a, rho, r, h, 1.0)[0]
            lm = exact_cdtm(safe_log(star) - eps * d, pi_a, rho, r, h, 1.0)[0]
            min_curv = min(min_curv, (lp + lm - 2 * base) / eps ** 2)
    out.append(Check("minimizer.min_tangent_curvature_positive", min_curv, 0.0, 0.0,
                     bool(min_curv > 0)))
    rng2 = make_rng(seed + 7)
    perturbed = min(exact_cdtm_loss(perturbed_table(star, rng2, 0.05), pi_a, rho, r, h, 1.0)
                    - base for _ in range(20))
    out.append(Check("minimizer.perturbed_loss_excess", perturbed, 0.0, 0.0,
                     bool(perturbed > 0)))
    return out


def sar_mc_comparison(seed=0, n_samples=100_000, chunk=10_000):
    """Mean and standard error of the any-order and one-block SAR Monte Carlo
    losses under paired seeds, plus the exact expected loss."""
    rho, r = standard_instance(seed)
    h, c = 0.6, 1.0
    pi_a_tab = posterior_table(rho)
    theta = TabularModel.from_probs(perturbed_table(pi_a_tab, make_rng(seed), 0.3))
    pi_a = TabularModel.from_probs(pi_a_tab)
    cfg = DtmConfig(c=c, h=h, s_cap=1e-9)
    layout = SarLayout(3, 3)
    vals = {"any": [], "sar": []}
    for k in range(n_samples // chunk):
        idx = make_rng([seed, 1, k]).choice(len(rho.probs), size=chunk, p=rho.probs)
        x1, rb = rho.sequences[idx], r[idx]
        info = cdtm_loss_and_grad(x1, rb, pi_a, theta, cfg, Schedule(), make_rng([seed, 2, k]))[2]
        vals["any"].append(info["per_item"])
        info = sar_cdtm_loss_and_grad(x1, rb, pi_a, theta, cfg, layout, Schedule(),
                                      make_rng([seed, 2, k]))[2]
        vals["sar"].append(info["per_item"])
    exact = exact_cdtm_loss(theta.probs_table(), pi_a_tab, rho, r, h, c)
    out = {}
    for key, chunks in vals.items():
        v = np.concatenate(chunks)
        out[key] = (float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))))
    return out, exact


def suite_sar(seed=0):
    out = []
    sched = Schedule()
    layout = SarLayout(8, 2)
    ts = np.linspace(0.0, 0.999, 997)
    err = 0.0
    for t in ts:
        b, u = layout.active(t)
        if u >= 1 - 1e-9:
            continue
        err = max(err, abs(hazard_sar(layout, sched, t) - 4 * 1.0 / (1.0 - u)))
    out.append(_le("sar.hazard_formula.max_abs", err, 0.0, 1e-12))
    # exact SAR minimizer equals the Esscher posterior on SAR-reachable states
    rho, r = standard_instance(seed, 2, 4)
    lay = SarLayout(4, 2)
    pi_a = posterior_table(rho)
    star = posterior_table(rho, r, 0.7)
    logits, _ = train_tabular_exact(np.zeros_like(star), pi_a, rho, r, 0.7, 1.0, lay)
    _, _, mass = exact_cdtm(logits, pi_a, rho, r, 0.7, 1.0, lay)
    live = mass > 0
    tv = 0.5 * np.abs(softmax(logits) - star)[live].sum(axis=-1).max()
    out.append(_le("sar.exact_minimizer_vs_esscher.max_row_tv", tv, 0.0, 1e-8))
    # with one block the SAR objective is the any-order objective
    one = exact_cdtm_loss(perturbed_table(star, make_rng(seed), 0.3), pi_a, rho, r, 0.7, 1.0,
                          SarLayout(4, 4))
    anyo = exact_cdtm_loss(perturbed_table(star, make_rng(seed), 0.3), pi_a, rho, r, 0.7, 1.0)
    out.append(_close("sar.one_block_exact_loss_equals_any_order", one, anyo, 1e-12))
    mc, exact = sar_mc_comparison(seed)
    (m_any, se_any), (m_sar, se_sar) = mc["any"], mc["sar"]
    se = math.hypot(se_any, se_sar)
    out.append(_le("sar.one_block_mc_vs_any_order_mc.abs_diff", abs(m_sar - m_any), 4 * se, 0.0))
    out.append(_le("sar.one_block_mc_vs_exact.abs_diff", abs(m_sar - exact), 4 * se_sar, 0.0))
    # forward calls during rollouts
    model = TabularModel.from_probs(pi_a)
    cfg = RolloutConfig(steps=4, block=2)
    buf = build_buffer(model, lambda x: 0.0, 16, cfg, make_rng(seed))
    out.append(_close("sar.forward_calls_equal_N_times_T", buf.forward_calls, 16 * 4, 0))
    return out


def suite_anneal(seed=0, A=2.0, h=0.25):
    rho, r = standard_instance(seed)
    base = posterior_table(rho)
    final, logs = run_dtm_exact(base, rho, r, A, h, c=1.0)
    tv = total_variation(terminal_law(final, 2, 3).probs, tilt(rho, r, A).probs)
    out = [_le("anneal.terminal_law_vs_tilt.tv", tv, 0.0, 1e-4)]
    means = [rec["mean_reward"] for rec in logs]
    drops = max([a - b for a, b in zip(means, means[1:])] + [0.0])
    out.append(_le("anneal.mean_reward_nondecreasing.max_drop", drops, 0.0, 1e-12))
    return out


SUITES = {
    "esscher": (suite_esscher, {"conditional-esscher", "tilt-composition", "change-of-measure"}),
    "unbiasedness": (suite_unbiasedness, {"unbiased-target"}),
    "variance": (suite_variance, {"variance-ordering"}),
    "kl-bound": (suite_kl_bound, {"kl-bound", "data-processing"}),
    "path-kl": (suite_path_kl, {"path-kl-decomposition"}),
    "minimizer": (suite_minimizer, {"cdtm-minimizer", "control-variate-invariance"}),
    "sar": (suite_sar, {"sar-hazard", "sar-objective"}),
    "anneal": (suite_anneal, {"annealing"}),
}

REQUIRED_COVERAGE = {
    "conditional-esscher", "unbiased-target", "cdtm-minimizer", "variance-ordering",
    "kl-bound", "path-kl-decomposition", "control-variate-invariance", "sar-hazard",
    "sar-objective",
}


def run_suites(names, seed: int = 0) -> list[Check]:
    if "all" in names:
        names = list(SUITES)
        covered = set().union(*(SUITES[n][1] for n in names))
        missing = REQUIRED_COVERAGE - covered
        if missing:
            raise RuntimeError(f"suite registry misses {sorted(missing)}")
    checks = []
    for name in names:
        fn, _ = SUITES[name]
        checks.extend(fn(seed=seed))
    return checks
