"""Acceptance checks with independent oracles.

Each ``check_*`` function returns a :class:`CheckResult`.  Hard checks
pass or fail; soft checks (orderings over seeds) may also report
``"warn"``.  The oracles here deliberately share no optimization code with
the library: the solver is cross-checked against golden-section search and
cyclic coordinate descent, backprop against central differences written
out below.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from ._rng import derive_seed, make_rng
from .analysis import (
    FAMILIES,
    ExperimentGrid,
    ablation_l1,
    ablation_retrains,
    decoding_sweep,
    logit_additivity,
    method_comparison,
    pcorr_sweep,
)
from .erm import init_mlp, loss_and_grads
from .preprocessing import Scaler
from .reweighting import balanced_subsample_indices
from .solver import LinearHead, SolverConfig, fit_logreg, kkt_violation, objective
from .synth import SpuriousSpec, generate

__all__ = ["CheckResult", "CHECKS", "run_checks", "golden_section", "golden_binary_oracle",
           "cd_logreg", "finite_difference_grads"]


@dataclass
class CheckResult:
    criterion: int
    name: str
    status: str  # "pass", "warn" or "fail"
    hard: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass" or (self.status == "warn" and not self.hard)

    def line(self) -> str:
        return f"[{self.status.upper()}] criterion {self.criterion}: {self.name} ({self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "name": self.name, "status": self.status,
                "hard": self.hard, "details": self.details, "seconds": self.seconds}


# ----------------------------------------------------------------- oracles

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-9):
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``."""
    a, b = lo, hi
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _binary_reduced_objective(x, y, s, lam):
    """Two-class, one-feature objective in the difference coordinates.

    Softmax over two rows depends only on ``u = w1 - w0`` and
    ``v = b1 - b0``, and ``min |w0| + |w1|`` subject to ``w1 - w0 = u`` is
    ``|u|``, so the multinomial objective reduces exactly to this one.
    """
    sign = np.where(y == 1, 1.0, -1.0)
    n = x.size

    def f(u, v):
        m = sign * (u * x + v)
        return float(np.sum(s * np.logaddexp(0.0, -m)) / n) + lam * abs(u)

    return f


def _bracket(g, start=1.0, limit=1e6):
    r = start
    while r < limit and g(r) < g(r / 2):
        r *= 2
    while r < limit and g(-r) < g(-r / 2):
        r *= 2
    return -r, r


def golden_binary_oracle(x, y, s, lam, tol=1e-9) -> float:
    """Nested golden-section minimum of the reduced two-parameter objective."""
    f = _binary_reduced_objective(x, y, s, lam)

    def inner(u):
        lo, hi = _bracket(lambda v: f(u, v))
        return golden_section(lambda v: f(u, v), lo, hi, tol)[1]

    lo, hi = _bracket(inner)
    return golden_section(inner, lo, hi, tol)[1]


def cd_logreg(X, y, n_classes, s, lam, max_sweeps=5000, tol=1e-13):
    """Cyclic coordinate descent for weighted l1 multinomial regression.

    Each coordinate takes a Newton step on its exact 1-D second-order model
    followed by soft-thresholding, with step halving until the true
    objective does not increase.  Returns ``(W, b, objective)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    W = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    Z = np.zeros((n, n_classes))
    Y = np.eye(n_classes)[y]
    sw = s / n

    def smooth(Zm):
        m = Zm.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(Zm - m).sum(axis=1))
        return float(np.sum(sw * (lse - Zm[np.arange(n), y])))

    def probs(Zm):
        E = np.exp(Zm - Zm.max(axis=1, keepdims=True))
        return E / E.sum(axis=1, keepdims=True)

    F = smooth(Z)
    for _ in range(max_sweeps):
        F_start = F
        for c in range(n_classes):
            for j in range(d + 1):
                col = X[:, j] if j < d else np.ones(n)
                P = probs(Z)
                r = sw * (P[:, c] - Y[:, c])
                g = float(r @ col)
                h = float((sw * P[:, c] * (1 - P[:, c])) @ (col * col)) + 1e-12
                w_old = W[c, j] if j < d else b[c]
                if j < d:
                    z = w_old - g / h
                    w_new = math.copysign(max(abs(z) - lam / h, 0.0), z)
                else:
                    w_new = w_old - g / h
                delta = w_new - w_old
                if delta == 0.0:
                    continue
                pen_old = lam * abs(w_old) if j < d else 0.0
                for _ in range(60):
                    Zt = Z.copy()
                    Zt[:, c] += delta * col
                    w_try = w_old + delta
                    F_try = smooth(Zt) + (lam * abs(w_try) if j < d else 0.0)
                    if F_try <= smooth(Z) + pen_old:
                        break
                    delta *= 0.5
                else:
                    continue
                Z = Zt
                if j < d:
                    W[c, j] = w_old + delta
                else:
                    b[c] = w_old + delta
        F = smooth(Z) + lam * np.abs(W).sum()
        if F_start - F <= tol * max(1.0, abs(F)):
            break
    return W, b, F


def finite_difference_grads(model, X, y, eps=1e-6):
    """Central differences of the mean cross-entropy for every parameter."""
    probe = model.copy()
    out = []
    for p in probe.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp, _ = loss_and_grads(probe, X, y)
            flat[j] = old - eps
            lm, _ = loss_and_grads(probe, X, y)
            flat[j] = old
            gflat[j] = (lp - lm) / (2 * eps)
        out.append(g)
    return out


# ------------------------------------------------------------------ checks

def _timed(fn):
    def wrapper(*args, **kw):
        t = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _solver_instance(rng, tiny: bool):
    if tiny:
        n, d, C = int(rng.integers(8, 60)), 1, 2
    else:
        n, d, C = int(rng.integers(20, 201)), int(rng.integers(2, 21)), int(rng.integers(2, 4))
    X = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0)
    y = np.concatenate([np.arange(C), rng.integers(0, C, n - C)])
    rng.shuffle(y)
    X[:, 0] += 0.8 * y  # some signal so the optimum is not all-zero
    cw = tuple(rng.uniform(0.5, 3.0, C)) if rng.random() < 0.3 else None
    Creg = float(10 ** rng.uniform(-1.5, 1.0))
    return X, y, C, SolverConfig(penalty="l1", C=Creg, class_weights=cw,
                                 max_iter=100_000, tol=1e-8)


@_timed
def check_solver(n_instances: int = 50, seed: int = 0) -> CheckResult:
    """l1 KKT conditions and agreement with independent minimizers."""
    rng = make_rng(seed, "verify", "solver")
    worst_kkt, worst_rel, failures = 0.0, 0.0, []
    for k in range(n_instances):
        tiny = k < 10
        X, y, C, cfg = _solver_instance(rng, tiny)
        head = fit_logreg(X, y, cfg, n_classes=C)
        kkt = kkt_violation(head, X, y, cfg)
        F = objective(head, X, y, cfg)
        s = np.ones(len(y)) if cfg.class_weights is None else np.asarray(cfg.class_weights)[y]
        lam = cfg.lam(len(y))
        if tiny:
            F_ref = golden_binary_oracle(X[:, 0], y, s, lam)
        else:
            F_ref = cd_logreg(X, y, C, s, lam)[2]
        rel = abs(F - F_ref) / max(abs(F_ref), 1e-12)
        worst_kkt, worst_rel = max(worst_kkt, kkt), max(worst_rel, rel)
        if kkt > 1e-4 or rel > 1e-6:
            failures.append({"instance": k, "kkt": kkt, "rel_objective_gap": rel})
    return CheckResult(1, "solver KKT and oracle agreement",
                       "pass" if not failures else "fail", True,
                       {"n_instances": n_instances, "max_kkt": worst_kkt,
                        "max_rel_objective_gap": worst_rel, "failures": failures})


@_timed
def check_gradients(n_pairs: int = 20, seed: int = 0) -> CheckResult:
    """Backprop against central finite differences on random MLPs."""
    rng = make_rng(seed, "verify", "grad")
    worst = 0.0
    for k in range(n_pairs):
        d_in = int(rng.integers(2, 8))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3))))
        C = int(rng.integers(2, 5))
        model = init_mlp((d_in,) + hidden + (C,), derive_seed(seed, "grad", k))
        for b in model.biases:
            b += rng.normal(0, 0.1, b.shape)
        n = int(rng.integers(1, 17))
        X = rng.standard_normal((n, d_in))
        y = rng.integers(0, C, n)
        _, an = loss_and_grads(model, X, y)
        fd = finite_difference_grads(model, X, y)
        for a, f in zip(an, fd):
            scale = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
            worst = max(worst, float((np.abs(a - f) / scale).max()))
    return CheckResult(2, "MLP gradients vs finite differences",
                       "pass" if worst < 1e-4 else "fail", True,
                       {"n_pairs": n_pairs, "max_relative_error": worst})


@_timed
def check_subsampling(n_random: int = 200, seed: int = 0) -> CheckResult:
    """Group-balanced subsample sizes on the reference counts and random ones."""
    def counts_after(counts, s):
        groups = np.repeat(np.arange(len(counts)), counts)
        idx = balanced_subsample_indices(groups, len(counts), s)
        return np.bincount(groups[idx], minlength=len(counts))

    ref = counts_after([3498, 184, 56, 1057], seed)
    ok = ref.tolist() == [56, 56, 56, 56]
    rng = make_rng(seed, "verify", "subsample")
    bad = []
    for k in range(n_random):
        counts = rng.integers(1, 500, size=int(rng.integers(1, 9)))
        got = counts_after(counts, derive_seed(seed, "subsample", k))
        if not np.all(got == counts.min()):
            bad.append({"counts": counts.tolist(), "got": got.tolist()})
    return CheckResult(3, "group-balanced subsample counts",
                       "pass" if ok and not bad else "fail", True,
                       {"reference_output": ref.tolist(), "random_failures": bad[:5]})


@_timed
def check_logit_additivity(n_heads: int = 20, seed: int = 0) -> CheckResult:
    """Exact additivity for arbitrary linear heads with non-trivial scalers."""
    rng = make_rng(seed, "verify", "additivity")
    worst = 0.0
    for k in range(n_heads):
        C = int(rng.integers(2, 6))
        spec = SpuriousSpec(n_classes=C, d_core=int(rng.integers(C, 12)),
                            d_spurious=int(rng.integers(C, 12)), n_train=4 * C * C,
                            n_val=C * C, n_test=200)
        _, _, test = generate(spec, derive_seed(seed, "additivity", k))
        d = spec.d_core + spec.d_spurious
        scaler = Scaler.from_stats(rng.normal(0, 2, d), rng.uniform(0.2, 3.0, d))
        head = LinearHead(rng.normal(0, 3, (C, d)), rng.normal(0, 3, C), scaler)
        worst = max(worst, logit_additivity(head, test)["max_abs_deviation"])
    return CheckResult(4, "logit additivity of linear heads",
                       "pass" if worst < 1e-9 else "fail", True,
                       {"max_abs_deviation": worst})


@_timed
def check_pcorr_table(n_outer_seeds: int = 5, seed: int = 0) -> CheckResult:
    """ERM collapse and DFR recovery across p_corr on the 5-class family."""
    grid = ExperimentGrid(p_corr_values=(0.8, 0.9, 0.95, 0.995, 1.0),
                          n_outer_seeds=n_outer_seeds, family="colormnist5", seed=seed)
    rep = pcorr_sweep(grid)
    S = rep["summary"]
    erm_at_1 = S["1.0"]["erm"]["mean"]
    gap_08 = S["no_corr"]["erm"]["mean"] - S["0.8"]["dfr"]["mean"]
    lift_0995 = S["0.995"]["dfr"]["mean"] - S["0.995"]["erm"]["mean"]
    parts = {"a_erm_wga_at_1.0_le_0.05": erm_at_1 <= 0.05,
             "b_dfr_at_0.8_within_5pts_of_oracle": abs(gap_08) <= 0.05,
             "c_dfr_minus_erm_at_0.995_ge_30pts": lift_0995 >= 0.30}
    gaps = [S[str(p)]["dfr"]["median"] - S[str(p)]["erm"]["median"]
            for p in grid.p_corr_values]
    return CheckResult(5, "p_corr sweep pattern", "pass" if all(parts.values()) else "fail",
                       True, {"parts": parts, "erm_wga_at_1.0": erm_at_1,
                              "oracle_minus_dfr_at_0.8": gap_08,
                              "dfr_minus_erm_at_0.995": lift_0995,
                              "median_gap_monotone": bool(np.all(np.diff(gaps) >= 0)),
                              "summary": S})


@_timed
def check_decoding(n_outer_seeds: int = 5, seed: int = 0) -> CheckResult:
    """Decoded accuracy tracks the Core-Only oracle; decodes past a full correlation."""
    mod = decoding_sweep(ExperimentGrid(p_corr_values=(0.95, 0.99), n_outer_seeds=n_outer_seeds,
                                       family="dominoes_moderate", seed=seed))
    easy = decoding_sweep(ExperimentGrid(p_corr_values=(1.0,), n_outer_seeds=n_outer_seeds,
                                        family="dominoes_easy", seed=seed))
    parts = {}
    for p in ("0.95", "0.99"):
        s = mod["summary"][p]
        parts[f"decoded_within_5pts_of_optimal_at_{p}"] = (
            abs(s["decoded_wga"]["mean"] - s["optimal_wga"]["mean"]) <= 0.05)
    e = easy["summary"]["1.0"]
    parts["decoded_gt_original_at_1.0_easy"] = e["decoded_wga"]["mean"] > e["original_wga"]["mean"]
    return CheckResult(6, "decoded vs Core-Only oracle", "pass" if all(parts.values()) else "fail",
                       True, {"parts": parts, "moderate": mod["summary"], "easy": easy["summary"]})


@_timed
def check_method_ordering(n_outer_seeds: int = 20, seed: int = 0) -> CheckResult:
    """Median WGA ordering of last-layer methods on the imbalanced family."""
    rep = method_comparison("imbalanced", n_outer_seeds=n_outer_seeds, seed=seed)
    med = {k: v["median"] for k, v in rep["summary"].items()}
    chain = ["dfr_val", "group_balanced_train", "crt", "lws"]
    chain_ok = all(med[a] > med[b] for a, b in zip(chain, chain[1:]))
    diff = med["dfr_val"] - med["dfr_train"]
    second = "pass" if diff >= 0 else ("warn" if diff >= -0.01 else "fail")
    status = "fail" if not chain_ok or second == "fail" else second
    return CheckResult(7, "baseline ordering", status, False,
                       {"medians": med, "chain": chain, "chain_ok": chain_ok,
                        "heldout_minus_train_reweighting": diff, "second_status": second})


@_timed
def check_retrain_variance(n_outer_seeds: int = 20, seed: int = 0) -> CheckResult:
    """Averaging more retrains does not increase the spread of WGA."""
    rep = ablation_retrains("celeba_like", n_outer_seeds=n_outer_seeds, seed=seed)
    std = {k: v["std"] for k, v in rep["summary"].items()}
    ok = std["10"] <= std["1"] and std["20"] <= std["1"]
    not_min = min(std, key=std.get) != "1"
    return CheckResult(8, "retrain-count variance trend", "pass" if ok and not_min else "fail",
                       False, {"std": std, "mean": {k: v["mean"] for k, v in rep["summary"].items()}})


@_timed
def check_l1_effect(n_outer_seeds: int = 20, seed: int = 0) -> CheckResult:
    """Tuned l1 beats no penalty when features far outnumber reweighting rows."""
    rep = ablation_l1("high_dim", n_outer_seeds=n_outer_seeds, seed=seed)
    med = float(np.median([r["l1_wga"] - r["none_wga"] for r in rep["rows"]]))
    paired = all(r["same_subsamples"] for r in rep["rows"])
    return CheckResult(9, "l1 effect in the wide-feature regime",
                       "pass" if med >= 0.02 and paired else "fail", True,
                       {"median_difference": med, "paired": paired, "summary": rep["summary"]})


@_timed
def check_reproducibility(seed: int = 0) -> CheckResult:
    """Run every command twice in fresh directories and compare artifacts."""
    from .cli import reproducibility_probe
    mismatches, n_files = reproducibility_probe(seed)
    return CheckResult(10, "byte-identical reruns", "pass" if not mismatches and n_files else "fail",
                       True, {"files_compared": n_files, "mismatches": mismatches})


CHECKS: Dict[int, Callable[..., CheckResult]] = {
    1: check_solver,
    2: check_gradients,
    3: check_subsampling,
    4: check_logit_additivity,
    5: check_pcorr_table,
    6: check_decoding,
    7: check_method_ordering,
    8: check_retrain_variance,
    9: check_l1_effect,
    10: check_reproducibility,
}


def run_checks(criteria=None, seed: int = 0, echo=None) -> List[CheckResult]:
    results = []
    for k in sorted(criteria or CHECKS):
        res = CHECKS[k](seed=seed)
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
