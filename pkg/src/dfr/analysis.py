"""Diagnostic experiments on synthetic spurious-correlation data.

Covers decoded accuracy, Core-Only evaluation, logit additivity and the
ablation/sweep harnesses.  Every report is a plain dict with a ``rows``
list (one flat dict per grid cell, written out as CSV) and a ``summary``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ._rng import derive_seed
from .erm import MlpModel, TrainConfig, extract_features, train_erm
from .metrics import GroupMetrics, evaluate
from .preprocessing import Scaler
from .reweighting import (
    DfrConfig,
    crt_baseline,
    group_balanced_sampling_retrain,
    lws_baseline,
    run_dfr,
)
from .solver import LinearHead, predict_labels, predict_logits
from .synth import (
    RawDataset,
    SpuriousSpec,
    ablate_spurious_block,
    bayes_core_accuracy,
    drop_minority,
    generate,
)

__all__ = [
    "Family",
    "FAMILIES",
    "ExperimentGrid",
    "decoded_accuracy",
    "core_only_accuracy",
    "optimal_accuracy",
    "transfer_accuracy",
    "logit_additivity",
    "pcorr_sweep",
    "decoding_sweep",
    "ablation_retrains",
    "ablation_l1",
    "method_comparison",
    "report_to_csv",
    "write_report",
]


@dataclass(frozen=True)
class Family:
    """A synthetic dataset family together with its extractor recipe."""

    spec: SpuriousSpec
    train: TrainConfig
    dfr: DfrConfig = DfrConfig()
    description: str = ""


FAMILIES: Dict[str, Family] = {
    # 5 classes, 5 "colors": a ColorMNIST analog
    "colormnist5": Family(
        SpuriousSpec(n_classes=5, d_core=10, d_spurious=10, core_noise_sigma=1.0,
                     spurious_noise_sigma=0.1, core_margin=3.5, spurious_margin=8.0,
                     p_corr=0.8, n_train=5000, n_val=2000, n_test=5000),
        TrainConfig(epochs=20, batch_size=32, learning_rate=1e-2, weight_decay=1e-3),
        description="5-class analog of ColorMNIST",
    ),
    "dominoes_moderate": Family(
        SpuriousSpec(n_classes=2, d_core=10, d_spurious=10, core_noise_sigma=1.0,
                     spurious_noise_sigma=0.1, core_margin=1.5, spurious_margin=8.0,
                     p_corr=0.95, n_train=4000, n_val=1000, n_test=4000),
        TrainConfig(epochs=30),
        description="binary Dominoes analog, moderate core SNR",
    ),
    "dominoes_easy": Family(
        SpuriousSpec(n_classes=2, d_core=10, d_spurious=10, core_noise_sigma=1.0,
                     spurious_noise_sigma=0.1, core_margin=2.5, spurious_margin=8.0,
                     p_corr=1.0, n_train=4000, n_val=1000, n_test=4000),
        TrainConfig(epochs=30),
        description="binary Dominoes analog, easy core feature",
    ),
    "dominoes_xor": Family(
        SpuriousSpec(n_classes=2, d_core=10, d_spurious=10, core_noise_sigma=0.5,
                     spurious_noise_sigma=0.1, core_margin=1.0, spurious_margin=8.0,
                     p_corr=0.99, n_train=4000, n_val=1000, n_test=4000, core_structure="xor"),
        TrainConfig(epochs=30, hidden=(64, 64)),
        description="binary Dominoes analog with an XOR core a linear probe cannot read from raw input",
    ),
    # small train set and long training: the extractor memorizes train minorities
    "imbalanced": Family(
        SpuriousSpec(n_classes=2, d_core=10, d_spurious=10, core_noise_sigma=1.0,
                     spurious_noise_sigma=0.1, core_margin=1.5, spurious_margin=8.0,
                     p_corr=0.95, n_train=1000, n_val=400, n_test=4000),
        TrainConfig(epochs=100, hidden=(128,)),
        description="Waterbirds-shaped imbalance for the baseline comparison",
    ),
    # validation drawn like train, so subsamples differ between retrains
    "celeba_like": Family(
        SpuriousSpec(n_classes=2, d_core=10, d_spurious=10, core_noise_sigma=1.0,
                     spurious_noise_sigma=0.1, core_margin=1.5, spurious_margin=8.0,
                     p_corr=0.95, n_train=4000, n_val=1000, n_test=4000,
                     val_distribution="train"),
        TrainConfig(epochs=30),
        description="imbalanced reweighting set, as in CelebA validation data",
    ),
    # raw inputs used as embeddings: 310 features, 40 reweighting rows
    "high_dim": Family(
        SpuriousSpec(n_classes=2, d_core=5, d_spurious=300, core_noise_sigma=1.0,
                     spurious_noise_sigma=1.0, core_margin=1.5, spurious_margin=3.0,
                     p_corr=0.95, n_train=8, n_val=40, n_test=4000),
        TrainConfig(epochs=0),
        description="embedding width far above the reweighting set size",
    ),
}


@dataclass(frozen=True)
class ExperimentGrid:
    p_corr_values: Tuple[float, ...] = (0.8, 0.9, 0.95, 0.99, 0.995, 1.0)
    n_outer_seeds: int = 5
    family: str = "colormnist5"
    seed: int = 0

    def __post_init__(self):
        vals = tuple(float(p) for p in self.p_corr_values)
        if any(not 0.0 <= p <= 1.0 for p in vals):
            raise ValueError("p_corr values must lie in [0, 1]")
        if self.n_outer_seeds < 1:
            raise ValueError("n_outer_seeds must be >= 1")
        object.__setattr__(self, "p_corr_values", vals)


def _wga(pred, data) -> float:
    return evaluate(pred, data.labels, data.groups, data.n_groups).worst_group_accuracy


def _metrics(pred, data) -> GroupMetrics:
    return evaluate(pred, data.labels, data.groups, data.n_groups)


def _summ(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "median": float(np.median(v)), "n": int(v.size)}


def decoded_accuracy(model: MlpModel, raw_val: RawDataset, raw_test: RawDataset,
                     config: DfrConfig = DfrConfig()) -> float:
    """Test WGA of a head retrained on the model's features of ``raw_val``."""
    res = run_dfr(None, extract_features(model, raw_val), extract_features(model, raw_test),
                  None, config)
    return res.test_metrics.worst_group_accuracy


def core_only_accuracy(model, raw_test: RawDataset) -> GroupMetrics:
    """The model's own predictions on test inputs with the spurious block zeroed."""
    ablated = ablate_spurious_block(raw_test, "zero_spurious")
    return _metrics(_logits(model, ablated.inputs).argmax(axis=1), ablated)


def optimal_accuracy(raw_train: RawDataset, raw_test: RawDataset, config: TrainConfig) -> float:
    """WGA of a model trained and evaluated on Core-Only data."""
    model = train_erm(ablate_spurious_block(raw_train, "zero_spurious"), config)
    return core_only_accuracy(model, raw_test).worst_group_accuracy


def transfer_accuracy(raw_train: RawDataset, raw_val: RawDataset, raw_test: RawDataset,
                      config: TrainConfig, dfr_config: DfrConfig = DfrConfig()) -> float:
    """Decoded WGA from an extractor trained on the spurious block alone."""
    model = train_erm(ablate_spurious_block(raw_train, "zero_core"), config)
    return decoded_accuracy(model, raw_val, raw_test, dfr_config)


def _logits(model, X) -> np.ndarray:
    if isinstance(model, LinearHead):
        return predict_logits(model, X)
    return model.logits(X)


def logit_additivity(model, raw_test: RawDataset) -> dict:
    """Compare full-input logits with the sum of single-block logits.

    ``deviation = L(x) - (L(core only) + L(spurious only) - L(0))``, where
    ``L(0)`` is the constant term that the sum counts twice.  For any
    affine head the deviation vanishes identically; for a network the
    per-class R^2 of regressing ``L(x)`` on the sum is also reported.
    """
    X = raw_test.inputs
    L_full = _logits(model, X)
    L_core = _logits(model, ablate_spurious_block(raw_test, "zero_spurious").inputs)
    L_sp = _logits(model, ablate_spurious_block(raw_test, "zero_core").inputs)
    L_zero = _logits(model, np.zeros((1, X.shape[1])))
    approx = L_core + L_sp - L_zero
    dev = L_full - approx
    r2 = []
    for c in range(L_full.shape[1]):
        a, b = approx[:, c], L_full[:, c]
        if np.std(a) == 0 or np.std(b) == 0:
            r2.append(1.0 if np.allclose(a, b) else 0.0)
        else:
            r2.append(float(np.corrcoef(a, b)[0, 1] ** 2))
    return {"max_abs_deviation": float(np.abs(dev).max()), "r_squared": r2}


def _erm_head(model: MlpModel) -> LinearHead:
    return LinearHead(model.weights[-1], model.biases[-1], Scaler.identity(model.n_features))


def _family(name_or_family) -> Family:
    return FAMILIES[name_or_family] if isinstance(name_or_family, str) else name_or_family


def pcorr_sweep(grid: ExperimentGrid, family=None, include_oracle: bool = True) -> dict:
    """ERM and DFR worst-group accuracy per ``p_corr``.

    The oracle column trains ERM with no correlation (``p_corr = 1/C``).
    """
    fam = _family(family or grid.family)
    rows = []
    cells = [("no_corr", 1.0 / fam.spec.n_classes)] if include_oracle else []
    cells += [(str(p), p) for p in grid.p_corr_values]
    for label, p in cells:
        for k in range(grid.n_outer_seeds):
            seed = derive_seed(grid.seed, "outer", k)
            spec = replace(fam.spec, p_corr=p)
            tr, va, te = generate(spec, seed)
            model = train_erm(tr, replace(fam.train, seed=seed))
            row = {"p_corr": label, "outer_seed": k, "erm_wga": _wga(model.predict(te.inputs), te)}
            if label != "no_corr":
                row["dfr_wga"] = decoded_accuracy(model, va, te, replace(fam.dfr, seed=seed))
            rows.append(row)
    summary = {}
    for label, _ in cells:
        sel = [r for r in rows if r["p_corr"] == label]
        summary[label] = {"erm": _summ([r["erm_wga"] for r in sel])}
        if label != "no_corr":
            summary[label]["dfr"] = _summ([r["dfr_wga"] for r in sel])
    return {"analysis": "pcorr_sweep", "family": asdict(fam.spec), "rows": rows,
            "summary": summary, "bayes_core_accuracy": bayes_core_accuracy(fam.spec)}


def decoding_sweep(grid: ExperimentGrid, family=None, include_transfer: bool = False) -> dict:
    """Original / Core-Only / decoded / optimal WGA per ``p_corr``."""
    fam = _family(family or grid.family)
    rows = []
    for p in grid.p_corr_values:
        for k in range(grid.n_outer_seeds):
            seed = derive_seed(grid.seed, "outer", k)
            tr, va, te = generate(replace(fam.spec, p_corr=p), seed)
            cfg = replace(fam.train, seed=seed)
            model = train_erm(tr, cfg)
            row = {
                "p_corr": p, "outer_seed": k,
                "original_wga": _wga(model.predict(te.inputs), te),
                "core_only_wga": core_only_accuracy(model, te).worst_group_accuracy,
                "decoded_wga": decoded_accuracy(model, va, te, replace(fam.dfr, seed=seed)),
                "optimal_wga": optimal_accuracy(tr, te, cfg),
            }
            if include_transfer:
                row["transfer_wga"] = transfer_accuracy(tr, va, te, cfg, replace(fam.dfr, seed=seed))
            rows.append(row)
    keys = [k for k in rows[0] if k.endswith("_wga")]
    summary = {str(p): {k: _summ([r[k] for r in rows if r["p_corr"] == p]) for k in keys}
               for p in grid.p_corr_values}
    return {"analysis": "decoding", "family": asdict(fam.spec), "rows": rows,
            "summary": summary, "bayes_core_accuracy": bayes_core_accuracy(fam.spec)}


def ablation_retrains(family="celeba_like", ks: Sequence[int] = (1, 3, 5, 10, 20),
                      n_outer_seeds: int = 20, seed: int = 0) -> dict:
    """WGA mean and std per number of averaged retrains.

    One extractor is trained; outer seeds vary the DFR randomness (tuning
    split and subsamples), as when the method is rerun on fixed features.
    """
    fam = _family(family)
    tr, va, te = generate(fam.spec, seed)
    model = train_erm(tr, replace(fam.train, seed=seed))
    Eva, Ete = extract_features(model, va), extract_features(model, te)
    rows = []
    for k in ks:
        for j in range(n_outer_seeds):
            cfg = replace(fam.dfr, n_retrains=int(k), seed=derive_seed(seed, "outer", j))
            res = run_dfr(None, Eva, Ete, None, cfg)
            rows.append({"n_retrains": int(k), "outer_seed": j,
                         "wga": res.test_metrics.worst_group_accuracy, "chosen_C": res.chosen_C})
    summary = {str(k): _summ([r["wga"] for r in rows if r["n_retrains"] == k]) for k in ks}
    table = [[summary[str(k)]["mean"], summary[str(k)]["std"]] for k in ks]
    return {"analysis": "ablation_retrains", "ks": [int(k) for k in ks], "rows": rows,
            "summary": summary, "table": table}


def ablation_l1(family="high_dim", n_outer_seeds: int = 20, seed: int = 0,
                no_penalty_max_iter: int = 2000) -> dict:
    """Paired DFR runs with tuned l1 and with no penalty, same seeds.

    For families trained with ``epochs=0`` the raw inputs serve as
    embeddings directly.
    """
    fam = _family(family)
    rows = []
    for j in range(n_outer_seeds):
        s = derive_seed(seed, "outer", j)
        tr, va, te = generate(fam.spec, s)
        if fam.train.epochs == 0:
            Eva, Ete = va.to_embeddings(), te.to_embeddings()
        else:
            model = train_erm(tr, replace(fam.train, seed=s))
            Eva, Ete = extract_features(model, va), extract_features(model, te)
        l1 = run_dfr(None, Eva, Ete, None, replace(fam.dfr, seed=s, penalty="l1"))
        none = run_dfr(None, Eva, Ete, None,
                       replace(fam.dfr, seed=s, penalty="none", c_grid=(1.0,),
                               max_iter=no_penalty_max_iter))
        rows.append({"outer_seed": j, "l1_wga": l1.test_metrics.worst_group_accuracy,
                     "none_wga": none.test_metrics.worst_group_accuracy,
                     "chosen_C": l1.chosen_C,
                     "same_subsamples": l1.retrain_seeds == none.retrain_seeds})
    diffs = [r["l1_wga"] - r["none_wga"] for r in rows]
    return {"analysis": "ablation_l1", "rows": rows,
            "summary": {"l1": _summ([r["l1_wga"] for r in rows]),
                        "none": _summ([r["none_wga"] for r in rows]),
                        "difference": _summ(diffs)}}


def method_comparison(family="imbalanced", n_outer_seeds: int = 20, seed: int = 0,
                      include_nm: bool = False) -> dict:
    """Baseline comparison: DFR variants, group-balanced sampling, cRT, LWS.

    Per outer seed one extractor is trained by ERM; every method then
    retrains (or rescales) its last layer.
    """
    fam = _family(family)
    rows = []
    for j in range(n_outer_seeds):
        s = derive_seed(seed, "outer", j)
        tr, va, te = generate(fam.spec, s)
        tcfg = replace(fam.train, seed=s)
        model = train_erm(tr, tcfg)
        Etr, Eva, Ete = (extract_features(model, d) for d in (tr, va, te))

        def wga(head):
            return _wga(predict_labels(head, Ete.features), Ete)

        row = {"outer_seed": j, "erm": _wga(model.predict(te.inputs), te)}
        row["dfr_val"] = run_dfr(Etr, Eva, Ete, None,
                                 replace(fam.dfr, seed=s)).test_metrics.worst_group_accuracy
        row["dfr_train"] = run_dfr(Etr, Eva, Ete, None, replace(fam.dfr, seed=s, variant="tr_tr")
                                   ).test_metrics.worst_group_accuracy
        row["group_balanced_train"] = wga(group_balanced_sampling_retrain(Etr))
        row["group_balanced_val"] = wga(group_balanced_sampling_retrain(Eva))
        row["crt"] = wga(crt_baseline(Etr))
        row["lws"] = wga(lws_baseline(_erm_head(model), Etr)[1])
        if include_nm:
            nm_model = train_erm(drop_minority(tr), tcfg)
            Ntr, Nva, Nte = (extract_features(nm_model, d) for d in (tr, va, te))
            row["dfr_train_nm"] = run_dfr(Ntr, Nva, Nte, None,
                                          replace(fam.dfr, seed=s, variant="tr_nm")
                                          ).test_metrics.worst_group_accuracy
        rows.append(row)
    methods = [k for k in rows[0] if k != "outer_seed"]
    summary = {m: _summ([r[m] for r in rows]) for m in methods}
    return {"analysis": "method_comparison", "rows": rows, "summary": summary}


def report_to_csv(report: dict) -> str:
    rows = report["rows"]
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return out.getvalue()


def write_report(report: dict, out_dir, name: Optional[str] = None) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or report["analysis"]
    jp, cp = out_dir / f"{name}.json", out_dir / f"{name}.csv"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True))
    cp.write_text(report_to_csv(report))
    return jp, cp
