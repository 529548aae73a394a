"""Evaluation of fitted models against simulated truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DegenerateError


def _pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(ac @ ac)
    sbb = float(bc @ bc)
    if not (saa > 0.0 and sbb > 0.0):
        raise DegenerateError("correlation undefined for a constant vector")
    return float(ac @ bc) / math.sqrt(saa * sbb)


def r_squared(y_true, y_pred) -> float:
    """Squared Pearson correlation between observed and predicted values."""
    return _pearson(y_true, y_pred) ** 2


def sigma_correlation(sigma_true, sigma_hat) -> float:
    return _pearson(sigma_true, sigma_hat)


def selection_rates(selected, truth, p: int) -> tuple[float, float]:
    """True positive and true negative rates of a selected variant set."""
    selected, truth = set(selected), set(truth)
    if not truth:
        raise DegenerateError("true positive rate undefined without informative variants")
    if len(truth) >= p:
        raise DegenerateError("true negative rate undefined when every variant is informative")
    tp = len(selected & truth)
    fp = len(selected - truth)
    return tp / len(truth), (p - len(truth) - fp) / (p - len(truth))


@dataclass
class EvalReport:
    r2: float
    test_nll: float
    n_selected_mu: int
    n_selected_sigma: int
    n_shared: int
    tpr_mu: float
    tnr_mu: float
    tpr_sigma: float
    tnr_sigma: float
    sigma_corr: float
    eta_corr: float = float("nan")
    pct_selected_mu_of_p: float = float("nan")
    pct_selected_sigma_of_p: float = float("nan")
    pct_selected_mu_of_truth: float = float("nan")
    pct_selected_sigma_of_truth: float = float("nan")
    fit_seconds: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def tsv_row(self) -> str:
        return "\t".join(repr(getattr(self, c)) for c in self.columns())

    @classmethod
    def from_tsv_row(cls, row: str) -> "EvalReport":
        vals = row.rstrip("\n").split("\t")
        kw = {}
        for f, v in zip(fields(cls), vals):
            kw[f.name] = int(v) if f.type in ("int", int) else float(v)
        return cls(**kw)


def evaluate(model, cohort, split: str = "test", fit_seconds: float = float("nan")) -> EvalReport:
    """Metrics of ``model`` on one split of a simulated cohort."""
    from .model import nll_loss, predict

    idx = cohort.indices(split)
    G = cohort.matrix.subset_samples(idx)
    pred = predict(model, G)
    y = cohort.baseline_y[idx]
    sig_true = cohort.sigma_true[idx]
    p = cohort.matrix.p
    sel_mu, sel_sigma = model.selected_mu, model.selected_sigma
    tpr_mu, tnr_mu = selection_rates(sel_mu, cohort.true_beta, p)
    tpr_s, tnr_s = selection_rates(sel_sigma, cohort.true_gamma, p)
    try:
        s_corr = sigma_correlation(sig_true, pred.sigma)
        e_corr = sigma_correlation(np.log(sig_true), pred.eta_sigma)
    except DegenerateError:
        s_corr = e_corr = 0.0
    try:
        r2 = r_squared(y, pred.mu)
    except DegenerateError:
        r2 = 0.0
    return EvalReport(
        r2=r2,
        test_nll=nll_loss(y, pred),
        n_selected_mu=len(sel_mu),
        n_selected_sigma=len(sel_sigma),
        n_shared=len(sel_mu & sel_sigma),
        tpr_mu=tpr_mu,
        tnr_mu=tnr_mu,
        tpr_sigma=tpr_s,
        tnr_sigma=tnr_s,
        sigma_corr=s_corr,
        eta_corr=e_corr,
        pct_selected_mu_of_p=100.0 * len(sel_mu) / p,
        pct_selected_sigma_of_p=100.0 * len(sel_sigma) / p,
        pct_selected_mu_of_truth=100.0 * len(sel_mu) / len(cohort.true_beta),
        pct_selected_sigma_of_truth=100.0 * len(sel_sigma) / len(cohort.true_gamma),
        fit_seconds=fit_seconds,
    )
