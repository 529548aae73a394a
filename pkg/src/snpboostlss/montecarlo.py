"""Monte-Carlo calibration and power harnesses for the GxE battery.

Each replicate draws from its own Philox stream keyed by (seed, replicate),
so replicate ``r`` is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .gxe import (
    DesignMatrix,
    gxe_interaction_test,
    iptw_weights,
    logistic_propensity,
    quintile_effects,
    subgroup_interaction_test,
    treatment_effect,
)
from .model import standardize


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(r,))))


def _gxe_data(rng, n, interaction, env_kind="binary"):
    mprs = rng.standard_normal(n)
    vprs = standardize(v := rng.standard_normal(n), v)
    env = rng.binomial(1, 0.3, n).astype(float) if env_kind == "binary" else rng.integers(0, 3, n).astype(float)
    age = rng.uniform(40, 70, n)
    sex = rng.binomial(1, 0.5, n).astype(float)
    y = (0.5 * mprs + 0.1 * vprs - 0.8 * env + 0.01 * age + 0.2 * sex
         + interaction * vprs * env + rng.standard_normal(n))
    return y, mprs, vprs, env, {"age": age, "sex": sex}


@dataclass
class CalibrationResult:
    pvalues: np.ndarray
    estimates: np.ndarray
    alpha: float = 0.05

    @property
    def rejection_rate(self) -> float:
        return float(np.mean(self.pvalues < self.alpha))

    @property
    def ks_pvalue(self) -> float:
        return float(stats.kstest(self.pvalues, "uniform").pvalue)

    @property
    def mean_estimate(self) -> float:
        return float(np.mean(self.estimates))

    def summary(self) -> dict:
        return {
            "replicates": int(self.pvalues.size),
            "rejection_rate": self.rejection_rate,
            "ks_pvalue": self.ks_pvalue,
            "mean_estimate": self.mean_estimate,
        }


def gxe_replicates(replicates=1000, n=2000, interaction=0.0, seed=2024, robust=False) -> CalibrationResult:
    """vPRS x E estimates and p-values over simulated data sets."""
    pv, est = np.empty(replicates), np.empty(replicates)
    for r in range(replicates):
        y, m, v, e, cov = _gxe_data(replicate_rng(seed, r), n, interaction)
        row = gxe_interaction_test(y, m, v, e, cov, robust=robust).term("vPRS:E")
        pv[r], est[r] = row["p"], row["estimate"]
    return CalibrationResult(pv, est)


def quintile_replicates(replicates=200, n=5000, interaction=0.0, seed=77):
    """Per-replicate quintile tables of the environmental effect."""
    out = []
    for r in range(replicates):
        y, m, v, e, cov = _gxe_data(replicate_rng(seed, r), n, interaction)
        out.append(quintile_effects(y, e, v, {"mPRS": m, **cov}))
    return out


def _confounded_trial(rng, n, effect=-1.0):
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    lin = -0.3 + 1.0 * x1 - 0.7 * x2
    treated = rng.binomial(1, 1.0 / (1.0 + np.exp(-lin))).astype(float)
    delta = effect * treated - 0.8 * x1 + 0.5 * x2 + rng.standard_normal(n)
    return delta, treated, np.column_stack([x1, x2])


def iptw_bias(replicates=200, n=2000, effect=-1.0, seed=11) -> dict:
    """Bias of weighted and unweighted treatment-effect estimates under measured confounding.

    Confounders drive both treatment uptake and the change score; the outcome
    model omits them, so only the weighting can remove their influence.
    """
    wt, uw = np.empty(replicates), np.empty(replicates)
    for r in range(replicates):
        delta, treated, conf = _confounded_trial(replicate_rng(seed, r), n, effect)
        _, ps = logistic_propensity(DesignMatrix.build({"x1": conf[:, 0], "x2": conf[:, 1]}), treated)
        w = iptw_weights(ps, treated)
        wt[r] = treatment_effect(delta, treated, None, w).term("treated")["estimate"]
        uw[r] = treatment_effect(delta, treated, None, None).term("treated")["estimate"]
    return {
        "replicates": replicates,
        "weighted_mean": float(wt.mean()),
        "unweighted_mean": float(uw.mean()),
        "weighted_abs_bias": float(abs(wt.mean() - effect)),
        "unweighted_abs_bias": float(abs(uw.mean() - effect)),
        "weighted_closer_fraction": float(np.mean(np.abs(wt - effect) < np.abs(uw - effect))),
    }


def subgroup_power(replicates=500, n=1200, effects=(-1.0, -0.3), seed=5, noise_sd=1.0, alpha=0.05) -> dict:
    """Share of replicates in which the subgroup x treatment interaction is detected.

    Subgroup 1 has effect ``effects[0]``, subgroup 0 ``effects[1]``; equal
    effects give the null calibration.
    """
    pv = np.empty(replicates)
    for r in range(replicates):
        rng = replicate_rng(seed, r)
        g = rng.binomial(1, 0.5, n).astype(float)
        t = rng.binomial(1, 0.5, n).astype(float)
        base = rng.normal(4.0, 0.5, n)
        eff = np.where(g == 1, effects[0], effects[1])
        delta = eff * t - 0.3 * (base - 4.0) + noise_sd * rng.standard_normal(n)
        pv[r] = subgroup_interaction_test(delta, t, g, {"baseline": base}).term("subgroup:treated")["p"]
    return {"replicates": replicates, "power": float(np.mean(pv < alpha)),
            "ks_pvalue": float(stats.kstest(pv, "uniform").pvalue)}
