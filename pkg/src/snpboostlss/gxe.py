"""Gene-environment interaction analyses built on polygenic scores.

Linear models use classical (non-robust) standard errors, also when fitted
with inverse-probability weights.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import (
    CollinearityError,
    DataError,
    DegenerateError,
    NumericError,
    SchemaError,
    SeparationError,
)

RESULT_COLUMNS = ["term", "estimate", "se", "t", "p", "ci_lo", "ci_hi"]
LDL_THRESHOLDS = (1.81, 2.58, 3.36, 4.14)


@dataclass
class DesignMatrix:
    names: list
    X: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise DataError(f"design has shape {self.X.shape} but {len(self.names)} column names")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (self.X.shape[0],):
                raise DataError("weights length does not match design rows")
            if not np.all(self.weights > 0):
                raise DataError("weights must be strictly positive")

    @classmethod
    def build(cls, columns: Mapping[str, np.ndarray], weights=None, intercept=True) -> "DesignMatrix":
        names, cols = [], []
        n = None
        if intercept:
            n = len(next(iter(columns.values()))) if columns else None
        for name, col in columns.items():
            col = np.asarray(col, dtype=float)
            if n is not None and col.shape != (n,):
                raise DataError(f"column {name} has length {col.size}, expected {n}")
            n = col.size
            names.append(name)
            cols.append(col)
        if intercept:
            names.insert(0, "intercept")
            cols.insert(0, np.ones(n))
        return cls(names, np.column_stack(cols), weights)


@dataclass
class RegressionFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    df: int
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    rss: float
    extra: dict = field(default_factory=dict)

    def term(self, name: str) -> dict:
        k = self.names.index(name)
        return {
            "term": name,
            "estimate": float(self.coef[k]),
            "se": float(self.se[k]),
            "t": float(self.t[k]),
            "p": float(self.p[k]),
            "ci_lo": float(self.ci_lo[k]),
            "ci_hi": float(self.ci_hi[k]),
        }

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([self.term(n) for n in self.names], columns=RESULT_COLUMNS)

    def summary(self) -> dict:
        return {"df": self.df, "rss": self.rss, "n": int(self.fitted.size),
                "terms": [self.term(n) for n in self.names], **self.extra}


def _dependent_columns(X, names):
    """Rank of X and the columns that add nothing to the columns before them."""
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    tol = max(X.shape) * np.finfo(float).eps
    kept, dependent = [], []
    for k in range(X.shape[1]):
        trial = Xs[:, kept + [k]]
        sv = linalg.svdvals(trial)
        if np.linalg.norm(X[:, k]) == 0 or sv[-1] <= tol * sv[0]:
            dependent.append(names[k])
        else:
            kept.append(k)
    return len(kept), dependent


def ols(design: DesignMatrix, y) -> RegressionFit:
    """(Weighted) least squares with t-based inference.

    Solves ``(X'WX) b = X'Wy``; ``sigma^2 = sum w e^2 / (n - q)``.
    """
    X = design.X
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if y.shape != (n,):
        raise DataError(f"response has length {y.size}, design has {n} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericError("non-finite value in regression inputs")
    if q >= n:
        raise DegenerateError(f"{q} regressors need more than {n} observations")
    sw = np.ones(n) if design.weights is None else np.sqrt(design.weights)
    Xw = X * sw[:, None]
    yw = y * sw
    rank, dependent = _dependent_columns(Xw, design.names)
    if rank < q:
        raise CollinearityError(dependent)
    Q, R = linalg.qr(Xw, mode="economic")
    coef = linalg.solve_triangular(R, Q.T @ yw)
    fitted = X @ coef
    resid = y - fitted
    ew = resid * sw
    rss = float(ew @ ew)
    df = n - q
    s2 = rss / df
    Rinv = linalg.solve_triangular(R, np.eye(q))
    cov = s2 * (Rinv @ Rinv.T)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf))
    p = np.clip(2.0 * stats.t.sf(np.abs(t), df), 0.0, 1.0)
    crit = stats.t.ppf(0.975, df)
    return RegressionFit(list(design.names), coef, se, t, p, df, coef - crit * se, coef + crit * se,
                         fitted, resid, rss)


def _covariate_columns(covariates, n) -> dict:
    if covariates is None:
        return {}
    if isinstance(covariates, pd.DataFrame):
        return {str(c): covariates[c].to_numpy(float) for c in covariates.columns}
    if isinstance(covariates, Mapping):
        return {str(k): np.asarray(v, dtype=float) for k, v in covariates.items()}
    arr = np.asarray(covariates, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != n:
        raise DataError("covariate rows do not match the phenotype")
    return {f"cov{k + 1}": arr[:, k] for k in range(arr.shape[1])}


def gxe_interaction_test(pheno, mprs, vprs_std, env, covariates=None, robust=False,
                         robust_terms: Sequence[str] = ("age", "sex"), weights=None) -> RegressionFit:
    """``Y ~ mPRS + vPRS + E + vPRS x E + covariates``; the ``vPRS:E`` row is the test.

    With ``robust`` the products of vPRS with each of ``robust_terms`` (which
    must be among the covariates) enter as extra adjusters.
    """
    y = np.asarray(pheno, dtype=float)
    v = np.asarray(vprs_std, dtype=float)
    e = np.asarray(env, dtype=float)
    cols = {"mPRS": np.asarray(mprs, dtype=float), "vPRS": v, "E": e, "vPRS:E": v * e}
    cov = _covariate_columns(covariates, y.size)
    cols.update(cov)
    if robust:
        for name in robust_terms:
            if name not in cov:
                raise SchemaError(f"robust adjustment needs covariate {name!r}")
            cols[f"vPRS:{name}"] = v * cov[name]
    return ols(DesignMatrix.build(cols, weights), y)


def quantile_cutpoints(reference, probs) -> np.ndarray:
    # type-7 interpolation
    return np.quantile(np.asarray(reference, dtype=float), probs)


def quintile_groups(scores, reference=None) -> np.ndarray:
    """0-based quintile index of each score; intervals closed on the right."""
    ref = scores if reference is None else reference
    cuts = quantile_cutpoints(ref, [0.2, 0.4, 0.6, 0.8])
    return np.searchsorted(cuts, np.asarray(scores, dtype=float), side="left")


def quintile_effects(pheno, env, vprs, covariates=None, reference=None, min_size=50) -> pd.DataFrame:
    """Effect of the environmental factor within each vPRS quintile."""
    y = np.asarray(pheno, dtype=float)
    e = np.asarray(env, dtype=float)
    groups = quintile_groups(vprs, reference)
    cov = _covariate_columns(covariates, y.size)
    rows = []
    for g in range(5):
        sel = groups == g
        ng = int(sel.sum())
        if ng == 0:
            raise DegenerateError(f"vPRS quintile {g + 1} is empty")
        if ng < min_size:
            warnings.warn(f"vPRS quintile {g + 1} has only {ng} subjects", stacklevel=2)
        cols = {"E": e[sel]}
        cols.update({k: c[sel] for k, c in cov.items()})
        fit_g = ols(DesignMatrix.build(cols), y[sel])
        row = fit_g.term("E")
        row.update(quintile=g + 1, n=ng)
        rows.append(row)
    return pd.DataFrame(rows, columns=["quintile", "n"] + RESULT_COLUMNS)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    mean_a: float
    mean_b: float


def two_sample_ttest(a, b, equal_var=False) -> TTestResult:
    """Two-sided two-sample t-test; Welch's unequal-variance form by default."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise DegenerateError(f"each group needs at least 2 observations, got {na} and {nb}")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return TTestResult(0.0, float(na + nb - 2), 1.0, ma, mb)
        raise DegenerateError("both groups are constant with different means")
    if equal_var:
        df = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    else:
        qa, qb = va / na, vb / nb
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    t = (ma - mb) / se
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return TTestResult(t, float(df), p, ma, mb)


def extreme_groups(scores, reference, q_low=0.25, q_high=0.75):
    """Boolean masks (low, high) for scores below / above reference quantiles."""
    if not 0.0 < q_low < q_high < 1.0:
        raise DataError(f"need 0 < q_low < q_high < 1, got {q_low}, {q_high}")
    lo, hi = quantile_cutpoints(reference, [q_low, q_high])
    s = np.asarray(scores, dtype=float)
    return s < lo, s > hi


def self_controlled_test(delta, vprs, reference, q_low=0.25, q_high=0.75, equal_var=False) -> dict:
    """Compare within-person change between high- and low-vPRS subjects."""
    d = np.asarray(delta, dtype=float)
    low, high = extreme_groups(vprs, reference, q_low, q_high)
    res = two_sample_ttest(d[high], d[low], equal_var=equal_var)
    return {
        "q_low": q_low,
        "q_high": q_high,
        "n_high": int(high.sum()),
        "n_low": int(low.sum()),
        "mean_change_high": res.mean_a,
        "mean_change_low": res.mean_b,
        "t": res.t,
        "df": res.df,
        "p": res.p,
    }


def logistic_propensity(design: DesignMatrix, treated, tol=1e-8, max_iter=50, max_coef=15.0):
    """Logistic regression by iteratively reweighted least squares.

    Returns ``(coefficients, propensity)``. Iterates Newton steps until the
    largest absolute score component falls below ``tol``.
    """
    X = design.X
    t = np.asarray(treated, dtype=float)
    if t.shape != (X.shape[0],):
        raise DataError("treatment vector does not match design rows")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("treatment must be coded 0/1")
    if t.min() == t.max():
        raise DegenerateError("both treatment classes must be present")
    rank, dependent = _dependent_columns(X, design.names)
    if rank < X.shape[1]:
        raise CollinearityError(dependent)
    b = np.zeros(X.shape[1])
    for _ in range(max_iter):
        ps = 1.0 / (1.0 + np.exp(-(X @ b)))
        score = X.T @ (t - ps)
        if np.max(np.abs(score)) < tol:
            break
        w = ps * (1.0 - ps)
        info = X.T @ (X * w[:, None])
        try:
            b = b + linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular; classes look separable") from None
        if np.max(np.abs(b)) > max_coef:
            raise SeparationError(
                f"coefficient magnitude {np.max(np.abs(b)):.3g} exceeds {max_coef}; likely separation"
            )
    else:
        raise NumericError(f"IRLS did not converge in {max_iter} iterations")
    ps = 1.0 / (1.0 + np.exp(-(X @ b)))
    return b, ps


def iptw_weights(propensity, treated, truncate: Optional[tuple] = None) -> np.ndarray:
    """``1/ps`` for treated and ``1/(1 - ps)`` for controls.

    ``truncate=(lo, hi)`` clips weights to those percentiles; off by default.
    """
    ps = np.asarray(propensity, dtype=float)
    t = np.asarray(treated)
    if not np.all((ps > 0.0) & (ps < 1.0)):
        raise DegenerateError("propensity scores must lie strictly inside (0, 1)")
    w = np.where(t == 1, 1.0 / ps, 1.0 / (1.0 - ps))
    if truncate is not None:
        lo, hi = np.percentile(w, truncate)
        w = np.clip(w, lo, hi)
    return w


def treatment_effect(delta_y, treated, baseline_covariates=None, weights=None) -> RegressionFit:
    """Weighted regression of the change score on treatment and baseline covariates."""
    cols = {"treated": np.asarray(treated, dtype=float)}
    cols.update(_covariate_columns(baseline_covariates, len(cols["treated"])))
    return ols(DesignMatrix.build(cols, weights), np.asarray(delta_y, dtype=float))


def subgroup_interaction_test(delta_y, treated, subgroup, covariates=None, weights=None) -> RegressionFit:
    """Treatment-effect model plus ``subgroup`` and ``subgroup:treated``; the latter is the test."""
    t = np.asarray(treated, dtype=float)
    g = np.asarray(subgroup, dtype=float)
    for gv in (0, 1):
        for tv in (0, 1):
            if not np.any((g == gv) & (t == tv)):
                raise DegenerateError(f"no subjects with subgroup={gv} and treated={tv}")
    cols = {"treated": t}
    cols.update(_covariate_columns(covariates, t.size))
    cols["subgroup"] = g
    cols["subgroup:treated"] = g * t
    return ols(DesignMatrix.build(cols, weights), np.asarray(delta_y, dtype=float))


def weighted_cell_means(delta_y, treated, subgroup, weights=None) -> pd.DataFrame:
    """Weighted mean change per (subgroup, arm) cell, for interaction plots."""
    d = np.asarray(delta_y, dtype=float)
    t = np.asarray(treated)
    g = np.asarray(subgroup)
    w = np.ones_like(d) if weights is None else np.asarray(weights, dtype=float)
    rows = []
    for gv in (0, 1):
        for tv in (0, 1):
            sel = (g == gv) & (t == tv)
            mean = float(np.average(d[sel], weights=w[sel])) if sel.any() else float("nan")
            rows.append({"subgroup": gv, "treated": tv, "n": int(sel.sum()), "weighted_mean_change": mean})
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------- cohort tables

REQUIRED_COHORT_COLUMNS = ("id", "pheno_0", "pheno_1", "treated_0", "treated_1")


def eligibility_filter(table: pd.DataFrame, ldl_threshold: float = 3.36,
                       baseline_treated_excluded: bool = True) -> pd.DataFrame:
    """Rows eligible for the emulated parallel-group comparison.

    Keeps subjects with baseline phenotype strictly above ``ldl_threshold``,
    untreated at baseline (unless disabled) and complete at both visits. Adds
    ``arm`` (treatment at revisit) and ``delta`` (revisit minus baseline).
    """
    missing = [c for c in REQUIRED_COHORT_COLUMNS if c not in table.columns]
    if missing:
        raise SchemaError(f"cohort table lacks columns: {', '.join(missing)}")
    complete = table[list(REQUIRED_COHORT_COLUMNS)].notna().all(axis=1)
    keep = complete & (table["pheno_0"] > ldl_threshold)
    if baseline_treated_excluded:
        keep &= table["treated_0"] == 0
    out = table.loc[keep].copy()
    out["arm"] = out["treated_1"].astype(int)
    out["delta"] = out["pheno_1"] - out["pheno_0"]
    return out


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", comment="#", float_precision="round_trip")


def write_results(fit: RegressionFit, path, header_comment: Optional[str] = None, summary_extra=None) -> None:
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fit.table().to_csv(fh, sep="\t", index=False, float_format="%.17g")
    summary = fit.summary()
    if summary_extra:
        summary.update(summary_extra)
    with open(str(path) + ".json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
