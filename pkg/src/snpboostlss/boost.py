"""Batch-wise cyclical component-wise boosting for the Gaussian location-scale model.

The outer loop screens all variants against the current working residuals of
the mean and of the log standard deviation and keeps the ``p_batch`` best per
parameter. The inner loop cycles mean update, then scale update, on those
batches. A parameter stops early within a batch once its best in-batch
correlation drops below the best correlation that was left outside the batch.
The final model is the path truncated at the iteration of lowest validation
loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DataError, DegenerateError
from .genotype import GenotypeMatrix, correlation_scan, imputed_columns
from .model import (
    ETA_CLAMP,
    MU,
    SIGMA,
    LssModel,
    UpdateRecord,
    nll_terms,
)

log = logging.getLogger(__name__)

FIXED, ADAPTIVE = "fixed", "adaptive"


@dataclass(frozen=True)
class BoostConfig:
    p_batch: int = 1000
    m_batch: int = 1000
    b_max: int = 50
    b_stop: int = 2
    step_mode: str = ADAPTIVE
    nu: float = 0.1
    lam: float = 0.1
    nu_sigma: float = 0.05
    eta_clamp: tuple = ETA_CLAMP
    sigma_model_enabled: bool = True

    def validate(self, p: Optional[int] = None) -> "BoostConfig":
        for name in ("p_batch", "m_batch", "b_max", "b_stop"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        for name in ("nu", "lam", "nu_sigma"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be positive, got {val!r}")
        if self.step_mode not in (FIXED, ADAPTIVE):
            raise ConfigError(f"step_mode must be 'fixed' or 'adaptive', got {self.step_mode!r}")
        lo, hi = self.eta_clamp
        if not lo < hi:
            raise ConfigError(f"eta_clamp must be increasing, got {self.eta_clamp!r}")
        if p is not None and self.p_batch > p:
            raise ConfigError(f"p_batch={self.p_batch} exceeds the number of variants p={p}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_clamp"] = list(self.eta_clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoostConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "eta_clamp" in known:
            known["eta_clamp"] = tuple(known["eta_clamp"])
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown boosting options: {', '.join(sorted(unknown))}")
        return cls(**known)


@dataclass
class Batch:
    parameter: str
    variant_indices: list
    c_stop: float
    early_stop_flag: bool = False


@dataclass
class FitTrace:
    valid_loss0: float = float("nan")
    train_loss0: float = float("nan")
    iterations: list = field(default_factory=list)
    batches: list = field(default_factory=list)

    @property
    def valid_loss(self) -> list:
        return [it["valid_loss"] for it in self.iterations]

    @property
    def train_loss(self) -> list:
        return [it["train_loss"] for it in self.iterations]

    def write_tsv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w") as fh:
            if header_comment is not None:
                fh.write(f"# {header_comment}\n")
            fh.write("iteration\tparameter\tvariant\ttrain_loss\tvalid_loss\n")
            fh.write(f"0\t-\t-\t{self.train_loss0!r}\t{self.valid_loss0!r}\n")
            for it in self.iterations:
                for par in (MU, SIGMA):
                    vid = it[par] if it[par] is not None else "-"
                    fh.write(
                        f"{it['m']}\t{par}\t{vid}\t{it['train_loss']!r}\t{it['valid_loss']!r}\n"
                    )


TIE_TOL = 1e-12


def _rank_desc(scores) -> np.ndarray:
    """Indices by descending score; scores within ``TIE_TOL`` count as tied and go to the lower index.

    Identical columns can pick up last-bit differences from blocked matrix
    products, so exact comparison would break ties arbitrarily.
    """
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    # consecutive near-equal scores form one tie group
    group = np.concatenate(([0], np.cumsum(s[:-1] - s[1:] > TIE_TOL)))
    return order[np.lexsort((order, group))]


def build_batch(matrix: GenotypeMatrix, residual, p_batch: int, parameter: str = MU, threads: int = 1) -> Batch:
    """Top-``p_batch`` variants by absolute correlation with ``residual``.

    Ties go to the lower variant index. ``c_stop`` is the best absolute
    correlation among the variants left out (0 when none are).
    """
    if p_batch > matrix.p:
        raise ConfigError(f"p_batch={p_batch} exceeds p={matrix.p}")
    corr = np.abs(correlation_scan(matrix, residual, threads=threads))
    order = _rank_desc(corr)
    inside = order[:p_batch]
    c_stop = float(corr[order[p_batch]]) if p_batch < matrix.p else 0.0
    return Batch(parameter, [int(j) for j in inside], c_stop)


def adaptive_step_mu(fitted, sigma_hat, lam: float) -> float:
    """Step length ``lam * sum(h^2) / sum(h^2 / sigma^2)`` for a mean update.

    ``fitted`` holds the base-learner values (intercept included) per sample.
    Falls back to ``lam`` when the base-learner is identically zero.
    """
    h2 = np.square(np.asarray(fitted, dtype=float))
    num = float(h2.sum())
    den = float((h2 / np.square(np.asarray(sigma_hat, dtype=float))).sum())
    if num == 0.0 or den == 0.0:
        return float(lam)
    return float(lam) * num / den


def select_m_stop(valid_losses) -> int:
    """1-based iteration with the smallest validation loss, earliest on ties."""
    losses = list(valid_losses.valid_loss if isinstance(valid_losses, FitTrace) else valid_losses)
    if not losses:
        raise ValueError("no iterations recorded")
    return int(np.argmin(np.asarray(losses, dtype=float))) + 1


class _BatchData:
    """Centered imputed columns of one batch, kept in ascending variant order."""

    def __init__(self, matrix: GenotypeMatrix, batch: Batch):
        self.batch = batch
        self.idx = np.sort(np.asarray(batch.variant_indices, dtype=np.intp))
        cols = imputed_columns(matrix, self.idx)
        self.means = cols.mean(axis=1)
        self.centered = cols - self.means[:, None]
        self.ss = np.einsum("ij,ij->i", self.centered, self.centered)

    def best(self, residual):
        """(position in batch, |corr|, slope, intercept) of the best in-batch fit."""
        rbar = residual.mean()
        rc = residual - rbar
        srr = float(rc @ rc)
        dots = self.centered @ rc
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.abs(dots) / np.sqrt(self.ss * srr)
        corr[~(self.ss > 0.0)] = 0.0
        if not srr > 0.0:
            corr[:] = 0.0
        k = int(np.flatnonzero(corr >= corr.max() - TIE_TOL)[0])
        slope = float(dots[k] / self.ss[k]) if self.ss[k] > 0 else 0.0
        return k, float(corr[k]), slope, float(rbar) - slope * float(self.means[k]), corr


class _State:
    """Linear predictors of one data set, updated in place."""

    def __init__(self, matrix, y, beta0, gamma0, clamp):
        self.matrix = matrix
        self.y = y
        self.eta_mu = np.full(matrix.n, beta0)
        self.eta_sigma = np.full(matrix.n, gamma0)
        self.clamp = clamp
        self._cols = {}

    def sigma_eta(self):
        return np.clip(self.eta_sigma, *self.clamp)

    def loss(self):
        return float(np.mean(nll_terms(self.y, self.eta_mu, self.sigma_eta())))

    def residuals(self):
        s2 = np.exp(2.0 * self.sigma_eta())
        d = self.y - self.eta_mu
        return d / s2, d * d / s2 - 1.0

    def column(self, j):
        col = self._cols.get(j)
        if col is None:
            col = imputed_columns(self.matrix, [j])[0]
            self._cols[j] = col
        return col


def _check_inputs(train, valid, config):
    G, y = train
    Gv, yv = valid
    y = np.asarray(y, dtype=float)
    yv = np.asarray(yv, dtype=float)
    if y.shape != (G.n,) or yv.shape != (Gv.n,):
        raise DataError("phenotype length does not match the genotype matrix")
    if G.n < 10:
        raise DataError(f"training set has n={G.n}; at least 10 samples needed")
    if Gv.n < 1:
        raise DataError("validation set is empty")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yv))):
        raise DataError("phenotype contains non-finite values")
    if G.variant_ids != Gv.variant_ids:
        raise DataError("training and validation matrices carry different variants")
    if not np.std(y, ddof=1) > 0:
        raise DegenerateError("training phenotype has zero variance")
    config.validate(G.p)
    return G, y, Gv, yv


def fit(
    train,
    valid,
    config: BoostConfig = BoostConfig(),
    threads: int = 1,
    on_select: Optional[Callable] = None,
):
    """Fit mean and log-SD sub-models.

    Parameters
    ----------
    train, valid : (GenotypeMatrix, array)
        Training and validation genotypes with phenotypes. Both matrices
        must carry the same variants in the same order.
    config : BoostConfig
    threads : int
        Workers for the genome-wide correlation scans. Results do not depend on it.
    on_select : callable, optional
        Called as ``on_select(parameter, batch_indices, residual, variant_index)``
        just before each coefficient update; used for auditing.

    Returns
    -------
    (LssModel, FitTrace)
    """
    G, y, Gv, yv = _check_inputs(train, valid, config)
    clamp = tuple(float(c) for c in config.eta_clamp)
    ids = G.variant_ids

    beta0 = float(y.mean())
    gamma0 = float(math.log(np.std(y, ddof=1)))
    tr = _State(G, y, beta0, gamma0, clamp)
    va = _State(Gv, yv, beta0, gamma0, clamp)
    trace = FitTrace(valid_loss0=va.loss(), train_loss0=tr.loss())
    records: list[UpdateRecord] = []

    best_loss = trace.valid_loss0
    stale = 0
    m = 0
    params = (MU, SIGMA) if config.sigma_model_enabled else (MU,)

    for k in range(1, config.b_max + 1):
        r_mu, r_sigma = tr.residuals()
        current = {MU: r_mu, SIGMA: r_sigma}
        batches = {}
        for par in params:
            batches[par] = _BatchData(G, build_batch(G, current[par], config.p_batch, par, threads))
        flags = {MU: False, SIGMA: not config.sigma_model_enabled}
        m_start = m + 1
        reason = "m_batch"
        for _ in range(config.m_batch):
            if flags[MU] and flags[SIGMA]:
                reason = "early_stop"
                break
            m += 1
            row = {"m": m, MU: None, SIGMA: None}
            for par in (MU, SIGMA):
                if flags[par]:
                    continue
                bd = batches[par]
                r = tr.residuals()[0 if par == MU else 1]
                pos, c, slope, icpt, _ = bd.best(r)
                if c < bd.batch.c_stop:
                    flags[par] = True
                    bd.batch.early_stop_flag = True
                    continue
                j = int(bd.idx[pos])
                if on_select is not None:
                    on_select(par, bd.idx.copy(), r.copy(), j)
                fitted = icpt + slope * tr.column(j)
                if config.step_mode == FIXED:
                    nu = config.nu
                elif par == MU:
                    nu = adaptive_step_mu(fitted, np.exp(tr.sigma_eta()), config.lam)
                else:
                    nu = config.nu_sigma
                d_icpt, d_slope = nu * icpt, nu * slope
                valid_fit = d_icpt + d_slope * va.column(j)
                if par == MU:
                    tr.eta_mu += nu * fitted
                    va.eta_mu += valid_fit
                else:
                    tr.eta_sigma += nu * fitted
                    va.eta_sigma += valid_fit
                records.append(UpdateRecord(m, par, ids[j], d_icpt, d_slope, nu))
                row[par] = ids[j]
            row["train_loss"] = tr.loss()
            row["valid_loss"] = va.loss()
            trace.iterations.append(row)
        else:
            if flags[MU] and flags[SIGMA]:
                reason = "early_stop"

        batch_losses = [it["valid_loss"] for it in trace.iterations[m_start - 1 : m]]
        batch_best = min(batch_losses) if batch_losses else float("inf")
        trace.batches.append(
            {
                "k": k,
                "first_iteration": m_start,
                "last_iteration": m,
                "c_stop_mu": batches[MU].batch.c_stop,
                "c_stop_sigma": batches[SIGMA].batch.c_stop if SIGMA in batches else None,
                "best_valid_loss": batch_best,
                "termination": reason,
            }
        )
        log.debug("batch %d: iterations %d-%d, best valid loss %.6f", k, m_start, m, batch_best)
        if batch_best < best_loss:
            best_loss = batch_best
            stale = 0
        else:
            stale += 1
            if stale >= config.b_stop:
                trace.batches[-1]["termination"] += "+outer_stop"
                break

    m_stop = select_m_stop(trace)
    alleles = {v.variant_id: v.allele1 for v in G.variants}
    model = LssModel.from_log(beta0, gamma0, records, m_stop, config=config.to_dict(),
                              valid_loss=trace.valid_loss)
    model.alleles = {v: alleles[v] for v in list(model.beta) + list(model.gamma)}
    return model, trace
