"""Gaussian location-scale model with sparse polygenic predictors.

``mu_i = beta0 + sum_j beta_j g_ij`` and ``log sigma_i = gamma0 + sum_j gamma_j g_ij``.
Coefficients are keyed by variant id so a model can score any matrix that
carries its variants, whatever the column order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .errors import DegenerateError, FormatError, MissingVariantError, NumericError
from .genotype import GenotypeMatrix, imputed_columns

ETA_CLAMP = (-15.0, 15.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MU, SIGMA = "mu", "sigma"
INTERCEPT_ONLY = "(intercept)"

INTERCEPT_ROWS = ("(intercept_mu)", "(intercept_sigma)")
COEF_COLUMNS = ("variant_id", "allele1", "beta", "gamma")


@dataclass(frozen=True)
class UpdateRecord:
    iteration: int
    parameter: str
    variant_id: str
    intercept_increment: float
    slope_increment: float
    step_length_used: float

    def to_dict(self):
        return {
            "m": self.iteration,
            "parameter": self.parameter,
            "variant_id": self.variant_id,
            "intercept_increment": self.intercept_increment,
            "slope_increment": self.slope_increment,
            "step_length": self.step_length_used,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["m"]),
            d["parameter"],
            d["variant_id"],
            float(d["intercept_increment"]),
            float(d["slope_increment"]),
            float(d["step_length"]),
        )


@dataclass(frozen=True)
class Prediction:
    mu: np.ndarray
    sigma: np.ndarray
    eta_sigma: np.ndarray


def replay(offset_mu, offset_sigma, records, upto=None):
    """Rebuild (beta0, gamma0, beta, gamma) by summing logged increments in order."""
    beta0, gamma0 = float(offset_mu), float(offset_sigma)
    beta: dict[str, float] = {}
    gamma: dict[str, float] = {}
    for rec in records:
        if upto is not None and rec.iteration > upto:
            break
        if rec.parameter == MU:
            beta0 += rec.intercept_increment
            if rec.variant_id != INTERCEPT_ONLY:
                beta[rec.variant_id] = beta.get(rec.variant_id, 0.0) + rec.slope_increment
        else:
            gamma0 += rec.intercept_increment
            if rec.variant_id != INTERCEPT_ONLY:
                gamma[rec.variant_id] = gamma.get(rec.variant_id, 0.0) + rec.slope_increment
    return beta0, gamma0, beta, gamma


@dataclass
class LssModel:
    """Fitted location-scale model.

    ``beta0``, ``gamma0``, ``beta`` and ``gamma`` hold the coefficients at
    ``m_stop``. ``offset_mu``/``offset_sigma`` are the initial intercepts and
    ``update_log`` the full boosting path, possibly running past ``m_stop``.
    """

    beta0: float
    gamma0: float
    beta: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    update_log: list = field(default_factory=list)
    m_stop: int = 0
    offset_mu: Optional[float] = None
    offset_sigma: Optional[float] = None
    alleles: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    valid_loss: list = field(default_factory=list)

    def __post_init__(self):
        if self.offset_mu is None:
            self.offset_mu = self.beta0
        if self.offset_sigma is None:
            self.offset_sigma = self.gamma0

    @classmethod
    def from_log(cls, offset_mu, offset_sigma, update_log, m_stop, **kwargs):
        b0, g0, beta, gamma = replay(offset_mu, offset_sigma, update_log, m_stop)
        return cls(
            b0, g0, beta, gamma, list(update_log), int(m_stop), float(offset_mu),
            float(offset_sigma), **kwargs,
        )

    def coefficients_at(self, iteration=None):
        if iteration is None:
            return self.beta0, self.gamma0, self.beta, self.gamma
        return replay(self.offset_mu, self.offset_sigma, self.update_log, iteration)

    @property
    def selected_mu(self) -> set:
        return {k for k, v in self.beta.items() if v != 0.0}

    @property
    def selected_sigma(self) -> set:
        return {k for k, v in self.gamma.items() if v != 0.0}

    @property
    def n_iterations(self) -> int:
        return max((r.iteration for r in self.update_log), default=0)


def _linear_predictor(matrix, intercept, coefs):
    out = np.full(matrix.n, float(intercept))
    if not coefs:
        return out
    ids = list(coefs)
    missing = [v for v in ids if not matrix.has_variant(v)]
    if missing:
        raise MissingVariantError(missing)
    idx = [matrix.variant_index(v) for v in ids]
    block = imputed_columns(matrix, idx)
    return out + np.asarray([coefs[v] for v in ids]) @ block


def predict(model: LssModel, matrix: GenotypeMatrix, at_iteration=None, clamp=ETA_CLAMP) -> Prediction:
    """Location and scale for every sample of ``matrix``.

    With ``at_iteration`` the coefficients are rebuilt from the update log up to
    that iteration; otherwise the stored ``m_stop`` coefficients are used.
    """
    b0, g0, beta, gamma = model.coefficients_at(at_iteration)
    mu = _linear_predictor(matrix, b0, beta)
    eta = _linear_predictor(matrix, g0, gamma)
    if clamp is not None:
        eta = np.clip(eta, *clamp)
    return Prediction(mu=mu, sigma=np.exp(eta), eta_sigma=eta)


def score(model: LssModel, matrix: GenotypeMatrix):
    """(mPRS, vPRS): the mean predictor and the log-SD predictor, intercepts included."""
    pred = predict(model, matrix)
    return pred.mu, pred.eta_sigma


def nll_terms(y, mu, eta):
    sigma2 = np.exp(2.0 * eta)
    return HALF_LOG_2PI + eta + (y - mu) ** 2 / (2.0 * sigma2)


def nll_loss(y, pred: Prediction) -> float:
    """Mean negative log-likelihood per observation, constant included."""
    y = np.asarray(y, dtype=float)
    if y.shape != pred.mu.shape:
        raise ValueError(f"y has length {y.size}, prediction has {pred.mu.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(pred.mu)) and np.all(np.isfinite(pred.eta_sigma))):
        raise NumericError("non-finite value in negative log-likelihood inputs")
    val = float(np.mean(nll_terms(y, pred.mu, pred.eta_sigma)))
    if not math.isfinite(val):
        raise NumericError("negative log-likelihood overflowed")
    return val


def residual_mu(y, pred: Prediction) -> np.ndarray:
    return (np.asarray(y, dtype=float) - pred.mu) / pred.sigma**2


def residual_sigma(y, pred: Prediction) -> np.ndarray:
    return (np.asarray(y, dtype=float) - pred.mu) ** 2 / pred.sigma**2 - 1.0


def standardize(scores, reference) -> np.ndarray:
    ref = np.asarray(reference, dtype=float)
    if ref.size < 2:
        raise DegenerateError("reference needs at least two values")
    sd = float(np.std(ref, ddof=1))
    if not sd > 0.0:
        raise DegenerateError("reference scores have zero standard deviation")
    return (np.asarray(scores, dtype=float) - ref.mean()) / sd


# --------------------------------------------------------------------------- files


def _variant_order(model):
    order = list(model.beta)
    order += [v for v in model.gamma if v not in model.beta]
    return order


def export_coefficients(model: LssModel, path, header_comment: str | None = None) -> None:
    """Coefficient TSV plus a ``<path>.json`` sidecar with the update log."""
    path = str(path)
    with open(path, "w") as fh:
        if header_comment is not None:
            fh.write(f"# {header_comment}\n")
        fh.write("\t".join(COEF_COLUMNS) + "\n")
        fh.write(f"{INTERCEPT_ROWS[0]}\t.\t{model.beta0!r}\t0.0\n")
        fh.write(f"{INTERCEPT_ROWS[1]}\t.\t0.0\t{model.gamma0!r}\n")
        for vid in _variant_order(model):
            b = float(model.beta.get(vid, 0.0))
            g = float(model.gamma.get(vid, 0.0))
            fh.write(f"{vid}\t{model.alleles.get(vid, '.')}\t{b!r}\t{g!r}\n")
    sidecar = {
        "version": __version__,
        "config": model.config,
        "m_stop": model.m_stop,
        "offset_mu": model.offset_mu,
        "offset_sigma": model.offset_sigma,
        "valid_loss": list(model.valid_loss),
        "update_log": [r.to_dict() for r in model.update_log],
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")


def import_coefficients(path) -> LssModel:
    path = str(path)
    with open(path) as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip() and not line.startswith("#")]
    if not rows or tuple(rows[0]) != COEF_COLUMNS:
        raise FormatError(f"{path}: header must be {' '.join(COEF_COLUMNS)}")
    body = rows[1:]
    if len(body) < 2 or tuple(r[0] for r in body[:2]) != INTERCEPT_ROWS:
        raise FormatError(f"{path}: first two rows must hold the intercepts")
    parsed = []
    for k, r in enumerate(body, start=2):
        if len(r) != 4:
            raise FormatError(f"{path}: row {k} has {len(r)} fields, expected 4")
        try:
            parsed.append((r[0], r[1], float(r[2]), float(r[3])))
        except ValueError:
            raise FormatError(f"{path}: row {k}: non-numeric coefficient") from None
    beta0 = parsed[0][2]
    gamma0 = parsed[1][3]
    beta, gamma, alleles = {}, {}, {}
    for vid, a1, b, g in parsed[2:]:
        if vid in alleles:
            raise FormatError(f"{path}: duplicate variant {vid}")
        alleles[vid] = a1
        if b != 0.0:
            beta[vid] = b
        if g != 0.0:
            gamma[vid] = g
    model = LssModel(beta0, gamma0, beta, gamma, alleles=alleles)
    try:
        with open(path + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        return model
    model.update_log = [UpdateRecord.from_dict(d) for d in side.get("update_log", [])]
    model.m_stop = int(side.get("m_stop", 0))
    model.offset_mu = float(side.get("offset_mu", beta0))
    model.offset_sigma = float(side.get("offset_sigma", gamma0))
    model.config = side.get("config", {})
    model.valid_loss = side.get("valid_loss", [])
    return model
