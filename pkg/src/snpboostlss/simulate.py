"""Synthetic cohorts with genetically driven mean and variance.

Every random sub-product draws from its own Philox stream derived from the
cohort seed, so genotypes, effect sizes, noise and the split can each be
regenerated in isolation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchemaError
from .genotype import GenotypeMatrix, SampleMeta, VariantMeta, imputed_columns, load_text_matrix, write_text_matrix

STREAM_GENOTYPES = 0
STREAM_SIGMA_SET = 1
STREAM_SIGMA_COEF = 2
STREAM_MU_SET = 3
STREAM_MU_COEF = 4
STREAM_NOISE = 5
STREAM_SPLIT = 6
STREAM_MAF = 7

SPLIT_LABELS = ("train", "valid", "test")


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


@dataclass(frozen=True)
class SimSpec:
    n: int
    p: int
    h2: float
    sparsity: float
    repeats: int = 100
    split: tuple = (0.5, 0.2, 0.3)
    seed: int = 1
    maf_range: tuple = (0.05, 0.5)

    def validate(self) -> "SimSpec":
        if self.n < 3 or self.p < 1:
            raise ConfigError(f"need n >= 3 and p >= 1, got n={self.n}, p={self.p}")
        if not 0.0 < self.h2 < 1.0:
            raise ConfigError(f"h2 must lie in (0, 1), got {self.h2}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if n_informative(self) < 1:
            raise ConfigError(f"sparsity {self.sparsity} x p {self.p} gives no informative variant")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        lo, hi = self.maf_range
        if not 0.0 < lo <= hi <= 0.5:
            raise ConfigError(f"maf range must satisfy 0 < low <= high <= 0.5, got {self.maf_range}")
        return self


def n_informative(spec: SimSpec) -> int:
    return int(round(spec.sparsity * spec.p))


@dataclass
class SimulatedCohort:
    matrix: GenotypeMatrix
    true_beta: dict
    true_gamma: dict
    mu0: float
    gamma0: float
    mu_true: np.ndarray
    sigma_true: np.ndarray
    longitudinal_y: np.ndarray
    split_assignment: np.ndarray
    spec: SimSpec | None = None
    meta: dict = field(default_factory=dict)

    @property
    def baseline_y(self) -> np.ndarray:
        return self.longitudinal_y[:, 0]

    def indices(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.split_assignment == label)


def simulate_genotypes(spec: SimSpec) -> GenotypeMatrix:
    lo, hi = spec.maf_range
    maf = stream(spec.seed, STREAM_MAF).uniform(lo, hi, size=spec.p)
    dos = stream(spec.seed, STREAM_GENOTYPES).binomial(2, maf, size=(spec.n, spec.p)).astype(float)
    variants = [VariantMeta("1", f"snp{j + 1}", 1000 * (j + 1), "A", "G") for j in range(spec.p)]
    samples = [SampleMeta(f"id{i + 1}", f"id{i + 1}") for i in range(spec.n)]
    return GenotypeMatrix.from_dosages(dos, variants, samples)


def coefficient_variance(h2: float, sigma_bar2: float, n_causal: int) -> float:
    """Per-variant variance of standardized mean effects targeting heritability ``h2``."""
    return sigma_bar2 / (1.0 - h2) * h2 / n_causal


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    a = int(round(n * fractions[0]))
    b = int(round(n * fractions[1]))
    return a, b, n - a - b


def assign_split(n: int, fractions, seed: int) -> np.ndarray:
    a, b, _ = split_sizes(n, fractions)
    perm = stream(seed, STREAM_SPLIT).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[perm[:a]] = "train"
    labels[perm[a : a + b]] = "valid"
    labels[perm[a + b :]] = "test"
    return labels


def simulate(spec: SimSpec, matrix: GenotypeMatrix | None = None) -> SimulatedCohort:
    """Draw a cohort.

    Informative scale variants get per-allele log-SD effects from U(-0.25, 0.25)
    with zero intercept. Informative mean variants, sampled independently of
    the scale set, get normal effects on standardized dosages with variance
    chosen so the expected heritability is ``spec.h2``; they are stored as
    per-allele effects plus an intercept.
    """
    spec.validate()
    if matrix is None:
        matrix = simulate_genotypes(spec)
    elif matrix.shape != (spec.n, spec.p):
        raise ConfigError(f"matrix shape {matrix.shape} does not match n={spec.n}, p={spec.p}")
    n, p = spec.n, spec.p
    k = n_informative(spec)
    ids = matrix.variant_ids
    st = matrix.col_stats

    sig_idx = np.sort(stream(spec.seed, STREAM_SIGMA_SET).choice(p, size=k, replace=False))
    gam = stream(spec.seed, STREAM_SIGMA_COEF).uniform(-0.25, 0.25, size=k)
    G_sig = imputed_columns(matrix, sig_idx)
    log_sigma = gam @ G_sig
    sigma = np.exp(log_sigma)
    sigma_bar2 = float(np.mean(sigma**2))

    mu_idx = np.sort(stream(spec.seed, STREAM_MU_SET).choice(p, size=k, replace=False))
    var_b = coefficient_variance(spec.h2, sigma_bar2, k)
    b_std = stream(spec.seed, STREAM_MU_COEF).normal(0.0, np.sqrt(var_b), size=k)
    sd = st.sd[mu_idx]
    mean = st.mean[mu_idx]
    ok = np.isfinite(sd) & (sd > 0)
    per_allele = np.where(ok, b_std / np.where(ok, sd, 1.0), 0.0)
    mu0 = -float(per_allele @ np.where(ok, mean, 0.0))
    mu = mu0 + per_allele @ imputed_columns(matrix, mu_idx)

    noise = stream(spec.seed, STREAM_NOISE).standard_normal(size=(n, spec.repeats))
    longit = mu[:, None] + sigma[:, None] * noise
    labels = assign_split(n, spec.split, spec.seed)
    return SimulatedCohort(
        matrix=matrix,
        true_beta={ids[j]: float(b) for j, b in zip(mu_idx, per_allele)},
        true_gamma={ids[j]: float(g) for j, g in zip(sig_idx, gam)},
        mu0=mu0,
        gamma0=0.0,
        mu_true=mu,
        sigma_true=sigma,
        longitudinal_y=longit,
        split_assignment=labels,
        spec=spec,
    )


def realized_heritability(cohort_or_mu, sigma=None) -> float:
    """Var(mu) / (Var(mu) + mean(sigma^2)) over the whole cohort."""
    if sigma is None:
        mu, sigma = cohort_or_mu.mu_true, cohort_or_mu.sigma_true
    else:
        mu = cohort_or_mu
    vm = float(np.var(np.asarray(mu, dtype=float)))
    s2 = float(np.mean(np.square(np.asarray(sigma, dtype=float))))
    return vm / (vm + s2)


def benchmark_sigma_sd(cohort_or_y, k: int) -> np.ndarray:
    """Per-individual sample SD over the first ``k`` longitudinal draws."""
    y = cohort_or_y.longitudinal_y if hasattr(cohort_or_y, "longitudinal_y") else np.asarray(cohort_or_y, dtype=float)
    if k < 2:
        raise ConfigError(f"benchmark SD needs k >= 2 draws, got {k}")
    if k > y.shape[1]:
        raise ConfigError(f"k={k} exceeds the {y.shape[1]} available draws")
    return np.std(y[:, :k], axis=1, ddof=1)


# --------------------------------------------------------------------------- files

GENO_FILE = "genotypes.txt"
PHENO_FILE = "pheno.tsv"
TRUTH_FILE = "truth.tsv"
SPLIT_FILE = "split.tsv"
SIGMA_FILE = "true_params.tsv"


def write_cohort(cohort: SimulatedCohort, outdir, header_comment: str | None = None) -> None:
    os.makedirs(outdir, exist_ok=True)
    head = f"# {header_comment}\n" if header_comment else ""
    write_text_matrix(cohort.matrix, os.path.join(outdir, GENO_FILE))
    samples = cohort.matrix.samples
    reps = cohort.longitudinal_y.shape[1]
    with open(os.path.join(outdir, PHENO_FILE), "w") as fh:
        fh.write(head)
        fh.write("\t".join(["FID", "IID", "baseline"] + [f"repeat_{r}" for r in range(1, reps)]) + "\n")
        for s, row in zip(samples, cohort.longitudinal_y):
            fh.write("\t".join([s.family_id, s.individual_id] + [repr(float(x)) for x in row]) + "\n")
    with open(os.path.join(outdir, TRUTH_FILE), "w") as fh:
        fh.write(head)
        fh.write("variant_id\tbeta_true\tgamma_true\n")
        fh.write(f"(intercept)\t{cohort.mu0!r}\t{cohort.gamma0!r}\n")
        for vid in cohort.matrix.variant_ids:
            b = cohort.true_beta.get(vid, 0.0)
            g = cohort.true_gamma.get(vid, 0.0)
            if b != 0.0 or g != 0.0 or vid in cohort.true_beta or vid in cohort.true_gamma:
                fh.write(f"{vid}\t{b!r}\t{g!r}\n")
    with open(os.path.join(outdir, SPLIT_FILE), "w") as fh:
        fh.write(head)
        fh.write("FID\tIID\tsplit\n")
        for s, lab in zip(samples, cohort.split_assignment):
            fh.write(f"{s.family_id}\t{s.individual_id}\t{lab}\n")
    with open(os.path.join(outdir, SIGMA_FILE), "w") as fh:
        fh.write(head)
        fh.write("FID\tIID\tmu_true\tsigma_true\n")
        for s, m, sg in zip(samples, cohort.mu_true, cohort.sigma_true):
            fh.write(f"{s.family_id}\t{s.individual_id}\t{float(m)!r}\t{float(sg)!r}\n")


def _read_tsv(path, required):
    import pandas as pd

    if not os.path.exists(path):
        raise SchemaError(f"required file {path} is missing")
    df = pd.read_csv(path, sep="\t", comment="#", dtype={"FID": str, "IID": str, "variant_id": str},
                     float_precision="round_trip")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {', '.join(missing)}")
    return df


def read_cohort(outdir) -> SimulatedCohort:
    matrix = load_text_matrix(os.path.join(outdir, GENO_FILE))
    pheno = _read_tsv(os.path.join(outdir, PHENO_FILE), ["FID", "IID", "baseline"])
    truth = _read_tsv(os.path.join(outdir, TRUTH_FILE), ["variant_id", "beta_true", "gamma_true"])
    split = _read_tsv(os.path.join(outdir, SPLIT_FILE), ["FID", "IID", "split"])
    params = _read_tsv(os.path.join(outdir, SIGMA_FILE), ["FID", "IID", "mu_true", "sigma_true"])
    keys = [(s.family_id, s.individual_id) for s in matrix.samples]
    for name, df in (("pheno", pheno), ("split", split), ("true_params", params)):
        if list(zip(df["FID"], df["IID"])) != keys:
            raise SchemaError(f"{name} table samples do not match the genotype file")
    ycols = [c for c in pheno.columns if c not in ("FID", "IID")]
    icpt = truth[truth["variant_id"] == "(intercept)"]
    body = truth[truth["variant_id"] != "(intercept)"]
    return SimulatedCohort(
        matrix=matrix,
        true_beta={v: float(b) for v, b in zip(body["variant_id"], body["beta_true"]) if b != 0.0},
        true_gamma={v: float(g) for v, g in zip(body["variant_id"], body["gamma_true"]) if g != 0.0},
        mu0=float(icpt["beta_true"].iloc[0]) if len(icpt) else 0.0,
        gamma0=float(icpt["gamma_true"].iloc[0]) if len(icpt) else 0.0,
        mu_true=params["mu_true"].to_numpy(float),
        sigma_true=params["sigma_true"].to_numpy(float),
        longitudinal_y=pheno[ycols].to_numpy(float),
        split_assignment=split["split"].to_numpy(object),
    )
