"""Sparse polygenic models for the mean and the log standard deviation of a
quantitative phenotype, fitted by batch-wise cyclical gradient boosting."""

__version__ = "0.1.0"

from .boost import BoostConfig, FitTrace, build_batch, fit, select_m_stop  # noqa: E402
from .genotype import GenotypeMatrix, load_genotypes, load_plink, load_text_matrix  # noqa: E402
from .model import LssModel, Prediction, nll_loss, predict, score  # noqa: E402

__all__ = [
    "BoostConfig",
    "FitTrace",
    "GenotypeMatrix",
    "LssModel",
    "Prediction",
    "build_batch",
    "fit",
    "load_genotypes",
    "load_plink",
    "load_text_matrix",
    "nll_loss",
    "predict",
    "score",
    "select_m_stop",
]
