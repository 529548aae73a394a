import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snpboostlss.errors import DegenerateError
from snpboostlss.metrics import EvalReport, evaluate, r_squared, selection_rates, sigma_correlation
from snpboostlss.model import LssModel
from snpboostlss.simulate import SimSpec, simulate


def naive_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_r_squared_examples(rng):
    y = rng.standard_normal(10)
    assert r_squared(y, y) == pytest.approx(1.0, rel=1e-15)
    assert r_squared(y, -y) == pytest.approx(1.0, rel=1e-15)
    for _ in range(20):
        a, b = rng.standard_normal(10), rng.standard_normal(10)
        assert abs(r_squared(a, b) - naive_pearson(list(a), list(b)) ** 2) < 1e-12
        assert abs(sigma_correlation(a, b) - naive_pearson(list(a), list(b))) < 1e-12


def test_constant_prediction_rejected():
    with pytest.raises(DegenerateError):
        r_squared([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-100, 100))
def test_r_squared_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    assert r_squared(x, a * y + b) == pytest.approx(r_squared(x, y), rel=1e-9, abs=1e-12)
    assert r_squared(a * x + b, y) == pytest.approx(r_squared(x, y), rel=1e-9, abs=1e-12)


def test_selection_rate_examples():
    truth = {f"v{j}" for j in range(5)}
    assert selection_rates(truth, truth, 100) == (1.0, 1.0)
    assert selection_rates(set(), truth, 100) == (0.0, 1.0)
    assert selection_rates({f"v{j}" for j in range(100)}, truth, 100) == (1.0, 0.0)
    with pytest.raises(DegenerateError):
        selection_rates({"v1"}, set(), 100)


@given(st.sets(st.integers(0, 49)), st.sets(st.integers(0, 49), min_size=1, max_size=49))
def test_selection_rate_counts_are_integral(sel, truth):
    tpr, tnr = selection_rates(sel, truth, 50)
    assert abs(tpr * len(truth) - round(tpr * len(truth))) < 1e-9
    assert abs(tnr * (50 - len(truth)) - round(tnr * (50 - len(truth)))) < 1e-9


def test_report_round_trips():
    rep = EvalReport(0.5, 1.2, 3, 4, 1, 0.5, 0.99, 0.25, 0.98, 0.7, 0.71, 1.5, 2.0, 150.0, 200.0, 0.1)
    assert EvalReport.from_json(rep.to_json()) == rep
    assert EvalReport.from_tsv_row(rep.tsv_row()) == rep
    assert len(EvalReport.columns()) == len(rep.tsv_row().split("\t"))


def test_evaluate_with_true_model():
    c = simulate(SimSpec(n=2000, p=50, h2=0.5, sparsity=0.1, repeats=1, seed=3))
    truth = LssModel(beta0=c.mu0, gamma0=0.0, beta=dict(c.true_beta), gamma=dict(c.true_gamma))
    rep = evaluate(truth, c)
    assert rep.tpr_mu == rep.tnr_mu == rep.tpr_sigma == rep.tnr_sigma == 1.0
    assert rep.sigma_corr == pytest.approx(1.0, rel=1e-12)
    assert rep.eta_corr == pytest.approx(1.0, rel=1e-12)
    assert rep.r2 == pytest.approx(0.5, abs=0.06)
    assert rep.pct_selected_mu_of_truth == 100.0 and rep.pct_selected_mu_of_p == 10.0
