import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snpboostlss.errors import DegenerateError, FormatError, MissingVariantError, NumericError
from snpboostlss.genotype import GenotypeMatrix, VariantMeta
from snpboostlss.model import (
    HALF_LOG_2PI,
    MU,
    SIGMA,
    LssModel,
    Prediction,
    UpdateRecord,
    export_coefficients,
    import_coefficients,
    nll_loss,
    predict,
    residual_mu,
    residual_sigma,
    score,
    standardize,
)

from conftest import random_dosages


def pred(mu, eta):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    return Prediction(mu=mu, sigma=np.exp(eta), eta_sigma=eta)


def toy_matrix():
    d = np.array([[2.0, 0.0, 1.0], [0.0, 1.0, np.nan], [1.0, 2.0, 1.0]])
    vs = [VariantMeta("1", f"v{j + 1}", j + 1) for j in range(3)]
    return GenotypeMatrix.from_dosages(d, vs)


def toy_log():
    return [
        UpdateRecord(1, MU, "v1", 0.1, 0.5, 0.1),
        UpdateRecord(1, SIGMA, "v2", -0.05, 0.2, 0.05),
        UpdateRecord(2, MU, "v3", 0.0, -0.25, 0.1),
        UpdateRecord(2, SIGMA, "v2", 0.01, 0.1, 0.05),
        UpdateRecord(3, MU, "v1", 0.2, 0.3, 0.1),
        UpdateRecord(3, SIGMA, "(intercept)", 0.3, 0.0, 0.05),
    ]


# --------------------------------------------------------------------------- predict / score


def test_predict_examples():
    G = toy_matrix()
    m = LssModel(beta0=1.0, gamma0=0.0, beta={"v1": 0.5})
    p = predict(m, G)
    assert p.mu[0] == 2.0
    np.testing.assert_array_equal(p.sigma, np.ones(3))


def test_predict_mean_imputes_missing():
    m = LssModel(beta0=0.0, gamma0=0.0, gamma={"v3": 1.0})
    p = predict(m, toy_matrix())
    np.testing.assert_allclose(p.eta_sigma, [1.0, 1.0, 1.0])


def test_predict_uses_ids_not_positions():
    G = toy_matrix()
    m = LssModel(beta0=0.0, gamma0=0.0, beta={"v3": 1.0, "v1": 2.0})
    shuffled = G.subset_variants([2, 0, 1])
    np.testing.assert_array_equal(predict(m, G).mu, predict(m, shuffled).mu)


def test_missing_variant_reported():
    m = LssModel(beta0=0.0, gamma0=0.0, beta={"zz": 1.0, "v1": 1.0})
    with pytest.raises(MissingVariantError, match="zz"):
        predict(m, toy_matrix())


def test_eta_clamped():
    m = LssModel(beta0=0.0, gamma0=40.0)
    p = predict(m, toy_matrix())
    np.testing.assert_array_equal(p.eta_sigma, 15.0)
    assert np.all(np.isfinite(p.sigma))


def test_replay_at_m_stop_matches_stored_maps():
    log = toy_log()
    m = LssModel.from_log(0.7, -0.1, log, m_stop=2)
    assert m.beta == {"v1": 0.5, "v3": -0.25}
    assert m.gamma == pytest.approx({"v2": 0.3})
    assert m.beta0 == pytest.approx(0.8) and m.gamma0 == pytest.approx(-0.14)
    G = toy_matrix()
    a, b = predict(m, G), predict(m, G, at_iteration=2)
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
    np.testing.assert_allclose(a.eta_sigma, b.eta_sigma, atol=1e-12)
    z = predict(m, G, at_iteration=0)
    np.testing.assert_array_equal(z.mu, 0.7)
    np.testing.assert_array_equal(z.eta_sigma, -0.1)
    assert m.n_iterations == 3


def test_score_is_predict():
    G = toy_matrix()
    m = LssModel.from_log(0.7, -0.1, toy_log(), m_stop=3)
    mprs, vprs = score(m, G)
    p = predict(m, G)
    assert np.array_equal(mprs, p.mu) and np.array_equal(vprs, p.eta_sigma)


# --------------------------------------------------------------------------- loss and gradients


@pytest.mark.parametrize(
    "y,mu,eta,expected",
    [
        (0.0, 0.0, 0.0, 0.918939),
        (1.0, 0.0, 0.0, 1.418939),
        (0.0, 0.0, 1.0, 1.918939),
    ],
)
def test_nll_examples(y, mu, eta, expected):
    assert nll_loss(np.array([y]), pred(mu, eta)) == pytest.approx(expected, abs=1e-6)


def test_nll_constant():
    assert HALF_LOG_2PI == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-15)


def test_nll_non_finite():
    with pytest.raises(NumericError):
        nll_loss(np.array([np.nan]), pred(0.0, 0.0))


@pytest.mark.parametrize("y,mu,eta,r_mu,r_sigma", [
    (2.0, 1.0, 0.0, 1.0, 0.0),
    (2.0, 1.0, math.log(2.0), 0.25, -0.75),
    (3.0, 1.0, 0.0, 2.0, 3.0),
])
def test_residual_examples(y, mu, eta, r_mu, r_sigma):
    p = pred(mu, eta)
    assert residual_mu(np.array([y]), p)[0] == pytest.approx(r_mu, rel=1e-15)
    assert residual_sigma(np.array([y]), p)[0] == pytest.approx(r_sigma, abs=1e-15)


def central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


@given(st.integers(0, 2**32 - 1))
def test_residuals_are_negative_gradients(seed):
    rng = np.random.default_rng(seed)
    y, mu = rng.normal(0, 2, 2)
    eta = rng.uniform(-2, 2)
    yy = np.array([y])
    fd_mu = -central_difference(lambda m: nll_loss(yy, pred(m, eta)), mu)
    fd_eta = -central_difference(lambda e: nll_loss(yy, pred(mu, e)), eta)
    r_mu = residual_mu(yy, pred(mu, eta))[0]
    r_sig = residual_sigma(yy, pred(mu, eta))[0]
    assert abs(fd_mu - r_mu) <= 1e-6 * abs(r_mu)
    assert abs(fd_eta - r_sig) <= 1e-6 * abs(r_sig)


def test_constant_model_optimum(rng):
    y = rng.normal(3.0, 1.7, 500)
    mu0, eta0 = y.mean(), math.log(y.std())
    best = nll_loss(y, pred(np.full(500, mu0), np.full(500, eta0)))
    for dm in (-1e-3, 1e-3):
        for de in (-1e-3, 0.0, 1e-3):
            assert nll_loss(y, pred(np.full(500, mu0 + dm), np.full(500, eta0 + de))) > best
    for de in (-1e-3, 1e-3):
        assert nll_loss(y, pred(np.full(500, mu0), np.full(500, eta0 + de))) > best


# --------------------------------------------------------------------------- standardize


def test_standardize_examples():
    np.testing.assert_allclose(standardize([0, 2], [0, 2]), [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-15)
    with pytest.raises(DegenerateError):
        standardize([1.0], [5, 5, 5])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=40))
def test_standardize_self(values):
    x = np.array(values)
    if np.std(x) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    z = standardize(x, x)
    assert abs(z.mean()) < 1e-9
    assert np.var(z, ddof=1) == pytest.approx(1.0, rel=1e-9)


# --------------------------------------------------------------------------- files


def test_export_import_round_trip(tmp_path):
    m = LssModel.from_log(0.7, -0.1, toy_log(), m_stop=3, alleles={"v1": "A", "v2": "C", "v3": "G"},
                          config={"p_batch": 3}, valid_loss=[1.0, 0.9, 0.95, 0.97])
    path = tmp_path / "m.tsv"
    export_coefficients(m, path, "hdr")
    r = import_coefficients(path)
    assert r.beta == m.beta and r.gamma == m.gamma
    assert r.beta0 == m.beta0 and r.gamma0 == m.gamma0
    assert r.update_log == m.update_log and r.m_stop == 3
    assert r.alleles == m.alleles and r.valid_loss == m.valid_loss
    assert path.read_text().startswith("# hdr\n")


def test_intercept_only_round_trip(tmp_path):
    path = tmp_path / "m.tsv"
    export_coefficients(LssModel(beta0=1.5, gamma0=-0.2), path)
    r = import_coefficients(path)
    assert (r.beta0, r.gamma0, r.beta, r.gamma) == (1.5, -0.2, {}, {})
    (tmp_path / "m.tsv.json").unlink()
    assert import_coefficients(path).beta0 == 1.5


def test_import_rejects_missing_gamma(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("variant_id\tallele1\tbeta\n(intercept_mu)\t.\t1.0\n")
    with pytest.raises(FormatError):
        import_coefficients(path)


def test_import_rejects_short_row(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("variant_id\tallele1\tbeta\tgamma\n(intercept_mu)\t.\t1.0\t0.0\n"
                    "(intercept_sigma)\t.\t0.0\t0.0\nv1\tA\t0.3\n")
    with pytest.raises(FormatError, match="row 4"):
        import_coefficients(path)


def test_predict_after_round_trip(tmp_path, rng):
    d = random_dosages(rng, 30, 3)
    G = GenotypeMatrix.from_dosages(d, [VariantMeta("1", f"v{j + 1}", j) for j in range(3)])
    m = LssModel.from_log(0.7, -0.1, toy_log(), m_stop=3)
    export_coefficients(m, tmp_path / "m.tsv")
    r = import_coefficients(tmp_path / "m.tsv")
    assert np.array_equal(predict(m, G).mu, predict(r, G).mu)
    assert np.array_equal(predict(m, G, at_iteration=1).eta_sigma, predict(r, G, at_iteration=1).eta_sigma)
