import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from progeny.errors import ModelError
from progeny.model import (
    OffspringModel,
    PoissonOffspring,
    TableOffspring,
    classify,
    grad_log_mgf,
    load_model,
    log_mgf,
    mean_matrix,
    mgf,
    model_from_dict,
    model_to_dict,
    perron_root,
    poisson_model,
    ray,
    save_model,
    table_model,
    validate,
)

from _models import bernoulli_model, poisson1, random_poisson_model, random_table_model


def test_mgf_at_zero_is_one():
    rng = np.random.default_rng(1)
    for _ in range(10):
        model = random_table_model(rng) if rng.random() < 0.5 else random_poisson_model(rng)
        for k in range(model.m):
            assert mgf(model, k, np.zeros(model.m)) == 1.0


def test_poisson_mgf_against_pmf_sum():
    model = poisson1(0.8)
    lam = [math.log(2)]
    ks = np.arange(60)
    pmf = stats.poisson.pmf(ks, 0.8)
    assert pmf[-1] < 1e-14
    direct = float(np.sum(pmf * 2.0**ks))
    assert mgf(model, 0, lam) == pytest.approx(math.exp(0.8), rel=1e-13)
    assert mgf(model, 0, lam) == pytest.approx(direct, rel=1e-13)
    assert mgf(model, 0, lam) == pytest.approx(2.22554, abs=1e-5)


def test_table_mgf_two_terms():
    model = bernoulli_model(0.3)
    assert mgf(model, 0, [1.0]) == pytest.approx(0.7 + 0.3 * math.e, rel=1e-14)
    assert mgf(model, 0, [1.0]) == pytest.approx(1.51548, abs=1e-5)


def test_mgf_overflow_is_reported():
    model = poisson1(0.8)
    with pytest.raises(OverflowError):
        mgf(model, 0, [10.0])
    assert np.isfinite(log_mgf(model, 0, [10.0]))


def test_grad_log_mgf_examples():
    assert grad_log_mgf(poisson1(0.8), 0, [math.log(2)]) == pytest.approx([1.6], rel=1e-14)
    assert grad_log_mgf(bernoulli_model(0.3), 0, [0.0]) == pytest.approx([0.3], rel=1e-14)


def test_grad_at_zero_is_mean_row():
    rng = np.random.default_rng(2)
    for _ in range(10):
        model = random_table_model(rng)
        A = mean_matrix(model)
        for k in range(model.m):
            np.testing.assert_allclose(grad_log_mgf(model, k, np.zeros(model.m)), A[k], atol=1e-12)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = random_table_model(rng)
    lam = np.array([0.3, -0.7])
    h = 1e-6
    for k in range(2):
        fd = [(log_mgf(model, k, lam + h * e) - log_mgf(model, k, lam - h * e)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(grad_log_mgf(model, k, lam), fd, rtol=1e-7)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    l1=st.lists(st.floats(-4, 4), min_size=2, max_size=2),
    l2=st.lists(st.floats(-4, 4), min_size=2, max_size=2),
    t=st.floats(0, 1),
)
def test_log_mgf_is_convex_along_lines(seed, l1, l2, t):
    rng = np.random.default_rng(seed)
    model = random_table_model(rng) if seed % 2 else random_poisson_model(rng, 2)
    l1, l2 = np.array(l1), np.array(l2)
    for k in range(2):
        mid = log_mgf(model, k, t * l1 + (1 - t) * l2)
        chord = t * log_mgf(model, k, l1) + (1 - t) * log_mgf(model, k, l2)
        assert mid <= chord + 1e-12 * max(1.0, abs(chord))


# -- validation -------------------------------------------------------------


def test_valid_model_has_no_violations():
    model = table_model([{(0, 0): 0.5, (1, 0): 0.5}, {(0, 0): 0.4, (0, 1): 0.6}], [0.5, 0.5])
    assert validate(model) == []


def test_no_mass_at_zero_is_flagged():
    model = table_model([{(1, 0): 0.5, (0, 1): 0.5}, {(0, 0): 1.0}], [0.5, 0.5])
    rules = [str(v) for v in validate(model)]
    assert rules == ["type 1: no mass at zero offspring, |T| = ∞ a.s."]


def test_root_sum_is_flagged():
    model = poisson_model([[0.2, 0.3], [0.4, 0.1]], [0.6, 0.6])
    (v,) = validate(model)
    assert v.field == "root" and v.rule == "root sums to 1.2" and v.severity == "error"


def test_table_mass_and_duplicates_flagged():
    dist = TableOffspring([[0], [0], [1]], [0.5, 0.3, 0.3])
    rules = [v.rule for v in validate(OffspringModel((dist,), [1.0]))]
    assert any("sum to 1.1" in r for r in rules)
    assert any("repeated" in r for r in rules)


def test_zero_poisson_mean_is_a_warning():
    model = poisson_model([[0.5, 0.0], [0.0, 0.5]])
    vs = validate(model)
    assert len(vs) == 2 and all(v.severity == "warning" for v in vs)


def test_zero_mass_entries_rejected_at_construction():
    with pytest.raises(ModelError):
        TableOffspring([[0], [1]], [1.0, 0.0])


# -- first moments ------------------------------------------------------------


def test_perron_examples():
    assert perron_root(np.full((2, 2), 0.5)) == pytest.approx(1.0, abs=1e-12)
    model = poisson_model([[0.2, 0.3], [0.4, 0.1]])
    np.testing.assert_array_equal(mean_matrix(model), [[0.2, 0.3], [0.4, 0.1]])
    assert perron_root(mean_matrix(model)) == pytest.approx((0.3 + math.sqrt(0.01 + 4 * 0.12)) / 2, abs=1e-12)
    assert perron_root(mean_matrix(model)) == pytest.approx(0.5, abs=1e-12)
    assert classify(model) == "subcritical"
    assert perron_root(np.diag([2.0, 2.0])) == pytest.approx(2.0, abs=1e-12)
    assert classify(poisson_model(np.diag([2.0, 2.0]))) == "supercritical"
    assert classify(poisson_model([[0.5, 0.5], [0.5, 0.5]])) == "critical"


def test_perron_matches_eigvals():
    rng = np.random.default_rng(4)
    for _ in range(20):
        A = rng.uniform(0, 2, (3, 3))
        assert perron_root(A) == pytest.approx(max(abs(np.linalg.eigvals(A))), rel=1e-10)


def test_perron_reducible():
    A = np.array([[0.5, 1.0], [0.0, 0.9]])
    assert perron_root(A) == pytest.approx(0.9, abs=1e-10)


# -- ray ----------------------------------------------------------------------


def test_ray_examples():
    np.testing.assert_array_equal(ray([0.5, 0.5], 7), [4, 3])
    np.testing.assert_array_equal(ray([1.0], 12), [12])
    np.testing.assert_array_equal(ray([2 / 3, 1 / 3], 10), [7, 3])


@settings(max_examples=200, deadline=None)
@given(w=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), N=st.integers(1, 10_000))
def test_ray_invariants(w, N):
    rho = np.array(w) / sum(w)
    n = ray(rho, N)
    assert n.sum() == N
    assert np.all(np.abs(n - N * rho) < 1 + 1e-9)
    assert np.linalg.norm(n - N * rho) <= rho.size * math.sqrt(N)


def test_ray_is_strictly_increasing_in_size():
    rho = [0.3, 0.45, 0.25]
    sizes = [ray(rho, N).sum() for N in range(1, 50)]
    assert all(b > a for a, b in zip(sizes, sizes[1:]))


# -- files --------------------------------------------------------------------


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    for model in (random_table_model(rng), random_poisson_model(rng, 3)):
        path = tmp_path / "model.json"
        save_model(model, path)
        back = load_model(path)
        assert model_to_dict(back) == model_to_dict(model)
        assert back.fingerprint() == model.fingerprint()


def test_decimal_literals_parse_to_nearest_float(tmp_path):
    doc = {"root": [0.1, 0.9], "offspring": [{"kind": "poisson_product", "mu": [0.1, 0.3]}] * 2}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    model = load_model(path)
    assert model.root[0] == 0.1 and model.offspring[0].mu[1] == 0.3


def test_malformed_documents():
    with pytest.raises(ModelError):
        model_from_dict({"root": [1.0]})
    with pytest.raises(ModelError):
        model_from_dict({"root": [1.0], "offspring": [{"kind": "weird"}]})
    with pytest.raises(ModelError):
        model_from_dict({"root": [1.0], "offspring": [{"kind": "poisson_product", "mu": [1, 2]}]})


def test_poisson_to_table_truncation():
    dist = PoissonOffspring([0.8, 0.3])
    table, dropped = dist.to_table()
    assert 0 <= dropped < 1e-14
    assert math.fsum(table.probs) == pytest.approx(1 - dropped, abs=1e-15)
    np.testing.assert_allclose(table.mean, [0.8, 0.3], rtol=1e-12)
