import io
import json
import math

import numpy as np
import pytest

from progeny.errors import NoDataError, PreconditionError
from progeny.exact import solve_progeny
from progeny.model import poisson_model, table_model
from progeny.rate import gamma, rho_star
from progeny.series import iter_exponents
from progeny.simulate import (
    SimConfig,
    closed_form_log_weight,
    composition_stats,
    estimate_pmf,
    estimate_size,
    sample,
    summarize,
)

from _models import bernoulli_model, random_table_model

P2 = [[0.4, 0.3], [0.3, 0.2]]


def test_root_only():
    model = table_model([{(0, 0): 1.0}, {(0, 0): 1.0}], [0.3, 0.7])
    batch = sample(model, SimConfig(1000, seed=1))
    np.testing.assert_array_equal(batch.T, np.eye(2, dtype=int)[batch.roots])
    assert np.all(batch.weights == 1.0)
    assert abs(np.mean(batch.roots == 0) - 0.3) < 4 * math.sqrt(0.21 / 1000)


def test_bernoulli_pair_probability():
    batch = sample(bernoulli_model(0.3), SimConfig(1_000_000, seed=2))
    est = estimate_size(batch, 2)
    sigma = math.sqrt(0.21 * 0.79 / 1_000_000)
    assert abs(est.value - 0.21) <= 4 * sigma
    assert est.stderr == pytest.approx(sigma, rel=0.01)


def test_untilted_weights_are_exactly_one():
    batch = sample(poisson_model(P2), SimConfig(2000, seed=3))
    assert np.all(batch.weights == 1.0)


@pytest.mark.parametrize("model_kind", ["poisson", "table"])
def test_weight_identity(model_kind):
    model = poisson_model(P2) if model_kind == "poisson" else random_table_model(np.random.default_rng(4))
    lam = (0.3, -0.2)
    batch = sample(model, SimConfig(3000, cap=500, seed=5, tilt_lambda=lam))
    done = ~batch.censored
    assert done.sum() > 1000  # the table model may be supercritical
    for t, lw, r in zip(batch.T[done], batch.log_weights[done], batch.roots[done]):
        ref = closed_form_log_weight(model, t, int(r), lam)
        assert math.exp(lw) == pytest.approx(math.exp(ref), rel=1e-10)


def test_reproducible_and_worker_independent():
    model = poisson_model(P2)
    cfg = SimConfig(20_000, seed=6, tilt_lambda=(0.2, 0.1), block_size=1000)
    a = sample(model, cfg)
    b = sample(model, cfg)
    c = sample(model, SimConfig(20_000, seed=6, tilt_lambda=(0.2, 0.1), block_size=1000, workers=4))
    for x in (b, c):
        np.testing.assert_array_equal(a.T, x.T)
        np.testing.assert_array_equal(a.log_weights, x.log_weights)
        np.testing.assert_array_equal(a.censored, x.censored)
    d = sample(model, SimConfig(20_000, seed=7, tilt_lambda=(0.2, 0.1), block_size=1000))
    assert not np.array_equal(a.T, d.T)


def test_untilted_matches_exact():
    model = poisson_model(P2)
    batch = sample(model, SimConfig(200_000, seed=8, cap=200))
    table = solve_progeny(model, 12)
    for n in iter_exponents(2, 6, 1):
        exact = table.prob(n)
        if exact < 1e-3:
            continue
        est = estimate_pmf(batch, n)
        binom = math.sqrt(exact * (1 - exact) / len(batch))
        assert abs(est.value - exact) <= 4 * binom


@pytest.mark.parametrize("model_kind", ["poisson", "table"])
def test_tilted_estimates_unbiased(model_kind):
    model = poisson_model(P2) if model_kind == "poisson" else random_table_model(np.random.default_rng(9))
    lam = (0.25, 0.15)
    table = solve_progeny(model, 10)
    targets = [n for n in iter_exponents(2, 10, 1) if table.prob(n) >= 1e-6]
    misses = {n: 0 for n in targets}
    for rep in range(20):
        batch = sample(model, SimConfig(20_000, seed=1000 + rep, cap=300, tilt_lambda=lam))
        for n in targets:
            est = estimate_pmf(batch, n)
            if est.hits < 2 or abs(est.value - table.prob(n)) > 4 * est.stderr:
                misses[n] += 1
    # at most one miss in 20 repetitions, for every n with enough mass to be seen
    seen = [n for n in targets if table.prob(n) * 20_000 >= 20]
    assert seen
    assert max(misses[n] for n in seen) <= 1, {n: misses[n] for n in seen if misses[n] > 1}


def test_mean_weight_is_survival_mass():
    # E[weight] over finished trees equals P(|T| < infinity) = 1 for subcritical models
    batch = sample(poisson_model(P2), SimConfig(50_000, seed=10, cap=2000, tilt_lambda=(0.3, 0.3)))
    w = np.where(batch.censored, 0.0, batch.weights)
    assert abs(w.mean() - 1.0) <= 4 * w.std() / math.sqrt(w.size)


def test_censoring_in_supercritical_model():
    model = poisson_model([[1.5, 0.5], [0.5, 1.5]])
    batch = sample(model, SimConfig(500, cap=100, seed=11))
    assert batch.censored.any()
    assert np.all(batch.sizes[batch.censored] > 100)
    assert np.all(batch.sizes[~batch.censored] <= 100)
    big = estimate_size(batch, 101, 10**9)
    assert big.value == 0.0 and big.hits == 0


def test_no_data_window():
    batch = sample(poisson_model(P2), SimConfig(100, seed=12))
    with pytest.raises(NoDataError):
        composition_stats(batch, 500, 600)


def test_composition_concentrates_at_rho_star():
    model = poisson_model(P2, [0.5, 0.5])
    rs = rho_star(model)
    lam = gamma(model, rs.rho).lambda_star
    batch = sample(model, SimConfig(100_000, cap=200, seed=13, tilt_lambda=tuple(lam)))
    stats = composition_stats(batch, 40, 60)
    assert stats.count > 1000
    assert np.abs(stats.mean - rs.rho).sum() <= 0.05


def test_config_validation():
    with pytest.raises(PreconditionError):
        SimConfig(0)
    with pytest.raises(PreconditionError):
        SimConfig(10, cap=0)
    with pytest.raises(PreconditionError):
        SimConfig(10, seed=-1)
    with pytest.raises(PreconditionError):
        sample(poisson_model(P2), SimConfig(10, tilt_lambda=(1.0,)))
    with pytest.raises(PreconditionError):
        sample(table_model([{(1,): 1.0}]), SimConfig(10))


def test_csv_export():
    batch = sample(poisson_model(P2), SimConfig(50, seed=14, tilt_lambda=(0.1, 0.1)))
    buf = io.StringIO()
    batch.write_csv(buf)
    lines = buf.getvalue().splitlines()
    header = [ln[2:] for ln in lines if ln.startswith("#")]
    meta = json.loads("\n".join(header))
    assert meta["config"]["seed"] == 14 and meta["model"] == batch.fingerprint
    body = [ln for ln in lines if not ln.startswith("#")]
    assert body[0] == "t_1,t_2,weight,censored"
    assert len(body) == 51
    t1, t2, w, c = body[1].split(",")
    assert float(w) == batch.weights[0] and c in {"0", "1"}


def test_summary():
    batch = sample(poisson_model(P2), SimConfig(1000, seed=15))
    s = summarize(batch, [1, 2]).to_dict()
    assert s["records"] == 1000 and s["mean_weight"] == 1.0
    assert set(s["size_mass"]) == {"1", "2"}
