import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from progeny.errors import PreconditionError, SolverDivergence
from progeny.model import (
    OffspringModel,
    PoissonLaw,
    TableOffspring,
    grad_log_mgf,
    mean_matrix,
    poisson_model,
    table_model,
)
from progeny.rate import (
    dual_objective,
    gamma,
    gamma_closed_poisson,
    gamma_from_tilt,
    left_perron_vector,
    principal_eigenvector_check,
    rate_gradient,
    rho_star,
    simplex_grid,
    tilt,
    tilt_diagnostics,
)

from _models import (
    bernoulli_model,
    poisson1,
    random_direction,
    random_poisson_model,
    random_product_model,
    random_table_model,
)

STOCHASTIC = [[0.7, 0.3], [0.6, 0.4]]
MU2 = [[0.2, 0.3], [0.4, 0.1]]


def test_gamma_vanishes_on_critical_direction():
    model = poisson_model(STOCHASTIC)
    res = gamma(model, [2 / 3, 1 / 3])
    assert abs(res.gamma) <= 1e-10
    np.testing.assert_allclose(res.lambda_star, 0, atol=1e-8)


def test_gamma_one_type_poisson():
    res = gamma(poisson1(0.8), [1.0])
    assert res.gamma == pytest.approx(0.8 - 1 - math.log(0.8), rel=1e-12)
    assert res.gamma == pytest.approx(0.0231436, abs=1e-7)
    assert res.lambda_star[0] == pytest.approx(math.log(1.25), rel=1e-10)


def test_gamma_two_type_poisson():
    model = poisson_model(MU2)
    res = gamma(model, [0.5, 0.5])
    hand = 0.5 * math.log(0.5 / 0.3) + 0.5 * math.log(0.5 / 0.2) + (0.3 + 0.2) - 1.0
    assert res.gamma == pytest.approx(hand, rel=1e-12)
    assert res.gamma == pytest.approx(0.2135582, abs=1e-7)
    np.testing.assert_allclose(res.lambda_star, np.log(np.array([0.5, 0.5]) / [0.3, 0.2]), rtol=1e-9)
    # independent check: brute-force grid over lambda, then a local refinement
    g = np.linspace(-3, 3, 601)
    L1, L2 = np.meshgrid(g, g, indexing="ij")
    mu = np.array(MU2)
    vals = 0.5 * L1 + 0.5 * L2
    for k in range(2):
        vals -= 0.5 * (mu[k, 0] * (np.exp(L1) - 1) + mu[k, 1] * (np.exp(L2) - 1))
    assert res.gamma >= vals.max() - 1e-12
    assert res.gamma - vals.max() < 1e-4


def test_closed_form_examples():
    assert gamma_closed_poisson(poisson1(0.8), [1.0]) == pytest.approx(0.8 - 1 - math.log(0.8), rel=1e-14)
    assert gamma_closed_poisson(poisson_model(MU2), [0.5, 0.5]) == pytest.approx(0.2135581778, abs=1e-9)
    assert gamma_closed_poisson(poisson_model(STOCHASTIC), [2 / 3, 1 / 3]) == pytest.approx(0, abs=1e-15)
    # a type nobody gives birth to
    assert gamma_closed_poisson(poisson_model([[0.5, 0.0], [0.5, 0.0]]), [0.5, 0.5]) == math.inf
    with pytest.raises(PreconditionError):
        gamma_closed_poisson(bernoulli_model(), [1.0])


def test_closed_form_agreement_random():
    rng = np.random.default_rng(21)
    for _ in range(20):
        model = random_poisson_model(rng)
        rho = random_direction(rng, model.m)
        assert gamma(model, rho).gamma == pytest.approx(gamma_closed_poisson(model, rho), abs=1e-8)


def test_boundary_direction_rejected():
    with pytest.raises(PreconditionError, match="interior margin"):
        gamma(poisson_model(MU2), [1.0, 0.0])
    with pytest.raises(PreconditionError, match="simplex"):
        gamma(poisson_model(MU2), [0.5, 0.6])


def test_unattained_supremum_diverges():
    # nobody ever has a type-2 child, so lambda_2 runs off to infinity
    dist = TableOffspring([[0, 0], [1, 0]], [0.6, 0.4])
    model = OffspringModel((dist, dist), [0.5, 0.5])
    with pytest.raises(SolverDivergence):
        gamma(model, [0.5, 0.5])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gamma_nonnegative_and_dual_consistent(seed):
    rng = np.random.default_rng(seed)
    model = random_table_model(rng) if seed % 2 else random_poisson_model(rng)
    rho = random_direction(rng, model.m, floor=0.02)
    res = gamma(model, rho)
    assert res.gamma >= -1e-12
    assert res.grad_residual <= 1e-10
    recon = sum(r * grad_log_mgf(model, k, res.lambda_star) for k, r in enumerate(rho))
    np.testing.assert_allclose(recon, rho, atol=1e-8)
    # no other lambda does better
    for _ in range(5):
        lam = res.lambda_star + rng.normal(scale=0.3, size=model.m)
        assert dual_objective(model, rho, lam) <= res.gamma + 1e-12


def test_envelope_gradient_matches_finite_differences():
    model = random_table_model(np.random.default_rng(22))
    rho = np.array([0.4, 0.6])
    res = gamma(model, rho)
    grad = rate_gradient(model, res)
    h = 1e-6
    d = np.array([1.0, -1.0])
    fd = (gamma(model, rho + h * d).gamma - gamma(model, rho - h * d).gamma) / (2 * h)
    assert grad @ d == pytest.approx(fd, rel=1e-6)


# -- rho* ---------------------------------------------------------------------


def test_rho_star_right_stochastic():
    res = rho_star(poisson_model(STOCHASTIC))
    assert np.abs(res.rho - [2 / 3, 1 / 3]).sum() <= 1e-6
    assert res.gamma <= 1e-9
    assert res.agree


def test_rho_star_one_type():
    res = rho_star(poisson1(0.8))
    np.testing.assert_array_equal(res.rho, [1.0])
    assert res.gamma == pytest.approx(0.0231436, abs=1e-7)


def test_rho_star_symmetric():
    model = poisson_model([[0.3, 0.2], [0.2, 0.3]])
    np.testing.assert_allclose(rho_star(model).rho, [0.5, 0.5], atol=1e-6)
    dist = TableOffspring([[0, 0], [1, 0], [0, 1], [1, 1]], [0.4, 0.2, 0.2, 0.2])
    swapped = TableOffspring([[0, 0], [0, 1], [1, 0], [1, 1]], [0.4, 0.2, 0.2, 0.2])
    np.testing.assert_allclose(rho_star(OffspringModel((dist, swapped), [0.5, 0.5])).rho, [0.5, 0.5], atol=1e-6)


def test_rho_star_matches_grid_minimum():
    model = poisson_model(MU2)
    res = rho_star(model)
    grid = np.linspace(0.001, 0.999, 999)
    vals = [gamma_closed_poisson(model, [r, 1 - r]) for r in grid]
    assert res.gamma <= min(vals) + 1e-12
    assert abs(res.rho[0] - grid[int(np.argmin(vals))]) < 2e-3
    np.testing.assert_allclose(res.rho, [4 / 7, 3 / 7], atol=1e-6)


def test_rho_star_ignores_root_law():
    rng = np.random.default_rng(23)
    model = random_table_model(rng)
    a = rho_star(model).rho
    b = rho_star(model.with_root([0.9, 0.1])).rho
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_zero_rate_iff_critical():
    crit = rho_star(poisson_model(STOCHASTIC))
    assert crit.gamma <= 1e-9
    np.testing.assert_allclose(crit.rho @ mean_matrix(poisson_model(STOCHASTIC)), crit.rho, atol=1e-7)
    assert rho_star(poisson_model(MU2)).gamma > 1e-4
    sub = table_model([{(0, 0): 0.6, (1, 0): 0.2, (0, 1): 0.2}, {(0, 0): 0.7, (1, 1): 0.3}])
    assert rho_star(sub).gamma > 1e-4


def test_rho_star_report_is_serialisable():
    import json

    json.dumps(rho_star(poisson_model(MU2)).to_dict())


# -- eigenvector check --------------------------------------------------------


def test_eigenvector_check_examples():
    rep = principal_eigenvector_check(poisson_model(STOCHASTIC))
    np.testing.assert_allclose(rep.eigenvector, [2 / 3, 1 / 3], atol=1e-12)
    assert rep.l1_distance <= 1e-6 and rep.irreducible
    rep = principal_eigenvector_check(poisson_model([[0.5, 0.5], [0.5, 0.5]]))
    np.testing.assert_allclose(rep.eigenvector, [0.5, 0.5], atol=1e-12)
    rep = principal_eigenvector_check(poisson_model(np.eye(2)))
    assert not rep.irreducible


def test_eigenvector_check_rejects_non_stochastic():
    with pytest.raises(PreconditionError, match="row sums"):
        principal_eigenvector_check(poisson_model(MU2))


def test_left_not_right_eigenvector():
    # rho* sits on the left Perron vector; the right one is (1, 1)/2 here
    v = left_perron_vector(STOCHASTIC)
    np.testing.assert_allclose(v @ np.array(STOCHASTIC), v, atol=1e-13)
    assert abs(v[0] - 0.5) > 0.1


# -- coordinatewise tilt ------------------------------------------------------


def test_tilt_one_type_poisson():
    sol = tilt(poisson1(0.8), [1.0])
    assert sol.tau[0] == pytest.approx(math.log(1.25), rel=1e-12)
    assert sol.phi_min[0] == pytest.approx(math.exp(0.2) * 0.8, rel=1e-12)
    assert sol.phi_min[0] == pytest.approx(0.977122, abs=1e-6)
    assert gamma_from_tilt(sol) == pytest.approx(gamma(poisson1(0.8), [1.0]).gamma, abs=1e-12)
    law = sol.tilted[0][0]
    assert isinstance(law, PoissonLaw)
    assert law.rate == pytest.approx(1.0, rel=1e-12) and law.offset == -1
    assert law.mean == pytest.approx(0.0, abs=1e-12)
    assert sol.derivative_residual.max() <= 1e-10


def test_tilt_critical_direction():
    sol = tilt(poisson_model(STOCHASTIC), [2 / 3, 1 / 3])
    np.testing.assert_allclose(sol.tau, 0, atol=1e-10)
    np.testing.assert_allclose(sol.phi_min, 1, atol=1e-12)


def test_tilting_identity_random():
    rng = np.random.default_rng(25)
    for _ in range(10):
        model = random_product_model(rng)
        rho = random_direction(rng, 2)
        sol = tilt(model, rho)
        assert sol.derivative_residual.max() <= 1e-10
        assert gamma(model, rho).gamma + np.sum(sol.log_phi_min) == pytest.approx(0, abs=1e-9)


def test_tilted_laws_are_distributions():
    rng = np.random.default_rng(26)
    model = random_product_model(rng)
    while model.is_poisson:
        model = random_product_model(rng)
    sol = tilt(model, [0.3, 0.7])
    for row in sol.tilted:
        for law in row:
            assert np.all(law.probs > 0)
            assert law.probs.sum() == pytest.approx(1.0, abs=1e-13)


def test_tilt_rejects_dependent_coordinates():
    model = table_model([{(0, 0): 0.5, (1, 1): 0.5}, {(0, 0): 0.5, (1, 0): 0.5}])
    with pytest.raises(PreconditionError, match="independent"):
        tilt(model, [0.5, 0.5])


def test_diagnostics_along_exact_ray():
    model = poisson_model(MU2)
    rho = np.array([0.5, 0.5])
    sol = tilt(model, rho)
    d1 = tilt_diagnostics(model, rho, [50, 50], sol)
    d2 = tilt_diagnostics(model, rho, [200, 200], sol)
    np.testing.assert_allclose(d1.centred_residual, 0, atol=1e-10)
    np.testing.assert_allclose(d1.M_hat, d1.y_mean, atol=1e-8)
    np.testing.assert_allclose(d1.M_hat, d2.M_hat, atol=1e-8)
    per = np.array([sum(r * sol.tilted[k][j].var for k, r in enumerate(rho)) for j in range(2)])
    np.testing.assert_allclose((d2.V_hat - d2.y_var) / 400, per, rtol=1e-12)
    assert np.all(d1.V_hat > 0)


def test_diagnostics_one_type_poisson():
    d = tilt_diagnostics(poisson1(0.8), [1.0], [100])
    # tilted X' is Poisson(1) - 1; the auxiliary term keeps the untilted law Poisson(0.8)
    assert d.V_hat[0] == pytest.approx(100 * 1.0 + 0.8, rel=1e-10)
    assert d.M_hat[0] == pytest.approx(0.8, abs=1e-9)


def test_diagnostics_table_derivative_law():
    # Y_1 for a two-type table takes the derivative law in coordinate 2
    marg = np.array([0.5, 0.3, 0.2])
    model = OffspringModel(
        (
            TableOffspring([[a, b] for a in range(3) for b in range(3)], np.outer(marg, marg).ravel()),
            TableOffspring([[a, b] for a in range(3) for b in range(3)], np.outer(marg, marg).ravel()),
        ),
        [0.5, 0.5],
    )
    d = tilt_diagnostics(model, [0.5, 0.5], [10, 10])
    deriv = np.array([0.3, 0.4]) / 0.7  # law of k-1 under k P(k) / E[X]
    mean_deriv = deriv @ [0, 1]
    mean_x = marg @ [0, 1, 2]
    np.testing.assert_allclose(d.y_mean, [2 * mean_x, mean_deriv + mean_x], rtol=1e-12)


def test_simplex_grid():
    pts = simplex_grid(3, 4)
    assert len(pts) == 3
    assert all(p.sum() == pytest.approx(1) and p.min() > 0 for p in pts)
    assert [p.tolist() for p in simplex_grid(2, 4)] == [[0.25, 0.75], [0.5, 0.5], [0.75, 0.25]]


def test_poisson_tilting_identity_against_pmf():
    # exp(t x) Poisson(mu) renormalised is Poisson(mu e^t)
    mu, t = 0.8, 0.4
    ks = np.arange(80)
    w = stats.poisson.pmf(ks, mu) * np.exp(t * ks)
    np.testing.assert_allclose(w / w.sum(), stats.poisson.pmf(ks, mu * math.exp(t)), rtol=1e-12, atol=1e-300)
    law = PoissonLaw(mu).tilted(t)
    assert law.rate == pytest.approx(mu * math.exp(t), rel=1e-14)
