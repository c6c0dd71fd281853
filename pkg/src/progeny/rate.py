"""Exponential decay rate of ``P(T = n)`` along a composition direction.

``gamma(model, rho)`` is the Legendre-Fenchel supremum

    Gamma(rho) = sup_lam  lam . rho - sum_k rho_k log E[exp(lam . X_k)],

computed by damped Newton ascent.  ``tilt`` solves the same problem coordinate
by coordinate on the shifted variables ``X'_k = X_k - e_k`` (only possible when
offspring coordinates are independent) and is kept as a separate route; the two
agree through ``Gamma(rho) = -sum_j log phi_j(tau_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .errors import ConvergenceError, PreconditionError, SolverDivergence
from .model import (
    Law,
    OffspringModel,
    grad_log_mgf,
    hess_log_mgf,
    log_mgf,
    mean_matrix,
)

INTERIOR_MARGIN = 1e-6
LAMBDA_BOUND = 1e3


@dataclass(frozen=True)
class RateResult:
    rho: np.ndarray
    gamma: float
    lambda_star: np.ndarray
    grad_residual: float
    iterations: int


def _check_direction(rho, m: int, margin: float) -> np.ndarray:
    rho = np.asarray(rho, dtype=float).reshape(-1)
    if rho.shape != (m,):
        raise PreconditionError(f"direction has {rho.size} entries, model has {m} types")
    if abs(rho.sum() - 1.0) > 1e-9:
        raise PreconditionError(f"direction must lie on the simplex (sums to {rho.sum():.12g})")
    if m > 1 and rho.min() < margin:
        raise PreconditionError(
            f"direction {rho.tolist()} is outside the interior margin {margin:g} of the simplex"
        )
    return rho


def dual_objective(model: OffspringModel, rho, lam) -> float:
    """``lam . rho - sum_k rho_k log E[exp(lam . X_k)]``."""
    lam = np.asarray(lam, float)
    return float(lam @ rho) - sum(r * log_mgf(model, k, lam) for k, r in enumerate(rho) if r)


def _grad_hess(model, rho, lam):
    g = np.array(rho, dtype=float)
    H = np.zeros((len(rho), len(rho)))
    for k, r in enumerate(rho):
        if r:
            g -= r * grad_log_mgf(model, k, lam)
            H += r * hess_log_mgf(model, k, lam)
    return g, H


def gamma(
    model: OffspringModel,
    rho,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    margin: float = INTERIOR_MARGIN,
    lambda_bound: float = LAMBDA_BOUND,
) -> RateResult:
    """Rate function ``Gamma(rho)`` and its maximiser ``lambda_star``.

    Newton ascent from ``lam = 0`` with Armijo backtracking (factor 0.5, slope 1e-4).
    Raises :class:`SolverDivergence` when ``|lam|`` leaves ``lambda_bound``, which
    signals a direction where the supremum is not attained.
    """
    rho = _check_direction(rho, model.m, margin)
    lam = np.zeros(model.m)
    f = 0.0
    g, H = _grad_hess(model, rho, lam)
    it = 0
    while np.linalg.norm(g) > tol and it < max_iter:
        it += 1
        # ascent direction from the (negated, positive semidefinite) Hessian
        try:
            step = np.linalg.solve(H + 1e-14 * np.trace(H) * np.eye(model.m), g)
        except np.linalg.LinAlgError:
            step = g.copy()
        if not np.all(np.isfinite(step)) or step @ g <= 0:
            step = g.copy()
        t = 1.0
        slope = float(g @ step)
        while True:
            cand = lam + t * step
            f_new = dual_objective(model, rho, cand)
            if f_new >= f + 1e-4 * t * slope:
                break
            g_new, _ = _grad_hess(model, rho, cand)
            # near the optimum f stalls at rounding level; accept if the gradient shrinks
            if t == 1.0 and np.linalg.norm(g_new) < np.linalg.norm(g) and f_new >= f - 1e-14 * (1 + abs(f)):
                break
            t *= 0.5
            if t < 1e-20:
                raise ConvergenceError(f"line search failed at lambda = {lam.tolist()}")
        lam, f = cand, f_new
        if np.linalg.norm(lam) > lambda_bound:
            raise SolverDivergence(
                f"|lambda| exceeded {lambda_bound:g} for rho = {rho.tolist()}: supremum not attained"
            )
        g, H = _grad_hess(model, rho, lam)
    resid = float(np.linalg.norm(g))
    if resid > tol:
        raise ConvergenceError(f"Newton ascent stopped after {it} iterations with |grad| = {resid:.3g}")
    return RateResult(rho, float(f), lam, resid, it)


def gamma_closed_poisson(model: OffspringModel, rho) -> float:
    """``sum_j rho_j log(rho_j / nu_j) + nu_j - rho_j`` with ``nu = rho A``; Poisson models only."""
    if not model.is_poisson:
        raise PreconditionError("closed form needs every offspring law to be poisson_product")
    rho = np.asarray(rho, dtype=float)
    nu = rho @ mean_matrix(model)
    return float(np.sum(special.rel_entr(rho, nu) + nu - rho))


def rate_gradient(model: OffspringModel, result: RateResult) -> np.ndarray:
    """``dGamma/drho_k = lam*_k - log E[exp(lam* . X_k)]`` (envelope theorem)."""
    lam = result.lambda_star
    return lam - np.array([log_mgf(model, k, lam) for k in range(model.m)])


# ---------------------------------------------------------------------------
# the minimising direction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StartOutcome:
    start: np.ndarray
    rho: np.ndarray | None
    gamma: float | None
    projected_grad: float | None
    message: str


@dataclass(frozen=True)
class RhoStarResult:
    rho: np.ndarray
    gamma: float
    projected_grad: float
    starts: list = field(default_factory=list)
    agree: bool = True

    def to_dict(self) -> dict:
        return {
            "rho_star": self.rho.tolist(),
            "gamma": self.gamma,
            "projected_grad": self.projected_grad,
            "agree": self.agree,
            "starts": [
                {
                    "start": s.start.tolist(),
                    "rho": None if s.rho is None else s.rho.tolist(),
                    "gamma": s.gamma,
                    "projected_grad": s.projected_grad,
                    "message": s.message,
                }
                for s in self.starts
            ],
        }


def _softmax(theta_free: np.ndarray) -> np.ndarray:
    theta = np.append(theta_free, 0.0)
    return special.softmax(theta)


def rho_star(model: OffspringModel, *, tol: float = 1e-8, shrink: float = 0.5, agree_tol: float = 1e-6) -> RhoStarResult:
    """Minimise ``Gamma`` over the open simplex.

    ``rho = softmax(theta)`` (last logit pinned at 0), BFGS on ``theta`` with the
    envelope gradient, started from the simplex centre and from each vertex pulled
    towards the centre by ``shrink``.  Starts that disagree by more than
    ``agree_tol`` in ``Gamma`` are all reported and ``agree`` is set to False.
    """
    m = model.m
    if m == 1:
        res = gamma(model, [1.0])
        return RhoStarResult(np.ones(1), res.gamma, 0.0, [], True)

    centre = np.full(m, 1.0 / m)
    starts = [centre] + [(1 - shrink) * np.eye(m)[k] + shrink * centre for k in range(m)]

    def fun(theta):
        rho = _softmax(theta)
        if rho.min() < INTERIOR_MARGIN:
            return 1e6, np.zeros_like(theta)
        try:
            res = gamma(model, rho)
        except (SolverDivergence, ConvergenceError):
            return 1e6, np.zeros_like(theta)
        gr = rate_gradient(model, res)
        jac = np.diag(rho) - np.outer(rho, rho)
        return res.gamma, (jac @ gr)[:-1]

    outcomes = []
    for s in starts:
        theta0 = np.log(s[:-1]) - np.log(s[-1])
        try:
            opt = optimize.minimize(fun, theta0, jac=True, method="BFGS", options={"gtol": tol * 1e-2, "maxiter": 1000})
        except (ValueError, FloatingPointError) as exc:  # pragma: no cover - defensive
            outcomes.append(StartOutcome(s, None, None, None, f"failed: {exc}"))
            continue
        rho = _softmax(opt.x)
        try:
            res = gamma(model, rho)
        except (SolverDivergence, ConvergenceError, PreconditionError) as exc:
            outcomes.append(StartOutcome(s, None, None, None, f"failed: {exc}"))
            continue
        gr = rate_gradient(model, res)
        pg = float(np.abs(gr - gr.mean()).max())
        outcomes.append(StartOutcome(s, rho, float(res.gamma), pg, str(opt.message)))

    good = [o for o in outcomes if o.gamma is not None]
    if not good:
        raise ConvergenceError("no start of the rho* search converged")
    best = min(good, key=lambda o: o.gamma)
    agree = bool(max(o.gamma for o in good) - best.gamma <= agree_tol)
    return RhoStarResult(best.rho, best.gamma, best.projected_grad, outcomes, agree)


def left_perron_vector(A, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
    """Left Perron vector of a nonnegative matrix, normalised to the simplex."""
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    B = (A + np.eye(m)) / 2.0
    v = np.full(m, 1.0 / m)
    for _ in range(max_iter):
        w = v @ B
        w /= w.sum()
        if np.abs(w - v).max() <= tol:
            return w
        v = w
    return v


def is_irreducible(A) -> bool:
    A = np.asarray(A) > 0
    m = A.shape[0]
    reach = np.eye(m, dtype=bool) | A
    for _ in range(m):
        reach = reach | ((reach.astype(int) @ A.astype(int)) > 0)
    return bool(reach.all())


@dataclass(frozen=True)
class EigenReport:
    eigenvector: np.ndarray
    rho_star: np.ndarray
    l1_distance: float
    irreducible: bool
    row_sums: np.ndarray

    def to_dict(self) -> dict:
        return {
            "eigenvector": self.eigenvector.tolist(),
            "rho_star": self.rho_star.tolist(),
            "l1_distance": self.l1_distance,
            "irreducible": self.irreducible,
            "row_sums": self.row_sums.tolist(),
        }


def principal_eigenvector_check(model: OffspringModel, row_tol: float = 1e-9) -> EigenReport:
    """Compare ``rho*`` with the left Perron vector of a right-stochastic mean matrix."""
    A = mean_matrix(model)
    sums = A.sum(axis=1)
    if np.abs(sums - 1.0).max() > row_tol:
        raise PreconditionError(f"mean matrix is not right stochastic: row sums {sums.tolist()}")
    v = left_perron_vector(A)
    rs = rho_star(model).rho
    return EigenReport(v, rs, float(np.abs(v - rs).sum()), is_irreducible(A), sums)


# ---------------------------------------------------------------------------
# coordinatewise tilting of the shifted offspring X' = X - e_k
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TiltSolution:
    """``tau[j]`` minimises ``log phi_j``; ``tilted[k][j]`` is the tilted law of ``X'_{k,j}``."""

    rho: np.ndarray
    tau: np.ndarray
    log_phi_min: np.ndarray
    derivative_residual: np.ndarray
    tilted: list
    marginals: list

    @property
    def phi_min(self) -> np.ndarray:
        return np.exp(self.log_phi_min)


def _require_product(model: OffspringModel) -> None:
    for k, d in enumerate(model.offspring):
        if not d.is_product():
            raise PreconditionError(
                f"type {k + 1} offspring coordinates are not independent; coordinatewise tilting needs product laws"
            )


def shifted_marginals(model: OffspringModel) -> list[list[Law]]:
    """``laws[k][j]`` is the law of ``X'_{k,j} = X_{k,j} - [k == j]``."""
    return [[model.offspring[k].marginal(j).shifted(-int(k == j)) for j in range(model.m)] for k in range(model.m)]


def _log_phi(laws, rho, j, t):
    """``log phi_j(t)`` and its first two derivatives."""
    val = d1 = d2 = 0.0
    for k, r in enumerate(rho):
        if not r:
            continue
        law = laws[k][j]
        val += r * law.log_mgf(t)
        tl = law.tilted(t)
        d1 += r * tl.mean
        d2 += r * tl.var
    return val, d1, d2


def _minimise_1d(laws, rho, j, tol=1e-12, bound=LAMBDA_BOUND):
    h = lambda t: _log_phi(laws, rho, j, t)
    _, d0, _ = h(0.0)
    if abs(d0) <= tol:
        return 0.0
    # bracket the root of the increasing derivative by doubling away from 0
    direction = -1.0 if d0 > 0 else 1.0
    prev, step = 0.0, 1.0
    while True:
        t = direction * step
        if step > bound:
            raise SolverDivergence(f"phi_{j + 1} has no minimiser within |lambda| <= {bound:g}")
        if (h(t)[1] > 0) == (direction > 0):
            lo, hi = sorted((prev, t))
            break
        prev, step = t, step * 2
    t = 0.5 * (lo + hi)
    for _ in range(500):
        _, d1, d2 = h(t)
        if abs(d1) <= tol:
            return t
        if d1 > 0:
            hi = t
        else:
            lo = t
        newton = t - d1 / d2 if d2 > 0 else None
        t = newton if newton is not None and lo < newton < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(1.0, abs(t)):
            return t
    raise ConvergenceError(f"tilting parameter for coordinate {j + 1} did not converge")


def tilt(model: OffspringModel, rho, *, tol: float = 1e-12, margin: float = INTERIOR_MARGIN) -> TiltSolution:
    """Solve ``min_t log phi_j(t)``, ``phi_j(t) = prod_k E[exp(t X'_{k,j})]^{rho_k}``, for each ``j``."""
    rho = _check_direction(rho, model.m, margin)
    _require_product(model)
    laws = shifted_marginals(model)
    m = model.m
    tau = np.array([_minimise_1d(laws, rho, j, tol) for j in range(m)])
    vals = [_log_phi(laws, rho, j, tau[j]) for j in range(m)]
    tilted = [[laws[k][j].tilted(tau[j]) for j in range(m)] for k in range(m)]
    return TiltSolution(
        rho=rho,
        tau=tau,
        log_phi_min=np.array([v[0] for v in vals]),
        derivative_residual=np.array([abs(v[1]) for v in vals]),
        tilted=tilted,
        marginals=laws,
    )


@dataclass(frozen=True)
class TiltDiagnostics:
    n: np.ndarray
    M_hat: np.ndarray
    V_hat: np.ndarray
    centred_residual: np.ndarray
    y_mean: np.ndarray
    y_var: np.ndarray


def path_tree_y_laws(model: OffspringModel) -> list[list[Law]]:
    """Coordinate laws of the auxiliary vectors ``Y_k`` of the path-tree lower bound.

    ``Y_k`` has pgf ``(dG_{X_k}/dr_{k+1}) / C`` for ``k < m`` and ``Y_m = X_m``.  For a
    product law only coordinate ``k + 1`` changes, to its derivative law.
    """
    m = model.m
    out = []
    for k in range(m):
        row = []
        for j in range(m):
            law = model.offspring[k].marginal(j)
            if k < m - 1 and j == k + 1:
                law = law.derivative_law()
            row.append(law)
        out.append(row)
    return out


def tilt_diagnostics(model: OffspringModel, rho, n, solution: TiltSolution | None = None) -> TiltDiagnostics:
    """Tilted mean ``M_hat_j(n)`` and variance ``V_hat_j(n)`` of the coordinate-``j`` sum.

    The auxiliary ``Y`` terms enter untilted.
    """
    sol = solution if solution is not None else tilt(model, rho)
    n = np.asarray(n, dtype=float)
    m = model.m
    ylaws = path_tree_y_laws(model)
    tm = np.array([[sol.tilted[k][j].mean for j in range(m)] for k in range(m)])
    tv = np.array([[sol.tilted[k][j].var for j in range(m)] for k in range(m)])
    ym = np.array([[ylaws[k][j].mean for j in range(m)] for k in range(m)]).sum(axis=0)
    yv = np.array([[ylaws[k][j].var for j in range(m)] for k in range(m)]).sum(axis=0)
    return TiltDiagnostics(
        n=n,
        M_hat=n @ tm + ym,
        V_hat=n @ tv + yv,
        centred_residual=sol.rho @ tm,
        y_mean=ym,
        y_var=yv,
    )


def gamma_from_tilt(solution: TiltSolution) -> float:
    return -float(np.sum(solution.log_phi_min))


def gamma_grid(model: OffspringModel, rhos) -> list[RateResult]:
    return [gamma(model, r) for r in rhos]


def simplex_grid(m: int, k: int, margin: float = INTERIOR_MARGIN) -> list[np.ndarray]:
    """Interior points ``n / k`` of the simplex with every ``n_j >= 1``."""
    if m == 1:
        return [np.ones(1)]
    pts = []
    for head in np.ndindex(*(k,) * (m - 1)):
        rest = k - sum(head)
        if min(head) >= 1 and rest >= 1:
            pts.append(np.array([*head, rest], dtype=float) / k)
    return [p for p in pts if p.min() >= margin]


__all__ = [
    "RateResult",
    "RhoStarResult",
    "EigenReport",
    "TiltSolution",
    "TiltDiagnostics",
    "gamma",
    "gamma_closed_poisson",
    "rho_star",
    "principal_eigenvector_check",
    "tilt",
    "tilt_diagnostics",
    "gamma_from_tilt",
    "left_perron_vector",
    "simplex_grid",
    "dual_objective",
]
