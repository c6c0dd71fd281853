"""Exact total-progeny probabilities from generating functions.

The production path solves Good's implicit system

    G_{T_i}(s) = s_i * G_{X_i}(G_{T_1}(s), ..., G_{T_m}(s))

as a fixed point over truncated series.  Three slower routes compute the same
numbers by unrelated means and are kept as oracles:

* ``recursion_oracle``   -- subtree decomposition with explicit convolution powers;
* ``lagrange_good_oracle`` -- Lagrange-Good inversion with the K-matrix determinant;
* ``arborescent_oracle`` -- arborescent inversion, a sum of tree derivatives.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import PreconditionError, UnderflowAbort
from .model import OffspringModel, PoissonOffspring, TableOffspring, errors, log_mgf
from .series import (
    TruncatedSeries,
    component_shape,
    conv_component,
    iter_exponents,
    shift_component,
)

ORACLE_BUDGET = 10
TINY = np.finfo(float).tiny


@dataclass(frozen=True, eq=False)
class ProgenyTable:
    """``q[i]`` holds ``P(T^(i) = n)`` as series coefficients; ``mixed`` averages over the root law."""

    model: OffspringModel
    N: int
    q: tuple

    @property
    def m(self) -> int:
        return self.model.m

    @property
    def mixed(self) -> TruncatedSeries:
        total = TruncatedSeries.zero(self.m, self.N)
        for p, g in zip(self.model.root, self.q):
            if p:
                total = total + g.scale(float(p))
        return total

    def prob(self, n: Sequence[int], root: int | None = None) -> float:
        if root is None:
            return sum(float(p) * g.coeff(n) for p, g in zip(self.model.root, self.q) if p)
        return self.q[root].coeff(n)

    def size_pmf(self, root: int | None = None) -> np.ndarray:
        """``P(|T| = s)`` for ``s = 0..N``."""
        series = self.mixed if root is None else self.q[root]
        return np.array([series.component(d).sum() for d in range(self.N + 1)])

    def total_mass(self) -> float:
        return self.mixed.total()

    def rows(self):
        """CSV rows in graded lexicographic order of ``n``; per ``n`` the root types then ``mixed``."""
        mixed = self.mixed
        for n in iter_exponents(self.m, self.N, start=1):
            for i, g in enumerate(self.q):
                yield (*n, str(i + 1), g.coeff(n))
            yield (*n, "mixed", mixed.coeff(n))

    def write_csv(self, fh, comments: Sequence[str] = ()) -> None:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"n_{j + 1}" for j in range(self.m)] + ["root_type", "probability"])
        for row in self.rows():
            writer.writerow([*row[:-1], repr(float(row[-1]))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _check_model(model: OffspringModel) -> None:
    bad = errors(model)
    if bad:
        raise PreconditionError("invalid model: " + "; ".join(map(str, bad)))


def _check_underflow(series: Sequence[TruncatedSeries]) -> None:
    for i, g in enumerate(series):
        for d in range(g.order + 1):
            c = np.abs(g.component(d))
            if ((c > 0) & (c < TINY)).any():
                raise UnderflowAbort(
                    f"P(T^({i + 1}) = n) underflowed to a subnormal at |n| = {d}; reduce N"
                )


# ---------------------------------------------------------------------------
# production path
# ---------------------------------------------------------------------------


def offspring_pgf(model: OffspringModel, k: int, args: Sequence[TruncatedSeries]) -> TruncatedSeries:
    """Truncated composition ``G_{X_k}(args_1, ..., args_m)``."""
    if len(args) != model.m:
        raise ValueError(f"need {model.m} argument series, got {len(args)}")
    return model.offspring[k].pgf(args)


def fixed_point_step(model: OffspringModel, G: Sequence[TruncatedSeries]) -> list[TruncatedSeries]:
    """One Picard step ``G_i <- s_i G_{X_i}(G)``."""
    return [offspring_pgf(model, i, G).shift(i) for i in range(model.m)]


class _OnlinePoisson:
    """Degree-by-degree ``exp(sum_j mu_j (G_j - 1))`` for a growing list of components."""

    def __init__(self, mu: np.ndarray, G: list[list[np.ndarray]], m: int):
        self.mu, self.G, self.m = mu, G, m
        self.H: list[np.ndarray] = [np.zeros(component_shape(m, 0))]
        self.E = [np.full(component_shape(m, 0), math.exp(-float(mu.sum())))]

    def component(self, d: int) -> np.ndarray:
        if d == 0:
            return self.E[0]
        h = np.zeros(component_shape(self.m, d))
        for j, mu_j in enumerate(self.mu):
            if mu_j:
                h += mu_j * self.G[j][d]
        self.H.append(h)
        acc = np.zeros(component_shape(self.m, d))
        for k in range(1, d + 1):
            acc += k * conv_component(self.H[k], self.E[d - k])
        self.E.append(acc / d)
        return self.E[d]


class _OnlineTable:
    """Degree-by-degree ``sum_x p_x prod_j G_j ** x_j``.

    Each needed monomial ``G^x`` is built from its parent ``G^(x - e_j)`` (``j`` the
    first nonzero coordinate) times ``G_j``; since ``G_j`` has no constant term,
    degree ``d`` of a monomial only needs degrees below ``d`` of its parent.
    """

    def __init__(self, dist: TableOffspring, G: list[list[np.ndarray]], m: int):
        self.G, self.m = G, m
        self.probs = dict(zip(map(tuple, dist.support.tolist()), dist.probs))
        needed: set[tuple[int, ...]] = set()
        for x in self.probs:
            while any(x) and x not in needed:
                needed.add(x)
                j = next(i for i, v in enumerate(x) if v)
                x = tuple(v - (i == j) for i, v in enumerate(x))
        self.order = sorted(needed, key=lambda x: (sum(x), x))
        self.parent = {}
        for x in self.order:
            j = next(i for i, v in enumerate(x) if v)
            self.parent[x] = (j, tuple(v - (i == j) for i, v in enumerate(x)))
        self.M: dict[tuple[int, ...], list[np.ndarray]] = {x: [] for x in self.order}
        self.zero = tuple([0] * m)

    def _monomial(self, x, d):
        if x == self.zero:
            return np.full(component_shape(self.m, 0), 1.0) if d == 0 else None
        return self.M[x][d]

    def component(self, d: int) -> np.ndarray:
        for x in self.order:
            j, par = self.parent[x]
            acc = np.zeros(component_shape(self.m, d))
            for k in range(1, d + 1):
                pm = self._monomial(par, d - k)
                if pm is not None:
                    acc += conv_component(self.G[j][k], pm)
            self.M[x].append(acc)
        out = np.zeros(component_shape(self.m, d))
        for x, p in self.probs.items():
            mono = self._monomial(x, d)
            if mono is not None:
                out += p * mono
        return out


def _solve_graded(model: OffspringModel, N: int) -> list[TruncatedSeries]:
    m = model.m
    G = [[np.zeros(component_shape(m, 0))] for _ in range(m)]
    online = [
        _OnlinePoisson(d.mu, G, m) if isinstance(d, PoissonOffspring) else _OnlineTable(d, G, m)
        for d in model.offspring
    ]
    for d in range(N):
        new = [shift_component(online[i].component(d), i, m) for i in range(m)]
        for i in range(m):
            G[i].append(new[i])
    return [TruncatedSeries(m, N, comps) for comps in G]


def _solve_picard(model: OffspringModel, N: int) -> list[TruncatedSeries]:
    G = [TruncatedSeries.zero(model.m, N) for _ in range(model.m)]
    for _ in range(N):
        G = fixed_point_step(model, G)
    return G


def solve_progeny(model: OffspringModel, N: int, method: str = "graded") -> ProgenyTable:
    """``P(T^(i) = n)`` for all ``|n| <= N`` from the fixed point of Good's system.

    ``method="picard"`` runs exactly ``N`` full Picard sweeps from ``G = 0``.  The
    default ``"graded"`` reaches the same fixed point in Gauss-Seidel order: degree
    ``d + 1`` of every ``G_i`` is final once degrees ``<= d`` are, so each degree is
    computed once.
    """
    if N < 1:
        raise PreconditionError("N must be at least 1")
    _check_model(model)
    if method == "graded":
        G = _solve_graded(model, N)
    elif method == "picard":
        G = _solve_picard(model, N)
    else:
        raise ValueError(f"unknown method {method!r}")
    _check_underflow(G)
    return ProgenyTable(model, N, tuple(G))


# ---------------------------------------------------------------------------
# oracle 1: subtree decomposition
# ---------------------------------------------------------------------------


def _box_conv(a: np.ndarray, b: np.ndarray, N: int) -> np.ndarray:
    out = signal.convolve(a, b, method="direct") if a.ndim > 1 else np.convolve(a, b)
    return out[(slice(0, N + 1),) * a.ndim]


def recursion_oracle(model: OffspringModel, N: int) -> ProgenyTable:
    """Same contract as :func:`solve_progeny`, by direct subtree decomposition.

    ``q_i(n) = sum_x P(X_i = x) * P(x_1 copies of T^(1) + ... + x_m copies of T^(m) = n - e_i)``,
    evaluated with dense convolution powers on the box ``[0, N]^m``, one total size at a time.
    """
    if not model.is_table:
        raise PreconditionError("recursion oracle needs table offspring; convert with model.to_tables()")
    if N < 1:
        raise PreconditionError("N must be at least 1")
    _check_model(model)
    m = model.m
    shape = (N + 1,) * m
    sizes = np.indices(shape).sum(axis=0)
    q = [np.zeros(shape) for _ in range(m)]
    delta = np.zeros(shape)
    delta[(0,) * m] = 1.0

    for size in range(1, N + 1):
        layer = sizes == size - 1
        powers = [{0: delta} for _ in range(m)]

        def power(j, e):
            if e not in powers[j]:
                powers[j][e] = _box_conv(power(j, e - 1), q[j], N)
            return powers[j][e]

        new = []
        for i, dist in enumerate(model.offspring):
            acc = np.zeros(shape)
            for x, p in zip(dist.support.tolist(), dist.probs):
                term = delta
                for j, e in enumerate(x):
                    if e:
                        term = _box_conv(term, power(j, e), N)
                acc += p * term
            # mass at n - e_i with |n - e_i| = size - 1, moved to n
            shifted = np.zeros(shape)
            src = [slice(0, N + 1)] * m
            dst = [slice(0, N + 1)] * m
            src[i] = slice(0, N)
            dst[i] = slice(1, N + 1)
            shifted[tuple(dst)] = np.where(layer, acc, 0.0)[tuple(src)]
            new.append(shifted)
        for i in range(m):
            q[i] = q[i] + new[i]

    series = []
    for i in range(m):
        coeffs = {n: q[i][n] for n in iter_exponents(m, N, 1)}
        series.append(TruncatedSeries.from_dict(m, N, coeffs))
    return ProgenyTable(model, N, tuple(series))


# ---------------------------------------------------------------------------
# oracle 2: Lagrange-Good inversion
# ---------------------------------------------------------------------------


def _check_oracle_point(model: OffspringModel, n, budget: int) -> tuple[int, ...]:
    n = tuple(int(v) for v in n)
    if len(n) != model.m or min(n) < 0:
        raise PreconditionError(f"bad composition {n} for a {model.m}-type model")
    if sum(n) > budget:
        raise PreconditionError(f"|n| = {sum(n)} exceeds the oracle budget {budget}")
    _check_model(model)
    return n


def _offspring_series(model: OffspringModel, order: int) -> list[TruncatedSeries]:
    r = [TruncatedSeries.variable(model.m, order, j) for j in range(model.m)]
    return [offspring_pgf(model, i, r) for i in range(model.m)]


def series_det(matrix: list[list[TruncatedSeries]]) -> TruncatedSeries:
    """Determinant by cofactor expansion along the first row."""
    size = len(matrix)
    if size == 1:
        return matrix[0][0]
    total = None
    for c in range(size):
        minor = [row[:c] + row[c + 1 :] for row in matrix[1:]]
        term = matrix[0][c].mul(series_det(minor))
        if c % 2:
            term = -term
        total = term if total is None else total + term
    return total


def k_matrix(model: OffspringModel, order: int) -> list[list[TruncatedSeries]]:
    """``K_ij = delta_ij - (r_i / G_{X_i}) dG_{X_i}/dr_j``."""
    m = model.m
    gx = _offspring_series(model, order)
    K = []
    for i in range(m):
        factor = gx[i].inv().shift(i)
        row = []
        for j in range(m):
            entry = -factor.mul(gx[i].diff(j))
            if i == j:
                entry = entry + 1.0
            row.append(entry)
        K.append(row)
    return K


def lagrange_good_oracle(model: OffspringModel, n, budget: int = ORACLE_BUDGET) -> float:
    """``P(T = n) = sum_k p_k [r^n] r_k det K(r) prod_i G_{X_i}(r)^{n_i}``."""
    n = _check_oracle_point(model, n, budget)
    if model.m > 4:
        raise PreconditionError("cofactor determinant limited to m <= 4")
    order = max(sum(n), 1)
    m = model.m
    gx = _offspring_series(model, order)
    product = TruncatedSeries.constant(m, order, 1.0)
    for i in range(m):
        if n[i]:
            product = product.mul(gx[i] ** n[i])
    body = series_det(k_matrix(model, order)).mul(product)
    F = TruncatedSeries.zero(m, order)
    for k, p in enumerate(model.root):
        if p:
            F = F + TruncatedSeries.variable(m, order, k).scale(float(p))
    return F.mul(body).coeff(n)


# ---------------------------------------------------------------------------
# oracle 3: arborescent inversion
# ---------------------------------------------------------------------------


def prufer_trees(vertices: int):
    """All labelled trees on ``{0, ..., vertices-1}`` as parent maps rooted at 0.

    Yields dicts ``child -> parent``; every edge is directed towards vertex 0.
    """
    if vertices == 1:
        yield {}
        return
    for seq in itertools.product(range(vertices), repeat=vertices - 2):
        degree = [1] * vertices
        for v in seq:
            degree[v] += 1
        edges = []
        for v in seq:
            leaf = min(u for u in range(vertices) if degree[u] == 1)
            edges.append((leaf, v))
            degree[leaf] -= 1
            degree[v] -= 1
        u, w = [x for x in range(vertices) if degree[x] == 1]
        edges.append((u, w))
        adj = {v: [] for v in range(vertices)}
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        parent, stack = {}, [0]
        seen = {0}
        while stack:
            v = stack.pop()
            for nb in adj[v]:
                if nb not in seen:
                    seen.add(nb)
                    parent[nb] = v
                    stack.append(nb)
        yield parent


def path_tree(m: int) -> dict[int, int]:
    """Directed path ``m -> m-1 -> ... -> 1 -> 0``."""
    return {j: j - 1 for j in range(1, m + 1)}


def tree_derivative(funcs: Sequence[TruncatedSeries], parent: dict[int, int]) -> TruncatedSeries:
    """``prod_v (prod_{(i,v) in E} d/dr_i) f_v`` with vertex ``i >= 1`` carrying variable ``r_i``."""
    result = None
    for v, f in enumerate(funcs):
        for child, par in parent.items():
            if par == v:
                f = f.diff(child - 1)
        result = f if result is None else result.mul(f)
    return result


def _arborescent_parts(model: OffspringModel, n, budget: int):
    n = _check_oracle_point(model, n, budget)
    if min(n) < 1:
        raise PreconditionError(
            f"arborescent inversion divides by prod n_i and needs every n_i >= 1, got {n}; "
            "use solve_progeny for compositions with empty types"
        )
    order = sum(n)
    m = model.m
    gx = _offspring_series(model, order)
    F = TruncatedSeries.zero(m, order)
    for k, p in enumerate(model.root):
        if p:
            F = F + TruncatedSeries.variable(m, order, k).scale(float(p))
    funcs = [F] + [gx[i] ** n[i] for i in range(m)]
    target = tuple(v - 1 for v in n)
    return n, funcs, target


def arborescent_oracle(model: OffspringModel, n, budget: int = ORACLE_BUDGET, max_types: int = 4) -> float:
    """``(1 / prod n_i) [r^(n-1)] sum_T d(F, G_{X_1}^{n_1}, ..., G_{X_m}^{n_m}) / dT``, ``F = sum_k p_k r_k``."""
    if model.m > max_types:
        raise PreconditionError(f"tree enumeration limited to m <= {max_types}")
    n, funcs, target = _arborescent_parts(model, n, budget)
    total = 0.0
    for parent in prufer_trees(model.m + 1):
        total += tree_derivative(funcs, parent).coeff(target)
    return total / math.prod(n)


def path_tree_term(model: OffspringModel, n, budget: int = ORACLE_BUDGET) -> float:
    """The directed-path summand of the arborescent formula alone: a lower bound on ``P(T = n)``."""
    n, funcs, target = _arborescent_parts(model, n, budget)
    return tree_derivative(funcs, path_tree(model.m)).coeff(target) / math.prod(n)


# ---------------------------------------------------------------------------
# i.i.d. sum representation and its Chernoff envelope
# ---------------------------------------------------------------------------


def sum_representation(model: OffspringModel, counts, order: int) -> TruncatedSeries:
    """Series whose coefficients are ``P(sum of counts_k i.i.d. copies of X_k = a)``."""
    m = model.m
    gx = _offspring_series(model, order)
    out = TruncatedSeries.constant(m, order, 1.0)
    for k, c in enumerate(counts):
        if c:
            out = out.mul(gx[k] ** int(c))
    return out


def chernoff_envelope(model: OffspringModel, counts, a, lam) -> float:
    """``exp(-lam . a) prod_k E[exp(lam . X_k)]^{counts_k}``, an upper bound on the sum's pmf at ``a``."""
    lam = np.asarray(lam, dtype=float)
    log_bound = -float(lam @ np.asarray(a, float))
    log_bound += sum(c * log_mgf(model, k, lam) for k, c in enumerate(counts))
    return math.exp(log_bound)


def oracle_differences(model: OffspringModel, N: int, which: Sequence[str], budget: int = ORACLE_BUDGET) -> dict:
    """Maximum relative difference of each requested oracle against :func:`solve_progeny`."""
    table = solve_progeny(model, N)
    report: dict[str, dict] = {}
    if "recursion" in which:
        rec = recursion_oracle(model, N)
        worst = max(
            (rel_diff(table.prob(n, i), rec.prob(n, i)) for n in iter_exponents(model.m, N, 1) for i in range(model.m)),
            default=0.0,
        )
        report["recursion"] = {"points": sum(1 for _ in iter_exponents(model.m, N, 1)), "max_rel_diff": worst}
    for name, fn, positive in (
        ("lagrange", lagrange_good_oracle, False),
        ("arborescent", arborescent_oracle, True),
    ):
        if name not in which:
            continue
        pts = [n for n in iter_exponents(model.m, min(N, budget), 1) if not positive or min(n) >= 1]
        worst = max((rel_diff(table.prob(n), fn(model, n, budget)) for n in pts), default=0.0)
        report[name] = {"points": len(pts), "max_rel_diff": worst}
    return report


def rel_diff(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0
