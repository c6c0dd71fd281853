"""Offspring models of multi-type Galton-Watson processes.

Two offspring representations are supported:

* :class:`TableOffspring` -- finite support, a list of exponent vectors with masses;
* :class:`PoissonOffspring` -- independent Poisson coordinates ``X_{k,j} ~ Poisson(mu_{k,j})``.

Both expose the same small interface (moment generating function and its
derivatives, probability generating function over truncated series, exponential
tilting, one-dimensional marginals and batched sampling of i.i.d. sums), which
is what the rest of the package is written against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import special, stats

from .errors import ConvergenceError, ModelError
from .series import TruncatedSeries, polynomial_compose

ROOT_TOL = 1e-12
MASS_TOL = 1e-12
CRITICAL_TOL = 1e-9
POISSON_TAIL = 1e-15
# exp() overflows a double above this exponent
MAX_LOG = math.log(np.finfo(float).max)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# one-dimensional laws (marginals, tilted marginals, size-biased laws)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteLaw:
    """Law on a finite set of integers."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.int64))
        object.__setattr__(self, "probs", _frozen(self.probs))

    @property
    def mean(self) -> float:
        return float(self.probs @ self.values)

    @property
    def var(self) -> float:
        return float(self.probs @ (self.values - self.mean) ** 2)

    def log_mgf(self, t: float) -> float:
        return float(special.logsumexp(t * self.values, b=self.probs))

    def tilted(self, t: float) -> FiniteLaw:
        logw = t * self.values + np.log(self.probs)
        return FiniteLaw(self.values, np.exp(logw - special.logsumexp(logw)))

    def shifted(self, c: int) -> FiniteLaw:
        return FiniteLaw(self.values + c, self.probs)

    def derivative_law(self) -> FiniteLaw:
        """Law with pgf ``g'(s) / g'(1)``: size-biased, then shifted down by one."""
        keep = self.values > 0
        if not keep.any():
            raise ValueError("derivative of a pgf with no mass above zero is identically zero")
        w = self.values[keep] * self.probs[keep]
        return FiniteLaw(self.values[keep] - 1, w / w.sum())


@dataclass(frozen=True)
class PoissonLaw:
    """``Poisson(rate) + offset``."""

    rate: float
    offset: int = 0

    @property
    def mean(self) -> float:
        return self.rate + self.offset

    @property
    def var(self) -> float:
        return self.rate

    def log_mgf(self, t: float) -> float:
        return self.rate * math.expm1(t) + self.offset * t

    def tilted(self, t: float) -> PoissonLaw:
        return PoissonLaw(self.rate * math.exp(t), self.offset)

    def shifted(self, c: int) -> PoissonLaw:
        return PoissonLaw(self.rate, self.offset + c)

    def derivative_law(self) -> PoissonLaw:
        if self.offset:
            raise ValueError("derivative law is defined for unshifted laws only")
        # g'(s)/g'(1) = g(s) for a Poisson pgf
        return self


Law = Union[FiniteLaw, PoissonLaw]


# ---------------------------------------------------------------------------
# offspring distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TableOffspring:
    """Finite offspring law: rows of ``support`` are exponent vectors with masses ``probs``."""

    support: np.ndarray
    probs: np.ndarray
    kind = "table"

    def __post_init__(self):
        support = np.array(self.support, dtype=np.int64, ndmin=2)
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if support.shape[0] != probs.shape[0]:
            raise ModelError("table needs one mass per exponent vector")
        if support.shape[0] == 0:
            raise ModelError("table offspring law has empty support")
        if (support < 0).any():
            raise ModelError("exponent vectors must be nonnegative")
        if not np.all(np.isfinite(probs)):
            raise ModelError("table masses must be finite")
        if (probs <= 0).any():
            raise ModelError("zero or negative mass entries are not allowed in a table")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_dict(cls, masses: dict) -> TableOffspring:
        items = list(masses.items())
        return cls([x for x, _ in items], [p for _, p in items])

    @property
    def m(self) -> int:
        return self.support.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.support

    def prob_zero(self) -> float:
        zero = ~self.support.any(axis=1)
        return float(self.probs[zero].sum())

    def log_mgf(self, lam) -> float:
        return float(special.logsumexp(self.support @ np.asarray(lam, float), b=self.probs))

    def _tilt_weights(self, lam) -> np.ndarray:
        logw = self.support @ np.asarray(lam, float) + np.log(self.probs)
        return np.exp(logw - special.logsumexp(logw))

    def grad_log_mgf(self, lam) -> np.ndarray:
        return self._tilt_weights(lam) @ self.support

    def hess_log_mgf(self, lam) -> np.ndarray:
        w = self._tilt_weights(lam)
        centred = self.support - w @ self.support
        return (centred * w[:, None]).T @ centred

    def tilted(self, lam) -> TableOffspring:
        w = self._tilt_weights(lam)
        keep = w > 0  # entries whose tilted mass underflowed
        return TableOffspring(self.support[keep], w[keep])

    def marginal(self, j: int) -> FiniteLaw:
        values, inverse = np.unique(self.support[:, j], return_inverse=True)
        return FiniteLaw(values, np.bincount(inverse, weights=self.probs))

    def is_product(self, tol: float = MASS_TOL) -> bool:
        """True when the coordinates are independent (joint = product of marginals)."""
        margs = [self.marginal(j) for j in range(self.m)]
        lookup = [dict(zip(mg.values.tolist(), mg.probs)) for mg in margs]
        joint = {tuple(x): p for x, p in zip(self.support.tolist(), self.probs)}
        total = 0.0
        for x in np.ndindex(*(len(mg.values) for mg in margs)):
            point = tuple(int(margs[j].values[i]) for j, i in enumerate(x))
            expected = math.prod(lookup[j][v] for j, v in enumerate(point))
            total += expected
            if abs(joint.get(point, 0.0) - expected) > tol:
                return False
        return abs(total - 1.0) <= 1e-9

    def pgf(self, args: Sequence[TruncatedSeries]) -> TruncatedSeries:
        return polynomial_compose(self.support, self.probs, args)

    def draw_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        """For each entry of ``counts``, the sum of that many i.i.d. draws."""
        hits = rng.multinomial(counts, self.probs)
        return hits @ self.support

    def to_dict(self) -> dict:
        return {
            "kind": "table",
            "entries": [{"x": x, "p": float(p)} for x, p in zip(self.support.tolist(), self.probs)],
        }


@dataclass(frozen=True, eq=False)
class PoissonOffspring:
    """Independent Poisson coordinates with means ``mu``."""

    mu: np.ndarray
    kind = "poisson_product"

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        if mu.size == 0:
            raise ModelError("poisson_product needs at least one mean")
        if not np.all(np.isfinite(mu)) or (mu < 0).any():
            raise ModelError("Poisson means must be finite and nonnegative")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.mu.copy()

    def prob_zero(self) -> float:
        return math.exp(-float(self.mu.sum()))

    def log_mgf(self, lam) -> float:
        return float(self.mu @ np.expm1(np.asarray(lam, float)))

    def grad_log_mgf(self, lam) -> np.ndarray:
        return self.mu * np.exp(np.asarray(lam, float))

    def hess_log_mgf(self, lam) -> np.ndarray:
        return np.diag(self.grad_log_mgf(lam))

    def tilted(self, lam) -> PoissonOffspring:
        return PoissonOffspring(self.grad_log_mgf(lam))

    def marginal(self, j: int) -> Law:
        if self.mu[j] == 0:
            return FiniteLaw([0], [1.0])
        return PoissonLaw(float(self.mu[j]))

    def is_product(self, tol: float = MASS_TOL) -> bool:
        return True

    def pgf(self, args: Sequence[TruncatedSeries]) -> TruncatedSeries:
        exponent = TruncatedSeries.zero(args[0].m, args[0].order)
        for mu_j, a in zip(self.mu, args):
            if mu_j:
                exponent = exponent + (a - 1.0).scale(float(mu_j))
        return exponent.exp()

    def draw_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        # a sum of c i.i.d. Poisson(mu) draws is Poisson(c * mu)
        return rng.poisson(np.multiply.outer(counts, self.mu))

    def to_table(self, tail: float = POISSON_TAIL) -> tuple[TableOffspring, float]:
        """Truncate each coordinate where its tail mass drops below ``tail``.

        The table is not renormalised; the dropped mass is returned as an error bound.
        """
        axes = []
        for mu_j in self.mu:
            kmax = int(stats.poisson.isf(tail, mu_j)) if mu_j > 0 else 0
            k = np.arange(kmax + 1)
            axes.append(stats.poisson.pmf(k, mu_j) if mu_j > 0 else np.array([1.0]))
        grids = np.meshgrid(*[np.arange(len(a)) for a in axes], indexing="ij")
        support = np.stack([g.reshape(-1) for g in grids], axis=1)
        probs = np.ones(support.shape[0])
        for j, a in enumerate(axes):
            probs = probs * a[support[:, j]]
        keep = probs > 0
        dropped = 1.0 - float(math.fsum(probs[keep]))
        return TableOffspring(support[keep], probs[keep]), max(dropped, 0.0)

    def to_dict(self) -> dict:
        return {"kind": "poisson_product", "mu": self.mu.tolist()}


OffspringDist = Union[TableOffspring, PoissonOffspring]


@dataclass(frozen=True, eq=False)
class OffspringModel:
    """A multi-type branching process: one offspring law per type plus a root-type law."""

    offspring: tuple
    root: np.ndarray
    types: tuple = field(default=())

    def __post_init__(self):
        offspring = tuple(self.offspring)
        if not offspring:
            raise ModelError("model needs at least one type")
        root = np.array(self.root, dtype=float).reshape(-1)
        if not np.all(np.isfinite(root)):
            raise ModelError("root probabilities must be finite")
        root.setflags(write=False)
        types = tuple(self.types) or tuple(f"type{k + 1}" for k in range(len(offspring)))
        if len(types) != len(offspring):
            raise ModelError("one name per type is required")
        object.__setattr__(self, "offspring", offspring)
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "types", types)

    @property
    def m(self) -> int:
        return len(self.offspring)

    @property
    def is_poisson(self) -> bool:
        return all(isinstance(d, PoissonOffspring) for d in self.offspring)

    @property
    def is_table(self) -> bool:
        return all(isinstance(d, TableOffspring) for d in self.offspring)

    def with_root(self, root) -> OffspringModel:
        return OffspringModel(self.offspring, root, self.types)

    def to_tables(self, tail: float = POISSON_TAIL) -> tuple[OffspringModel, float]:
        """Table-only copy of the model plus the total truncated mass."""
        dists, dropped = [], 0.0
        for d in self.offspring:
            if isinstance(d, PoissonOffspring):
                d, lost = d.to_table(tail)
                dropped += lost
            dists.append(d)
        return OffspringModel(tuple(dists), self.root, self.types), dropped

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(model_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def validate(model: OffspringModel) -> list[Violation]:
    """Check every model invariant; problems are returned, never raised.

    Zero Poisson means are reported with severity ``"warning"`` (support-degenerate
    coordinates); everything else is an ``"error"``.
    """
    out: list[Violation] = []
    m = model.m
    root = model.root
    if root.shape != (m,):
        out.append(Violation("root", f"has length {root.size}, expected {m}"))
    else:
        if (root < 0).any():
            out.append(Violation("root", "has negative entries"))
        total = float(root.sum())
        if abs(total - 1.0) > ROOT_TOL:
            out.append(Violation("root", f"root sums to {total:.12g}"))

    for k, dist in enumerate(model.offspring):
        name = f"type {k + 1}"
        if dist.m != m:
            out.append(Violation(name, f"offspring vectors have length {dist.m}, expected {m}"))
            continue
        if isinstance(dist, TableOffspring):
            total = math.fsum(dist.probs)
            if abs(total - 1.0) > MASS_TOL:
                out.append(Violation(name, f"table masses sum to {total:.12g}"))
            if len({tuple(x) for x in dist.support.tolist()}) != dist.support.shape[0]:
                out.append(Violation(name, "table has repeated exponent vectors"))
        else:
            for j in np.flatnonzero(dist.mu == 0):
                out.append(
                    Violation(name, f"Poisson mean towards type {j + 1} is zero (support-degenerate)", "warning")
                )
        if dist.prob_zero() <= 0:
            out.append(Violation(name, "no mass at zero offspring, |T| = ∞ a.s."))
    return out


def errors(model: OffspringModel) -> list[Violation]:
    return [v for v in validate(model) if v.severity == "error"]


# ---------------------------------------------------------------------------
# moment generating functions
# ---------------------------------------------------------------------------


def log_mgf(model: OffspringModel, k: int, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    if not lam.any():
        return 0.0  # a probability law, even if its masses carry rounding
    return model.offspring[k].log_mgf(lam)


def mgf(model: OffspringModel, k: int, lam) -> float:
    """``E[exp(lam . X_k)]``; raises OverflowError when the value is not representable."""
    value = log_mgf(model, k, lam)
    if value > MAX_LOG:
        raise OverflowError(f"mgf exponent {value:.4g} overflows; use log_mgf instead")
    return math.exp(value)


def grad_log_mgf(model: OffspringModel, k: int, lam) -> np.ndarray:
    return model.offspring[k].grad_log_mgf(lam)


def hess_log_mgf(model: OffspringModel, k: int, lam) -> np.ndarray:
    return model.offspring[k].hess_log_mgf(lam)


# ---------------------------------------------------------------------------
# first-moment structure
# ---------------------------------------------------------------------------


def mean_matrix(model: OffspringModel) -> np.ndarray:
    """``A[k, j] = E[X_{k,j}]``."""
    A = np.vstack([d.mean for d in model.offspring]).astype(float)
    if not np.all(np.isfinite(A)) or (A < 0).any():
        raise ModelError("mean matrix must be finite and nonnegative")
    return A


def perron_root(A, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Spectral radius of a nonnegative matrix by power iteration.

    Iterates on ``A + I`` so periodic irreducible matrices converge too.  If the
    residual stalls (reducible matrices with tied blocks, Jordan structure) the
    largest eigenvalue modulus from a dense eigen-decomposition is returned.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[0]
    B = A + np.eye(m)
    v = np.full(m, 1.0 / m)
    r = 0.0
    for _ in range(max_iter):
        w = B @ v
        r = float(w.sum())
        if r == 0:
            return 0.0
        w /= r
        if np.abs(A @ w - (r - 1.0) * w).max() <= tol:
            return r - 1.0
        v = w
    eig = np.linalg.eigvals(A)
    if not np.all(np.isfinite(eig)):
        raise ConvergenceError("power iteration did not converge")
    return float(np.abs(eig).max())


def classify(model: OffspringModel, tol: float = CRITICAL_TOL) -> str:
    r = perron_root(mean_matrix(model))
    if r < 1.0 - tol:
        return "subcritical"
    if r > 1.0 + tol:
        return "supercritical"
    return "critical"


def ray(rho, N: int) -> np.ndarray:
    """Integer point of total size ``N`` closest to ``N * rho`` (largest remainder).

    Leftover units go to the largest fractional parts; ties go to the lowest index.
    """
    rho = np.asarray(rho, dtype=float)
    if N < 0:
        raise ValueError("N must be nonnegative")
    target = N * rho
    base = np.floor(target).astype(np.int64)
    rem = target - base
    deficit = int(N - base.sum())
    order = sorted(range(rho.size), key=lambda i: (-rem[i], i))
    for i in order[:deficit]:
        base[i] += 1
    return base


# ---------------------------------------------------------------------------
# JSON model files
# ---------------------------------------------------------------------------


def _dist_from_dict(obj: dict, m: int) -> OffspringDist:
    kind = obj.get("kind")
    if kind == "table":
        entries = obj.get("entries")
        if not isinstance(entries, list) or not entries:
            raise ModelError("table offspring needs a nonempty 'entries' list")
        support, probs = [], []
        for e in entries:
            x, p = e["x"], e["p"]
            if len(x) != m or any(int(v) != v for v in x):
                raise ModelError(f"bad exponent vector {x}")
            support.append([int(v) for v in x])
            probs.append(float(p))
        return TableOffspring(support, probs)
    if kind == "poisson_product":
        mu = obj.get("mu")
        if not isinstance(mu, list) or len(mu) != m:
            raise ModelError(f"poisson_product needs 'mu' of length {m}")
        return PoissonOffspring([float(v) for v in mu])
    raise ModelError(f"unknown offspring kind {kind!r}")


def model_from_dict(doc: dict) -> OffspringModel:
    try:
        root = [float(v) for v in doc["root"]]
        m = len(root)
        types = tuple(doc.get("types") or ())
        offspring = doc["offspring"]
        if len(offspring) != m:
            raise ModelError(f"{len(offspring)} offspring laws for {m} root entries")
        dists = tuple(_dist_from_dict(o, m) for o in offspring)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    return OffspringModel(dists, root, types)


def model_to_dict(model: OffspringModel) -> dict:
    return {
        "types": list(model.types),
        "root": model.root.tolist(),
        "offspring": [d.to_dict() for d in model.offspring],
    }


def load_model(path) -> OffspringModel:
    with open(Path(path), encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def save_model(model: OffspringModel, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def poisson_model(mu, root=None) -> OffspringModel:
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    m = mu.shape[0]
    root = np.full(m, 1.0 / m) if root is None else root
    return OffspringModel(tuple(PoissonOffspring(row) for row in mu), root)


def table_model(tables: Sequence[dict], root=None) -> OffspringModel:
    dists = tuple(TableOffspring.from_dict(t) for t in tables)
    m = dists[0].m
    root = np.full(m, 1.0 / m) if root is None else root
    return OffspringModel(dists, root)
