"""Truncated multivariate power series.

A series in ``m`` variables truncated at total degree ``N`` is stored as a
list of homogeneous components.  Component ``d`` is a dense array over the
first ``m - 1`` exponents, of shape ``(d + 1,) * (m - 1)``; the last exponent
is implied by ``n_m = d - sum(n_1..n_{m-1})``.  Entries whose leading
exponents already exceed ``d`` are always zero.

Keeping components separate means a truncated product is a sum of exact
(direct, non-FFT) convolutions of whole components, with no wasted work on
degrees above ``N``.  All probabilities downstream are nonnegative, so direct
summation keeps full relative precision even for coefficients near 1e-300.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import signal

__all__ = [
    "TruncatedSeries",
    "iter_exponents",
    "component_shape",
    "conv_component",
    "shift_component",
]


def component_shape(m: int, d: int) -> tuple[int, ...]:
    return (d + 1,) * (m - 1)


def iter_exponents(m: int, order: int, start: int = 0) -> Iterator[tuple[int, ...]]:
    """Exponent vectors with ``start <= |n| <= order`` in graded lexicographic order."""
    for d in range(start, order + 1):
        for head in itertools.product(range(d + 1), repeat=m - 1):
            rest = d - sum(head)
            if rest >= 0:
                yield (*head, rest)


@lru_cache(maxsize=None)
def _last_exponent(m: int, d: int) -> np.ndarray:
    """Array of implied last exponents ``d - sum(i)`` (clipped at 0) for component ``d``."""
    if m == 1:
        return np.array(d, dtype=float)
    idx = np.indices(component_shape(m, d)).sum(axis=0)
    out = np.clip(d - idx, 0, None).astype(float)
    out.setflags(write=False)
    return out


def conv_component(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two homogeneous components (exact direct convolution)."""
    if a.ndim == 0:
        return a * b
    if a.ndim == 1:
        return np.convolve(a, b)
    return signal.convolve(a, b, method="direct")


def shift_component(c: np.ndarray, j: int, m: int) -> np.ndarray:
    """Multiply a degree-``d`` component by ``s_j``; returns the degree ``d+1`` component."""
    if m == 1:
        return c.copy()
    if j == m - 1:
        return np.pad(c, [(0, 1)] * (m - 1))
    return np.pad(c, [(1, 0) if ax == j else (0, 1) for ax in range(m - 1)])


def diff_component(c: np.ndarray, j: int, m: int, d: int) -> np.ndarray:
    """Partial derivative in ``s_j`` of a degree-``d`` component (``d >= 1``)."""
    if m == 1:
        return c * d
    if j == m - 1:
        out = c * _last_exponent(m, d)
        return out[(slice(0, d),) * (m - 1)].copy()
    shape = [1] * (m - 1)
    shape[j] = d
    weights = np.arange(1, d + 1, dtype=float).reshape(shape)
    sl = [slice(0, d)] * (m - 1)
    sl[j] = slice(1, d + 1)
    return c[tuple(sl)] * weights


class TruncatedSeries:
    """Formal power series in ``m`` variables, truncated above total degree ``order``.

    Instances are treated as immutable; every operation returns a new series.
    """

    __slots__ = ("m", "order", "_comps")

    def __init__(self, m: int, order: int, comps: Sequence[np.ndarray] | None = None):
        if m < 1:
            raise ValueError("arity must be positive")
        if order < 0:
            raise ValueError("truncation order must be nonnegative")
        self.m = int(m)
        self.order = int(order)
        if comps is None:
            comps = [np.zeros(component_shape(m, d)) for d in range(order + 1)]
        else:
            comps = list(comps)
            if len(comps) != order + 1:
                raise ValueError("need exactly order + 1 components")
            for d, c in enumerate(comps):
                if c.shape != component_shape(m, d):
                    raise ValueError(f"component {d} has shape {c.shape}")
        for c in comps:
            if not np.all(np.isfinite(c)):
                raise ValueError("series coefficients must be finite")
            c.setflags(write=False)
        self._comps = comps

    # -- construction -------------------------------------------------------

    @classmethod
    def zero(cls, m: int, order: int) -> TruncatedSeries:
        return cls(m, order)

    @classmethod
    def constant(cls, m: int, order: int, value: float) -> TruncatedSeries:
        comps = [np.zeros(component_shape(m, d)) for d in range(order + 1)]
        comps[0] = np.full(component_shape(m, 0), float(value))
        return cls(m, order, comps)

    @classmethod
    def variable(cls, m: int, order: int, j: int) -> TruncatedSeries:
        """The series ``s_j`` (0-based ``j``)."""
        return cls.from_dict(m, order, {tuple(int(i == j) for i in range(m)): 1.0})

    @classmethod
    def from_dict(cls, m: int, order: int, coeffs: Mapping[Sequence[int], float]) -> TruncatedSeries:
        comps = [np.zeros(component_shape(m, d)) for d in range(order + 1)]
        for n, c in coeffs.items():
            n = tuple(int(v) for v in n)
            if len(n) != m or min(n) < 0:
                raise ValueError(f"bad exponent {n} for arity {m}")
            d = sum(n)
            if d <= order:
                comps[d][n[:-1]] += c
        return cls(m, order, comps)

    # -- access ---------------------------------------------------------------

    def component(self, d: int) -> np.ndarray:
        return self._comps[d]

    def coeff(self, n: Sequence[int]) -> float:
        n = tuple(int(v) for v in n)
        if len(n) != self.m:
            raise ValueError(f"exponent {n} has wrong arity")
        if min(n) < 0:
            return 0.0
        d = sum(n)
        if d > self.order:
            raise IndexError(f"degree {d} exceeds truncation order {self.order}")
        return float(self._comps[d][n[:-1]])

    __getitem__ = coeff

    def items(self, start: int = 0) -> Iterator[tuple[tuple[int, ...], float]]:
        for n in iter_exponents(self.m, self.order, start):
            yield n, float(self._comps[sum(n)][n[:-1]])

    def to_dict(self) -> dict[tuple[int, ...], float]:
        return {n: c for n, c in self.items() if c != 0.0}

    def total(self) -> float:
        return float(sum(c.sum() for c in self._comps))

    def max_abs(self) -> float:
        return max(float(np.abs(c).max(initial=0.0)) for c in self._comps)

    def nonzero_degrees(self) -> list[int]:
        return [d for d, c in enumerate(self._comps) if c.any()]

    def __repr__(self) -> str:
        terms = list(self.to_dict().items())[:6]
        body = " + ".join(f"{c:.6g}*s^{n}" for n, c in terms) or "0"
        more = " + ..." if len(self.to_dict()) > 6 else ""
        return f"TruncatedSeries(m={self.m}, N={self.order}: {body}{more})"

    # -- arithmetic -------------------------------------------------------------

    def _check(self, other: TruncatedSeries) -> None:
        if not isinstance(other, TruncatedSeries):
            raise TypeError(f"cannot combine TruncatedSeries with {type(other).__name__}")
        if other.m != self.m:
            raise ValueError(f"arity mismatch: {self.m} vs {other.m}")
        if other.order != self.order:
            raise ValueError(f"truncation order mismatch: {self.order} vs {other.order}")

    def __add__(self, other):
        if np.isscalar(other):
            return self + TruncatedSeries.constant(self.m, self.order, other)
        self._check(other)
        return TruncatedSeries(self.m, self.order, [a + b for a, b in zip(self._comps, other._comps)])

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, factor: float) -> TruncatedSeries:
        return TruncatedSeries(self.m, self.order, [c * factor for c in self._comps])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.scale(float(other))
        return self.mul(other)

    __rmul__ = __mul__

    def mul(self, other: TruncatedSeries) -> TruncatedSeries:
        self._check(other)
        N = self.order
        out = [np.zeros(component_shape(self.m, d)) for d in range(N + 1)]
        b_nz = other.nonzero_degrees()
        for da in self.nonzero_degrees():
            a = self._comps[da]
            for db in b_nz:
                if da + db > N:
                    break
                out[da + db] += conv_component(a, other._comps[db])
        return TruncatedSeries(self.m, N, out)

    def __pow__(self, k: int) -> TruncatedSeries:
        if k < 0:
            return self.inv() ** (-k)
        result = TruncatedSeries.constant(self.m, self.order, 1.0)
        base = self
        while k:
            if k & 1:
                result = result.mul(base)
            k >>= 1
            if k:
                base = base.mul(base)
        return result

    def diff(self, j: int) -> TruncatedSeries:
        """Partial derivative with respect to ``s_j`` (0-based); keeps the order."""
        self._check_var(j)
        m, N = self.m, self.order
        out = [diff_component(self._comps[d + 1], j, m, d + 1) for d in range(N)]
        out.append(np.zeros(component_shape(m, N)))
        return TruncatedSeries(m, N, out)

    def shift(self, j: int) -> TruncatedSeries:
        """Multiply by ``s_j`` (0-based), dropping the degree that falls off the end."""
        self._check_var(j)
        m, N = self.m, self.order
        out = [np.zeros(component_shape(m, 0))]
        out += [shift_component(self._comps[d], j, m) for d in range(N)]
        return TruncatedSeries(m, N, out)

    def _check_var(self, j: int) -> None:
        if not 0 <= j < self.m:
            raise IndexError(f"variable index {j} out of range for arity {self.m}")

    def inv(self) -> TruncatedSeries:
        """Multiplicative inverse; needs a nonzero constant term."""
        a0 = float(self._comps[0].reshape(-1)[0])
        if a0 == 0.0:
            raise ZeroDivisionError("series with zero constant term has no inverse")
        m, N = self.m, self.order
        out = [np.full(component_shape(m, 0), 1.0 / a0)]
        nz = [d for d in self.nonzero_degrees() if d > 0]
        for d in range(1, N + 1):
            acc = np.zeros(component_shape(m, d))
            for k in nz:
                if k > d:
                    break
                acc += conv_component(self._comps[k], out[d - k])
            out.append(-acc / a0)
        return TruncatedSeries(m, N, out)

    def exp(self) -> TruncatedSeries:
        """Formal exponential via the Euler-operator recurrence ``d E_d = sum_k k H_k E_{d-k}``."""
        m, N = self.m, self.order
        h0 = float(self._comps[0].reshape(-1)[0])
        out = [np.full(component_shape(m, 0), np.exp(h0))]
        nz = [d for d in self.nonzero_degrees() if d > 0]
        for d in range(1, N + 1):
            acc = np.zeros(component_shape(m, d))
            for k in nz:
                if k > d:
                    break
                acc += k * conv_component(self._comps[k], out[d - k])
            out.append(acc / d)
        return TruncatedSeries(m, N, out)

    def allclose(self, other: TruncatedSeries, rtol: float = 1e-12, atol: float = 0.0) -> bool:
        self._check(other)
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self._comps, other._comps))


def exp_series(a: TruncatedSeries) -> TruncatedSeries:
    return a.exp()


def inv(a: TruncatedSeries) -> TruncatedSeries:
    return a.inv()


def mul(a: TruncatedSeries, b: TruncatedSeries) -> TruncatedSeries:
    return a.mul(b)


def polynomial_compose(
    support: np.ndarray, probs: Iterable[float], args: Sequence[TruncatedSeries]
) -> TruncatedSeries:
    """Evaluate ``sum_x p_x prod_j args_j ** x_j`` with cached powers."""
    first = args[0]
    powers: list[dict[int, TruncatedSeries]] = [{0: TruncatedSeries.constant(first.m, first.order, 1.0)} for _ in args]

    def power(j: int, e: int) -> TruncatedSeries:
        cache = powers[j]
        if e not in cache:
            cache[e] = power(j, e - 1).mul(args[j])
        return cache[e]

    total = TruncatedSeries.zero(first.m, first.order)
    for x, p in zip(np.asarray(support), probs):
        term = TruncatedSeries.constant(first.m, first.order, float(p))
        for j, e in enumerate(x):
            if e:
                term = term.mul(power(j, int(e)))
        total = total + term
    return total
