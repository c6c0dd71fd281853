"""Inhomogeneous Erdős–Rényi graphs and the Poisson branching process that is their local limit.

A vertex of type ``i`` and a vertex of type ``j`` are joined independently with
probability ``min(kappa[i, j] / n, 1)``.  Edges are drawn block by block: for each
unordered type pair the number of edges is binomial, and that many distinct vertex
pairs are then chosen uniformly.  Components come from a disjoint-set forest.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelError
from .model import OffspringModel, PoissonOffspring, classify, ray


@dataclass(frozen=True, eq=False)
class KernelGraphSpec:
    n: int
    q: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        kappa = np.array(self.kappa, dtype=float, ndmin=2)
        if self.n < 1:
            raise ModelError("graph needs at least one vertex")
        if kappa.shape != (q.size, q.size):
            raise ModelError(f"kernel shape {kappa.shape} does not match {q.size} types")
        if (kappa < 0).any() or not np.allclose(kappa, kappa.T, rtol=0, atol=0):
            raise ModelError("kernel must be nonnegative and symmetric")
        if (q < 0).any() or abs(q.sum() - 1.0) > 1e-12:
            raise ModelError("type fractions must form a probability vector")
        q.setflags(write=False)
        kappa.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "kappa", kappa)

    @property
    def m(self) -> int:
        return self.q.size

    def type_counts(self) -> np.ndarray:
        return ray(self.q, self.n)


def load_spec(path) -> KernelGraphSpec:
    with open(Path(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return KernelGraphSpec(int(doc["n"]), doc["q"], doc["kappa"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed graph spec: {exc}") from exc


def local_limit_model(spec: KernelGraphSpec) -> OffspringModel:
    """Poisson offspring with ``mu[i, j] = q[j] * kappa[i, j]`` and root law ``q``."""
    mu = spec.kappa * spec.q[None, :]
    return OffspringModel(tuple(PoissonOffspring(row) for row in mu), spec.q)


class DisjointSet:
    """Union by size with path halving over ``0..n-1``."""

    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def roots(self) -> np.ndarray:
        """Representative of every element (fully compressed, vectorised)."""
        p = self.parent
        while True:
            nxt = p[p]
            if np.array_equal(nxt, p):
                return p.copy()
            p = nxt


def _distinct(k: int, draw) -> np.ndarray:
    """``k`` distinct pair codes: redraw the shortfall until no duplicates remain.

    Drawing with replacement until ``k`` distinct codes are seen yields a uniform
    ``k``-subset by symmetry.
    """
    codes = np.unique(draw(k))
    while codes.size < k:
        codes = np.unique(np.concatenate([codes, draw(k - codes.size)]))
    return codes


def sample_edges(spec: KernelGraphSpec, seed: int) -> np.ndarray:
    """Edge list ``(E, 2)`` of one graph sample; vertices are numbered type block by type block."""
    counts = spec.type_counts()
    offsets = np.concatenate([[0], np.cumsum(counts)])
    m = spec.m
    blocks = []
    for i in range(m):
        for j in range(i, m):
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i, j))))
            p = min(spec.kappa[i, j] / spec.n, 1.0)
            ni, nj = int(counts[i]), int(counts[j])
            pairs = ni * nj if i != j else ni * (ni - 1) // 2
            if p == 0 or pairs == 0:
                continue
            k = int(rng.binomial(pairs, p))
            if k == 0:
                continue
            if i != j:
                codes = _distinct(k, lambda c: rng.integers(0, ni, c) * nj + rng.integers(0, nj, c))
                a, b = np.divmod(codes, nj)
            else:
                def draw(c):
                    x = rng.integers(0, ni, c)
                    y = rng.integers(0, ni - 1, c)
                    y = y + (y >= x)
                    return np.minimum(x, y) * ni + np.maximum(x, y)

                codes = _distinct(k, draw)
                a, b = np.divmod(codes, ni)
            blocks.append(np.stack([a + offsets[i], b + offsets[j]], axis=1))
    if not blocks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(blocks)


@dataclass(frozen=True, eq=False)
class ComponentSample:
    counts: np.ndarray  # (components, m) type counts per component
    n: int
    supercritical: bool

    @property
    def sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def largest(self) -> int:
        return int(self.sizes.max())

    def vertex_size_fractions(self, smax: int) -> np.ndarray:
        """Fraction of vertices lying in components of size ``s`` for ``s = 0..smax``."""
        sizes = self.sizes
        hist = np.bincount(sizes, minlength=smax + 1)[: smax + 1]
        return hist * np.arange(smax + 1) / self.n

    def mean_composition(self, min_size: int) -> tuple[np.ndarray, int]:
        sizes = self.sizes
        sel = sizes >= min_size
        if not sel.any():
            return np.full(self.counts.shape[1], np.nan), 0
        return (self.counts[sel] / sizes[sel, None]).mean(axis=0), int(sel.sum())

    def write_csv(self, fh, comments=()) -> None:
        for line in comments:
            fh.write(f"# {line}\n")
        m = self.counts.shape[1]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component_id", "size"] + [f"count_{j + 1}" for j in range(m)])
        for cid, row in enumerate(self.counts):
            writer.writerow([cid, int(row.sum()), *(int(v) for v in row)])


def sample_components(spec: KernelGraphSpec, seed: int) -> ComponentSample:
    """Per-component type counts of one sampled graph.

    Components are listed in order of their smallest vertex.  ``supercritical`` flags
    a kernel whose local limit is supercritical (a giant component is then expected).
    """
    edges = sample_edges(spec, seed)
    ds = DisjointSet(spec.n)
    for a, b in edges.tolist():
        ds.union(a, b)
    roots = ds.roots()
    types = np.repeat(np.arange(spec.m), spec.type_counts())
    first_seen, label = np.unique(roots, return_inverse=True)
    # relabel components by smallest member vertex
    smallest = np.full(first_seen.size, spec.n)
    np.minimum.at(smallest, label, np.arange(spec.n))
    order = np.argsort(smallest)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    label = rank[label]
    counts = np.zeros((first_seen.size, spec.m), dtype=np.int64)
    np.add.at(counts, (label, types), 1)
    supercritical = classify(local_limit_model(spec)) == "supercritical"
    return ComponentSample(counts, spec.n, supercritical)


def size_sigma(prob: float, s: int, n: int) -> float:
    """Standard deviation of the vertex fraction in size-``s`` components.

    Counts of size-``s`` components are treated as Poisson with mean ``n * prob / s``.
    """
    return math.sqrt(s * prob / n)
