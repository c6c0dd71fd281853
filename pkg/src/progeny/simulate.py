"""Monte Carlo total progeny, optionally under an exponentially tilted offspring law.

Trees are grown generation by generation for a whole block of records at once:
only per-type counts of unprocessed individuals are kept, never tree structure.
A type-``k`` generation of ``c`` parents contributes the sum of ``c`` i.i.d.
offspring vectors, drawn in one call (``Poisson(c * mu)`` for Poisson laws, a
multinomial over the support for tables).

Random streams: block ``b`` of ``block_size`` records draws from
``Philox(SeedSequence(seed, spawn_key=(b,)))``, so the output does not depend on
how many workers process the blocks.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import NoDataError, PreconditionError
from .model import OffspringModel, errors, log_mgf


@dataclass(frozen=True)
class SimConfig:
    samples: int
    cap: int = 10_000
    seed: int = 0
    tilt_lambda: tuple | None = None
    block_size: int = 8192
    workers: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise PreconditionError("samples must be >= 1")
        if self.cap < 1:
            raise PreconditionError("cap must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")
        if self.tilt_lambda is not None:
            object.__setattr__(self, "tilt_lambda", tuple(float(v) for v in self.tilt_lambda))


@dataclass(frozen=True, eq=False)
class SimBatch:
    """One record per simulated tree: ``T[r]``, ``weights[r]`` and ``censored[r]``.

    ``log_weights`` are accumulated generation by generation in log space; ``weights``
    is their exponential.  Censored records hold the partial progeny at the cap.
    """

    T: np.ndarray
    log_weights: np.ndarray
    censored: np.ndarray
    roots: np.ndarray
    fingerprint: str
    config: SimConfig

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def sizes(self) -> np.ndarray:
        return self.T.sum(axis=1)

    def __len__(self) -> int:
        return self.T.shape[0]

    def records(self):
        for t, w, c in zip(self.T, self.weights, self.censored):
            yield tuple(int(v) for v in t), float(w), bool(c)

    def write_csv(self, fh, extra: dict | None = None) -> None:
        header = {"config": asdict(self.config), "model": self.fingerprint}
        if extra:
            header.update(extra)
        for line in json.dumps(header, indent=1, sort_keys=True).splitlines():
            fh.write(f"# {line}\n")
        m = self.T.shape[1]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"t_{j + 1}" for j in range(m)] + ["weight", "censored"])
        for t, w, c in self.records():
            writer.writerow([*t, repr(w), int(c)])


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _simulate_block(model: OffspringModel, cfg: SimConfig, block: int, size: int, dists, log_m, lam):
    rng = _block_rng(cfg.seed, block)
    m = model.m
    roots = rng.choice(m, size=size, p=model.root)
    T = np.zeros((size, m), dtype=np.int64)
    T[np.arange(size), roots] = 1
    Z = T.copy()
    logw = np.zeros(size)
    censored = np.zeros(size, dtype=bool)
    active = np.arange(size)
    while active.size:
        Za = Z[active]
        children = np.zeros_like(Za)
        for k in range(m):
            counts = Za[:, k]
            if counts.any():
                children += dists[k].draw_sums(rng, counts)
        if lam is not None:
            logw[active] += Za @ log_m - children @ lam
        T[active] += children
        Z[active] = children
        over = T[active].sum(axis=1) > cfg.cap
        done = ~children.any(axis=1)
        censored[active[over]] = True
        active = active[~(over | done)]
    return T, logw, censored, roots


def sample(model: OffspringModel, config: SimConfig) -> SimBatch:
    """Simulate ``config.samples`` trees; with ``tilt_lambda`` every offspring draw is tilted.

    The importance weight of a finished tree is
    ``exp(-lam . (T - e_root)) * prod_k E[exp(lam . X_k)]^{T_k}``; it is accumulated
    one generation at a time.
    """
    bad = errors(model)
    if bad:
        raise PreconditionError("invalid model: " + "; ".join(map(str, bad)))
    lam = None if config.tilt_lambda is None else np.asarray(config.tilt_lambda, dtype=float)
    if lam is not None and lam.shape != (model.m,):
        raise PreconditionError(f"tilt vector needs {model.m} entries")
    if lam is None:
        dists, log_m = model.offspring, None
    else:
        dists = [d.tilted(lam) for d in model.offspring]
        log_m = np.array([log_mgf(model, k, lam) for k in range(model.m)])

    n_blocks = math.ceil(config.samples / config.block_size)
    sizes = [min(config.block_size, config.samples - b * config.block_size) for b in range(n_blocks)]

    def run(b):
        return _simulate_block(model, config, b, sizes[b], dists, log_m, lam)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    T, logw, cens, roots = (np.concatenate(x) for x in zip(*parts))
    return SimBatch(T, logw, cens, roots, model.fingerprint(), config)


def closed_form_log_weight(model: OffspringModel, T, root: int, lam) -> float:
    """Log importance weight of a completed tree from its progeny vector alone."""
    lam = np.asarray(lam, dtype=float)
    T = np.asarray(T, dtype=float)
    shifted = T.copy()
    shifted[root] -= 1
    return float(-lam @ shifted + sum(T[k] * log_mgf(model, k, lam) for k in range(model.m)))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    hits: int
    ess: float


def estimate_event(batch: SimBatch, mask: np.ndarray) -> Estimate:
    """Horvitz-Thompson estimate of ``P(event)``; censored records never count."""
    h = np.where(mask & ~batch.censored, batch.weights, 0.0)
    R = len(batch)
    value = float(h.mean())
    stderr = float(h.std(ddof=1) / math.sqrt(R)) if R > 1 else math.inf
    sq = float(np.sum(h * h))
    ess = float(h.sum() ** 2 / sq) if sq > 0 else 0.0
    return Estimate(value, stderr, int(np.count_nonzero(h)), ess)


def estimate_pmf(batch: SimBatch, n: Sequence[int]) -> Estimate:
    n = np.asarray(n)
    return estimate_event(batch, np.all(batch.T == n, axis=1))


def estimate_size(batch: SimBatch, lo: int, hi: int | None = None) -> Estimate:
    """``P(lo <= |T| <= hi)``; ``hi`` defaults to ``lo``."""
    hi = lo if hi is None else hi
    s = batch.sizes
    return estimate_event(batch, (s >= lo) & (s <= hi))


@dataclass(frozen=True)
class CompositionStats:
    mean: np.ndarray
    count: int
    weight_sum: float


def composition_stats(batch: SimBatch, lo: int, hi: int | None = None) -> CompositionStats:
    """Weighted mean of ``T / |T|`` over uncensored records with ``lo <= |T| <= hi``."""
    s = batch.sizes
    sel = (s >= lo) & (s <= (s.max() if hi is None else hi)) & ~batch.censored
    if not sel.any():
        raise NoDataError(f"no uncensored records with size in [{lo}, {hi}]")
    w = batch.weights[sel]
    comp = batch.T[sel] / s[sel, None]
    return CompositionStats(w @ comp / w.sum(), int(sel.sum()), float(w.sum()))


@dataclass(frozen=True)
class BatchSummary:
    records: int
    censored: int
    mean_weight: float
    size_mass: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(batch: SimBatch, sizes: Sequence[int] = ()) -> BatchSummary:
    masses = {}
    for s in sizes:
        est = estimate_size(batch, s)
        masses[str(s)] = {"estimate": est.value, "stderr": est.stderr, "hits": est.hits, "ess": est.ess}
    return BatchSummary(len(batch), int(batch.censored.sum()), float(batch.weights.mean()), masses)
