"""Bid and participation laws on a quantized bid grid.

Bids live on the grid ``v_min + k * delta`` for ``k = 0..L``.  Two bid laws
are supported: discrete uniform and the concatenated sampled Laplace law
(a Laplace density sampled on the grid and renormalized).  The number of
bidders in one auction is Poisson with mean ``lam``.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson as _poisson

POISSON_TAIL = 1e-12


@dataclass(frozen=True)
class BidGrid:
    v_min: float
    v_max: float
    delta: float
    L: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be an integer >= 1, got {self.L}")
        span = self.v_max - self.v_min
        if not math.isclose(span, self.L * self.delta, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(
                f"v_max - v_min = {span} is not L*delta = {self.L * self.delta}"
            )

    @classmethod
    def from_range(cls, v_min: float, v_max: float, delta: float = 1.0) -> "BidGrid":
        steps = (v_max - v_min) / delta
        L = int(round(steps))
        if not math.isclose(steps, L, abs_tol=1e-9):
            raise ValueError(
                f"range [{v_min}, {v_max}] is not a whole number of steps of {delta}"
            )
        return cls(float(v_min), float(v_max), float(delta), L)

    @property
    def size(self) -> int:
        return self.L + 1

    def value(self, k) -> float:
        return self.v_min + k * self.delta

    def values(self) -> np.ndarray:
        return self.v_min + self.delta * np.arange(self.L + 1)

    def index(self, value: float) -> int:
        """Grid index of ``value``; raises if it is not a grid point."""
        k = (value - self.v_min) / self.delta
        ki = int(round(k))
        if not math.isclose(k, ki, abs_tol=1e-9) or not 0 <= ki <= self.L:
            raise ValueError(f"{value} is not on the bid grid")
        return ki


@dataclass(frozen=True)
class SampledLaplaceParams:
    grid: BidGrid
    mu: float
    w: float

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError(f"Laplace scale w must be positive, got {self.w}")
        b = (self.mu - self.grid.v_min) / self.grid.delta
        if not math.isclose(b, round(b), abs_tol=1e-9):
            raise ValueError(f"location mu={self.mu} is not on the bid grid")
        if not 0 <= round(b) <= self.grid.L:
            raise ValueError(
                f"location mu={self.mu} outside [{self.grid.v_min}, {self.grid.v_max}]"
            )

    @property
    def beta(self) -> int:
        return int(round((self.mu - self.grid.v_min) / self.grid.delta))

    @property
    def _rate(self) -> float:
        # decay per grid step
        return self.grid.delta / self.w


def laplace_normalizer(p: SampledLaplaceParams) -> float:
    """Normalizer Gamma: sum of the sampled density ``exp(-|x-mu|/w)/(2w)`` over the grid.

    Closed form: geometric series below the location, the location itself,
    geometric series above it.  Written with ``expm1`` so that tiny steps or
    large scales do not cancel.
    """
    s = p._rate
    beta, K = p.beta, p.grid.L
    below = -math.expm1(-beta * s) / math.expm1(s) if beta > 0 else 0.0
    above = (
        math.exp(-s) * math.expm1(-(K - beta) * s) / math.expm1(-s)
        if K > beta
        else 0.0
    )
    return (below + above + 1.0) / (2.0 * p.w)


def laplace_pmf(p: SampledLaplaceParams, k: int) -> float:
    if int(k) != k or not 0 <= k <= p.grid.L:
        raise ValueError(f"index {k} outside 0..{p.grid.L}")
    x = p.grid.value(k)
    return math.exp(-abs(x - p.mu) / p.w) / (2.0 * p.w * laplace_normalizer(p))


def laplace_cdf(p: SampledLaplaceParams, k: int) -> float:
    """Closed-form cdf at grid index ``k`` (any integer, including off-grid)."""
    K, beta, s = p.grid.L, p.beta, p._rate
    if k < 0:
        return 0.0
    if k > K:
        return 1.0
    c = 1.0 / (2.0 * p.w * laplace_normalizer(p))
    # sum_{k'=0}^{m} exp(-(beta-k') s) for m < beta
    def left(m):
        return math.exp(-(beta - m) * s) * math.expm1(-(m + 1) * s) / math.expm1(-s)

    if k < beta:
        return c * left(k)
    head = left(beta - 1) if beta > 0 else 0.0
    if k == beta:
        return c * (head + 1.0)
    tail = math.exp(-s) * math.expm1(-(k - beta) * s) / math.expm1(-s)
    return min(1.0, c * (head + 1.0 + tail))


class BidKind(str, Enum):
    UNIFORM = "uniform"
    LAPLACE = "laplace"


@dataclass(frozen=True)
class BidDistribution:
    kind: BidKind
    grid: BidGrid
    laplace: Optional[SampledLaplaceParams] = None

    def __post_init__(self):
        if self.kind is BidKind.LAPLACE and self.laplace is None:
            raise ValueError("sampled Laplace bids need SampledLaplaceParams")
        if self.laplace is not None and self.laplace.grid != self.grid:
            raise ValueError("Laplace parameters live on a different grid")

    @classmethod
    def uniform(cls, grid: BidGrid) -> "BidDistribution":
        return cls(BidKind.UNIFORM, grid)

    @classmethod
    def sampled_laplace(cls, grid: BidGrid, mu: float, w: float) -> "BidDistribution":
        return cls(BidKind.LAPLACE, grid, SampledLaplaceParams(grid, mu, w))

    def pmf(self) -> np.ndarray:
        n = self.grid.size
        if self.kind is BidKind.UNIFORM:
            return np.full(n, 1.0 / n)
        p = self.laplace
        x = self.grid.values()
        return np.exp(-np.abs(x - p.mu) / p.w) / (2.0 * p.w * laplace_normalizer(p))

    def cdf(self) -> np.ndarray:
        """cdf at indices 0..L; the last entry is exactly 1."""
        n = self.grid.size
        if self.kind is BidKind.UNIFORM:
            out = np.arange(1, n + 1) / n
        else:
            out = np.array([laplace_cdf(self.laplace, k) for k in range(n)])
        out[-1] = 1.0
        return out

    def cdf_at(self, k: int) -> float:
        if k < 0:
            return 0.0
        if k >= self.grid.L:
            return 1.0
        if self.kind is BidKind.UNIFORM:
            return (k + 1) / self.grid.size
        return laplace_cdf(self.laplace, k)

    def sample_indices(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind is BidKind.UNIFORM:
            return rng.integers(0, self.grid.size, size=size)
        idx = np.searchsorted(self._cdf_cache, rng.random(size), side="right")
        return np.minimum(idx, self.grid.L)

    @property
    def _cdf_cache(self) -> np.ndarray:
        cached = self.__dict__.get("_cdf_memo")
        if cached is None:
            cached = self.cdf()
            object.__setattr__(self, "_cdf_memo", cached)
        return cached

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.grid.v_min + self.grid.delta * self.sample_indices(rng, size)


@dataclass(frozen=True)
class ParticipationModel:
    """Bidders per auction ~ Poisson(lam)."""

    lam: float

    def __post_init__(self):
        if not self.lam >= 0 or not math.isfinite(self.lam):
            raise ValueError(f"participation mean must be finite and >= 0, got {self.lam}")


def poisson_pmf(lam: float, n: int) -> float:
    if lam < 0 or n < 0:
        raise ValueError("need lam >= 0 and n >= 0")
    if lam == 0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-lam + n * math.log(lam) - math.lgamma(n + 1))


def poisson_cutoff(lam: float, tail: float = POISSON_TAIL) -> int:
    """Smallest N* with P(N > N*) < tail."""
    if lam == 0:
        return 0
    n = int(_poisson.isf(tail, lam))
    while _poisson.sf(n, lam) >= tail:
        n += 1
    while n > 0 and _poisson.sf(n - 1, lam) < tail:
        n -= 1
    return n


def _lam_of(pm) -> float:
    return pm.lam if isinstance(pm, ParticipationModel) else float(pm)


def max_bid_law(d: BidDistribution, pm, min_bidders: int = 1) -> np.ndarray:
    """Vector over y=0..L of P(N >= min_bidders and max bid index = y)."""
    if min_bidders not in (1, 2):
        raise ValueError("min_bidders must be 1 or 2")
    lam = _lam_of(pm)
    F = d.cdf()
    Fprev = np.concatenate(([0.0], F[:-1]))
    if lam == 0:
        return np.zeros_like(F)
    # sum_{N>=0} p(N) F^N = exp(lam (F - 1)); the N = 0 terms cancel
    law = -np.exp(lam * (F - 1.0)) * np.expm1(-lam * (F - Fprev))
    if min_bidders == 2:
        law = law - lam * math.exp(-lam) * (F - Fprev)
    return np.maximum(law, 0.0)


def max_bid_law_series(d: BidDistribution, pm, min_bidders: int = 1) -> np.ndarray:
    """Same law as :func:`max_bid_law`, by explicit truncated Poisson mixing."""
    lam = _lam_of(pm)
    F = d.cdf()
    Fprev = np.concatenate(([0.0], F[:-1]))
    out = np.zeros_like(F)
    if lam == 0:
        return out
    for N in range(min_bidders, poisson_cutoff(lam) + 1):
        w = math.exp(-lam + N * math.log(lam) - gammaln(N + 1))
        out += w * (F**N - Fprev**N)
    return out


def max_bid_pmf(d: BidDistribution, pm, y: int, min_bidders: int = 1) -> float:
    if not 0 <= y <= d.grid.L:
        raise ValueError(f"index {y} outside 0..{d.grid.L}")
    return float(max_bid_law(d, pm, min_bidders)[y])


def prob_fewer_than(lam: float, min_bidders: int) -> float:
    """P(N < min_bidders), the "no auction outcome" mass."""
    return sum(poisson_pmf(lam, n) for n in range(min_bidders))
