"""Payment chains of an observer under price matching.

States are grid indices of the observer's current payment; price matching
only ever moves the payment down, so every transition matrix is lower
triangular.  The first-price chain ``P`` is a single layer.  The
second-price chain has a primary layer ``Q`` (the stored bumped agent is
still in the market) and departure branches ``Z`` into first-price
sub-chains once the bumped agent leaves.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .dist import (
    BidDistribution,
    BidGrid,
    max_bid_law,
    poisson_cutoff,
)
from .obsa import Mechanism


@dataclass(frozen=True)
class ChainModel:
    grid: BidGrid
    P: np.ndarray
    pi0: np.ndarray
    Q: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    Pi0: Optional[np.ndarray] = None
    pB: Optional[float] = None
    lam: float = 0.0

    def entering(self, mechanism) -> np.ndarray:
        return self.pi0 if Mechanism(mechanism) is Mechanism.FIRST else self._need_second().Pi0

    def _need_second(self) -> "ChainModel":
        if self.Q is None:
            raise ValueError("model was built without the second-price layer")
        return self


def build_first_price(d: BidDistribution, lam: float):
    """Return ``(P, pi0)``.

    Off-diagonal ``P[x, y]`` (y < x) is the probability that some auction
    clears at grid index y.  Diagonals close each row, which folds in both
    "winner at or above x" and "nobody showed up".  ``pi0`` is the winning
    bid law conditioned on at least one bidder.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n = d.grid.size
    m = max_bid_law(d, lam, 1)
    P = np.tril(np.broadcast_to(m, (n, n)), k=-1).copy()
    P[np.diag_indices(n)] = 1.0 - P.sum(axis=1)
    if lam >= 1e-150:
        pi0 = m / -math.expm1(-lam)
    else:
        # lam -> 0 limit (and underflow): a lone bidder wins
        pi0 = d.pmf()
    return P, pi0 / pi0.sum()


def _mixed_power_sum(lam: float, F: np.ndarray) -> np.ndarray:
    """sum_{N>=1} p(N) F^(N-1) = exp(-lam) * expm1(lam F) / F, with the F -> 0 limit."""
    F = np.asarray(F, dtype=float)
    out = np.empty_like(F)
    small = F < 1e-300
    out[small] = lam * math.exp(-lam)
    Fs = F[~small]
    out[~small] = math.exp(-lam) * np.expm1(lam * Fs) / Fs
    return out


def _expm1_minus_x(x: np.ndarray) -> np.ndarray:
    """exp(x) - 1 - x, by its Taylor series where direct evaluation cancels."""
    x = np.asarray(x, dtype=float)
    out = np.expm1(x) - x
    small = np.abs(x) < 1e-2
    xs = x[small]
    # terms through x^7 leave a relative error below 1e-16
    out[small] = xs**2 * (1 / 2 + xs * (1 / 6 + xs * (1 / 24 + xs * (1 / 120 + xs * (1 / 720 + xs / 5040)))))
    return out


def second_price_entering(d: BidDistribution, lam: float, method: str = "closed") -> np.ndarray:
    """Law of the second-highest bid index, given at least two bidders.

    Two disjoint events make index k the second-highest: exactly one bid
    above k while the rest top out at k, or at least two bids tie at k with
    the rest below.  ``method="series"`` sums the Poisson mixture term by
    term with log-binomials; ``"closed"`` uses the exponential generating
    function.
    """
    F = d.cdf()
    Fp = np.concatenate(([0.0], F[:-1]))
    pk = F - Fp
    if lam == 0 or lam < 1e-150:
        # two-bidder limit (also where the mixture underflows)
        one_above = 2.0 * (1.0 - F) * pk
        tie = pk**2
        raw = one_above + tie
        return raw / raw.sum()
    if method == "closed":
        # exp(lam F) - exp(lam Fp) and the tie term written without cancellation
        one_above = lam * (1.0 - F) * np.exp(lam * (Fp - 1.0)) * np.expm1(lam * pk)
        tie = np.exp(lam * (Fp - 1.0)) * _expm1_minus_x(lam * pk)
        raw = one_above + tie
    elif method == "series":
        raw = np.zeros_like(F)
        with np.errstate(divide="ignore"):
            logpk, logFp = np.log(pk), np.log(Fp)
        for N in range(2, poisson_cutoff(lam) + 1):
            logw = -lam + N * math.log(lam) - gammaln(N + 1)
            first = N * (1.0 - F) * (F ** (N - 1) - Fp ** (N - 1))
            tie = np.zeros_like(F)
            for nn in range(2, N + 1):
                logc = gammaln(N + 1) - gammaln(nn + 1) - gammaln(N - nn + 1)
                with np.errstate(invalid="ignore"):
                    term = np.exp(logc + nn * logpk + (N - nn) * logFp)
                tie += np.nan_to_num(term) if N - nn > 0 else np.exp(logc + nn * logpk)
            raw += math.exp(logw) * (first + tie)
    else:
        raise ValueError(f"unknown method {method!r}")
    raw = np.maximum(raw, 0.0)
    return raw / raw.sum()


def build_second_price(d: BidDistribution, lam: float, pB: float):
    """Return ``(Q, Z, Pi0)``.

    With probability ``pB`` the stored bumped agent is still bidding; it
    bids exactly the observer's current payment, so the payment moves to
    y < x only when the best of the other N-1 bids is y (a lone bumped agent
    pays the floor, index 0).  With probability ``1 - pB`` it is gone and
    the next winning bid takes the payment into a first-price sub-chain.
    """
    if not 0.0 <= pB <= 1.0:
        raise ValueError(f"pB must lie in [0, 1], got {pB}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n = d.grid.size
    m = max_bid_law(d, lam, 1)
    Z = np.tril(np.broadcast_to((1.0 - pB) * m, (n, n)), k=-1).copy()
    Z[np.diag_indices(n)] = (1.0 - pB) - Z.sum(axis=1)

    F = d.cdf()
    if lam > 0:
        S = _mixed_power_sum(lam, F)
        Sprev = np.concatenate(([0.0], S[:-1]))
        # law of max over N-1 others; an empty field clears at index 0
        qlaw = S - Sprev
    else:
        qlaw = np.zeros(n)
    Q = np.tril(np.broadcast_to(pB * qlaw, (n, n)), k=-1).copy()
    Q[np.diag_indices(n)] = pB - Q.sum(axis=1)
    # clip roundoff on the closed-form diagonals
    np.clip(Q, 0.0, None, out=Q)
    np.clip(Z, 0.0, None, out=Z)
    Pi0 = second_price_entering(d, lam)
    return Q, Z, Pi0


def build_model(d: BidDistribution, lam: float, pB: Optional[float] = None) -> ChainModel:
    P, pi0 = build_first_price(d, lam)
    if pB is None:
        return ChainModel(d.grid, P, pi0, lam=lam)
    Q, Z, Pi0 = build_second_price(d, lam, pB)
    return ChainModel(d.grid, P, pi0, Q, Z, Pi0, pB, lam)


def leaving_probabilities(M: ChainModel, mechanism, Delta: int) -> np.ndarray:
    """Theta[i, j] = P(payment ends at j after Delta rounds | starts at i)."""
    if Delta < 0 or int(Delta) != Delta:
        raise ValueError("Delta must be a nonnegative integer")
    n = M.grid.size
    if Mechanism(mechanism) is Mechanism.FIRST:
        return np.linalg.matrix_power(M.P, int(Delta))
    M._need_second()
    # [[Q, Z], [0, P]]^D = [[Q^D, sum_k Q^(D-k) Z P^(k-1)], [0, P^D]]
    B = np.block([[M.Q, M.Z], [np.zeros((n, n)), M.P]])
    BD = np.linalg.matrix_power(B, int(Delta))
    return BD[:n, :n] + BD[:n, n:]


def leaving_sequence(M: ChainModel, mechanism, Delta_max: int):
    """Yield Theta for Delta = 0..Delta_max without recomputing powers."""
    n = M.grid.size
    first = Mechanism(mechanism) is Mechanism.FIRST
    theta = np.eye(n)
    Ppow = np.eye(n)
    yield theta
    for _ in range(Delta_max):
        if first:
            theta = theta @ M.P
        else:
            theta = M.Q @ theta + M.Z @ Ppow
            Ppow = Ppow @ M.P
        yield theta


def _revenue_from_theta(M: ChainModel, theta: np.ndarray, entering: np.ndarray) -> float:
    return float(entering @ theta @ M.grid.values())


def expected_revenue(M: ChainModel, mechanism, Delta: int) -> float:
    """Expected final payment of one winner, in money units."""
    theta = leaving_probabilities(M, mechanism, Delta)
    return _revenue_from_theta(M, theta, M.entering(mechanism))


def expected_index(M: ChainModel, mechanism, Delta: int) -> float:
    """Expected final payment as a grid index (no v_min offset)."""
    theta = leaving_probabilities(M, mechanism, Delta)
    return float(M.entering(mechanism) @ theta @ np.arange(M.grid.size))


def revenue_curve(M: ChainModel, mechanism, Delta_max: int) -> np.ndarray:
    ent = M.entering(mechanism)
    return np.array(
        [_revenue_from_theta(M, th, ent) for th in leaving_sequence(M, mechanism, Delta_max)]
    )


def revenue_lower_bound_first(M: ChainModel, Delta: int, order: int = 1) -> float:
    """Expected revenue counting only payment paths with at most ``order`` price drops.

    Order 1 keeps "never moved" and every single drop i -> j (with any
    number of self-loops before and after); order 2 adds the two-drop paths
    i -> r -> j.  Dropped paths carry nonnegative revenue, so this is a
    lower bound whenever v_min >= 0.
    """
    if Delta < 1:
        raise ValueError("Delta must be >= 1")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    n = M.grid.size
    D = np.diag(np.diag(M.P))
    N = M.P - D
    # W[h] = sum of length-t words over {D, N} containing exactly h N's
    W = [np.eye(n)] + [np.zeros((n, n)) for _ in range(order)]
    for _ in range(Delta):
        W = [W[0] @ D] + [W[h] @ D + W[h - 1] @ N for h in range(1, order + 1)]
    theta = sum(W)
    return _revenue_from_theta(M, theta, M.pi0)


@dataclass
class HittingTimes:
    k: np.ndarray
    rho: Optional[np.ndarray] = None
    P0: float = math.inf
    target: int = 0
    residual: float = 0.0


def _first_passage(T: np.ndarray, target: int, extra: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean hitting times of ``target`` for a lower-triangular substochastic T.

    Solves h_i = 1 + sum_j T_ij h_j + extra_i by forward substitution, with
    h_target = 0.  States that cannot leave themselves, or that can jump
    below the target (never to return), get +inf.
    """
    n = T.shape[0]
    h = np.full(n, math.inf)
    h[target] = 0.0
    for i in range(target + 1, n):
        row = T[i, :i]
        if np.any(row[:target] > 0):
            continue
        pivot = 1.0 - T[i, i]
        if pivot <= 1e-15:
            continue
        mask = row > 0
        acc = row[mask] @ h[:i][mask] if mask.any() else 0.0
        if not math.isfinite(acc):
            continue
        e = 0.0 if extra is None else extra[i]
        if not math.isfinite(e):
            continue
        h[i] = (1.0 + acc + e) / pivot
    return h


def _residual(A: np.ndarray, x: np.ndarray, b: np.ndarray) -> float:
    finite = np.isfinite(x)
    if not finite.any():
        return 0.0
    sub = A[np.ix_(finite, finite)]
    return float(np.max(np.abs(sub @ x[finite] - b[finite])))


def hitting_times(M: ChainModel, mechanism, target: int = 0) -> HittingTimes:
    """Mean rounds until the payment first reaches ``target`` (default: v_min)."""
    n = M.grid.size
    k = _first_passage(M.P, target)
    A = np.eye(n) - M.P
    A[target] = 0.0
    A[target, target] = 1.0
    b = np.ones(n)
    b[target] = 0.0
    res = _residual(A, k, b)
    first = Mechanism(mechanism) is Mechanism.FIRST
    if first:
        ent = M.pi0
        times = k
        rho = None
    else:
        M._need_second()
        Zk = np.zeros(n)
        for i in range(n):
            row = M.Z[i, : i + 1]
            mask = row > 0
            Zk[i] = row[mask] @ k[: i + 1][mask] if mask.any() else 0.0
        rho = _first_passage(M.Q, target, extra=Zk)
        if np.any(M.Z[target + 1 :, :target] > 0):
            rho[target + 1 :] = np.where(
                np.any(M.Z[target + 1 :, :target] > 0, axis=1), math.inf, rho[target + 1 :]
            )
        Aq = np.eye(n) - M.Q
        Aq[target] = 0.0
        Aq[target, target] = 1.0
        Az = -M.Z.copy()
        Az[target] = 0.0
        fin = np.isfinite(rho) & np.isfinite(k)
        if fin.any():
            lhs = Aq[np.ix_(fin, fin)] @ rho[fin] + Az[np.ix_(fin, fin)] @ k[fin]
            res = max(res, float(np.max(np.abs(lhs - b[fin]))))
        ent = M.Pi0
        times = rho
    with np.errstate(invalid="ignore"):
        mask = ent > 0
        P0 = float(np.sum(ent[mask] * times[mask]))
    return HittingTimes(k=k, rho=rho, P0=P0, target=target, residual=res)


def max_patience(P0: float, m: int) -> int:
    """Patience cap floor(P0 / m); warns when no positive patience is allowed."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be an integer >= 1, got {m}")
    if not P0 >= 0:
        raise ValueError("P0 must be nonnegative")
    if math.isinf(P0):
        raise ValueError("P0 is infinite: the payment chain never reaches v_min")
    cap = int(math.floor(P0 / m))
    if cap == 0:
        warnings.warn(
            f"no feasible patience: floor({P0} / {m}) = 0", RuntimeWarning, stacklevel=2
        )
    return cap


def dump_text(M: ChainModel) -> str:
    """Plain-text dump: ``[name]`` headers followed by comma-delimited rows."""
    buf = io.StringIO()
    g = M.grid
    buf.write(f"# grid v_min={g.v_min!r} v_max={g.v_max!r} delta={g.delta!r} L={g.L}\n")
    buf.write(f"# lam={M.lam!r} pB={M.pB!r}\n")

    def block(name, arr):
        if arr is None:
            return
        buf.write(f"[{name}]\n")
        a = np.atleast_2d(arr)
        for row in a:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")

    block("P", M.P)
    block("pi0", M.pi0)
    block("Q", M.Q)
    block("Z", M.Z)
    block("Pi0", M.Pi0)
    return buf.getvalue()


def load_text(text: str) -> dict:
    """Parse :func:`dump_text` output back into arrays keyed by block name."""
    blocks: dict = {}
    name = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            name = line.strip("[]")
            blocks[name] = []
            continue
        blocks[name].append([float(v) for v in line.split(",")])
    out = {}
    for k, rows in blocks.items():
        a = np.array(rows)
        out[k] = a[0] if k in ("pi0", "Pi0") else a
    return out
