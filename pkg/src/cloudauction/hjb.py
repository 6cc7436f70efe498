"""Stage-two bidding: CCN managers buying from cloud providers.

A manager with residual participation time ``r`` bids ``b(r) = exp(-gamma r) u - D(r)``
and falls back to the flat price ``varpi`` when ``r`` hits 0.  Under first
price the optimal bid is ``varpi * exp(-gamma r)``.  Under second price, with
bids and offered prices following the reciprocal law (density proportional
to 1/x on ``[a, z]``), the bid solves a first-order ODE that this module
integrates with fixed-step RK4.  ``integro_diff_residual`` plugs a solved
curve back into the integro-differential equation it came from.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq


@dataclass(frozen=True)
class StageTwoParams:
    u: float = 5.0
    gamma: float = 0.1
    varpi: float = 312.0
    mu_active: float = 0.6
    lambdaA: float = 0.2
    lambdaCCN: float = 0.5
    lambdaCP: float = 0.75
    Tp: float = 30.0
    a: float = 0.01
    z: float = 104.0
    q: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.a < self.z < self.varpi:
            raise ValueError(
                f"need 0 < a < z < varpi, got a={self.a}, z={self.z}, varpi={self.varpi}"
            )
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lambdaA < 0 or self.lambdaCCN < 0 or self.lambdaCP < 0:
            raise ValueError("rates must be >= 0")
        if not 0 <= self.mu_active <= 1:
            raise ValueError("mu_active must lie in [0, 1]")
        if not self.Tp > 0:
            raise ValueError("Tp must be positive")
        if self.q is not None and not 0 < self.q < self.z:
            raise ValueError(f"need 0 < q < z, got q={self.q}")

    @property
    def q_eff(self) -> float:
        return self.a if self.q is None else self.q

    @property
    def active_rate(self) -> float:
        return self.mu_active * self.lambdaA


# ------------------------------------------------------------ reciprocal law


def reciprocal_cdf(x, lo: float, hi: float):
    """cdf of the density 1 / (x ln(hi/lo)) on [lo, hi], saturating outside."""
    x = np.asarray(x, dtype=float)
    out = np.log(np.clip(x, lo, hi) / lo) / math.log(hi / lo)
    return out if out.ndim else float(out)


def reciprocal_pdf(x, lo: float, hi: float):
    x = np.asarray(x, dtype=float)
    inside = (x >= lo) & (x <= hi)
    with np.errstate(divide="ignore"):
        out = np.where(inside, 1.0 / (x * math.log(hi / lo)), 0.0)
    return out if out.ndim else float(out)


# ------------------------------------------------------------- first price


def _check_r(p: StageTwoParams, r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > p.Tp * (1 + 1e-12)):
        raise ValueError(f"residual time must lie in [0, {p.Tp}]")
    return r


def first_price_bid(p: StageTwoParams, r):
    r = _check_r(p, r)
    out = p.varpi * np.exp(-p.gamma * r)
    return out if out.ndim else float(out)


def first_price_utility(p: StageTwoParams, r):
    r = _check_r(p, r)
    out = (p.u - p.varpi) * np.exp(-p.gamma * r)
    return out if out.ndim else float(out)


# ------------------------------------------------------------ second price


def ode_constants(p: StageTwoParams, literal: bool = False) -> tuple:
    """Coefficients c1..c7 of y' + c1 y^c2 + c3 y^c4 + c5 y^c6 + c7 y = -gamma u e^{-gamma r}.

    By default the constants are the ones that actually follow from the
    integro-differential equation in the ``b(T) -> 0`` limit: the winning
    and paying terms share the factor ``ln(z/a) / (lambdaCCN + ln(z/a))``
    and there is no standalone ``y^c4`` term (``c3 = 0``).  ``literal=True``
    returns the coefficients as they are usually printed, with
    ``c3 = -gamma e^{-lambdaCP} q^{-lambdaCP/ln(z/q)}`` and
    ``c5 = mu lambdaA e^{-lambdaCCN} a^{-alpha} (1 + lambdaCCN)``.
    """
    a, z, q = p.a, p.z, p.q_eff
    if z <= a or z <= q:
        raise ValueError("degenerate support: need z > a and z > q")
    La = math.log(z) - math.log(a)
    Lq = math.log(z) - math.log(q)
    lc, lp, ml = p.lambdaCCN, p.lambdaCP, p.active_rate
    alpha = lc / La
    beta = lp / Lq
    fa = math.exp(-lc) * math.exp(-lc * math.log(a) / La)
    gq = math.exp(-lp) * math.exp(-lp * math.log(q) / Lq)
    c2 = alpha + beta + 1.0
    c4 = beta + 1.0
    c6 = alpha + 1.0
    c7 = p.gamma
    if literal:
        c1 = -ml * fa * gq + ml * lc * gq * fa / (lc + La)
        c3 = -p.gamma * gq
        c5 = ml * fa + ml * lc * fa
    else:
        keep = La / (lc + La)
        c1 = -ml * fa * gq * keep
        c3 = 0.0
        c5 = ml * fa * keep
    return (c1, c2, c3, c4, c5, c6, c7)


@dataclass
class BidCurve:
    step: float
    values: np.ndarray
    params: StageTwoParams
    crossing: Optional[float] = None
    clamped_at: Optional[float] = None
    literal: bool = False

    @property
    def r(self) -> np.ndarray:
        return self.step * np.arange(self.values.shape[0])

    def to_text(self) -> str:
        return "".join(f"{float(ri)!r}\t{float(bi)!r}\n" for ri, bi in zip(self.r, self.values))


def _make_rhs(p: StageTwoParams, consts: tuple):
    c1, c2, c3, c4, c5, c6, c7 = consts
    g, u, z = p.gamma, p.u, p.z

    def upper(r, y):
        # at or above z both cdfs saturate at 1 and every auction term vanishes
        return -c7 * y - g * u * math.exp(-g * r)

    def lower(r, y):
        # power terms vanish at 0; a stage that overshoots below 0 sees them as 0
        yp = max(y, 0.0)
        return -(
            c1 * yp ** c2 + c3 * yp ** c4 + c5 * yp ** c6 + c7 * y
        ) - g * u * math.exp(-g * r)

    def full(r, y):
        return upper(r, y) if y >= z else lower(r, y)

    return upper, lower, full


def _rk4(f, r, y, h):
    k1 = f(r, y)
    k2 = f(r + h / 2, y + h / 2 * k1)
    k3 = f(r + h / 2, y + h / 2 * k2)
    k4 = f(r + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def solve_second_price_curve(
    p: StageTwoParams,
    h: Optional[float] = None,
    *,
    literal: bool = False,
    on_nonpositive: str = "clamp",
) -> BidCurve:
    """Integrate the second-price bid ODE from b(0) = varpi to r = Tp.

    Classical RK4 on the fixed grid r_i = i h.  The right-hand side has a
    kink where the bid crosses z (the top of the bid support); the step
    containing that crossing is split at the crossing so the scheme keeps
    its order.  A curve that reaches 0 is clamped at 0 with a warning
    (``on_nonpositive="raise"`` raises instead); a curve that rises above
    varpi raises.
    """
    if h is None:
        h = p.Tp / 2000
    if not h > 0:
        raise ValueError("step must be positive")
    n = int(round(p.Tp / h))
    if n < 1 or not math.isclose(n * h, p.Tp, rel_tol=1e-9):
        raise ValueError(f"step {h} does not divide Tp = {p.Tp}")
    consts = ode_constants(p, literal=literal)
    upper, lower, full = _make_rhs(p, consts)
    y = np.empty(n + 1)
    y[0] = p.varpi
    crossing = None
    clamped = None
    for i in range(n):
        r, yi = i * h, y[i]
        if clamped is not None:
            y[i + 1] = 0.0
            continue
        if yi >= p.z:
            nxt = _rk4(upper, r, yi, h)
            if nxt < p.z:
                s = brentq(lambda s: _rk4(upper, r, yi, s) - p.z, 0.0, h, xtol=1e-15, rtol=1e-15)
                crossing = r + s
                nxt = _rk4(lower, r + s, p.z, h - s) if h - s > 0 else p.z
        else:
            nxt = _rk4(lower, r, yi, h)
        if not math.isfinite(nxt):
            raise FloatingPointError(f"bid curve became non-finite at r={r + h:.6g} ({p})")
        if nxt > p.varpi * (1 + 1e-12):
            raise ValueError(
                f"bid curve rose above the flat price at r={r + h:.6g}: {nxt!r} > {p.varpi}"
            )
        if nxt <= 0:
            if on_nonpositive == "raise":
                raise ValueError(f"bid curve reached 0 at r={r + h:.6g}")
            clamped = r + h
            warnings.warn(
                f"bid curve reached 0 at r={clamped:.6g}; clamped at 0 from there",
                RuntimeWarning,
                stacklevel=2,
            )
            nxt = 0.0
        y[i + 1] = nxt
    return BidCurve(h, y, p, crossing, clamped, literal)


def reduced_closed_form(p: StageTwoParams, r):
    """Bid curve with no auction activity (mu * lambdaA = 0): (varpi - gamma u r) e^{-gamma r}."""
    r = np.asarray(r, dtype=float)
    return (p.varpi - p.gamma * p.u * r) * np.exp(-p.gamma * r)


def expected_utility_curve(p: StageTwoParams, curve: BidCurve) -> np.ndarray:
    D = np.exp(-p.gamma * curve.r) * p.u - curve.values
    D[0] = p.u - p.varpi
    return D


# ------------------------------------------------------------ residual check


def _payment_integral(p: StageTwoParams, b_lo: float, b_hi: float) -> float:
    """Closed form of int_{b_lo}^{b_hi} e^{lc (F(x)-1)} x F'(x) dx (power-law branch)."""
    La = math.log(p.z / p.a)
    lc = p.lambdaCCN
    alpha = lc / La
    lo, hi = min(b_lo, p.z), min(b_hi, p.z)
    if hi <= lo:
        return 0.0
    coef = math.exp(-lc) * p.a ** (-alpha) / (La * (alpha + 1.0))
    return coef * (hi ** (alpha + 1.0) - lo ** (alpha + 1.0))


@dataclass
class Residual:
    r: float
    value: float
    one_sided: bool = False


def _derivative(curve: BidCurve, i: int) -> tuple:
    """Finite-difference b'(r_i); falls back to one-sided stencils at the ends
    and where a centered stencil would straddle the z crossing."""
    y, h = curve.values, curve.step
    n = y.shape[0] - 1
    cr = curve.crossing
    rs = curve.r

    def clean(lo, hi):
        if lo < 0 or hi > n:
            return False
        if cr is None:
            return True
        return not (rs[lo] < cr < rs[hi])

    if clean(i - 2, i + 2):
        return (y[i - 2] - 8 * y[i - 1] + 8 * y[i + 1] - y[i + 2]) / (12 * h), False
    # one-sided fourth-order, on whichever side stays clean
    if clean(i, i + 4):
        return (-25 * y[i] + 48 * y[i + 1] - 36 * y[i + 2] + 16 * y[i + 3] - 3 * y[i + 4]) / (12 * h), True
    if clean(i - 4, i):
        return (25 * y[i] - 48 * y[i - 1] + 36 * y[i - 2] - 16 * y[i - 3] + 3 * y[i - 4]) / (12 * h), True
    if clean(i - 1, i + 1):
        return (y[i + 1] - y[i - 1]) / (2 * h), False
    if i + 1 <= n:
        return (y[i + 1] - y[i]) / h, True
    return (y[i] - y[i - 1]) / h, True


def integro_diff_residual(curve: BidCurve, r: float, b_T: float = 0.0) -> Residual:
    """Left-hand side of the second-price integro-differential equation at grid point ``r``.

    ``b'`` comes from finite differences of the sampled curve.  The
    payment integral runs from ``b_T`` to ``b(r)``: trapezoid quadrature
    along the curve nodes from ``b(Tp)`` up to ``b(r)``, plus the closed
    form on ``[b_T, b(Tp)]`` that the curve never visits.  ``b_T = 0`` is
    the small-initial-bid limit the ODE is derived in.
    """
    p = curve.params
    h = curve.step
    i = int(round(r / h))
    if not math.isclose(i * h, r, rel_tol=1e-9, abs_tol=1e-12) or not 0 <= i < curve.values.shape[0]:
        raise ValueError(f"r={r} is not a grid point of the curve")
    y = curve.values
    b = float(y[i])
    db, one_sided = _derivative(curve, i)

    La = math.log(p.z / p.a)
    F = reciprocal_cdf(b, p.a, p.z)
    G = reciprocal_cdf(b, p.q_eff, p.z)
    win = math.exp(p.lambdaCCN * (F - 1.0))
    supply = 1.0 - math.exp(p.lambdaCP * (G - 1.0))
    ml = p.active_rate

    # integral along the curve: nodes i..N carry bids b(r_i) down to b(Tp)
    seg = y[i:]
    xs = np.minimum(seg, p.z)
    integrand = np.where(
        seg <= p.z,
        np.exp(p.lambdaCCN * (reciprocal_cdf(xs, p.a, p.z) - 1.0)) / La,
        0.0,
    )
    along = float(np.sum(0.5 * (integrand[:-1] + integrand[1:]) * (xs[:-1] - xs[1:])))
    below = _payment_integral(p, b_T, float(y[-1]))
    integral = along + below

    lhs = (
        b * (-p.gamma - ml * win * supply)
        - db
        + ml * p.lambdaCCN * supply * integral
        + ml * supply * math.exp(-p.lambdaCCN) * b_T
        - p.gamma * p.u * math.exp(-p.gamma * r)
    )
    return Residual(r, lhs, one_sided)


def max_residual(curve: BidCurve, interior_only: bool = True) -> float:
    n = curve.values.shape[0] - 1
    idx = range(1, n) if interior_only else range(n + 1)
    if curve.clamped_at is not None:
        last = int(curve.clamped_at / curve.step)
        idx = [i for i in idx if i < last - 2]
    return max(abs(integro_diff_residual(curve, i * curve.step).value) for i in idx)
