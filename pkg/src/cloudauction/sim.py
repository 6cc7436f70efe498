"""Monte Carlo scenarios and the combinatorial-auction baseline.

Replication seeds follow one rule everywhere: replication ``k`` of cell
``c`` in scenario ``s`` draws from ``SeedSequence([seed, s, c, k])``.  A
replication's stream never depends on which other replications ran or in
what order, so aggregates are reproducible and order-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from . import chain
from .dist import BidDistribution, BidGrid
from .hjb import BidCurve, StageTwoParams, solve_second_price_curve
from .obsa import (
    BundleValuation,
    MarketConfig,
    Mechanism,
    select_bundle,
    simulate_obsa,
)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    reps: int = 10000
    seed: int = 12345
    # bid grid and law
    bids: str = "uniform"
    v_min: float = 48.0
    v_max: float = 312.0
    delta: float = 1.0
    laplace_mu: float = 70.0
    laplace_w: float = 50.0
    # scenario 1
    lams: tuple = (5.0, 10.0, 20.0)
    deltas: tuple = (0, 1, 2, 3, 4, 5)
    pB: float = 0.5
    mechanisms: tuple = ("first", "second")
    # scenario 2
    stage2: StageTwoParams = field(default_factory=StageTwoParams)
    gammas: tuple = (0.05, 0.1, 0.2)
    steps: int = 2000
    # scenario 3
    server_types: int = 10
    capacity: int = 1000
    bundle_min: int = 1
    bundle_max: int = 10
    avail_lo: float = 1.0 / 15.0
    avail_hi: float = 1.0
    arrival_rate: float = 1000.0
    horizon: int = 30
    patience: int = 5
    # scenario 4
    mean_available: float = 93.0
    informed: float = 0.2
    low_period: int = 10
    instants: int = 200
    variance_instants: int = 2000
    variance_seeds: int = 10

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.steps < 1 or self.variance_seeds < 1 or self.variance_instants < 1:
            raise ValueError("steps, variance_seeds and variance_instants must be >= 1")
        for name in ("pB", "informed", "avail_lo", "avail_hi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.avail_lo > self.avail_hi:
            raise ValueError("avail_lo must not exceed avail_hi")
        if not 1 <= self.bundle_min <= self.bundle_max <= self.server_types:
            raise ValueError("need 1 <= bundle_min <= bundle_max <= server_types")
        if self.bids not in ("uniform", "laplace"):
            raise ValueError(f"bids must be 'uniform' or 'laplace', got {self.bids!r}")
        if any(d < 0 or int(d) != d for d in self.deltas):
            raise ValueError("deltas must be nonnegative integers")
        if any(l < 0 for l in self.lams):
            raise ValueError("lams must be >= 0")
        if self.low_period < 1 or self.instants < 0 or self.horizon < 0:
            raise ValueError("periods and horizons must be nonnegative (period >= 1)")
        for m in self.mechanisms:
            Mechanism(m)
        self.distribution()

    def grid(self) -> BidGrid:
        return BidGrid.from_range(self.v_min, self.v_max, self.delta)

    def distribution(self) -> BidDistribution:
        g = self.grid()
        if self.bids == "uniform":
            return BidDistribution.uniform(g)
        return BidDistribution.sampled_laplace(g, self.laplace_mu, self.laplace_w)


@dataclass
class MetricsReport:
    mean_income: float = 0.0
    income_variance: float = 0.0
    total_winners: int = 0
    total_sold: int = 0
    participants: list = field(default_factory=list)
    payments: list = field(default_factory=list)

    @property
    def all_payments(self) -> np.ndarray:
        if not self.payments:
            return np.zeros(0)
        return np.concatenate([np.asarray(p, dtype=float) for p in self.payments])


def payment_variance(report: MetricsReport) -> Optional[float]:
    """Unbiased sample variance of all recorded winner payments (None below 2)."""
    x = report.all_payments
    if x.size < 2:
        return None
    return float(np.var(x, ddof=1))


def _rng(seed: int, scenario: int, cell: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scenario, cell, rep]))


def _summary(incomes: np.ndarray) -> tuple:
    n = incomes.size
    mean = float(incomes.mean()) if n else 0.0
    var = float(incomes.var(ddof=1)) if n > 1 else 0.0
    return mean, var


# ----------------------------------------------------------------- scenario 1


@dataclass
class Scenario1Row:
    N: float
    Delta: int
    analytic_income: float
    simulated_income: float
    stderr: float


@dataclass
class Scenario1Result:
    mechanism: Mechanism
    rows: list
    reports: dict


def run_scenario1(cfg: ScenarioConfig, mechanism, *, model_grid: Optional[BidGrid] = None) -> Scenario1Result:
    """Simulated vs analytic expected income per (lam, Delta).

    One replication follows the winner of an opening auction (at least one
    bidder under first price, two under second price) through ``Delta``
    rounds of price matching.  The analytic column is the chain's
    expected revenue for the same setting.
    """
    mechanism = Mechanism(mechanism)
    d = cfg.distribution()
    if model_grid is not None and model_grid != d.grid:
        raise ValueError("analytic and simulated bid grids differ")
    code = 1 if mechanism is Mechanism.FIRST else 2
    min_open = 1 if mechanism is Mechanism.FIRST else 2
    rows, reports = [], {}
    cell = 0
    for lam in cfg.lams:
        model = chain.build_model(d, lam, cfg.pB)
        curve = chain.revenue_curve(model, mechanism, max(cfg.deltas))
        for Delta in cfg.deltas:
            mc = MarketConfig(d, lam, int(Delta), cfg.pB, min_open if lam > 0 else 0)
            incomes = np.empty(cfg.reps)
            winners = 0
            for k in range(cfg.reps):
                log = simulate_obsa(
                    mc, mechanism, int(Delta) + 1, _rng(cfg.seed, 10 + code, cell, k), cohort_rounds=1
                )
                incomes[k] = log.income
                winners += len(log.final)
            mean, var = _summary(incomes)
            se = math.sqrt(var / cfg.reps) if cfg.reps > 1 else 0.0
            rows.append(Scenario1Row(lam, int(Delta), float(curve[int(Delta)]), mean, se))
            reports[(lam, int(Delta))] = MetricsReport(
                mean_income=mean,
                income_variance=var,
                total_winners=winners,
                total_sold=winners,
                payments=[incomes],
            )
            cell += 1
    return Scenario1Result(mechanism, rows, reports)


# ----------------------------------------------------------------- scenario 2


def run_scenario2(cfg: ScenarioConfig) -> dict:
    """Second-price bid curves for each gamma, checked for shape.

    Every curve must be strictly decreasing after r = 0, and a larger gamma
    must give a lower curve on (0, Tp].
    """
    curves = {}
    for g in sorted(cfg.gammas):
        p = replace(cfg.stage2, gamma=float(g))
        try:
            curves[float(g)] = solve_second_price_curve(p, p.Tp / cfg.steps)
        except (ValueError, FloatingPointError) as exc:
            raise RuntimeError(f"bid curve failed for gamma={g}: {exc}") from exc
    keys = sorted(curves)
    for g in keys:
        if g > 0 and not np.all(np.diff(curves[g].values) < 0):
            raise RuntimeError(f"bid curve for gamma={g} is not strictly decreasing")
    for g1, g2 in zip(keys, keys[1:]):
        if not np.all(curves[g2].values[1:] < curves[g1].values[1:]):
            raise RuntimeError(f"curves for gamma={g1} and gamma={g2} cross on (0, Tp]")
    return curves


# --------------------------------------------------- combinatorial baseline


@dataclass(frozen=True)
class Demand:
    agent: int
    bundle: Mapping
    bid: float

    @property
    def size(self) -> int:
        return int(sum(self.bundle.values()))


@dataclass
class Allocation:
    winners: list
    payments: dict
    remaining: dict


def combinatorial_baseline_round(demands: Sequence[Demand], capacities: Mapping) -> Allocation:
    """Greedy first-price winner determination for one round.

    Demands are served in decreasing bid per requested server (ties by
    agent id) while every type they need still has room.  A demand that
    exceeds a type's whole capacity can never be served and is skipped.
    """
    remaining = dict(capacities)
    order = sorted(demands, key=lambda d: (-d.bid / max(d.size, 1), d.agent))
    winners, payments = [], {}
    for dm in order:
        if dm.size == 0:
            continue
        if any(n > capacities.get(t, 0) for t, n in dm.bundle.items()):
            continue
        if all(n <= remaining.get(t, 0) for t, n in dm.bundle.items()):
            for t, n in dm.bundle.items():
                remaining[t] -= n
            winners.append(dm.agent)
            payments[dm.agent] = dm.bid
    return Allocation(winners, payments, remaining)


def allocation_welfare(demands: Sequence[Demand], alloc: Allocation) -> float:
    chosen = set(alloc.winners)
    return float(sum(d.bid for d in demands if d.agent in chosen))


# ----------------------------------------------------------------- scenario 3


@dataclass
class Scenario3Result:
    obsa: MetricsReport
    baseline: MetricsReport


def _draw_customers(rng, cfg: ScenarioConfig, n: int, values_grid: np.ndarray):
    out = []
    for _ in range(n):
        k = int(rng.integers(cfg.bundle_min, cfg.bundle_max + 1))
        types = rng.choice(cfg.server_types, size=k, replace=False)
        vals = values_grid[rng.integers(0, values_grid.size, size=k)]
        out.append({int(t): float(v) for t, v in zip(types, vals)})
    return out


def run_scenario3(cfg: ScenarioConfig, rep: int = 0) -> Scenario3Result:
    """OBSA vs sequential combinatorial auction for multi-type demand.

    Each minute every server type offers ``capacity`` auction slots, each
    holding a server with that type's availability rate.  Customers arrive
    at ``arrival_rate`` per minute, need one server of each of 1..10
    random types with additive values, and wait until served.  Under OBSA
    each type runs its own second-price auctions (a winner pays the next
    bid down) and winners match their price down to the lowest clearing
    price of their type during ``patience`` minutes.  The baseline sells
    whole bundles greedily at the bundle bid.  Both markets see the same
    customers and the same server availability.
    """
    rng = _rng(cfg.seed, 3, 0, rep)
    grid = cfg.grid()
    values_grid = grid.values()
    rates = rng.uniform(cfg.avail_lo, cfg.avail_hi, size=cfg.server_types)
    arrivals = [int(rng.poisson(cfg.arrival_rate)) for _ in range(cfg.horizon)]
    supply = rng.binomial(cfg.capacity, rates, size=(cfg.horizon, cfg.server_types))
    customers = [_draw_customers(rng, cfg, n, values_grid) for n in arrivals]
    ties = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 1, rep]))

    # ------------------------------ OBSA
    waiting: dict = {}
    won: dict = {}
    cid = 0
    obs_type, obs_pay, obs_deadline, obs_owner = [], [], [], []
    settled_pay: dict = {}
    for t in range(cfg.horizon):
        for c in customers[t]:
            waiting[cid] = dict(c)
            won[cid] = {}
            cid += 1
        clearing = np.full(cfg.server_types, np.inf)
        for ty in range(cfg.server_types):
            bidders = [(a, need[ty]) for a, need in waiting.items() if ty in need]
            if not bidders or supply[t, ty] == 0:
                continue
            ids = np.array([a for a, _ in bidders])
            vals = np.array([v for _, v in bidders])
            order = np.lexsort((ties.random(len(vals)), -vals))
            s = min(int(supply[t, ty]), len(order))
            assert s <= cfg.capacity
            ranked = vals[order]
            nxt = np.append(ranked[1:], grid.v_min)
            for j in range(s):
                a = int(ids[order[j]])
                price = float(nxt[j])
                won[a][ty] = len(obs_pay)
                obs_type.append(ty)
                obs_pay.append(price)
                obs_deadline.append(t + cfg.patience)
                obs_owner.append(a)
                del waiting[a][ty]
            clearing[ty] = float(nxt[:s].min())
        if obs_pay:
            ty_arr = np.asarray(obs_type)
            pay = np.asarray(obs_pay)
            dl = np.asarray(obs_deadline)
            watching = dl >= t
            new = np.where(watching, np.minimum(pay, clearing[ty_arr]), pay)
            obs_pay = list(new)
        for a in [a for a, need in waiting.items() if not need]:
            del waiting[a]
    # windows still open at the end of the horizon settle there
    per_owner: dict = {}
    for i, (a, ty) in enumerate(zip(obs_owner, obs_type)):
        per_owner.setdefault(a, {})[ty] = i
    obsa_payments, sold = [], 0
    for a, servers in per_owner.items():
        values = {ty: customers_value(customers, a, ty) for ty in servers}
        pays = {ty: obs_pay[i] for ty, i in servers.items()}
        keep, _ = select_bundle(BundleValuation.additive(values, pays))
        for ty in keep:
            obsa_payments.append(pays[ty])
        sold += len(keep)
    obsa = MetricsReport(
        mean_income=float(sum(obsa_payments)),
        total_winners=len([a for a, s in won.items() if s]),
        total_sold=sold,
        participants=list(arrivals),
        payments=[obsa_payments],
    )

    # ------------------------------ baseline
    waiting = {}
    cid = 0
    base_payments, base_sold, base_winners = [], 0, 0
    for t in range(cfg.horizon):
        for c in customers[t]:
            waiting[cid] = dict(c)
            cid += 1
        demands = [
            Demand(a, {ty: 1 for ty in need}, float(sum(need.values())))
            for a, need in waiting.items()
        ]
        caps = {ty: int(supply[t, ty]) for ty in range(cfg.server_types)}
        alloc = combinatorial_baseline_round(demands, caps)
        assert all(v >= 0 for v in alloc.remaining.values())
        for a in alloc.winners:
            base_payments.append(alloc.payments[a])
            base_sold += len(waiting[a])
            base_winners += 1
            del waiting[a]
    baseline = MetricsReport(
        mean_income=float(sum(base_payments)),
        total_winners=base_winners,
        total_sold=base_sold,
        participants=list(arrivals),
        payments=[base_payments],
    )
    return Scenario3Result(obsa, baseline)


def customers_value(customers, agent: int, ty: int) -> float:
    # agents are numbered in arrival order across minutes
    for batch in customers:
        if agent < len(batch):
            return batch[agent][ty]
        agent -= len(batch)
    raise KeyError(agent)


# ----------------------------------------------------------------- scenario 4


@dataclass
class Scenario4Result:
    obsa: list
    baseline: list
    low_instants: list


def _is_low(t: int, period: int) -> bool:
    return t % period == period - 1


def participant_series(rng, instants: int, mean: float, informed: float, period: int):
    """Arrivals per instant, with and without informed agents deferring.

    Both series share the same arrivals.  Under the baseline an informed
    arrival waits for the next low-price instant; under OBSA it bids at once.
    """
    arrivals = rng.poisson(mean, size=instants)
    smart = rng.binomial(arrivals, informed)
    obsa = arrivals.astype(int)
    base = np.empty(instants, dtype=int)
    queued = 0
    for t in range(instants):
        if _is_low(t, period):
            base[t] = arrivals[t] + queued
            queued = 0
        else:
            base[t] = arrivals[t] - smart[t]
            queued += int(smart[t])
    return obsa, base


def run_scenario4(cfg: ScenarioConfig, rep: int = 0) -> Scenario4Result:
    rng = _rng(cfg.seed, 4, 0, rep)
    obsa, base = participant_series(
        rng, cfg.instants, cfg.mean_available, cfg.informed, cfg.low_period
    )
    lows = [t for t in range(cfg.instants) if _is_low(t, cfg.low_period)]
    return Scenario4Result(obsa.tolist(), base.tolist(), lows)


def baseline_payments(cfg: ScenarioConfig, lam: float, instants: int, rep: int) -> MetricsReport:
    """Winner payments of the sequential baseline under delayed entrance.

    One unit is sold per instant by first price.  Informed agents bunch at
    the low-price instants, where entrants bid from the lower half of the
    support.
    """
    rng = _rng(cfg.seed, 40, int(round(lam * 1000)), rep)
    _, base = participant_series(rng, instants, lam, cfg.informed, cfg.low_period)
    g = cfg.grid()
    d = cfg.distribution()
    half = g.L // 2
    pays = []
    for t, n in enumerate(base):
        if n == 0:
            continue
        if _is_low(t, cfg.low_period):
            idx = rng.integers(0, half + 1, size=n)
        else:
            idx = d.sample_indices(rng, n)
        bids = g.v_min + g.delta * idx
        demands = [Demand(i, {0: 1}, float(b)) for i, b in enumerate(bids)]
        alloc = combinatorial_baseline_round(demands, {0: 1})
        pays.extend(alloc.payments[a] for a in alloc.winners)
    return MetricsReport(
        mean_income=float(np.mean(pays)) if pays else 0.0,
        total_winners=len(pays),
        total_sold=len(pays),
        payments=[pays],
    )


def obsa_payments(cfg: ScenarioConfig, lam: float, Delta: int, instants: int, rep: int) -> MetricsReport:
    """Settled winner payments of a second-price OBSA run on the Scenario-1 market."""
    d = cfg.distribution()
    log = simulate_obsa(
        MarketConfig(d, lam, Delta, cfg.pB),
        Mechanism.SECOND,
        instants,
        _rng(cfg.seed, 41, int(round(lam * 1000)) * 100 + Delta, rep),
    )
    pays = list(log.final.values())
    return MetricsReport(
        mean_income=float(np.mean(pays)) if pays else 0.0,
        total_winners=len(pays),
        total_sold=len(pays),
        payments=[pays],
    )


@dataclass
class VarianceRow:
    N: float
    Delta: int
    seed: int
    obsa_variance: float
    baseline_variance: float


def variance_comparison(cfg: ScenarioConfig, lams=None, deltas=None, seeds=range(10)) -> list:
    lams = cfg.lams if lams is None else lams
    deltas = [d for d in cfg.deltas if d > 0] if deltas is None else deltas
    rows = []
    for s in seeds:
        c = replace(cfg, seed=cfg.seed + int(s))
        for lam in lams:
            vb = payment_variance(baseline_payments(c, lam, cfg.variance_instants, 0))
            for D in deltas:
                vo = payment_variance(obsa_payments(c, lam, int(D), cfg.variance_instants, 0))
                rows.append(VarianceRow(lam, int(D), int(s), vo, vb))
    return rows
