"""Options-based sequential auctions: rounds, price matching, bundle choice.

A winner does not settle immediately.  During its patience window it
watches later auctions for the same server type and lowers its payment to
qualifying later prices (``price_match_first`` / ``price_match_second``).
When the window closes it keeps the subset of won servers that maximizes
value minus payment and hands the rest back for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Callable, Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .dist import BidDistribution

MAX_BUNDLE_SERVERS = 20


class Mechanism(str, Enum):
    FIRST = "first"
    SECOND = "second"

    @classmethod
    def _missing_(cls, value):
        aliases = {
            "first-price": cls.FIRST,
            "firstprice": cls.FIRST,
            "fp": cls.FIRST,
            "second-price": cls.SECOND,
            "secondprice": cls.SECOND,
            "sp": cls.SECOND,
        }
        if isinstance(value, str):
            return aliases.get(value.lower())
        return None


class Mode(str, Enum):
    PARTICIPANT = "participant"
    OBSERVER = "observer"
    DEPARTED = "departed"


@dataclass
class PAgentState:
    id: Hashable
    bid: float
    t_ent: int = 0
    t_pat: int = 0
    p_cur: float = math.nan
    id_mem: Optional[Hashable] = None
    mode: Mode = Mode.PARTICIPANT

    @property
    def deadline(self) -> int:
        return self.t_ent + self.t_pat


@dataclass(frozen=True)
class AuctionOutcome:
    time: int
    winner_id: Optional[Hashable] = None
    winner_bid: Optional[float] = None
    charge: Optional[float] = None
    bumped_id: Optional[Hashable] = None
    bumped_bid: Optional[float] = None

    @property
    def empty(self) -> bool:
        return self.winner_id is None


def run_round(
    bids: Sequence[tuple],
    mechanism,
    *,
    v_min: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    time: int = 0,
) -> AuctionOutcome:
    """Clear one sealed-bid auction.

    The highest bid wins; equal top bids are broken uniformly at random.
    The bumped agent is the runner-up.  Under second price the charge is
    the runner-up's bid, or ``v_min`` when nobody else bid.
    """
    mechanism = Mechanism(mechanism)
    if not bids:
        return AuctionOutcome(time)
    ids = [b[0] for b in bids]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate bidder identity in one round")
    values = np.fromiter((b[1] for b in bids), dtype=float, count=len(bids))
    w, r = _top_two(values, rng)
    if r is None:
        bumped_id, bumped_bid = None, float(v_min)
    else:
        bumped_id, bumped_bid = ids[r], float(values[r])
    wb = float(values[w])
    charge = wb if mechanism is Mechanism.FIRST else bumped_bid
    return AuctionOutcome(time, ids[w], wb, charge, bumped_id, bumped_bid)


def _top_two(values: np.ndarray, rng) -> tuple:
    """Positions of the winner and runner-up (None when alone)."""
    n = values.shape[0]
    if n == 1:
        return 0, None
    top = values.max()
    tied = np.flatnonzero(values == top)
    if tied.size > 1:
        if rng is None:
            raise ValueError("a tie at the top needs an rng to break it")
        pick = rng.choice(tied.size, size=2, replace=False)
        return int(tied[pick[0]]), int(tied[pick[1]])
    w = int(tied[0])
    rest = values.copy()
    rest[w] = -np.inf
    return w, int(np.argmax(rest))


def price_match_first(state: PAgentState, T: int, b_w: Optional[float]) -> float:
    """One observation step of first-price matching.

    The payment drops to the winning bid when the window is still open at
    ``T`` and that bid undercuts the current payment.
    """
    if b_w is not None and state.deadline >= T and b_w < state.p_cur:
        state.p_cur = b_w
    return state.p_cur


def price_match_second(state: PAgentState, outcome: AuctionOutcome) -> float:
    """One observation step of second-price matching.

    With a stored bumped agent: if it wins, the payment follows the new
    runner-up (who becomes the stored agent); if someone else wins below
    the payment, the bumped agent must have left, so the payment follows
    the winner and memory is cleared.  Without memory this is first-price
    matching.
    """
    if outcome.empty or state.deadline < outcome.time:
        return state.p_cur
    if state.id_mem is not None:
        if outcome.winner_id == state.id_mem:
            # a lone winner has no runner-up; its round cleared at the charge
            basis = outcome.bumped_bid if outcome.bumped_bid is not None else outcome.charge
            if basis is not None and basis < state.p_cur:
                state.id_mem = outcome.bumped_id
                state.p_cur = basis
        elif outcome.winner_bid < state.p_cur:
            state.id_mem = None
            state.p_cur = outcome.winner_bid
    elif outcome.winner_bid < state.p_cur:
        state.p_cur = outcome.winner_bid
    return state.p_cur


@dataclass
class BundleValuation:
    servers: tuple
    value: Callable[[frozenset], float]
    payments: Mapping

    @classmethod
    def additive(cls, values: Mapping, payments: Mapping) -> "BundleValuation":
        vals = dict(values)
        return cls(tuple(vals), lambda s: sum(vals[x] for x in s), dict(payments))


def select_bundle(bv: BundleValuation) -> tuple:
    """Best subset of won servers and its surplus value(s) - payment(s).

    Exhaustive over all subsets, so at most ``MAX_BUNDLE_SERVERS`` servers.
    On equal surplus the larger subset wins (a server at zero surplus is
    kept); remaining ties keep the smallest bitmask.
    """
    servers = list(bv.servers)
    n = len(servers)
    if n > MAX_BUNDLE_SERVERS:
        raise ValueError(
            f"{n} servers means 2^{n} subsets; keep bundles to "
            f"{MAX_BUNDLE_SERVERS} servers or fewer"
        )
    pay = [float(bv.payments[s]) for s in servers]
    best, best_mask, best_size = 0.0, 0, 0
    if bv.value(frozenset()) != 0:
        raise ValueError("value of the empty bundle must be 0")
    for mask in range(1, 1 << n):
        chosen = [servers[i] for i in range(n) if mask >> i & 1]
        cost = sum(pay[i] for i in range(n) if mask >> i & 1)
        surplus = bv.value(frozenset(chosen)) - cost
        size = len(chosen)
        if surplus > best or (surplus == best and size > best_size):
            best, best_mask, best_size = surplus, mask, size
    keep = frozenset(servers[i] for i in range(n) if best_mask >> i & 1)
    return keep, best


# --------------------------------------------------------------------- engine


@dataclass(frozen=True)
class MarketConfig:
    """One server type's auction sequence.

    ``patience`` counts auction rounds; ``pB`` is the per-round probability
    that a remembered bumped agent is still bidding.  ``opening_min_bidders``
    redraws the first round's turnout until it has at least that many
    bidders (the analytic entering laws condition on this).
    """

    dist: BidDistribution
    lam: float
    patience: int = 0
    pB: float = 0.5
    opening_min_bidders: int = 0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if int(self.patience) != self.patience or self.patience < 0:
            raise ValueError(f"patience must be an integer >= 0, got {self.patience}")
        if not 0.0 <= self.pB <= 1.0:
            raise ValueError(f"pB must lie in [0, 1], got {self.pB}")
        if self.opening_min_bidders < 0:
            raise ValueError("opening_min_bidders must be >= 0")
        if self.opening_min_bidders > 0 and self.lam == 0:
            raise ValueError("cannot force opening bidders when lam = 0")


@dataclass
class RoundRecord:
    index: int
    winner_id: Optional[int]
    winner_bid: Optional[float]
    charge: Optional[float]
    bumped_id: Optional[int]
    bumped_bid: Optional[float]
    participants: int
    events: list = field(default_factory=list)

    def to_line(self) -> str:
        def f(x):
            return "" if x is None else repr(x)

        ev = ";".join(f"{a}:{p!r}" for a, p in self.events)
        return "\t".join(
            [str(self.index), f(self.winner_id), f(self.winner_bid), f(self.charge), ev]
        )


@dataclass
class EpisodeLog:
    mechanism: Mechanism
    rounds: list
    initial: dict
    final: dict
    entered: dict
    pending: dict

    @property
    def income(self) -> float:
        return float(sum(self.final.values()))

    @property
    def winners(self) -> int:
        return sum(1 for r in self.rounds if r.winner_id is not None)

    def to_lines(self) -> list:
        return [r.to_line() for r in self.rounds]

    def payment_path(self, agent) -> list:
        """Payments of ``agent`` after each matching event, starting with its charge."""
        path = [self.initial[agent]]
        for r in self.rounds:
            for a, p in r.events:
                if a == agent:
                    path.append(p)
        return path


def _opening_turnout(rng, lam, k):
    n = int(rng.poisson(lam))
    while n < k:
        n = int(rng.poisson(lam))
    return n


def simulate_obsa(
    cfg: MarketConfig,
    mechanism,
    horizon: int,
    seed,
    *,
    cohort_rounds: Optional[int] = None,
) -> EpisodeLog:
    """Run ``horizon`` rounds of one OBSA sequence.

    Each round brings Poisson(lam) bidders with fresh i.i.d. bids.  Under
    second price a remembered bumped agent stays in the market with
    probability pB per round and, while present, fills one of the round's
    seats with its original bid.  Winners of the first ``cohort_rounds``
    rounds (all rounds when None) become observers; their payments settle
    once round ``t_ent + patience`` has been matched.  Income counts only
    settled winners.
    """
    mechanism = Mechanism(mechanism)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = cfg.dist.grid
    v_min = grid.v_min
    second = mechanism is Mechanism.SECOND
    ids = count()
    observers: dict = {}
    lingering: dict = {}
    rounds, initial, final, entered = [], {}, {}, {}

    for T in range(horizon):
        # bumped agents leave for good with probability 1 - pB each round
        if lingering:
            gone = [a for a in lingering if rng.random() >= cfg.pB]
            for a in gone:
                del lingering[a]

        if T == 0 and cfg.opening_min_bidders:
            n = _opening_turnout(rng, cfg.lam, cfg.opening_min_bidders)
        else:
            n = int(rng.poisson(cfg.lam))

        seats_ids: list = []
        seats_bids: list = []
        if n and lingering:
            pool = list(lingering)
            if len(pool) > n:
                pick = rng.choice(len(pool), size=n, replace=False)
                pool = [pool[i] for i in sorted(pick)]
            seats_ids.extend(pool)
            seats_bids.extend(lingering[a] for a in pool)
        fresh = n - len(seats_ids)
        fresh_bids = cfg.dist.sample(rng, fresh) if fresh > 0 else ()
        fresh_ids = [next(ids) for _ in range(fresh)]
        seats_ids.extend(fresh_ids)
        seats_bids.extend(float(b) for b in fresh_bids)

        if seats_ids:
            values = np.asarray(seats_bids, dtype=float)
            w, r = _top_two(values, rng)
            wid, wb = seats_ids[w], float(values[w])
            if r is None:
                bid_, bb = None, float(v_min)
            else:
                bid_, bb = seats_ids[r], float(values[r])
            charge = wb if not second else bb
            outcome = AuctionOutcome(T, wid, wb, charge, bid_, bb)
        else:
            outcome = AuctionOutcome(T)
            bb = bid_ = None

        rec = RoundRecord(
            T, outcome.winner_id, outcome.winner_bid, outcome.charge,
            outcome.bumped_id, outcome.bumped_bid, len(seats_ids),
        )

        # observers watch this round
        if not outcome.empty:
            for a, st in observers.items():
                before = st.p_cur
                if second:
                    price_match_second(st, outcome)
                else:
                    price_match_first(st, T, outcome.winner_bid)
                if st.p_cur != before:
                    rec.events.append((a, st.p_cur))

        # the winner stops bidding
        if outcome.winner_id is not None:
            lingering.pop(outcome.winner_id, None)

        tracked = cohort_rounds is None or T < cohort_rounds
        if not outcome.empty and tracked:
            st = PAgentState(
                id=outcome.winner_id,
                bid=outcome.winner_bid,
                t_ent=T,
                t_pat=cfg.patience,
                p_cur=outcome.charge,
                id_mem=outcome.bumped_id if second else None,
                mode=Mode.OBSERVER,
            )
            observers[outcome.winner_id] = st
            initial[outcome.winner_id] = outcome.charge
            entered[outcome.winner_id] = T

        # settle observers whose window closes with this round
        for a in [a for a, st in observers.items() if st.deadline <= T]:
            st = observers.pop(a)
            st.mode = Mode.DEPARTED
            final[a] = st.p_cur

        if second:
            remembered = {st.id_mem for st in observers.values() if st.id_mem is not None}
            for a in list(lingering):
                if a not in remembered:
                    del lingering[a]
            if outcome.bumped_id is not None and outcome.bumped_id in remembered:
                lingering.setdefault(outcome.bumped_id, outcome.bumped_bid)

        rounds.append(rec)

    pending = {a: st.p_cur for a, st in observers.items()}
    return EpisodeLog(mechanism, rounds, initial, final, entered, pending)
