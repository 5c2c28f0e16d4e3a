"""Attacks on destination-aware path selection.

The baseline selector avoids any network entity on both the client-guard and
the exit-destination link whenever it can, and otherwise spreads its choice
with a minimax linear program.  Because the choice depends on the client's
location, the exits it picks leak that location to an adversary who chooses
the destinations; ``PosteriorState`` tracks exactly how much.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from taps._seeding import derive_seed, make_rng, weighted_index
from taps.netmap import NetworkMap
from taps.relays import EXIT, GUARD, RUNNING, Consensus, Relay, exit_policy_allows, positional_weight

DIRECT, CROSS_ONLY, SAFE = "direct", "cross_only", "safe"


class AttackError(RuntimeError):
    pass


class InconsistentObservationError(AttackError, ValueError):
    pass


# --- minimax ------------------------------------------------------------------------

@dataclass
class PairDistribution:
    pairs: list
    probs: np.ndarray
    t: float
    duality_gap: float = 0.0
    residual: float = 0.0

    def as_dict(self) -> dict:
        return {p: float(x) for p, x in zip(self.pairs, self.probs)}


def exposure_matrix(exposures: Sequence[frozenset]) -> tuple[list, np.ndarray]:
    """Entities (sorted) and the 0/1 matrix M[entity, pair]."""
    ents = sorted(set().union(*exposures)) if exposures else []
    col = {e: i for i, e in enumerate(ents)}
    m = np.zeros((len(ents), len(exposures)))
    for j, exp in enumerate(exposures):
        for e in exp:
            m[col[e], j] = 1.0
    return ents, m


def solve_minimax(pairs: Sequence, exposures: Sequence[frozenset]) -> PairDistribution:
    """Distribution over ``pairs`` minimizing the largest per-entity exposure mass.

    Solves  min t  s.t.  M x <= t, sum(x) = 1, x >= 0  and reports the gap
    between the primal value and the dual value read from the solver's
    marginals.
    """
    if not pairs:
        raise ValueError("no pairs to choose from")
    if len(pairs) != len(exposures):
        raise ValueError("pairs and exposures differ in length")
    _, m = exposure_matrix(exposures)
    n = len(pairs)
    if m.shape[0] == 0:
        x = np.full(n, 1.0 / n)
        return PairDistribution(list(pairs), x, 0.0)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_ub = np.hstack([m, -np.ones((m.shape[0], 1))])
    a_eq = np.hstack([np.ones((1, n)), np.zeros((1, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(m.shape[0]), A_eq=a_eq, b_eq=[1.0],
                  bounds=[(0, None)] * (n + 1), method="highs")
    if res.status != 0:
        raise AttackError(f"minimax LP failed: {res.message}")
    x = np.clip(res.x[:n], 0.0, None)
    x /= x.sum()
    t = float((m @ x).max())
    dual = float(res.eqlin.marginals[0])  # b_ub is zero, so only the equality row counts
    gap = abs(float(res.fun) - dual)
    resid = max(abs(x.sum() - 1.0), float(max(0.0, -x.min())), float(max(0.0, (m @ x - t).max())))
    return PairDistribution(list(pairs), x, t, gap, resid)


# --- baseline selection model -----------------------------------------------------------

class BaselineModel:
    """Exact pair probabilities of the destination-aware baseline."""

    def __init__(self, nmap: NetworkMap, consensus: Consensus, port: int | None = None):
        self.map = nmap
        self.consensus = consensus
        self.port = port
        self.exits = [r for r in consensus.relays if RUNNING in r.flags and EXIT in r.flags and r.weight > 0]
        if port is not None:
            self.exits = [r for r in self.exits if exit_policy_allows(r, None, port)]
        self._cache: dict = {}

    def side(self, loc: int, relay: Relay) -> frozenset:
        return self.map.links.get(loc, relay.location)

    def pair_distribution(self, client_loc: int, guards: Sequence[Relay], dst_loc: int) -> dict:
        """(guard fp, exit fp) -> probability."""
        key = (client_loc, tuple(g.fingerprint for g in guards), dst_loc)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        pairs, exposures, weights = [], [], []
        for g in guards:
            cside = self.side(client_loc, g)
            for e in self.exits:
                if e.fingerprint == g.fingerprint or e.family == g.family:
                    continue
                pairs.append((g.fingerprint, e.fingerprint))
                exposures.append(cside & self.side(dst_loc, e))
                weights.append(positional_weight(g, "guard") * positional_weight(e, "exit"))
        if not pairs:
            raise AttackError("no exit-flagged relays usable with the guard set")
        clean = [i for i, exp in enumerate(exposures) if not exp]
        if clean:
            total = sum(weights[i] for i in clean)
            out = {pairs[i]: weights[i] / total for i in clean}
        else:
            out = {p: x for p, x in solve_minimax(pairs, exposures).as_dict().items() if x > 0}
        self._cache[key] = out
        return out

    def exit_distribution(self, client_loc: int, guards: Sequence[Relay], dst_loc: int) -> dict:
        out: dict = {}
        for (_, e), p in self.pair_distribution(client_loc, guards, dst_loc).items():
            out[e] = out.get(e, 0.0) + p
        return out


def choose_baseline_guards(consensus: Consensus, n: int, rng) -> list[Relay]:
    """Bandwidth-weighted guards from distinct families."""
    chosen: list[Relay] = []
    while len(chosen) < n:
        fams = {g.family for g in chosen}
        cands = [r for r in consensus.relays if RUNNING in r.flags and GUARD in r.flags and r.weight > 0
                 and r.family not in fams]
        if not cands:
            if chosen:
                break
            raise AttackError("no guard-flagged relays")
        chosen.append(cands[weighted_index(rng, [positional_weight(r, "guard") for r in cands])])
    return chosen


@dataclass
class BaselineSelector:
    model: BaselineModel
    client_loc: int
    guards: list[Relay]
    cache: dict = field(default_factory=dict)

    @classmethod
    def create(cls, nmap, consensus, client_loc, rng, n_guards: int = 3, port=None,
               model: BaselineModel | None = None) -> "BaselineSelector":
        model = model or BaselineModel(nmap, consensus, port)
        return cls(model, client_loc, choose_baseline_guards(consensus, n_guards, rng))

    def select(self, dst_loc: int, rng) -> tuple[Relay, Relay]:
        hit = self.cache.get(dst_loc)
        if hit is None:
            dist = self.model.pair_distribution(self.client_loc, self.guards, dst_loc)
            items = sorted(dist.items())
            g, e = items[weighted_index(rng, [p for _, p in items])][0]
            cons = self.model.consensus
            hit = self.cache[dst_loc] = (cons.get(g), cons.get(e))
        return hit


def baseline_select(selector: BaselineSelector, dst_loc: int, rng) -> tuple[Relay, Relay]:
    return selector.select(dst_loc, rng)


# --- chosen-destination attack ----------------------------------------------------------

def top_middles(consensus: Consensus, n: int = 4) -> list[str]:
    """The ``n`` relays most likely to be drawn as a middle."""
    rs = [r for r in consensus.relays if RUNNING in r.flags and positional_weight(r, "middle") > 0]
    rs.sort(key=lambda r: (-positional_weight(r, "middle"), r.fingerprint))
    return [r.fingerprint for r in rs[:n]]


def draw_middle(consensus: Consensus, guard: Relay, exit: Relay, rng) -> Relay:
    cands = [r for r in consensus.relays if RUNNING in r.flags and positional_weight(r, "middle") > 0
             and r.fingerprint not in (guard.fingerprint, exit.fingerprint)]
    if not cands:
        raise AttackError("no middle relay available")
    return cands[weighted_index(rng, [positional_weight(r, "middle") for r in cands])]


@dataclass
class AttackObservation:
    guards_observed: int
    observed_guards: list[str]
    exits: list[tuple[int, str]]  # (destination location, exit fingerprint), first visit per location


def attack_destinations(nmap: NetworkMap, n: int, seed, exclude: Sequence[int] = ()) -> list[int]:
    """Destination j depends only on (seed, j), so shorter runs are prefixes of longer ones."""
    pool = [l for l in nmap.location_ids if l not in set(exclude)]
    return [pool[int(make_rng(seed, "dst", j).integers(len(pool)))] for j in range(n)]


def chosen_destination_attack(nmap: NetworkMap, consensus: Consensus, selector: BaselineSelector,
                              n_destinations: int, adversary_middles: Sequence[str], seed) -> AttackObservation:
    """Visit ``n_destinations`` adversary-chosen destinations through the baseline."""
    bad = set(adversary_middles)
    unknown = bad - {r.fingerprint for r in consensus.relays}
    if unknown:
        raise ValueError(f"adversary middles not in the consensus: {sorted(unknown)}")
    seen_guards: list[str] = []
    exits = []
    for j, dst in enumerate(attack_destinations(nmap, n_destinations, seed, [selector.client_loc])):
        if dst in selector.cache:
            continue  # circuit reused: nothing new to see
        rng = make_rng(seed, "step", j)
        g, e = selector.select(dst, rng)
        m = draw_middle(consensus, g, e, rng)
        exits.append((dst, e.fingerprint))
        if m.fingerprint in bad and g.fingerprint not in seen_guards:
            seen_guards.append(g.fingerprint)
    return AttackObservation(len(seen_guards), seen_guards, exits)


# --- posterior --------------------------------------------------------------------------

class PosteriorState:
    """Posterior over candidate client locations for a known guard set."""

    def __init__(self, model: BaselineModel, candidates: Sequence[int], guards: Sequence[Relay],
                 prior: Mapping[int, float] | None = None):
        if not candidates:
            raise ValueError("no candidate locations")
        self.model = model
        self.candidates = list(candidates)
        self.guards = list(guards)
        if prior is None:
            w = np.ones(len(self.candidates))
        else:
            w = np.array([float(prior.get(c, 0.0)) for c in self.candidates])
        if not w.sum() > 0:
            raise ValueError("prior has no mass")
        self.log_weight = np.log(w / w.sum())

    def likelihoods(self, dst_loc: int, exit_fp: str) -> np.ndarray:
        return np.array([self.model.exit_distribution(c, self.guards, dst_loc).get(exit_fp, 0.0)
                         for c in self.candidates])

    def update(self, dst_loc: int, exit_fp: str) -> None:
        lik = self.likelihoods(dst_loc, exit_fp)
        with np.errstate(divide="ignore"):
            new = self.log_weight + np.log(lik)
        if not np.isfinite(new).any():
            raise InconsistentObservationError(f"exit {exit_fp} for {dst_loc} is impossible for every candidate")
        self.log_weight = new

    def posterior(self) -> np.ndarray:
        lw = self.log_weight
        top = lw[np.isfinite(lw)].max()
        p = np.exp(lw - top)
        return p / p.sum()

    def entropy(self) -> float:
        return entropy_bits(self.posterior())


def posterior_entropy(state: PosteriorState, observation: tuple[int, str] | None = None) -> float:
    if observation is not None:
        state.update(*observation)
    return state.entropy()


@dataclass
class AttackTrial:
    seed: int
    n_destinations: int
    guards_observed: int
    posterior_entropy_bits: float


def run_attack_trial(nmap: NetworkMap, consensus: Consensus, client_loc: int, candidates: Sequence[int],
                     n_destinations: int, base_seed, trial: int, n_guards: int = 3,
                     adversary_middles: Sequence[str] | None = None,
                     model: BaselineModel | None = None) -> AttackTrial:
    """One seeded trial; pass a shared ``model`` to reuse its probability cache across trials."""
    seed = derive_seed(base_seed, "trial", trial)
    sel = BaselineSelector.create(nmap, consensus, client_loc, make_rng(seed, "guards"), n_guards, model=model)
    mids = top_middles(consensus) if adversary_middles is None else adversary_middles
    obs = chosen_destination_attack(nmap, consensus, sel, n_destinations, mids, seed)
    state = PosteriorState(sel.model, candidates, sel.guards)
    for o in obs.exits:
        state.update(*o)
    return AttackTrial(seed, n_destinations, obs.guards_observed, state.entropy())


# --- cross-circuit classification -------------------------------------------------------

def cross_circuit_vulnerability(visit: Sequence[int], selector: BaselineSelector, seed) -> str:
    """Classify a page visit (destination locations, first = the page itself)."""
    if not visit:
        raise ValueError("empty visit")
    rng = make_rng(seed, "visit")
    entry, exit_sides = [], []
    for dst in visit:
        g, e = selector.select(dst, rng)
        entry.append(selector.model.side(selector.client_loc, g))
        exit_sides.append(selector.model.side(dst, e))
    if any(a & b for a, b in zip(entry, exit_sides)):
        return DIRECT
    seen_entry = frozenset().union(*entry)
    return CROSS_ONLY if exit_sides[0] & seen_entry else SAFE


def entropy_bits(p) -> float:
    """Shannon entropy in bits; a uniform distribution gives log2 of its support exactly."""
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    if not len(p):
        return 0.0
    if np.all(p == p[0]):
        return math.log2(len(p))
    return float(-(p * np.log2(p)).sum())
