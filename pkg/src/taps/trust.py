"""Trust policies, their scoring API, and adversary sampling.

A policy answers three questions for path selection:

* ``location_distance`` - how differently two locations see adversaries on
  their paths to a set of relay hosts;
* ``guard_security`` - expected adversary weight *absent* from the paths
  between a client and a guard set;
* ``exit_security`` - expected adversary weight unable to correlate a
  (guard, exit) pair for a client/destination pair.

Relay families are scored like network entities: a relay's family sits on
every virtual link that ends at that relay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from taps._seeding import unit_hash
from taps.netmap import AS_ORG, IXP_ORG, NetworkMap
from taps.relays import FamilyUptimeTracker, Relay

P_MIN = 0.02
P_MAX = 0.1
ENTITY_PROB = 0.1
TYPE5_RELAY_PROB = 0.1
TYPE5_LINK_PROB = 1 - 0.9 ** 4
ERROR_TYPES = ("0", "1", "2a", "2b", "3", "4", "5", "6", "7")


def longevity_family_prob(uptime_days: float, p_min: float = P_MIN, p_max: float = P_MAX) -> float:
    return (p_max - p_min) / (uptime_days + 1.0) + p_min


def _host(r) -> tuple[int, str | None]:
    if isinstance(r, Relay):
        return r.location, r.family
    return int(r), None


def _check_weights(relays, weights):
    if len(relays) != len(weights):
        raise ValueError(f"{len(relays)} relays but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")


class TrustPolicy:
    """Interface shared by the concrete policies."""

    name = "abstract"

    def location_distance(self, loc1, loc2, relays, weights) -> float:
        raise NotImplementedError

    def guard_security(self, client_loc, guards: Sequence[Relay]) -> float:
        raise NotImplementedError

    def exit_security(self, client_loc, dst_loc, guard: Relay, exit: Relay) -> float:
        raise NotImplementedError

    def guard_scores(self, client_loc, current: Sequence[Relay], candidates: Sequence[Relay]) -> list[float]:
        return [self.guard_security(client_loc, list(current) + [g]) for g in candidates]

    def exit_scores(self, client_loc, dst_loc, guard: Relay, exits: Sequence[Relay]) -> list[float]:
        return [self.exit_security(client_loc, dst_loc, guard, e) for e in exits]

    def distance_block(self, rows, cols, hosts, weights) -> np.ndarray:
        out = np.empty((len(rows), len(cols)))
        for i, a in enumerate(rows):
            for j, b in enumerate(cols):
                out[i, j] = self.location_distance(a, b, hosts, weights)
        return out

    def sample_adversary(self, rng):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.name}


# --- The Man ----------------------------------------------------------------

class TheManPolicy(TrustPolicy):
    """One adversary compromising entities and relay families independently."""

    name = "the_man"

    def __init__(self, nmap: NetworkMap, family_uptimes: Mapping[str, float] | None = None,
                 family_sizes: Mapping[str, int] | None = None, entity_prob: float = ENTITY_PROB,
                 p_min: float = P_MIN, p_max: float = P_MAX,
                 entity_overrides: Mapping[int, float] | None = None):
        self.map = nmap
        self.links = nmap.links
        self.entity_prob = float(entity_prob)
        self.p_min = float(p_min)
        self.p_max = float(p_max)
        self.family_uptimes = dict(family_uptimes or {})
        self.family_sizes = dict(family_sizes or {})
        self.entity_p = {e.id: self.entity_prob for e in nmap.entities}
        for k, v in (entity_overrides or {}).items():
            self.entity_p[int(k)] = float(v)
        self._fam_p = {f: self.family_prob(f) for f in self.family_uptimes}
        self._side_cache: dict = {}

    @classmethod
    def from_tracker(cls, nmap, tracker: FamilyUptimeTracker, **kw) -> "TheManPolicy":
        return cls(nmap, tracker.family_uptimes(), tracker.family_sizes(), **kw)

    def family_prob(self, family: str) -> float:
        return longevity_family_prob(self.family_uptimes.get(family, 0.0), self.p_min, self.p_max)

    def prob(self, token) -> float:
        if isinstance(token, str):
            p = self._fam_p.get(token)
            return self.family_prob(token) if p is None else p
        return self.entity_p[token]

    def q(self, tokens: Iterable) -> float:
        """Probability that none of the tokens is compromised."""
        out = 1.0
        for t in tokens:
            out *= 1.0 - self.prob(t)
        return out

    def side(self, loc: int, relay) -> frozenset:
        """Entities (and family) on the virtual link between ``loc`` and a relay."""
        host, fam = _host(relay)
        key = (loc, host, fam)
        s = self._side_cache.get(key)
        if s is None:
            s = self.links.get(loc, host)
            if fam is not None:
                s = s | {fam}
            if len(self._side_cache) > 500_000:
                self._side_cache.clear()
            self._side_cache[key] = s
        return s

    def location_distance(self, loc1, loc2, relays, weights):
        _check_weights(relays, weights)
        total = 0.0
        for r, w in zip(relays, weights):
            a = self.side(loc1, r)
            b = self.side(loc2, r)
            q1 = self.q(a & b)
            q2 = self.q(a - b)
            q3 = self.q(b - a)
            p_r = q1 * ((1.0 - q2) * q3 + q2 * (1.0 - q3))
            total += w * p_r
        return total

    def guard_security(self, client_loc, guards):
        tokens = set()
        for g in guards:
            tokens |= self.side(client_loc, g)
        return self.q(tokens)

    def exit_security(self, client_loc, dst_loc, guard, exit):
        a = self.side(client_loc, guard)
        b = self.side(dst_loc, exit)
        q1 = self.q(a & b)
        q2 = self.q(a - b)
        q3 = self.q(b - a)
        return q1 * (q2 + q3 - q2 * q3)

    def guard_scores(self, client_loc, current, candidates):
        base = set()
        for g in current:
            base |= self.side(client_loc, g)
        qb = self.q(base)
        return [qb * self.q(self.side(client_loc, g) - base) for g in candidates]

    def distance_block(self, rows, cols, hosts, weights):
        _check_weights(hosts, weights)
        ids = sorted(self.entity_p)
        col = {e: i for i, e in enumerate(ids)}
        logq = np.array([math.log1p(-self.entity_p[e]) if self.entity_p[e] < 1 else -np.inf for e in ids])
        out = np.zeros((len(rows), len(cols)))
        for h, w in zip(hosts, weights):
            if w == 0:
                continue
            xr = _indicator(self, rows, h, col)
            xc = _indicator(self, cols, h, col)
            la = _safe_dot(xr, logq)
            lb = _safe_dot(xc, logq)
            lab = _pair_logq(xr, xc, logq)
            qa = np.exp(la)[:, None]
            qb = np.exp(lb)[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(np.isfinite(lab), np.exp(la[:, None] + lb[None, :] - lab), 0.0)
            out += w * (qa + qb - 2.0 * ratio)
        return np.maximum(out, 0.0)

    def sample_adversary(self, rng, spec: "ErrorAdversarySpec | None" = None):
        return (spec or ErrorAdversarySpec()).sample(self, rng)

    def describe(self):
        return {"kind": self.name, "entity_prob": self.entity_prob, "p_min": self.p_min, "p_max": self.p_max}


def _indicator(policy, locs, host, col) -> np.ndarray:
    x = np.zeros((len(locs), len(col)))
    for i, loc in enumerate(locs):
        for e in policy.links.get(loc, host):
            x[i, col[e]] = 1.0
    return x


def _safe_dot(x, logq):
    # -inf * 0 must stay 0 (entity with p = 1 absent from the link)
    finite = np.where(np.isfinite(logq), logq, 0.0)
    out = x @ finite
    if not np.all(np.isfinite(logq)):
        hit = x[:, ~np.isfinite(logq)].sum(axis=1) > 0
        out = np.where(hit, -np.inf, out)
    return out


def _pair_logq(xr, xc, logq):
    finite = np.where(np.isfinite(logq), logq, 0.0)
    out = (xr * finite) @ xc.T
    if not np.all(np.isfinite(logq)):
        inf = ~np.isfinite(logq)
        hit = (xr[:, inf] @ xc[:, inf].T) > 0
        out = np.where(hit, -np.inf, out)
    return out


# --- Countries ----------------------------------------------------------------

class CountriesPolicy(TrustPolicy):
    """Every country is an adversary that sees every entity located inside it."""

    name = "countries"

    def __init__(self, nmap: NetworkMap, countries: Sequence[str] | None = None,
                 relay_countries: Mapping[str, str] | None = None,
                 weights: Mapping[str, float] | None = None):
        self.map = nmap
        self.links = nmap.links
        self.entity_country = {e.id: e.country for e in nmap.entities}
        if countries is None:
            countries = sorted({c for c in self.entity_country.values() if c})
        self.countries = list(countries)
        self.relay_countries = dict(relay_countries or {})
        self.weights = {c: float((weights or {}).get(c, 1.0)) for c in self.countries}
        self.total_weight = sum(self.weights.values())
        self._cache: dict = {}

    def relay_country(self, relay) -> str | None:
        host, _ = _host(relay)
        if isinstance(relay, Relay) and relay.fingerprint in self.relay_countries:
            return self.relay_countries[relay.fingerprint]
        return self.map.country_of_location(host)

    def side(self, loc: int, relay) -> frozenset:
        """Countries on the virtual link between ``loc`` and a relay, plus the relay's own."""
        host, _ = _host(relay)
        key = (loc, host, relay.fingerprint if isinstance(relay, Relay) else None)
        s = self._cache.get(key)
        if s is None:
            cs = {self.entity_country[e] for e in self.links.get(loc, host)}
            rc = self.relay_country(relay)
            if rc is not None:
                cs.add(rc)
            cs.discard(None)
            s = frozenset(cs)
            self._cache[key] = s
        return s

    def _weight(self, cs) -> float:
        return sum(self.weights.get(c, 0.0) for c in cs)

    def location_distance(self, loc1, loc2, relays, weights):
        _check_weights(relays, weights)
        return float(sum(w * len(self.side(loc1, r) ^ self.side(loc2, r)) for r, w in zip(relays, weights)))

    def guard_security(self, client_loc, guards):
        seen = set()
        for g in guards:
            seen |= self.side(client_loc, g)
        return 1.0 - self._weight(seen) / self.total_weight

    def exit_security(self, client_loc, dst_loc, guard, exit):
        both = self.side(client_loc, guard) & self.side(dst_loc, exit)
        return 1.0 - self._weight(both) / self.total_weight

    def distance_block(self, rows, cols, hosts, weights):
        _check_weights(hosts, weights)
        col = {c: i for i, c in enumerate(sorted({c for c in self.entity_country.values() if c}))}
        out = np.zeros((len(rows), len(cols)))
        for h, w in zip(hosts, weights):
            if w == 0:
                continue
            xr = np.zeros((len(rows), len(col)))
            xc = np.zeros((len(cols), len(col)))
            for x, locs in ((xr, rows), (xc, cols)):
                for i, loc in enumerate(locs):
                    for c in self.side(loc, h):
                        x[i, col[c]] = 1.0
            inter = xr @ xc.T
            out += w * (xr.sum(1)[:, None] + xc.sum(1)[None, :] - 2 * inter)
        return out

    def sample_adversary(self, rng=None):
        return CountriesAdversary(self)

    def describe(self):
        return {"kind": self.name, "countries": len(self.countries)}


# --- adversary instances --------------------------------------------------------

@dataclass(frozen=True)
class AdversaryInstance:
    """One sampled adversary.

    ``link_prob``/``relay_prob`` are only used by the Type 5 variant, whose
    link and relay coins are derived from ``salt`` so that the instance is
    fixed without enumerating every link up front.
    """

    links: object = field(compare=False, repr=False)
    entities: frozenset = frozenset()
    families: frozenset = frozenset()
    unseen_family_prob: float = 0.0
    known_families: frozenset = frozenset()
    link_prob: float = 0.0
    relay_prob: float = 0.0
    salt: int = 0
    label: str = ""

    def family_compromised(self, family: str) -> bool:
        if family in self.families:
            return True
        if family in self.known_families or self.unseen_family_prob <= 0.0:
            return False
        return unit_hash(self.salt, "family", family) < self.unseen_family_prob

    def relay_compromised(self, relay: Relay) -> bool:
        if self.family_compromised(relay.family):
            return True
        return self.relay_prob > 0.0 and unit_hash(self.salt, "relay", relay.fingerprint) < self.relay_prob

    def link_compromised(self, a: int, b: int) -> bool:
        if self.entities and not self.entities.isdisjoint(self.links.get(a, b)):
            return True
        if self.link_prob > 0.0:
            lo, hi = (a, b) if a <= b else (b, a)
            return unit_hash(self.salt, "link", lo, hi) < self.link_prob
        return False

    def observes(self, loc: int, relay: Relay) -> bool:
        return self.relay_compromised(relay) or self.link_compromised(loc, relay.location)

    def correlates(self, client_loc, guard, dst_loc, exit) -> bool:
        return self.observes(client_loc, guard) and self.observes(dst_loc, exit)

    def correlators(self, client_loc, guard, dst_loc, exit) -> list[str]:
        return [self.label] if self.correlates(client_loc, guard, dst_loc, exit) else []

    @property
    def empty(self) -> bool:
        return (not self.entities and not self.families and self.unseen_family_prob <= 0
                and self.link_prob <= 0 and self.relay_prob <= 0)


class CountriesAdversary:
    """All country adversaries at once; each sees exactly its own entities and relays."""

    def __init__(self, policy: CountriesPolicy):
        self.policy = policy

    def countries_on(self, loc, relay) -> frozenset:
        return self.policy.side(loc, relay)

    def instance(self, country: str) -> AdversaryInstance:
        ents = frozenset(e for e, c in self.policy.entity_country.items() if c == country)
        return AdversaryInstance(links=self.policy.links, entities=ents, label=country)

    @property
    def instances(self) -> list[AdversaryInstance]:
        return [self.instance(c) for c in self.policy.countries]

    def observes(self, loc, relay) -> bool:
        return bool(self.policy.side(loc, relay))

    def correlators(self, client_loc, guard, dst_loc, exit) -> list[str]:
        both = self.policy.side(client_loc, guard) & self.policy.side(dst_loc, exit)
        return sorted(c for c in both if c in self.policy.weights)

    def correlates(self, client_loc, guard, dst_loc, exit) -> bool:
        return bool(self.correlators(client_loc, guard, dst_loc, exit))

    def __eq__(self, other):
        return isinstance(other, CountriesAdversary) and other.policy is self.policy


def observes_entry(instance, client_loc: int, guard: Relay) -> bool:
    return instance.observes(client_loc, guard)


def observes_exit(instance, dst_loc: int, exit: Relay) -> bool:
    return instance.observes(dst_loc, exit)


@dataclass(frozen=True)
class ErrorAdversarySpec:
    """Actual-adversary variants used to study mismatched trust beliefs."""

    type: str = "0"
    p_min: float = P_MIN
    p_max: float = P_MAX
    scale: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "type", str(self.type))
        if self.type not in ERROR_TYPES:
            raise ValueError(f"unknown adversary type {self.type!r}")

    def family_prob(self, uptime: float, size: int) -> float:
        lo, hi = self.p_min, self.p_max
        t = self.type
        if t == "4":
            return hi - (hi - lo) / (uptime + 1.0)
        if t == "6":
            return hi if size >= 2 else 0.05
        if t == "7":
            return hi - (hi - lo) * 2.0 ** (-(size - 1))
        p = (hi - lo) / (uptime + 1.0) + lo
        return min(1.0, p * self.scale) if t == "1" else p

    def entity_probs(self, policy: TheManPolicy, rng) -> dict[int, float]:
        nmap = policy.map
        probs = dict(policy.entity_p)
        t = self.type
        if t == "1":
            probs = {e: min(1.0, p * self.scale) for e, p in probs.items()}
        elif t in ("2a", "2b"):
            lone_p = 0.0 if t == "2a" else 0.05
            for e in probs:
                if nmap.is_lone_as(e):
                    probs[e] = lone_p
        elif t == "3":
            for kind in (AS_ORG, IXP_ORG):
                orgs = [e.id for e in nmap.entities if e.kind == kind and not nmap.is_lone_as(e.id)]
                order = rng.permutation(len(orgs))
                high = {orgs[int(i)] for i in order[: len(orgs) // 2]}
                for e in orgs:
                    probs[e] = 0.15 if e in high else 0.05
            # lone ASes: fair coin between the two rates, then the compromise draw
            for e in probs:
                if nmap.is_lone_as(e):
                    probs[e] = 0.15 if rng.random() < 0.5 else 0.05
        return probs

    def sample(self, policy: TheManPolicy, rng) -> AdversaryInstance:
        salt = int(rng.integers(2 ** 62))
        if self.type == "5":
            return AdversaryInstance(links=policy.links, link_prob=TYPE5_LINK_PROB,
                                     relay_prob=TYPE5_RELAY_PROB, salt=salt, label="type5")
        probs = self.entity_probs(policy, rng)
        ids = sorted(probs)
        draws = rng.random(len(ids))
        ents = frozenset(e for e, u in zip(ids, draws) if u < probs[e])
        fams = sorted(set(policy.family_uptimes) | set(policy.family_sizes))
        fdraws = rng.random(len(fams))
        compromised = frozenset(
            f for f, u in zip(fams, fdraws)
            if u < self.family_prob(policy.family_uptimes.get(f, 0.0), policy.family_sizes.get(f, 1))
        )
        return AdversaryInstance(
            links=policy.links, entities=ents, families=compromised,
            unseen_family_prob=self.family_prob(0.0, 1), known_families=frozenset(fams),
            salt=salt, label=f"type{self.type}",
        )


def sample_adversary(source, rng, spec: ErrorAdversarySpec | None = None):
    if isinstance(source, ErrorAdversarySpec):
        raise TypeError("an error spec needs a TheManPolicy context: sample_adversary(policy, rng, spec)")
    if isinstance(source, CountriesPolicy):
        return source.sample_adversary(rng)
    return source.sample_adversary(rng, spec)


# --- configuration ----------------------------------------------------------------

def policy_from_config(cfg: Mapping, nmap: NetworkMap, tracker: FamilyUptimeTracker | None = None) -> TrustPolicy:
    """Build a policy from its JSON description.

    ``{"kind": "the_man", "entity_prob": 0.1, "p_min": 0.02, "p_max": 0.1}`` or
    ``{"kind": "countries", "countries": [...], "relay_countries": {...}}``.
    """
    kind = cfg.get("kind", "the_man")
    if kind == "the_man":
        tracker = tracker or FamilyUptimeTracker()
        return TheManPolicy(
            nmap, tracker.family_uptimes(), tracker.family_sizes(),
            entity_prob=cfg.get("entity_prob", ENTITY_PROB), p_min=cfg.get("p_min", P_MIN),
            p_max=cfg.get("p_max", P_MAX), entity_overrides=cfg.get("entity_overrides"),
        )
    if kind == "countries":
        return CountriesPolicy(nmap, cfg.get("countries"), cfg.get("relay_countries"), cfg.get("weights"))
    raise ValueError(f"policy kind: unknown value {kind!r}")


def load_policy(path, nmap, tracker=None) -> TrustPolicy:
    with open(path) as fh:
        return policy_from_config(json.load(fh), nmap, tracker)
