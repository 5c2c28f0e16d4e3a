"""TrustAll / TrustOne relay filtering, guard selection and circuit handling.

``PathSelector`` bundles the read-only inputs (map, trust policy,
clusterings, parameters, mode) and the pure caches derived from them; one
selector can serve any number of ``ClientState`` objects.  Randomness always
comes from the caller's generator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from taps._seeding import weighted_index
from taps.cluster import Clustering, representative_of
from taps.netmap import NetworkMap, ip_to_location
from taps.relays import EXIT, GUARD, RUNNING, Consensus, Relay, exit_policy_allows, positional_weight

TRUSTALL, TRUSTONE, VANILLA = "trustall", "trustone", "vanilla"
MODES = (TRUSTALL, TRUSTONE, VANILLA)
DAY = 86400.0


class SelectionError(RuntimeError):
    pass


class EmptyRelaySetError(SelectionError, ValueError):
    pass


class NoExitError(SelectionError):
    pass


class NoRelayError(SelectionError):
    pass


@dataclass(frozen=True)
class PositionParams:
    su: float = 0.95
    sc: float = 2.0
    au: float = 0.5
    ac: float = 5.0
    w: float = 0.2

    def __post_init__(self):
        if not self.su <= 1:
            raise ValueError("alpha_su must be <= 1")
        if not self.sc >= 1:
            raise ValueError("alpha_sc must be >= 1")
        if not self.au <= self.su:
            raise ValueError("alpha_au must be <= alpha_su")
        if not self.ac >= self.sc:
            raise ValueError("alpha_ac must be >= alpha_sc")
        if not 0 < self.w <= 1:
            raise ValueError("alpha_w must be in (0, 1]")


@dataclass(frozen=True)
class PathParams:
    guard: PositionParams = PositionParams(0.95, 2.0, 0.5, 5.0, 0.2)
    exit: PositionParams = PositionParams(0.95, 2.0, 0.1, 10.0, 0.2)
    num_guards: int = 3
    dirtiness: float = 600.0
    guard_absence_horizon: float = 30 * DAY
    mode: str = TRUSTALL

    def __post_init__(self):
        if self.num_guards < 1:
            raise ValueError("num_guards must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "PathParams":
        d = dict(d)
        for pos in ("guard", "exit"):
            if pos in d and not isinstance(d[pos], PositionParams):
                d[pos] = PositionParams(**d[pos])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown path parameter")
        return cls(**d)


PROFILES = {
    "trustall-paper": PathParams(),
    "trustone-hidden": PathParams(guard=PositionParams(w=0.005), exit=PositionParams(w=1.0), mode=TRUSTONE),
    "trustone-open": PathParams(guard=PositionParams(w=0.005), exit=PositionParams(w=0.005), mode=TRUSTONE),
    "vanilla": PathParams(mode=VANILLA),
}


def load_profile(name_or_path: str) -> PathParams:
    if name_or_path in PROFILES:
        return PROFILES[name_or_path]
    with open(name_or_path) as fh:
        return PathParams.from_json(json.load(fh))


# --- secure relay filters --------------------------------------------------------

def reverse_sort(relays, scores, weights) -> list:
    """Descending score; ties by descending weight, then ascending id."""
    return sorted(relays, key=lambda r: (-scores[r], -weights[r], r))


def secure_relays_trustall(alpha: PositionParams, scores: Mapping, relays: Sequence, weights: Mapping) -> list:
    """Safe relays, then acceptable ones by descending score until ``alpha.w`` of weight is reached.

    ``weights`` should already be fractions of the position's total weight.
    Returns the selected relays in sorted order.
    """
    if not relays:
        raise EmptyRelaySetError("no relays to filter")
    order = reverse_sort(relays, scores, weights)
    s = np.fromiter((scores[r] for r in order), float, len(order))
    w = np.fromiter((weights[r] for r in order), float, len(order))
    s_star = s[0]
    n = len(order)
    safe = (s >= s_star * alpha.su) & (1 - s <= (1 - s_star) * alpha.sc)
    i = n if safe.all() else int(np.argmin(safe))
    if i < n:
        before = np.concatenate(([0.0], np.cumsum(w)[:-1]))
        ok = (s >= s_star * alpha.au) & (1 - s <= (1 - s_star) * alpha.ac) & (before < alpha.w)
        tail = ok[i:]
        i += len(tail) if tail.all() else int(np.argmin(tail))
    return order[:i]


def secure_relays_trustone(alpha_w: float, scores: Mapping, relays: Sequence, weights: Mapping) -> list:
    """Highest-scoring relays until their weight fraction reaches ``alpha_w``."""
    if not relays:
        raise EmptyRelaySetError("no relays to filter")
    order = reverse_sort(relays, scores, weights)
    w = np.fromiter((weights[r] for r in order), float, len(order))
    before = np.concatenate(([0.0], np.cumsum(w)[:-1]))
    stop = int(np.searchsorted(before >= alpha_w, True))  # first index already at the target
    return order[:stop]


def _normalized(relays: Sequence[Relay], position: str) -> dict[str, float]:
    raw = [positional_weight(r, position) for r in relays]
    total = sum(raw)
    if total <= 0:
        return {r.fingerprint: 0.0 for r in relays}
    return {r.fingerprint: x / total for r, x in zip(relays, raw)}


# --- client state -------------------------------------------------------------------

@dataclass
class Circuit:
    guard: str
    middle: str
    exit: str
    created_at: float
    first_stream_at: float | None = None
    last_stream_at: float | None = None

    @property
    def dirty(self) -> bool:
        return self.first_stream_at is not None

    def too_dirty(self, now: float, threshold: float) -> bool:
        return self.first_stream_at is not None and now - self.first_stream_at > threshold

    def attach(self, now: float) -> None:
        if self.first_stream_at is None:
            self.first_stream_at = now
        self.last_stream_at = now


@dataclass
class GuardEntry:
    fingerprint: str
    added_at: float
    last_seen: float


@dataclass
class ClientState:
    client_loc: int
    guards: list[GuardEntry] = field(default_factory=list)
    circuits: list[Circuit] = field(default_factory=list)

    def guard_fps(self) -> list[str]:
        return [g.fingerprint for g in self.guards]


# --- vanilla constraints ------------------------------------------------------------------

@dataclass(frozen=True)
class Constraints:
    exclude: frozenset = frozenset()
    exclude_families: frozenset = frozenset()
    exclude_subnets: frozenset = frozenset()
    dst_ip: str | None = None
    dst_port: int | None = None

    @classmethod
    def apart_from(cls, relays: Sequence[Relay], dst_ip=None, dst_port=None) -> "Constraints":
        return cls(
            exclude=frozenset(r.fingerprint for r in relays),
            exclude_families=frozenset(r.family for r in relays),
            exclude_subnets=frozenset(r.subnet for r in relays if r.subnet is not None),
            dst_ip=dst_ip, dst_port=dst_port,
        )

    def admits(self, r: Relay) -> bool:
        if r.fingerprint in self.exclude or r.family in self.exclude_families:
            return False
        if r.subnet is not None and r.subnet in self.exclude_subnets:
            return False
        return True


def vanilla_eligible(consensus: Consensus, position: str, constraints: Constraints) -> list[Relay]:
    out = []
    for r in consensus.relays:
        if RUNNING not in r.flags or positional_weight(r, position) <= 0 or not constraints.admits(r):
            continue
        if position == "exit" and constraints.dst_port is not None:
            if not exit_policy_allows(r, constraints.dst_ip, constraints.dst_port):
                continue
        out.append(r)
    return out


def vanilla_select(consensus: Consensus, position: str, constraints: Constraints, rng) -> Relay:
    eligible = vanilla_eligible(consensus, position, constraints)
    if not eligible:
        raise NoRelayError(f"no eligible {position} relay")
    return eligible[weighted_index(rng, [positional_weight(r, position) for r in eligible])]


# --- the selector ----------------------------------------------------------------------------

class PathSelector:
    def __init__(self, nmap: NetworkMap, policy, params: PathParams,
                 client_clustering: Clustering | None = None, dst_clustering: Clustering | None = None):
        self.map = nmap
        self.policy = policy
        self.params = params
        self.mode = params.mode
        self.client_clustering = client_clustering
        self.dst_clustering = dst_clustering
        if self.mode != VANILLA and (client_clustering is None or dst_clustering is None):
            raise ValueError(f"{self.mode} needs client and destination clusterings")
        self._dst_loc: dict = {}
        self._allow: dict = {}
        self._exit_lists: dict = {}
        self._intern: dict = {}
        self._secure: dict = {}
        self._guard_exits: dict = {}

    # -- lookups

    def client_rep(self, client_loc: int) -> int:
        if self.client_clustering is None:
            return client_loc
        return representative_of(self.client_clustering, client_loc)

    def dst_location(self, ip) -> int:
        loc = self._dst_loc.get(ip)
        if loc is None:
            loc = self._dst_loc[ip] = ip_to_location(self.map, ip)
        return loc

    def dst_rep(self, dst_loc: int) -> int:
        if self.dst_clustering is None:
            return dst_loc
        return representative_of(self.dst_clustering, dst_loc)

    def _allows(self, r: Relay, ip, port) -> bool:
        key = (r.exit_policy, ip, port)
        v = self._allow.get(key)
        if v is None:
            v = self._allow[key] = exit_policy_allows(r, ip, port)
        return v

    def candidate_exits(self, consensus: Consensus, ip, port) -> tuple[int, list[Relay]]:
        """Guard-independent exit candidates, interned so equal lists share an id."""
        key = (id(consensus), ip, port)
        hit = self._exit_lists.get(key)
        if hit is None:
            exits = [r for r in consensus.relays
                     if RUNNING in r.flags and EXIT in r.flags and r.weight > 0 and self._allows(r, ip, port)]
            sig = tuple((r.fingerprint, r.weight, r.family, r.location, r.subnet) for r in exits)
            lid = self._intern.setdefault(sig, len(self._intern))
            hit = self._exit_lists[key] = (lid, exits, consensus)
        return hit[0], hit[1]

    # -- guards

    def responsive_guards(self, state: ClientState, consensus: Consensus) -> list[str]:
        return [g.fingerprint for g in state.guards if consensus.is_running(g.fingerprint)][: self.params.num_guards]

    def refresh_guards(self, state: ClientState, consensus: Consensus, now: float) -> None:
        kept = []
        for g in state.guards:
            if consensus.is_running(g.fingerprint):
                g.last_seen = now
            if now - g.last_seen <= self.params.guard_absence_horizon:
                kept.append(g)
        state.guards = kept

    def select_guard(self, state: ClientState, consensus: Consensus, rng, now: float = 0.0) -> ClientState:
        """Top up to ``num_guards`` responsive guards."""
        self.refresh_guards(state, consensus, now)
        while len(self.responsive_guards(state, consensus)) < self.params.num_guards:
            g = self._choose_guard(state, consensus, rng)
            state.guards.append(GuardEntry(g.fingerprint, now, now))
        return state

    def guard_candidates(self, state: ClientState, consensus: Consensus) -> list[Relay]:
        held = set(state.guard_fps())
        return [r for r in consensus.relays
                if RUNNING in r.flags and GUARD in r.flags and r.weight > 0 and r.fingerprint not in held]

    def secure_guards(self, state: ClientState, consensus: Consensus) -> list[Relay]:
        cands = self.guard_candidates(state, consensus)
        if not cands:
            raise NoRelayError("no guard-flagged relays available")
        if self.mode == VANILLA:
            return cands
        # held guards missing from this consensus cannot be scored against
        current = [g for g in map(consensus.get, state.guard_fps()) if g is not None]
        rep = self.client_rep(state.client_loc)
        scores = dict(zip((r.fingerprint for r in cands), self.policy.guard_scores(rep, current, cands)))
        weights = _normalized(cands, "guard")
        fps = [r.fingerprint for r in cands]
        if self.mode == TRUSTALL:
            chosen = secure_relays_trustall(self.params.guard, scores, fps, weights)
        else:
            chosen = secure_relays_trustone(self.params.guard.w, scores, fps, weights)
        by_fp = {r.fingerprint: r for r in cands}
        return [by_fp[fp] for fp in chosen]

    def _choose_guard(self, state, consensus, rng) -> Relay:
        secure = self.secure_guards(state, consensus)
        return secure[weighted_index(rng, [positional_weight(r, "guard") for r in secure])]

    # -- exits

    def exit_candidates_for(self, guard: Relay, consensus: Consensus, ip, port) -> tuple[tuple, list[Relay]]:
        lid, exits = self.candidate_exits(consensus, ip, port)
        if self.mode == TRUSTALL:
            return (lid,), exits
        # TrustOne and vanilla: the vanilla guard/exit separation rules apply before scoring
        key = (lid, guard.fingerprint, guard.family, guard.subnet)
        hit = self._guard_exits.get(key)
        if hit is None:
            cons = Constraints.apart_from([guard])
            hit = self._guard_exits[key] = [r for r in exits if cons.admits(r)]
        return key, hit

    def secure_exits(self, guard: Relay, dst_loc: int, consensus: Consensus, ip, port,
                     client_loc: int) -> list[Relay]:
        """Secure exit set for a circuit through ``guard`` (sorted by score)."""
        key_part, exits = self.exit_candidates_for(guard, consensus, ip, port)
        if not exits:
            return []
        if self.mode == VANILLA:
            return exits
        crep = self.client_rep(client_loc)
        drep = self.dst_rep(dst_loc)
        key = (key_part, guard.fingerprint, guard.location, guard.family, crep, drep)
        hit = self._secure.get(key)
        if hit is None:
            scores = dict(zip((r.fingerprint for r in exits), self.policy.exit_scores(crep, drep, guard, exits)))
            weights = _normalized(exits, "exit")
            fps = [r.fingerprint for r in exits]
            if self.mode == TRUSTALL:
                chosen = secure_relays_trustall(self.params.exit, scores, fps, weights)
            else:
                chosen = secure_relays_trustone(self.params.exit.w, scores, fps, weights)
            by_fp = {r.fingerprint: r for r in exits}
            hit = [by_fp[fp] for fp in chosen]
            if len(self._secure) > 200_000:
                self._secure.clear()
            self._secure[key] = hit
        return hit

    def _draw_exit(self, secure: Sequence[Relay], avoid: set, rng) -> Relay | None:
        pool = [r for r in secure if r.fingerprint not in avoid]
        if not pool:
            return None
        return pool[weighted_index(rng, [positional_weight(r, "exit") for r in pool])]

    def _draw_middle(self, consensus: Consensus, guard: Relay, exit: Relay, rng) -> Relay:
        if self.mode == TRUSTALL:
            cons = Constraints(exclude=frozenset((guard.fingerprint, exit.fingerprint)))
        else:
            cons = Constraints.apart_from([guard, exit])
        return vanilla_select(consensus, "middle", cons, rng)

    # -- connect

    def connect(self, state: ClientState, dst_ip, dst_port: int, now: float, consensus: Consensus, rng):
        """Assign a stream to a circuit; returns (circuit, action)."""
        dst_loc = self.dst_location(dst_ip)
        self.select_guard(state, consensus, rng, now)
        thr = self.params.dirtiness
        state.circuits = [c for c in state.circuits
                          if not c.too_dirty(now, thr) and _alive(consensus, c)]
        live = sorted(state.circuits, key=lambda c: -(c.last_stream_at or c.created_at))

        if self.mode == VANILLA:
            for c in live:
                if self._allows(consensus.get(c.exit), dst_ip, dst_port):
                    c.attach(now)
                    return c, "reused"
            return self._new_circuit(state, dst_loc, dst_ip, dst_port, now, consensus, rng), "new"

        for c in live:
            guard = consensus.get(c.guard)
            secure = self.secure_exits(guard, dst_loc, consensus, dst_ip, dst_port, state.client_loc)
            if any(r.fingerprint == c.exit for r in secure):
                c.attach(now)
                return c, "reused"
        if live:
            parent = live[0]
            guard = consensus.get(parent.guard)
            secure = self.secure_exits(guard, dst_loc, consensus, dst_ip, dst_port, state.client_loc)
            e = self._draw_exit(secure, {parent.guard, parent.middle}, rng)
            if e is not None:
                c = Circuit(parent.guard, parent.middle, e.fingerprint, parent.created_at,
                            parent.first_stream_at, parent.last_stream_at)
                c.attach(now)
                state.circuits.append(c)
                return c, "spliced"
        return self._new_circuit(state, dst_loc, dst_ip, dst_port, now, consensus, rng), "new"

    def _new_circuit(self, state, dst_loc, dst_ip, dst_port, now, consensus, rng) -> Circuit:
        guards = self.responsive_guards(state, consensus)
        g = consensus.get(guards[int(rng.integers(len(guards)))])
        secure = self.secure_exits(g, dst_loc, consensus, dst_ip, dst_port, state.client_loc)
        e = self._draw_exit(secure, {g.fingerprint}, rng)
        if e is None:
            raise NoExitError(f"no exit for {dst_ip}:{dst_port} via guard {g.fingerprint}")
        m = self._draw_middle(consensus, g, e, rng)
        c = Circuit(g.fingerprint, m.fingerprint, e.fingerprint, now)
        c.attach(now)
        state.circuits.append(c)
        return c


def _alive(consensus: Consensus, c: Circuit) -> bool:
    return consensus.is_running(c.guard) and consensus.is_running(c.middle) and consensus.is_running(c.exit)


def select_guard(selector: PathSelector, state: ClientState, consensus: Consensus, rng, now: float = 0.0):
    return selector.select_guard(state, consensus, rng, now)


def connect(selector: PathSelector, state: ClientState, dst_ip, dst_port, now, consensus, rng):
    circuit, action = selector.connect(state, dst_ip, dst_port, now, consensus, rng)
    return state, circuit, action
