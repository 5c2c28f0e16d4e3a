"""Relays, consensus snapshots, exit policies and family uptime."""

from __future__ import annotations

import bisect
import functools
import ipaddress
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from taps._seeding import make_rng

RUNNING, FAST, VALID, GUARD, EXIT = "running", "fast", "valid", "guard", "exit"
FLAGS = frozenset({RUNNING, FAST, VALID, GUARD, EXIT})
ACTIVE_FLAGS = frozenset({RUNNING, FAST, VALID})
POSITIONS = ("guard", "middle", "exit")

HALF_LIFE_DAYS = 30.0
DEFAULT_CADENCE_DAYS = 1.0 / 24.0


class ConsensusOrderError(ValueError):
    pass


class PolicyParseError(ValueError):
    pass


@dataclass(frozen=True)
class ExitRule:
    accept: bool
    network: ipaddress.IPv4Network | ipaddress.IPv6Network | None
    port_lo: int
    port_hi: int

    def matches(self, ip, port: int) -> bool:
        if not self.port_lo <= port <= self.port_hi:
            return False
        if self.network is None:
            return True
        if ip is None:  # address unknown: only port-wide rules apply
            return False
        addr = ipaddress.ip_address(ip)
        return addr.version == self.network.version and addr in self.network

    def __str__(self):
        target = "*" if self.network is None else str(self.network)
        if self.port_lo == 1 and self.port_hi == 65535:
            ports = "*"
        elif self.port_lo == self.port_hi:
            ports = str(self.port_lo)
        else:
            ports = f"{self.port_lo}-{self.port_hi}"
        return f"{'accept' if self.accept else 'reject'} {target}:{ports}"

    @classmethod
    def parse(cls, text: str) -> "ExitRule":
        try:
            action, spec = text.split()
        except ValueError:
            raise PolicyParseError(f"bad rule {text!r}") from None
        if action not in ("accept", "reject"):
            raise PolicyParseError(f"bad action in {text!r}")
        target, _, ports = spec.rpartition(":")
        if not target:
            raise PolicyParseError(f"missing port in {text!r}")
        try:
            network = None if target == "*" else ipaddress.ip_network(target.strip("[]"), strict=False)
            if ports == "*":
                lo, hi = 1, 65535
            elif "-" in ports:
                lo, hi = (int(p) for p in ports.split("-"))
            else:
                lo = hi = int(ports)
        except ValueError:
            raise PolicyParseError(f"bad rule {text!r}") from None
        if not 1 <= lo <= hi <= 65535:
            raise PolicyParseError(f"bad port range in {text!r}")
        return cls(action == "accept", network, lo, hi)


def parse_policy(rules: Iterable[str]) -> tuple[ExitRule, ...]:
    return tuple(ExitRule.parse(r) for r in rules)


@dataclass(frozen=True)
class Relay:
    fingerprint: str
    location: int
    flags: frozenset = frozenset()
    weight: float = 0.0
    family: str = ""
    exit_policy: tuple[ExitRule, ...] = ()
    address: str | None = None

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"relay {self.fingerprint}: negative weight")
        if not self.family:
            object.__setattr__(self, "family", self.fingerprint)
        object.__setattr__(self, "flags", frozenset(self.flags))

    @property
    def subnet(self) -> str | None:
        """/16 tag used by the vanilla guard/exit separation rule."""
        return _subnet_of(self.address)

    @property
    def active(self) -> bool:
        return ACTIVE_FLAGS <= self.flags


@functools.lru_cache(maxsize=65536)
def _subnet_of(address: str | None) -> str | None:
    if address is None:
        return None
    addr = ipaddress.ip_address(address)
    if addr.version == 4:
        return str(ipaddress.ip_network(f"{addr}/16", strict=False))
    return str(ipaddress.ip_network(f"{addr}/32", strict=False))


def positional_weight(relay: Relay, position: str) -> float:
    if position == "guard":
        return relay.weight if GUARD in relay.flags else 0.0
    if position == "exit":
        return relay.weight if EXIT in relay.flags else 0.0
    if position == "middle":
        return relay.weight
    raise ValueError(f"unknown position {position!r}")


def exit_policy_allows(relay: Relay, ip, port: int) -> bool:
    if not 1 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    for rule in relay.exit_policy:
        if rule.matches(ip, port):
            return rule.accept
    return True


@dataclass
class Consensus:
    timestamp: int
    relays: list[Relay]

    def __post_init__(self):
        self._by_fp = {r.fingerprint: r for r in self.relays}
        if len(self._by_fp) != len(self.relays):
            raise ValueError(f"duplicate fingerprint in consensus {self.timestamp}")

    def get(self, fingerprint: str) -> Relay | None:
        return self._by_fp.get(fingerprint)

    def __contains__(self, fingerprint):
        return fingerprint in self._by_fp

    def is_running(self, fingerprint: str) -> bool:
        r = self._by_fp.get(fingerprint)
        return r is not None and RUNNING in r.flags

    @property
    def epoch_seconds(self) -> int:
        return self.timestamp * 3600

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "relays": [
                {
                    "fingerprint": r.fingerprint,
                    "location": r.location,
                    "flags": sorted(r.flags),
                    "weight": r.weight,
                    "family": r.family,
                    "exit_policy": [str(x) for x in r.exit_policy],
                    "address": r.address,
                }
                for r in self.relays
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Consensus":
        relays = []
        for r in d["relays"]:
            flags = frozenset(r.get("flags", ()))
            unknown = flags - FLAGS
            if unknown:
                raise ValueError(f"relay {r['fingerprint']}: unknown flags {sorted(unknown)}")
            relays.append(Relay(
                fingerprint=r["fingerprint"], location=int(r["location"]), flags=flags,
                weight=float(r.get("weight", 0.0)), family=r.get("family") or "",
                exit_policy=parse_policy(r.get("exit_policy", ())), address=r.get("address"),
            ))
        return cls(timestamp=int(d["timestamp"]), relays=relays)


class ConsensusSequence(Sequence):
    def __init__(self, consensuses: Iterable[Consensus]):
        self._items = list(consensuses)
        stamps = [c.timestamp for c in self._items]
        for a, b in zip(stamps, stamps[1:]):
            if b <= a:
                raise ConsensusOrderError(f"consensus timestamps not increasing: {a} then {b}")
        self._starts = [c.epoch_seconds for c in self._items]

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def index_at(self, epoch_seconds: float) -> int:
        """Index of the consensus in force at the given time."""
        i = bisect.bisect_right(self._starts, epoch_seconds) - 1
        if i < 0:
            raise LookupError(f"time {epoch_seconds} precedes the first consensus")
        return i

    def active_at(self, epoch_seconds: float) -> Consensus:
        return self._items[self.index_at(epoch_seconds)]

    @property
    def span_seconds(self) -> tuple[int, int]:
        """[start, end) covered, counting the last consensus as valid for one hour."""
        return self._starts[0], self._starts[-1] + 3600


def write_consensuses(path, consensuses: Iterable[Consensus]) -> None:
    with open(path, "w") as fh:
        for c in consensuses:
            fh.write(json.dumps(c.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_consensuses(path) -> ConsensusSequence:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Consensus.from_json(json.loads(line)))
    return ConsensusSequence(out)


@dataclass
class FamilyUptimeTracker:
    """Exponentially discounted presence time per relay, in days.

    Each consensus contributes ``gap_days`` of presence for every relay that
    holds running+fast+valid, and every stored value first decays by
    ``2 ** (-gap_days / 30)``.  A family's uptime is the sum over its
    members; membership follows the most recent consensus a relay appeared in.
    """

    uptime: dict[str, float] = field(default_factory=dict)
    family_of: dict[str, str] = field(default_factory=dict)
    last_timestamp: int | None = None

    def update(self, consensus: Consensus) -> "FamilyUptimeTracker":
        if self.last_timestamp is None:
            gap = DEFAULT_CADENCE_DAYS
        else:
            if consensus.timestamp <= self.last_timestamp:
                raise ConsensusOrderError(
                    f"consensus {consensus.timestamp} does not follow {self.last_timestamp}")
            gap = (consensus.timestamp - self.last_timestamp) / 24.0
        lam = 2.0 ** (-gap / HALF_LIFE_DAYS)
        for fp in self.uptime:
            self.uptime[fp] *= lam
        for r in consensus.relays:
            self.family_of[r.fingerprint] = r.family
            if r.active:
                self.uptime[r.fingerprint] = self.uptime.get(r.fingerprint, 0.0) + gap
            else:
                self.uptime.setdefault(r.fingerprint, 0.0)
        self.last_timestamp = consensus.timestamp
        return self

    def relay_uptime(self, fingerprint: str) -> float:
        return self.uptime.get(fingerprint, 0.0)

    def family_uptimes(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for fp, fam in self.family_of.items():
            out[fam] = out.get(fam, 0.0) + self.uptime.get(fp, 0.0)
        return out

    def family_uptime(self, family: str) -> float:
        return sum(self.uptime.get(fp, 0.0) for fp, fam in self.family_of.items() if fam == family)

    def family_sizes(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for fam in self.family_of.values():
            out[fam] = out.get(fam, 0) + 1
        return out


def update_uptime(tracker: FamilyUptimeTracker, consensus: Consensus) -> FamilyUptimeTracker:
    return tracker.update(consensus)


def track(consensuses: Iterable[Consensus], until_hour: int | None = None) -> FamilyUptimeTracker:
    tracker = FamilyUptimeTracker()
    for c in consensuses:
        if until_hour is not None and c.timestamp > until_hour:
            break
        tracker.update(c)
    return tracker


# --- synthetic consensus sequences -----------------------------------------

_POLICIES = (
    (0.55, ("accept *:80", "accept *:443", "reject *:*")),
    (0.30, ("reject 127.0.0.0/8:*", "accept *:*")),
    (0.15, ("accept *:443", "accept *:6660-6697", "reject *:*")),
)


@dataclass(frozen=True)
class SyntheticConsensusSpec:
    n_relays: int = 100
    n_hours: int = 168
    start_hour: int = 0
    guard_fraction: float = 0.4
    exit_fraction: float = 0.3
    family_fraction: float = 0.3
    n_hosts: int | None = None
    churn_rate: float = 0.005
    birth_rate: float = 0.05
    warmup_hours: int = 0

    @classmethod
    def from_dict(cls, d) -> "SyntheticConsensusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown field")
        return cls(**d)


def _make_relay(rng, idx, nmap, hosts, spec, families) -> Relay:
    fp = f"R{idx:05d}"
    loc = int(hosts[int(rng.integers(len(hosts)))])
    flags = set(ACTIVE_FLAGS)
    u = rng.random()
    if u < spec.guard_fraction:
        flags.add(GUARD)
    if spec.guard_fraction <= u < spec.guard_fraction + spec.exit_fraction or rng.random() < 0.1:
        flags.add(EXIT)
    weight = float(max(1, round(rng.lognormal(mean=8.0, sigma=1.0))))
    family = fp
    if families and rng.random() < spec.family_fraction:
        family = families[int(rng.integers(len(families)))]
    policy = ()
    if EXIT in flags:
        v = rng.random()
        acc = 0.0
        for p, rules in _POLICIES:
            acc += p
            if v < acc:
                policy = parse_policy(rules)
                break
    else:
        policy = parse_policy(("reject *:*",))
    nets = nmap.ip_index.prefixes_of(loc)
    address = None
    if nets:
        net = nets[0]
        address = str(net.network_address + int(rng.integers(1, max(2, net.num_addresses - 1))))
    return Relay(fp, loc, frozenset(flags), weight, family, policy, address)


def generate_consensuses(nmap, spec: SyntheticConsensusSpec, seed: int) -> list[Consensus]:
    """Hourly snapshots with per-relay presence churn and relay births.

    The first ``warmup_hours`` snapshots precede ``start_hour`` so that
    family uptimes have accumulated by the time a simulation starts.
    """
    if spec.n_relays < 1 or spec.n_hours < 1:
        raise ValueError("n_relays and n_hours must be positive")
    rng = make_rng(seed, "consensus")
    loc_ids = nmap.location_ids
    n_hosts = spec.n_hosts or max(1, min(len(loc_ids), spec.n_relays // 2))
    hosts = sorted(int(x) for x in rng.choice(loc_ids, size=min(n_hosts, len(loc_ids)), replace=False))
    families = [f"F{i:03d}" for i in range(max(1, spec.n_relays // 8))] if spec.family_fraction > 0 else []
    relays = [_make_relay(rng, i, nmap, hosts, spec, families) for i in range(spec.n_relays)]
    present = [True] * len(relays)
    out = []
    first = spec.start_hour - spec.warmup_hours
    for h in range(spec.warmup_hours + spec.n_hours):
        if h:
            flips = rng.random(len(relays)) < spec.churn_rate
            present = [p != bool(f) for p, f in zip(present, flips)]
            if rng.random() < spec.birth_rate:
                relays.append(_make_relay(rng, len(relays), nmap, hosts, spec, families))
                present.append(True)
        out.append(Consensus(first + h, [r for r, p in zip(relays, present) if p]))
    return out


def relay_hosts(consensuses: Iterable[Consensus], position: str) -> dict[int, float]:
    """Location -> mean positional weight hosted there across the snapshots."""
    totals: dict[int, float] = {}
    n = 0
    for c in consensuses:
        n += 1
        for r in c.relays:
            w = positional_weight(r, position)
            if w > 0:
                totals[r.location] = totals.get(r.location, 0.0) + w
    return {loc: w / n for loc, w in sorted(totals.items())} if n else {}


def weights_array(relays: Sequence[Relay], position: str) -> np.ndarray:
    return np.array([positional_weight(r, position) for r in relays], dtype=float)
