"""Locations, network entities and the entity sets on virtual links."""

from __future__ import annotations

import ipaddress
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from taps._seeding import make_rng, unit_hash

AS_ORG = "as_org"
IXP_ORG = "ixp_org"
ENTITY_KINDS = (AS_ORG, IXP_ORG)


class MapError(Exception):
    """Base class for network-map errors."""


class UnknownLocationError(MapError, KeyError):
    pass


class MissingLinkError(MapError, KeyError):
    pass


class UnmappedAddressError(MapError, LookupError):
    pass


class InvalidMapSpecError(MapError, ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Location:
    id: int
    size: int
    owner: int
    client_rank: int | None = None


@dataclass(frozen=True)
class Entity:
    id: int
    kind: str
    country: str | None = None


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


class VirtualLinkTable:
    """Unordered location pair -> frozenset of entity ids.

    Lookups are symmetric and every set contains the owners of both
    endpoints.  A self-link ``(a, a)`` holds just the owner of ``a``.
    """

    def __init__(self, owners: Mapping[int, int]):
        self._owners = dict(owners)

    def get(self, a: int, b: int) -> frozenset[int]:
        raise NotImplementedError

    def pairs(self) -> Iterator[tuple[int, int]]:
        """Distinct unordered pairs (a < b) that the table can answer."""
        raise NotImplementedError

    def as_dict(self) -> dict[tuple[int, int], frozenset[int]]:
        return {p: self.get(*p) for p in self.pairs()}

    def __eq__(self, other):
        if not isinstance(other, VirtualLinkTable):
            return NotImplemented
        return self._owners == other._owners and self.as_dict() == other.as_dict()

    __hash__ = None


class ExplicitLinkTable(VirtualLinkTable):
    def __init__(self, owners: Mapping[int, int], links: Mapping[tuple[int, int], Iterable[int]]):
        super().__init__(owners)
        table = {}
        for (a, b), ents in links.items():
            if a == b:
                continue
            table[_key(a, b)] = frozenset(ents) | {self._owners[a], self._owners[b]}
        self._table = table

    def get(self, a, b):
        if a == b:
            return frozenset((self._owners[a],))
        try:
            return self._table[_key(a, b)]
        except KeyError:
            raise MissingLinkError(f"no virtual-link entry for ({a}, {b})") from None

    def pairs(self):
        return iter(sorted(self._table))

    def __len__(self):
        return len(self._table)


class LayeredLinkTable(VirtualLinkTable):
    """Synthetic links built from per-location upstream provider chains.

    ``get(a, b)`` is owner(a) | upstream(a) | upstream(b) | owner(b), plus an
    IXP organization on a deterministic pseudo-random fraction of pairs.
    Nothing is stored per pair, so the table answers every pair of a large map.
    """

    def __init__(self, owners, upstream: Mapping[int, tuple[int, ...]],
                 ixps: tuple[int, ...], ixp_rate: float, salt: int):
        super().__init__(owners)
        self._up = {loc: frozenset(chain) for loc, chain in upstream.items()}
        self._ixps = tuple(ixps)
        self._ixp_rate = float(ixp_rate) if self._ixps else 0.0
        self._salt = salt
        self._ids = sorted(self._owners)

    def get(self, a, b):
        if a == b:
            return frozenset((self._owners[a],))
        a, b = _key(a, b)
        ents = {self._owners[a], self._owners[b]}
        ents |= self._up[a]
        ents |= self._up[b]
        if self._ixp_rate > 0.0:
            u = unit_hash(self._salt, "ixp", a, b)
            if u < self._ixp_rate:
                ents.add(self._ixps[int(u / self._ixp_rate * len(self._ixps)) % len(self._ixps)])
        return frozenset(ents)

    def pairs(self):
        ids = self._ids
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                yield (a, b)

    def materialize(self) -> ExplicitLinkTable:
        return ExplicitLinkTable(self._owners, self.as_dict())


class PrefixIndex:
    """Longest-prefix match from IP address to location id."""

    def __init__(self, entries: Iterable[tuple[str, int]]):
        nets = []
        for prefix, loc in entries:
            nets.append((ipaddress.ip_network(prefix, strict=True), int(loc)))
        nets.sort(key=lambda e: (e[0].version, int(e[0].network_address), e[0].prefixlen))
        self.entries: list[tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, int]] = nets
        self._by_len: dict[tuple[int, int], dict[int, int]] = {}
        for net, loc in nets:
            self._by_len.setdefault((net.version, net.prefixlen), {})[int(net.network_address)] = loc
        self._lengths = {
            v: sorted({plen for (ver, plen) in self._by_len if ver == v}, reverse=True) for v in (4, 6)
        }

    def lookup(self, ip) -> int:
        addr = ipaddress.ip_address(ip)
        bits = addr.max_prefixlen
        value = int(addr)
        for plen in self._lengths[addr.version]:
            net = value >> (bits - plen) << (bits - plen) if plen else 0
            loc = self._by_len[(addr.version, plen)].get(net)
            if loc is not None:
                return loc
        raise UnmappedAddressError(f"no prefix covers {addr}")

    def prefixes_of(self, loc: int) -> list:
        return [net for net, l in self.entries if l == loc]

    def __eq__(self, other):
        if not isinstance(other, PrefixIndex):
            return NotImplemented
        return self.entries == other.entries

    __hash__ = None

    def __len__(self):
        return len(self.entries)


@dataclass(eq=False)
class NetworkMap:
    locations: list[Location]
    entities: list[Entity]
    links: VirtualLinkTable
    ip_index: PrefixIndex = field(default_factory=lambda: PrefixIndex([]))

    def __post_init__(self):
        self._loc = {l.id: l for l in self.locations}
        self._ent = {e.id: e for e in self.entities}
        if len(self._loc) != len(self.locations):
            raise MapError("duplicate location id")
        if len(self._ent) != len(self.entities):
            raise MapError("duplicate entity id")
        ranks = [l.client_rank for l in self.locations if l.client_rank is not None]
        if len(set(ranks)) != len(ranks):
            raise MapError("duplicate client rank")
        for l in self.locations:
            if l.size < 1:
                raise MapError(f"location {l.id} has size < 1")
            if l.owner not in self._ent:
                raise MapError(f"location {l.id} owned by unknown entity {l.owner}")
        self._owned_count: dict[int, int] = {}
        for l in self.locations:
            self._owned_count[l.owner] = self._owned_count.get(l.owner, 0) + 1

    def location(self, loc_id: int) -> Location:
        try:
            return self._loc[loc_id]
        except KeyError:
            raise UnknownLocationError(f"unknown location {loc_id}") from None

    def entity(self, ent_id: int) -> Entity:
        return self._ent[ent_id]

    def has_location(self, loc_id: int) -> bool:
        return loc_id in self._loc

    @property
    def location_ids(self) -> list[int]:
        return [l.id for l in self.locations]

    def is_lone_as(self, ent_id: int) -> bool:
        """An AS that is not part of any multi-AS organization."""
        e = self._ent[ent_id]
        return e.kind == AS_ORG and self._owned_count.get(ent_id, 0) <= 1

    def country_of_location(self, loc_id: int) -> str | None:
        return self._ent[self.location(loc_id).owner].country

    def ranked_clients(self) -> list[Location]:
        return sorted((l for l in self.locations if l.client_rank is not None),
                      key=lambda l: l.client_rank)

    def __eq__(self, other):
        if not isinstance(other, NetworkMap):
            return NotImplemented
        return (self.locations == other.locations and self.entities == other.entities
                and self.ip_index == other.ip_index and self.links == other.links)

    __hash__ = None


def entities_on_link(nmap: NetworkMap, a: int, b: int) -> frozenset[int]:
    nmap.location(a)
    nmap.location(b)
    return nmap.links.get(a, b)


def ip_to_location(nmap: NetworkMap, ip) -> int:
    return nmap.ip_index.lookup(ip)


# --- synthetic generation -------------------------------------------------

@dataclass(frozen=True)
class SyntheticMapSpec:
    n_locations: int
    n_entities: int
    mean_entities_per_link: float = 4.0
    ixp_fraction: float = 0.1
    n_countries: int = 10
    n_ranked_clients: int | None = None
    first_location_id: int = 1

    def validate(self):
        if self.n_locations < 1:
            raise InvalidMapSpecError("n_locations", "must be at least 1")
        if self.n_entities < 1:
            raise InvalidMapSpecError("n_entities", "must be at least 1")
        if self.mean_entities_per_link < 1:
            raise InvalidMapSpecError("mean_entities_per_link", "must be at least 1")
        if not 0 <= self.ixp_fraction < 1:
            raise InvalidMapSpecError("ixp_fraction", "must be in [0, 1)")
        if self.n_countries < 1:
            raise InvalidMapSpecError("n_countries", "must be at least 1")
        if self.n_ranked_clients is not None and not 0 <= self.n_ranked_clients <= self.n_locations:
            raise InvalidMapSpecError("n_ranked_clients", "must be in [0, n_locations]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticMapSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidMapSpecError(sorted(unknown)[0], "unknown field")
        return cls(**d)


_IXP_RATE = 0.25
_MAX_BLOCK_BITS = 22


def _chains(rng, loc_ids, owners, transit, core, mean_len):
    base = int(math.floor(mean_len))
    frac = mean_len - base
    upstream = {}
    for loc in loc_ids:
        n = base + (1 if rng.random() < frac else 0)
        chain = []
        pool = [t for t in transit if t != owners[loc]] or transit
        for j in range(n):
            src = pool if j == 0 else core
            chain.append(int(src[int(rng.integers(len(src)))]))
        upstream[loc] = tuple(chain)
    return upstream


def generate_synthetic_map(spec: SyntheticMapSpec, seed: int, materialize: bool = False) -> NetworkMap:
    """Build a random AS-level map whose mean link-set size tracks the spec.

    Each location gets an owning AS organization and a short chain of
    upstream providers; a link's entity set is the union of both endpoints'
    owners and chains plus, on some pairs, an IXP organization.
    """
    spec.validate()
    rng = make_rng(seed, "netmap")
    n_ent = spec.n_entities
    n_ixp = int(round(spec.ixp_fraction * n_ent)) if n_ent >= 3 else 0
    n_as = n_ent - n_ixp
    countries = [f"C{i:02d}" for i in range(spec.n_countries)]
    entities = []
    for i in range(n_ent):
        kind = AS_ORG if i < n_as else IXP_ORG
        entities.append(Entity(id=i + 1, kind=kind, country=countries[int(rng.integers(len(countries)))]))
    as_ids = [e.id for e in entities if e.kind == AS_ORG]
    ixp_ids = tuple(e.id for e in entities if e.kind == IXP_ORG)
    transit = as_ids[: max(1, n_as // 5)]
    core = transit[: max(1, len(transit) // 4)]

    loc_ids = list(range(spec.first_location_id, spec.first_location_id + spec.n_locations))
    # Zipf-like ownership: a few large organizations, a tail of lone ASes.
    own_w = 1.0 / np.arange(1, n_as + 1) ** 1.1
    own_w /= own_w.sum()
    owner_idx = rng.choice(n_as, size=spec.n_locations, p=own_w)
    owners = {loc: as_ids[int(k)] for loc, k in zip(loc_ids, owner_idx)}
    sizes = np.clip(np.round(rng.lognormal(mean=9.0, sigma=1.5, size=spec.n_locations)), 1, 2 ** _MAX_BLOCK_BITS)

    n_ranked = spec.n_ranked_clients
    if n_ranked is None:
        n_ranked = min(spec.n_locations, 50)
    ranked = rng.permutation(spec.n_locations)[:n_ranked]
    rank_of = {loc_ids[int(i)]: r + 1 for r, i in enumerate(ranked)}
    locations = [
        Location(id=loc, size=int(s), owner=owners[loc], client_rank=rank_of.get(loc))
        for loc, s in zip(loc_ids, sizes)
    ]

    ixp_rate = _IXP_RATE if ixp_ids else 0.0
    salt = int(rng.integers(2 ** 62))
    mean_len = max(0.0, (spec.mean_entities_per_link - 2.0 - ixp_rate) / 2.0)
    chain_seed = int(rng.integers(2 ** 62))
    upstream = _chains(make_rng(chain_seed, 0), loc_ids, owners, transit, core, mean_len)
    table = LayeredLinkTable(owners, upstream, ixp_ids, ixp_rate, salt)
    if spec.n_locations > 1 and len(transit) > 1:
        # One correction pass for overlap between chains and owners.
        measured = _sampled_mean(table, loc_ids, make_rng(chain_seed, "probe"))
        mean_len = max(0.0, mean_len + (spec.mean_entities_per_link - measured) / 2.0)
        upstream = _chains(make_rng(chain_seed, 1), loc_ids, owners, transit, core, mean_len)
        table = LayeredLinkTable(owners, upstream, ixp_ids, ixp_rate, salt)
    if materialize:
        table = table.materialize()

    index = PrefixIndex(_allocate_prefixes(locations))
    return NetworkMap(locations=locations, entities=entities, links=table, ip_index=index)


def _sampled_mean(table, loc_ids, rng, n=4000) -> float:
    ids = np.asarray(loc_ids)
    total = 0
    count = 0
    for _ in range(n):
        a, b = rng.choice(ids, size=2, replace=False)
        total += len(table.get(int(a), int(b)))
        count += 1
    return total / count


def _allocate_prefixes(locations: list[Location]) -> list[tuple[str, int]]:
    """One aligned IPv4 block per location, starting at 1.0.0.0."""
    entries = []
    cursor = 1 << 24
    blocks = []
    for loc in locations:
        bits = max(8, math.ceil(math.log2(loc.size))) if loc.size > 1 else 8
        blocks.append((-bits, loc.id))
    # largest first keeps every block aligned without gaps
    for neg_bits, loc_id in sorted(blocks):
        bits = -neg_bits
        block = 1 << bits
        if cursor + block > (224 << 24):
            raise InvalidMapSpecError("n_locations", "address space exhausted")
        entries.append((f"{ipaddress.IPv4Address(cursor)}/{32 - bits}", loc_id))
        cursor += block
    return entries


def mean_link_size(nmap: NetworkMap) -> float:
    sizes = [len(s) for s in nmap.links.as_dict().values()]
    return sum(sizes) / len(sizes) if sizes else 0.0


# --- JSON import/export ---------------------------------------------------

def map_to_json(nmap: NetworkMap) -> dict:
    return {
        "locations": [
            {"id": l.id, "size": l.size, "owner": l.owner, "client_rank": l.client_rank}
            for l in nmap.locations
        ],
        "entities": [{"id": e.id, "kind": e.kind, "country": e.country} for e in nmap.entities],
        "links": [
            {"a": a, "b": b, "entities": sorted(s)} for (a, b), s in sorted(nmap.links.as_dict().items())
        ],
        "prefixes": [{"prefix": str(net), "location": loc} for net, loc in nmap.ip_index.entries],
    }


def map_from_json(data: Mapping) -> NetworkMap:
    locations = [
        Location(id=int(d["id"]), size=int(d.get("size", 1)), owner=int(d["owner"]),
                 client_rank=d.get("client_rank"))
        for d in data["locations"]
    ]
    entities = []
    for d in data["entities"]:
        kind = d.get("kind", AS_ORG)
        if kind not in ENTITY_KINDS:
            raise MapError(f"entity {d['id']}: unknown kind {kind!r}")
        entities.append(Entity(id=int(d["id"]), kind=kind, country=d.get("country")))
    ent_ids = {e.id for e in entities}
    owners = {l.id: l.owner for l in locations}
    links = {}
    for d in data.get("links", []):
        a, b = int(d["a"]), int(d["b"])
        if a not in owners or b not in owners:
            raise UnknownLocationError(f"link ({a}, {b}) names an unknown location")
        ents = [int(e) for e in d["entities"]]
        missing = set(ents) - ent_ids
        if missing:
            raise MapError(f"link ({a}, {b}) names unknown entities {sorted(missing)}")
        links[(a, b)] = ents
    index = PrefixIndex((d["prefix"], int(d["location"])) for d in data.get("prefixes", []))
    return NetworkMap(locations=locations, entities=entities, links=ExplicitLinkTable(owners, links),
                      ip_index=index)


def load_map_json(path) -> NetworkMap:
    with open(path) as fh:
        return map_from_json(json.load(fh))
