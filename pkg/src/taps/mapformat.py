"""Compact binary encodings for network maps and per-client bundles.

Map file (``TAPM``)::

    magic "TAPM" | version u8 | flags u8 (bit 0: entity refs are u32)
    varint n_entities, then per entity: varint id, u8 kind, u8 len, country ascii
    varint n_locations, then per location:
        varint id, varint size, entity-ref owner, varint (client_rank + 1, 0 = none)
    varint n_links, then per link (sorted, a < b):
        varint loc-index a, varint loc-index b, varint count, count * entity-ref
    varint n_prefixes, then per prefix (sorted by version, address, length):
        u8 version, u8 length, 4 or 16 address bytes, varint loc-index

Integers are little-endian; varints are unsigned LEB128.  Entity refs are
indices into the entity list, two bytes wide unless there are more than
65535 entities.

Client bundle (``TAPB``) holds what one client needs to run path selection:
the cluster table for every location and the entity lists of every virtual
link between its client representative and the guard hosts, and between each
destination representative and the exit hosts.

    magic "TAPB" | version u8
    cluster table section:
        varint n_locations
        n_locations * (u16 client-cluster, u16 destination-cluster)
        varint n_client_reps, varint loc-index...
        varint n_dst_reps, varint loc-index...
    link-list section:
        varint client-rep loc-index
        varint n_guard_hosts, varint loc-index...
        varint n_exit_hosts, varint loc-index...
        per guard host: u8 count, count * u16 entity-ref
        per destination rep, per exit host: u8 count, count * u16 entity-ref
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass

from taps.netmap import (AS_ORG, IXP_ORG, Entity, ExplicitLinkTable, Location, MapError, NetworkMap,
                         PrefixIndex)

MAP_MAGIC = b"TAPM"
BUNDLE_MAGIC = b"TAPB"
VERSION = 1
_KINDS = {AS_ORG: 0, IXP_ORG: 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated stream", self.pos)
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def varint(self) -> int:
        start = self.pos
        shift = 0
        value = 0
        while True:
            if self.pos >= len(self.data):
                raise FormatError("truncated varint", start)
            b = self.data[self.pos]
            self.pos += 1
            value |= (b & 0x7F) << shift
            if not b & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise FormatError("varint too long", start)

    def index(self, limit: int, what: str) -> int:
        at = self.pos
        i = self.varint()
        if i >= limit:
            raise FormatError(f"{what} index {i} out of range", at)
        return i


def serialize_map(nmap: NetworkMap) -> bytes:
    wide = len(nmap.entities) > 0xFFFF
    ref = struct.Struct("<I" if wide else "<H")
    ent_index = {e.id: i for i, e in enumerate(nmap.entities)}
    loc_index = {l.id: i for i, l in enumerate(nmap.locations)}

    out = bytearray(MAP_MAGIC)
    out.append(VERSION)
    out.append(1 if wide else 0)

    write_varint(out, len(nmap.entities))
    for e in nmap.entities:
        write_varint(out, e.id)
        out.append(_KINDS[e.kind])
        country = (e.country or "").encode("ascii")
        out.append(len(country))
        out += country

    write_varint(out, len(nmap.locations))
    for l in nmap.locations:
        write_varint(out, l.id)
        write_varint(out, l.size)
        out += ref.pack(ent_index[l.owner])
        write_varint(out, 0 if l.client_rank is None else l.client_rank + 1)

    links = sorted((loc_index[a], loc_index[b], s) for (a, b), s in nmap.links.as_dict().items())
    write_varint(out, len(links))
    for ia, ib, ents in links:
        if ia > ib:
            ia, ib = ib, ia
        write_varint(out, ia)
        write_varint(out, ib)
        write_varint(out, len(ents))
        for e in sorted(ent_index[x] for x in ents):
            out += ref.pack(e)

    write_varint(out, len(nmap.ip_index.entries))
    for net, loc in nmap.ip_index.entries:
        out.append(net.version)
        out.append(net.prefixlen)
        out += net.network_address.packed
        write_varint(out, loc_index[loc])
    return bytes(out)


def deserialize_map(data: bytes) -> NetworkMap:
    r = _Reader(data)
    if r.take(4) != MAP_MAGIC:
        raise FormatError("bad magic", 0)
    version = r.u8()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    wide = r.u8() & 1
    read_ref = r.u32 if wide else r.u16

    entities = []
    for _ in range(r.varint()):
        eid = r.varint()
        at = r.pos
        kind = _KIND_NAMES.get(r.u8())
        if kind is None:
            raise FormatError("unknown entity kind", at)
        n = r.u8()
        country = r.take(n).decode("ascii") if n else None
        entities.append(Entity(id=eid, kind=kind, country=country))

    def entity_ref() -> int:
        at = r.pos
        i = read_ref()
        if i >= len(entities):
            raise FormatError(f"entity index {i} out of range", at)
        return entities[i].id

    locations = []
    for _ in range(r.varint()):
        lid = r.varint()
        size = r.varint()
        owner = entity_ref()
        rank = r.varint()
        locations.append(Location(id=lid, size=size, owner=owner, client_rank=rank - 1 if rank else None))

    n_loc = len(locations)
    links = {}
    for _ in range(r.varint()):
        a = locations[r.index(n_loc, "location")].id
        b = locations[r.index(n_loc, "location")].id
        links[(a, b)] = [entity_ref() for _ in range(r.varint())]

    prefixes = []
    for _ in range(r.varint()):
        at = r.pos
        ver = r.u8()
        if ver not in (4, 6):
            raise FormatError(f"bad address family {ver}", at)
        plen = r.u8()
        raw = r.take(4 if ver == 4 else 16)
        loc = locations[r.index(n_loc, "location")].id
        addr = ipaddress.ip_address(raw)
        prefixes.append((f"{addr}/{plen}", loc))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes", r.pos)

    owners = {l.id: l.owner for l in locations}
    try:
        return NetworkMap(locations=locations, entities=entities,
                          links=ExplicitLinkTable(owners, links), ip_index=PrefixIndex(prefixes))
    except (ValueError, MapError) as exc:
        raise FormatError(f"invalid map content: {exc}", len(data)) from exc


# --- client bundle ---------------------------------------------------------

@dataclass
class BundleSizes:
    cluster_table: int
    link_lists: int

    @property
    def total(self) -> int:
        return self.cluster_table + self.link_lists + len(BUNDLE_MAGIC) + 1


def _rep_index(clustering) -> dict[int, int]:
    return {rep: i for i, rep in enumerate(clustering.representatives)}


def build_client_bundle(nmap: NetworkMap, client_clustering, dst_clustering, client_loc: int,
                        guard_hosts, exit_hosts) -> tuple[bytes, BundleSizes]:
    """Encode what a client at ``client_loc`` needs; returns (bytes, section sizes)."""
    loc_index = {l.id: i for i, l in enumerate(nmap.locations)}
    ent_index = {e.id: i for i, e in enumerate(nmap.entities)}
    if len(ent_index) > 0xFFFF:
        raise ValueError("bundle format needs at most 65535 entities")
    c_idx = _rep_index(client_clustering)
    d_idx = _rep_index(dst_clustering)
    if len(c_idx) > 0xFFFF or len(d_idx) > 0xFFFF:
        raise ValueError("too many clusters for a u16 cluster index")

    table = bytearray()
    write_varint(table, len(nmap.locations))
    pack = struct.Struct("<HH").pack
    c_assign = client_clustering.assignment
    d_assign = dst_clustering.assignment
    for l in nmap.locations:
        table += pack(c_idx[c_assign[l.id]], d_idx[d_assign[l.id]])
    for reps in (client_clustering.representatives, dst_clustering.representatives):
        write_varint(table, len(reps))
        for rep in reps:
            write_varint(table, loc_index[rep])

    client_rep = c_assign[client_loc]
    lists = bytearray()
    write_varint(lists, loc_index[client_rep])
    for hosts in (guard_hosts, exit_hosts):
        write_varint(lists, len(hosts))
        for h in hosts:
            write_varint(lists, loc_index[h])
    u16 = struct.Struct("<H").pack

    def put(a, b):
        ents = nmap.links.get(a, b)
        if len(ents) > 255:
            raise ValueError(f"link ({a}, {b}) has more than 255 entities")
        lists.append(len(ents))
        for e in sorted(ent_index[x] for x in ents):
            lists.extend(u16(e))

    for g in guard_hosts:
        put(client_rep, g)
    for rep in dst_clustering.representatives:
        for x in exit_hosts:
            put(rep, x)

    blob = BUNDLE_MAGIC + bytes([VERSION]) + bytes(table) + bytes(lists)
    return blob, BundleSizes(cluster_table=len(table), link_lists=len(lists))


@dataclass
class ClientBundle:
    client_assignment: list[int]
    dst_assignment: list[int]
    client_reps: list[int]
    dst_reps: list[int]
    client_rep: int
    guard_hosts: list[int]
    exit_hosts: list[int]
    guard_links: list[list[int]]
    exit_links: list[list[list[int]]]


def parse_client_bundle(data: bytes) -> ClientBundle:
    """Decode a bundle; location and entity references stay as indices."""
    r = _Reader(data)
    if r.take(4) != BUNDLE_MAGIC:
        raise FormatError("bad magic", 0)
    version = r.u8()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n = r.varint()
    c_assign, d_assign = [], []
    for _ in range(n):
        c_assign.append(r.u16())
        d_assign.append(r.u16())
    c_reps = [r.index(n, "location") for _ in range(r.varint())]
    d_reps = [r.index(n, "location") for _ in range(r.varint())]
    client_rep = r.index(n, "location")
    guards = [r.index(n, "location") for _ in range(r.varint())]
    exits = [r.index(n, "location") for _ in range(r.varint())]

    def one():
        return [r.u16() for _ in range(r.u8())]

    guard_links = [one() for _ in guards]
    exit_links = [[one() for _ in exits] for _ in d_reps]
    if r.pos != len(r.data):
        raise FormatError("trailing bytes", r.pos)
    return ClientBundle(c_assign, d_assign, c_reps, d_reps, client_rep, guards, exits,
                        guard_links, exit_links)
