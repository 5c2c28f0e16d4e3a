"""Small hand-built worlds shared by the tests."""

import functools
import itertools

from taps.netmap import AS_ORG, Entity, ExplicitLinkTable, Location, NetworkMap, PrefixIndex
from taps.relays import ACTIVE_FLAGS, EXIT, GUARD, Consensus, Relay, parse_policy


def hand_map(owners, links=None, countries=None, sizes=None, ranked=None, extra_entities=()):
    """Map whose unlisted links hold just the two endpoint owners.

    Location ``l`` gets prefix 10.l.0.0/16 (so ids must stay below 256).
    """
    links = dict(links or {})
    countries = countries or {}
    sizes = sizes or {}
    ranked = list(ranked or [])
    ent_ids = set(owners.values()) | set(extra_entities)
    for ents in links.values():
        ent_ids |= set(ents)
    entities = [Entity(e, AS_ORG, countries.get(e)) for e in sorted(ent_ids)]
    locs = [Location(l, sizes.get(l, 1), owners[l], ranked.index(l) + 1 if l in ranked else None)
            for l in sorted(owners)]
    full = {}
    for a, b in itertools.combinations(sorted(owners), 2):
        full[(a, b)] = links.get((a, b), links.get((b, a), ()))
    prefixes = [(f"10.{l}.0.0/16", l) for l in sorted(owners)]
    return NetworkMap(locations=locs, entities=entities, links=ExplicitLinkTable(owners, full),
                      ip_index=PrefixIndex(prefixes))


def ip_of(loc, host=1):
    return f"10.{loc}.0.{host}"


def relay(fp, loc, weight=100.0, guard=False, exit=False, family=None, policy=None, address=None):
    flags = set(ACTIVE_FLAGS)
    if guard:
        flags.add(GUARD)
    if exit:
        flags.add(EXIT)
    rules = parse_policy(policy) if policy else ()
    return Relay(fp, loc, frozenset(flags), weight, family or fp, rules, address)


def consensus(relays, hour=0):
    return Consensus(hour, list(relays))


def identity_clustering(nmap, kind="destination"):
    from taps.cluster import Clustering
    ids = sorted(nmap.location_ids)
    return Clustering(ids, {i: i for i in ids}, kind)


# --- literal reference filters, written loop by loop -----------------------------

def _ordered(relays, scores, weights):
    return sorted(relays, key=lambda r: (-scores[r], -weights[r], r))


def oracle_trustall(su, sc, au, ac, aw, scores, relays, weights):
    order = _ordered(relays, scores, weights)
    n = len(order)
    s_star = scores[order[0]]
    out, w, i = [], 0.0, 0
    while i < n and scores[order[i]] >= s_star * su and 1 - scores[order[i]] <= (1 - s_star) * sc:
        out.append(order[i])
        w += weights[order[i]]
        i += 1
    while (i < n and scores[order[i]] >= s_star * au and 1 - scores[order[i]] <= (1 - s_star) * ac
           and w < aw):
        out.append(order[i])
        w += weights[order[i]]
        i += 1
    return out


def oracle_trustone(aw, scores, relays, weights):
    order = _ordered(relays, scores, weights)
    out, w, i = [], 0.0, 0
    while i < len(order) and w < aw:
        out.append(order[i])
        w += weights[order[i]]
        i += 1
    return out


@functools.lru_cache(maxsize=None)
def simplex_grid(n, k):
    """All points of the simplex in n dimensions with coordinates in multiples of 1/k."""
    import numpy as np
    if n == 1:
        return np.ones((1, 1))
    pts = np.array([c for c in itertools.product(range(k + 1), repeat=n - 1) if sum(c) <= k], dtype=float)
    return np.hstack([pts, (k - pts.sum(axis=1))[:, None]]) / k


def grid_minimax(exposures, k=120):
    """Smallest max per-entity exposure over the grid (k = 120 hits every 1/2 .. 1/6 exactly)."""
    import numpy as np
    ents = sorted(set().union(*exposures))
    m = np.array([[1.0 if e in exp else 0.0 for exp in exposures] for e in ents])
    x = simplex_grid(len(exposures), k)
    return float((x @ m.T).max(axis=1).min())
