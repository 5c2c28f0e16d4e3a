"""Client and destination location clustering.

Destinations use a k-medoids variant with maximin seeding and size-balanced
greedy assignment; clients take the most popular locations as fixed
representatives and get a single balanced assignment round.  All ties go to
the smaller location id (or the earlier representative).
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from taps._seeding import make_rng
from taps.netmap import NetworkMap, UnknownLocationError

CLIENT = "client"
DESTINATION = "destination"


class InvalidClusterParams(ValueError):
    pass


@dataclass(frozen=True)
class ClusterParams:
    num_clusters: int
    hosts: tuple[int, ...]
    host_weights: tuple[float, ...]
    max_rounds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hosts", tuple(int(h) for h in self.hosts))
        object.__setattr__(self, "host_weights", tuple(float(w) for w in self.host_weights))
        if self.num_clusters < 1:
            raise InvalidClusterParams("num_clusters must be at least 1")
        if self.max_rounds < 1:
            raise InvalidClusterParams("max_rounds must be at least 1")
        if len(self.hosts) != len(self.host_weights):
            raise InvalidClusterParams("hosts and host_weights differ in length")
        if not self.hosts:
            raise InvalidClusterParams("at least one relay host is needed")

    @classmethod
    def from_hosts(cls, num_clusters: int, hosts: Mapping[int, float], max_rounds: int = 10):
        items = sorted(hosts.items())
        return cls(num_clusters, tuple(h for h, _ in items), tuple(w for _, w in items), max_rounds)


@dataclass
class Clustering:
    representatives: list[int]
    assignment: dict[int, int]
    kind: str
    rounds: int = 0
    log: list[tuple[int, int]] = field(default_factory=list, repr=False)
    provenance: dict = field(default_factory=dict)
    # representatives in force while ``log`` was produced (differ from the
    # final ones only when max_rounds cut the medoid iteration short)
    log_reps: list[int] | None = field(default=None, repr=False)

    def members(self) -> dict[int, list[int]]:
        out = {r: [] for r in self.representatives}
        for loc, rep in sorted(self.assignment.items()):
            out[rep].append(loc)
        return out

    def sizes(self, nmap: NetworkMap) -> dict[int, int]:
        out = {r: 0 for r in self.representatives}
        for loc, rep in self.assignment.items():
            out[rep] += nmap.location(loc).size
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "representatives": self.representatives,
            "assignment": [[loc, rep] for loc, rep in sorted(self.assignment.items())],
            "rounds": self.rounds,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Clustering":
        return cls(
            representatives=[int(r) for r in d["representatives"]],
            assignment={int(a): int(b) for a, b in d["assignment"]},
            kind=d["kind"], rounds=int(d.get("rounds", 0)), provenance=dict(d.get("provenance", {})),
        )

    def __eq__(self, other):
        if not isinstance(other, Clustering):
            return NotImplemented
        return (self.representatives == other.representatives and self.assignment == other.assignment
                and self.kind == other.kind)


def representative_of(clustering: Clustering, loc: int) -> int:
    try:
        return clustering.assignment[loc]
    except KeyError:
        raise UnknownLocationError(f"location {loc} is not in the clustering") from None


def _distances(policy, rows, cols, params) -> np.ndarray:
    return policy.distance_block(list(rows), list(cols), list(params.hosts), list(params.host_weights))


def balanced_assign(loc_ids: Sequence[int], sizes: Mapping[int, int], reps: Sequence[int],
                    dist: np.ndarray) -> tuple[dict[int, int], list[tuple[int, int]]]:
    """Greedy size-balanced assignment.

    ``dist[k, j]`` is the distance from representative k to ``loc_ids[j]``.
    Representatives start in their own clusters.  Then, repeatedly, among
    the clusters of minimum total size, the (location, cluster) pair with the
    smallest distance is taken (ties: earlier representative, then smaller
    location id).  Returns the assignment and the log of (location, rep)
    decisions in order.
    """
    col = {loc: j for j, loc in enumerate(loc_ids)}
    assignment = {rep: rep for rep in reps}
    totals = [sizes[rep] for rep in reps]
    unassigned = np.ones(len(loc_ids), dtype=bool)
    for rep in reps:
        unassigned[col[rep]] = False
    # per-cluster candidate order: by distance, then location id
    ids = np.asarray(loc_ids)
    orders = [np.lexsort((ids, dist[k])) for k in range(len(reps))]
    ptr = [0] * len(reps)
    log = []
    remaining = int(unassigned.sum())

    def head(k):
        order = orders[k]
        p = ptr[k]
        while not unassigned[order[p]]:
            p += 1
        ptr[k] = p
        return order[p]

    heap = [(totals[k], k) for k in range(len(reps))]
    heapq.heapify(heap)
    while remaining:
        smallest = heap[0][0]
        tied = []
        while heap and heap[0][0] == smallest:
            tied.append(heapq.heappop(heap)[1])
        best = None
        for k in sorted(tied):
            j = head(k)
            key = (dist[k, j], k, loc_ids[j])
            if best is None or key < best[0]:
                best = (key, k, j)
        _, k, j = best
        loc = loc_ids[j]
        unassigned[j] = False
        remaining -= 1
        assignment[loc] = reps[k]
        log.append((loc, reps[k]))
        totals[k] += sizes[loc]
        for t in tied:
            heapq.heappush(heap, (totals[t], t))
    return assignment, log


def _medoid(members: list[int], block: np.ndarray) -> int:
    """Member with the smallest mean distance to the other members."""
    if len(members) == 1:
        return members[0]
    sums = block.sum(axis=1)
    best = min(range(len(members)), key=lambda i: (sums[i], members[i]))
    return members[best]


def maximin_seeds(policy, loc_ids: Sequence[int], first: int, k: int, params: ClusterParams) -> list[int]:
    reps = [first]
    mind = _distances(policy, [first], loc_ids, params)[0]
    chosen = np.zeros(len(loc_ids), dtype=bool)
    chosen[list(loc_ids).index(first)] = True
    while len(reps) < k:
        cand = np.where(chosen, -np.inf, mind)
        j = int(np.argmax(cand))  # first maximal index = smallest id (loc_ids sorted)
        reps.append(loc_ids[j])
        chosen[j] = True
        mind = np.minimum(mind, _distances(policy, [loc_ids[j]], loc_ids, params)[0])
    return reps


def cluster_destinations(nmap: NetworkMap, policy, params: ClusterParams, seed: int = 0) -> Clustering:
    loc_ids = sorted(nmap.location_ids)
    n = len(loc_ids)
    k = params.num_clusters
    if k > n:
        raise InvalidClusterParams(f"num_clusters {k} exceeds location count {n}")
    sizes = {l.id: l.size for l in nmap.locations}
    rng = make_rng(seed, "cluster-destinations")
    first = loc_ids[int(rng.integers(n))]
    reps = maximin_seeds(policy, loc_ids, first, k, params)
    seeds = list(reps)

    rounds = 0
    while True:
        dist = _distances(policy, reps, loc_ids, params)
        assignment, log = balanced_assign(loc_ids, sizes, reps, dist)
        rounds += 1
        groups = {r: [] for r in reps}
        for loc in loc_ids:
            groups[assignment[loc]].append(loc)
        new_reps = []
        for r in reps:
            members = groups[r]
            block = _distances(policy, members, members, params)
            new_reps.append(_medoid(members, block))
        if new_reps == reps or rounds >= params.max_rounds:
            log_reps = list(reps)
            if new_reps != reps:
                # out of rounds: keep the last assignment, relabelled onto the medoids
                relabel = dict(zip(reps, new_reps))
                assignment = {loc: relabel[r] for loc, r in assignment.items()}
                reps = new_reps
            break
        reps = new_reps
    return Clustering(reps, assignment, DESTINATION, rounds=rounds, log=log, log_reps=log_reps,
                      provenance={"seeds": seeds})


def cluster_clients(nmap: NetworkMap, policy, params: ClusterParams) -> Clustering:
    ranked = nmap.ranked_clients()
    k = params.num_clusters
    if len(ranked) < k:
        raise InvalidClusterParams(f"need {k} ranked client locations, map has {len(ranked)}")
    reps = [l.id for l in ranked[:k]]
    loc_ids = sorted(nmap.location_ids)
    sizes = {l.id: l.size for l in nmap.locations}
    dist = _distances(policy, reps, loc_ids, params)
    assignment, log = balanced_assign(loc_ids, sizes, reps, dist)
    return Clustering(reps, assignment, CLIENT, rounds=1, log=log, log_reps=list(reps))


# --- invariant checks ----------------------------------------------------------------

def check_partition(nmap: NetworkMap, c: Clustering) -> list[str]:
    problems = []
    ids = set(nmap.location_ids)
    if set(c.assignment) != ids:
        problems.append("assignment does not cover exactly the map's locations")
    if len(set(c.representatives)) != len(c.representatives):
        problems.append("duplicate representative")
    for rep in c.representatives:
        if c.assignment.get(rep) != rep:
            problems.append(f"representative {rep} not assigned to itself")
    if set(c.assignment.values()) - set(c.representatives):
        problems.append("assignment targets a non-representative")
    sizes = c.sizes(nmap) if not problems else {}
    if sizes and sum(sizes.values()) != sum(l.size for l in nmap.locations):
        problems.append("cluster sizes do not sum to the total")
    return problems


def check_greedy_balance(nmap: NetworkMap, c: Clustering) -> list[str]:
    """Replay the assignment log; each step must target a minimum-size cluster."""
    reps = c.log_reps if c.log_reps is not None else c.representatives
    totals = {r: nmap.location(r).size for r in reps}
    problems = []
    for step, (loc, rep) in enumerate(c.log):
        lo = min(totals.values())
        if totals[rep] != lo:
            problems.append(f"step {step}: location {loc} went to cluster of size {totals[rep]} > {lo}")
        totals[rep] += nmap.location(loc).size
    return problems


def check_maximin(policy, nmap: NetworkMap, reps: Sequence[int], params: ClusterParams) -> list[str]:
    """Brute-force check of maximin seeding (pure location_distance calls)."""
    loc_ids = sorted(nmap.location_ids)
    problems = []
    for i in range(1, len(reps)):
        prior = reps[:i]

        def mind(x):
            return min(policy.location_distance(x, p, list(params.hosts), list(params.host_weights))
                       for p in prior)

        best = max(mind(x) for x in loc_ids if x not in prior)
        got = mind(reps[i])
        if got < best - 1e-9 * max(1.0, abs(best)):
            problems.append(f"seed {i} ({reps[i]}) has min-distance {got} < best {best}")
    return problems


def clustering_hash(c: Clustering) -> str:
    blob = json.dumps({"r": c.representatives, "a": sorted(c.assignment.items())}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_clustering(path, c: Clustering) -> None:
    with open(path, "w") as fh:
        json.dump(c.to_json(), fh, sort_keys=True)


def load_clustering(path) -> Clustering:
    with open(path) as fh:
        return Clustering.from_json(json.load(fh))
