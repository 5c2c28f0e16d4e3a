"""Monte Carlo simulation of client path selection over a consensus sequence.

A run replays one behavior schedule many times.  Sample ``i`` draws its
adversary from ``make_rng(base_seed, "adversary", i)`` and its path choices
from ``make_rng(base_seed, "path", i)``, so a sample is the same no matter
which worker computes it or in what order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from taps._seeding import derive_seed, make_rng
from taps.cluster import Clustering
from taps.netmap import NetworkMap, UnmappedAddressError
from taps.pathsel import ClientState, NoExitError, PathParams, PathSelector, SelectionError
from taps.relays import ConsensusSequence
from taps.trust import CountriesAdversary, CountriesPolicy, ErrorAdversarySpec, observes_entry, observes_exit

DAY = 86400.0
WEEK = 7 * DAY
ACTIONS = ("reused", "spliced", "new")


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamRequest:
    time: float
    dst_ip: str
    dst_port: int


# --- behavior models -----------------------------------------------------------------

@dataclass(frozen=True)
class BehaviorModel:
    kind: str
    destinations: tuple[str, ...] = ()
    requests_per_week: int = 0
    ports: tuple[int, ...] = (80, 443)
    sessions_per_day: int = 5
    session_minutes: float = 20.0
    day_start: float = 9.0
    day_end: float = 18.0
    weekdays_only: bool = False
    requests: tuple[StreamRequest, ...] = ()

    def __post_init__(self):
        if self.kind not in ("typical", "irc", "custom"):
            raise SimConfigError(f"behavior kind: unknown value {self.kind!r}")
        if self.kind != "custom" and not self.destinations:
            raise SimConfigError("behavior destinations: empty destination pool")

    def schedule(self, week_start: float, seed) -> list[StreamRequest]:
        """Requests for the week starting at ``week_start`` (taken as Monday 00:00)."""
        if self.kind == "custom":
            return sorted(self.requests, key=lambda r: r.time)
        rng = make_rng(seed, "schedule", self.kind)
        days = range(5) if self.weekdays_only else range(7)
        if self.kind == "irc":
            windows = [(d * DAY + self.day_start * 3600, d * DAY + self.day_end * 3600) for d in days]
        else:
            slot = (self.day_end - self.day_start) * 3600 / self.sessions_per_day
            span = self.session_minutes * 60
            windows = []
            for d in days:
                for k in range(self.sessions_per_day):
                    lo = d * DAY + self.day_start * 3600 + k * slot
                    start = lo + rng.random() * max(0.0, slot - span)
                    windows.append((start, start + span))
        n = self.requests_per_week
        base, extra = divmod(n, len(windows))
        # destination popularity: 1/rank over the pool
        pop = 1.0 / np.arange(1, len(self.destinations) + 1)
        pop /= pop.sum()
        out = []
        for j, (lo, hi) in enumerate(windows):
            m = base + (1 if j < extra else 0)
            times = np.sort(lo + rng.random(m) * (hi - lo))
            dsts = rng.choice(len(self.destinations), size=m, p=pop)
            ports = rng.choice(len(self.ports), size=m)
            out.extend(StreamRequest(float(week_start + t), self.destinations[int(d)], int(self.ports[int(p)]))
                       for t, d, p in zip(times, dsts, ports))
        return out


def typical_model(destinations: Sequence[str], requests_per_week: int = 2632) -> BehaviorModel:
    return BehaviorModel("typical", tuple(destinations), requests_per_week)


def irc_model(destination: str, port: int = 6697, requests_per_week: int = 135) -> BehaviorModel:
    return BehaviorModel("irc", (destination,), requests_per_week, ports=(port,), day_start=8.0,
                         day_end=17.0, weekdays_only=True)


def custom_model(requests: Sequence[StreamRequest]) -> BehaviorModel:
    return BehaviorModel("custom", requests=tuple(requests))


def destination_pool(nmap: NetworkMap, n: int, seed, exclude: Sequence[int] = ()) -> list[str]:
    """``n`` addresses in distinct random locations (fewer if the map is small)."""
    rng = make_rng(seed, "destinations")
    locs = [l for l in nmap.location_ids if l not in set(exclude) and nmap.ip_index.prefixes_of(l)]
    picks = rng.permutation(len(locs))[:n]
    out = []
    for i in picks:
        net = nmap.ip_index.prefixes_of(locs[int(i)])[0]
        out.append(str(net.network_address + 1 + int(rng.integers(max(1, net.num_addresses - 2)))))
    return out


# --- configuration and samples ----------------------------------------------------------

@dataclass
class SimConfig:
    nmap: NetworkMap
    consensuses: ConsensusSequence
    policy: object
    params: PathParams
    behavior: BehaviorModel
    client_loc: int
    start: float
    client_clustering: Clustering | None = None
    dst_clustering: Clustering | None = None
    adversary: ErrorAdversarySpec | None = None
    behavior_seed: int = 0
    label: str = ""

    def validate(self) -> None:
        if not self.nmap.has_location(self.client_loc):
            raise SimConfigError(f"client_loc: location {self.client_loc} is not in the map")
        if len(self.consensuses) == 0:
            raise SimConfigError("consensuses: empty sequence")
        lo, hi = self.consensuses.span_seconds
        sched = self.schedule()
        if sched and (sched[0].time < lo or sched[-1].time >= hi):
            raise SimConfigError(
                f"consensuses: schedule [{sched[0].time}, {sched[-1].time}] is outside the span [{lo}, {hi})")
        if isinstance(self.policy, CountriesPolicy) and self.adversary is not None:
            raise SimConfigError("adversary: error types apply to the_man only")

    def schedule(self) -> list[StreamRequest]:
        return self.behavior.schedule(self.start, self.behavior_seed)


@dataclass
class SimSample:
    index: int
    seed: int
    circuits: list[tuple[str, str, str, float]]
    stream_circuit: np.ndarray  # circuit index per stream, -1 if skipped
    stream_action: np.ndarray  # index into ACTIONS, -1 if skipped
    adversary: object
    compromised: np.ndarray
    first_compromise: float | None  # seconds after the first request
    skipped: int = 0
    correlators: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)

    @property
    def n_streams(self) -> int:
        return int((self.stream_circuit >= 0).sum())

    @property
    def n_compromised(self) -> int:
        return int(self.compromised.sum())

    @property
    def fraction(self) -> float:
        n = self.n_streams
        return self.n_compromised / n if n else 0.0


class _Prepared:
    """Per-run precomputation shared by every sample."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        self.selector = PathSelector(cfg.nmap, cfg.policy, cfg.params, cfg.client_clustering, cfg.dst_clustering)
        self.requests = cfg.schedule()
        self.t0 = self.requests[0].time if self.requests else cfg.start
        seq = cfg.consensuses
        self.cons_idx = [seq.index_at(r.time) for r in self.requests]
        self.dst_loc = []
        for r in self.requests:
            try:
                self.dst_loc.append(self.selector.dst_location(r.dst_ip))
            except UnmappedAddressError:
                self.dst_loc.append(None)
        self.countries = isinstance(cfg.policy, CountriesPolicy)
        self._countries_adv = CountriesAdversary(cfg.policy) if self.countries else None

    def adversary(self, base_seed, i):
        if self.countries:
            return self._countries_adv
        return self.cfg.policy.sample_adversary(make_rng(base_seed, "adversary", i), self.cfg.adversary)


def evaluate_first_last(adversary, client_loc: int, guard, dst_loc: int, exit) -> bool:
    """First-last correlation: the adversary sees both the entry and the exit link."""
    return observes_entry(adversary, client_loc, guard) and observes_exit(adversary, dst_loc, exit)


def _run_sample(prep: _Prepared, base_seed, i: int) -> SimSample:
    cfg = prep.cfg
    seq = cfg.consensuses
    adv = prep.adversary(base_seed, i)
    rng = make_rng(base_seed, "path", i)
    state = ClientState(cfg.client_loc)
    n = len(prep.requests)
    circ_of = np.full(n, -1, dtype=np.int32)
    act_of = np.full(n, -1, dtype=np.int8)
    flags = np.zeros(n, dtype=bool)
    circuits: list = []
    index: dict[int, int] = {}
    held: list = []  # keeps circuit objects alive so their ids stay unique
    seen: dict = {}
    correlators = []
    first = None
    skipped = 0
    client = cfg.client_loc

    def obs(loc, relay):
        key = (loc, relay.fingerprint)
        v = seen.get(key)
        if v is None:
            v = seen[key] = adv.observes(loc, relay)
        return v

    for j, req in enumerate(prep.requests):
        dst = prep.dst_loc[j]
        if dst is None:
            skipped += 1
            continue
        cons = seq[prep.cons_idx[j]]
        try:
            circ, action = prep.selector.connect(state, req.dst_ip, req.dst_port, req.time, cons, rng)
        except (NoExitError, SelectionError):
            skipped += 1
            continue
        k = index.get(id(circ))
        if k is None:
            k = index[id(circ)] = len(circuits)
            held.append(circ)
            circuits.append((circ.guard, circ.middle, circ.exit, circ.created_at))
        circ_of[j] = k
        act_of[j] = ACTIONS.index(action)
        guard, exit = cons.get(circ.guard), cons.get(circ.exit)
        if prep.countries:
            who = adv.correlators(client, guard, dst, exit)
            if who:
                flags[j] = True
                correlators.append((j, tuple(who)))
        else:
            flags[j] = obs(client, guard) and obs(dst, exit)
        if flags[j] and first is None:
            first = req.time - prep.t0
    return SimSample(i, derive_seed(base_seed, "path", i), circuits, circ_of, act_of,
                     None if prep.countries else adv, flags, first, skipped, correlators)


_WORKER: _Prepared | None = None


def _init_worker(cfg):
    global _WORKER
    _WORKER = _Prepared(cfg)


def _worker_chunk(args):
    base_seed, lo, hi = args
    return [_run_sample(_WORKER, base_seed, i) for i in range(lo, hi)]


def run_monte_carlo(cfg: SimConfig, n_samples: int, base_seed: int = 0, workers: int = 1,
                    chunk: int = 25) -> list[SimSample]:
    """Run ``n_samples`` independent samples; the result never depends on ``workers``."""
    if n_samples < 0:
        raise SimConfigError("n_samples must be non-negative")
    if n_samples == 0:
        cfg.validate()
        return []
    if workers <= 1:
        prep = _Prepared(cfg)
        return [_run_sample(prep, base_seed, i) for i in range(n_samples)]
    cfg.validate()
    tasks = [(base_seed, lo, min(n_samples, lo + chunk)) for lo in range(0, n_samples, chunk)]
    out = []
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(cfg,)) as pool:
        for part in pool.map(_worker_chunk, tasks):
            out.extend(part)
    out.sort(key=lambda s: s.index)
    return out


def recompute_flags(cfg: SimConfig, sample: SimSample) -> np.ndarray:
    """Compromise flags rebuilt from the stored circuits and adversary."""
    reqs = cfg.schedule()
    seq = cfg.consensuses
    adv = sample.adversary if sample.adversary is not None else CountriesAdversary(cfg.policy)
    sel = PathSelector(cfg.nmap, cfg.policy, cfg.params, cfg.client_clustering, cfg.dst_clustering)
    out = np.zeros(len(reqs), dtype=bool)
    for j, req in enumerate(reqs):
        k = sample.stream_circuit[j]
        if k < 0:
            continue
        g, _, e, _ = sample.circuits[k]
        cons = seq.active_at(req.time)
        dst = sel.dst_location(req.dst_ip)
        if isinstance(adv, CountriesAdversary):
            out[j] = adv.correlates(cfg.client_loc, cons.get(g), dst, cons.get(e))
        else:
            out[j] = evaluate_first_last(adv, cfg.client_loc, cons.get(g), dst, cons.get(e))
    return out


# --- metrics ------------------------------------------------------------------------------

class CountryDataError(ValueError):
    pass


def is_unnecessary(country: str, client_country: str, dst_country: str) -> bool:
    """A country's correlation is unnecessary unless it holds both endpoints."""
    return not (country == client_country and country == dst_country)


def _dst_countries(cfg: SimConfig) -> tuple[str, list[str | None]]:
    nmap = cfg.nmap
    sel = PathSelector(nmap, cfg.policy, PathParams(mode="vanilla"))
    cc = nmap.country_of_location(cfg.client_loc)
    if cc is None:
        raise CountryDataError(f"client location {cfg.client_loc} has no country")
    out = []
    for r in cfg.schedule():
        try:
            loc = sel.dst_location(r.dst_ip)
        except UnmappedAddressError:
            out.append(None)
            continue
        c = nmap.country_of_location(loc)
        if c is None:
            raise CountryDataError(f"destination location {loc} has no country")
        out.append(c)
    return cc, out


def countries_unnecessary_fraction(samples: Sequence[SimSample], cfg: SimConfig) -> list[float | None]:
    """Per sample: share of cross-border streams that some country correlated.

    Only streams whose endpoints lie in different countries enter the
    denominator; ``None`` when there are none.
    """
    cc, dcountry = _dst_countries(cfg)
    out = []
    for s in samples:
        who = dict(s.correlators)
        denom = num = 0
        for j, dc in enumerate(dcountry):
            if dc is None or s.stream_circuit[j] < 0 or dc == cc:
                continue
            denom += 1
            if any(is_unnecessary(c, cc, dc) for c in who.get(j, ())):
                num += 1
        out.append(num / denom if denom else None)
    return out


def unnecessary_counts(samples: Sequence[SimSample], cfg: SimConfig) -> dict[str, int]:
    """Per country: correlated streams whose endpoints it does not both contain."""
    cc, dcountry = _dst_countries(cfg)
    counts: dict[str, int] = {}
    for s in samples:
        for j, who in s.correlators:
            for c in who:
                if dcountry[j] is not None and is_unnecessary(c, cc, dcountry[j]):
                    counts[c] = counts.get(c, 0) + 1
    return dict(sorted(counts.items()))


def country_counts(samples: Sequence[SimSample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        for _, who in s.correlators:
            for c in who:
                counts[c] = counts.get(c, 0) + 1
    return dict(sorted(counts.items()))


def ecdf(values) -> list[list[float]]:
    """Breakpoints [x, F(x)] of the empirical CDF; infinite values never enter."""
    vals = np.asarray(values, dtype=float)
    n = len(vals)
    finite = np.sort(vals[np.isfinite(vals)])
    if not n or not len(finite):
        return []
    xs, counts = np.unique(finite, return_counts=True)
    return [[float(x), float(c) / n] for x, c in zip(xs, np.cumsum(counts))]


def bootstrap_ci(values, seed=0, level: float = 0.95, n_resamples: int = 2000) -> tuple[float, float]:
    vals = np.asarray(values, dtype=float)
    if len(vals) < 2 or np.all(vals == vals[0]):
        m = float(vals.mean()) if len(vals) else math.nan
        return m, m
    res = stats.bootstrap((vals,), np.mean, confidence_level=level, n_resamples=n_resamples,
                          method="percentile", rng=make_rng(seed, "bootstrap"))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def compute_report(samples: Sequence[SimSample], seed=0, cfg: SimConfig | None = None) -> dict:
    if not samples:
        raise ValueError("no samples to report on")
    ttfc = np.array([math.inf if s.first_compromise is None else s.first_compromise / DAY for s in samples])
    frac = np.array([s.fraction for s in samples])
    hit = np.isfinite(ttfc).astype(float)
    report = {
        "n_samples": len(samples),
        "compromise_probability": float(hit.mean()),
        "compromise_probability_ci": list(bootstrap_ci(hit, (seed, "p"))),
        "mean_fraction": float(frac.mean()),
        "mean_fraction_ci": list(bootstrap_ci(frac, (seed, "f"))),
        "median_fraction": float(np.median(frac)),
        "ttfc_days_cdf": ecdf(ttfc),
        "never_compromised": int((~np.isfinite(ttfc)).sum()),
        "fraction_cdf": ecdf(frac),
        "skipped_streams": int(sum(s.skipped for s in samples)),
    }
    if cfg is not None and isinstance(cfg.policy, CountriesPolicy):
        unn = countries_unnecessary_fraction(samples, cfg)
        report["unnecessary_fraction_cdf"] = ecdf([u for u in unn if u is not None])
        report["unnecessary_undefined"] = sum(u is None for u in unn)
        report["country_counts"] = country_counts(samples)
        report["unnecessary_counts"] = unnecessary_counts(samples, cfg)
    return report
