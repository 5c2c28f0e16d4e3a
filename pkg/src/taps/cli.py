"""Command-line entry point: ``taps <command> ...``.

Every run is driven by one JSON config (see README) that flags can override.
Outputs are written atomically and carry the hash of the canonical config,
so two runs with the same config and seed produce identical files.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from taps import attacks, cluster, mapformat, netmap, pathsel, relays, simulate, trust

log = logging.getLogger("taps")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CSV_VERSION = 1
OUTPUT_ENV = "TAPS_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# --- helpers ----------------------------------------------------------------------------

def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_csv(path, kind: str, chash: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# taps-{kind} v{CSV_VERSION} config={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    base = Path(path).parent
    cfg = dict(cfg)
    cfg["_base"] = str(base)
    return cfg


def _resolve(cfg: dict, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def output_dir(cfg: dict, flag: str | None) -> Path:
    d = flag or cfg.get("output_dir") or os.environ.get(OUTPUT_ENV) or "."
    return _resolve(cfg, d) if not flag else Path(d)


# --- world construction ---------------------------------------------------------------------

def read_map(path) -> netmap.NetworkMap:
    path = Path(path)
    if path.suffix == ".json":
        return netmap.load_map_json(path)
    return mapformat.deserialize_map(path.read_bytes())


def build_map(cfg: dict) -> netmap.NetworkMap:
    spec = cfg.get("map")
    if not isinstance(spec, dict):
        raise ConfigError("map: expected {'file': ...} or {'synthetic': {...}, 'seed': n}")
    if "file" in spec:
        return read_map(_resolve(cfg, spec["file"]))
    if "synthetic" in spec:
        return netmap.generate_synthetic_map(netmap.SyntheticMapSpec.from_dict(spec["synthetic"]),
                                             int(spec.get("seed", 0)))
    raise ConfigError("map: needs 'file' or 'synthetic'")


def build_consensuses(cfg: dict, nmap) -> relays.ConsensusSequence:
    spec = cfg.get("consensus")
    if not isinstance(spec, dict):
        raise ConfigError("consensus: expected {'file': ...} or {'synthetic': {...}, 'seed': n}")
    if "file" in spec:
        return relays.read_consensuses(_resolve(cfg, spec["file"]))
    if "synthetic" in spec:
        s = relays.SyntheticConsensusSpec.from_dict(spec["synthetic"])
        return relays.ConsensusSequence(relays.generate_consensuses(nmap, s, int(spec.get("seed", 0))))
    raise ConfigError("consensus: needs 'file' or 'synthetic'")


class World:
    """Everything a simulate/attack/cluster run needs, built once from the config."""

    def __init__(self, cfg: dict, need_clusters: bool = True):
        self.cfg = cfg
        self.map = build_map(cfg)
        self.consensuses = build_consensuses(cfg, self.map)
        if "start_hour" in cfg:
            self.start_hour = int(cfg["start_hour"])
        else:
            warm = cfg.get("consensus", {}).get("synthetic", {}).get("warmup_hours", 0)
            self.start_hour = self.consensuses[0].timestamp + int(warm)
        self.tracker = relays.track(self.consensuses, until_hour=self.start_hour)
        self.policy = trust.policy_from_config(cfg.get("policy", {"kind": "the_man"}), self.map, self.tracker)
        self.client_loc = cfg.get("client_loc")
        if self.client_loc is None:
            ranked = self.map.ranked_clients()
            if not ranked:
                raise ConfigError("client_loc: not given and the map has no ranked clients")
            self.client_loc = ranked[0].id
        self.client_loc = int(self.client_loc)
        self.client_clustering = self.dst_clustering = None
        if need_clusters:
            self.client_clustering, self.dst_clustering = self.clusterings()

    def cluster_params(self, which: str):
        spec = self.cfg.get("clustering", {})
        hosts = relays.relay_hosts(self.consensuses, "guard" if which == "client" else "exit")
        n = spec.get(f"{which}_clusters", spec.get("num_clusters", 20))
        return cluster.ClusterParams.from_hosts(int(n), hosts, int(spec.get("max_rounds", 10)))

    def compute_clusterings(self):
        seed = int(self.cfg.get("clustering", {}).get("seed", 0))
        c = cluster.cluster_clients(self.map, self.policy, self.cluster_params("client"))
        d = cluster.cluster_destinations(self.map, self.policy, self.cluster_params("destination"), seed)
        return c, d

    def clusterings(self):
        spec = self.cfg.get("clustering", {})
        if "client_file" in spec and "destination_file" in spec:
            return (cluster.load_clustering(_resolve(self.cfg, spec["client_file"])),
                    cluster.load_clustering(_resolve(self.cfg, spec["destination_file"])))
        return self.compute_clusterings()


def behavior_from_config(cfg: dict, world: World) -> simulate.BehaviorModel:
    b = cfg.get("behavior", {"kind": "typical"})
    kind = b.get("kind", "typical")
    seed = b.get("seed", 0)
    if kind == "typical":
        pool = simulate.destination_pool(world.map, int(b.get("n_destinations", 205)), seed,
                                         exclude=[world.client_loc])
        return simulate.typical_model(pool, int(b.get("requests_per_week", 2632)))
    if kind == "irc":
        pool = simulate.destination_pool(world.map, 1, seed, exclude=[world.client_loc])
        return simulate.irc_model(pool[0], int(b.get("port", 6697)), int(b.get("requests_per_week", 135)))
    if kind == "custom":
        reqs = [simulate.StreamRequest(float(t), str(ip), int(port)) for t, ip, port in b["requests"]]
        return simulate.custom_model(reqs)
    raise ConfigError(f"behavior kind: unknown value {kind!r}")


def sim_config(cfg: dict, world: World, profile: str | None = None) -> simulate.SimConfig:
    prof = profile or cfg.get("profile", "trustall-paper")
    params = pathsel.PathParams.from_json(prof) if isinstance(prof, dict) else pathsel.load_profile(str(prof))
    adv = cfg.get("adversary")
    return simulate.SimConfig(
        world.map, world.consensuses, world.policy, params, behavior_from_config(cfg, world),
        world.client_loc, float(world.start_hour * 3600), world.client_clustering, world.dst_clustering,
        trust.ErrorAdversarySpec(**adv) if adv else None,
        behavior_seed=int(cfg.get("behavior", {}).get("seed", 0)), label=str(prof),
    )


# --- commands ----------------------------------------------------------------------------------

def cmd_gen_map(args) -> int:
    if args.spec:
        with open(args.spec) as fh:
            d = json.load(fh)
    else:
        d = {"n_locations": args.n_locations, "n_entities": args.n_entities}
    spec = netmap.SyntheticMapSpec.from_dict(d)
    spec.validate()
    nmap = netmap.generate_synthetic_map(spec, args.seed)
    if str(args.out).endswith(".json"):
        atomic_write(args.out, canonical(netmap.map_to_json(nmap)))
    else:
        atomic_write(args.out, mapformat.serialize_map(nmap))
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_gen_consensus(args) -> int:
    nmap = read_map(args.map)
    with open(args.spec) as fh:
        spec = relays.SyntheticConsensusSpec.from_dict(json.load(fh))
    cons = relays.generate_consensuses(nmap, spec, args.seed)
    buf = "".join(canonical(c.to_json()) + "\n" for c in cons)
    atomic_write(args.out, buf)
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = load_config(args.config)
    world = World(cfg, need_clusters=False)
    c, d = world.compute_clusterings()
    chash = config_hash(public(cfg))
    out = output_dir(cfg, args.out_dir)
    for cl, name in ((c, "client_clusters.json"), (d, "destination_clusters.json")):
        cl.provenance.update(config=chash, clustering=cluster.clustering_hash(cl))
        atomic_write(out / name, dump_json(cl.to_json()))
    return EXIT_OK


SAMPLE_HEADER = ["index", "seed", "ttfc_seconds", "n_streams", "n_compromised", "fraction", "policy", "mode"]


def _sample_rows(samples, policy_kind: str, mode: str):
    for s in samples:
        ttfc = "inf" if s.first_compromise is None else repr(float(s.first_compromise))
        yield [s.index, s.seed, ttfc, s.n_streams, s.n_compromised, repr(float(s.fraction)), policy_kind, mode]


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.profile:
        cfg["profile"] = args.profile
    if args.n_samples is not None:
        cfg["n_samples"] = args.n_samples
    if args.base_seed is not None:
        cfg["base_seed"] = args.base_seed
    n = int(cfg.get("n_samples", 100))
    seed = int(cfg.get("base_seed", 0))
    world = World(cfg)
    sc = sim_config(cfg, world)
    sc.validate()  # config problems surface before any sample runs
    chash = config_hash(public(cfg))
    samples = simulate.run_monte_carlo(sc, n, seed, workers=args.workers)
    out = output_dir(cfg, args.out_dir)
    kind = cfg.get("policy", {}).get("kind", "the_man")
    write_csv(out / "samples.csv", "samples", chash, SAMPLE_HEADER, _sample_rows(samples, kind, sc.params.mode))
    report = simulate.compute_report(samples, seed, sc) if samples else {"n_samples": 0}
    report.update(config_hash=chash, mode=sc.params.mode, policy=kind, profile=sc.label)
    atomic_write(out / "report.json", dump_json(_finite(report)))
    return EXIT_OK


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


_ATTACK: dict = {}


def _attack_init(cfg):
    world = World(cfg, need_clusters=False)
    cons = world.consensuses.active_at(world.start_hour * 3600)
    _ATTACK.update(world=world, cons=cons, model=attacks.BaselineModel(world.map, cons))


def _attack_job(job):
    n_dst, trial, base_seed, cands, n_guards = job
    w = _ATTACK["world"]
    t = attacks.run_attack_trial(w.map, _ATTACK["cons"], w.client_loc, cands, n_dst, base_seed, trial,
                                 n_guards, model=_ATTACK["model"])
    return [t.seed, t.n_destinations, t.guards_observed, repr(t.posterior_entropy_bits)]


def _visit_job(job):
    vid, base_seed, n_streams, n_guards = job
    w = _ATTACK["world"]
    seed = attacks.derive_seed(base_seed, "visit", vid)
    sel = attacks.BaselineSelector.create(w.map, _ATTACK["cons"], w.client_loc, attacks.make_rng(seed, "guards"),
                                          n_guards, model=_ATTACK["model"])
    visit = attacks.attack_destinations(w.map, n_streams, seed, [w.client_loc])
    return [vid, attacks.cross_circuit_vulnerability(visit, sel, seed)]


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    a = dict(cfg.get("attack", {}))
    if args.base_seed is not None:
        cfg["base_seed"] = args.base_seed
    seed = int(cfg.get("base_seed", 0))
    chash = config_hash(public(cfg))
    _attack_init(cfg)
    world = _ATTACK["world"]
    cands = a.get("candidates")
    if cands is None:
        k = int(a.get("n_candidates", 5))
        cands = [l.id for l in world.map.ranked_clients()[:k]]
    if world.client_loc not in cands:
        raise ConfigError(f"attack candidates: client location {world.client_loc} must be a candidate")
    n_guards = int(a.get("n_guards", 3))
    jobs = [(int(n), t, seed, list(cands), n_guards)
            for n in a.get("n_destinations", [0, 1, 2, 4, 8]) for t in range(int(a.get("n_trials", 50)))]
    visits = [(v, seed, int(a.get("streams_per_visit", 5)), n_guards) for v in range(int(a.get("n_visits", 50)))]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers, initializer=_attack_init, initargs=(cfg,)) as pool:
            rows = list(pool.map(_attack_job, jobs, chunksize=16))
            vrows = list(pool.map(_visit_job, visits, chunksize=16))
    else:
        rows = [_attack_job(j) for j in jobs]
        vrows = [_visit_job(v) for v in visits]
    out = output_dir(cfg, args.out_dir)
    write_csv(out / "attack.csv", "attack", chash,
              ["trial_seed", "n_destinations", "guards_observed", "posterior_entropy_bits"], rows)
    write_csv(out / "vulnerability.csv", "vulnerability", chash, ["visit_id", "classification"], vrows)
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_config(args.config)
    world = World(cfg)
    problems = {}
    for name, cl in (("client", world.client_clustering), ("destination", world.dst_clustering)):
        found = cluster.check_partition(world.map, cl)
        if cl.log:
            found += cluster.check_greedy_balance(world.map, cl)
        problems[name] = found
    if args.maximin:
        params = world.cluster_params("destination")
        seeds = world.dst_clustering.provenance.get("seeds") or []
        if seeds:
            problems["maximin"] = cluster.check_maximin(world.policy, world.map, seeds, params)
    ok = not any(problems.values())
    sys.stdout.write(dump_json({"ok": ok, "problems": problems}))
    return EXIT_OK if ok else EXIT_RUNTIME


def compare_reports(a: dict, b: dict) -> dict:
    """Does run ``a`` have a strictly lower compromise probability than ``b`` with disjoint CIs?"""
    lo_a, hi_a = a["compromise_probability_ci"]
    lo_b, hi_b = b["compromise_probability_ci"]
    return {
        "a": a.get("profile"), "b": b.get("profile"),
        "a_probability": a["compromise_probability"], "b_probability": b["compromise_probability"],
        "a_dominates": bool(a["compromise_probability"] < b["compromise_probability"] and hi_a < lo_b),
        "b_dominates": bool(b["compromise_probability"] < a["compromise_probability"] and hi_b < lo_a),
    }


def cmd_compare(args) -> int:
    with open(args.a) as fh:
        a = json.load(fh)
    with open(args.b) as fh:
        b = json.load(fh)
    verdict = compare_reports(a, b)
    text = dump_json(verdict)
    if args.out:
        atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taps", description="Trust-aware path selection experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-map", help="generate a synthetic network map")
    g.add_argument("--spec", help="JSON synthetic-map spec")
    g.add_argument("--n-locations", type=int, default=500)
    g.add_argument("--n-entities", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_map)

    g = sub.add_parser("gen-consensus", help="generate hourly synthetic consensuses")
    g.add_argument("--map", required=True)
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_consensus)

    for name, func, help_ in (("cluster", cmd_cluster, "cluster client and destination locations"),
                              ("simulate", cmd_simulate, "run the Monte Carlo simulation"),
                              ("attack", cmd_attack, "run the chosen-destination and cross-circuit analyses"),
                              ("check", cmd_check, "run clustering invariant checks")):
        g = sub.add_parser(name, help=help_)
        g.add_argument("--config", required=True)
        g.add_argument("--out-dir")
        g.add_argument("--workers", type=int, default=1)
        g.set_defaults(func=func)
        if name in ("simulate", "attack"):
            g.add_argument("--base-seed", type=int)
        if name == "simulate":
            g.add_argument("--profile")
            g.add_argument("--n-samples", type=int)
        if name == "check":
            g.add_argument("--maximin", action="store_true")

    g = sub.add_parser("compare", help="dominance verdict between two simulation reports")
    g.add_argument("a")
    g.add_argument("b")
    g.add_argument("--out")
    g.set_defaults(func=cmd_compare)
    return p


CONFIG_ERRORS = (ConfigError, simulate.SimConfigError, netmap.InvalidMapSpecError,
                 cluster.InvalidClusterParams, KeyError, TypeError, json.JSONDecodeError, FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"taps: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"taps: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report, never traceback, at the CLI boundary
        print(f"taps: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
