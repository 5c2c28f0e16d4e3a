import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taps.netmap import SyntheticMapSpec, generate_synthetic_map
from taps.relays import SyntheticConsensusSpec, generate_consensuses, relay_hosts, track
from taps.trust import (TYPE5_LINK_PROB, AdversaryInstance, CountriesPolicy, ErrorAdversarySpec, TheManPolicy,
                        longevity_family_prob, observes_entry, observes_exit, policy_from_config, sample_adversary)

from helpers import hand_map, relay


def man(m, **kw):
    return TheManPolicy(m, **kw)


# client 1, destination 2, relay host 3; entity ids: owners 11/12/13, extras 50+
@pytest.fixture
def tri():
    return hand_map({1: 11, 2: 12, 3: 13}, links={(1, 3): [50], (2, 3): [51]})


def zero_owners(extra=None):
    probs = {11: 0.0, 12: 0.0, 13: 0.0}
    probs.update(extra or {})
    return probs


def test_distance_identical_locations_is_zero(tri):
    assert man(tri).location_distance(1, 1, [3], [1.0]) == 0
    assert CountriesPolicy(tri).location_distance(1, 1, [3], [1.0]) == 0


def test_distance_one_sided_entity(tri):
    # E1 empty, E2 = {50} at 0.1, E3 empty
    p = man(tri, entity_overrides=zero_owners({51: 0.0}))
    assert p.location_distance(1, 2, [3], [1.0]) == pytest.approx(0.1, abs=1e-15)


def test_distance_country_symmetric_difference():
    m = hand_map({1: 11, 2: 12, 3: 13}, links={(1, 3): [61], (2, 3): [62]},
                 countries={11: "c1", 12: "c3", 13: "c2", 61: "c2", 62: "c2"})
    # link(1,3) -> {c1, c2}; link(2,3) -> {c3, c2}
    assert CountriesPolicy(m).location_distance(1, 2, [3], [1.0]) == 2


def test_distance_length_mismatch(tri):
    with pytest.raises(ValueError):
        man(tri).location_distance(1, 2, [3], [1.0, 2.0])


def test_guard_security_products(tri):
    g = relay("g", 3, guard=True)
    none = man(tri, entity_overrides={11: 0, 12: 0, 13: 0, 50: 0, 51: 0}, p_min=0.0, p_max=0.0)
    assert none.guard_security(1, [g]) == 1.0
    two = man(tri, entity_overrides={11: 0.1, 13: 0.1, 50: 0.0}, p_min=0.0, p_max=0.0)
    assert two.guard_security(1, [g]) == pytest.approx(0.81, abs=1e-15)


def test_guard_security_countries_fraction():
    m = hand_map({1: 11, 2: 12, 3: 13, 4: 14}, countries={11: "c1", 12: "c2", 13: "c3", 14: "c4"})
    p = CountriesPolicy(m)
    g = relay("g", 1, guard=True)
    # client and guard both in c1
    assert p.guard_security(1, [g]) == 0.75


def test_exit_security_examples(tri):
    g, e = relay("g", 3, guard=True), relay("e", 3, exit=True)
    free = man(tri, entity_overrides={11: 0, 12: 0, 13: 0, 50: 0, 51: 0}, p_min=0.0, p_max=0.0)
    assert free.exit_security(1, 2, g, e) == 1.0
    # only the shared relay-host owner 13 is risky: E1 = {13}
    one = man(tri, entity_overrides={11: 0, 12: 0, 13: 0.1, 50: 0, 51: 0}, p_min=0.0, p_max=0.0)
    assert one.exit_security(1, 2, g, e) == pytest.approx(0.9, abs=1e-15)


def test_exit_security_countries():
    m = hand_map({1: 11, 2: 12, 3: 13, 4: 14}, countries={11: "c1", 12: "c1", 13: "c2", 14: "c3", 15: "c4"},
                 extra_entities=(15,))
    p = CountriesPolicy(m)
    g, e = relay("g", 1, guard=True), relay("e", 2, exit=True)
    assert p.exit_security(1, 2, g, e) == 0.75
    e2 = relay("e2", 4, exit=True)
    m2 = hand_map({1: 11, 2: 12, 3: 13, 4: 14}, countries={11: "c1", 12: "c4", 13: "c2", 14: "c2"})
    p2 = CountriesPolicy(m2)
    # guard side {c1}, exit side {c2, c4}: no country on both
    assert p2.exit_security(1, 4, relay("g", 1), e2) == 1.0


def test_longevity_family_probability():
    assert longevity_family_prob(0.0) == pytest.approx(0.1)
    assert longevity_family_prob(1e12) == pytest.approx(0.02)
    assert 0.02 < longevity_family_prob(3.0) < 0.1


@pytest.fixture(scope="module")
def world():
    m = generate_synthetic_map(SyntheticMapSpec(80, 30, n_ranked_clients=10), seed=4)
    cons = generate_consensuses(m, SyntheticConsensusSpec(n_relays=40, n_hours=48), seed=5)
    return m, cons, TheManPolicy.from_tracker(m, track(cons))


def test_vectorized_distance_matches_scalar(world):
    m, cons, pol = world
    hosts = relay_hosts(cons, "exit")
    h, w = list(hosts), list(hosts.values())
    rows, cols = m.location_ids[:7], m.location_ids[10:19]
    block = pol.distance_block(rows, cols, h, w)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            assert block[i, j] == pytest.approx(pol.location_distance(a, b, h, w), rel=1e-9, abs=1e-12)


def test_countries_block_matches_scalar(world):
    m, cons, _ = world
    pol = CountriesPolicy(m)
    hosts = relay_hosts(cons, "guard")
    h, w = list(hosts), list(hosts.values())
    rows = m.location_ids[:6]
    block = pol.distance_block(rows, rows, h, w)
    for i, a in enumerate(rows):
        for j, b in enumerate(rows):
            assert block[i, j] == pol.location_distance(a, b, h, w)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 79), st.integers(0, 79), st.integers(0, 39), st.integers(0, 39))
def test_score_bounds_and_symmetry(world, i, j, gi, ei):
    m, cons, pol = world
    relays = cons[-1].relays
    a, b = m.location_ids[i], m.location_ids[j]
    g, e = relays[gi % len(relays)], relays[ei % len(relays)]
    assert 0.0 <= pol.guard_security(a, [g]) <= 1.0
    assert 0.0 <= pol.exit_security(a, b, g, e) <= 1.0
    d1 = pol.location_distance(a, b, [g.location], [1.0])
    assert d1 >= 0 and d1 == pytest.approx(pol.location_distance(b, a, [g.location], [1.0]))


def test_monotone_in_entity_probability(tri):
    g, e = relay("g", 3), relay("e", 3)
    lo = man(tri, entity_overrides={50: 0.1})
    hi = man(tri, entity_overrides={50: 0.3})
    assert hi.guard_security(1, [g]) <= lo.guard_security(1, [g])
    assert hi.exit_security(1, 2, g, e) <= lo.exit_security(1, 2, g, e)


def test_guard_scores_match_joint_security(world):
    m, cons, pol = world
    guards = [r for r in cons[-1].relays][:6]
    held = guards[:2]
    assert pol.guard_scores(m.location_ids[3], held, guards[2:]) == pytest.approx(
        [pol.guard_security(m.location_ids[3], held + [g]) for g in guards[2:]], rel=1e-12)


# --- adversaries ----------------------------------------------------------------------

def test_zero_probabilities_give_empty_instance(tri):
    p = man(tri, entity_prob=0.0, p_min=0.0, p_max=0.0)
    inst = p.sample_adversary(np.random.default_rng(0))
    assert not inst.entities and not inst.families
    assert not observes_entry(inst, 1, relay("g", 3))


def test_family_compromise_dominates(tri):
    inst = AdversaryInstance(links=tri.links, families=frozenset({"F"}))
    g = relay("g", 3, family="F")
    assert all(observes_entry(inst, loc, g) for loc in (1, 2, 3))


def test_single_entity_observation(tri):
    inst = AdversaryInstance(links=tri.links, entities=frozenset({50}))
    assert observes_entry(inst, 1, relay("g", 3))
    assert not observes_exit(inst, 2, relay("e", 3))


def test_type5_link_rate(tri):
    assert TYPE5_LINK_PROB == pytest.approx(0.3439)
    spec = ErrorAdversarySpec("5")
    pol = man(tri)
    rng = np.random.default_rng(1)
    hits = 0
    n = 100_000
    for _ in range(n):
        hits += spec.sample(pol, rng).link_compromised(1, 2)
    assert 0.334 <= hits / n <= 0.354


@pytest.mark.parametrize("kind,uptime,size,expected", [
    ("0", 0.0, 1, 0.1), ("1", 0.0, 1, 0.125), ("4", 0.0, 1, 0.02), ("4", 1e12, 1, 0.1),
    ("6", 0.0, 1, 0.05), ("6", 0.0, 3, 0.1), ("7", 0.0, 1, 0.02), ("7", 0.0, 2, 0.06),
])
def test_error_type_family_probs(kind, uptime, size, expected):
    assert ErrorAdversarySpec(kind).family_prob(uptime, size) == pytest.approx(expected)


def test_type1_clamps_at_one(tri):
    pol = man(tri, entity_overrides={50: 0.9})
    assert ErrorAdversarySpec("1").entity_probs(pol, np.random.default_rng(0))[50] == 1.0


def test_type2_lone_as(tri):
    # every AS here owns at most one location, so all are lone
    m = hand_map({1: 11, 2: 11, 3: 12}, links={(1, 3): [50]})
    pol = man(m)
    probs = ErrorAdversarySpec("2a").entity_probs(pol, np.random.default_rng(0))
    assert probs[12] == 0.0 and probs[50] == 0.0 and probs[11] == pol.entity_p[11]
    probs = ErrorAdversarySpec("2b").entity_probs(pol, np.random.default_rng(0))
    assert probs[12] == 0.05


def test_type3_rates():
    m = hand_map({1: 11, 2: 11, 3: 12, 4: 12, 5: 13, 6: 13, 7: 14, 8: 14, 9: 15})
    probs = ErrorAdversarySpec("3").entity_probs(man(m), np.random.default_rng(3))
    orgs = [probs[e] for e in (11, 12, 13, 14)]
    assert sorted(orgs) == [0.05, 0.05, 0.15, 0.15]
    assert probs[15] in (0.05, 0.15)


def test_unknown_error_type():
    with pytest.raises(ValueError):
        ErrorAdversarySpec("9")


def test_sampling_reproducible(world):
    m, _, pol = world
    a = pol.sample_adversary(np.random.default_rng(42))
    b = pol.sample_adversary(np.random.default_rng(42))
    assert a == b


def test_countries_adversary_deterministic(tri):
    pol = CountriesPolicy(hand_map({1: 11, 2: 12}, countries={11: "A", 12: "B"}))
    assert sample_adversary(pol, np.random.default_rng(1)) == sample_adversary(pol, np.random.default_rng(2))


def test_policy_from_config(tri):
    assert isinstance(policy_from_config({"kind": "countries"}, tri), CountriesPolicy)
    with pytest.raises(ValueError):
        policy_from_config({"kind": "bogus"}, tri)
