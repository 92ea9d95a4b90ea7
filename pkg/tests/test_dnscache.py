import pytest
from hypothesis import given, settings, strategies as st

from defectorsim.corpus import DomainRecord, corpus_from_sets
from defectorsim.dnscache import (DnsEvent, DnsWindow, ExitCache, Lookup, TtlPolicy, clip_ttl, lookup, observe,
                                  sites_from_domains, visible_sites)
from defectorsim.errors import ConfigurationError, ContractError
from oracles import clip_oracle, replay_history

CLIP = TtlPolicy("clip")
BUG = TtlPolicy("bug")


@pytest.mark.parametrize("raw,expected", [(30, 60), (60, 60), (300, 300), (1800, 1800), (86400, 1800), (0, 60)])
def test_clip(raw, expected):
    assert clip_ttl(CLIP, raw) == expected


@given(st.integers(0, 10**6))
def test_bug_mode_constant(raw):
    assert clip_ttl(BUG, raw) == 60
    assert clip_ttl(CLIP, raw) == clip_oracle("clip", raw)


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        TtlPolicy("clip", 100, 50)
    with pytest.raises(ConfigurationError):
        TtlPolicy("other")
    assert BUG.max_clipped == 60 and CLIP.max_clipped == 1800


def test_expiry_is_exclusive():
    cache = ExitCache()
    rec = DomainRecord("d.example", 300)
    assert lookup(cache, CLIP, 0, rec) is Lookup.MISS
    assert cache.entries["d.example"] == 300
    assert lookup(cache, CLIP, 299, rec) is Lookup.HIT
    assert lookup(cache, CLIP, 300, rec) is Lookup.MISS


def test_hit_does_not_refresh():
    cache = ExitCache()
    rec = DomainRecord("d.example", 100)
    cache.lookup(CLIP, 0, rec)
    cache.lookup(CLIP, 90, rec)
    assert cache.entries["d.example"] == 100


def test_time_regression():
    cache = ExitCache(5)
    cache.lookup(CLIP, 10, DomainRecord("a.example", 1))
    with pytest.raises(ContractError, match="exit 5"):
        cache.lookup(CLIP, 9, DomainRecord("a.example", 1))


def test_purge_keeps_live_entries():
    cache = ExitCache()
    cache.lookup(CLIP, 0, DomainRecord("a.example", 60))
    cache.lookup(CLIP, 0, DomainRecord("b.example", 600))
    cache.lookup(CLIP, 100, DomainRecord("c.example", 60))
    cache.purge()
    assert set(cache.entries) == {"b.example", "c.example"}


schedules = st.lists(
    st.tuples(st.integers(0, 4000), st.sampled_from(["a.example", "b.example", "c.example"]),
              st.integers(0, 5000)),
    max_size=60).map(lambda xs: sorted(xs, key=lambda x: x[0]))


def _replay(schedule, policy):
    cache = ExitCache()
    return [cache.lookup(policy, t, DomainRecord(d, ttl)).value for t, d, ttl in schedule]


@settings(max_examples=300, deadline=None)
@given(schedules, st.sampled_from(["clip", "bug"]))
def test_cache_matches_full_history_oracle(schedule, mode):
    assert _replay(schedule, TtlPolicy(mode)) == replay_history(schedule, mode)


@settings(max_examples=100, deadline=None)
@given(schedules, st.randoms(use_true_random=False))
def test_bug_mode_ignores_raw_ttls(schedule, rnd):
    ttls = [ttl for _, _, ttl in schedule]
    rnd.shuffle(ttls)
    permuted = [(t, d, ttl) for (t, d, _), ttl in zip(schedule, ttls)]
    assert _replay(schedule, BUG) == _replay(permuted, BUG)


@pytest.fixture
def small_corpus():
    # site 7 owns u7.example; shared.example is on sites 1 and 7
    sets = [{"shared.example", "x1.example"}] + [{f"f{i}.example"} for i in range(2, 7)]
    sets.append({"u7.example", "shared.example"})
    return corpus_from_sets(sets)


def test_window_examples(small_corpus):
    w = DnsWindow(60)
    observe(w, DnsEvent(10, "u7.example"))
    assert visible_sites(w, small_corpus, 40) == {7}
    assert visible_sites(w, small_corpus, 71) == set()

    w = DnsWindow(60)
    observe(w, DnsEvent(10, "shared.example"))
    assert visible_sites(w, small_corpus, 20) == set()


def test_window_boundary_keeps_oldest_edge():
    w = DnsWindow(60)
    w.observe(DnsEvent(10, "u7.example"))
    w.advance(70)
    assert w.domains() == {"u7.example"}
    w.advance(70.5)
    assert w.domains() == set()


def test_window_rejects_out_of_order():
    w = DnsWindow(60)
    w.observe(DnsEvent(10, "a.example"))
    with pytest.raises(ContractError):
        w.observe(DnsEvent(5, "a.example"))
    with pytest.raises(ConfigurationError):
        DnsWindow(0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1000), max_size=50), st.floats(1, 300))
def test_window_invariant(times, length):
    w = DnsWindow(length)
    for t in sorted(times):
        w.observe(DnsEvent(t, "a.example"))
        assert all(w.now - length <= e.time <= w.now for e in w.events)


def test_sites_without_unique_need_full_set():
    c = corpus_from_sets([{"a.example", "b.example"}, {"a.example", "b.example", "c.example"}])
    # site 1 has no unique domain; it is visible only when all its domains are seen
    assert sites_from_domains(c, {"a.example"}) == set()
    assert sites_from_domains(c, {"a.example", "b.example"}) == {1}
    assert sites_from_domains(c, {"a.example", "b.example"}, candidates=[2]) == set()
