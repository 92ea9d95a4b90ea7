import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defectorsim import corpus
from defectorsim.corpus import CorpusStats, DomainRecord, SiteProfile, build_index, corpus_from_sets
from defectorsim.errors import DataError, GenerationError, ParseError


def _profiles(sets):
    return [SiteProfile(i, tuple(DomainRecord(d, 300) for d in sorted(s))) for i, s in enumerate(sets, start=1)]


def brute_unique(sets):
    out = {}
    for i, s in enumerate(sets, start=1):
        for d in s:
            if sum(d in other for other in sets) == 1:
                out[d] = i
    return out


@pytest.mark.parametrize("sets,expected", [
    ([{"a", "b"}, {"b", "c"}], {"a": 1, "c": 2}),
    ([{"a"}], {"a": 1}),
    ([{"a", "b"}, {"a", "b"}], {}),
])
def test_index_examples(sets, expected):
    assert build_index(_profiles(sets)).unique_index == expected


domain_sets = st.lists(st.sets(st.sampled_from([f"d{i}.example" for i in range(40)]), min_size=1, max_size=8),
                       min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(domain_sets)
def test_index_matches_brute_force(sets):
    assert build_index(_profiles(sets)).unique_index == brute_unique(sets)


def test_index_brute_force_thousand_sites():
    rng = np.random.default_rng(0)
    names = [f"x{i}.example" for i in range(3000)]
    sets = [set(rng.choice(names, size=rng.integers(1, 6), replace=False).tolist()) for _ in range(1000)]
    assert build_index(_profiles(sets)).unique_index == brute_unique(sets)


def test_rank_gap_rejected():
    profiles = _profiles([{"a"}, {"b"}])
    with pytest.raises(DataError, match="expected 2"):
        build_index([profiles[0], SiteProfile(3, profiles[1].records)])


@pytest.mark.parametrize("name", ["", "Upper.example", ".lead", "trail.", "sp ace.example", "a..b"])
def test_bad_domain_names(name):
    with pytest.raises(DataError):
        DomainRecord(name, 1)


def test_negative_ttl_and_duplicates():
    with pytest.raises(DataError):
        DomainRecord("a.example", -1)
    with pytest.raises(DataError, match="twice"):
        SiteProfile(1, (DomainRecord("a.example", 1), DomainRecord("a.example", 2)))
    with pytest.raises(DataError):
        SiteProfile(1, ())


def test_round_trip(tmp_path):
    c = corpus_from_sets([{"a.example", "b.example"}, {"b.example", "c.example"}])
    path = tmp_path / "c.tsv"
    corpus.save_corpus(c, path)
    back = corpus.load_corpus(path)
    assert back == c
    assert back.unique_index == c.unique_index


def test_round_trip_synthetic(tmp_path):
    c = corpus.generate_synthetic(300, rng=np.random.default_rng(2))
    corpus.save_corpus(c, tmp_path / "s.tsv")
    assert corpus.load_corpus(tmp_path / "s.tsv") == c


@pytest.mark.parametrize("text,match", [
    ("", "empty corpus"),
    ("1\ta.example:1\n1\tb.example:1\n", "duplicate rank"),
    ("1\ta.example:1\nbogus\n", r"bad\.tsv:2:"),
    ("1\ta.example:xx\n", r"bad\.tsv:1:"),
    ("2\ta.example:1\n", r"bad\.tsv:1:"),
])
def test_load_errors(tmp_path, text, match):
    path = tmp_path / "bad.tsv"
    path.write_text(text)
    with pytest.raises(ParseError, match=match):
        corpus.load_corpus(path)


def test_single_site_all_unique():
    c = corpus.generate_synthetic(1, rng=np.random.default_rng(0))
    assert set(c.unique_index) == set(c.domains(1))


@pytest.fixture(scope="module")
def big():
    return corpus.generate_synthetic(10_000, rng=np.random.default_rng(1))


def test_synthetic_domain_counts(big):
    counts = np.array([len(p.records) for p in big.profiles])
    assert 11.0 <= counts.mean() <= 13.4
    assert np.median(counts) == 10


def test_synthetic_unique_coverage(big):
    assert 0.948 <= corpus.unique_coverage(big) <= 0.988


def test_synthetic_ttls(big):
    ttls = np.array([r.ttl_raw for p in big.profiles for r in p.records])
    assert abs(np.median(ttls) - 255) <= 30
    unique_ttls = np.array([r.ttl_raw for p in big.profiles for r in p.records if big.unique_index.get(r.domain)])
    assert 0.43 <= np.mean(unique_ttls <= 60) <= 0.53


def test_synthetic_determinism():
    a = corpus.generate_synthetic(500, rng=np.random.default_rng(9))
    b = corpus.generate_synthetic(500, rng=np.random.default_rng(9))
    assert a == b


def test_unsatisfiable_stats():
    with pytest.raises(GenerationError):
        CorpusStats(unique_fraction=1.5).validate()
    with pytest.raises(GenerationError, match="no site can own"):
        corpus.generate_synthetic(100, CorpusStats(unique_fraction=0.9, mean_unique=0.0))


def test_retries_are_bounded(monkeypatch):
    calls = []

    def never_close(c):
        calls.append(1)
        return 0.0

    monkeypatch.setattr(corpus, "unique_coverage", never_close)
    with pytest.raises(GenerationError, match="after 3 attempts"):
        corpus.generate_synthetic(1000, CorpusStats(max_retries=3), np.random.default_rng(0))
    assert len(calls) == 3
