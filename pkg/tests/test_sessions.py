import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miasrec.sessions import (
    DataError,
    EmptyCorpusError,
    EventLog,
    ParseError,
    Session,
    SessionCorpus,
    chronological_split,
    corpus_fingerprint,
    expand_prefixes,
    load_corpus,
    load_events,
    make_example,
    prefix_frequencies,
    preprocess,
    reversed_positions,
    save_corpus,
)


def random_log(rng, n_sessions=50, n_items=30, max_len=8):
    rows = []
    for s in range(n_sessions):
        start = int(rng.integers(0, 10_000))
        for k in range(int(rng.integers(1, max_len + 1))):
            rows.append((f"s{s}", f"i{int(rng.integers(0, n_items))}", start + k))
    return EventLog(rows)


def brute_force_filter(log, min_support=5, min_len=2):
    """Independent re-implementation: dict of session -> ordered raw items."""
    counts = Counter(item for _, item, _ in log.rows)
    by_session = {}
    for order, (sid, item, ts) in enumerate(log.rows):
        by_session.setdefault(sid, []).append((ts, order, item))
    out = {}
    for sid, events in by_session.items():
        items = [(ts, item) for ts, _, item in sorted(events) if counts[item] >= min_support]
        if len(items) >= min_len:
            out[sid] = items
    return out


class TestLoadEvents:
    def test_three_rows(self, tmp_path):
        f = tmp_path / "log.tsv"
        f.write_text("a\tx\t10\na\ty\t11\na\tx\t12\n")
        log = load_events(f)
        assert log.rows == [("a", "x", 10), ("a", "y", 11), ("a", "x", 12)]

    def test_header_skipped_and_named_columns(self, tmp_path):
        f = tmp_path / "log.csv"
        f.write_text("ts,item,session\n10,x,a\n11,y,a\n")
        log = load_events(f, session_col="session", item_col="item", time_col="ts", header=True)
        assert log.rows == [("a", "x", 10), ("a", "y", 11)]

    def test_bad_timestamp_names_line(self, tmp_path):
        f = tmp_path / "log.tsv"
        f.write_text("a\tx\t10\na\ty\tsoon\n")
        with pytest.raises(ParseError) as err:
            load_events(f)
        assert err.value.line == 2
        assert ":2:" in str(err.value)

    def test_short_row(self, tmp_path):
        f = tmp_path / "log.tsv"
        f.write_text("a\tx\t10\na\ty\n")
        with pytest.raises(ParseError, match=":2:"):
            load_events(f)

    def test_date_only_is_midnight(self, tmp_path):
        f = tmp_path / "log.tsv"
        f.write_text("a\tx\t1970-01-02\n")
        assert load_events(f).rows[0][2] == 86400

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_events(tmp_path / "nope.tsv")

    def test_named_column_without_header(self, tmp_path):
        f = tmp_path / "log.tsv"
        f.write_text("a\tx\t10\n")
        with pytest.raises(DataError):
            load_events(f, session_col="session")


class TestPreprocess:
    def test_rare_item_removed(self):
        rows = [(f"s{k}", "common", k) for k in range(5)] + [(f"s{k}", "common2", k) for k in range(5)]
        rows += [(f"s{k}", "rare", k) for k in range(4)]
        corpus = preprocess(EventLog(rows))
        assert "rare" not in corpus.vocabulary
        assert all(len(s) == 2 for s in corpus.sessions)

    def test_session_reduced_to_one_item_dropped(self):
        rows = [(f"s{k}", "a", 2 * k) for k in range(5)] + [(f"s{k}", "b", 2 * k + 1) for k in range(5)]
        rows += [("lonely", "a", 100), ("lonely", "rare", 101)]
        corpus = preprocess(EventLog(rows))
        assert "lonely" not in {s.id for s in corpus.sessions}

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        log = random_log(rng)
        corpus = preprocess(log)
        expected = brute_force_filter(log)
        assert {s.id for s in corpus.sessions} == set(expected)
        for s in corpus.sessions:
            assert [corpus.vocabulary[i - 1] for i in s.items] == [item for _, item in expected[s.id]]
            assert s.end_time == expected[s.id][-1][0]

    def test_ordered_by_end_time_then_id(self):
        rng = np.random.default_rng(1)
        corpus = preprocess(random_log(rng, n_sessions=80))
        keys = [(s.end_time, s.id) for s in corpus.sessions]
        assert keys == sorted(keys)

    def test_dense_vocabulary(self):
        corpus = preprocess(random_log(np.random.default_rng(2)))
        used = {i for s in corpus.sessions for i in s.items}
        assert used == set(range(1, corpus.n_items + 1))

    def test_empty_result(self):
        with pytest.raises(EmptyCorpusError):
            preprocess(EventLog([("a", "x", 1), ("a", "y", 2)]))
        with pytest.raises(EmptyCorpusError):
            preprocess(EventLog([]))

    def test_fixed_point_is_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            once = preprocess(random_log(rng, n_items=15), fixed_point=True)
            twice = preprocess(once.to_event_log(), fixed_point=True)
            assert corpus_fingerprint(once) == corpus_fingerprint(twice)

    def test_single_pass_not_always_idempotent(self):
        # item "x" reaches 5 occurrences only through a session that is dropped
        rows = [(f"s{k}", "a", 3 * k) for k in range(5)] + [(f"s{k}", "b", 3 * k + 1) for k in range(5)]
        rows += [(f"s{k}", "x", 3 * k + 2) for k in range(4)]
        rows += [("t", "x", 100), ("t", "rare", 101)]
        once = preprocess(EventLog(rows))
        twice = preprocess(once.to_event_log())
        assert "x" in once.vocabulary and "x" not in twice.vocabulary


class TestSplit:
    def corpus(self, n, rng=None):
        sessions = [Session(f"s{k:03d}", (1 + k % 3, 1 + (k + 1) % 3), k) for k in range(n)]
        return SessionCorpus(sessions, ["a", "b", "c"])

    def test_exact_ratio(self):
        train, val, test = chronological_split(self.corpus(10))
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_too_small(self):
        with pytest.raises(DataError):
            chronological_split(self.corpus(9))

    def test_cold_item_removed(self):
        sessions = [Session(f"s{k}", (1, 2), k) for k in range(8)]
        sessions.append(Session("v", (1, 3, 2), 8))
        sessions.append(Session("t", (3, 1), 9))
        train, val, test = chronological_split(SessionCorpus(sessions, ["a", "b", "cold"]))
        assert train.vocabulary == ["a", "b"]
        assert val.sessions[0].items == (1, 2)
        assert len(test) == 0

    def test_timestamp_order(self):
        rng = np.random.default_rng(5)
        times = rng.permutation(1000)[:100]
        sessions = [Session(f"s{k}", (1, 2), int(t)) for k, t in enumerate(times)]
        train, val, test = chronological_split(SessionCorpus(sorted(sessions, key=lambda s: s.end_time), ["a", "b"]))
        assert max(s.end_time for s in train.sessions) <= min(s.end_time for s in val.sessions)
        assert max(s.end_time for s in val.sessions) <= min(s.end_time for s in test.sessions)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 200))
    def test_partition(self, n):
        corpus = self.corpus(n)
        parts = chronological_split(corpus, drop_cold_items=False)
        ids = [s.id for p in parts for s in p.sessions]
        assert len(ids) == len(set(ids)) == n
        assert set(ids) == {s.id for s in corpus.sessions}
        assert len(parts[0]) == int(0.8 * n + 1e-9)


class TestPrefixes:
    def test_count(self):
        corpus = SessionCorpus([Session("a", (1, 2, 3, 4), 0)], ["1", "2", "3", "4"])
        examples = expand_prefixes(corpus)
        assert len(examples) == 3
        assert [e.prefix for e in examples] == [(1,), (1, 2), (1, 2, 3)]
        assert [e.target for e in examples] == [2, 3, 4]

    def test_frequency_example(self):
        # session (v1, v3, v2, v3)
        assert prefix_frequencies((1, 3, 2, 3)) == (1, 2, 1, 2)

    def test_positions_reversed(self):
        assert make_example((7, 8, 9), 1).positions == (3, 2, 1)
        assert reversed_positions(1) == (1,)

    def test_truncation_keeps_recent(self):
        ex = make_example(tuple(range(1, 61)), 61, max_len=50)
        assert ex.prefix == tuple(range(11, 61))
        assert ex.positions[0] == 50 and ex.positions[-1] == 1

    def test_frequencies_count_visible_prefix_only(self):
        corpus = SessionCorpus([Session("a", (5, 6, 5, 5), 0)], [str(i) for i in range(1, 7)])
        examples = expand_prefixes(corpus)
        assert examples[1].frequencies == (1, 1)
        assert examples[2].frequencies == (2, 1, 2)

    def test_total_count_random(self):
        rng = np.random.default_rng(7)
        sessions = [Session(str(k), tuple(rng.integers(1, 20, size=rng.integers(2, 70))), k) for k in range(100)]
        corpus = SessionCorpus(sessions, [str(i) for i in range(1, 20)])
        examples = expand_prefixes(corpus)
        assert len(examples) == sum(len(s) - 1 for s in sessions)
        for ex in examples:
            assert len(ex.positions) == len(ex.frequencies) == len(ex.prefix) <= 50
            assert all(1 <= f <= 50 for f in ex.frequencies)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=12), st.data())
    def test_frequency_permutation_consistent(self, prefix, data):
        i, j = data.draw(st.integers(0, len(prefix) - 1)), data.draw(st.integers(0, len(prefix) - 1))
        swapped = list(prefix)
        swapped[i], swapped[j] = swapped[j], swapped[i]
        pairs = Counter(zip(prefix, prefix_frequencies(prefix)))
        assert Counter(zip(swapped, prefix_frequencies(swapped))) == pairs


class TestCorpusFile:
    def test_round_trip_and_bytes_stable(self, tmp_path):
        corpus = preprocess(random_log(np.random.default_rng(8)))
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_corpus(corpus, a, {"min_item_support": 5})
        save_corpus(preprocess(random_log(np.random.default_rng(8))), b, {"min_item_support": 5})
        assert a.read_bytes() == b.read_bytes()
        loaded = load_corpus(a)
        assert loaded.sessions == corpus.sessions and loaded.vocabulary == corpus.vocabulary
        doc = json.loads(a.read_text())
        assert doc["format"] == "miasrec-corpus" and doc["version"] == 1

    def test_rejects_foreign_file(self, tmp_path):
        f = tmp_path / "x.json"
        f.write_text('{"format": "other"}')
        with pytest.raises(DataError):
            load_corpus(f)
