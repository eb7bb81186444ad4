"""
Tests for click-log ingestion, SAT labeling, filtering and splitting.
"""

import json
import os
import tempfile
import unittest

from core.query_log import (
    DuplicateRecordError, LastClickScope, LogFormatError, QueryLogError, Tokenizer, filter_users, ingest_log,
    is_sat, label_sat_clicks, load_documents, load_stopwords, logs_from_records, split_dataset, split_sessions,
    write_documents, write_log,
)


def record(user="u1", session="s1", qid="q1", ts=100, query="cherry pie", docs=("d1", "d2", "d3"), clicks=()):
    return {
        "user": user, "session": session, "qid": qid, "ts": ts, "query": query,
        "results": [{"doc": d, "pos": i} for i, d in enumerate(docs, start=1)],
        "clicks": [{"doc": d, "ts": ts + 10 + k, "dwell": dwell} for k, (d, dwell) in enumerate(clicks)],
    }


def user_with_sessions(user: str, n: int, start: int = 1000):
    return [
        record(user=user, session=f"{user}-s{i}", qid=f"{user}-q{i}", ts=start + i * 10_000,
               query=f"topic{i % 3} words", clicks=[("d1", 40)])
        for i in range(n)
    ]


class TestIngestion(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.tokenizer = Tokenizer(stopwords={"the", "of"})

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, records, name="log.jsonl"):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as f:
            for r in records:
                f.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
        return path

    def test_events_sorted_by_time(self):
        path = self.write([
            record(qid="q2", ts=300),
            record(qid="q1", ts=100),
            record(session="s0", qid="q0", ts=50),
        ])
        logs = ingest_log(path, tokenizer=self.tokenizer)
        self.assertEqual(len(logs), 1)
        sessions = logs[0].sessions
        self.assertEqual([s.session_id for s in sessions], ["s0", "s1"])
        self.assertEqual([e.query_id for e in sessions[1].events], ["q1", "q2"])

    def test_query_normalization(self):
        path = self.write([record(query="The History of Cherry-Pie!")])
        event = ingest_log(path, tokenizer=self.tokenizer)[0].sessions[0].events[0]
        self.assertEqual(event.terms, ("history", "cherry", "pie"))
        self.assertEqual(event.query_key, "history cherry pie")
        self.assertEqual(event.raw_query, "The History of Cherry-Pie!")

    def test_missing_field_names_line_and_field(self):
        bad = record()
        del bad["ts"]
        path = self.write([record(), bad])
        with self.assertRaises(LogFormatError) as ctx:
            ingest_log(path, tokenizer=self.tokenizer)
        self.assertEqual(ctx.exception.line, 2)
        self.assertEqual(ctx.exception.field_name, "ts")

    def test_invalid_json_line(self):
        path = self.write([record(), "{not json"])
        with self.assertRaises(LogFormatError) as ctx:
            ingest_log(path, tokenizer=self.tokenizer)
        self.assertEqual(ctx.exception.line, 2)

    def test_bad_positions_rejected(self):
        bad = record()
        bad["results"][1]["pos"] = 5
        with self.assertRaises(LogFormatError):
            logs_from_records([bad], self.tokenizer)

    def test_too_many_results_rejected(self):
        with self.assertRaises(LogFormatError):
            logs_from_records([record(docs=[f"d{i}" for i in range(21)])], self.tokenizer)

    def test_duplicate_record(self):
        path = self.write([record(), record()])
        with self.assertRaises(DuplicateRecordError) as ctx:
            ingest_log(path, tokenizer=self.tokenizer)
        self.assertEqual(ctx.exception.line, 2)
        self.assertIsInstance(ctx.exception, QueryLogError)

    def test_empty_query_dropped(self):
        logs = logs_from_records([record(qid="q1", query="the of"), record(qid="q2", ts=200)], self.tokenizer)
        self.assertEqual([e.query_id for e in logs[0].sessions[0].events], ["q2"])

    def test_click_outside_results_ignored(self):
        r = record(clicks=[("d1", 40)])
        r["clicks"].append({"doc": "elsewhere", "ts": 120, "dwell": 50})
        event = logs_from_records([r], self.tokenizer)[0].sessions[0].events[0]
        self.assertEqual(event.clicked_docs(), frozenset({"d1"}))

    def test_missing_session_needs_segmentation(self):
        records = [record(qid=f"q{i}", ts=ts) for i, ts in enumerate([0, 600, 5000, 5100])]
        for r in records:
            del r["session"]
        path = self.write(records)
        with self.assertRaises(LogFormatError):
            ingest_log(path, tokenizer=self.tokenizer)
        logs = ingest_log(path, tokenizer=self.tokenizer, segment_sessions=True, session_gap=1800)
        self.assertEqual([len(s.events) for s in logs[0].sessions], [2, 2])

    def test_unsupported_format(self):
        with self.assertRaises(QueryLogError):
            ingest_log(self.write([record()]), format="tsv")

    def test_write_then_ingest_is_identity(self):
        records = [
            record(qid="q1", ts=100, clicks=[("d2", 12), ("d1", 45.5)]),
            record(qid="q2", ts=200),
            record(user="u2", session="x", qid="q9", ts=50, clicks=[("d3", 0)]),
        ]
        logs = ingest_log(self.write(records), tokenizer=self.tokenizer)
        out = os.path.join(self.tmp.name, "again.jsonl")
        write_log(logs, out)
        self.assertEqual(ingest_log(out, tokenizer=self.tokenizer), logs)

    def test_documents_roundtrip_through_tokenizer(self):
        path = os.path.join(self.tmp.name, "docs.jsonl")
        write_documents({"d1": ["Cherry", "the", "pie"], "d2": []}, path)
        docs = load_documents(path, self.tokenizer)
        self.assertEqual(docs, {"d1": ("cherry", "pie"), "d2": ()})

    def test_bundled_stopwords(self):
        words = load_stopwords()
        self.assertIn("the", words)
        self.assertNotIn("cherry", words)


class TestSatLabels(unittest.TestCase):

    def setUp(self):
        self.tokenizer = Tokenizer(stopwords=())

    def test_dwell_threshold_is_strict(self):
        log = logs_from_records([
            record(qid="q1", ts=100, clicks=[("d1", 30), ("d2", 31)]),
            record(qid="q2", ts=200, clicks=[("d1", 5)]),
        ], self.tokenizer)[0]
        labeled = label_sat_clicks(log)
        first, second = labeled.sessions[0].events
        self.assertEqual([imp.sat for imp in first.impressions], [False, True, False])
        # the last click of the session is SAT regardless of dwell
        self.assertEqual([imp.sat for imp in second.impressions], [True, False, False])
        self.assertTrue(all(is_sat(imp) == imp.sat for imp in first.impressions))

    def test_last_click_scope_query(self):
        log = logs_from_records([
            record(qid="q1", ts=100, clicks=[("d1", 5)]),
            record(qid="q2", ts=200, clicks=[("d2", 5)]),
        ], self.tokenizer, last_click_scope=LastClickScope.QUERY)[0]
        labeled = label_sat_clicks(log)
        self.assertEqual(labeled.sessions[0].events[0].sat_docs(), frozenset({"d1"}))
        self.assertEqual(labeled.sessions[0].events[1].sat_docs(), frozenset({"d2"}))

    def test_session_without_clicks_has_no_sat(self):
        log = label_sat_clicks(logs_from_records([record()], self.tokenizer)[0])
        self.assertFalse(log.sessions[0].events[0].sat_docs())


class TestFilterAndSplit(unittest.TestCase):

    def setUp(self):
        tokenizer = Tokenizer(stopwords=())
        self.logs = logs_from_records(
            user_with_sessions("u1", 3) + user_with_sessions("u2", 4) + user_with_sessions("u3", 24),
            tokenizer,
        )

    def test_filter_users(self):
        kept = filter_users(self.logs, min_sessions=4)
        self.assertEqual([log.user_id for log in kept], ["u2", "u3"])
        with self.assertRaises(ValueError):
            filter_users(self.logs, min_sessions=0)

    def test_split_is_a_time_ordered_partition(self):
        log = self.logs[2]
        split = split_sessions(log)
        parts = [split.profile_sessions, split.train_sessions, split.validation_sessions, split.test_sessions]
        flat = [i for part in parts for i in part]
        self.assertEqual(flat, list(range(len(log.sessions))))
        self.assertEqual(len(split.profile_sessions), 12)
        self.assertEqual(len(split.test_sessions), 2)
        self.assertEqual(len(split.validation_sessions), 2)
        self.assertEqual(len(split.train_sessions), 8)
        self.assertTrue(split.supervised)
        self.assertEqual(split.training_period(), frozenset(range(22)))

    def test_profile_boundary_timestamp(self):
        log = self.logs[2]
        boundary = log.sessions[6].start_ts
        split = split_sessions(log, profile_boundary_ts=boundary)
        self.assertEqual(split.profile_sessions, tuple(range(6)))

    def test_short_user_is_profile_only(self):
        log = logs_from_records(user_with_sessions("u9", 2), Tokenizer(stopwords=()))[0]
        split = split_sessions(log)
        self.assertFalse(split.supervised)
        self.assertEqual(split.profile_sessions, (0, 1))

    def test_three_sessions_leave_one_for_test(self):
        split = split_sessions(self.logs[0])
        self.assertEqual(split.profile_sessions, (0,))
        self.assertEqual(split.train_sessions, (1,))
        self.assertEqual(split.validation_sessions, ())
        self.assertEqual(split.test_sessions, (2,))

    def test_validation_never_empties_train(self):
        for n in range(4, 12):
            log = logs_from_records(user_with_sessions("u7", n), Tokenizer(stopwords=()))[0]
            for fraction in (0.2, 0.5, 0.9):
                split = split_sessions(log, validation_fraction=fraction)
                self.assertTrue(split.train_sessions, f"{n} sessions, fraction {fraction}")
        split = split_sessions(self.logs[1])
        self.assertEqual((split.train_sessions, split.validation_sessions, split.test_sessions), ((2,), (), (3,)))

    def test_split_dataset_keys(self):
        splits = split_dataset(self.logs)
        self.assertEqual(sorted(splits), ["u1", "u2", "u3"])
        self.assertEqual(splits["u2"].test_sessions, (3,))


if __name__ == "__main__":
    unittest.main()
