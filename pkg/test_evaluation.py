"""
Tests for per-query metrics, slicing, significance and comparison output.
"""

import csv
import os
import tempfile
import unittest

import numpy as np

from core.evaluation import (
    QUERY_CSV_FIELDS, AvgClickMode, EvaluationError, QueryContext, Slicer, aggregate, average_precision,
    average_precision_labels, avg_click_position, compare_models, count_improved, evaluate_query, full_report,
    inverse_pairs, paired_t_test, precision_at_1, reciprocal_rank, slice_label, slice_report, write_query_csv,
)
from core.query_log import Tokenizer, label_sat_clicks, logs_from_records

DOCS = tuple(f"d{i}" for i in range(1, 7))


def make_event(clicks, docs=DOCS, qid="q1", ts=100):
    raw = {
        "user": "u1", "session": "s1", "qid": qid, "ts": ts, "query": "cherry pie",
        "results": [{"doc": d, "pos": i} for i, d in enumerate(docs, start=1)],
        "clicks": [{"doc": d, "ts": ts + 10 + k, "dwell": dwell} for k, (d, dwell) in enumerate(clicks)],
    }
    log = label_sat_clicks(logs_from_records([raw], Tokenizer(stopwords=()))[0])
    return log.sessions[0].events[0]


def oracle_ap(ranking, relevant):
    precisions = []
    for k in range(1, len(ranking) + 1):
        if ranking[k - 1] in relevant:
            precisions.append(len(set(ranking[:k]) & relevant) / k)
    return sum(precisions) / len(relevant) if relevant else 0.0


def result(ap, qid="q1", **context):
    event = make_event([("d2", 60)], qid=qid)
    r = evaluate_query(event, list(DOCS), QueryContext("u1", "s1", qid, **context))
    r.ap = ap
    return r


class TestQueryMetrics(unittest.TestCase):

    def test_metrics_against_oracles(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ranking = [str(d) for d in rng.permutation(DOCS)]
            relevant = {str(d) for d in rng.choice(DOCS, size=rng.integers(1, 4), replace=False)}
            expected = oracle_ap(ranking, relevant)
            self.assertAlmostEqual(average_precision(ranking, relevant), expected, delta=1e-12)
            labels = [d in relevant for d in ranking]
            self.assertAlmostEqual(average_precision_labels(labels), expected, delta=1e-12)
            first = min(ranking.index(d) for d in relevant) + 1
            self.assertAlmostEqual(reciprocal_rank(ranking, relevant), 1.0 / first, delta=1e-12)
            self.assertEqual(precision_at_1(ranking, relevant), float(ranking[0] in relevant))

    def test_inverse_pairs_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            clicked = sorted({str(d) for d in rng.choice(DOCS, size=rng.integers(1, 4), replace=False)})
            event = make_event([(d, 60) for d in clicked])
            reranked = [str(d) for d in rng.permutation(DOCS)]
            expected_pairs = [
                (c, s) for c in clicked for s in DOCS
                if s not in clicked and DOCS.index(s) < DOCS.index(c)
            ]
            pairs = inverse_pairs(event)
            self.assertEqual(sorted((p.clicked_doc, p.skipped_doc) for p in pairs), sorted(expected_pairs))
            better = sum(1 for c, s in expected_pairs if reranked.index(c) < reranked.index(s))
            self.assertEqual(count_improved(pairs, reranked)[0], better)

    def test_known_values(self):
        ranking = ["a", "b", "c", "d"]
        self.assertAlmostEqual(average_precision(ranking, {"b", "d"}), (1 / 2 + 2 / 4) / 2)
        self.assertEqual(average_precision(ranking, set()), 0.0)
        self.assertEqual(reciprocal_rank(ranking, {"c"}), 1 / 3)
        self.assertEqual(reciprocal_rank(ranking, {"z"}), 0.0)
        self.assertEqual(precision_at_1(ranking, {"a"}), 1.0)
        self.assertEqual(precision_at_1(ranking, {"b"}), 0.0)
        self.assertEqual(avg_click_position(ranking, {"a", "d"}), 2.5)
        self.assertEqual(avg_click_position(ranking, ()), 0.0)

    def test_inverse_pairs_and_improvement(self):
        event = make_event([("d3", 60), ("d5", 5)])
        pairs = inverse_pairs(event)
        # d3 skipped d1, d2; d5 skipped d1, d2, d4
        self.assertEqual(len(pairs), 5)
        self.assertEqual(count_improved(pairs, list(DOCS)), (0, 0.0))
        better, p = count_improved(pairs, ["d3", "d5", "d1", "d2", "d4", "d6"])
        self.assertEqual((better, p), (5, 1.0))
        self.assertEqual(count_improved([], list(DOCS)), (0, None))

    def test_evaluate_query(self):
        event = make_event([("d1", 5), ("d4", 60)])
        ctx = QueryContext("u1", "s1", "q1")
        r = evaluate_query(event, ["d4", "d1", "d2", "d3", "d5", "d6"], ctx)
        self.assertEqual(r.ap, 1.0)
        self.assertEqual(r.p1, 1.0)
        # avg click covers every click, SAT or not
        self.assertEqual(r.click_positions, (1, 2))
        self.assertEqual(r.avg_click, 1.5)
        self.assertEqual((r.n_pairs, r.n_better), (2, 2))

    def test_query_without_sat_click_is_skipped(self):
        event = make_event([("d1", 5)], docs=DOCS)
        # a short click that ends the session is still SAT
        self.assertIsNotNone(evaluate_query(event, list(DOCS), QueryContext("u1", "s1", "q1")))
        self.assertIsNone(evaluate_query(make_event([]), list(DOCS), QueryContext("u1", "s1", "q1")))

    def test_ranking_must_be_permutation(self):
        event = make_event([("d1", 60)])
        with self.assertRaises(EvaluationError):
            evaluate_query(event, ["d1", "d2"], QueryContext("u1", "s1", "q1"))


class TestAggregation(unittest.TestCase):

    def test_aggregate_means_and_avg_click_modes(self):
        a = evaluate_query(make_event([("d2", 60)]), list(DOCS), QueryContext("u1", "s1", "q1"))
        b = evaluate_query(make_event([("d1", 60), ("d4", 60), ("d6", 60)]), list(DOCS),
                           QueryContext("u1", "s1", "q2"))
        report = aggregate([a, b])
        self.assertEqual(report.n_queries, 2)
        self.assertAlmostEqual(report.map, (a.ap + b.ap) / 2)
        self.assertAlmostEqual(report.avg_click, (2 + (1 + 4 + 6) / 3) / 2)
        per_click = aggregate([a, b], AvgClickMode.PER_CLICK)
        self.assertAlmostEqual(per_click.avg_click, (2 + 1 + 4 + 6) / 4)
        self.assertEqual(aggregate([]).n_queries, 0)

    def test_slice_labels(self):
        self.assertEqual(slice_label(QueryContext("u", "s", "q", entropy=0.99), Slicer.CLICK_ENTROPY), "<1")
        self.assertEqual(slice_label(QueryContext("u", "s", "q", entropy=1.0), Slicer.CLICK_ENTROPY), ">=1")
        self.assertEqual(slice_label(QueryContext("u", "s", "q", repeated=True), Slicer.REPEATED_QUERY), "repeated")
        positions = [slice_label(QueryContext("u", "s", "q", session_position=p), Slicer.SESSION_POSITION)
                     for p in (1, 2, 3, 4, 5, 9)]
        self.assertEqual(positions, ["1", "2", "3", "4", "5+", "5+"])

    def test_slice_report_delta_and_empty_slices(self):
        model = [result(0.8, "q1", entropy=0.2), result(0.6, "q2", entropy=1.5)]
        base = [result(0.5, "q1", entropy=0.2), result(0.6, "q2", entropy=1.5)]
        groups = slice_report(model, Slicer.CLICK_ENTROPY, base)
        self.assertAlmostEqual(groups["<1"].delta_map, 0.3)
        self.assertAlmostEqual(groups[">=1"].delta_map, 0.0)
        repeated = slice_report(model, Slicer.REPEATED_QUERY, base)
        self.assertEqual(list(repeated), ["non-repeated"])

    def test_full_report_has_every_slicer(self):
        model = [result(0.8, "q1"), result(0.4, "q2", session_position=3)]
        report = full_report(model, model)
        self.assertEqual(report.delta_map, 0.0)
        self.assertEqual(set(report.slices), {s.value for s in Slicer})
        data = report.to_dict()
        self.assertIn("slices", data)
        self.assertTrue(any("empty slices omitted" in n for n in data["notes"]))


class TestSignificance(unittest.TestCase):

    def test_degenerate_inputs(self):
        self.assertEqual(paired_t_test([0.5], [0.2]), (0.0, 1.0))
        self.assertEqual(paired_t_test([0.5, 0.6], [0.5, 0.6]), (0.0, 1.0))
        self.assertEqual(paired_t_test([0.5, 0.7], [0.4, 0.6]), (0.0, 1.0))
        with self.assertRaises(EvaluationError):
            paired_t_test([1.0], [1.0, 2.0])

    def test_clear_improvement_is_significant(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.2, 0.6, size=50)
        improved = base + 0.2 + rng.normal(scale=0.01, size=50)
        t, p = paired_t_test(improved, base)
        self.assertGreater(t, 0)
        self.assertLess(p, 0.01)

    def test_compare_models(self):
        base = [result(0.5, f"q{i}") for i in range(5)]
        better = [result(0.5 + 0.1 * (i % 2 + 1), f"q{i}") for i in range(5)]
        rows = compare_models({"original": base, "hrnn": better})
        self.assertEqual([r.model for r in rows], ["original", "hrnn"])
        self.assertIsNone(rows[0].p_value)
        self.assertLess(rows[1].p_value, 0.05)
        with self.assertRaises(EvaluationError):
            compare_models({"hrnn": better})

    def test_query_csv(self):
        rows = [result(0.5, "q1", entropy=2.0)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "queries.csv")
            self.assertEqual(write_query_csv(rows, path), 1)
            with open(path, encoding="utf-8") as f:
                data = list(csv.DictReader(f))
        self.assertEqual(data[0]["slice"], ">=1")
        self.assertEqual(data[0]["ap"], "0.500000")
        self.assertEqual(data[0]["n_pairs"], "1")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "empty.csv")
            self.assertEqual(write_query_csv([], path), 0)
            with open(path, encoding="utf-8") as f:
                self.assertEqual(f.read(), ",".join(QUERY_CSV_FIELDS) + "\n")


if __name__ == "__main__":
    unittest.main()
