"""
Tests for the comparison tables and the attention dump.
"""

import json
import os
import tempfile
import unittest

import pandas as pd

from core.evaluation import ComparisonRow, MetricsReport
from core.hrnn import HrnnRanker, ModelConfig, ModelParams
from test_hrnn import TINY, random_user
from ui.attention_view import DISPLAY_THRESHOLD, attention_dump, render_attention, write_attention
from ui.report_view import comparison_frame, render_comparison, render_report, write_comparison, write_reports


def report(map_value, n=10):
    return MetricsReport(n_queries=n, map=map_value, mrr=map_value, p_at_1=0.5, avg_click=2.0,
                         better_pairs=3, total_pairs=6, p_improve=0.5)


class TestReportView(unittest.TestCase):

    def setUp(self):
        self.rows = [ComparisonRow("original", report(0.5)), ComparisonRow("hrnn", report(0.6), p_value=0.01)]

    def test_comparison_keeps_model_order(self):
        frame = comparison_frame(self.rows)
        self.assertEqual(list(frame["model"]), ["original", "hrnn"])
        self.assertTrue(pd.isna(frame.loc[0, "p_value"]))

    def test_render_uses_dash_for_missing(self):
        text = render_comparison(self.rows)
        first_data_line = text.splitlines()[1]
        self.assertTrue(first_data_line.strip().endswith("-"))
        self.assertIn("0.6000", text)
        self.assertEqual(render_comparison([]), "(no rows)")

    def test_render_report_lists_notes(self):
        r = report(0.4)
        r.slices = {"repeated_query": {"non-repeated": report(0.4, n=3)}}
        r.notes = ["repeated_query: empty slices omitted: repeated"]
        text = render_report("pclick", r)
        self.assertIn("== pclick (10 queries)", text)
        self.assertIn("non-repeated", text)
        self.assertIn("note: repeated_query", text)

    def test_written_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_comparison(self.rows, tmp)
            frame = pd.read_csv(paths["csv"])
            written = write_reports({"hrnn": report(0.6)}, tmp)
            with open(written["hrnn"], encoding="utf-8") as f:
                data = json.load(f)
            with open(os.path.join(tmp, "report_hrnn.txt"), encoding="utf-8") as f:
                text = f.read()
            self.assertTrue(os.path.isfile(paths["txt"]))
        self.assertEqual(list(frame.columns)[:3], ["model", "MAP", "MRR"])
        self.assertAlmostEqual(frame.loc[1, "MAP"], 0.6)
        self.assertEqual(data["MAP"], 0.6)
        self.assertTrue(text.startswith("== hrnn (10 queries)"))


class TestAttentionView(unittest.TestCase):

    def setUp(self):
        self.user = random_user(seed=2)
        self.ranker = HrnnRanker(ModelParams.initialize(ModelConfig(**TINY), seed=1))

    def test_dump_covers_past_sessions(self):
        dump = attention_dump(self.ranker, self.user, 3, 0)
        self.assertEqual([r.session_index for r in dump.rows], [0, 1, 2])
        self.assertEqual(dump.rows[1].session_id, "s1")
        self.assertEqual(dump.rows[0].representative_query, self.user.sessions[0][0].query_key)
        self.assertAlmostEqual(sum(r.weight for r in dump.rows), 1.0)
        self.assertIsNone(dump.note)

    def test_first_session_has_note(self):
        dump = attention_dump(self.ranker, self.user, 0, 1)
        self.assertEqual(dump.rows, [])
        self.assertIn("no past sessions", render_attention(dump))

    def test_hide_below_threshold(self):
        dump = attention_dump(self.ranker, self.user, 3, 0)
        dump.rows[0].weight = DISPLAY_THRESHOLD / 2
        shown = render_attention(dump)
        hidden = render_attention(dump, hide_below_threshold=True)
        self.assertIn("<0.01", shown)
        self.assertNotIn("<0.01", hidden)
        self.assertEqual(len(hidden.splitlines()), len(shown.splitlines()) - 1)

    def test_variant_without_attention(self):
        ranker = HrnnRanker(ModelParams.initialize(ModelConfig(variant="hrnn", **TINY), seed=1))
        with self.assertRaises(ValueError):
            attention_dump(ranker, self.user, 2, 0)

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_attention(attention_dump(self.ranker, self.user, 2, 0), os.path.join(tmp, "a.csv"))
            frame = pd.read_csv(path)
            empty = pd.read_csv(write_attention(attention_dump(self.ranker, self.user, 0, 0),
                                                os.path.join(tmp, "b.csv")))
        self.assertEqual(len(frame), 2)
        self.assertEqual(len(empty), 0)
        self.assertIn("weight", empty.columns)


if __name__ == "__main__":
    unittest.main()
