"""
Tests for shared data preparation and threaded evaluation.
"""

import tempfile
import unittest
from dataclasses import replace

from core.config import RunConfig, preset_model
from core.hrnn import HrnnRanker, ModelParams
from core.pipeline import (
    PipelineError, evaluate_reranker, hrnn_reranker, original_reranker, pclick_reranker, prepare, query_context,
)
from core.synthlog import GenConfig, write_synthetic

SMALL = GenConfig(n_users=5, sessions_per_user=(8, 10), n_topics=4, docs_per_topic=20, n_candidates=10,
                  n_on_topic=4, n_alternate=4, repeat_query_prob=0.4)


class TestPipeline(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        paths = write_synthetic(cls.tmp.name, SMALL, seed=3)
        cls.config = RunConfig(log=str(paths["log"]), docs=str(paths["docs"]), preset="desk",
                               model=preset_model("desk", d_e=6, d_s1=4, d_s2=4, d_a=4, d_f=3))
        cls.prepared = prepare(cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_prepared_shapes(self):
        self.assertEqual(len(self.prepared.logs), 5)
        self.assertEqual(self.prepared.text.dim, 6)
        self.assertEqual(set(self.prepared.users), set(self.prepared.splits))
        refs = self.prepared.test_refs()
        self.assertTrue(refs)
        for user_id, s_idx, _ in refs:
            self.assertIn(s_idx, self.prepared.splits[user_id].test_sessions)

    def test_query_context(self):
        found_repeat = False
        for log in self.prepared.logs:
            seen = set()
            for s_idx, q_idx, event in log.events():
                ctx = query_context(log, s_idx, q_idx, self.prepared.store)
                self.assertEqual(ctx.session_position, q_idx + 1)
                self.assertEqual(ctx.repeated, event.query_key in seen)
                found_repeat |= ctx.repeated
                seen.add(event.query_key)
        self.assertTrue(found_repeat)

    def test_original_reranker_keeps_order(self):
        results = evaluate_reranker(self.prepared, original_reranker())
        self.assertTrue(results)
        for r in results:
            log = self.prepared.log_by_user[r.context.user_id]
            events = {e.query_id: e for _, _, e in log.events()}
            self.assertEqual(r.ranking, events[r.context.query_id].doc_ids)

    def test_thread_count_does_not_change_results(self):
        ranker = HrnnRanker(ModelParams.initialize(self.config.model, seed=1))
        for reranker in (pclick_reranker(self.prepared.store), hrnn_reranker(ranker, self.prepared.users)):
            single = evaluate_reranker(self.prepared, reranker, threads=1)
            pooled = evaluate_reranker(self.prepared, reranker, threads=3)
            self.assertEqual([r.key for r in single], [r.key for r in pooled])
            self.assertEqual([r.ap for r in single], [r.ap for r in pooled])

    def test_missing_inputs(self):
        with self.assertRaises(PipelineError):
            prepare(replace(self.config, docs=None))


if __name__ == "__main__":
    unittest.main()
