"""
End-to-end tests of the command line on a small synthetic log.
"""

import json
import os
import tempfile
import unittest

from core.baselines import TopicModel
from main import EXIT_OK, EXIT_USAGE, build_parser, main, named_path, resolve_config

MODEL_FLAGS = ["--preset", "desk", "--d-e", "8", "--d-s1", "6", "--d-s2", "6", "--d-a", "6", "--d-f", "4"]


class TestArguments(unittest.TestCase):

    def test_probability_out_of_range_is_usage_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["synth", "--out", tmp, "--repeat-prob", "1.5"]), EXIT_USAGE)

    def test_unknown_command(self):
        self.assertEqual(main(["fly"]), EXIT_USAGE)

    def test_named_path(self):
        self.assertEqual(named_path("short=out/a.ckpt"), ("short", "out/a.ckpt"))
        self.assertEqual(named_path("runs/long.ckpt"), ("long", "runs/long.ckpt"))

    def test_flags_override_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"seed": 3, "train": {"lr": 0.5, "patience": 5}, "preset": "desk"}, f)
            args = build_parser().parse_args(["train", "--config", path, "--lr", "0.01", "--d-e", "12"])
            config = resolve_config(args)
        self.assertEqual(config.train.lr, 0.01)
        self.assertEqual(config.train.patience, 5)
        self.assertEqual(config.train.seed, 3)
        self.assertEqual((config.model.d_e, config.model.d_s1), (12, 32))

    def test_train_without_inputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["train", "--out", tmp]), EXIT_USAGE)
            self.assertEqual(main(["train", "--out", tmp, "--log", "nope.jsonl", "--docs", "nope.jsonl"]),
                             EXIT_USAGE)


class TestPipeline(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = cls.tmp.name
        code = main(["synth", "--out", cls.out, "--users", "4", "--topics", "4", "--seed", "5",
                     "--log-level", "WARNING"])
        assert code == EXIT_OK
        cls.data = ["--log", os.path.join(cls.out, "synth_log.jsonl"),
                    "--docs", os.path.join(cls.out, "synth_docs.jsonl")]
        cls.checkpoint = os.path.join(cls.out, "model.ckpt")
        code = main(["train", "--out", cls.out, "--epochs", "2", "--log-level", "WARNING"] + cls.data + MODEL_FLAGS)
        assert code == EXIT_OK

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def test_synth_is_deterministic(self):
        with tempfile.TemporaryDirectory() as other:
            self.assertEqual(main(["synth", "--out", other, "--users", "4", "--topics", "4", "--seed", "5"]), EXIT_OK)
            for name in ("synth_log.jsonl", "synth_docs.jsonl", "synth_truth.jsonl"):
                with open(self.path(name), "rb") as a, open(os.path.join(other, name), "rb") as b:
                    self.assertEqual(a.read(), b.read(), name)

    def test_train_outputs(self):
        self.assertTrue(os.path.isfile(self.checkpoint))
        with open(self.path("model_report.json"), encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(len(report["epochs"]), 2)
        self.assertEqual(report["model"]["d_e"], 8)
        self.assertNotIn("wall_time", report["epochs"][0])
        self.assertTrue(os.path.isfile(self.path("model_report_timing.json")))

    def test_training_is_reproducible(self):
        with tempfile.TemporaryDirectory() as out:
            args = ["train", "--out", out, "--epochs", "2", "--threads", "1"] + self.data + MODEL_FLAGS
            self.assertEqual(main(args), EXIT_OK)
            for name in ("model.ckpt", "model_report.json"):
                with open(self.path(name), "rb") as a, open(os.path.join(out, name), "rb") as b:
                    self.assertEqual(a.read(), b.read(), name)

    def test_ingest(self):
        with tempfile.TemporaryDirectory() as out:
            self.assertEqual(main(["ingest", "--out", out] + self.data), EXIT_OK)
            with open(os.path.join(out, "split_summary.json"), encoding="utf-8") as f:
                summary = json.load(f)
            self.assertTrue(os.path.isfile(os.path.join(out, "vocab.tsv")))
        self.assertEqual(summary["n_users"], 4)
        for parts in summary["users"].values():
            self.assertEqual(len(parts["test"]) >= 1, True)

    def test_evaluate(self):
        with tempfile.TemporaryDirectory() as out:
            code = main(["evaluate", "--out", out, "--checkpoint", f"hrnn={self.checkpoint}",
                         "--models", "original,pclick,hrnn"] + self.data)
            self.assertEqual(code, EXIT_OK)
            for name in ("comparison.csv", "comparison.txt", "report_original.json", "report_hrnn.json",
                         "report_hrnn.txt", "report_pclick.txt", "queries_pclick.csv"):
                self.assertTrue(os.path.isfile(os.path.join(out, name)), name)
            with open(os.path.join(out, "report_original.json"), encoding="utf-8") as f:
                original = json.load(f)
        self.assertEqual(original["delta_MAP"], 0.0)
        self.assertIn("click_entropy_cutoff_1", original["slices"])

    def test_evaluate_missing_checkpoint_still_reports_others(self):
        with tempfile.TemporaryDirectory() as out:
            code = main(["evaluate", "--out", out, "--checkpoint", "ghost=missing.ckpt",
                         "--models", "original,pclick,ghost"] + self.data)
            self.assertEqual(code, EXIT_USAGE)
            self.assertTrue(os.path.isfile(os.path.join(out, "report_pclick.json")))
            with open(os.path.join(out, "errors.json"), encoding="utf-8") as f:
                self.assertIn("ghost", json.load(f))

    def test_baseline_then_evaluate_with_saved_topics(self):
        with tempfile.TemporaryDirectory() as out:
            code = main(["baseline", "--out", out, "--topics", "2", "--iterations", "20"] + self.data)
            self.assertEqual(code, EXIT_OK)
            with open(os.path.join(out, "pclick_clicks.tsv"), encoding="utf-8") as f:
                self.assertEqual(f.readline().rstrip("\n"), "user\tquery\tdoc\tclicks")
            model = TopicModel.from_json(os.path.join(out, "ptm_model.json"))
            self.assertEqual(model.n_topics, 2)
            code = main(["evaluate", "--out", out, "--models", "original,ptm",
                         "--ptm-model", os.path.join(out, "ptm_model.json")] + self.data)
            self.assertEqual(code, EXIT_OK)
            self.assertTrue(os.path.isfile(os.path.join(out, "report_ptm.json")))

    def test_rerank(self):
        with tempfile.TemporaryDirectory() as out:
            code = main(["rerank", "--out", out, "--checkpoint", self.checkpoint] + self.data)
            self.assertEqual(code, EXIT_OK)
            with open(os.path.join(out, "rerank.jsonl"), encoding="utf-8") as f:
                rows = [json.loads(line) for line in f]
        self.assertTrue(rows)
        for row in rows:
            self.assertEqual(row["scores"], sorted(row["scores"], reverse=True))

    def test_attention(self):
        with tempfile.TemporaryDirectory() as out:
            code = main(["attention", "--out", out, "--checkpoint", self.checkpoint, "--user", "u0000"] + self.data)
            self.assertEqual(code, EXIT_OK)
            self.assertTrue(os.path.isfile(os.path.join(out, "attention_u0000.csv")))
            code = main(["attention", "--out", out, "--checkpoint", self.checkpoint, "--user", "nobody"] + self.data)
            self.assertEqual(code, EXIT_USAGE)

    def test_resume_continues_training(self):
        with tempfile.TemporaryDirectory() as out:
            ckpt = os.path.join(out, "run.ckpt")
            base = ["train", "--out", out, "--checkpoint", ckpt] + self.data + MODEL_FLAGS
            self.assertEqual(main(base + ["--epochs", "1"]), EXIT_OK)
            self.assertEqual(main(base + ["--epochs", "2", "--resume"]), EXIT_OK)
            with open(os.path.join(out, "run_report.json"), encoding="utf-8") as f:
                report = json.load(f)
        self.assertEqual([e["epoch"] for e in report["epochs"]], [2])


if __name__ == "__main__":
    unittest.main()
