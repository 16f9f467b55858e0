import os
import tempfile
import unittest
from unittest.mock import patch

import ablation
from ablation import AblationRow, MemberResult
from configs import settings
from errors import ConfigError, DivergenceError
from results import Database
from scenes import generate_dataset
from trainer import TrainConfig

BASE = TrainConfig(
    burn_in_iterations=2,
    total_iterations=4,
    n=1,
    n_prime=1,
    labeled_batch=2,
    unlabeled_batch=2,
    eval_interval=2,
    kl_sample_size=2,
)


class TestAblationSpec(unittest.TestCase):
    def test_presets(self):
        """
        Test the preset tables and their labels.
        """
        labels = [row.label for row in ablation.PRESETS["all"]]
        self.assertEqual(labels[:3], ["A1", "A11", "A12"])
        self.assertEqual(len(labels), 12)
        self.assertEqual([row.label for row in ablation.PRESETS["single_stage"]], ["A1", "A11", "A12", "A2", "A21", "A22"])

    def test_row_config(self):
        """
        Test a row's switches reach the training configuration.
        """
        a1, a4 = ablation.family_rows("A1")[0], ablation.family_rows("A4")[2]
        config = a1.config(BASE)
        self.assertEqual(config.mode, "classical_ema")
        self.assertFalse(config.cascade_enabled)
        self.assertFalse(config.unsup_box_regression)
        config = a4.config(BASE)
        self.assertEqual((config.mode, config.cascade_enabled, config.uncertainty_enabled), ("tmr_rd", True, True))
        self.assertEqual((a1.baseline, a4.baseline), ("A1", "A2"))

    def test_parse_spec(self):
        """
        Test presets, custom rows, overrides and comments.
        """
        text = "# ablation\npreset voc\nX mode=tmr cascade=true uncertainty=yes train.n=5  # custom\n"
        rows = ablation.parse_ablation_spec(text, BASE)
        self.assertEqual(len(rows), 7)
        custom = rows[-1]
        self.assertEqual((custom.label, custom.mode, custom.cascade_enabled), ("X", "tmr", True))
        self.assertEqual(custom.config(BASE).n, 5)

    def test_empty_spec(self):
        """
        Test a spec without rows is rejected.
        """
        with self.assertRaisesRegex(ConfigError, "no configurations"):
            ablation.parse_ablation_spec("# nothing\n")

    def test_every_problem_is_reported(self):
        """
        Test duplicate labels, bad booleans, unknown presets and bad keys together.
        """
        text = "A mode=tmr\nA mode=tmr\nB cascade=maybe\npreset nope\nC train.bogus=1\nD mode=fancy\n"
        with self.assertRaises(ConfigError) as caught:
            ablation.parse_ablation_spec(text)
        problems = caught.exception.problems
        self.assertIn("duplicate label A", problems)
        self.assertTrue(any("not a boolean" in p for p in problems))
        self.assertTrue(any("unknown preset" in p for p in problems))
        self.assertTrue(any(p.startswith("C: unknown key") for p in problems))
        self.assertTrue(any(p.startswith("D: train.mode") for p in problems))


class TestRunAblation(unittest.TestCase):
    def setUp(self):
        self.folder = tempfile.TemporaryDirectory()
        Database.path = os.path.join(self.folder.name, "ablation.db")
        self.dataset = generate_dataset(5, count=8, split_ratio=0.5, test_count=2)
        self.rows = ablation.family_rows("A1")

    def tearDown(self):
        Database.path = None
        self.folder.cleanup()

    @patch("ablation.run_member")
    def test_records_in_spec_order(self, mock_member):
        """
        Test every member is recorded, failures included, in spec order.
        """
        mock_member.side_effect = [
            MemberResult("A1", "OK", 0.1, 0.3, 0.2),
            MemberResult("A11", "FAILED", error="diverged"),
            MemberResult("A12", "OK", 0.1, 0.4, 0.25),
        ]
        batch, records = ablation.run_ablation(self.rows, BASE, self.dataset, batch="fixed")
        self.assertEqual(batch, "fixed")
        self.assertEqual([r.label for r in records], ["A1", "A11", "A12"])
        self.assertEqual([r.status for r in records], ["OK", "FAILED", "OK"])
        self.assertEqual(records[1].error, "diverged")
        self.assertIn("train.mode=tmr", records[1].config)

    def test_needs_test_split(self):
        """
        Test an ablation without a test split is refused.
        """
        dataset = generate_dataset(5, count=8, split_ratio=0.5)
        with self.assertRaises(ValueError):
            ablation.run_ablation(self.rows, BASE, dataset)

    @patch("ablation.trainer.run")
    def test_member_failure_is_contained(self, mock_run):
        """
        Test a diverging member is reported as FAILED instead of raising.
        """
        mock_run.side_effect = DivergenceError("loss is nan", "SSL", 3)
        result = ablation.run_member(self.rows[2], BASE, self.dataset)
        self.assertEqual(result.status, "FAILED")
        self.assertIn("stage SSL, iteration 3", result.error)

    def test_member_metrics(self):
        """
        Test a real member reports supervised and final scores in [0, 1].
        """
        result = ablation.run_member(self.rows[2], BASE, self.dataset)
        self.assertEqual(result.status, "OK")
        for value in (result.sup_map, result.ap50, result.map):
            self.assertTrue(0.0 <= value <= 1.0)

    def test_parallel_matches_sequential(self):
        """
        Test worker processes give the same scores as a sequential run.
        """
        rows = self.rows[1:]
        _, sequential = ablation.run_ablation(rows, BASE, self.dataset, workers=1, batch="seq")
        _, parallel = ablation.run_ablation(rows, BASE, self.dataset, workers=2, batch="par")
        self.assertEqual([(r.label, r.map) for r in sequential], [(r.label, r.map) for r in parallel])


@unittest.skipUnless(settings.slow_tests_enabled(), "set TMRD_SLOW_TESTS=1")
class TestDeskScaleAblation(unittest.TestCase):
    def test_semi_supervised_rows_match_burn_in(self):
        """
        Test every single-stage row on 600 scenes scores at least the burned-in model.
        """
        dataset = generate_dataset(0, count=600, split_ratio=0.1, test_count=100)
        for row in ablation.PRESETS["single_stage"]:
            with self.subTest(row=row.label):
                result = ablation.run_member(row, TrainConfig(), dataset)
                self.assertEqual(result.status, "OK")
                self.assertGreaterEqual(result.map, result.sup_map)


if __name__ == "__main__":
    unittest.main()
