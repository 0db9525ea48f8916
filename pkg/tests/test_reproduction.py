import os
import tempfile
import unittest

from qecopt.channels import load_channel, load_shipped_channel, project_to_tp
from qecopt.config import DATA_DIR, load_config
from qecopt.design import biconvex_design, partial_trace_recovery, robust_design
from qecopt.fidelity import pipeline_f_avg
from qecopt.cli import EXIT_OK, EXPECTATIONS_FILE, cmd_reproduce


class TestShippedExample(unittest.TestCase):
    """Single-iteration designs on the shipped two-qubit error systems."""

    @classmethod
    def setUpClass(cls):
        cls.error_a = load_shipped_channel("error_a")[1]
        cls.error_b = load_shipped_channel("error_b")[1]
        cls.r0 = partial_trace_recovery(2, 2)
        cls.design_a = biconvex_design(cls.error_a, cls.r0, epsilon=0.0, max_iters=1)
        cls.design_b = biconvex_design(cls.error_b, cls.r0, epsilon=0.0, max_iters=1)

    def cell(self, result, stage, error):
        recovery, encoding = result.snapshots[stage]
        return pipeline_f_avg(recovery, error, encoding)

    def test_first_encoding_a(self):
        self.assertAlmostEqual(self.cell(self.design_a, "encoding_1", self.error_a), 0.9686, delta=0.02)

    def test_first_iteration_a(self):
        self.assertAlmostEqual(self.cell(self.design_a, "iteration_1", self.error_a), 0.9719, delta=0.02)

    def test_first_encoding_b(self):
        self.assertAlmostEqual(self.cell(self.design_b, "encoding_1", self.error_b), 0.9091, delta=0.02)

    def test_first_iteration_b(self):
        self.assertAlmostEqual(self.cell(self.design_b, "iteration_1", self.error_b), 0.9441, delta=0.02)

    def test_cross_channel(self):
        self.assertAlmostEqual(self.cell(self.design_a, "encoding_1", self.error_b), 0.7631, delta=0.05)
        self.assertAlmostEqual(self.cell(self.design_b, "encoding_1", self.error_a), 0.7445, delta=0.05)

    def test_recovery_step_improves(self):
        for result, error in ((self.design_a, self.error_a), (self.design_b, self.error_b)):
            self.assertGreaterEqual(self.cell(result, "iteration_1", error),
                                    self.cell(result, "encoding_1", error) - 1e-6)

    def test_published_code(self):
        encoding = project_to_tp(load_channel(os.path.join(DATA_DIR, "code_a100_encoding.json")))
        recovery = project_to_tp(load_channel(os.path.join(DATA_DIR, "code_a100_recovery.json")))
        self.assertAlmostEqual(pipeline_f_avg(recovery, self.error_a, encoding), 0.9997, delta=0.01)

    def test_robust_first_encoding(self):
        result = robust_design([self.error_a, self.error_b], self.r0, epsilon=0.0, max_iters=1)
        recovery, encoding = result.snapshots["encoding_1"]
        worst = min(pipeline_f_avg(recovery, e, encoding) for e in (self.error_a, self.error_b))
        self.assertAlmostEqual(worst, 0.8840, delta=0.03)
        self.assertAlmostEqual(result.robust_worst_case, min(result.per_error_f_avg), places=12)


class TestFullReproduction(unittest.TestCase):
    """The three hundred-iteration runs behind both tables, through the reproduce command."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.code, cls.report = cmd_reproduce(cls.tmp.name, jobs=3)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_exit_code(self):
        self.assertEqual(self.code, EXIT_OK)

    def test_every_cell(self):
        self.assertEqual(len(self.report["cells"]), len(load_config(EXPECTATIONS_FILE)["cells"]))
        for cell in self.report["cells"]:
            with self.subTest(pair=cell["pair"], error=cell["error"]):
                self.assertLessEqual(abs(cell["computed"] - cell["expected"]), cell["tolerance"])

    def test_matched_final_cells(self):
        finals = {(c["run"], c["error"]): c["computed"] for c in self.report["cells"] if c["stage"] == "final"}
        self.assertAlmostEqual(finals[("design_a", "error_a")], 0.9997, delta=0.005)
        self.assertAlmostEqual(finals[("design_b", "error_b")], 0.9997, delta=0.005)
        self.assertAlmostEqual(finals[("robust_ab", "worst")], 0.9576, delta=0.03)

    def test_robust_balance(self):
        balance = self.report["checks"]["robust_balance"]
        self.assertTrue(balance["passed"])
        self.assertLessEqual(balance["value"], 1e-3)

    def test_certificates(self):
        self.assertTrue(self.report["checks"]["certificates"]["passed"])
        for name, run in self.report["runs"].items():
            with self.subTest(run=name):
                self.assertEqual(run["certificates"]["failures"], 0)
                self.assertLessEqual(run["certificates"]["gap"], 1e-6)
                self.assertLessEqual(run["certificates"]["slackness"], 1e-6)

    def test_structure_reported(self):
        for name in ("design_a", "design_b"):
            self.assertTrue(self.report["checks"][f"structure_{name}"]["informational"])

    def test_files_written(self):
        for filename in ("report.json", "design_a.json", "design_b.json", "robust_ab.json", "trace_robust_ab.csv"):
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, filename)), filename)


class TestExpectations(unittest.TestCase):

    def test_cells_reference_runs(self):
        expectations = load_config(EXPECTATIONS_FILE)
        runs = expectations["runs"]
        self.assertEqual(sorted(runs), ["design_a", "design_b", "robust_ab"])
        for cell in expectations["cells"]:
            with self.subTest(pair=cell["pair"], error=cell["error"]):
                if cell["stage"] == "published":
                    self.assertTrue(cell["informational"])
                    continue
                self.assertIn(cell["run"], runs)
                self.assertIn(cell["stage"], ("encoding_1", "iteration_1", "final"))
                self.assertGreater(cell["tolerance"], 0)


if __name__ == '__main__':
    unittest.main()
