import os
import tempfile
import unittest
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose

from qecopt.channels import (
    QuantumChannel,
    ShiftRegisterRandom,
    identity_channel,
    load_channel,
    random_error_channel,
    random_hermitian,
)
from qecopt.config import DATA_DIR
from qecopt.design import (
    DesignError,
    DesignResult,
    ProcessMatrix,
    ProcessMatrixError,
    biconvex_design,
    complete_isometry_to_unitary,
    decoherence_resistant_encoding,
    dominant_rank,
    kraus_from_process,
    optimize_encoding,
    optimize_recovery,
    partial_trace_recovery,
    process_from_kraus,
    recovery_to_unitary,
    robust_design,
)
from qecopt.fidelity import canonical_basis, pipeline_f_avg
from qecopt.linalg import DimensionError, expm_hermitian
from qecopt.sdp import CertificateReport, SolverError


def ancilla_encoding():
    c = np.zeros((4, 2), dtype=complex)
    c[0, 0] = c[2, 1] = 1.0
    return QuantumChannel.from_kraus([c], label="C0")


class TestProcessMatrices(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.recovery = partial_trace_recovery(2, 2)
        cls.basis = canonical_basis(2, 4, "recovery")

    def test_partial_trace_recovery(self):
        self.assertEqual(self.recovery.size, 2)
        self.assertEqual((self.recovery.dim_out, self.recovery.dim_in), (2, 4))
        self.assertTrue(self.recovery.is_trace_preserving())
        assert_allclose(self.recovery.kraus[0][:, [0, 2]], np.eye(2))

    def test_kraus_round_trip(self):
        pm = process_from_kraus(self.recovery, self.basis)
        extracted = kraus_from_process(pm)
        assert_allclose(self.basis.process_matrix(extracted), pm.x, atol=1e-12)
        self.assertEqual(extracted.size, 2)

    def test_rejects_non_hermitian(self):
        x = np.zeros((8, 8), dtype=complex)
        x[0, 1] = 1.0
        with self.assertRaises(ProcessMatrixError):
            ProcessMatrix(x, self.basis, "recovery")

    def test_rejects_trace_violation(self):
        with self.assertRaises(ProcessMatrixError):
            ProcessMatrix(np.eye(8), self.basis, "recovery")

    def test_rejects_kind_mismatch(self):
        pm = process_from_kraus(self.recovery, self.basis)
        with self.assertRaises(ProcessMatrixError):
            ProcessMatrix(pm.x, self.basis, "encoding")

    def test_dominant_rank(self):
        self.assertEqual(dominant_rank(np.diag([1.0, 0.5, 1e-5, 0.0])), 2)
        self.assertEqual(dominant_rank(np.diag([1.0, 0.0])), 1)
        self.assertEqual(dominant_rank(np.zeros((2, 2))), 0)


class TestHalfSteps(unittest.TestCase):

    def test_recovery_for_noiseless_channel(self):
        recovery, pm, sol = optimize_recovery(identity_channel(4), ancilla_encoding())
        self.assertTrue(recovery.is_trace_preserving())
        self.assertAlmostEqual(sol.primal_value, 1.0, places=6)
        self.assertAlmostEqual(pipeline_f_avg(recovery, identity_channel(4), ancilla_encoding()), 1.0, places=6)

    def test_encoding_improves_on_start(self):
        error = random_error_channel(7, 0.5, 4, 2)
        recovery = partial_trace_recovery(2, 2)
        encoding, pm, sol = optimize_encoding(error, recovery)
        self.assertTrue(encoding.is_trace_preserving())
        achieved = pipeline_f_avg(recovery, error, encoding)
        self.assertGreaterEqual(achieved + 1e-6, pipeline_f_avg(recovery, error, ancilla_encoding()))
        self.assertLessEqual(achieved, sol.primal_value + 1e-6)

    def test_decoherence_resistant(self):
        encoding, f = decoherence_resistant_encoding(identity_channel(4), 2)
        self.assertAlmostEqual(f, 1.0, places=6)
        self.assertEqual((encoding.dim_out, encoding.dim_in), (4, 2))

    def test_decoherence_resistant_dims(self):
        with self.assertRaises(DimensionError):
            decoherence_resistant_encoding(identity_channel(4), 3)

    def test_failed_certificate_warns(self):
        failing = CertificateReport(1e-3, 1e-3, 0.0, 0.0, -1e-4, 0.0, 1e-6, False)
        with mock.patch("qecopt.design.certify", return_value=failing):
            with self.assertLogs("qecopt.design", level="WARNING") as logs:
                optimize_recovery(identity_channel(4), ancilla_encoding())
        messages = [r.getMessage() for r in logs.records if r.levelname == "WARNING"]
        self.assertTrue(any(m.startswith("⚠️ recovery certificate above tolerance") for m in messages))


class TestBiconvexDesign(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.error = random_error_channel(7, 0.5, 4, 2)
        cls.result = biconvex_design(cls.error, partial_trace_recovery(2, 2), epsilon=0.0, max_iters=4)
        cls.tmp = tempfile.TemporaryDirectory()

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_trace_length(self):
        self.assertGreaterEqual(self.result.iterations, 1)
        self.assertLessEqual(self.result.iterations, 4)

    def test_monotone(self):
        previous = 0.0
        for entry in self.result.fidelity_trace:
            self.assertGreaterEqual(entry.f_after_encoding_step, previous - 1e-7)
            self.assertGreaterEqual(entry.f_after_recovery_step, entry.f_after_encoding_step - 1e-7)
            previous = entry.f_after_recovery_step

    def test_final_fidelity(self):
        final = pipeline_f_avg(self.result.recovery, self.error, self.result.encoding)
        self.assertAlmostEqual(self.result.final_f_avg, final, places=12)
        self.assertLessEqual(self.result.final_f_avg, 1.0 + 1e-9)
        lower, upper = self.result.bounds
        self.assertLessEqual(lower, upper + 1e-9)

    def test_channels_trace_preserving(self):
        self.assertTrue(self.result.recovery.is_trace_preserving())
        self.assertTrue(self.result.encoding.is_trace_preserving())

    def test_snapshots(self):
        self.assertEqual(set(self.result.snapshots), {"encoding_1", "iteration_1", "final"})
        recovery, encoding = self.result.snapshots["encoding_1"]
        self.assertEqual(recovery.label, "R0")

    def test_artifacts(self):
        self.assertEqual(set(self.result.process_matrices), {"recovery", "encoding"})
        self.assertEqual(set(self.result.dominant_ranks), {"recovery", "encoding"})
        self.assertIn("gap", self.result.certificates)
        self.assertIsNone(self.result.robust_worst_case)

    def test_dict_round_trip(self):
        again = DesignResult.from_dict(self.result.to_dict())
        self.assertEqual(again.final_f_avg, self.result.final_f_avg)
        self.assertEqual(again.fidelity_trace, self.result.fidelity_trace)
        assert_allclose(again.process_matrices["encoding"][0], self.result.process_matrices["encoding"][0])

    def test_trace_csv(self):
        path = os.path.join(self.tmp.name, "trace.csv")
        self.result.write_trace_csv(path)
        with open(path) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "iteration,f_after_recovery_step,f_after_encoding_step")
        self.assertEqual(len(lines), self.result.iterations + 1)

    def test_noiseless_converges(self):
        result = biconvex_design(identity_channel(4), partial_trace_recovery(2, 2), max_iters=5)
        self.assertAlmostEqual(result.final_f_avg, 1.0, places=5)
        self.assertTrue(result.converged)

    def test_recovery_first_needs_encoding(self):
        with self.assertRaises(ValueError):
            biconvex_design(self.error, partial_trace_recovery(2, 2), order="recovery-first")

    def test_bad_order(self):
        with self.assertRaises(ValueError):
            biconvex_design(self.error, partial_trace_recovery(2, 2), order="sideways")

    def test_recovery_first(self):
        result = biconvex_design(self.error, partial_trace_recovery(2, 2), max_iters=1,
                                 order="recovery-first", initial_encoding=ancilla_encoding())
        self.assertNotIn("encoding_1", result.snapshots)
        self.assertEqual(result.iterations, 1)

    def test_solver_failure_keeps_partial(self):
        with mock.patch("qecopt.design.solve_dual", side_effect=SolverError("centering failed")):
            with self.assertRaises(DesignError) as ctx:
                biconvex_design(self.error, partial_trace_recovery(2, 2), max_iters=2)
        partial = ctx.exception.partial
        self.assertIsNotNone(partial)
        self.assertEqual(partial.fidelity_trace, ())
        self.assertEqual(partial.recovery.label, "R0")


class TestMonotoneAcrossSeeds(unittest.TestCase):
    """Ten seeded error channels, each run until the per-iteration gain drops below 1e-6."""

    @classmethod
    def setUpClass(cls):
        cls.runs = {}
        for seed in range(11, 21):
            error = random_error_channel(seed, (0.25, 0.5, 0.75)[seed % 3], 4, 2)
            cls.runs[seed] = biconvex_design(error, partial_trace_recovery(2, 2), epsilon=1e-6, max_iters=100)

    def test_half_steps_nondecreasing(self):
        for seed, result in self.runs.items():
            values = [v for entry in result.fidelity_trace
                      for v in (entry.f_after_encoding_step, entry.f_after_recovery_step)]
            with self.subTest(seed=seed):
                for before, after in zip(values, values[1:]):
                    self.assertGreaterEqual(after, before - 1e-7)

    def test_terminates(self):
        for seed, result in self.runs.items():
            with self.subTest(seed=seed):
                self.assertTrue(result.converged)
                self.assertLessEqual(result.iterations, 100)
                last = result.fidelity_trace[-1]
                self.assertLess(last.f_after_recovery_step - last.f_after_encoding_step, 1e-6)


class TestRobustDesign(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.errors = [random_error_channel(7, 0.5, 4, 2), random_error_channel(8, 0.5, 4, 2)]
        cls.result = robust_design(cls.errors, partial_trace_recovery(2, 2), epsilon=0.0, max_iters=2)

    def test_worst_case(self):
        self.assertEqual(len(self.result.per_error_f_avg), 2)
        self.assertAlmostEqual(self.result.robust_worst_case, min(self.result.per_error_f_avg), places=12)

    def test_each_error(self):
        for error, value in zip(self.errors, self.result.per_error_f_avg):
            self.assertAlmostEqual(pipeline_f_avg(self.result.recovery, error, self.result.encoding), value, places=12)

    def test_needs_two(self):
        with self.assertRaises(ValueError):
            robust_design(self.errors[:1], partial_trace_recovery(2, 2))


class TestRobustReduction(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.error_a = random_error_channel(7, 0.5, 4, 2)
        cls.error_b = random_error_channel(8, 0.5, 4, 2)
        r0 = partial_trace_recovery(2, 2)
        cls.single_a = biconvex_design(cls.error_a, r0, epsilon=0.0, max_iters=1)
        cls.single_b = biconvex_design(cls.error_b, r0, epsilon=0.0, max_iters=1)
        cls.repeated = robust_design([cls.error_a, cls.error_a], r0, epsilon=0.0, max_iters=1)
        cls.pair = robust_design([cls.error_a, cls.error_b], r0, epsilon=0.0, max_iters=1)

    def test_repeated_error_matches_single(self):
        self.assertAlmostEqual(self.repeated.fidelity_trace[0].f_after_encoding_step,
                               self.single_a.fidelity_trace[0].f_after_encoding_step, delta=1e-6)
        self.assertAlmostEqual(self.repeated.per_error_f_avg[0], self.repeated.per_error_f_avg[1], places=12)

    def test_worst_case_below_single_designs(self):
        worst = self.pair.fidelity_trace[0].f_after_encoding_step
        for single in (self.single_a, self.single_b):
            self.assertLessEqual(worst, single.fidelity_trace[0].f_after_encoding_step + 1e-7)


class TestUnitaryCompletion(unittest.TestCase):

    def test_isometry(self):
        c1 = np.eye(4, dtype=complex)[:, :2]
        u = complete_isometry_to_unitary(c1)
        self.assertEqual(u.shape, (4, 4))
        assert_allclose(u.conj().T @ u, np.eye(4), atol=1e-14)
        assert_allclose(u[:, :2], c1)

    def test_already_square(self):
        u = complete_isometry_to_unitary(np.eye(2))
        assert_allclose(u, np.eye(2))

    def test_not_isometry(self):
        with self.assertRaises(ValueError):
            complete_isometry_to_unitary(2 * np.eye(4)[:, :2])

    def test_random_isometry(self):
        u = expm_hermitian(random_hermitian(ShiftRegisterRandom(4), 6, 1.0), 1.0)
        c1 = u[:, :3]
        completed = complete_isometry_to_unitary(c1)
        assert_allclose(completed.conj().T @ completed, np.eye(6), atol=1e-10)
        np.testing.assert_array_equal(completed[:, :3], c1)

    def test_published_encoding(self):
        c1 = load_channel(os.path.join(DATA_DIR, "code_a100_encoding.json")).kraus[0]
        u = complete_isometry_to_unitary(c1)
        self.assertEqual(u.shape, (4, 4))
        assert_allclose(u.conj().T @ u, np.eye(4), atol=1e-6)
        assert_allclose(u[:, :2], c1, atol=1e-2)

    def test_recovery_unitary(self):
        u = recovery_to_unitary(partial_trace_recovery(2, 2))
        self.assertEqual(u.shape, (4, 4))
        assert_allclose(u.conj().T @ u, np.eye(4), atol=1e-14)


if __name__ == '__main__':
    unittest.main()
