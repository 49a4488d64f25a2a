import contextlib
import io
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from cli import main
from metrics_store import METRICS_HEADER
from oracles import (
    FD_TOLERANCE,
    coordination_oracle,
    corrupted_derivative,
    loss_value_oracle,
    random_instance,
    relative_error,
    run_gradcheck,
)
from run_config import TrainConfig, write_config
from tensor_autodiff import BACKWARD_RULES

TINY = ["--set", "env=coordination", "--set", "n_agents=2", "--set", "hidden_sizes=8,8",
        "--set", "batch_size=8", "--set", "warmup=16", "--set", "total_steps=40",
        "--set", "eval_every=20", "--set", "eval_episodes=2"]


def run_cli(*argv):
    """Exit code, stdout and stderr of one CLI invocation."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(["--log-level", "ERROR", *argv])
    return code, out.getvalue(), err.getvalue()


class TestGradientOracle(unittest.TestCase):
    def test_relative_error_floor(self):
        self.assertEqual(relative_error(1e-9, 0.0), 1e-9 / 1e-4)
        self.assertAlmostEqual(relative_error(1.0, 1.1), 0.1 / 1.1)

    def test_every_case_passes(self):
        report = run_gradcheck(draws=2, seed=7, coords_per_tensor=6)
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures()])
        self.assertLessEqual(report.max_rel_error, FD_TOLERANCE)
        self.assertEqual(len(report.results), 27)

    def test_deployed_sizes_are_checked(self):
        report = run_gradcheck(draws=0, seed=2, coords_per_tensor=4)
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures()])
        self.assertEqual(len(report.results), 9)
        self.assertTrue(all(r.name.endswith("(64x64)") for r in report.results))
        self.assertEqual(len(run_gradcheck(draws=1, seed=2, coords_per_tensor=4, full_size_draws=0).results), 9)

    def test_planted_tanh_fault_detected_and_restored(self):
        original = BACKWARD_RULES["tanh"]
        with corrupted_derivative("tanh"):
            report = run_gradcheck(draws=1, seed=0, coords_per_tensor=6)
        self.assertFalse(report.passed)
        self.assertTrue(any(r.name.startswith("actor network") for r in report.failures()))
        self.assertIs(BACKWARD_RULES["tanh"], original)

    def test_unknown_fault(self):
        with self.assertRaises(ValueError):
            with corrupted_derivative("softmax"):
                pass

    def test_random_instances_vary(self):
        rng = np.random.default_rng(0)
        shapes = {random_instance(rng).joint.n_agents for _ in range(20)}
        self.assertGreater(len(shapes), 1)


class TestValueOracles(unittest.TestCase):
    def test_loss_values_match_straight_line_code(self):
        report = loss_value_oracle(instances=10, seed=3)
        self.assertTrue(report.passed, [m.name for m in report.mismatches()[:5]])
        self.assertLessEqual(report.max_error, 1e-10)

    def test_coordination_grid(self):
        report = coordination_oracle()
        self.assertTrue(report.passed)
        np.testing.assert_allclose(report.best_joint, (0.5, 0.5))


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.run_dir = os.path.join(self.tmp.name, "run")

    def tearDown(self):
        self.tmp.cleanup()

    def test_gradcheck_command(self):
        self.assertEqual(run_cli("gradcheck", "--draws", "1", "--coords", "4")[0], 0)
        code, _, err = run_cli("gradcheck", "--draws", "1", "--coords", "4", "--corrupt-op", "tanh")
        self.assertEqual(code, 1)
        self.assertIn("FAIL", err)

    def test_oracle_command(self):
        code, out, _ = run_cli("oracle", "--instances", "5")
        self.assertEqual(code, 0)
        self.assertIn("coordination grid", out)

    def test_train_eval_plot(self):
        code, out, _ = run_cli("train", *TINY, "--seed", "1", "--out", self.run_dir)
        self.assertEqual(code, 0, out)
        for name in ("metrics.csv", "final.ckpt", "config.cfg"):
            self.assertTrue(os.path.exists(os.path.join(self.run_dir, name)), name)

        code, _, err = run_cli("train", *TINY, "--out", self.run_dir)
        self.assertEqual(code, 1)
        self.assertIn("--overwrite", err)

        trajectory = os.path.join(self.tmp.name, "traj.csv")
        code, out, _ = run_cli("eval", "--checkpoint", os.path.join(self.run_dir, "final.ckpt"),
                               "--episodes", "3", "--dump-trajectory", trajectory)
        self.assertEqual(code, 0)
        self.assertIn("episodes=3", out)
        self.assertEqual(len(pd.read_csv(trajectory)), 3)

        svg = os.path.join(self.tmp.name, "curve.svg")
        code, _, _ = run_cli("plot", "--in", self.tmp.name, "--metric", "mean_return", "--scale", "symlog",
                             "--out", svg)
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(svg))

    def test_suite_command(self):
        suite_dir = os.path.join(self.tmp.name, "suite")
        code, out, _ = run_cli("suite", *TINY, "--algorithms", "MADDPG,MH-MADDPG", "--seeds", "0,1",
                               "--parallelism", "2", "--out", suite_dir)
        self.assertEqual(code, 0)
        self.assertEqual(out.count("success_rate="), 4)
        self.assertTrue(os.path.exists(os.path.join(suite_dir, "MH-MADDPG", "seed1", "metrics.csv")))

    def test_failures_and_usage_errors(self):
        config = os.path.join(self.tmp.name, "config.cfg")
        write_config(TrainConfig(env="coordination", n_agents=2, hidden_sizes=(8, 8)), config)
        missing = os.path.join(self.tmp.name, "missing.ckpt")
        code, _, err = run_cli("eval", "--checkpoint", missing, "--config", config)
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error:"))
        self.assertIn("checkpoint not found", err)
        self.assertIn("missing.ckpt", err)
        self.assertEqual(run_cli("train", *TINY, "--set", "marl_term=false", "--set", "mutual_help=false",
                                 "--out", self.run_dir)[0], 1)
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main(["train", "--bogus"])
        self.assertEqual(ctx.exception.code, 2)

    def test_plot_rejects_malformed_metrics(self):
        run_dir = os.path.join(self.tmp.name, "MADDPG", "seed0")
        os.makedirs(run_dir)
        header = [name for name in METRICS_HEADER if name != "success_rate"]
        with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
            f.write(",".join(header) + "\n")
        svg = os.path.join(self.tmp.name, "curve.svg")
        code, _, err = run_cli("plot", "--in", self.tmp.name, "--out", svg)
        self.assertEqual(code, 1)
        self.assertTrue(err.startswith("error:"))
        self.assertIn("success_rate", err)
        self.assertFalse(os.path.exists(svg))

        code, _, err = run_cli("plot", "--in", os.path.join(self.tmp.name, "empty"))
        self.assertEqual(code, 1)
        self.assertIn("no metrics.csv", err)


if __name__ == "__main__":
    unittest.main()
