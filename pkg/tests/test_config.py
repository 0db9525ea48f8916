import json
import os
import tempfile
import unittest
from unittest import mock

from pydantic import ValidationError

from qecopt.config import (
    POLICY_ENV,
    ConfigError,
    NumericPolicy,
    get_policy,
    load_config,
    load_experiment,
    load_policy,
    use_policy,
)


class TestNumericPolicy(unittest.TestCase):

    def test_shipped_defaults(self):
        policy = load_policy()
        self.assertEqual(policy.certificate, 1e-6)
        self.assertEqual(policy.duality_measure, 1e-9)
        self.assertEqual(policy.max_newton_iterations, 200)
        self.assertEqual(policy.design_max_iters, 100)

    def test_overrides(self):
        policy = load_policy({"certificate": 1e-4, "pure_restarts": 8})
        self.assertEqual(policy.certificate, 1e-4)
        self.assertEqual(policy.pure_restarts, 8)
        self.assertEqual(policy.psd, 1e-10)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            load_policy({"certificat": 1e-4})

    def test_invalid_value(self):
        with self.assertRaises(ConfigError):
            load_policy({"certificate": -1.0})

    def test_frozen(self):
        with self.assertRaises(ValidationError):
            load_policy().certificate = 1.0

    def test_environment_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "policy.json")
            with open(path, "w") as f:
                json.dump({"fw_gap": 1e-8}, f)
            with mock.patch.dict(os.environ, {POLICY_ENV: path}):
                self.assertEqual(load_policy().fw_gap, 1e-8)
                self.assertEqual(load_policy({"fw_gap": 1e-7}).fw_gap, 1e-7)

    def test_use_policy_restores(self):
        before = get_policy()
        with use_policy(NumericPolicy(pure_restarts=3)):
            self.assertEqual(get_policy().pure_restarts, 3)
        self.assertIs(get_policy(), before)


class TestExperimentConfig(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.channel_path = os.path.join(cls.tmp.name, "channel.json")
        with open(cls.channel_path, "w") as f:
            json.dump({"format": "qecopt-channel"}, f)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def write(self, name, data):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w") as f:
            if isinstance(data, str):
                f.write(data)
            else:
                json.dump(data, f)
        return path

    def test_minimal(self):
        config = load_experiment(self.write("minimal.json", {"mode": "design", "channels": [{"shipped": "error_a"}]}))
        self.assertEqual(config.schema_version, 1)
        self.assertEqual(config.epsilon, 1e-6)
        self.assertEqual(config.max_iters, 100)
        self.assertEqual(config.order, "encoding-first")

    def test_relative_path(self):
        config = load_experiment(self.write("relative.json", {"mode": "design", "channels": [{"path": "channel.json"}]}))
        self.assertEqual(config.channels[0].path, self.channel_path)

    def test_missing_channel_file(self):
        with self.assertRaises(ConfigError):
            load_experiment(self.write("missing.json", {"mode": "design", "channels": [{"path": "nowhere.json"}]}))

    def test_two_sources_in_one_entry(self):
        data = {"mode": "design", "channels": [{"shipped": "error_a", "generator": {"seed": 1}}]}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("both.json", data))

    def test_robust_needs_two(self):
        with self.assertRaises(ConfigError):
            load_experiment(self.write("robust.json", {"mode": "robust", "channels": [{"shipped": "error_a"}]}))

    def test_epsilon_positive(self):
        data = {"mode": "design", "channels": [{"shipped": "error_a"}], "epsilon": 0}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("epsilon.json", data))

    def test_schema_version(self):
        data = {"schema_version": 2, "mode": "design", "channels": [{"shipped": "error_a"}]}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("schema.json", data))

    def test_channel_gen_needs_generators(self):
        data = {"mode": "channel-gen", "channels": [{"shipped": "error_a"}]}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("gen.json", data))

    def test_target_size(self):
        data = {"mode": "design", "channels": [{"shipped": "error_a"}], "n_sys": 2,
                "target": [[[1, 0], [0, 0], [0, 0]], [[0, 0], [1, 0], [0, 0]], [[0, 0], [0, 0], [1, 0]]]}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("target.json", data))

    def test_policy_overrides_checked(self):
        data = {"mode": "design", "channels": [{"shipped": "error_a"}], "numeric_policy": {"psd": "small"}}
        with self.assertRaises(ConfigError):
            load_experiment(self.write("policy.json", data))

    def test_bad_json(self):
        with self.assertRaises(ConfigError):
            load_experiment(self.write("broken.json", "{\"mode\": "))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, "absent.json"))

    def test_shipped_configs(self):
        configs = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
        for name in sorted(os.listdir(configs)):
            if name.endswith("_error.json"):
                continue
            with self.subTest(name=name):
                load_experiment(os.path.join(configs, name))


if __name__ == '__main__':
    unittest.main()
