import os
import tempfile
import unittest

from run_config import (
    ALGORITHM_PRESETS,
    ConfigError,
    TrainConfig,
    load_config,
    parse_overrides,
    preset,
    suite_configs,
    write_config,
)


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.gamma, cfg.tau, cfg.eta, cfg.beta, cfg.batch_size), (0.95, 0.01, 0.05, 2.0, 64))
        self.assertEqual((cfg.noise_start, cfg.noise_end, cfg.warmup), (0.1, 0.01, 1000))
        self.assertEqual(cfg.hidden_sizes, (64, 64))
        self.assertEqual(cfg.algorithm, "MH-MADDPG")

    def test_no_marl_requires_mutual_help(self):
        with self.assertRaises(ConfigError):
            load_config(overrides={"mutual_help": "false", "marl_term": "false"})
        self.assertEqual(load_config(overrides={"marl_term": "false"}).algorithm, "MH-MADDPG-no-MARL")

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(overrides={"learning_rate": "0.1"})
        self.assertIn("learning_rate", str(ctx.exception))

    def test_range_checks(self):
        for key, value in (("gamma", "1.0"), ("tau", "1.5"), ("eta", "0"), ("beta", "-1"), ("lr_actor", "0")):
            with self.assertRaises(ConfigError):
                load_config(overrides={key: value})

    def test_config_is_immutable(self):
        cfg = TrainConfig()
        with self.assertRaises(Exception):
            cfg.gamma = 0.5

    def test_labels(self):
        labels = {name: preset(name, TrainConfig()).algorithm for name in ALGORITHM_PRESETS}
        self.assertEqual(labels, {name: name for name in ALGORITHM_PRESETS})


class TestConfigFile(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "c.cfg")

    def tearDown(self):
        self.tmp.cleanup()

    def test_file_then_overrides(self):
        with open(self.path, "w") as f:
            f.write("# coordination run\nenv=coordination\nn_agents=2\nseeds=0,1,2\nhidden_sizes=32,16\nseed=1\n")
        cfg = load_config(self.path, {"seed": 3})
        self.assertEqual(cfg.env, "coordination")
        self.assertEqual(cfg.seeds, (0, 1, 2))
        self.assertEqual(cfg.hidden_sizes, (32, 16))
        self.assertEqual(cfg.seed, 3)

    def test_write_then_load(self):
        cfg = TrainConfig(backend="matd3", mutual_help=False, reward_scheme="global_sum", eta=0.07,
                          seeds=(4, 5), name="custom")
        write_config(cfg, self.path)
        self.assertEqual(load_config(self.path), cfg)

    def test_missing_file_and_empty_value(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, "none.cfg"))
        with open(self.path, "w") as f:
            f.write("gamma=\n")
        with self.assertRaises(ConfigError):
            load_config(self.path)

    def test_parse_overrides(self):
        self.assertEqual(parse_overrides(["eta=0.1", " beta = 3 "]), {"eta": "0.1", "beta": "3"})
        with self.assertRaises(ConfigError):
            parse_overrides(["eta"])


class TestSuiteConfigs(unittest.TestCase):
    def test_every_algorithm_and_seed(self):
        configs = suite_configs(TrainConfig(), ["MADDPG", "MH-MADDPG", "MADDPG-GR", "MATD3", "MH-MATD3"])
        self.assertEqual(len(configs), 25)
        self.assertEqual(len({(c.algorithm, c.seed) for c in configs}), 25)

    def test_presets_reset_ablation_switches(self):
        base = TrainConfig(selectivity=False, reward_scheme="global_sum")
        cfg = preset("MH-MADDPG", base)
        self.assertTrue(cfg.selectivity)
        self.assertEqual(cfg.reward_scheme, "local")
        with self.assertRaises(ConfigError):
            preset("SEAC", base)


if __name__ == "__main__":
    unittest.main()
