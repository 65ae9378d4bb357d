import unittest
from dataclasses import dataclass

import pytest

from ctmv_slam.defaults import (
    from_defaults,
    get_default,
    get_defaults,
    preset,
    reset_defaults,
    set_defaults,
)
from ctmv_slam.errors import ConfigError


@dataclass
class Sample:
    ate_rate: float
    seed: int
    label: str = "none"


class TestDefaults(unittest.TestCase):
    def tearDown(self):
        reset_defaults()

    def test_reference_values(self):
        self.assertEqual(get_default("ate_rate"), 10.0)
        self.assertEqual(get_default("rpe_interval"), 1.0)
        self.assertEqual(get_default("auc_ate_threshold"), 1000.0)
        self.assertEqual(get_default("auc_rpe_t_threshold"), 20.0)
        self.assertEqual(get_default("auc_rpe_r_threshold"), 5e-4)
        self.assertEqual(get_default("mode"), "slam")
        self.assertEqual(get_default("schedule"), "sequential")
        self.assertEqual(get_default("seed"), 0)
        self.assertEqual(get_default("window_size"), 11)
        self.assertEqual(get_default("max_tracking_failures"), 5)

    def test_set_and_reset(self):
        set_defaults(seed=42, window_size=7)
        self.assertEqual(get_default("seed"), 42)
        self.assertEqual(get_defaults()["window_size"], 7)
        reset_defaults()
        self.assertEqual(get_default("seed"), 0)

    def test_unknown_key_is_ignored(self):
        with pytest.warns(RuntimeWarning, match="not a valid default"):
            set_defaults(wheel_base=2.7)
        self.assertIsNone(get_default("wheel_base"))

    def test_preset(self):
        self.assertEqual(preset("seed", None), 0)
        self.assertEqual(preset("seed", 3), 3)

    def test_from_defaults(self):
        sample = from_defaults(Sample, label="x")
        self.assertEqual((sample.ate_rate, sample.seed, sample.label), (10.0, 0, "x"))
        set_defaults(seed=8)
        self.assertEqual(from_defaults(Sample).seed, 8)

    def test_from_defaults_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown Sample field"):
            from_defaults(Sample, seeds=1)
