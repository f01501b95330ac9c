from dendplrnn.model.checkpoint import (
    checkpoint_payload,
    load_checkpoint,
    params_from_payload,
    save_checkpoint,
)
from dendplrnn.model.dendplrnn import DendParams, Variant, random_params, simulate_free
from dendplrnn.utils.utils import DataFormatError, init_logger

import unittest
import os
import json
import shutil
import tempfile

import numpy as np


DIR = os.path.dirname(__file__)

TEST_CHECKPOINT_LOG_FILENAME = os.path.join(DIR, "test_checkpoint.log")


class test_checkpoint(unittest.TestCase):
    def setUp(self):
        self.log = init_logger("dendplrnn.test_checkpoint", TEST_CHECKPOINT_LOG_FILENAME, "DEBUG")
        self.tmp = tempfile.mkdtemp()
        self.rng = np.random.default_rng(4)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _assert_same(self, a, b):
        for name in ("A", "W", "h0", "alphas", "thresholds"):
            self.assertTrue(np.array_equal(getattr(a, name), getattr(b, name)), name)
        self.assertEqual(a.N, b.N)

    def test_round_trip_is_bit_exact(self):
        base = random_params(6, 4, self.rng, N=3)
        params = base.with_arrays(L=self.rng.standard_normal((3, 3)))
        variant = Variant(clipped=True, mean_centered=False)
        path = save_checkpoint(os.path.join(self.tmp, "nested", "model.json"), params, variant, {"epochs": 3})

        restored, restored_variant, meta = load_checkpoint(path)
        self._assert_same(params, restored)
        self.assertTrue(np.array_equal(params.L, restored.L))
        self.assertEqual(restored_variant, variant)
        self.assertEqual(meta["epochs"], 3)
        self.assertIn("created", meta)

        z1 = self.rng.standard_normal(6)
        self.assertTrue(
            np.array_equal(
                simulate_free(z1, params, variant, T=100),
                simulate_free(z1, restored, variant, T=100),
            )
        )

    def test_standard_plrnn_flag_survives(self):
        params = random_params(3, 0, self.rng)
        path = save_checkpoint(os.path.join(self.tmp, "standard.json"), params, Variant())
        restored, _, _ = load_checkpoint(path)
        self.assertTrue(restored.fixed_basis)
        self._assert_same(params, restored)

        payload = checkpoint_payload(random_params(3, 2, self.rng), Variant())
        self.assertFalse(payload["fixed_basis"])
        del payload["fixed_basis"]
        self.assertFalse(params_from_payload(payload)[0].fixed_basis)

    def test_noise_and_input_blocks(self):
        params = DendParams(
            A=[0.1, 0.2],
            W=[[0.0, 0.3], [0.4, 0.0]],
            h0=[0.0, 0.1],
            alphas=[0.5],
            thresholds=[[0.1, -0.1]],
            C=[[1.0], [0.0]],
            Sigma=[0.01, 0.02],
            Gamma=[0.5, 0.5],
        )
        restored, _, _ = params_from_payload(checkpoint_payload(params, Variant()))
        np.testing.assert_array_equal(restored.C, params.C)
        np.testing.assert_array_equal(restored.Sigma, params.Sigma)
        np.testing.assert_array_equal(restored.Gamma, params.Gamma)

    def test_matrix_observation_mode(self):
        B_obs = self.rng.standard_normal((2, 4))
        params = DendParams(
            A=np.full(4, 0.5), W=np.zeros((4, 4)), h0=np.zeros(4), alphas=[1.0], thresholds=np.zeros((1, 4)), B_obs=B_obs
        )
        payload = checkpoint_payload(params, Variant())
        self.assertEqual(payload["obs"]["mode"], "matrix")
        restored, _, _ = params_from_payload(json.loads(json.dumps(payload)))
        self.assertFalse(restored.identity_mapping)
        np.testing.assert_array_equal(restored.B_obs, B_obs)

    def test_missing_fields_rejected(self):
        payload = checkpoint_payload(random_params(3, 2, self.rng), Variant())
        del payload["thresholds"]
        with self.assertRaises(DataFormatError) as ctx:
            params_from_payload(payload)
        self.assertIn("thresholds", str(ctx.exception))

    def test_unknown_observation_mode(self):
        payload = checkpoint_payload(random_params(3, 2, self.rng), Variant())
        payload["obs"]["mode"] = "poisson"
        with self.assertRaises(DataFormatError):
            params_from_payload(payload)

    def test_non_finite_values_rejected(self):
        payload = checkpoint_payload(random_params(3, 2, self.rng), Variant())
        payload["h0"][1] = float("nan")
        with self.assertRaises(ValueError):
            params_from_payload(payload)
