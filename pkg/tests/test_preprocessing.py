from dendplrnn.dynsys.preprocessing import (
    add_observation_noise,
    apply_standardization,
    delay_embed,
    gaussian_smooth,
    hann_smooth,
    ingest_csv,
    preprocess_ecg,
    preprocess_eeg,
    standardize,
    unstandardize,
    write_csv,
)
from dendplrnn.dynsys.systems import TrajectoryBatch
from dendplrnn.training.bptt import TrainConfig, init_params
from dendplrnn.utils.utils import DataFormatError, DegenerateDimensionError, init_logger

import unittest
import os
import shutil
import tempfile

import numpy as np


DIR = os.path.dirname(__file__)

TEST_PREPROCESSING_LOG_FILENAME = os.path.join(DIR, "test_preprocessing.log")


class test_preprocessing(unittest.TestCase):
    def setUp(self):
        self.log = init_logger(
            "dendplrnn.test_preprocessing", TEST_PREPROCESSING_LOG_FILENAME, "DEBUG"
        )
        self.tmp = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        t = np.arange(5000) * 0.01
        self.batch = TrajectoryBatch(
            np.stack([3.0 * np.sin(t) + 2.0, 0.5 * np.cos(3 * t), rng.standard_normal(5000)], axis=-1)
        )

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _write(self, name, text):
        path = os.path.join(self.tmp, name)
        with open(path, "w") as fh:
            fh.write(text)
        return path

    def test_zero_noise_is_identity(self):
        out = add_observation_noise(self.batch, 0.0)
        self.assertTrue(np.array_equal(out.data, self.batch.data))
        self.assertIsNot(out.data, self.batch.data)

    def test_noise_variance_fraction(self):
        big = TrajectoryBatch(np.random.default_rng(1).uniform(-5, 5, (100000, 2)))
        noisy = add_observation_noise(big, 0.01, rng_seed=2)
        added = (noisy.data - big.data).reshape(-1, 2)
        expected = 0.01 * big.pooled().var(axis=0)
        np.testing.assert_allclose(added.var(axis=0), expected, rtol=0.1)
        self.assertEqual(noisy.provenance["steps"][-1]["op"], "observation_noise")

        with self.assertRaises(ValueError):
            add_observation_noise(big, -0.1)

    def test_standardize(self):
        out = standardize(self.batch)
        pooled = out.pooled()
        np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(pooled.std(axis=0), 1.0, atol=1e-9)
        self.assertTrue(out.standardized)

        back = unstandardize(out)
        np.testing.assert_allclose(back.data, self.batch.data, atol=1e-9)
        self.assertFalse(back.standardized)

    def test_standardize_constant_dimension(self):
        data = self.batch.data.copy()
        data[..., 1] = 4.0
        with self.assertRaises(DegenerateDimensionError) as ctx:
            standardize(TrajectoryBatch(data))
        self.assertEqual(ctx.exception.dimension, 1)

    def test_apply_standardization_reuses_constants(self):
        train = standardize(self.batch)
        other = TrajectoryBatch(self.batch.data[:, :100] + 1.0)
        out = apply_standardization(other, train.mean, train.std)
        np.testing.assert_allclose(out.data, (other.data - train.mean) / train.std)
        with self.assertRaises(ValueError):
            apply_standardization(other, train.mean[:2], train.std[:2])

    def test_gaussian_smooth_tiny_sigma_is_identity(self):
        out = gaussian_smooth(self.batch, 0.1)
        np.testing.assert_allclose(out.data, self.batch.data, atol=1e-12)

    def test_smoothing_preserves_constants_at_edges(self):
        flat = TrajectoryBatch(np.full((200, 1), 3.0))
        np.testing.assert_allclose(gaussian_smooth(flat, 5.0).data, 3.0, atol=1e-12)
        np.testing.assert_allclose(hann_smooth(flat, 15).data, 3.0, atol=1e-12)

    def test_hann_impulse_response(self):
        impulse = np.zeros((101, 1))
        impulse[50] = 1.0
        out = hann_smooth(TrajectoryBatch(impulse), 15).data[0, :, 0]
        weights = np.hanning(15)
        weights = weights / weights.sum()
        np.testing.assert_allclose(out[43:58], weights, atol=1e-12)
        np.testing.assert_allclose(out[43:58], out[43:58][::-1], atol=1e-15)
        self.assertEqual(np.count_nonzero(out[:43]), 0)

    def test_hann_window_must_be_odd(self):
        for window in (0, 2, 14):
            with self.assertRaises(ValueError):
                hann_smooth(self.batch, window)
        np.testing.assert_array_equal(hann_smooth(self.batch, 1).data, self.batch.data)

    def test_smoothing_needs_long_series(self):
        with self.assertRaises(ValueError):
            hann_smooth(TrajectoryBatch(np.ones((10, 1))), 15)
        with self.assertRaises(ValueError):
            gaussian_smooth(self.batch, 0.0)

    def test_delay_embed_by_hand(self):
        out = delay_embed(np.arange(1.0, 11.0), m=3, lag=2)
        self.assertEqual(out.data.shape, (1, 6, 3))
        np.testing.assert_array_equal(out.data[0, 0], [5.0, 3.0, 1.0])
        np.testing.assert_array_equal(out.data[0, :, 0], np.arange(5.0, 11.0))

    def test_delay_embed_identity_and_errors(self):
        series = np.random.default_rng(0).standard_normal(50)
        out = delay_embed(series, m=1, lag=5)
        np.testing.assert_array_equal(out.data[0, :, 0], series)
        with self.assertRaises(ValueError):
            delay_embed(series[:10], m=7, lag=2)
        with self.assertRaises(ValueError):
            delay_embed(self.batch, m=3, lag=1)

    def test_delay_embed_batch(self):
        batch = TrajectoryBatch(np.random.default_rng(0).standard_normal((4, 100, 1)))
        out = delay_embed(batch, m=3, lag=10)
        self.assertEqual(out.data.shape, (4, 80, 3))
        np.testing.assert_array_equal(out.data[2, :, 2], batch.data[2, :80, 0])
        self.assertEqual(out.provenance["steps"][-1], {"op": "delay_embed", "m": 3, "lag": 10})
        self.assertFalse(out.standardized)

        scaled = delay_embed(standardize(batch), m=3, lag=10)
        np.testing.assert_array_equal(scaled.mean, np.repeat(standardize(batch).mean, 3))
        np.testing.assert_array_equal(scaled.std, np.repeat(standardize(batch).std, 3))

    def test_ingest_csv(self):
        rows = np.random.default_rng(0).standard_normal((100, 3))
        text = "\n".join(",".join(repr(float(v)) for v in row) for row in rows) + "\n"
        plain = ingest_csv(self._write("plain.csv", text), log=self.log)
        self.assertEqual(plain.data.shape, (1, 100, 3))
        np.testing.assert_array_equal(plain.data[0], rows)

        headed = ingest_csv(self._write("headed.csv", "a,b,c\n" + text), skip_header=True)
        np.testing.assert_array_equal(headed.data, plain.data)

        picked = ingest_csv(self._write("plain2.csv", text), columns=[2, 0])
        np.testing.assert_array_equal(picked.data[0], rows[:, [2, 0]])

    def test_ingest_csv_errors(self):
        lines = [f"{i},{i + 1}" for i in range(10)]
        lines[6] = "6,seven"
        with self.assertRaises(DataFormatError) as ctx:
            ingest_csv(self._write("bad.csv", "\n".join(lines)))
        self.assertIn("row 7, column 2", str(ctx.exception))

        with self.assertRaises(DataFormatError) as ctx:
            ingest_csv(self._write("ragged.csv", "1,2\n3\n"))
        self.assertIn("row 2", str(ctx.exception))

        with self.assertRaises(DataFormatError) as ctx:
            ingest_csv(self._write("nan.csv", "1,2\n3,nan\n"))
        self.assertIn("row 2, column 2", str(ctx.exception))

        with self.assertRaises(DataFormatError) as ctx:
            ingest_csv(self._write("inf.csv", "a,b\n-inf,2\n"), skip_header=True)
        self.assertIn("row 2, column 1", str(ctx.exception))

        with self.assertRaises(DataFormatError):
            ingest_csv(self._write("empty.csv", ""))

        with self.assertRaises(DataFormatError):
            ingest_csv(self._write("cols.csv", "1,2\n3,4\n"), columns=[5])

    def test_write_csv_round_trip(self):
        path = os.path.join(self.tmp, "out", "series.csv")
        write_csv(self.batch, path, header=["x0", "x1", "x2"])
        back = ingest_csv(path, skip_header=True)
        self.assertTrue(np.array_equal(back.data, self.batch.data))

    def test_ecg_and_eeg_presets(self):
        series = np.sin(np.arange(2000) * 0.05) + 0.1 * np.random.default_rng(3).standard_normal(2000)
        ecg = preprocess_ecg(series)
        self.assertEqual(ecg.data.shape, (1, 2000 - 6 * 61, 7))
        ops = [s["op"] for s in ecg.provenance["steps"]]
        self.assertEqual(ops, ["gaussian_smooth", "standardize", "delay_embed"])
        self.assertTrue(ecg.standardized)
        self.assertEqual(ecg.mean.shape, (7,))
        np.testing.assert_allclose(ecg.data.mean(axis=(0, 1)), 0.0, atol=0.2)
        with self.assertNoLogs(self.log, level="WARNING"):
            init_params(TrainConfig(M=8, B_bases=2), ecg, log=self.log)

        eeg = preprocess_eeg(self.batch)
        self.assertEqual(eeg.data.shape, self.batch.data.shape)
        self.assertEqual([s["op"] for s in eeg.provenance["steps"]], ["standardize", "hann_smooth"])
