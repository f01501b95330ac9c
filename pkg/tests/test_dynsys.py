from dendplrnn.dynsys.systems import (
    SystemSpec,
    TrajectoryBatch,
    default_initial_state,
    default_system_spec,
    drift,
    largest_lyapunov,
    population_coupling,
    simulate,
    simulate_many,
    vector_field_roots,
)
from dendplrnn.utils.utils import IntegrationError, init_logger

import unittest
import os

import numpy as np


DIR = os.path.dirname(__file__)

TEST_DYNSYS_LOG_FILENAME = os.path.join(DIR, "test_dynsys.log")


class test_dynsys(unittest.TestCase):
    def setUp(self):
        self.log = init_logger("dendplrnn.test_dynsys", TEST_DYNSYS_LOG_FILENAME, "DEBUG")
        self.lorenz = default_system_spec("lorenz63")
        self.wilson_cowan = default_system_spec("wilson_cowan")

    def test_spec_defaults(self):
        self.assertEqual(self.lorenz.params, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0})
        self.assertEqual(self.lorenz.dt, 0.01)
        self.assertEqual(self.lorenz.process_noise_std, 0.01)
        self.assertEqual(self.lorenz.dimension, 3)
        self.assertEqual(default_system_spec("lorenz96").dimension, 10)
        self.assertEqual(default_system_spec("neural_population").dimension, 50)
        self.assertEqual(self.wilson_cowan.dimension, 2)
        self.assertEqual(default_system_spec("bursting_neuron").process_noise_std, 0.0)

    def test_spec_rejects_bad_parameters(self):
        with self.assertRaises(ValueError):
            SystemSpec("lorenz63", {"sigma": 10.0, "rho": 28.0}, 0.01)
        with self.assertRaises(ValueError):
            SystemSpec("lorenz63", {"sigma": 10.0, "rho": 28.0, "beta": 2.0, "F": 8.0}, 0.01)
        with self.assertRaises(ValueError):
            SystemSpec("lorenz63", dict(self.lorenz.params), 0.0)
        with self.assertRaises(ValueError):
            SystemSpec("lorenz63", dict(self.lorenz.params), 0.01, process_noise_std=-1.0)
        with self.assertRaises(ValueError):
            default_system_spec("duffing")

    def test_spec_round_trip(self):
        restored = SystemSpec.from_dict(self.lorenz.to_dict())
        self.assertEqual(restored, self.lorenz)

    def test_drift_batches(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 3))
        out = drift(self.lorenz, x)
        self.assertEqual(out.shape, (4, 5, 3))
        np.testing.assert_allclose(out[2, 3], drift(self.lorenz, x[2, 3]))

    def test_lorenz_fixed_point_is_stationary(self):
        spec = default_system_spec("lorenz63", process_noise_std=0.0)
        c = np.sqrt(spec.params["beta"] * (spec.params["rho"] - 1.0))
        x_star = np.array([c, c, spec.params["rho"] - 1.0])
        np.testing.assert_allclose(drift(spec, x_star), 0.0, atol=1e-12)

        run = simulate(spec, x_star, 200, log=self.log)
        self.assertLess(np.max(np.abs(run.data[0] - x_star)), 1e-6)

    def test_lorenz_attractor_extent_and_bounded(self):
        run = simulate(self.lorenz, default_initial_state(self.lorenz), 20000, rng_seed=1)
        x = run.data[0]
        self.assertEqual(run.data.shape, (1, 20000, 3))
        self.assertLess(np.max(np.abs(x[:, :2])), 30.0)
        self.assertGreater(np.min(x[1000:, 2]), 0.0)
        self.assertLess(np.max(x[:, 2]), 60.0)
        self.assertGreater(np.std(x[:, 0]), 5.0)

    def test_simulation_is_deterministic(self):
        a = simulate(self.lorenz, [1.0, 1.0, 1.0], 500, rng_seed=3)
        b = simulate(self.lorenz, [1.0, 1.0, 1.0], 500, rng_seed=3)
        c = simulate(self.lorenz, [1.0, 1.0, 1.0], 500, rng_seed=4)
        self.assertTrue(np.array_equal(a.data, b.data))
        self.assertFalse(np.array_equal(a.data, c.data))

    def test_noise_free_ignores_seed(self):
        spec = default_system_spec("lorenz63", process_noise_std=0.0)
        a = simulate(spec, [1.0, 1.0, 1.0], 300, rng_seed=3)
        b = simulate(spec, [1.0, 1.0, 1.0], 300, rng_seed=99)
        self.assertTrue(np.array_equal(a.data, b.data))

    def test_substeps_converge(self):
        spec = default_system_spec("lorenz63", process_noise_std=0.0)
        coarse = simulate(spec, [1.0, 1.0, 1.0], 50, n_substeps=1).data
        fine = simulate(spec, [1.0, 1.0, 1.0], 50, n_substeps=4).data
        np.testing.assert_allclose(coarse, fine, atol=1e-4)

    def test_simulate_errors(self):
        with self.assertRaises(ValueError):
            simulate(self.lorenz, [1.0, 1.0], 10)
        with self.assertRaises(ValueError):
            simulate(self.lorenz, [1.0, 1.0, 1.0], 1)
        spec = default_system_spec("lorenz96", process_noise_std=0.0)
        with np.errstate(all="ignore"):
            with self.assertRaises(IntegrationError) as ctx:
                simulate(spec, np.full(10, 1e200), 10)
        self.assertEqual(ctx.exception.step, 1)

    def test_provenance(self):
        run = simulate(self.lorenz, [1.0, 1.0, 1.0], 10, rng_seed=5)
        self.assertEqual(run.provenance["source"], "simulation")
        self.assertEqual(run.provenance["rng_seed"], 5)
        self.assertEqual(run.provenance["system"]["kind"], "lorenz63")
        self.assertFalse(run.standardized)

    def test_wilson_cowan_bistable(self):
        roots = vector_field_roots(self.wilson_cowan, [0.0, 0.0], [1.0, 1.0])
        labels = sorted(r.stability for r in roots)
        self.assertEqual(labels, ["saddle", "stable", "stable"])

        stable = [r.state for r in roots if r.stability == "stable"]
        starts = np.array([[0.1, 0.1], [0.9, 0.2]])
        run = simulate_many(self.wilson_cowan, starts, 1000)
        ends = run.data[:, -1]
        self.assertGreater(np.linalg.norm(ends[0] - ends[1]), 0.5)
        for end in ends:
            self.assertLess(min(np.linalg.norm(end - s) for s in stable), 1e-3)

    def test_simulate_many_shape(self):
        starts = np.random.default_rng(0).uniform(0, 1, (400, 2))
        run = simulate_many(self.wilson_cowan, starts, 300)
        self.assertEqual(run.data.shape, (400, 300, 2))
        self.assertEqual(run.n_trajectories, 400)
        self.assertEqual(run.pooled().shape, (120000, 2))

    def test_population_coupling(self):
        a = population_coupling(50, 0.09, 2.0, 35)
        b = population_coupling(50, 0.09, 2.0, 35)
        self.assertTrue(np.array_equal(a, b))
        self.assertFalse(a.flags.writeable)
        self.assertFalse(np.array_equal(a, population_coupling(50, 0.09, 2.0, 36)))

    def test_lorenz_lyapunov_positive(self):
        spec = default_system_spec("lorenz63", process_noise_std=0.0)
        lam = largest_lyapunov(spec, default_initial_state(spec), n_steps=20000)
        self.assertGreater(lam, 0.5)
        self.assertLess(lam, 1.5)

    def test_neural_population_chaotic(self):
        spec = default_system_spec("neural_population")
        lam = largest_lyapunov(spec, default_initial_state(spec), n_steps=5000)
        self.assertGreater(lam, 0.0)

    def test_trajectory_batch_shapes(self):
        batch = TrajectoryBatch(np.zeros((20, 3)))
        self.assertEqual(batch.data.shape, (1, 20, 3))
        with self.assertRaises(ValueError):
            TrajectoryBatch(np.zeros(5))

        derived = batch.derive(np.ones((1, 20, 3)), step={"op": "test"})
        self.assertEqual(derived.provenance["steps"], [{"op": "test"}])
        self.assertNotIn("steps", batch.provenance)
