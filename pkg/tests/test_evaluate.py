import numpy as np
import pytest

from pacsnoc import autodiff as ad
from pacsnoc import controllers as ctrl
from pacsnoc import experiments as exp
from pacsnoc import sim


class TestLtiEvaluator:
    @pytest.fixture(scope="class")
    def setup(self):
        problem = exp.lti_problem()
        dataset = sim.generate_dataset(problem.noise, 16, 10, 1, seed=2)
        return problem, dataset

    def test_costs_bounded(self, setup):
        problem, dataset = setup
        costs = problem.transformed_costs(np.array([7.0, 3.0]), dataset)
        assert np.all(costs >= 0.0) and np.all(costs < problem.c)

    def test_taped_matches_plain(self, setup):
        problem, dataset = setup
        theta = np.array([6.0, 2.0])
        plain = problem.empirical(theta, dataset)
        val, _ = problem.empirical_and_grad(theta, dataset)
        assert val == pytest.approx(plain, rel=1e-12)

    def test_batch_matches_reference(self, setup):
        problem, dataset = setup
        rng = np.random.default_rng(0)
        thetas = np.stack([rng.uniform(0, 12, 20), rng.uniform(-5, 5, 20)],
                          axis=-1)
        batch = problem.batch_empirical(thetas, dataset, chunk=7)
        ref = np.array([problem.empirical(t, dataset) for t in thetas])
        assert batch == pytest.approx(ref, rel=1e-12)

    def test_dataset_dimension_check(self, setup):
        problem, _ = setup
        wrong = sim.generate_dataset(problem.noise, 4, 12, 1, seed=0)
        with pytest.raises(ValueError):
            problem.empirical(np.array([1.0, 0.0]), wrong)


class TestRobotEvaluator:
    @pytest.fixture(scope="class")
    def setup(self):
        problem = exp.robot_problem(horizon=30)
        dataset = sim.generate_dataset(problem.noise, 4, 30, 8, seed=2)
        return problem, dataset

    def test_batch_matches_reference(self, setup):
        problem, dataset = setup
        rng = np.random.default_rng(1)
        thetas = 5.0 * rng.standard_normal((6, problem.arch.n_params()))
        batch = problem.batch_empirical(thetas, dataset, chunk=4)
        ref = np.array([problem.empirical(t, dataset) for t in thetas])
        assert batch == pytest.approx(ref, rel=1e-9)

    def test_gradient_matches_finite_differences(self, setup):
        problem, dataset = setup
        rng = np.random.default_rng(3)
        theta = rng.standard_normal(problem.arch.n_params())
        ok, err = ad.grad_check(
            lambda t: problem.empirical_taped(t, dataset), theta,
            h=1e-5, tol=1e-4)
        assert ok, f"max relative error {err}"

    def test_evaluate_controller_reports_collisions(self, setup):
        problem, _ = setup
        metrics = exp.evaluate_controller(
            problem, np.zeros(problem.arch.n_params()), n_test=16, seed=5)
        assert set(metrics) >= {"mean_raw", "mean_transformed",
                                "collision_fraction"}
        assert 0.0 <= metrics["collision_fraction"] <= 1.0
        assert np.all(metrics["transformed"] < 1.0)


class TestTraining:
    def test_lti_empirical_training_converges_to_benchmark_bias(self):
        # large S: the empirical bias approaches mu_w / b = 3
        problem = exp.lti_problem()
        dataset = sim.generate_dataset(problem.noise, 128, 10, 1, seed=9)
        prior = exp.lti_prior(problem)
        theta0 = prior.sample(1, np.random.default_rng(0))[0]
        result = exp.train_empirical(problem, dataset, theta0, lr=2.0,
                                     epochs=400, seed=0)
        assert abs(result.theta[1] - 3.0) < 0.5
        assert -2.0 < result.theta[0] < 18.0

    def test_gain_projected_each_step(self):
        problem = exp.lti_problem()
        dataset = sim.generate_dataset(problem.noise, 8, 10, 1, seed=9)
        result = exp.train_empirical(problem, dataset,
                                     np.array([17.9999, 0.0]), lr=50.0,
                                     epochs=10, seed=0)
        assert -2.0 < result.theta[0] < 18.0

    def test_validation_early_stopping(self):
        problem = exp.lti_problem()
        dataset = sim.generate_dataset(problem.noise, 8, 10, 1, seed=9)
        result = exp.train_empirical(problem, dataset, np.array([7.0, 3.0]),
                                     lr=1e-9, epochs=300, patience=20, seed=0)
        # no meaningful improvement possible: patience ends training early
        assert result.epochs_run <= 25

    def test_ihlqr_gain_solves_riccati(self):
        a, b, q, r = 0.8, 0.1, 5.0, 0.003
        k = exp.ihlqr_gain(a, b, q, r)
        # closed loop stable and stationarity of the Riccati solution
        assert abs(a - b * k) < 1.0
        p = q
        for _ in range(200000):
            p = q + a * a * p - (a * b * p) ** 2 / (r + b * b * p)
        assert k == pytest.approx(a * b * p / (r + b * b * p), rel=1e-9)


class TestMcLogPartition:
    def test_matches_direct_logsumexp(self):
        problem = exp.lti_problem()
        dataset = sim.generate_dataset(problem.noise, 8, 10, 1, seed=1)
        prior = exp.lti_prior(problem)

        def sampler(n, rng):
            return prior.sample(n, rng)

        lam = 5.0
        log_z = exp.mc_log_partition(problem, dataset, sampler, 2048, lam,
                                     chunk=300)
        rng = np.random.default_rng(12345)
        thetas = np.concatenate(
            [sampler(min(300, 2048 - i), rng)
             for i in range(0, 2048, 300)])
        costs = problem.batch_empirical(thetas, dataset)
        from pacsnoc import pacbayes as pb
        assert log_z == pytest.approx(pb.partition_estimate(costs, lam),
                                      rel=1e-9)
