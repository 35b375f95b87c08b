import math
import os
import tempfile

import numpy as np
import pandas as pd

from scipy import stats

from django.test import SimpleTestCase
from django.test import tag

from biot.cheb_basis import ChebBasis
from biot.cheb_basis import CoeffPrior
from biot.cheb_basis import NoisePrior
from biot.exceptions import NonFiniteError
from biot.inference import Adapter
from biot.inference import ChainWriter
from biot.inference import FiniteDifferenceForward
from biot.inference import LinearForward
from biot.inference import MalaKernel
from biot.inference import PosteriorModel
from biot.inference import RandomWalkKernel
from biot.inference import SurrogateForward
from biot.inference import da_step
from biot.inference import evaluate
from biot.inference import leapfrog
from biot.inference import load_snapshot
from biot.inference import make_kernel
from biot.inference import mh_step
from biot.inference import read_chain
from biot.inference import run_chain
from biot.inference import save_snapshot
from biot.pde_fd import Grid
from biot.surrogate import SurrogateNet

from .helpers import CountingTarget
from .helpers import GaussianTarget
from .helpers import correlated_covariance
from .helpers import relative_frobenius
from .helpers import sim_model
from .helpers import standard_errors


class Interrupted(Exception):
    pass


def finite_difference_gradient(function, theta, h=1e-6):
    grad = np.empty(len(theta))
    for i in range(len(theta)):
        shift = np.zeros(len(theta))
        shift[i] = h
        grad[i] = (function(theta + shift) - function(theta - shift)) / (2 * h)
    return grad


class PosteriorModelTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.prior = CoeffPrior.from_moments(np.zeros(3), correlated_covariance(3, 0.4))
        self.matrix = rng.standard_normal((12, 3))
        self.z = rng.standard_normal(12)

    def posterior(self, z=None):
        z = self.z if z is None else z
        return PosteriorModel(self.prior, NoisePrior(), LinearForward(self.matrix), z)

    def test_no_data(self):
        posterior = PosteriorModel(self.prior, NoisePrior(), LinearForward(np.zeros((0, 3))),
                                   [])
        theta = np.array([0.1, 0.2, -0.3, math.log(0.7)])
        expected = (self.prior.log_density(theta[:3]) +
                    NoisePrior().log_density(0.7) + math.log(0.7))
        self.assertAlmostEqual(posterior(theta)[0], expected, places=12)

    def test_perfect_fit(self):
        alpha = np.array([0.5, -0.2, 1.0])
        sigma = 0.3
        posterior = self.posterior(self.matrix @ alpha)
        theta = np.append(alpha, math.log(sigma))
        value, _ = posterior.log_post(theta, jacobian=False)
        likelihood = value - self.prior.log_density(alpha) - NoisePrior().log_density(sigma)
        self.assertAlmostEqual(likelihood, -6.0 * math.log(2.0 * math.pi * sigma ** 2),
                               places=10)

    def test_jacobian_term(self):
        theta = np.array([0.1, 0.0, 0.3, -0.5])
        with_jacobian, _ = self.posterior().log_post(theta)
        without, _ = self.posterior().log_post(theta, jacobian=False)
        self.assertAlmostEqual(with_jacobian - without, -0.5, places=12)

    def test_linear_gradient(self):
        theta = np.array([0.3, -0.1, 0.2, math.log(1.5)])
        for jacobian in (True, False):
            posterior = self.posterior()
            _, grad = posterior.log_post(theta, grad=True, jacobian=jacobian)
            expected = finite_difference_gradient(
                lambda point: posterior.log_post(point, jacobian=jacobian)[0], theta)
            np.testing.assert_allclose(grad, expected, rtol=1e-6, atol=1e-6)

    def test_surrogate_gradient(self):
        basis = ChebBasis(degree=2, T=3600.0, a=0.3, b=1.0)
        rng = np.random.default_rng(1)
        t, x = rng.uniform(0, 3600, 8), rng.uniform(0.3, 1.0, 8)
        net = SurrogateNet(basis, width=8, depth=2, seed=2)
        prior = CoeffPrior.from_moments(np.zeros(6), np.eye(6))
        posterior = PosteriorModel(prior, NoisePrior(), SurrogateForward(net, t, x),
                                   rng.standard_normal(8))
        theta = np.append(rng.standard_normal(6), math.log(0.8))
        _, grad = posterior(theta, grad=True)
        expected = finite_difference_gradient(lambda point: posterior(point)[0], theta)
        np.testing.assert_allclose(grad, expected, rtol=1e-5, atol=1e-6)

    def test_data_order_does_not_matter(self):
        basis = ChebBasis(degree=2, T=3600.0, a=0.3, b=1.0)
        rng = np.random.default_rng(3)
        t, x, z = rng.uniform(0, 3600, 30), rng.uniform(0.3, 1.0, 30), rng.standard_normal(30)
        net = SurrogateNet(basis, width=8, depth=2, seed=4)
        prior = CoeffPrior.from_moments(np.zeros(6), np.eye(6))
        order = rng.permutation(30)
        first = PosteriorModel(prior, NoisePrior(), SurrogateForward(net, t, x), z)
        second = PosteriorModel(prior, NoisePrior(),
                                SurrogateForward(net, t[order], x[order]), z[order])
        theta = np.append(rng.standard_normal(6), math.log(0.5))
        value, _ = first(theta)
        self.assertAlmostEqual(second(theta)[0], value, delta=1e-12 * abs(value))

    def test_non_finite_parameters(self):
        value, grad = self.posterior()(np.array([np.nan, 0.0, 0.0, 0.0]), grad=True)
        self.assertEqual(value, -math.inf)
        self.assertTrue(np.all(np.isnan(grad)))

    def test_finite_difference_forward_counts_solves(self):
        model = sim_model()
        basis = ChebBasis(degree=1, T=3600.0, a=0.3, b=1.0)
        forward = FiniteDifferenceForward(model, basis, Grid.build(model, 11, 10),
                                          [1800.0, 3600.0], [0.5, 0.8])
        posterior = PosteriorModel(CoeffPrior.from_moments(np.zeros(3), np.eye(3)),
                                   NoisePrior(), forward, [0.5, 0.8])
        theta = np.array([10.0, 0.0, 0.0, math.log(0.5)])
        posterior(theta)
        posterior(theta)
        self.assertEqual(forward.calls, 2)


class FailingTarget(object):
    """Finite only at the origin."""

    def __call__(self, theta, grad=False):
        return (0.0 if np.all(theta == 0.0) else -math.inf), None


class MetropolisTests(SimpleTestCase):

    def test_zero_step_always_accepts(self):
        target = GaussianTarget(np.zeros(2), np.eye(2))
        kernel = RandomWalkKernel(0.0, np.eye(2))
        state = evaluate(target, [0.3, -0.2])
        rng = np.random.default_rng(0)
        for _ in range(20):
            state, accepted, prob = mh_step(state, kernel, target, rng)
            self.assertTrue(accepted)
            self.assertEqual(prob, 1.0)

    def test_impossible_proposals_are_rejected(self):
        target = FailingTarget()
        kernel = RandomWalkKernel(1.0, np.eye(2))
        start = evaluate(target, np.zeros(2))
        rng = np.random.default_rng(1)
        for _ in range(20):
            state, accepted, prob = mh_step(start, kernel, target, rng)
            self.assertFalse(accepted)
            self.assertEqual(prob, 0.0)
            self.assertIs(state, start)

    def test_unknown_scheme(self):
        with self.assertRaises(ValueError):
            make_kernel('gibbs', np.eye(2))

    def test_default_steps(self):
        self.assertAlmostEqual(make_kernel('rwmh', np.eye(4)).step, 1.19)
        kernel = make_kernel('hmc', np.eye(16), n_leapfrog=4)
        self.assertAlmostEqual(kernel.step, 0.25)
        self.assertEqual(kernel.n_leapfrog, 4)

    def test_mala_acceptance_with_exact_preconditioner(self):
        covariance = correlated_covariance(3, 0.8, [1.0, 5.0, 0.2])
        target = GaussianTarget(np.ones(3), covariance)
        result = run_chain(target, MalaKernel(0.3, covariance), np.ones(3), 0, 2000,
                           np.random.default_rng(2))
        self.assertGreater(result.chain.acceptance_rate(), 0.9)

    def test_start_must_be_finite(self):
        with self.assertRaises(NonFiniteError):
            run_chain(FailingTarget(), RandomWalkKernel(1.0, np.eye(2)), np.ones(2), 10, 10,
                      np.random.default_rng(0))


class LeapfrogTests(SimpleTestCase):

    def setUp(self):
        self.covariance = correlated_covariance(3, 0.5, [1.0, 2.0, 0.5])
        self.target = GaussianTarget(np.zeros(3), self.covariance)
        self.mass_inverse = np.diag([0.5, 1.5, 1.0])

    def integrate(self, theta, p, step=0.05, n_steps=25):
        _, grad = self.target(theta, grad=True)
        return leapfrog(theta, p, grad, self.target, step, n_steps, self.mass_inverse)

    def test_reversibility(self):
        theta0, p0 = np.array([0.4, -1.0, 0.2]), np.array([1.0, 0.3, -0.7])
        theta1, p1, _, _ = self.integrate(theta0, p0)
        theta2, p2, _, _ = self.integrate(theta1, -p1)
        np.testing.assert_allclose(theta2, theta0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(-p2, p0, rtol=0, atol=1e-10)

    def test_volume_preservation(self):
        point = np.array([0.4, -1.0, 0.2, 1.0, 0.3, -0.7])

        def flow(z):
            theta, p, _, _ = self.integrate(z[:3], z[3:])
            return np.concatenate([theta, p])

        h = 1e-5
        jacobian = np.empty((6, 6))
        for i in range(6):
            shift = np.zeros(6)
            shift[i] = h
            jacobian[:, i] = (flow(point + shift) - flow(point - shift)) / (2 * h)
        self.assertAlmostEqual(np.linalg.det(jacobian), 1.0, delta=1e-6)

    def test_energy_error_is_second_order(self):
        target = GaussianTarget(np.zeros(1), np.eye(1))

        def energy_error(step, n_steps):
            theta0, p0 = np.array([1.0]), np.array([0.0])
            value0, grad0 = target(theta0, grad=True)
            _, p, value, _ = leapfrog(theta0, p0, grad0, target, step, n_steps, np.eye(1))
            return abs((-value + 0.5 * p @ p) - (-value0 + 0.5 * p0 @ p0))

        ratio = energy_error(0.1, 10) / energy_error(0.05, 20)
        self.assertGreaterEqual(ratio, 3.5)
        self.assertLessEqual(ratio, 4.5)


class AdapterTests(SimpleTestCase):

    def test_step_unchanged_at_target_rate(self):
        kernel = RandomWalkKernel(0.8, np.eye(2))
        adapter = Adapter(kernel, refresh=0)
        for _ in range(50):
            adapter.update(np.zeros(2), kernel.target_rate)
        self.assertAlmostEqual(kernel.step, 0.8, places=12)

    def test_step_shrinks_on_rejection(self):
        kernel = RandomWalkKernel(0.8, np.eye(2))
        adapter = Adapter(kernel, refresh=0)
        steps = []
        for _ in range(10):
            adapter.update(np.zeros(2), 0.0)
            steps.append(kernel.step)
        self.assertTrue(np.all(np.diff(steps) < 0))
        self.assertLess(steps[0], 0.8)

    def test_frozen_adapter(self):
        kernel = RandomWalkKernel(0.8, np.eye(2))
        adapter = Adapter(kernel)
        adapter.freeze()
        adapter.update(np.ones(2), 0.0)
        self.assertEqual(kernel.step, 0.8)
        self.assertEqual(adapter.count, 0)

    def test_learns_the_covariance(self):
        covariance = correlated_covariance(2, 0.8, [1.0, 3.0])
        target = GaussianTarget(np.zeros(2), covariance)
        kernel = make_kernel('rwmh', np.eye(2))
        run_chain(target, kernel, np.zeros(2), 10000, 0, np.random.default_rng(3),
                  adapter=Adapter(kernel, refresh=500))
        self.assertLess(relative_frobenius(kernel.covariance, covariance), 0.2)

    def test_stuck_warmup_keeps_a_usable_preconditioner(self):
        kernel = RandomWalkKernel(0.8, np.eye(3))
        adapter = Adapter(kernel, refresh=100, shrinkage=0.1)
        for _ in range(500):
            adapter.update(np.ones(3), 0.0)
        np.testing.assert_allclose(kernel.covariance, 0.1 * np.eye(3), atol=1e-8)
        self.assertGreater(np.min(np.diag(kernel.factor)), 0.3)

    def test_snapshot_round_trip(self):
        kernel = RandomWalkKernel(0.5, np.eye(2))
        adapter = Adapter(kernel, refresh=3)
        for theta in np.random.default_rng(4).standard_normal((7, 2)):
            adapter.update(theta, 0.1)
        other = Adapter(RandomWalkKernel(1.0, np.eye(2)))
        other.restore(adapter.snapshot())
        self.assertEqual(other.kernel.step, kernel.step)
        np.testing.assert_array_equal(other.kernel.factor, kernel.factor)
        np.testing.assert_array_equal(other.m2, adapter.m2)
        self.assertEqual(other.count, 7)


def check_moments(test, samples, mean, covariance, tolerance=0.15):
    errors = np.abs(samples.mean(axis=0) - mean)
    test.assertTrue(np.all(errors < 4.0 * standard_errors(samples)),
                    'mean errors %s' % errors)
    test.assertLess(relative_frobenius(np.cov(samples.T), covariance), tolerance)


class SamplerMomentTests(SimpleTestCase):
    """Chains on a correlated Gaussian reproduce its first two moments."""

    def sample(self, scheme, dim, warmup, samples, seed, **kwargs):
        covariance = correlated_covariance(dim, 0.6, np.linspace(0.5, 2.0, dim))
        mean = np.linspace(-1.0, 1.0, dim)
        kernel = make_kernel(scheme, np.eye(dim), **kwargs)
        result = run_chain(GaussianTarget(mean, covariance), kernel, mean, warmup,
                           samples, np.random.default_rng(seed),
                           adapter=Adapter(kernel, refresh=500), log_every=0)
        check_moments(self, result.chain.samples(), mean, covariance)
        return result

    def test_random_walk(self):
        result = self.sample('rwmh', 3, 2000, 20000, 10)
        self.assertEqual(len(result.chain), 1 + 2000 + 20000)

    def test_langevin(self):
        self.sample('mala', 3, 2000, 20000, 11)

    def test_hamiltonian(self):
        self.sample('hmc', 3, 1000, 5000, 12, n_leapfrog=10)

    @tag('slow')
    def test_random_walk_ten_dimensions(self):
        self.sample('rwmh', 10, 20000, 100000, 13)

    @tag('slow')
    def test_langevin_ten_dimensions(self):
        self.sample('mala', 10, 20000, 100000, 14)

    @tag('slow')
    def test_hamiltonian_ten_dimensions(self):
        self.sample('hmc', 10, 5000, 20000, 15, n_leapfrog=20)


class ConstantTarget(object):

    def __call__(self, theta, grad=False):
        return 0.0, None


class BrokenTarget(object):

    def __call__(self, theta, grad=False):
        raise NonFiniteError('solver blew up')


class DelayedAcceptanceTests(SimpleTestCase):

    def setUp(self):
        self.covariance = correlated_covariance(3, 0.5, [1.0, 0.7, 1.5])
        self.mean = np.array([0.5, 0.0, -0.5])
        self.target = GaussianTarget(self.mean, self.covariance)

    def test_identical_models_never_reject_at_stage_two(self):
        kernel = make_kernel('rwmh', self.covariance)
        result = run_chain(self.target, kernel, self.mean, 100, 500,
                           np.random.default_rng(0), fine=self.target)
        chain = result.chain
        self.assertEqual(chain.stage2, chain.stage1)
        self.assertEqual(chain.stage2_given_stage1(), 1.0)

    def test_fine_evaluations_follow_stage_one(self):
        fine = CountingTarget(GaussianTarget(self.mean, 1.2 * self.covariance))
        kernel = make_kernel('rwmh', self.covariance)
        result = run_chain(self.target, kernel, self.mean, 100, 500,
                           np.random.default_rng(1), fine=fine)
        chain = result.chain
        stage1 = np.array(chain.stage1)[np.array(chain.phases) == 'sample']
        self.assertEqual(fine.calls - 1, int(stage1.sum()))
        self.assertEqual(chain.fine_evaluations, fine.calls - 1)
        self.assertGreater(chain.fine_evaluations, 0)
        self.assertLess(chain.fine_evaluations, 500)

    def test_fine_failure_rejects_with_warning(self):
        kernel = RandomWalkKernel(1.0, np.eye(2))
        state = evaluate(ConstantTarget(), np.zeros(2))
        with self.assertLogs('biot.inference', 'WARNING'):
            outcome = da_step(state, 0.0, kernel, ConstantTarget(), BrokenTarget(),
                              np.random.default_rng(2))
        self.assertTrue(outcome.stage1)
        self.assertFalse(outcome.stage2)
        self.assertTrue(outcome.fine_evaluated)
        self.assertIs(outcome.state, state)
        self.assertEqual(outcome.fine_value, 0.0)

    def test_samples_follow_the_fine_target(self):
        coarse = GaussianTarget(self.mean + 0.3, 1.5 * self.covariance)
        kernel = make_kernel('rwmh', np.eye(3))
        result = run_chain(coarse, kernel, self.mean, 2000, 20000,
                           np.random.default_rng(3), fine=self.target,
                           adapter=Adapter(kernel, refresh=500), log_every=0)
        check_moments(self, result.chain.samples(), self.mean, self.covariance)

    def test_hmc_stage_one_follows_the_fine_target(self):
        coarse = GaussianTarget(self.mean + 0.3, 1.5 * self.covariance)
        fine = CountingTarget(self.target)
        kernel = make_kernel('hmc', np.eye(3), n_leapfrog=10)
        result = run_chain(coarse, kernel, self.mean, 1000, 5000,
                           np.random.default_rng(4), fine=fine,
                           adapter=Adapter(kernel, refresh=200), log_every=0)
        chain = result.chain
        stage1 = np.array(chain.stage1)[np.array(chain.phases) == 'sample']
        self.assertEqual(chain.fine_evaluations, int(stage1.sum()))
        self.assertEqual(fine.calls - 1, chain.fine_evaluations)
        self.assertLess(chain.acceptance_rate('sample'), 1.0)
        check_moments(self, chain.samples(), self.mean, self.covariance)

    @tag('slow')
    def test_transition_counts_are_symmetric(self):
        fine = GaussianTarget([0.0], [[1.0]])
        coarse = GaussianTarget([0.3], [[2.25]])
        kernel = make_kernel('hmc', np.array([[2.25]]), step=0.4, n_leapfrog=5)
        rng = np.random.default_rng(11)
        state = evaluate(coarse, rng.standard_normal(1), grad=True)
        fine_value, _ = fine(state.theta)
        path = np.empty(100000)
        for i in range(len(path)):
            outcome = da_step(state, fine_value, kernel, coarse, fine, rng)
            state, fine_value = outcome.state, outcome.fine_value
            path[i] = state.theta[0]
        # Pairs ten steps apart are close to independent draws of a transition.
        bins = np.digitize(path, [-0.43, 0.43])
        counts = np.zeros((3, 3))
        np.add.at(counts, (bins[:-1:10], bins[1::10]), 1)
        upper = np.triu_indices(3, 1)
        forward, backward = counts[upper], counts.T[upper]
        statistic = np.sum((forward - backward) ** 2 / (forward + backward))
        self.assertGreater(stats.chi2.sf(statistic, len(forward)), 0.01)


class ChainRecordTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.target = GaussianTarget(np.array([1.0, -1.0]),
                                     correlated_covariance(2, 0.7, [1.0, 2.0]))

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_round_trip(self):
        writer = ChainWriter(self.path('chain.csv'), 'f' * 64, every=7)
        result = run_chain(self.target, make_kernel('mala', np.eye(2)), np.zeros(2),
                           30, 40, np.random.default_rng(0), writer=writer)
        chain, config_hash = read_chain(self.path('chain.csv'))
        self.assertEqual(config_hash, 'f' * 64)
        pd.testing.assert_frame_equal(chain.to_frame(), result.chain.to_frame())
        self.assertEqual(chain.phases.count('warmup'), 30)

    def test_missing_header(self):
        with open(self.path('bad.csv'), 'w') as fobj:
            fobj.write('iteration,theta_0\n0,1.0\n')
        with self.assertRaises(ValueError):
            read_chain(self.path('bad.csv'))

    def run_recorded(self, name, samples, chain=None, snapshot=None):
        kernel = make_kernel('rwmh', np.eye(2))
        adapter = Adapter(kernel, refresh=20)
        rng = np.random.default_rng(5)
        snapshot_path = self.path(name + '.npz')
        if snapshot is not None:
            load_snapshot(snapshot, adapter, rng)
        writer = ChainWriter(self.path(name + '.csv'), 'h', every=10,
                             on_flush=lambda: save_snapshot(snapshot_path, adapter, rng))
        return run_chain(self.target, kernel, np.zeros(2), 50, samples, rng,
                         adapter=adapter, writer=writer, chain=chain)

    def test_resumed_chain_matches_uninterrupted_chain(self):
        full = self.run_recorded('full', 100)
        self.run_recorded('part', 37)
        chain, _ = read_chain(self.path('part.csv'))
        self.assertEqual(len(chain), 1 + 50 + 37)
        resumed = self.run_recorded('part', 100, chain=chain,
                                    snapshot=self.path('part.npz'))
        np.testing.assert_array_equal(resumed.chain.array, full.chain.array)
        pd.testing.assert_frame_equal(read_chain(self.path('part.csv'))[0].to_frame(),
                                      read_chain(self.path('full.csv'))[0].to_frame())

    def run_refined(self, name, chain=None, interrupt=None):
        target = GaussianTarget(np.zeros(2), np.eye(2))
        kernel = make_kernel('mala', np.eye(2))
        adapter = Adapter(kernel, refresh=20)
        rng, stream = np.random.default_rng(5), np.random.default_rng(6)
        snapshot_path = self.path(name + '.npz')
        mean_path = self.path(name + '_mean.npy')
        if chain is not None:
            load_snapshot(snapshot_path, adapter, rng, {'refine': stream})
            target.mean = np.load(mean_path)

        def refine(_):
            target.mean = target.mean + 0.1 * stream.standard_normal(2)
            return True

        def on_flush():
            np.save(mean_path, target.mean)
            save_snapshot(snapshot_path, adapter, rng, {'refine': stream})
            if interrupt and writer.written > interrupt:
                raise Interrupted()

        writer = ChainWriter(self.path(name + '.csv'), 'h', every=10, on_flush=on_flush)
        return run_chain(target, kernel, np.zeros(2), 60, 30, rng, refine=refine,
                         refine_every=15, adapter=adapter, writer=writer, chain=chain)

    def test_resume_during_refined_warmup(self):
        full = self.run_refined('full')
        with self.assertRaises(Interrupted):
            self.run_refined('part', interrupt=40)
        chain, _ = read_chain(self.path('part.csv'))
        self.assertEqual(chain.phases.count('warmup'), 40)
        resumed = self.run_refined('part', chain=chain)
        np.testing.assert_array_equal(resumed.chain.array, full.chain.array)
        pd.testing.assert_frame_equal(read_chain(self.path('part.csv'))[0].to_frame(),
                                      read_chain(self.path('full.csv'))[0].to_frame())

    def test_snapshot_without_refinement_stream(self):
        kernel = make_kernel('rwmh', np.eye(2))
        adapter = Adapter(kernel)
        save_snapshot(self.path('s.npz'), adapter, np.random.default_rng(0))
        with self.assertRaises(ValueError):
            load_snapshot(self.path('s.npz'), adapter, np.random.default_rng(0),
                          {'refine': np.random.default_rng(1)})
