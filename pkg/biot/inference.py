"""Posterior densities, MCMC kernels, adaptation and delayed acceptance.

The sampled vector is theta = (alpha, eta) with eta = log sigma. Every target
is a callable `target(theta, grad=False) -> (log density, gradient or None)`.

"""

import json
import logging
import math

from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from scipy.linalg import solve_triangular

from .cheb_basis import repair_cholesky
from .exceptions import BiotError
from .exceptions import NonFiniteError
from .pde_fd import BiotField
from .pde_fd import solve_fd
from .surrogate import as_tensor


log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class SurrogateForward(object):
    """Surrogate predictions u(t_n, x_n, alpha) at the data points."""

    def __init__(self, net, t, x):
        self.net = net
        self.t = as_tensor(t).reshape(-1)
        self.x = as_tensor(x).reshape(-1)

    def __call__(self, alpha):
        with torch.no_grad():
            return self.net(self.t, self.x, as_tensor(alpha)).numpy()

    def with_jacobian(self, alpha):
        """Return the predictions and their (N, M) Jacobian in alpha."""
        coeffs = as_tensor(alpha).expand(len(self.t), -1).clone().requires_grad_(True)
        u = self.net(self.t, self.x, coeffs)
        jacobian, = torch.autograd.grad(u.sum(), coeffs)
        return u.detach().numpy(), jacobian.numpy()


class FiniteDifferenceForward(object):
    """Finite-difference predictions; counts every solve in `calls`."""

    def __init__(self, model, basis, grid, t, x):
        self.model = model
        self.basis = basis
        self.grid = grid
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.calls = 0

    def __call__(self, alpha):
        self.calls += 1
        field = solve_fd(self.model, BiotField.from_coeffs(self.basis, alpha),
                         self.grid)
        return field.evaluate_at(self.t, self.x)

    def with_jacobian(self, alpha):
        raise NotImplementedError('Finite-difference gradients are not provided')


class LinearForward(object):
    """Affine forward map u = offset + A alpha."""

    def __init__(self, matrix, offset=0.0):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.offset = np.broadcast_to(np.asarray(offset, dtype=float),
                                      self.matrix.shape[:1])

    def __call__(self, alpha):
        return self.offset + self.matrix @ np.asarray(alpha, dtype=float)

    def with_jacobian(self, alpha):
        return self(alpha), self.matrix


class PosteriorModel(object):
    """Posterior over (alpha, log sigma) given point observations.

    Arguments:
        prior         a `CoeffPrior` over alpha
        noise_prior   a `NoisePrior` over sigma
        forward       forward map alpha -> predictions at the data points
        z             observed values (may be empty)

    """

    def __init__(self, prior, noise_prior, forward, z):
        self.prior = prior
        self.noise_prior = noise_prior
        self.forward = forward
        self.z = np.asarray(z, dtype=float).reshape(-1)

    @property
    def dim(self):
        return self.prior.size + 1

    def __call__(self, theta, grad=False):
        return self.log_post(theta, grad=grad)

    def log_post(self, theta, grad=False, jacobian=True):
        """Log posterior density, up to the evidence, and optionally its gradient.

        With `jacobian` the density is the one of (alpha, log sigma), i.e. it
        includes the log-transform term log sigma. Non-finite values are
        reported as -inf.

        """
        theta = np.asarray(theta, dtype=float)
        try:
            return self._log_post(theta, grad, jacobian)
        except NonFiniteError as exc:
            log.debug('Non-finite posterior at a proposal: %s', exc)
        except FloatingPointError as exc:
            log.debug('Floating point error in the posterior: %s', exc)
        return -math.inf, (np.full(self.dim, np.nan) if grad else None)

    def _log_post(self, theta, grad, jacobian):
        if not np.all(np.isfinite(theta)):
            raise NonFiniteError('Non-finite parameters')
        alpha, eta = theta[:-1], theta[-1]
        sigma = math.exp(eta)
        value = self.prior.log_density(alpha) + self.noise_prior.log_density(sigma)
        if jacobian:
            value += eta
        n = len(self.z)
        residual = np.zeros(0)
        if n:
            if grad:
                u, J = self.forward.with_jacobian(alpha)
            else:
                u = self.forward(alpha)
            residual = self.z - u
            value += (-0.5 * n * (LOG_2PI + 2.0 * eta) -
                      0.5 * residual @ residual / sigma ** 2)
        if not np.isfinite(value):
            raise NonFiniteError('Non-finite log posterior')
        if not grad:
            return value, None
        grad_alpha = self.prior.grad_log_density(alpha)
        grad_eta = self.noise_prior.grad_log_density(sigma) * sigma
        if jacobian:
            grad_eta += 1.0
        if n:
            grad_alpha = grad_alpha + J.T @ residual / sigma ** 2
            grad_eta += -n + residual @ residual / sigma ** 2
        return value, np.append(grad_alpha, grad_eta)


@dataclass
class ChainState:
    theta: np.ndarray
    log_density: float
    grad: np.ndarray = None


def evaluate(target, theta, grad=False):
    value, gradient = target(np.asarray(theta, dtype=float), grad=grad)
    return ChainState(theta=np.asarray(theta, dtype=float), log_density=value,
                      grad=gradient)


class Kernel(object):
    """A proposal with a step size and a covariance preconditioner."""

    name = None
    target_rate = None
    needs_grad = False

    def __init__(self, step, covariance):
        self.step = float(step)
        self.set_covariance(covariance)

    def set_covariance(self, covariance):
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        self.covariance, self.factor, _ = repair_cholesky(covariance)

    def propose(self, state, target, rng):
        """Return (proposed state, log acceptance ratio)."""
        raise NotImplementedError()


class RandomWalkKernel(Kernel):
    """Gaussian random walk with covariance step^2 C."""

    name = 'rwmh'
    target_rate = 0.234

    def propose(self, state, target, rng):
        z = rng.standard_normal(len(state.theta))
        proposal = evaluate(target, state.theta + self.step * self.factor @ z)
        return proposal, proposal.log_density - state.log_density


class MalaKernel(Kernel):
    """Preconditioned Langevin proposal with the Hastings correction."""

    name = 'mala'
    target_rate = 0.574
    needs_grad = True

    def _drift(self, state):
        return state.theta + 0.5 * self.step ** 2 * self.covariance @ state.grad

    def _log_q(self, to, frm):
        # Unnormalised; the normalising constant cancels in the ratio.
        diff = solve_triangular(self.factor, to.theta - self._drift(frm), lower=True)
        return -0.5 * diff @ diff / self.step ** 2

    def propose(self, state, target, rng):
        z = rng.standard_normal(len(state.theta))
        point = self._drift(state) + self.step * self.factor @ z
        proposal = evaluate(target, point, grad=True)
        if not np.isfinite(proposal.log_density):
            return proposal, -math.inf
        return proposal, (proposal.log_density - state.log_density +
                          self._log_q(state, proposal) - self._log_q(proposal, state))


def leapfrog(theta, p, grad, target, step, n_steps, covariance):
    """Integrate Hamilton's equations with the mass matrix inv(covariance).

    Returns (theta, p, log density, gradient); the log density is -inf when
    the trajectory left the region where the target is finite.

    """
    p = p + 0.5 * step * grad
    value = None
    for i in range(n_steps):
        theta = theta + step * covariance @ p
        value, grad = target(theta, grad=True)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return theta, p, -math.inf, grad
        if i < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return theta, p, value, grad


@dataclass(frozen=True)
class HmcConfig:
    n_leapfrog: int = 40
    step: float = 0.1
    target_rate: float = 0.65

    def __post_init__(self):
        if self.n_leapfrog < 1:
            raise ValueError('HMC needs at least one leapfrog step')
        if not self.step > 0:
            raise ValueError('The HMC step size must be positive')


class HmcKernel(Kernel):
    """Hamiltonian Monte Carlo with a dense mass matrix inv(C)."""

    name = 'hmc'
    needs_grad = True

    def __init__(self, config, covariance):
        self.n_leapfrog = config.n_leapfrog
        self.target_rate = config.target_rate
        super(HmcKernel, self).__init__(config.step, covariance)

    def kinetic(self, p):
        return 0.5 * p @ self.covariance @ p

    def draw_momentum(self, rng, dim):
        # p = L^-T z has covariance (L L^T)^-1 = C^-1.
        return solve_triangular(self.factor, rng.standard_normal(dim),
                                lower=True, trans='T')

    def propose(self, state, target, rng):
        p = self.draw_momentum(rng, len(state.theta))
        theta, p_new, value, grad = leapfrog(state.theta, p, state.grad, target,
                                             self.step, self.n_leapfrog,
                                             self.covariance)
        proposal = ChainState(theta=theta, log_density=value, grad=grad)
        if not np.isfinite(value):
            return proposal, -math.inf
        h_initial = -state.log_density + self.kinetic(p)
        h_final = -value + self.kinetic(p_new)
        return proposal, h_initial - h_final


KERNELS = {
    'rwmh': RandomWalkKernel,
    'mala': MalaKernel,
}


def make_kernel(scheme, covariance, step=None, n_leapfrog=40):
    """Build a kernel by scheme name with a default step for the dimension."""
    dim = np.atleast_2d(covariance).shape[0]
    if scheme == 'hmc':
        step = step or 1.0 / dim ** 0.25 / n_leapfrog ** 0.5
        return HmcKernel(HmcConfig(n_leapfrog=n_leapfrog, step=step), covariance)
    if scheme not in KERNELS:
        raise ValueError('Unknown sampling scheme "%s"' % scheme)
    defaults = {'rwmh': 2.38 / dim ** 0.5, 'mala': 1.65 / dim ** (1.0 / 6)}
    return KERNELS[scheme](step or defaults[scheme], covariance)


def acceptance_probability(log_ratio):
    if not np.isfinite(log_ratio):
        return 1.0 if log_ratio > 0 else 0.0
    return math.exp(min(0.0, log_ratio))


def mh_step(state, kernel, target, rng):
    """One Metropolis-Hastings transition.

    Returns (next state, accepted, acceptance probability); a rejected
    proposal repeats `state`.

    """
    proposal, log_ratio = kernel.propose(state, target, rng)
    prob = acceptance_probability(log_ratio)
    if math.log1p(-rng.random()) < log_ratio:
        return proposal, True, prob
    return state, False, prob


@dataclass
class DaOutcome:
    state: ChainState
    fine_value: float
    stage1: bool
    stage2: bool
    prob1: float
    fine_evaluated: bool


def da_step(state, fine_value, kernel, coarse, fine, rng):
    """One delayed-acceptance transition.

    Stage 1 screens the proposal with `kernel` under the coarse target. Only
    a stage-1 acceptance triggers the single fine evaluation, accepted with
    probability min(1, fine(p) coarse(s) / (fine(s) coarse(p))); the fine
    value at the current state is passed in and returned updated.

    """
    proposal, log_ratio = kernel.propose(state, coarse, rng)
    prob1 = acceptance_probability(log_ratio)
    if not math.log1p(-rng.random()) < log_ratio:
        return DaOutcome(state, fine_value, False, False, prob1, False)
    try:
        fine_proposal, _ = fine(proposal.theta)
    except BiotError as exc:
        log.warning('Fine model failed at a proposal, rejecting: %r', exc)
        fine_proposal = -math.inf
    if not np.isfinite(fine_proposal):
        log.warning('Fine log density is not finite at a proposal, rejecting')
        return DaOutcome(state, fine_value, True, False, prob1, True)
    log_ratio2 = (fine_proposal - fine_value) - (proposal.log_density -
                                                 state.log_density)
    if math.log1p(-rng.random()) < log_ratio2:
        return DaOutcome(proposal, fine_proposal, True, True, prob1, True)
    return DaOutcome(state, fine_value, True, False, prob1, True)


class Adapter(object):
    """Warm-up adaptation of a kernel's step size and preconditioner.

    The log step follows a Robbins-Monro recursion with gain i^-0.7 toward
    the kernel's target acceptance rate. Every `refresh` iterations the
    preconditioner is replaced by the running covariance, shrunk toward the
    identity with weight `shrinkage` so that it stays positive-definite even
    when every warm-up proposal was rejected.

    """

    def __init__(self, kernel, gain_exponent=0.7, refresh=500, shrinkage=0.1,
                 target_rate=None):
        self.kernel = kernel
        self.target_rate = target_rate or kernel.target_rate
        self.gain_exponent = gain_exponent
        self.refresh = refresh
        self.shrinkage = shrinkage
        self.count = 0
        self.mean = None
        self.m2 = None
        self.frozen = False

    def update(self, theta, accept_prob):
        if self.frozen:
            return
        self.count += 1
        gain = self.count ** -self.gain_exponent
        log_step = math.log(self.kernel.step) + gain * (accept_prob - self.target_rate)
        self.kernel.step = math.exp(log_step)

        theta = np.asarray(theta, dtype=float)
        if self.mean is None:
            self.mean = np.zeros_like(theta)
            self.m2 = np.zeros((len(theta), len(theta)))
        delta = theta - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + np.outer(delta, theta - self.mean)
        if self.refresh and self.count % self.refresh == 0 and self.count > 1:
            self.kernel.set_covariance(self.regularised_covariance())
            log.info('Refreshed %s preconditioner after %d iterations, step %.4g',
                     self.kernel.name, self.count, self.kernel.step)

    def regularised_covariance(self):
        sample = self.m2 / (self.count - 1)
        return (1.0 - self.shrinkage) * sample + self.shrinkage * np.eye(len(sample))

    def freeze(self):
        self.frozen = True

    def snapshot(self):
        return {
            'step': self.kernel.step,
            'covariance': self.kernel.covariance,
            'factor': self.kernel.factor,
            'count': self.count,
            'mean': self.mean if self.mean is not None else np.zeros(0),
            'm2': self.m2 if self.m2 is not None else np.zeros((0, 0)),
            'frozen': self.frozen,
        }

    def restore(self, snapshot):
        self.kernel.step = float(snapshot['step'])
        # Restored verbatim, the stored pair is already repaired.
        self.kernel.covariance = np.asarray(snapshot['covariance'], dtype=float)
        self.kernel.factor = np.asarray(snapshot['factor'], dtype=float)
        self.count = int(snapshot['count'])
        self.mean = np.asarray(snapshot['mean']) if self.count else None
        self.m2 = np.asarray(snapshot['m2']) if self.count else None
        self.frozen = bool(snapshot['frozen'])


class Chain(object):
    """States theta_0..theta_n with log densities and per-iteration flags."""

    def __init__(self, state, phase='init', fine_value=np.nan):
        self.thetas = [state.theta]
        self.log_coarse = [state.log_density]
        self.log_fine = [fine_value]
        self.stage1 = [True]
        self.stage2 = [True]
        self.phases = [phase]
        self.fine_evaluations = 0

    def __len__(self):
        return len(self.thetas)

    def append(self, theta, log_coarse, stage1, stage2=None, log_fine=np.nan,
               phase='sample'):
        self.thetas.append(theta)
        self.log_coarse.append(log_coarse)
        self.log_fine.append(log_fine)
        self.stage1.append(stage1)
        # Without a second stage, stage 2 mirrors stage 1.
        self.stage2.append(stage1 if stage2 is None else stage2)
        self.phases.append(phase)

    @property
    def array(self):
        return np.array(self.thetas)

    def samples(self, phase='sample'):
        mask = np.array(self.phases) == phase
        return self.array[mask]

    def acceptance_rate(self, phase='sample', stage=2):
        mask = np.array(self.phases) == phase
        if not mask.any():
            return float('nan')
        flags = np.array(self.stage2 if stage == 2 else self.stage1)
        return float(flags[mask].mean())

    def stage2_given_stage1(self, phase='sample'):
        mask = np.array(self.phases) == phase
        s1 = np.array(self.stage1)[mask]
        s2 = np.array(self.stage2)[mask]
        return float(s2[s1].mean()) if s1.any() else float('nan')

    def to_frame(self, start=0):
        thetas = self.array[start:]
        frame = pd.DataFrame(thetas, columns=theta_columns(thetas.shape[1]))
        frame.insert(0, 'iteration', np.arange(start, len(self)))
        frame['log_coarse'] = self.log_coarse[start:]
        frame['log_fine'] = self.log_fine[start:]
        frame['stage1'] = np.array(self.stage1[start:], dtype=int)
        frame['stage2'] = np.array(self.stage2[start:], dtype=int)
        frame['phase'] = self.phases[start:]
        return frame

    @classmethod
    def from_frame(cls, frame):
        columns = [c for c in frame.columns if c.startswith('theta_')]
        chain = cls.__new__(cls)
        chain.thetas = list(frame[columns].to_numpy())
        chain.log_coarse = list(frame['log_coarse'])
        chain.log_fine = list(frame['log_fine'])
        chain.stage1 = list(frame['stage1'].astype(bool))
        chain.stage2 = list(frame['stage2'].astype(bool))
        chain.phases = list(frame['phase'])
        chain.fine_evaluations = 0
        return chain


def theta_columns(dim):
    return ['theta_%d' % i for i in range(dim)]


class ChainWriter(object):
    """Append-only CSV record of a chain, flushed every `every` iterations.

    `on_flush`, when given, is called after every flush so that adaptation
    snapshots stay in step with the record.

    """

    def __init__(self, path, config_hash, every=100, on_flush=None):
        self.path = path
        self.config_hash = config_hash
        self.every = every
        self.on_flush = on_flush
        self.written = 0

    def open(self, chain, resume=False):
        if resume:
            self.written = len(chain)
            return
        with open(self.path, 'w') as fobj:
            fobj.write('# config_hash: %s\n' % self.config_hash)
        chain.to_frame(0).iloc[:0].to_csv(self.path, mode='a', index=False)
        self.written = 0
        self.flush(chain)

    def maybe_flush(self, chain):
        if len(chain) - self.written >= self.every:
            self.flush(chain)

    def flush(self, chain):
        if len(chain) <= self.written:
            return
        chain.to_frame(self.written).to_csv(self.path, mode='a', header=False,
                                            index=False, float_format='%.17g')
        self.written = len(chain)
        if self.on_flush is not None:
            self.on_flush()


def read_chain(path):
    """Read a chain record; returns (Chain, config hash)."""
    with open(path) as fobj:
        first = fobj.readline().strip()
    if not first.startswith('# config_hash:'):
        raise ValueError('%s has no config hash header' % path)
    frame = pd.read_csv(path, comment='#', float_precision='round_trip')
    return Chain.from_frame(frame), first.split(':', 1)[1].strip()


def save_snapshot(path, adapter, rng, streams=None):
    """Write the adapter state and generator states next to a chain record.

    `streams` maps names to further generators consumed while sampling,
    such as the one drawing online refinement batches.

    """
    snapshot = adapter.snapshot()
    snapshot['rng'] = json.dumps(rng.bit_generator.state)
    for name, stream in (streams or {}).items():
        snapshot['rng_%s' % name] = json.dumps(stream.bit_generator.state)
    np.savez(path, **snapshot)


def load_snapshot(path, adapter, rng, streams=None):
    with np.load(path) as data:
        snapshot = {key: data[key] for key in data.files}
    adapter.restore(snapshot)
    rng.bit_generator.state = json.loads(str(snapshot['rng']))
    for name, stream in (streams or {}).items():
        key = 'rng_%s' % name
        if key not in snapshot:
            raise ValueError('%s has no state for the %s stream' % (path, name))
        stream.bit_generator.state = json.loads(str(snapshot[key]))


@dataclass
class ChainResult:
    chain: Chain
    adapter: Adapter
    state: ChainState


def run_chain(target, kernel, theta0, warmup, samples, rng, fine=None,
              refine=None, refine_every=500, adapter=None, writer=None,
              chain=None, log_every=1000):
    """Run warm-up with adaptation, freeze it, then sample.

    Arguments:
        target        coarse (or only) target density
        kernel        proposal kernel, adapted in place during warm-up
        theta0        starting point; ignored when continuing `chain`
        fine          optional fine target, switching sampling to delayed
                      acceptance
        refine        optional callable invoked every `refine_every` warm-up
                      iterations with the chain; returning True means the
                      target changed and the current state is re-evaluated
        writer        optional `ChainWriter`
        chain         a previously recorded chain to continue

    """
    adapter = adapter or Adapter(kernel)
    grad = kernel.needs_grad
    resume = chain is not None
    if resume:
        theta0 = chain.thetas[-1]
    state = evaluate(target, theta0, grad=grad)
    if not np.isfinite(state.log_density):
        raise NonFiniteError('Target is not finite at the starting point')
    if not resume:
        chain = Chain(state, phase='init')
    if writer is not None:
        writer.open(chain, resume=resume)

    done_warmup = sum(1 for phase in chain.phases if phase == 'warmup')
    for i in range(done_warmup + 1, warmup + 1):
        state, accepted, prob = mh_step(state, kernel, target, rng)
        adapter.update(state.theta, prob)
        chain.append(state.theta, state.log_density, accepted, phase='warmup')
        if refine is not None and refine_every and i % refine_every == 0:
            if refine(chain):
                state = evaluate(target, state.theta, grad=grad)
        if log_every and i % log_every == 0:
            log.info('Warm-up %d/%d: acceptance %.3f, step %.4g', i, warmup,
                     chain.acceptance_rate('warmup', stage=1), kernel.step)
        if writer is not None:
            writer.maybe_flush(chain)
    adapter.freeze()

    fine_value = np.nan
    if fine is not None:
        # Evaluated once to seed the cache; not a stage-2 evaluation.
        fine_value, _ = fine(state.theta)
        if not np.isfinite(fine_value):
            raise NonFiniteError('Fine target is not finite at the starting point')
    done_samples = sum(1 for phase in chain.phases if phase == 'sample')
    for i in range(done_samples + 1, samples + 1):
        if fine is None:
            state, accepted, _ = mh_step(state, kernel, target, rng)
            chain.append(state.theta, state.log_density, accepted)
        else:
            outcome = da_step(state, fine_value, kernel, target, fine, rng)
            state, fine_value = outcome.state, outcome.fine_value
            chain.fine_evaluations += outcome.fine_evaluated
            chain.append(state.theta, state.log_density, outcome.stage1,
                         outcome.stage2, log_fine=fine_value)
        if log_every and i % log_every == 0:
            log.info('Sample %d/%d: acceptance %.3f', i, samples,
                     chain.acceptance_rate('sample'))
        if writer is not None:
            writer.maybe_flush(chain)
    if writer is not None:
        writer.flush(chain)
    return ChainResult(chain=chain, adapter=adapter, state=state)
