"""Physics-informed training of the surrogate, MAP estimation and Laplace fits.

The training loss is a Monte Carlo estimate of

    nu1 E|L u - 0|^2  +  nu2 E|u - u_BC|^2

with interior points uniform on [0, T] x [a, b], boundary points uniform on the
three Dirichlet pieces and coefficients drawn from a parameter measure.

"""

import logging
import math

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from scipy.linalg import cho_solve

from .cheb_basis import repair_cholesky
from .exceptions import IndefiniteHessianError
from .exceptions import NonFiniteError
from .exceptions import PriorRepairError
from .exceptions import TrainingDivergedError
from .surrogate import as_tensor
from .surrogate import pde_residual


log = logging.getLogger(__name__)

TRACE_COLUMNS = ['step', 'interior', 'boundary', 'total', 'lr']


class UniformBox(object):
    """Independent uniform coefficients on [lower_i, upper_i]."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.upper < self.lower):
            raise ValueError('Box bounds are inverted')

    @classmethod
    def general(cls, basis, half_width=80.0, free_degree=3):
        """The box [-w / 2^k, w / 2^k] with k = max(total degree - 3, 0)."""
        k = np.maximum(basis.total_degrees - free_degree, 0)
        bound = half_width / 2.0 ** k
        return cls(-bound, bound)

    def sample(self, rng, size):
        return rng.uniform(self.lower, self.upper, size=(size, len(self.lower)))


class GaussianMeasure(object):
    """Multivariate normal coefficients MVN(mean, covariance)."""

    def __init__(self, mean, covariance):
        self.mean = np.asarray(mean, dtype=float)
        covariance = np.asarray(covariance, dtype=float)
        if covariance.ndim == 1:
            self.factor = np.diag(np.sqrt(covariance))
        else:
            _, self.factor, _ = repair_cholesky(covariance)

    @classmethod
    def local(cls, basis, center, lam):
        """Trust-region measure around `center` with variances lam / 4^k."""
        return cls(center, local_variances(basis, lam))

    def sample(self, rng, size):
        z = rng.standard_normal((size, len(self.mean)))
        return self.mean + z @ self.factor.T


class SampleBank(object):
    """Empirical measure over banked coefficient samples.

    Arguments:
        samples   array of shape (n, M)
        weights   optional nonnegative weights; equal weights collapse to
                  the unweighted bank

    """

    def __init__(self, samples, weights=None):
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if not self.samples.size:
            raise ValueError('Cannot sample from an empty bank')
        self.probabilities = None
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (len(self.samples),) or np.any(weights < 0):
                raise ValueError('Bank weights must be nonnegative, one per sample')
            if np.ptp(weights) > 0:
                self.probabilities = weights / weights.sum()

    @classmethod
    def from_chain(cls, alphas, sigmas=None, weighted=False):
        """Bank chain samples, optionally weighting each by sigma^-4."""
        weights = None
        if weighted:
            weights = np.asarray(sigmas, dtype=float) ** -4
        return cls(alphas, weights)

    def __len__(self):
        return len(self.samples)

    def sample(self, rng, size):
        index = rng.choice(len(self.samples), size=size, p=self.probabilities)
        return self.samples[index]


def local_variances(basis, lam):
    """Diagonal of the local measure covariance, lam / 2^(2k) per term."""
    return lam / 4.0 ** basis.total_degrees


@dataclass(frozen=True)
class LossSpec:
    """Weights and batch sizes of the physics-informed loss."""

    nu1: float = 1.0
    nu2: float = 10.0
    n_int: int = 1024
    n_bnd: int = 256
    n_alpha: int = 32

    def __post_init__(self):
        if not (self.nu1 > 0 and self.nu2 > 0):
            raise ValueError('Loss weights must be positive')
        for name in ('n_int', 'n_bnd', 'n_alpha'):
            if getattr(self, name) < 1:
                raise ValueError('%s must be at least 1' % name)


@dataclass
class LossTerms:
    interior: float
    boundary: float
    total: float


def interior_points(model, rng, size):
    t = rng.uniform(0.0, model.T, size)
    x = rng.uniform(model.a, model.b, size)
    return t, x


def boundary_points(model, rng, size):
    """Sample the pieces x = a, x = b and t = 0 with equal probability.

    Returns (t, x, target) with the Dirichlet or initial value as target.

    """
    piece = rng.integers(0, 3, size)
    s = rng.uniform(0.0, 1.0, size)
    t = np.where(piece == 2, 0.0, s * model.T)
    x = np.where(piece == 0, model.a,
                 np.where(piece == 1, model.b, model.a + s * (model.b - model.a)))
    return t, x, model.boundary_value(t, x)


def mc_loss(solution, model, basis, spec, measure, rng, backward=True):
    """Draw one collocation batch and evaluate the loss.

    Interior point i is paired with coefficient draw i % n_alpha, and so is
    boundary point i. With `backward` the gradient with respect to the
    weights of `solution` is accumulated into their `.grad`.

    """
    alphas = measure.sample(rng, spec.n_alpha)
    t, x = interior_points(model, rng, spec.n_int)
    tb, xb, target = boundary_points(model, rng, spec.n_bnd)
    alpha_int = as_tensor(alphas[np.arange(spec.n_int) % spec.n_alpha])
    alpha_bnd = as_tensor(alphas[np.arange(spec.n_bnd) % spec.n_alpha])

    residual = pde_residual(solution, model, basis, as_tensor(t), as_tensor(x),
                            alpha_int, create_graph=True)
    mismatch = solution(as_tensor(tb), as_tensor(xb), alpha_bnd) - as_tensor(target)
    interior = torch.mean(residual ** 2)
    boundary = torch.mean(mismatch ** 2)
    total = spec.nu1 * interior + spec.nu2 * boundary
    if not torch.isfinite(total):
        raise TrainingDivergedError('Training loss is not finite (%r)' % total.item())
    if backward and total.requires_grad:
        total.backward()
    return LossTerms(interior=interior.item(), boundary=boundary.item(),
                     total=total.item())


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser schedule and stopping rule.

    The learning rate decays exponentially from `lr_start` to `lr_end` over
    `max_steps`. Training stops early when the `window`-step moving average
    improved by less than `min_improvement` (relative) over the last
    `patience` steps, or once the interior loss drops below `target_interior`.

    """

    max_steps: int = 50000
    lr_start: float = 3e-3
    lr_end: float = 1e-5
    window: int = 500
    patience: int = 2000
    min_improvement: float = 0.01
    target_interior: float = None
    plateau: bool = True
    log_every: int = 1000


@dataclass
class TrainResult:
    trace: pd.DataFrame
    steps: int
    reason: str


def _plateaued(totals, config):
    n = len(totals)
    if not config.plateau or n < config.window + config.patience:
        return False
    recent = np.mean(totals[n - config.window:])
    earlier = np.mean(totals[n - config.patience - config.window:n - config.patience])
    return recent > (1.0 - config.min_improvement) * earlier


def train(net, model, basis, spec, measure, rng, config=None):
    """Minimise the physics-informed loss with Adam on fresh batches."""
    config = config or TrainConfig()
    rows = []
    if config.max_steps <= 0:
        return TrainResult(trace=pd.DataFrame(rows, columns=TRACE_COLUMNS),
                           steps=0, reason='no steps')
    optimiser = torch.optim.Adam(net.parameters(), lr=config.lr_start)
    gamma = (config.lr_end / config.lr_start) ** (1.0 / config.max_steps)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimiser, gamma=gamma)
    net.train()

    totals = []
    reason = 'step cap'
    for step in range(1, config.max_steps + 1):
        optimiser.zero_grad()
        terms = mc_loss(net, model, basis, spec, measure, rng)
        lr = optimiser.param_groups[0]['lr']
        optimiser.step()
        scheduler.step()
        totals.append(terms.total)
        rows.append((step, terms.interior, terms.boundary, terms.total, lr))
        if config.log_every and step % config.log_every == 0:
            log.info('Step %d: loss %.4g (interior %.4g, boundary %.4g)',
                     step, terms.total, terms.interior, terms.boundary)
        if (config.target_interior is not None and
                terms.interior < config.target_interior):
            reason = 'target reached'
            break
        if _plateaued(totals, config):
            reason = 'plateau'
            break
    net.eval()
    log.debug('Training stopped after %d steps (%s)', len(rows), reason)
    return TrainResult(trace=pd.DataFrame(rows, columns=TRACE_COLUMNS),
                       steps=len(rows), reason=reason)


def write_trace(trace, path):
    trace.to_csv(path, index=False, float_format='%.17g')


def make_local_trainer(net, model, basis, spec, rng, tolerance=1e-4,
                       max_steps=2000, lr=1e-4):
    """Return a callable training `net` around a coefficient vector.

    The callable takes (alpha, lam) and trains on the local measure until
    the interior loss drops below `tolerance` or `max_steps` is reached.

    """
    config = TrainConfig(max_steps=max_steps, lr_start=lr, lr_end=lr,
                         target_interior=tolerance, plateau=False, log_every=0)

    def train_locally(alpha, lam):
        measure = GaussianMeasure.local(basis, alpha, lam)
        return train(net, model, basis, spec, measure, rng, config)

    return train_locally


@dataclass(frozen=True)
class MapConfig:
    max_iter: int = 500
    step: float = 1e-2
    max_step: float = 1.0
    grow: float = 1.2
    min_step: float = 1e-12
    grad_tol: float = 1e-6
    lam_start: float = 20.0
    lam_end: float = 0.5


@dataclass
class MapResult:
    theta: np.ndarray
    log_post: float
    iterations: int
    reason: str
    history: list = field(default_factory=list, repr=False)

    @property
    def alpha(self):
        return self.theta[:-1]

    @property
    def sigma(self):
        return math.exp(self.theta[-1])


def lambda_schedule(config, iteration):
    if config.max_iter <= 1:
        return config.lam_start
    fraction = iteration / (config.max_iter - 1)
    return config.lam_start * (config.lam_end / config.lam_start) ** fraction


def map_estimate(posterior, alpha0, sigma0, config=None, local_trainer=None):
    """Maximise the log posterior over (alpha, log sigma).

    Ascent runs in coordinates where every coefficient is divided by its
    prior marginal standard deviation. Each iteration first lets
    `local_trainer(alpha, lam)` refine the surrogate around the current
    iterate, then takes a gradient step that grows by `grow` after an
    increase and is halved until the log posterior does not decrease.
    The objective omits the log-transform Jacobian, so the mode is that of
    the density in (alpha, sigma).

    Arguments:
        posterior       object with `prior` and `log_post(theta, grad, jacobian)`
        alpha0, sigma0  starting point
        local_trainer   optional callable refining the surrogate

    """
    config = config or MapConfig()
    scale = np.append(posterior.prior.marginal_std, 1.0)
    theta = np.append(np.asarray(alpha0, dtype=float), math.log(sigma0))

    def evaluate(point):
        value, grad = posterior.log_post(point, grad=True, jacobian=False)
        return value, grad

    value, grad = evaluate(theta)
    if not np.isfinite(value):
        raise TrainingDivergedError('Log posterior is not finite at the start')
    step = config.step
    history = [(0, value, step)]
    reason = 'iteration cap'
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        if local_trainer is not None:
            local_trainer(theta[:-1], lambda_schedule(config, iteration - 1))
            value, grad = evaluate(theta)
            if not np.isfinite(value):
                raise TrainingDivergedError('Log posterior diverged after '
                                            'local training')
        direction = grad * scale
        if np.linalg.norm(direction) < config.grad_tol:
            reason = 'converged'
            break
        while step >= config.min_step:
            candidate = theta + step * scale * direction
            cand_value, cand_grad = evaluate(candidate)
            if np.isfinite(cand_value) and cand_value >= value:
                theta, value, grad = candidate, cand_value, cand_grad
                step = min(step * config.grow, config.max_step)
                break
            step *= 0.5
        else:
            reason = 'step underflow'
            break
        history.append((iteration, value, step))
    log.info('MAP ascent stopped after %d iterations (%s), log posterior %.6g',
             iteration, reason, value)
    return MapResult(theta=theta, log_post=value, iterations=iteration,
                     reason=reason, history=history)


class LaplaceApprox(object):
    """Gaussian approximation MVN(mode, inverse Hessian) over (alpha, log sigma)."""

    def __init__(self, mode, covariance):
        self.mode = np.asarray(mode, dtype=float)
        self.covariance, self.factor, self.jitter = repair_cholesky(covariance)

    @property
    def alpha(self):
        return self.mode[:-1]

    @property
    def sigma(self):
        return math.exp(self.mode[-1])

    def sample(self, rng, size):
        z = rng.standard_normal((size, len(self.mode)))
        return self.mode + z @ self.factor.T

    def alpha_measure(self):
        """Marginal measure over the coefficients, used as a training measure."""
        return GaussianMeasure(self.alpha, self.covariance[:-1, :-1])


def finite_difference_hessian(gradient, theta, rel_step=1e-5):
    """Hessian from central differences of `gradient`, column by column."""
    theta = np.asarray(theta, dtype=float)
    n = len(theta)
    hessian = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(theta[i]))
        shift = np.zeros(n)
        shift[i] = h
        hessian[:, i] = (gradient(theta + shift) - gradient(theta - shift)) / (2 * h)
    return hessian


def laplace_at(posterior, mode, rel_step=1e-5):
    """Fit the Laplace approximation at `mode`.

    The posterior's own `hessian(theta)` is used when it provides one;
    otherwise gradients are differenced. The negated Hessian is repaired
    to a positive-definite precision before inversion; `IndefiniteHessianError`
    is raised when jitter alone cannot do so.

    """
    mode = np.asarray(mode, dtype=float)
    if hasattr(posterior, 'hessian'):
        hessian = posterior.hessian(mode)
    else:
        def gradient(point):
            return posterior.log_post(point, grad=True, jacobian=False)[1]
        hessian = finite_difference_hessian(gradient, mode, rel_step)
    if not np.all(np.isfinite(hessian)):
        raise NonFiniteError('Non-finite Hessian at the mode')
    try:
        _, factor, jitter = repair_cholesky(-hessian)
    except PriorRepairError as exc:
        raise IndefiniteHessianError(
            'Negated Hessian at the mode is not positive-definite, the point is a '
            'saddle or the ascent stopped short: %s' % exc) from exc
    if jitter:
        log.debug('Laplace precision repaired with jitter %.3g', jitter)
    covariance = cho_solve((factor, True), np.eye(len(mode)))
    return LaplaceApprox(mode, covariance)


def adapt_online(net, model, basis, spec, bank, rng, steps=200, lr=1e-4):
    """Refine `net` on a fixed number of batches drawn from `bank`."""
    if not len(bank):
        raise ValueError('Online adaptation needs a nonempty sample bank')
    config = TrainConfig(max_steps=steps, lr_start=lr, lr_end=lr,
                         plateau=False, log_every=0)
    result = train(net, model, basis, spec, bank, rng, config)
    log.info('Online refinement: %d steps on a bank of %d samples, last loss %.4g',
             result.steps, len(bank),
             result.trace['total'].iloc[-1] if result.steps else float('nan'))
    return result
