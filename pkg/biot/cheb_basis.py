"""Shifted 2-D Chebyshev basis and the Gaussian-process coefficient prior.

The Biot number is represented by the total-degree series

    Bi(t, x) = sum_i alpha_i T_k(t) T_l(x),    k + l <= D,

with T_k shifted onto [0, T] and T_l onto [a, b]. A Gaussian-process prior on
Bi is mapped onto a multivariate normal over alpha by interpolating the mean
and the covariance kernel on Chebyshev-Gauss-Lobatto nodes.

"""

import logging
import math

from dataclasses import dataclass, field

import numpy as np

from numpy.polynomial import chebyshev
from scipy import stats
from scipy.fft import dctn
from scipy.linalg import cho_solve
from scipy.linalg import cholesky
from scipy.linalg import solve_triangular
from scipy.linalg import LinAlgError

from .exceptions import DomainError
from .exceptions import NonFiniteError
from .exceptions import PriorRepairError


log = logging.getLogger(__name__)

DOMAIN_SLACK = 1e-12


def matern(r):
    """Twice differentiable Matern kernel as a function of scaled distance."""
    r = np.abs(r)
    return (1.0 + r + r ** 2 / 3.0) * np.exp(-r)


def squared_exponential(r):
    return np.exp(-0.5 * np.square(r))


def repair_cholesky(matrix, relative_jitter=1e-10, attempts=8):
    """Symmetrise `matrix` and add diagonal jitter until Cholesky succeeds.

    The first attempt adds `relative_jitter * trace / n`; the jitter doubles
    on every failure, at most `attempts` times.

    Returns the repaired matrix, its lower Cholesky factor and the jitter.

    """
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteError('Cannot factorise a matrix with non-finite entries')
    matrix = 0.5 * (matrix + matrix.T)
    n = matrix.shape[0]
    scale = np.trace(matrix) / n
    if not scale > 0:
        scale = 1.0
    jitter = relative_jitter * scale
    for attempt in range(attempts + 1):
        repaired = matrix + jitter * np.eye(n)
        try:
            factor = cholesky(repaired, lower=True)
        except LinAlgError:
            log.debug('Cholesky failed with jitter %.3g, doubling', jitter)
            jitter *= 2.0
            continue
        return repaired, factor, jitter
    raise PriorRepairError('Matrix is not positive-definite after jitter %.3g'
                           % (jitter / 2.0))


def lobatto_nodes(degree):
    """Chebyshev-Gauss-Lobatto points cos(pi j / D) on [-1, 1], descending."""
    return np.cos(np.pi * np.arange(degree + 1) / degree)


def lobatto_coefficients(values, axes):
    """Chebyshev coefficients of the tensor interpolant on Lobatto nodes.

    The interpolant through Lobatto samples is the one given by the
    barycentric formula; its coefficients follow from a type-I DCT along
    every axis in `axes`.

    """
    degree = values.shape[axes[0]] - 1
    coeffs = dctn(values, type=1, axes=axes) / degree ** len(axes)
    for axis in axes:
        edges = [slice(None)] * values.ndim
        for end in (0, -1):
            edges[axis] = end
            coeffs[tuple(edges)] *= 0.5
    return coeffs


@dataclass(frozen=True, eq=False)
class ChebBasis:
    """Total-degree Chebyshev basis on the rectangle [0, T] x [a, b]."""

    degree: int
    T: float
    a: float
    b: float
    terms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError('The basis degree must be at least 1')
        terms = [(k, l) for k in range(self.degree + 1)
                 for l in range(self.degree + 1 - k)]
        object.__setattr__(self, 'terms', np.array(terms, dtype=int))

    @classmethod
    def for_model(cls, model, degree):
        return cls(degree=degree, T=model.T, a=model.a, b=model.b)

    @property
    def size(self):
        """The number of terms M = (D + 1)(D + 2) / 2."""
        return len(self.terms)

    @property
    def total_degrees(self):
        return self.terms.sum(axis=1)

    def index(self, k, l):
        """Position of the term T_k(t) T_l(x) in a coefficient vector."""
        if k < 0 or l < 0 or k + l > self.degree:
            raise KeyError('No term of degree (%d, %d) in a degree %d basis'
                           % (k, l, self.degree))
        # Terms are grouped by k; block k holds D + 1 - k entries.
        return k * (self.degree + 1) - k * (k - 1) // 2 + l

    def to_reference(self, t, x):
        """Map physical (t, x) onto [-1, 1]^2, refusing points outside."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float),
                                   np.asarray(x, dtype=float))
        s = 2.0 * t / self.T - 1.0
        r = (2.0 * x - self.a - self.b) / (self.b - self.a)
        limit = 1.0 + DOMAIN_SLACK
        if np.any(np.abs(s) > limit) or np.any(np.abs(r) > limit):
            raise DomainError('Basis evaluated outside [0, %g] x [%g, %g]'
                              % (self.T, self.a, self.b))
        return np.clip(s, -1.0, 1.0), np.clip(r, -1.0, 1.0)

    def from_reference(self, s, r):
        return (0.5 * (s + 1.0) * self.T,
                self.a + 0.5 * (r + 1.0) * (self.b - self.a))

    def eval_basis(self, t, x):
        """Evaluate every basis term; the result has shape (..., M)."""
        s, r = self.to_reference(t, x)
        vt = chebyshev.chebvander(s, self.degree)
        vx = chebyshev.chebvander(r, self.degree)
        return vt[..., self.terms[:, 0]] * vx[..., self.terms[:, 1]]

    def eval_series(self, alpha, t, x):
        """Evaluate the series with coefficients `alpha` at (t, x)."""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1:] != (self.size,):
            raise ValueError('Expected %d coefficients, got %s'
                             % (self.size, alpha.shape))
        return self.eval_basis(t, x) @ alpha

    def nodes(self):
        """Physical coordinates of the (D + 1) Lobatto nodes per axis."""
        s = lobatto_nodes(self.degree)
        return self.from_reference(s, s)

    def truncate(self, tensor):
        """Pick the total-degree entries out of a (D+1) x (D+1) tensor."""
        return tensor[self.terms[:, 0], self.terms[:, 1]]

    def interpolate_function(self, func):
        """Coefficients of the interpolant of `func(t, x)` on Lobatto nodes.

        The full tensor interpolant is computed and terms with k + l > D are
        dropped.

        """
        t_nodes, x_nodes = self.nodes()
        t, x = np.meshgrid(t_nodes, x_nodes, indexing='ij')
        values = np.broadcast_to(np.asarray(func(t, x), dtype=float), t.shape)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError('Function is not finite at every Chebyshev node')
        return self.truncate(lobatto_coefficients(values, axes=(0, 1)))

    def project_prior(self, gp):
        """Project the Gaussian process `gp` onto a `CoeffPrior`."""
        mean = self.interpolate_function(gp.mean)
        t_nodes, x_nodes = self.nodes()
        t, x = np.meshgrid(t_nodes, x_nodes, indexing='ij')
        kernel = gp.covariance(t[:, :, None, None], x[:, :, None, None],
                               t[None, None], x[None, None])
        if not np.all(np.isfinite(kernel)):
            raise NonFiniteError('Kernel is not finite at every node pair')
        coeffs = lobatto_coefficients(kernel, axes=(0, 1, 2, 3))
        k, l = self.terms[:, 0], self.terms[:, 1]
        covariance = coeffs[k[:, None], l[:, None], k[None, :], l[None, :]]
        return CoeffPrior.from_moments(mean, covariance)


@dataclass(frozen=True)
class GpSpec:
    """Separable Gaussian process sigma^2 K_x(x, x') K_t(t, t')."""

    sigma: float
    rho_x: float
    rho_t: float
    mean: object = field(default=None, repr=False)
    kernel_x: object = field(default=matern, repr=False)
    kernel_t: object = field(default=squared_exponential, repr=False)

    def __post_init__(self):
        for name in ('sigma', 'rho_x', 'rho_t'):
            if not getattr(self, name) > 0:
                raise ValueError('%s must be positive' % name)
        if self.mean is None:
            object.__setattr__(self, 'mean',
                               lambda t, x: np.zeros(np.broadcast(t, x).shape))

    def covariance(self, t, x, t2, x2):
        return (self.sigma ** 2 *
                self.kernel_x((np.asarray(x) - x2) / self.rho_x) *
                self.kernel_t((np.asarray(t) - t2) / self.rho_t))


class CoeffPrior(object):
    """Multivariate normal prior alpha ~ MVN(m, Sigma) with a cached factor."""

    def __init__(self, mean, covariance, factor, jitter=0.0):
        self.mean = np.asarray(mean, dtype=float)
        self.covariance = covariance
        self.factor = factor
        self.jitter = jitter
        self._logdet = 2.0 * np.sum(np.log(np.diag(factor)))

    @classmethod
    def from_moments(cls, mean, covariance):
        covariance, factor, jitter = repair_cholesky(covariance)
        log.debug('Coefficient prior of size %d needed jitter %.3g',
                  len(mean), jitter)
        return cls(mean, covariance, factor, jitter)

    @property
    def size(self):
        return len(self.mean)

    @property
    def marginal_std(self):
        return np.sqrt(np.diag(self.covariance))

    def sample(self, rng, size=None):
        """Draw m + L z for standard normal z."""
        shape = (self.size,) if size is None else (size, self.size)
        z = rng.standard_normal(shape)
        return self.mean + z @ self.factor.T

    def _whiten(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if not np.all(np.isfinite(alpha)):
            raise NonFiniteError('Non-finite coefficients')
        if alpha.shape[-1] != self.size:
            raise ValueError('Expected %d coefficients, got %d'
                             % (self.size, alpha.shape[-1]))
        return solve_triangular(self.factor, (alpha - self.mean).T, lower=True)

    def log_density(self, alpha):
        """Exact multivariate normal log-density, normalising constant included."""
        white = self._whiten(alpha)
        quad = np.sum(white ** 2, axis=0)
        return -0.5 * (self.size * math.log(2.0 * math.pi) + self._logdet + quad)

    def grad_log_density(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return -cho_solve((self.factor, True), alpha - self.mean)


@dataclass(frozen=True)
class NoisePrior:
    """Gamma prior on the noise standard deviation (shape / rate form)."""

    shape: float = 2.0
    rate: float = 2.0

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError('Gamma shape and rate must be positive')

    @property
    def mode(self):
        return max(self.shape - 1.0, 0.0) / self.rate

    def log_density(self, sigma):
        return stats.gamma.logpdf(sigma, self.shape, scale=1.0 / self.rate)

    def grad_log_density(self, sigma):
        return (self.shape - 1.0) / sigma - self.rate

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)
