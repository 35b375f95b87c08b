"""Models, analytic oracles and small configurations shared by the tests."""

import json
import math

import numpy as np
import torch

from django.conf import settings

from biot.diagnostics import ess
from biot.harness import ExperimentConfig
from biot.harness import deep_merge
from biot.pde_fd import PdeModel


SIM_PARAMS = {'c0': 35000.0, 'c1': 1.0, 'c2': 1.0, 'a': 0.3, 'b': 1.0, 'T': 3600.0}

# Constant Biot number of the decaying manufactured solution.
DECAY = 20.0


def sim_model(**overrides):
    """The simulation-study model: u0(x) = x, ua = 0.3, ub = 1."""
    params = dict(SIM_PARAMS, u0=lambda x: np.asarray(x, dtype=float), ua=0.3, ub=1.0)
    params.update(overrides)
    return PdeModel(**params)


def decaying_model(beta=DECAY):
    """Model whose exact solution is exp(-beta t / c0) log x when Bi = beta."""
    c0, a, b = SIM_PARAMS['c0'], SIM_PARAMS['a'], SIM_PARAMS['b']
    return sim_model(u0=np.log,
                     ua=lambda t: np.exp(-beta * np.asarray(t) / c0) * math.log(a),
                     ub=lambda t: np.exp(-beta * np.asarray(t) / c0) * math.log(b))


def decaying_solution(beta=DECAY):
    """Torch oracle for `decaying_model`; alpha enters with a zero weight."""
    c0 = SIM_PARAMS['c0']

    def solution(t, x, alpha):
        return torch.exp(-beta * t / c0) * torch.log(x) + 0.0 * alpha.sum(-1)

    return solution


def constant_solution(value):
    def solution(t, x, alpha):
        return value + 0.0 * x + 0.0 * t + 0.0 * alpha.sum(-1)

    return solution


def constant_coeffs(basis, value):
    """Coefficients of the series that equals `value` everywhere."""
    alpha = np.zeros(basis.size)
    alpha[0] = value
    return alpha


def correlated_covariance(dim, rho=0.6, scales=None):
    """Covariance rho^|i - j| s_i s_j, positive-definite for |rho| < 1."""
    index = np.arange(dim)
    corr = rho ** np.abs(index[:, None] - index[None, :])
    scales = np.ones(dim) if scales is None else np.asarray(scales, dtype=float)
    return corr * np.outer(scales, scales)


class GaussianTarget(object):
    """Normalised multivariate normal log density with its gradient.

    Usable both as a sampler target and, through `log_post`, as a posterior
    for the MAP and Laplace routines.

    """

    def __init__(self, mean, covariance, with_hessian=False):
        self.mean = np.asarray(mean, dtype=float)
        self.covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        self.precision = np.linalg.inv(self.covariance)
        _, logdet = np.linalg.slogdet(self.covariance)
        self.constant = -0.5 * (logdet + len(self.mean) * math.log(2.0 * math.pi))
        if with_hessian:
            self.hessian = lambda theta: -self.precision

    def __call__(self, theta, grad=False):
        diff = np.asarray(theta, dtype=float) - self.mean
        scaled = self.precision @ diff
        value = self.constant - 0.5 * diff @ scaled
        return value, (-scaled if grad else None)

    def log_post(self, theta, grad=False, jacobian=True):
        return self(theta, grad=grad)


class CountingTarget(object):
    """Wrap a target and count its evaluations."""

    def __init__(self, target):
        self.target = target
        self.calls = 0

    def __call__(self, theta, grad=False):
        self.calls += 1
        return self.target(theta, grad=grad)


def standard_errors(samples):
    """Monte Carlo standard error of every component mean, ESS-corrected."""
    samples = np.atleast_2d(samples)
    return np.array([math.sqrt(np.var(samples[:, i]) / ess(samples[:, i]))
                     for i in range(samples.shape[1])])


def relative_frobenius(found, expected):
    return np.linalg.norm(found - expected) / np.linalg.norm(expected)


# A configuration small enough for the whole pipeline to run in seconds.
TINY = {
    'seed': 7,
    'prior': {'degree': 2, 'sigma': 10.0},
    'data': {'n_x': 3, 'n_t': 4, 'truth_grid': 10, 'oracle_nx': 41, 'oracle_nt': 80},
    'fd': {'nx': 21, 'nt': 40},
    'network': {'width': 8, 'depth': 1},
    'training': {
        'regime': 'general',
        'n_int': 32,
        'n_bnd': 16,
        'n_alpha': 4,
        'general_steps': 10,
        'adaptive_steps': 10,
        'window': 5,
        'patience': 5,
        'log_every': 0,
        'online_every': 20,
        'online_steps': 2,
    },
    'map': {'max_iter': 200, 'local_steps': 5},
    'sampler': {
        'warmup': 40,
        'samples': 40,
        'n_leapfrog': 3,
        'refresh': 20,
        'flush_every': 10,
    },
    'diagnostics': {
        'n_x': 10,
        'profile_samples': 50,
        'hellinger_samples': 10,
        'trace_window': 5,
        'trace_component': [0, 1],
    },
}


def tiny_config(**changes):
    """`ExperimentConfig` of the TINY tree, with section overrides merged in."""
    tree = deep_merge(deep_merge(settings.BIOT, TINY), changes)
    return ExperimentConfig(tree)


def write_tiny_json(path, **changes):
    with open(path, 'w') as fobj:
        json.dump(tiny_config(**changes).tree, fobj)
    return path
