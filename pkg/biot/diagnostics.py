"""Post-processing of chains: ESS, credible profiles, surrogate accuracy, cost."""

import logging

from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from scipy import fft
from scipy.stats import qmc

from .pde_fd import BiotField
from .pde_fd import Grid
from .pde_fd import solve_fd
from .surrogate import as_tensor
from .surrogate import forward
from .surrogate import pde_residual
from .training import LossSpec


log = logging.getLogger(__name__)

MIN_SERIES = 10


def autocorrelation(series):
    """Normalised autocorrelation at every lag, computed with an FFT."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    centred = x - x.mean()
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centred, size)
    acov = fft.irfft(spectrum * np.conj(spectrum), size)[:n]
    return acov / acov[0]


def ess(series, return_lag=False):
    """Effective sample size with Geyer's initial monotone sequence.

    Autocorrelations are summed in consecutive pairs until a pair sum is
    nonpositive, with pair sums forced to be nonincreasing. The integrated
    autocorrelation time is clipped below at 1, so the result never exceeds
    the series length. A constant series has ESS equal to its length.

    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < MIN_SERIES:
        raise ValueError('ESS needs at least %d samples, got %d' % (MIN_SERIES, n))
    if np.ptp(x) == 0:
        log.debug('Constant series, ESS set to the chain length %d', n)
        return (float(n), 0) if return_lag else float(n)

    rho = autocorrelation(x)
    pairs = rho[:n - n % 2].reshape(-1, 2).sum(axis=1)
    nonpositive = np.flatnonzero(pairs <= 0)
    stop = nonpositive[0] if len(nonpositive) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * pairs.sum()
    value = n / max(tau, 1.0)
    return (value, 2 * stop) if return_lag else value


@dataclass
class EssReport:
    values: np.ndarray
    lags: np.ndarray
    names: list

    @property
    def min(self):
        return float(np.min(self.values))

    @property
    def median(self):
        return float(np.median(self.values))

    def to_frame(self):
        return pd.DataFrame({'component': self.names, 'ess': self.values,
                             'lag': self.lags})


def ess_report(samples, names=None):
    """Componentwise ESS of an (n, d) sample array."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    names = names or ['theta_%d' % i for i in range(samples.shape[1])]
    results = [ess(samples[:, i], return_lag=True) for i in range(samples.shape[1])]
    values, lags = (np.array(v) for v in zip(*results))
    return EssReport(values=values, lags=lags, names=list(names))


@dataclass
class ProfileSummary:
    """Pointwise mean and central credible band of Bi on time slices."""

    times: np.ndarray
    xs: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    def to_frame(self):
        t, x = np.meshgrid(self.times, self.xs, indexing='ij')
        return pd.DataFrame({'slice': t.ravel(), 'x': x.ravel(),
                             'mean': self.mean.ravel(), 'lo': self.lower.ravel(),
                             'hi': self.upper.ravel()})


def profile_summary(alphas, basis, times, xs, level=0.95):
    """Evaluate Bi for every coefficient sample on a (times, xs) grid."""
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
    if not len(alphas):
        raise ValueError('Cannot summarise an empty chain')
    times, xs = np.asarray(times, dtype=float), np.asarray(xs, dtype=float)
    t, x = np.meshgrid(times, xs, indexing='ij')
    fields = np.einsum('sxm,nm->nsx', basis.eval_basis(t, x), alphas)
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(fields, [tail, 1.0 - tail], axis=0)
    return ProfileSummary(times=times, xs=xs, mean=fields.mean(axis=0),
                          lower=lower, upper=upper, level=level)


def laplace_profile(laplace, basis, times, xs, rng, size=2000, level=0.95):
    """Profile of Bi under draws from a Laplace approximation."""
    draws = laplace.sample(rng, size)[:, :-1]
    return profile_summary(draws, basis, times, xs, level)


def coverage(profile, truth):
    """Fraction of profile grid points where `truth(t, x)` lies in the band."""
    t, x = np.meshgrid(profile.times, profile.xs, indexing='ij')
    values = truth(t, x)
    inside = (profile.lower <= values) & (values <= profile.upper)
    return float(inside.mean())


def surrogate_l1_error(solution, model, basis, alpha, nx=101, nt=400):
    """Mean absolute difference to a finite-difference solve on its grid."""
    grid = Grid.build(model, nx, nt)
    field = solve_fd(model, BiotField.from_coeffs(basis, alpha), grid)
    t, x = np.meshgrid(field.t, field.x, indexing='ij')
    predicted = forward(solution, t.ravel(), x.ravel(), alpha).numpy()
    return float(np.mean(np.abs(predicted - field.u.ravel())))


@dataclass(frozen=True)
class CollocationDesign:
    """Fixed quasi-random points shared by every per-sample loss estimate."""

    t: np.ndarray
    x: np.ndarray
    tb: np.ndarray
    xb: np.ndarray
    target: np.ndarray


def collocation_design(model, n_int=512, n_bnd=128, seed=0):
    """Scrambled Sobol points in the interior and on the boundary pieces."""
    inner = qmc.Sobol(d=2, scramble=True, seed=seed).random(n_int)
    t = inner[:, 0] * model.T
    x = model.a + inner[:, 1] * (model.b - model.a)
    outer = qmc.Sobol(d=2, scramble=True, seed=seed + 1).random(n_bnd)
    piece = np.minimum((outer[:, 0] * 3).astype(int), 2)
    s = outer[:, 1]
    tb = np.where(piece == 2, 0.0, s * model.T)
    xb = np.where(piece == 0, model.a,
                  np.where(piece == 1, model.b, model.a + s * (model.b - model.a)))
    return CollocationDesign(t=t, x=x, tb=tb, xb=xb, target=model.boundary_value(tb, xb))


def physics_loss_at(solution, model, basis, alpha, design, spec=None):
    """Loss F(alpha) estimated on the fixed design."""
    spec = spec or LossSpec()
    residual = pde_residual(solution, model, basis, as_tensor(design.t),
                            as_tensor(design.x), alpha)
    predicted = forward(solution, design.tb, design.xb, alpha)
    mismatch = predicted - as_tensor(design.target)
    with torch.no_grad():
        return float(spec.nu1 * torch.mean(residual.detach() ** 2) +
                     spec.nu2 * torch.mean(mismatch ** 2))


def hellinger_from_values(losses, sigmas):
    """Average of sigma^-4 F over the samples (unnormalised bound)."""
    losses = np.asarray(losses, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    return float(np.mean(sigmas ** -4 * losses))


def thin(samples, max_samples):
    samples = np.atleast_2d(samples)
    if len(samples) <= max_samples:
        return samples
    index = np.linspace(0, len(samples) - 1, max_samples).round().astype(int)
    return samples[index]


def hellinger_bound_estimate(thetas, solution, model, basis, spec=None,
                             max_samples=500, seed=0):
    """Estimate the surrogate posterior error bound from chain samples.

    Arguments:
        thetas        chain samples of (alpha, log sigma), shape (n, M + 1)
        solution      the surrogate (or any solution callable)
        max_samples   the chain is evenly thinned to at most this many states

    """
    design = collocation_design(model, seed=seed)
    thetas = thin(thetas, max_samples)
    losses = [physics_loss_at(solution, model, basis, theta[:-1], design, spec)
              for theta in thetas]
    value = hellinger_from_values(losses, np.exp(thetas[:, -1]))
    log.info('Hellinger bound estimate %.4g from %d samples', value, len(thetas))
    return value


def cost_report(runs):
    """Per-scheme time, ESS and cost (time per effective sample).

    Arguments:
        runs   iterable of mappings with `scheme`, `time`, `min_ess` and
               optionally `median_ess`

    """
    frame = pd.DataFrame(list(runs))
    if 'median_ess' not in frame:
        frame['median_ess'] = frame['min_ess']
    frame['cost'] = frame['time'] / frame['min_ess']
    return frame[['scheme', 'time', 'min_ess', 'median_ess', 'cost']]


def aggregate_costs(frame):
    """Aggregate replicate rows of `cost_report` per scheme."""
    grouped = frame.groupby('scheme', sort=False)
    table = pd.DataFrame({
        'runs': grouped.size(),
        'time': grouped['time'].mean(),
        'ess': grouped['min_ess'].mean(),
        'ess_min': grouped['min_ess'].min(),
        'ess_max': grouped['min_ess'].max(),
    })
    table['cost'] = table['time'] / table['ess']
    return table.reset_index()


def predictive_check(model, basis, alpha, t, x, z, nx=101, nt=400):
    """FD predictions at the data points under `alpha` and their residuals."""
    grid = Grid.build(model, nx, nt)
    field = solve_fd(model, BiotField.from_coeffs(basis, alpha), grid)
    prediction = field.evaluate_at(t, x)
    z = np.asarray(z, dtype=float)
    return pd.DataFrame({'t': t, 'x': x, 'z': z, 'prediction': prediction,
                         'residual': z - prediction})


def trace_summary(samples, component, window=50):
    """Trace of one component with its trailing moving average."""
    values = np.atleast_2d(samples)[:, component]
    frame = pd.DataFrame({'iteration': np.arange(len(values)), 'value': values})
    frame['moving_average'] = frame['value'].rolling(window, min_periods=1).mean()
    return frame
