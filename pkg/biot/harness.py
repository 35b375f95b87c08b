"""Experiment orchestration: configuration, datasets and the staged pipeline.

Every CLI verb works on a run directory. Stages read what earlier stages left
there (dataset, surrogate checkpoint, Laplace fit, chain) and write their own
artifacts next to it, each CSV carrying the config hash in a comment header.

"""

import copy
import hashlib
import json
import logging
import math
import os
import time

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.core.exceptions import ValidationError
from scipy.interpolate import UnivariateSpline

from . import diagnostics
from .cheb_basis import ChebBasis
from .cheb_basis import GpSpec
from .cheb_basis import NoisePrior
from .cheb_basis import matern
from .cheb_basis import repair_cholesky
from .cheb_basis import squared_exponential
from .exceptions import StageError
from .inference import Adapter
from .inference import ChainWriter
from .inference import FiniteDifferenceForward
from .inference import PosteriorModel
from .inference import SurrogateForward
from .inference import load_snapshot
from .inference import make_kernel
from .inference import read_chain
from .inference import run_chain
from .inference import save_snapshot
from .pde_fd import BiotField
from .pde_fd import Grid
from .pde_fd import PdeModel
from .pde_fd import solve_fd
from .surrogate import SurrogateNet
from .surrogate import load_checkpoint
from .surrogate import save_checkpoint
from .training import GaussianMeasure
from .training import LaplaceApprox
from .training import LossSpec
from .training import MapConfig
from .training import SampleBank
from .training import TrainConfig
from .training import UniformBox
from .training import adapt_online
from .training import laplace_at
from .training import make_local_trainer
from .training import map_estimate
from .training import train
from .training import write_trace


log = logging.getLogger(__name__)

KERNEL_FUNCTIONS = {'matern': matern, 'squared_exponential': squared_exponential}

SCHEMES = ('rwmh', 'mala', 'hmc')

# Fixed streams derived from the run seed, one per consumer.
STREAMS = ('data', 'training', 'map', 'sampler', 'diagnostics')


def deep_merge(base, override, path=''):
    """Merge `override` into a copy of `base`, refusing unknown keys."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = '%s.%s' % (path, key) if path else key
        if key not in merged:
            raise ImproperlyConfigured('Unknown configuration key "%s"' % where)
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = deep_merge(merged[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def config_hash(tree):
    """SHA-256 of the canonical JSON of a configuration tree."""
    canonical = json.dumps(tree, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _profile(value, name):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if value == 'x':
        return lambda s: np.asarray(s, dtype=float)
    if value == 'spline':
        return None
    if isinstance(value, dict) and set(value) == {'nodes', 'values'}:
        return (value['nodes'], value['values'])
    raise ImproperlyConfigured('Invalid %s profile %r' % (name, value))


class ExperimentConfig(object):
    """A validated configuration tree with typed accessors.

    Arguments:
        tree   the merged key tree (defaults, preset, file, overrides)

    """

    def __init__(self, tree):
        self.tree = tree
        self.hash = config_hash(tree)
        self.validate()

    @classmethod
    def load(cls, path=None, preset=None, **overrides):
        """Merge settings defaults, a preset, a JSON file and overrides.

        Overrides are top-level keys such as `seed`; `None` values are
        ignored.

        """
        tree = copy.deepcopy(settings.BIOT)
        if preset:
            if preset not in settings.BIOT_PRESETS:
                raise ImproperlyConfigured('Unknown preset "%s"' % preset)
            tree = deep_merge(tree, settings.BIOT_PRESETS[preset])
        if path:
            try:
                with open(path) as fobj:
                    tree = deep_merge(tree, json.load(fobj))
            except (OSError, ValueError) as exc:
                raise ImproperlyConfigured('Cannot read config %s: %s' % (path, exc))
        for key, value in overrides.items():
            if value is not None:
                tree = deep_merge(tree, {key: value})
        return cls(tree)

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def seed(self):
        return self.tree['seed']

    def validate(self):
        seed = self.tree['seed']
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ImproperlyConfigured('The seed must be an unsigned 64-bit integer')
        sampler = self.tree['sampler']
        for scheme in [sampler['scheme']] + list(sampler['comparisons']):
            if scheme not in SCHEMES:
                raise ImproperlyConfigured('Unknown sampling scheme "%s"' % scheme)
        if self.tree['training']['regime'] not in ('general', 'adaptive'):
            raise ImproperlyConfigured('Unknown training regime "%s"'
                                       % self.tree['training']['regime'])
        if self.tree['data']['source'] not in ('simulate', 'file'):
            raise ImproperlyConfigured('Unknown data source "%s"'
                                       % self.tree['data']['source'])
        try:
            self.basis()
            self.gp()
            self.noise_prior()
            self.loss_spec()
            self.basis().index(*self.tree['diagnostics']['trace_component'])
            if not self.needs_splines:
                self.model()
        except (KeyError, ValueError, TypeError) as exc:
            raise ImproperlyConfigured('Invalid configuration: %s' % exc)

    def streams(self):
        """Independent generators for every consumer, derived from the seed."""
        children = np.random.SeedSequence(self.seed).spawn(len(STREAMS))
        return {name: np.random.default_rng(child)
                for name, child in zip(STREAMS, children)}

    @property
    def needs_splines(self):
        params = self.tree['model']
        return 'spline' in [params[name] for name in ('u0', 'ua', 'ub')]

    def model(self, splines=None):
        """Build the `PdeModel`; `splines` supplies fitted (ua, ub, u0)."""
        params = dict(self.tree['model'])
        for name in ('u0', 'ua', 'ub'):
            params[name] = _profile(params[name], name)
            if params[name] is None:
                if splines is None:
                    raise ImproperlyConfigured('%s needs boundary splines fitted '
                                               'to a dataset' % name)
                params[name] = dict(zip(('ua', 'ub', 'u0'), splines))[name]
        return PdeModel(**params)

    def basis(self):
        model = self.tree['model']
        return ChebBasis(degree=self.tree['prior']['degree'], T=model['T'],
                         a=model['a'], b=model['b'])

    def gp(self):
        prior = self.tree['prior']
        mean = float(prior['mean'])
        return GpSpec(sigma=prior['sigma'], rho_x=prior['rho_x'],
                      rho_t=prior['rho_t'],
                      mean=lambda t, x: np.full(np.broadcast(t, x).shape, mean),
                      kernel_x=KERNEL_FUNCTIONS[prior['kernel_x']],
                      kernel_t=KERNEL_FUNCTIONS[prior['kernel_t']])

    def noise_prior(self):
        prior = self.tree['prior']
        return NoisePrior(shape=prior['noise_shape'], rate=prior['noise_rate'])

    def loss_spec(self):
        training = self.tree['training']
        return LossSpec(nu1=training['nu1'], nu2=training['nu2'],
                        n_int=training['n_int'], n_bnd=training['n_bnd'],
                        n_alpha=training['n_alpha'])

    def train_config(self, regime):
        training = self.tree['training']
        return TrainConfig(max_steps=training['%s_steps' % regime],
                           lr_start=training['lr_start'], lr_end=training['lr_end'],
                           window=training['window'], patience=training['patience'],
                           min_improvement=training['min_improvement'],
                           log_every=training['log_every'])

    def map_config(self):
        params = self.tree['map']
        return MapConfig(max_iter=params['max_iter'], step=params['step'],
                         max_step=params['max_step'], grow=params['grow'],
                         grad_tol=params['grad_tol'], lam_start=params['lam_start'],
                         lam_end=params['lam_end'])


@dataclass
class Dataset:
    """Point observations z at (t, x) with a provenance block."""

    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.z)

    def to_frame(self):
        return pd.DataFrame({'t': self.t, 'x': self.x, 'z': self.z})

    def write(self, path, config_hash=None):
        write_csv(self.to_frame(), path, config_hash)
        return file_sha256(path)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as fobj:
        for chunk in iter(lambda: fobj.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(frame, path, config_hash=None):
    """Write `frame` as CSV, led by a `# config_hash:` comment when given."""
    with open(path, 'w') as fobj:
        if config_hash:
            fobj.write('# config_hash: %s\n' % config_hash)
        frame.to_csv(fobj, index=False, float_format='%.17g')


def read_csv_hash(path):
    with open(path) as fobj:
        first = fobj.readline().strip()
    if first.startswith('# config_hash:'):
        return first.split(':', 1)[1].strip()
    return None


def write_npz(path, config_hash, **arrays):
    np.savez(path, config_hash=config_hash, **arrays)


def read_npz(path, config_hash):
    """Load the arrays of `path`, refusing files written under another config."""
    with np.load(path) as data:
        found = str(data['config_hash']) if 'config_hash' in data.files else None
        if found != config_hash:
            raise ValidationError('%s was written with config %s, not %s'
                                  % (path, found, config_hash))
        return {key: data[key] for key in data.files if key != 'config_hash'}


def default_layout(model, n_x=8, n_t=19):
    """Regular n_x by n_t layout strictly inside the domain."""
    xs = np.linspace(model.a, model.b, n_x + 2)[1:-1]
    ts = np.linspace(0.0, model.T, n_t + 2)[1:-1]
    t, x = np.meshgrid(ts, xs, indexing='ij')
    return t.ravel(), x.ravel()


def gp_truth(model, gp, rng, size=40):
    """Draw Bi from the GP on a size x size grid, bilinear in between."""
    times = np.linspace(0.0, model.T, size)
    xs = np.linspace(model.a, model.b, size)
    t, x = np.meshgrid(times, xs, indexing='ij')
    t, x = t.ravel(), x.ravel()
    kernel = gp.covariance(t[:, None], x[:, None], t[None, :], x[None, :])
    _, factor, _ = repair_cholesky(kernel)
    values = gp.mean(t, x) + factor @ rng.standard_normal(len(t))
    table = values.reshape(size, size)
    truth = BiotField.from_grid(times, xs, table)
    return truth, table


def simulate_dataset(model, truth, t, x, rng, noise=None, nx=401, nt=1600,
                     noise_fraction=0.01):
    """Solve with the true Bi on a fine grid and add Gaussian noise.

    Arguments:
        truth   the true Biot number (any callable Bi(t, x))
        t, x    observation layout
        noise   noise standard deviation; defaults to `noise_fraction` of
                the range of the solution

    """
    model.check_domain(t, x)
    field = solve_fd(model, truth, Grid.build(model, nx, nt))
    clean = field.evaluate_at(t, x)
    if noise is None:
        noise = noise_fraction * float(np.ptp(field.u))
    z = clean + noise * rng.standard_normal(len(clean)) if noise > 0 else clean.copy()
    provenance = {'source': 'simulated', 'truth': getattr(truth, 'description', ''),
                  'noise': noise}
    log.info('Simulated %d records with noise sigma %.4g', len(z), noise)
    return Dataset(t=np.asarray(t, dtype=float), x=np.asarray(x, dtype=float),
                   z=z, provenance=provenance)


def load_dataset(path, model=None):
    """Read a t,x,z CSV dataset and validate it against `model`'s domain."""
    with open(path) as fobj:
        lines = fobj.readlines()
    skipped = 0
    while skipped < len(lines) and lines[skipped].startswith('#'):
        skipped += 1
    if skipped == len(lines) or not lines[skipped].strip():
        raise ValidationError('%s: no records' % path)
    try:
        frame = pd.read_csv(path, comment='#', dtype=str, skip_blank_lines=False)
    except pd.errors.ParserError as exc:
        raise ValidationError('%s: malformed CSV: %s' % (path, exc))
    if list(frame.columns) != ['t', 'x', 'z']:
        raise ValidationError('%s: expected header t,x,z, got %s'
                              % (path, ','.join(frame.columns)))
    if frame.empty:
        raise ValidationError('%s: no records' % path)
    values = frame.apply(pd.to_numeric, errors='coerce')
    bad = values.isna().any(axis=1)
    if bad.any():
        index = int(np.flatnonzero(bad.to_numpy())[0])
        raise ValidationError('%s, line %d: malformed record %r'
                              % (path, index + 2 + skipped,
                                 ','.join(str(v) for v in frame.iloc[index])))
    t, x, z = (values[name].to_numpy(dtype=float) for name in ('t', 'x', 'z'))
    if model is not None:
        inside = model.contains(t, x)
        if not np.all(inside):
            index = int(np.flatnonzero(~inside)[0])
            raise ValidationError('%s, line %d: (t=%g, x=%g) lies outside the domain'
                                  % (path, index + 2 + skipped, t[index], x[index]))
    digest = file_sha256(path)
    log.info('Loaded %d records from %s (sha256 %s)', len(z), path, digest)
    return Dataset(t=t, x=x, z=z, provenance={'source': 'file', 'path': path,
                                              'sha256': digest})


def _smoothing_spline(s, z, name):
    frame = pd.DataFrame({'s': s, 'z': z}).groupby('s', sort=True).mean()
    s, z = frame.index.to_numpy(dtype=float), frame['z'].to_numpy()
    if len(s) < 4:
        raise ValidationError('The %s series has %d points, at least 4 are needed'
                              % (name, len(s)))
    # Second differences of white noise have variance 6 sigma^2.
    variance = np.mean(np.diff(z, 2) ** 2) / 6.0
    spline = UnivariateSpline(s, z, k=3, s=len(s) * variance, ext=3)
    return lambda value: spline(np.asarray(value, dtype=float))


def fit_boundary_splines(dataset, a, b):
    """Smoothing cubic splines through the endpoint series and the first profile.

    The endpoint series are the records at the radii nearest to `a` and `b`;
    the initial profile is the set of records at the earliest time.

    Returns (ua, ub, u0).

    """
    radii = np.unique(dataset.x)
    fits = []
    for end, name in ((a, 'ua'), (b, 'ub')):
        radius = radii[np.argmin(np.abs(radii - end))]
        mask = dataset.x == radius
        fits.append(_smoothing_spline(dataset.t[mask], dataset.z[mask], name))
    first = dataset.t == dataset.t.min()
    fits.append(_smoothing_spline(dataset.x[first], dataset.z[first], 'u0'))
    return tuple(fits)


@contextmanager
def stage(name, summary, out_dir):
    """Log and time a pipeline stage; failures become `StageError`."""
    log.info('Stage "%s" started', name)
    started = time.perf_counter()
    try:
        yield
    except Exception as exc:
        log.error('Failed to complete stage "%s": %r', name, exc)
        summary['status'] = 'failed'
        summary['failed_stage'] = name
        summary['error'] = repr(exc)
        write_json(os.path.join(out_dir, 'summary.json'), summary)
        raise StageError(name, exc) from exc
    elapsed = time.perf_counter() - started
    summary.setdefault('timings', {})[name] = elapsed
    log.info('Stage "%s" completed in %.2fs', name, elapsed)


def write_json(path, payload):
    with open(path, 'w') as fobj:
        json.dump(json_tree(payload), fobj, indent=2, sort_keys=True)


def json_tree(value):
    """Convert numpy values to plain JSON; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(key): json_tree(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [json_tree(item) for item in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class RunContext(object):
    """State shared by the stages of one run directory.

    Arguments:
        config    an `ExperimentConfig`
        out_dir   the run directory, created when missing

    """

    def __init__(self, config, out_dir, init_weights=None):
        self.config = config
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.rng = config.streams()
        self.summary = {'config_hash': config.hash, 'seed': config.seed,
                        'status': 'running'}
        previous = self.path('summary.json')
        if os.path.exists(previous):
            with open(previous) as fobj:
                summary = json.load(fobj)
            if summary.get('config_hash') == config.hash:
                self.summary = dict(summary, status='running')
        self.init_weights = init_weights or config['training']['init_weights']
        self.dataset = None
        self.model = None
        self.basis = None
        self.prior = None
        self.net = None
        self.laplace = None
        self.truth = None

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def stage(self, name):
        return stage(name, self.summary, self.out_dir)

    def write_csv(self, frame, name):
        write_csv(frame, self.path(name), self.config.hash)

    def check_hash(self, path):
        found = read_csv_hash(path)
        if found is not None and found != self.config.hash:
            raise ValidationError('%s was written with config %s, not %s'
                                  % (path, found, self.config.hash))

    def write_config(self):
        write_json(self.path('config.json'), {'config_hash': self.config.hash,
                                              'config': self.config.tree})

    def write_summary(self):
        write_json(self.path('summary.json'), self.summary)

    # Data and prior

    def prepare(self):
        """Load or produce the dataset, then build the model and the prior."""
        if self.dataset is not None:
            return
        data = self.config['data']
        self.basis = self.config.basis()
        if os.path.exists(self.path('data.csv')):
            self.check_hash(self.path('data.csv'))
            self.dataset = load_dataset(self.path('data.csv'))
        elif data['source'] == 'file':
            if not data['path']:
                raise ImproperlyConfigured('data.path is required for file data')
            self.dataset = load_dataset(data['path'])
        if self.config.needs_splines:
            if self.dataset is None:
                raise ImproperlyConfigured('Spline boundaries need a data file')
            splines = fit_boundary_splines(self.dataset, self.config['model']['a'],
                                           self.config['model']['b'])
            self.model = self.config.model(splines)
        else:
            self.model = self.config.model()
        if self.dataset is None:
            self.dataset = self.simulate()
        else:
            self.model.check_domain(self.dataset.t, self.dataset.x)
        if os.path.exists(self.path('truth.npz')):
            truth = read_npz(self.path('truth.npz'), self.config.hash)
            self.truth = BiotField.from_grid(truth['times'], truth['xs'], truth['table'])
        self.prior = self.basis.project_prior(self.config.gp())
        log.info('Coefficient prior of size %d (jitter %.3g)', self.prior.size,
                 self.prior.jitter)

    def simulate(self):
        data = self.config['data']
        rng = self.rng['data']
        self.truth, table = gp_truth(self.model, self.config.gp(), rng,
                                     data['truth_grid'])
        write_npz(self.path('truth.npz'), self.config.hash,
                  times=np.linspace(0, self.model.T, len(table)),
                  xs=np.linspace(self.model.a, self.model.b, len(table)), table=table)
        t, x = default_layout(self.model, data['n_x'], data['n_t'])
        dataset = simulate_dataset(self.model, self.truth, t, x, rng,
                                   noise=data['noise'], nx=data['oracle_nx'],
                                   nt=data['oracle_nt'])
        dataset.provenance['sha256'] = dataset.write(self.path('data.csv'),
                                                     self.config.hash)
        return dataset

    def record_dataset(self, run):
        from .models import DatasetRecord
        provenance = self.dataset.provenance
        sha256 = provenance.get('sha256') or file_sha256(self.path('data.csv'))
        DatasetRecord.objects.create(
            run=run, sha256=sha256, records=len(self.dataset),
            source='File' if provenance.get('source') == 'file' else 'Simulated')

    # Surrogate

    def build_net(self):
        network = self.config['network']
        net = SurrogateNet(self.basis, alpha_scale=self.prior.marginal_std,
                           width=network['width'], depth=network['depth'],
                           seed=network['seed'])
        init = self.init_weights
        if init:
            source, _ = load_checkpoint(init, self.basis)
            net.load_state_dict(source.state_dict())
            log.info('Initialised the surrogate from %s', init)
        return net

    def load_net(self):
        if self.net is None:
            if os.path.exists(self.path('surrogate.pt')):
                self.net, metadata = load_checkpoint(self.path('surrogate.pt'),
                                                     self.basis)
                if metadata.get('config_hash') not in (None, self.config.hash):
                    raise ValidationError('surrogate.pt belongs to another config')
            else:
                self.net = self.build_net()
        return self.net

    def restore_weights(self, path):
        """Load refined weights saved alongside a chain into the current net."""
        source, metadata = load_checkpoint(path, self.basis)
        if metadata.get('config_hash') != self.config.hash:
            raise ValidationError('%s belongs to another config' % path)
        self.net.load_state_dict(source.state_dict())
        log.info('Restored refined surrogate weights from %s', path)

    def save_net(self):
        save_checkpoint(self.net, self.path('surrogate.pt'),
                        config_hash=self.config.hash)

    def training_measure(self, regime):
        if regime == 'general':
            return UniformBox.general(self.basis)
        if self.laplace is not None:
            return self.laplace.alpha_measure()
        return GaussianMeasure(self.prior.mean, self.prior.covariance)

    def train_surrogate(self, regime):
        net = self.load_net()
        result = train(net, self.model, self.basis, self.config.loss_spec(),
                       self.training_measure(regime), self.rng['training'],
                       self.config.train_config(regime))
        write_trace(result.trace, self.path('loss_%s.csv' % regime))
        self.save_net()
        self.summary['training_%s' % regime] = {
            'steps': result.steps, 'reason': result.reason,
            'final_loss': float(result.trace['total'].iloc[-1]) if result.steps else None}
        return result

    # Posterior, MAP and Laplace

    def posterior(self, fine=False):
        ds = self.dataset
        if fine:
            fd = self.config['fd']
            forward = FiniteDifferenceForward(self.model, self.basis,
                                              Grid.build(self.model, fd['nx'], fd['nt']),
                                              ds.t, ds.x)
        else:
            forward = SurrogateForward(self.load_net(), ds.t, ds.x)
        return PosteriorModel(self.prior, self.config.noise_prior(), forward, ds.z)

    def estimate_map(self):
        params = self.config['map']
        net = self.load_net()
        trainer = None
        if self.config['training']['regime'] == 'adaptive':
            trainer = make_local_trainer(net, self.model, self.basis,
                                         self.config.loss_spec(), self.rng['map'],
                                         tolerance=params['local_tol'],
                                         max_steps=params['local_steps'],
                                         lr=params['local_lr'])
        posterior = self.posterior()
        result = map_estimate(posterior, self.prior.mean,
                              self.config.noise_prior().mode or 1.0,
                              self.config.map_config(), local_trainer=trainer)
        self.laplace = laplace_at(posterior, result.theta)
        write_npz(self.path('laplace.npz'), self.config.hash, mode=self.laplace.mode,
                  covariance=self.laplace.covariance)
        self.save_net()
        self.summary['map'] = {'alpha': result.alpha, 'sigma': result.sigma,
                               'log_post': result.log_post,
                               'iterations': result.iterations,
                               'reason': result.reason}
        return result

    def load_laplace(self):
        if self.laplace is None:
            if not os.path.exists(self.path('laplace.npz')):
                raise ImproperlyConfigured('No Laplace fit in %s; run "map" first'
                                           % self.out_dir)
            data = read_npz(self.path('laplace.npz'), self.config.hash)
            self.laplace = LaplaceApprox(data['mode'], data['covariance'])
        return self.laplace

    # Sampling

    def online_refiner(self):
        training = self.config['training']
        if training['regime'] != 'adaptive' or not training['online_steps']:
            return None
        net, rng = self.net, self.rng['training']

        def refine(chain):
            warm = chain.samples('warmup')
            bank = SampleBank.from_chain(warm[:, :-1], np.exp(warm[:, -1]),
                                         weighted=training['weighted_bank'])
            adapt_online(net, self.model, self.basis, self.config.loss_spec(), bank,
                         rng, steps=training['online_steps'], lr=training['online_lr'])
            return True

        return refine

    def sample(self, scheme=None, delayed=None, resume=False, name='chain'):
        """Run one chain; returns the chain and its sidecar metadata."""
        sampler = self.config['sampler']
        scheme = scheme or sampler['scheme']
        delayed = sampler['delayed_acceptance'] if delayed is None else delayed
        laplace = self.load_laplace()
        self.load_net()
        kernel = make_kernel(scheme, laplace.covariance, step=sampler['step'],
                             n_leapfrog=sampler['n_leapfrog'])
        adapter = Adapter(kernel, gain_exponent=sampler['gain_exponent'],
                          refresh=sampler['refresh'], shrinkage=sampler['shrinkage'])
        rng = self.rng['sampler']
        refine = self.online_refiner() if name == 'chain' else None
        # Online refinement changes the weights and draws from the training stream.
        streams = {'training': self.rng['training']} if refine else {}
        chain_path, snapshot_path = self.path('%s.csv' % name), self.path('%s.npz' % name)
        weights_path = self.path('%s_surrogate.pt' % name)
        chain = None
        if resume and os.path.exists(chain_path):
            chain, found = read_chain(chain_path)
            if found != self.config.hash:
                raise ValidationError('Cannot resume %s: written with config %s'
                                      % (chain_path, found))
            if os.path.exists(snapshot_path):
                load_snapshot(snapshot_path, adapter, rng, streams)
            else:
                log.warning('No adaptation snapshot for %s, adapting afresh',
                            chain_path)
            if refine and os.path.exists(weights_path):
                self.restore_weights(weights_path)
            log.info('Resuming %s from iteration %d', chain_path, len(chain) - 1)

        def on_flush():
            if refine:
                save_checkpoint(self.net, weights_path, config_hash=self.config.hash)
            save_snapshot(snapshot_path, adapter, rng, streams)

        writer = ChainWriter(chain_path, self.config.hash, every=sampler['flush_every'],
                             on_flush=on_flush)
        fine = self.posterior(fine=True) if delayed else None
        started = time.perf_counter()
        result = run_chain(self.posterior(), kernel, laplace.mode,
                           sampler['warmup'], sampler['samples'], rng, fine=fine,
                           refine=refine,
                           refine_every=self.config['training']['online_every'],
                           adapter=adapter, writer=writer, chain=chain)
        wall_time = time.perf_counter() - started
        if name == 'chain' and self.config['training']['regime'] == 'adaptive':
            self.save_net()
        chain = result.chain
        metadata = {
            'config_hash': self.config.hash,
            'scheme': scheme,
            'delayed_acceptance': bool(delayed),
            'wall_time': wall_time,
            'iterations': len(chain) - 1,
            'step': kernel.step,
            'fine_evaluations': chain.fine_evaluations,
            'acceptance': {
                'warmup': chain.acceptance_rate('warmup', stage=1),
                'stage1': chain.acceptance_rate('sample', stage=1),
                'stage2': chain.acceptance_rate('sample', stage=2),
                'stage2_given_stage1': chain.stage2_given_stage1('sample'),
            },
        }
        write_json(self.path('%s.json' % name), metadata)
        return chain, metadata

    # Diagnostics

    def diagnose(self, chain, runs):
        params = self.config['diagnostics']
        self.load_net()
        samples = chain.samples('sample')
        laplace = self.load_laplace()
        report = diagnostics.ess_report(samples)
        self.write_csv(report.to_frame(), 'ess.csv')

        times = np.asarray(params['slice_fractions']) * self.model.T
        xs = np.linspace(self.model.a, self.model.b, params['n_x'])
        profile = diagnostics.profile_summary(samples[:, :-1], self.basis, times, xs,
                                              params['level'])
        self.write_csv(profile.to_frame(), 'profile.csv')
        laplace_band = diagnostics.laplace_profile(laplace, self.basis, times, xs,
                                                   self.rng['diagnostics'],
                                                   params['profile_samples'],
                                                   params['level'])
        self.write_csv(laplace_band.to_frame(), 'profile_laplace.csv')

        component = self.basis.index(*params['trace_component'])
        self.write_csv(diagnostics.trace_summary(samples, component,
                                                 params['trace_window']), 'trace.csv')
        self.write_csv(diagnostics.predictive_check(
            self.model, self.basis, samples[:, :-1].mean(axis=0), self.dataset.t,
            self.dataset.x, self.dataset.z, self.config['fd']['nx'],
            self.config['fd']['nt']), 'predictive.csv')

        costs = diagnostics.cost_report(runs)
        self.write_csv(costs, 'cost.csv')
        found = {
            'min_ess': report.min,
            'median_ess': report.median,
            'l1_error': diagnostics.surrogate_l1_error(
                self.net, self.model, self.basis, laplace.alpha,
                self.config['data']['oracle_nx'], self.config['data']['oracle_nt']),
            'hellinger_bound': diagnostics.hellinger_bound_estimate(
                samples, self.net, self.model, self.basis, self.config.loss_spec(),
                params['hellinger_samples'], seed=self.config.seed % 2 ** 32),
            'costs': costs.to_dict(orient='records'),
        }
        if self.truth is not None:
            found['coverage'] = diagnostics.coverage(profile, self.truth)
            found['coverage_laplace'] = diagnostics.coverage(laplace_band, self.truth)
        self.summary['diagnostics'] = found
        return found


def cost_row(chain, metadata):
    """Timing and ESS of one sampled chain, labelled by its scheme."""
    report = diagnostics.ess_report(chain.samples('sample'))
    label = ('da-' if metadata['delayed_acceptance'] else '') + metadata['scheme']
    return {'scheme': label, 'time': metadata['wall_time'],
            'min_ess': report.min, 'median_ess': report.median}


def chain_runs(ctx, chain, metadata):
    """Sample the configured comparison schemes and collect timing rows."""
    runs = [cost_row(chain, metadata)]
    for scheme in ctx.config['sampler']['comparisons']:
        other, info = ctx.sample(scheme=scheme, delayed=False,
                                 name='chain_%s' % scheme)
        runs.append(cost_row(other, info))
    return runs


def run(config, out_dir, record=True):
    """Execute the full pipeline in `out_dir`.

    MAP with local training, Laplace fit, training on the Laplace measure,
    warm-up with online refinement, then frozen-surrogate sampling (with
    delayed acceptance when configured) and diagnostics. With no sampling
    iterations only the MAP and Laplace artifacts are produced.

    """
    ctx = RunContext(config, out_dir)
    run_record = open_record(ctx, 'run') if record else None
    try:
        with ctx.stage('config'):
            ctx.write_config()
        with ctx.stage('data'):
            ctx.prepare()
            # A full run always starts from freshly initialised weights.
            ctx.net = ctx.build_net()
            if run_record is not None:
                ctx.record_dataset(run_record)
        regime = config['training']['regime']
        if regime == 'general':
            with ctx.stage('train_general'):
                ctx.train_surrogate('general')
        with ctx.stage('map'):
            ctx.estimate_map()
        sampler = config['sampler']
        if sampler['samples'] > 0:
            if regime == 'adaptive':
                with ctx.stage('train_adaptive'):
                    ctx.train_surrogate('adaptive')
            with ctx.stage('sample'):
                chain, metadata = ctx.sample()
                runs = chain_runs(ctx, chain, metadata)
            with ctx.stage('diagnose'):
                ctx.diagnose(chain, runs)
    except StageError as exc:
        if run_record is not None:
            run_record.mark_failed(exc.stage, json_tree(ctx.summary))
        raise
    ctx.summary['status'] = 'completed'
    ctx.write_summary()
    if run_record is not None:
        run_record.mark_completed(json_tree(ctx.summary))
    return ctx


def open_record(ctx, command):
    from .models import ExperimentRun
    return ExperimentRun.objects.create(out_dir=os.path.abspath(ctx.out_dir),
                                        config_hash=ctx.config.hash,
                                        seed=str(ctx.config.seed), command=command)


def replicate(config, n, out_dir, record=True):
    """Run the pipeline on `n` datasets simulated with derived seeds.

    Returns the aggregated cost table, also written to `costs.csv`.

    """
    if n < 1:
        raise ValueError('At least one replicate is needed')
    rows = []
    seeds = np.random.SeedSequence(config.seed).generate_state(n, dtype=np.uint64)
    for i, seed in enumerate(seeds):
        tree = dict(config.tree, seed=int(seed))
        ctx = run(ExperimentConfig(tree), os.path.join(out_dir, 'replicate_%02d' % i),
                  record=record)
        for row in ctx.summary.get('diagnostics', {}).get('costs', []):
            rows.append(dict(row, replicate=i))
    table = pd.DataFrame(rows)
    if not table.empty:
        table = diagnostics.aggregate_costs(table)
    write_csv(table, os.path.join(out_dir, 'costs.csv'), config.hash)
    return table


def diagnose_runs(run_dirs, out_dir=None):
    """Cost table across run directories that share one config hash."""
    hashes, runs = set(), []
    for path in run_dirs:
        summary_path = os.path.join(path, 'summary.json')
        if not os.path.exists(summary_path):
            raise ValidationError('%s has no summary.json' % path)
        with open(summary_path) as fobj:
            summary = json.load(fobj)
        hashes.add(summary.get('config_hash'))
        for row in summary.get('diagnostics', {}).get('costs', []):
            runs.append(dict(row, run=os.path.basename(os.path.normpath(path))))
    if len(hashes) > 1:
        raise ValidationError('Refusing to combine runs with different config '
                              'hashes: %s' % ', '.join(sorted(map(str, hashes))))
    table = pd.DataFrame(runs)
    if not table.empty:
        table = diagnostics.aggregate_costs(table)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(table, os.path.join(out_dir, 'costs.csv'), hashes.pop())
    return table


def load_run_config(run_dir):
    """Rebuild the `ExperimentConfig` snapshot stored in a run directory."""
    path = os.path.join(run_dir, 'config.json')
    if not os.path.exists(path):
        raise ValidationError('%s has no config.json' % run_dir)
    with open(path) as fobj:
        snapshot = json.load(fobj)
    config = ExperimentConfig(snapshot['config'])
    if config.hash != snapshot['config_hash']:
        raise ValidationError('%s: config.json does not match its recorded hash'
                              % run_dir)
    return config


def diagnose_run(run_dir):
    """Recompute the diagnostics of a sampled run directory."""
    ctx = RunContext(load_run_config(run_dir), run_dir)
    with ctx.stage('diagnose'):
        ctx.prepare()
        ctx.load_net()
        chain_path = ctx.path('chain.csv')
        if not os.path.exists(chain_path):
            raise ValidationError('%s has no chain.csv; run "sample" first' % run_dir)
        chain, found = read_chain(chain_path)
        if found != ctx.config.hash:
            raise ValidationError('%s was written with config %s' % (chain_path, found))
        runs = []
        names = ['chain'] + ['chain_%s' % s for s in ctx.config['sampler']['comparisons']]
        for name in names:
            if not os.path.exists(ctx.path('%s.json' % name)):
                continue
            with open(ctx.path('%s.json' % name)) as fobj:
                metadata = json.load(fobj)
            other = chain if name == 'chain' else read_chain(ctx.path('%s.csv' % name))[0]
            runs.append(cost_row(other, metadata))
        ctx.diagnose(chain, runs)
    ctx.summary['status'] = 'completed'
    ctx.write_summary()
    return ctx
