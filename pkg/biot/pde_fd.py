"""Finite-difference solver for the transient fin equation.

    c0 u_t = c1 u_xx + (c2 / x) u_x - Bi(t, x) u,    t in [0, T], x in [a, b]

with Dirichlet data u(t, a) = ua(t), u(t, b) = ub(t) and u(0, x) = u0(x).

The scheme is backward Euler in time with centred differences in space; the
reaction term Bi u is taken from the previous time level, so every step is a
single tridiagonal solve with a matrix that does not change between steps.

"""

import logging

from dataclasses import dataclass, field

import numpy as np

from scipy.interpolate import RegularGridInterpolator
from scipy.interpolate import make_interp_spline
from scipy.linalg import lapack

from .exceptions import DomainError
from .exceptions import NonFiniteError
from .exceptions import SingularSystemError


log = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-14

# Relative slack when deciding whether a point lies on the domain boundary.
DOMAIN_SLACK = 1e-12


def as_profile(value):
    """Turn boundary/initial data into a vectorised callable.

    Arguments:
        value   a callable, a number (constant profile) or a pair
                `(nodes, values)` tabulating the profile

    """
    if callable(value):
        return value
    if isinstance(value, (tuple, list)) and len(value) == 2:
        nodes, values = (np.asarray(v, dtype=float) for v in value)
        spline = make_interp_spline(nodes, values, k=1)
        return lambda s: spline(np.asarray(s, dtype=float))
    constant = float(value)
    return lambda s: np.full(np.shape(s), constant)


@dataclass(frozen=True)
class PdeModel:
    """Coefficients, domain and boundary/initial data of the fin equation."""

    c0: float
    c1: float
    c2: float
    a: float
    b: float
    T: float
    u0: object = field(repr=False)
    ua: object = field(repr=False)
    ub: object = field(repr=False)

    def __post_init__(self):
        for name in ('c0', 'c1', 'c2'):
            if not getattr(self, name) > 0:
                raise ValueError('%s must be positive' % name)
        if not self.a > 0:
            raise ValueError('a must be positive, the 1/x term is singular at 0')
        if not self.b > self.a:
            raise ValueError('b must exceed a')
        if not self.T > 0:
            raise ValueError('T must be positive')
        for name in ('u0', 'ua', 'ub'):
            object.__setattr__(self, name, as_profile(getattr(self, name)))

    def contains(self, t, x):
        """Return a boolean mask of the points inside [0, T] x [a, b]."""
        t, x = np.asarray(t, dtype=float), np.asarray(x, dtype=float)
        t_slack, x_slack = DOMAIN_SLACK * self.T, DOMAIN_SLACK * (self.b - self.a)
        return ((t >= -t_slack) & (t <= self.T + t_slack) &
                (x >= self.a - x_slack) & (x <= self.b + x_slack))

    def check_domain(self, t, x):
        """Raise `DomainError` unless all points lie inside the domain."""
        inside = self.contains(t, x)
        if not np.all(inside):
            bad = np.flatnonzero(~np.atleast_1d(inside))[0]
            t_bad = np.atleast_1d(np.broadcast_to(t, inside.shape))[bad]
            x_bad = np.atleast_1d(np.broadcast_to(x, inside.shape))[bad]
            raise DomainError('Point (t=%g, x=%g) lies outside [0, %g] x [%g, %g]'
                              % (t_bad, x_bad, self.T, self.a, self.b))

    def boundary_value(self, t, x):
        """Evaluate the combined Dirichlet data u_BC on the boundary pieces.

        Points with t == 0 use u0, otherwise x == a uses ua and x == b uses
        ub. Points are expected to lie on the boundary.

        """
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float),
                                   np.asarray(x, dtype=float))
        mid = 0.5 * (self.a + self.b)
        edge = np.where(x < mid, self.ua(t), self.ub(t))
        return np.where(t <= 0.0, self.u0(x), edge)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform space-time grid; `dx` and `dt` derive from the model domain."""

    nx: int
    nt: int
    dx: float
    dt: float
    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, model, nx, nt):
        if nx < 3:
            raise ValueError('A grid needs at least 3 spatial nodes')
        if nt < 1:
            raise ValueError('A grid needs at least 1 time step')
        x = np.linspace(model.a, model.b, nx)
        t = np.linspace(0.0, model.T, nt + 1)
        return cls(nx=nx, nt=nt, dx=(model.b - model.a) / (nx - 1),
                   dt=model.T / nt, t=t, x=x)


class BiotField(object):
    """A Biot number Bi(t, x) that evaluates on broadcastable arrays."""

    def __init__(self, func, description=''):
        self._func = func
        self.description = description

    def __call__(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float),
                                   np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(self._func(t, x), dtype=float),
                               t.shape)

    def __repr__(self):
        return 'BiotField(%s)' % (self.description or self._func)

    @classmethod
    def constant(cls, value):
        value = float(value)
        return cls(lambda t, x: np.full(np.shape(t), value), 'constant %g' % value)

    @classmethod
    def from_function(cls, func, description=''):
        return cls(func, description)

    @classmethod
    def from_coeffs(cls, basis, alpha):
        """Realise the Chebyshev series with coefficients `alpha`."""
        alpha = np.array(alpha, dtype=float)
        return cls(lambda t, x: basis.eval_series(alpha, t, x),
                   'Chebyshev series of degree %d' % basis.degree)

    @classmethod
    def from_grid(cls, times, xs, table):
        """Bilinear interpolation of values tabulated on a (times, xs) grid."""
        interpolator = RegularGridInterpolator(
            (np.asarray(times, dtype=float), np.asarray(xs, dtype=float)),
            np.asarray(table, dtype=float), method='linear',
            bounds_error=False, fill_value=None)

        def evaluate(t, x):
            points = np.stack([np.ravel(t), np.ravel(x)], axis=-1)
            return interpolator(points).reshape(np.shape(t))

        return cls(evaluate, 'gridded %dx%d table' % np.shape(table))


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Solution values u[n, i] at times t[n] and nodes x[i]."""

    model: PdeModel = field(repr=False)
    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)

    def evaluate_at(self, t, x):
        return evaluate_at(self, t, x)


def _tridiagonal(model, grid):
    """Assemble the constant implicit operator on the interior nodes."""
    x = grid.x[1:-1]
    r = grid.dt / model.c0
    diffusion = model.c1 / grid.dx ** 2
    transport = model.c2 / (2.0 * grid.dx * x)
    lower = -r * (diffusion - transport)
    upper = -r * (diffusion + transport)
    diag = np.full(x.shape, 1.0 + 2.0 * r * diffusion)
    return lower, diag, upper


def solve_fd(model, bi, grid):
    """Solve the fin equation for the Biot number `bi` on `grid`.

    Arguments:
        model   a `PdeModel`
        bi      a `BiotField` (or any callable Bi(t, x) on arrays)
        grid    a `Grid` built for `model`

    Returns a `SpaceTimeField` holding the solution at every grid node. The
    Dirichlet and initial values are assigned, not approximated.

    """
    t, x = grid.t, grid.x
    u0, ua, ub = model.u0(x), model.ua(t), model.ub(t)
    # Reaction is explicit, so Bi is only needed up to the last-but-one level.
    bi_values = np.asarray(bi(t[:-1, None], x[None, 1:-1]), dtype=float)
    for name, values in (('u0', u0), ('ua', ua), ('ub', ub), ('Bi', bi_values)):
        if not np.all(np.isfinite(values)):
            raise NonFiniteError('Non-finite %s values on the grid' % name)

    lower, diag, upper = _tridiagonal(model, grid)
    # LAPACK's tridiagonal LU stores the sub/super diagonals without padding.
    dl, d, du, du2, ipiv, info = lapack.dgttrf(lower[1:], diag, upper[:-1])
    if info != 0 or np.min(np.abs(d)) < PIVOT_TOLERANCE:
        raise SingularSystemError('Tridiagonal factorisation failed (info=%d)'
                                  % info)

    r = grid.dt / model.c0
    u = np.empty((grid.nt + 1, grid.nx))
    u[0] = u0
    u[:, 0], u[:, -1] = ua, ub
    for n in range(grid.nt):
        interior = u[n, 1:-1]
        rhs = interior - r * bi_values[n] * interior
        rhs[0] -= lower[0] * ua[n + 1]
        rhs[-1] -= upper[-1] * ub[n + 1]
        solution, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0:
            raise SingularSystemError('Tridiagonal solve failed at step %d' % n)
        u[n + 1, 1:-1] = solution
    if not np.all(np.isfinite(u)):
        raise NonFiniteError('Non-finite values in the finite-difference solution')
    log.debug('Solved the fin equation on a %dx%d grid', grid.nt, grid.nx)
    return SpaceTimeField(model=model, t=t, x=x, u=u)


def evaluate_at(field, t, x):
    """Bilinear interpolation of a solution at arbitrary points.

    Arguments:
        field   a `SpaceTimeField`
        t, x    broadcastable arrays of coordinates inside the domain

    """
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float),
                               np.asarray(x, dtype=float))
    field.model.check_domain(t, x)
    t = np.clip(t, field.t[0], field.t[-1])
    x = np.clip(x, field.x[0], field.x[-1])
    interpolator = RegularGridInterpolator((field.t, field.x), field.u,
                                           method='linear')
    points = np.stack([t.ravel(), x.ravel()], axis=-1)
    return interpolator(points).reshape(t.shape)
