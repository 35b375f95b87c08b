"""Neural surrogate u(t, x, alpha) of the parametric fin-equation solution.

Anything callable as `solution(t, x, alpha) -> u` on torch tensors (a
`SurrogateNet`, a sum of networks, an analytic oracle) can be differentiated
with `eval_with_input_derivs` and plugged into `pde_residual`.

"""

import logging

from dataclasses import dataclass

import numpy as np
import torch

from torch import nn

from .exceptions import DomainError
from .exceptions import NonFiniteError


log = logging.getLogger(__name__)

DTYPE = torch.float64

CHECKPOINT_FORMAT = 'biot-surrogate'
CHECKPOINT_VERSION = 1


def as_tensor(value):
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=float), dtype=DTYPE)


class SurrogateNet(nn.Module):
    """Fully connected tanh network mapping (t, x, alpha) to u.

    Inputs are rescaled before the first layer: t and x onto [-1, 1] and
    every coefficient divided by its prior marginal standard deviation. The
    output is `output_shift + output_scale * network(...)`.

    Arguments:
        basis          the `ChebBasis` whose coefficients feed the network
        alpha_scale    per-coefficient scale (defaults to ones)
        width, depth   hidden layer width and count
        seed           seed of the Glorot-uniform initialisation

    """

    def __init__(self, basis, alpha_scale=None, width=256, depth=4, seed=0,
                 output_shift=0.0, output_scale=1.0):
        super(SurrogateNet, self).__init__()
        self.widths = [basis.size + 2] + [width] * depth + [1]
        self.seed = seed
        self.layers = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=DTYPE)
            for n_in, n_out in zip(self.widths[:-1], self.widths[1:]))
        if alpha_scale is None:
            alpha_scale = np.ones(basis.size)
        self.register_buffer('domain', as_tensor([basis.T, basis.a, basis.b]))
        self.register_buffer('alpha_scale', as_tensor(alpha_scale))
        self.register_buffer('output', as_tensor([output_shift, output_scale]))
        self.reset_parameters(seed)

    def reset_parameters(self, seed):
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers:
                fan_out, fan_in = layer.weight.shape
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def forward(self, t, x, alpha):
        """Evaluate the network on a batch.

        Arguments:
            t, x    tensors of shape (B,)
            alpha   tensor of shape (B, M), or (M,) shared by the batch

        """
        T, a, b = self.domain
        s = 2.0 * t / T - 1.0
        r = (2.0 * x - a - b) / (b - a)
        coeffs = alpha / self.alpha_scale
        if coeffs.dim() == 1:
            coeffs = coeffs.expand(t.shape[0], -1)
        h = torch.cat([s[:, None], r[:, None], coeffs], dim=-1)
        if not torch.all(torch.isfinite(h)):
            raise NonFiniteError('Non-finite surrogate input')
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        out = self.layers[-1](h).squeeze(-1)
        return self.output[0] + self.output[1] * out


@dataclass
class SurrogateEval:
    """Value and derivatives of a solution at a batch of points."""

    value: torch.Tensor
    u_t: torch.Tensor
    u_x: torch.Tensor
    u_xx: torch.Tensor
    grad_alpha: torch.Tensor = None


def _batch(t, x, alpha):
    t, x = as_tensor(t).reshape(-1), as_tensor(x).reshape(-1)
    t, x = torch.broadcast_tensors(t, x)
    alpha = as_tensor(alpha)
    if alpha.dim() == 1:
        alpha = alpha.expand(t.shape[0], -1)
    return t, x, alpha


def forward(solution, t, x, alpha):
    """Evaluate `solution` without tracking gradients."""
    t, x, alpha = _batch(t, x, alpha)
    with torch.no_grad():
        return solution(t, x, alpha)


def eval_with_input_derivs(solution, t, x, alpha, alpha_grad=True,
                           create_graph=False):
    """Evaluate `solution` together with u_t, u_x, u_xx and grad_alpha u.

    The x-derivatives come from nested forward-mode products (a dual of a
    dual), u_t from one forward-mode product and the coefficient gradient
    from reverse mode. With `create_graph` the results stay differentiable
    with respect to the network weights.

    """
    t, x, alpha = _batch(t, x, alpha)
    if alpha_grad:
        alpha = alpha.detach().clone().requires_grad_(True)
    ones = torch.ones_like(x)

    def along_x(x_):
        return torch.func.jvp(lambda z: solution(t, z, alpha), (x_,), (ones,))

    (value, u_x), (_, u_xx) = torch.func.jvp(along_x, (x,), (ones,))
    _, u_t = torch.func.jvp(lambda s: solution(s, x, alpha), (t,), (ones,))

    grad_alpha = None
    if alpha_grad:
        grad_alpha, = torch.autograd.grad(
            value.sum(), alpha, create_graph=create_graph, allow_unused=True)
        if grad_alpha is None:
            grad_alpha = torch.zeros_like(alpha)
    if not create_graph:
        value, u_t, u_x, u_xx = (v.detach() for v in (value, u_t, u_x, u_xx))
    result = SurrogateEval(value=value, u_t=u_t, u_x=u_x, u_xx=u_xx,
                           grad_alpha=grad_alpha)
    for name in ('value', 'u_t', 'u_x', 'u_xx'):
        if not torch.all(torch.isfinite(getattr(result, name))):
            raise NonFiniteError('Non-finite %s, the weights may have exploded'
                                 % name)
    return result


def series(basis, alpha, t, x):
    """Evaluate the Chebyshev series B(t, x) for a batch of coefficients."""
    t, x, alpha = _batch(t, x, alpha)
    terms = as_tensor(basis.eval_basis(t.detach().numpy(), x.detach().numpy()))
    return (terms * alpha).sum(dim=-1)


def pde_residual(solution, model, basis, t, x, alpha, create_graph=False):
    """Fin-equation residual of `solution` at a batch of points.

        c1 u_xx + (c2 / x) u_x - Bi u - c0 u_t,   Bi from the series of alpha

    """
    t, x, alpha = _batch(t, x, alpha)
    if torch.any(x < model.a):
        raise DomainError('Residual requested at x < a = %g' % model.a)
    derivs = eval_with_input_derivs(solution, t, x, alpha, alpha_grad=False,
                                    create_graph=create_graph)
    bi = series(basis, alpha.detach(), t, x)
    return (model.c1 * derivs.u_xx + model.c2 / x * derivs.u_x -
            bi * derivs.value - model.c0 * derivs.u_t)


def save_checkpoint(net, path, **metadata):
    """Write the layer shapes, buffers and weights of `net` to `path`."""
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'widths': list(net.widths),
        'seed': net.seed,
        'state': net.state_dict(),
        'metadata': metadata,
    }, path)
    log.info('Saved surrogate checkpoint to %s', path)


def load_checkpoint(path, basis):
    """Rebuild a `SurrogateNet` from `path`; returns (net, metadata)."""
    payload = torch.load(path, weights_only=True)
    if payload.get('format') != CHECKPOINT_FORMAT:
        raise ValueError('%s is not a surrogate checkpoint' % path)
    if payload['version'] > CHECKPOINT_VERSION:
        raise ValueError('Checkpoint version %d is newer than supported (%d)'
                         % (payload['version'], CHECKPOINT_VERSION))
    widths = payload['widths']
    if widths[0] != basis.size + 2:
        raise ValueError('Checkpoint expects %d coefficients, basis has %d'
                         % (widths[0] - 2, basis.size))
    net = SurrogateNet(basis, width=widths[1], depth=len(widths) - 2,
                       seed=payload['seed'])
    net.load_state_dict(payload['state'])
    return net, payload.get('metadata', {})
