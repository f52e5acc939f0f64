"""Conditional normalizing flows.

A :class:`ConditionalFlow` maps a target ``x`` (parameters for a posterior flow,
flattened data for a likelihood flow) to a latent ``z`` given a conditioning
vector. The density follows from the change of variables,
``log q(x | c) = log p(z) + log |det dz/dx|``.

Layers are applied in the ``x -> z`` direction::

    standardize -> coupling -> permute -> coupling -> ... -> coupling

Couplings are rational-quadratic splines (identity tails outside
``[-bound, bound]``) or affine. Every coupling starts out as the identity map
because the last layer of its conditioner is zero-initialized.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import densities
from .densities import DistributionSpec
from .errors import ContractError, TrainingError

DTYPE = torch.float64

ACTIVATIONS = {"silu": nn.SiLU, "tanh": nn.Tanh, "elu": nn.ELU, "gelu": nn.GELU, "linear": nn.Identity}


def mlp(n_in: int, hidden: tuple[int, ...], n_out: int, activation: str = "silu", zero_last: bool = False) -> nn.Sequential:
    """Fully connected network in float64."""
    act = ACTIVATIONS[activation]
    layers: list[nn.Module] = []
    width = n_in
    for h in hidden:
        layers += [nn.Linear(width, h, dtype=DTYPE), act()]
        width = h
    last = nn.Linear(width, n_out, dtype=DTYPE)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------
# rational-quadratic spline
# --------------------------------------------------------------------------

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(0 + _DERIV_SHIFT) + MIN_DERIVATIVE == 1, so zero parameters give slope 1
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


def _knots(unnormalized: Tensor, bound: float, min_size: float) -> tuple[Tensor, Tensor]:
    bins = unnormalized.shape[-1]
    sizes = torch.softmax(unnormalized, dim=-1)
    sizes = min_size + (1.0 - min_size * bins) * sizes
    cum = torch.cumsum(sizes, dim=-1)
    cum = F.pad(cum, (1, 0), value=0.0)
    cum = 2.0 * bound * cum - bound
    cum = torch.cat([torch.full_like(cum[..., :1], -bound), cum[..., 1:-1], torch.full_like(cum[..., :1], bound)], dim=-1)
    return cum, cum[..., 1:] - cum[..., :-1]


def rq_spline(
    x: Tensor,
    unnormalized_widths: Tensor,
    unnormalized_heights: Tensor,
    unnormalized_derivatives: Tensor,
    bound: float,
    inverse: bool = False,
) -> tuple[Tensor, Tensor]:
    """Monotone rational-quadratic spline on ``[-bound, bound]``, identity outside.

    Shapes: ``x`` is ``(...,)``; widths and heights ``(..., K)``; interior
    derivatives ``(..., K - 1)``. Returns the transformed value and the
    elementwise log absolute derivative of the map that was applied.
    """
    inside = (x > -bound) & (x < bound)
    xs = torch.where(inside, x, torch.zeros_like(x))

    cumw, widths = _knots(unnormalized_widths, bound, MIN_BIN_WIDTH)
    cumh, heights = _knots(unnormalized_heights, bound, MIN_BIN_HEIGHT)
    interior = MIN_DERIVATIVE + F.softplus(unnormalized_derivatives + _DERIV_SHIFT)
    ones = torch.ones_like(interior[..., :1])
    derivs = torch.cat([ones, interior, ones], dim=-1)

    knots = cumh if inverse else cumw
    idx = torch.searchsorted(knots[..., 1:-1].contiguous(), xs[..., None].contiguous(), right=True)

    def pick(t: Tensor) -> Tensor:
        return torch.gather(t, -1, idx)[..., 0]

    x_k, w_k = pick(cumw), pick(widths)
    y_k, h_k = pick(cumh), pick(heights)
    d_k = pick(derivs)
    d_k1 = torch.gather(derivs[..., 1:], -1, idx)[..., 0]
    s_k = h_k / w_k

    if not inverse:
        xi = (xs - x_k) / w_k
        one_m = xi * (1 - xi)
        denom = s_k + (d_k1 + d_k - 2 * s_k) * one_m
        y = y_k + h_k * (s_k * xi**2 + d_k * one_m) / denom
        dnum = s_k**2 * (d_k1 * xi**2 + 2 * s_k * one_m + d_k * (1 - xi) ** 2)
        logabsdet = torch.log(dnum) - 2 * torch.log(denom)
    else:
        dy = xs - y_k
        sum_d = d_k1 + d_k - 2 * s_k
        a = h_k * (s_k - d_k) + dy * sum_d
        b = h_k * d_k - dy * sum_d
        c = -s_k * dy
        disc = torch.clamp(b**2 - 4 * a * c, min=0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        y = xi * w_k + x_k
        one_m = xi * (1 - xi)
        denom = s_k + sum_d * one_m
        dnum = s_k**2 * (d_k1 * xi**2 + 2 * s_k * one_m + d_k * (1 - xi) ** 2)
        logabsdet = -(torch.log(dnum) - 2 * torch.log(denom))

    out = torch.where(inside, y, x)
    lad = torch.where(inside, logabsdet, torch.zeros_like(logabsdet))
    return out, lad


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Standardize(nn.Module):
    """Fixed elementwise affine map ``(x - loc) / scale``."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("loc", torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("scale", torch.ones(dim, dtype=DTYPE))

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        lad = -torch.log(self.scale).sum().expand(x.shape[0])
        return (x - self.loc) / self.scale, lad

    def inverse(self, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        lad = torch.log(self.scale).sum().expand(z.shape[0])
        return z * self.scale + self.loc, lad


class Permutation(nn.Module):
    """Fixed coordinate permutation; volume preserving."""

    def __init__(self, perm: np.ndarray):
        super().__init__()
        perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        return x[:, self.perm], x.new_zeros(x.shape[0])

    def inverse(self, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        return z[:, self.inv_perm], z.new_zeros(z.shape[0])


class _Coupling(nn.Module):
    """Transforms coordinates ``split:`` conditioned on ``:split`` and ``cond``."""

    params_per_dim: int = 0

    def __init__(self, dim: int, cond_dim: int, hidden: tuple[int, ...], activation: str):
        super().__init__()
        self.split = dim // 2
        self.n_out = dim - self.split
        self.net = mlp(self.split + cond_dim, hidden, self.n_out * self.params_per_dim, activation, zero_last=True)

    def _params(self, x_id: Tensor, cond: Tensor) -> Tensor:
        h = self.net(torch.cat([x_id, cond], dim=-1))
        return h.reshape(h.shape[0], self.n_out, self.params_per_dim)

    def _couple(self, x: Tensor, cond: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        x_id, x_tr = x[:, : self.split], x[:, self.split :]
        y_tr, lad = self._transform(x_tr, self._params(x_id, cond), inverse)
        return torch.cat([x_id, y_tr], dim=-1), lad.sum(-1)

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        return self._couple(x, cond, inverse=False)

    def inverse(self, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        return self._couple(z, cond, inverse=True)


AFFINE_LOG_SCALE_CLAMP = 3.0


class AffineCoupling(_Coupling):
    """``y = x * exp(s) + t`` on the transformed half.

    The raw log-scale ``r`` is soft-clamped, ``s = c * tanh(r / c)``, so stacked
    layers cannot overflow.
    """

    params_per_dim = 2

    def _transform(self, x: Tensor, params: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        c = AFFINE_LOG_SCALE_CLAMP
        shift, log_scale = params[..., 0], c * torch.tanh(params[..., 1] / c)
        if not inverse:
            return x * torch.exp(log_scale) + shift, log_scale
        return (x - shift) * torch.exp(-log_scale), -log_scale


class SplineCoupling(_Coupling):
    """Rational-quadratic spline coupling with ``bins`` bins on ``[-bound, bound]``."""

    def __init__(self, dim: int, cond_dim: int, hidden: tuple[int, ...], activation: str, bins: int = 8, bound: float = 5.0):
        self.bins = bins
        self.bound = bound
        self.params_per_dim = 3 * bins - 1
        super().__init__(dim, cond_dim, hidden, activation)

    def _transform(self, x: Tensor, params: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        k = self.bins
        return rq_spline(x, params[..., :k], params[..., k : 2 * k], params[..., 2 * k :], self.bound, inverse)


# --------------------------------------------------------------------------
# flow
# --------------------------------------------------------------------------


@dataclass
class FlowConfig:
    """Architecture of a :class:`ConditionalFlow`."""

    target_dim: int
    cond_dim: int
    n_couplings: int = 4
    coupling: str = "spline"
    bins: int = 8
    bound: float = 5.0
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "silu"
    base: str = "gaussian"
    base_df: float = 100.0
    perm_seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.coupling not in ("spline", "affine"):
            raise ContractError(f"unknown coupling {self.coupling!r}")
        if self.base not in ("gaussian", "student-t"):
            raise ContractError(f"unknown base distribution {self.base!r}")
        if self.target_dim < 1 or self.cond_dim < 0 or self.n_couplings < 1:
            raise ContractError("flow dimensions must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "FlowConfig":
        return cls(**data)


def _permutations(dim: int, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    perms = []
    for _ in range(count):
        if dim == 1:
            perms.append(np.zeros(1, dtype=np.int64))
            continue
        perm = rng.permutation(dim)
        while np.array_equal(perm, np.arange(dim)):
            perm = rng.permutation(dim)
        perms.append(perm)
    return perms


class ConditionalFlow(nn.Module):
    """Normalizing flow ``x -> z`` conditioned on a vector ``cond``."""

    def __init__(self, config: FlowConfig):
        super().__init__()
        self.config = config
        c = config
        self.base = (
            DistributionSpec.gaussian(0.0, 1.0, dim=c.target_dim)
            if c.base == "gaussian"
            else DistributionSpec.student_t(c.base_df, c.target_dim)
        )
        self.standardize = Standardize(c.target_dim)
        self.register_buffer("cond_loc", torch.zeros(c.cond_dim, dtype=DTYPE))
        self.register_buffer("cond_scale", torch.ones(c.cond_dim, dtype=DTYPE))
        perms = _permutations(c.target_dim, c.n_couplings - 1, c.perm_seed)
        layers: list[nn.Module] = []
        for i in range(c.n_couplings):
            if c.coupling == "spline":
                layers.append(SplineCoupling(c.target_dim, c.cond_dim, c.hidden, c.activation, c.bins, c.bound))
            else:
                layers.append(AffineCoupling(c.target_dim, c.cond_dim, c.hidden, c.activation))
            if i < c.n_couplings - 1:
                layers.append(Permutation(perms[i]))
        # undo the accumulated shuffle so that an untrained flow is exactly the identity
        total = np.arange(c.target_dim)
        for perm in perms:
            total = total[perm]
        if not np.array_equal(total, np.arange(c.target_dim)):
            layers.append(Permutation(np.argsort(total)))
        self.layers = nn.ModuleList(layers)

    @property
    def target_dim(self) -> int:
        return self.config.target_dim

    @property
    def cond_dim(self) -> int:
        return self.config.cond_dim

    def _check(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        x = torch.as_tensor(x, dtype=DTYPE)
        cond = torch.as_tensor(cond, dtype=DTYPE)
        if x.ndim == 1:
            x = x[None]
        if cond.ndim == 1:
            cond = cond[None].expand(x.shape[0], -1)
        if x.shape[-1] != self.target_dim or cond.shape[-1] != self.cond_dim:
            raise ContractError(
                f"flow expects x[..., {self.target_dim}] and cond[..., {self.cond_dim}], "
                f"got {tuple(x.shape)} and {tuple(cond.shape)}"
            )
        if cond.shape[0] != x.shape[0]:
            raise ContractError("x and cond batch sizes differ")
        return x, cond

    def _cond(self, cond: Tensor) -> Tensor:
        return (cond - self.cond_loc) / self.cond_scale

    def set_standardization(self, x: np.ndarray | None = None, cond: np.ndarray | None = None) -> None:
        """Fix the input and conditioning standardization from training data."""
        with torch.no_grad():
            if x is not None:
                x = np.asarray(x, dtype=np.float64).reshape(-1, self.target_dim)
                self.standardize.loc.copy_(torch.as_tensor(x.mean(0)))
                self.standardize.scale.copy_(torch.as_tensor(_safe_std(x)))
            if cond is not None and self.cond_dim:
                cond = np.asarray(cond, dtype=np.float64).reshape(-1, self.cond_dim)
                self.cond_loc.copy_(torch.as_tensor(cond.mean(0)))
                self.cond_scale.copy_(torch.as_tensor(_safe_std(cond)))

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Map targets to latents; returns ``(z, log|det dz/dx|)``."""
        x, cond = self._check(x, cond)
        h = self._cond(cond)
        z, logdet = self.standardize(x, h)
        for layer in self.layers:
            z, lad = layer(z, h)
            logdet = logdet + lad
        return z, logdet

    def inverse(self, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Map latents to targets; returns ``(x, log|det dx/dz|)``."""
        z, cond = self._check(z, cond)
        h = self._cond(cond)
        x = z
        logdet = z.new_zeros(z.shape[0])
        for layer in reversed(self.layers):
            x, lad = layer.inverse(x, h)
            logdet = logdet + lad
        x, lad = self.standardize.inverse(x, h)
        return x, logdet + lad

    def log_prob(self, x: Tensor, cond: Tensor) -> Tensor:
        z, logdet = self.forward(x, cond)
        return densities.log_prob(self.base, z) + logdet

    def sample(self, cond: Tensor, n: int, rng: np.random.Generator) -> Tensor:
        """Draw ``n`` targets per conditioning row.

        ``cond`` of shape ``(C,)`` gives ``(n, D)``; ``(B, C)`` gives ``(B, n, D)``.
        """
        if int(n) < 1:
            raise ContractError("n must be >= 1")
        cond = torch.as_tensor(cond, dtype=DTYPE)
        single = cond.ndim == 1
        cond = cond[None] if single else cond
        b = cond.shape[0]
        z = torch.as_tensor(densities.sample(self.base, b * n, rng))
        with torch.no_grad():
            x, _ = self.inverse(z, cond.repeat_interleave(n, dim=0))
        x = x.reshape(b, n, self.target_dim)
        return x[0] if single else x


def _safe_std(x: np.ndarray) -> np.ndarray:
    sd = x.std(0)
    return np.where(sd > 1e-8, sd, 1.0)


# --------------------------------------------------------------------------
# parameter updates
# --------------------------------------------------------------------------


def fit_step(module: nn.Module, optimizer: torch.optim.Optimizer, payload: dict | None = None) -> nn.Module:
    """Apply one optimizer step using the gradients already stored on ``module``.

    Raises:
        TrainingError: if any gradient is non-finite; parameters are left untouched.
    """
    bad = [
        name
        for name, p in module.named_parameters()
        if p.grad is not None and not bool(torch.isfinite(p.grad).all())
    ]
    if bad:
        info = dict(payload or {})
        info["nonfinite_gradients"] = bad
        raise TrainingError("non-finite gradient", info)
    optimizer.step()
    return module


def flat_parameters(module: nn.Module) -> np.ndarray:
    params = [p.detach().reshape(-1) for p in module.parameters()]
    if not params:
        return np.zeros(0)
    return torch.cat(params).numpy().copy()


def load_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    flat = torch.as_tensor(np.asarray(flat, dtype=np.float64))
    expected = sum(p.numel() for p in module.parameters())
    if flat.numel() != expected:
        raise ContractError(f"expected {expected} parameters, got {flat.numel()}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].reshape(p.shape))
            offset += n
