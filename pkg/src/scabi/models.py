"""Posterior and likelihood approximators built from flows and summary networks.

All approximators share a small interface used by the losses and diagnostics:

``log_prob_multi(a, b)``
    log densities for ``K`` candidates per batch item, shape ``(B, K)``.
``sample(cond, n, rng)``
    draws without gradient tracking.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from . import densities
from .errors import ContractError
from .flows import DTYPE, ConditionalFlow, FlowConfig
from .simulators import JointTask
from .summaries import DeepSet, SummaryConfig


def _batch_data(Y) -> tuple[Tensor, bool]:
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if Y.ndim == 2:
        return Y[None], True
    if Y.ndim != 3:
        raise ContractError(f"data must have shape (J, d) or (B, J, d), got {tuple(Y.shape)}")
    return Y, False


class PosteriorModel(nn.Module):
    """``q(theta | Y)``: a flow over parameters conditioned on summarized data."""

    def __init__(self, flow_config: FlowConfig, data_shape: tuple[int, int], summary_config: SummaryConfig | None = None):
        super().__init__()
        self.data_shape = tuple(data_shape)
        self.summary = DeepSet(summary_config) if summary_config is not None else None
        expected = summary_config.output_dim if summary_config else int(np.prod(data_shape))
        if flow_config.cond_dim != expected:
            raise ContractError(f"posterior flow cond_dim must be {expected}")
        self.flow = ConditionalFlow(flow_config)

    @property
    def param_dim(self) -> int:
        return self.flow.target_dim

    def condition(self, Y: Tensor) -> Tensor:
        Y, _ = _batch_data(Y)
        if self.summary is not None:
            return self.summary(Y)
        return Y.reshape(Y.shape[0], -1)

    def set_standardization(self, theta: np.ndarray, Y: np.ndarray) -> None:
        if self.summary is not None:
            self.summary.set_standardization(Y)
            self.flow.set_standardization(x=theta)
        else:
            self.flow.set_standardization(x=theta, cond=np.asarray(Y).reshape(len(Y), -1))

    def log_prob(self, theta, Y) -> Tensor:
        theta = torch.as_tensor(theta, dtype=DTYPE)
        return self.flow.log_prob(theta, self.condition(Y))

    def log_prob_multi(self, theta, Y) -> Tensor:
        """``theta (B, K, D)`` against data ``(B, J, d)`` -> ``(B, K)``."""
        theta = torch.as_tensor(theta, dtype=DTYPE)
        b, k, d = theta.shape
        cond = self.condition(Y).repeat_interleave(k, dim=0)
        return self.flow.log_prob(theta.reshape(b * k, d), cond).reshape(b, k)

    def sample(self, Y, n: int, rng: np.random.Generator, latent_scale: float = 1.0) -> Tensor:
        """``(n, D)`` draws for one data set, ``(B, n, D)`` for a batch.

        ``latent_scale > 1`` widens the draws by scaling the base sample, which
        keeps the support unchanged.
        """
        Yb, single = _batch_data(Y)
        with torch.no_grad():
            cond = self.condition(Yb)
            if latent_scale == 1.0:
                draws = self.flow.sample(cond, n, rng)
            else:
                z = torch.as_tensor(_base_sample(self.flow, cond.shape[0] * n, rng)) * latent_scale
                x, _ = self.flow.inverse(z, cond.repeat_interleave(n, dim=0))
                draws = x.reshape(cond.shape[0], n, -1)
        return draws[0] if single else draws


class LikelihoodModel(nn.Module):
    """``q(Y | theta)``: a flow over the flattened data set conditioned on parameters."""

    def __init__(self, flow_config: FlowConfig, data_shape: tuple[int, int]):
        super().__init__()
        self.data_shape = tuple(data_shape)
        if flow_config.target_dim != int(np.prod(data_shape)):
            raise ContractError("likelihood flow target_dim must equal J * d")
        self.flow = ConditionalFlow(flow_config)

    def set_standardization(self, theta: np.ndarray, Y: np.ndarray) -> None:
        self.flow.set_standardization(x=np.asarray(Y).reshape(len(Y), -1), cond=theta)

    def log_prob(self, Y, theta) -> Tensor:
        Y, _ = _batch_data(Y)
        theta = torch.as_tensor(theta, dtype=DTYPE)
        return self.flow.log_prob(Y.reshape(Y.shape[0], -1), theta)

    def log_prob_multi(self, Y, theta) -> Tensor:
        """Data ``(B, J, d)`` against ``theta (B, K, D)`` -> ``(B, K)``."""
        Y, _ = _batch_data(Y)
        theta = torch.as_tensor(theta, dtype=DTYPE)
        b, k, d = theta.shape
        flat = Y.reshape(b, -1).repeat_interleave(k, dim=0)
        return self.flow.log_prob(flat, theta.reshape(b * k, d)).reshape(b, k)

    def sample(self, theta, n: int, rng: np.random.Generator) -> Tensor:
        theta = torch.as_tensor(theta, dtype=DTYPE)
        draws = self.flow.sample(theta, n, rng)
        return draws.reshape(draws.shape[:-1] + self.data_shape)


class ExplicitLikelihood:
    """Wraps a task's closed-form likelihood; carries no trainable parameters."""

    def __init__(self, task: JointTask):
        if not task.has_loglik:
            raise ContractError(f"task {task.name!r} has no explicit likelihood")
        self.task = task

    def log_prob(self, Y, theta) -> Tensor:
        Y = np.asarray(torch.as_tensor(Y).detach(), dtype=np.float64)
        theta = np.asarray(torch.as_tensor(theta).detach(), dtype=np.float64)
        return torch.as_tensor(self.task.loglik(Y, theta), dtype=DTYPE)

    def log_prob_multi(self, Y, theta) -> Tensor:
        Y, _ = _batch_data(Y)
        theta = np.asarray(torch.as_tensor(theta).detach(), dtype=np.float64)
        values = self.task.loglik(Y.detach().numpy()[:, None], theta)
        return torch.as_tensor(values, dtype=DTYPE)


def _base_sample(flow: ConditionalFlow, n: int, rng: np.random.Generator) -> np.ndarray:
    return densities.sample(flow.base, n, rng)


class GaussianPosterior:
    """Closed-form Gaussian ``q(theta | Y)`` with mean and sd computed from data.

    Used as an exact (or deliberately corrupted) posterior for the conjugate
    toy model; implements the same interface as :class:`PosteriorModel`.
    """

    def __init__(self, mean_fn, sd_fn):
        self.mean_fn = mean_fn
        self.sd_fn = sd_fn

    @classmethod
    def conjugate(cls, task: JointTask, sd_multiplier: float = 1.0, var_override: float | None = None) -> "GaussianPosterior":
        c = task.constants
        J, s0, s = c["J"], c.get("prior_sd", 1.0), c["noise_sd"]
        precision = 1.0 / s0**2 + J / s**2
        var = 1.0 / precision

        def mean_fn(Y: np.ndarray) -> np.ndarray:
            return var * Y[..., 0].sum(-1, keepdims=True) / s**2

        sd = math.sqrt(var_override) if var_override is not None else math.sqrt(var) * sd_multiplier
        return cls(mean_fn, lambda Y: np.full(Y.shape[:-2] + (1,), sd))

    def _moments(self, Y) -> tuple[np.ndarray, np.ndarray]:
        Y = np.asarray(torch.as_tensor(Y).detach(), dtype=np.float64)
        if Y.ndim == 2:
            Y = Y[None]
        return self.mean_fn(Y), self.sd_fn(Y)

    def log_prob(self, theta, Y) -> Tensor:
        mu, sd = self._moments(Y)
        theta = np.asarray(torch.as_tensor(theta).detach(), dtype=np.float64)
        u = (theta - mu) / sd
        return torch.as_tensor((-0.5 * u**2 - np.log(sd) - 0.5 * math.log(2 * math.pi)).sum(-1), dtype=DTYPE)

    def log_prob_multi(self, theta, Y) -> Tensor:
        mu, sd = self._moments(Y)
        theta = np.asarray(torch.as_tensor(theta).detach(), dtype=np.float64)
        u = (theta - mu[:, None]) / sd[:, None]
        return torch.as_tensor((-0.5 * u**2 - np.log(sd[:, None]) - 0.5 * math.log(2 * math.pi)).sum(-1), dtype=DTYPE)

    def sample(self, Y, n: int, rng: np.random.Generator, latent_scale: float = 1.0) -> Tensor:
        single = np.ndim(Y) == 2
        mu, sd = self._moments(Y)
        z = rng.standard_normal((mu.shape[0], n, mu.shape[-1]))
        draws = torch.as_tensor(mu[:, None] + latent_scale * sd[:, None] * z, dtype=DTYPE)
        return draws[0] if single else draws

    def parameters(self):
        return iter(())
