"""Training objectives.

* ``npe_loss``: mean negative posterior log density.
* ``nple_loss``: NPE plus the negative surrogate-likelihood log density.
* ``self_consistency_loss``: sample variance, across proposal draws, of the
  Bayes-inverted log marginal likelihood
  ``log p(theta) + log p(Y | theta) - log q(theta | Y)``. The likelihood term
  is either a task's closed-form density or a learned surrogate.
* ``combined_loss``: base loss plus ``lambda`` times the batch-mean
  self-consistency loss.
* ``schedule_weight``: the epoch-indexed ``lambda`` annealing schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import ContractError, TrainingError
from .flows import DTYPE

log = logging.getLogger(__name__)

LOG_DENSITY_FLOOR = -1e6


# --------------------------------------------------------------------------
# configuration types
# --------------------------------------------------------------------------


@dataclass
class ScheduleSpec:
    """Annealing schedule for the self-consistency weight.

    ``stepwise``: ``steps`` is a list of ``(epoch_threshold, value)``; the
    weight at epoch ``e`` is the value of the last threshold ``<= e``.
    ``linear``: zero until ``start``, linear up to ``value`` at ``end``.
    """

    kind: str = "stepwise"
    steps: list[tuple[int, float]] = field(default_factory=lambda: [(0, 0.0)])
    start: int = 0
    end: int = 1
    value: float = 0.0

    def __post_init__(self):
        if self.kind == "stepwise":
            self.steps = sorted((int(t), float(v)) for t, v in self.steps)
            if not self.steps or self.steps[0][0] != 0 or self.steps[0][1] != 0.0:
                raise ContractError("stepwise schedules must start with (0, 0.0)")
            if any(v < 0 for _, v in self.steps):
                raise ContractError("schedule weights must be non-negative")
        elif self.kind == "linear":
            if self.value < 0 or self.end <= self.start or self.start < 0:
                raise ContractError("linear schedule needs 0 <= start < end and value >= 0")
        else:
            raise ContractError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def off(cls) -> "ScheduleSpec":
        return cls("stepwise", [(0, 0.0)])

    @classmethod
    def switch(cls, epoch: int, value: float) -> "ScheduleSpec":
        """``0`` before ``epoch``, ``value`` from ``epoch`` on."""
        return cls("stepwise", [(0, 0.0), (int(epoch), float(value))])

    @classmethod
    def switch_fraction(cls, epochs: int, fraction: float, value: float) -> "ScheduleSpec":
        """Off for the first ``fraction`` of ``epochs``, then ``value``."""
        return cls.switch(int(math.ceil(fraction * epochs)), value)

    def to_dict(self) -> dict:
        if self.kind == "stepwise":
            return {"kind": "stepwise", "steps": [[t, v] for t, v in self.steps]}
        return {"kind": "linear", "start": self.start, "end": self.end, "value": self.value}

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleSpec":
        data = dict(data)
        if data.get("kind", "stepwise") == "stepwise":
            return cls("stepwise", [tuple(s) for s in data.get("steps", [(0, 0.0)])])
        return cls("linear", start=int(data["start"]), end=int(data["end"]), value=float(data["value"]))


def schedule_weight(spec: ScheduleSpec, epoch: int) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if spec.kind == "stepwise":
        lam = 0.0
        for threshold, value in spec.steps:
            if epoch >= threshold:
                lam = value
        return lam
    frac = min(max((epoch - spec.start) / (spec.end - spec.start), 0.0), 1.0)
    return spec.value * frac


@dataclass
class SelfConsistencyConfig:
    """Monte Carlo settings of the self-consistency term.

    ``likelihood_source`` is ``"explicit"`` (closed-form task likelihood) or
    ``"learned"`` (surrogate likelihood flow). ``proposal`` is ``"posterior"``
    or ``"scaled-posterior"`` (latent draws multiplied by ``proposal_scale``).
    """

    K: int = 10
    likelihood_source: str = "explicit"
    proposal: str = "posterior"
    proposal_scale: float = 1.0

    def __post_init__(self):
        if int(self.K) < 2:
            raise ContractError("self-consistency needs K >= 2 draws")
        if self.likelihood_source not in ("explicit", "learned"):
            raise ContractError(f"unknown likelihood source {self.likelihood_source!r}")
        if self.proposal not in ("posterior", "scaled-posterior"):
            raise ContractError(f"unknown proposal {self.proposal!r}")
        self.K = int(self.K)

    @property
    def latent_scale(self) -> float:
        return self.proposal_scale if self.proposal == "scaled-posterior" else 1.0

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "likelihood_source": self.likelihood_source,
            "proposal": self.proposal,
            "proposal_scale": self.proposal_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelfConsistencyConfig":
        return cls(**data)


# --------------------------------------------------------------------------
# maximum-likelihood losses
# --------------------------------------------------------------------------


def _check_finite(values: Tensor, what: str) -> None:
    bad = ~torch.isfinite(values.detach())
    if bool(bad.any()):
        idx = int(torch.nonzero(bad)[0, 0])
        raise TrainingError(f"non-finite {what} log density", {"item": idx, "value": float(values[idx].detach())})


def npe_loss(posterior, theta, Y) -> Tensor:
    """Mean of ``-log q(theta | Y)`` over the batch."""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    if theta.shape[0] == 0:
        raise ContractError("empty batch")
    lq = posterior.log_prob(theta, Y)
    _check_finite(lq, "posterior")
    return -lq.mean()


def nle_part(likelihood, theta, Y) -> Tensor:
    """Mean of ``-log q(Y | theta)`` over the batch."""
    ll = likelihood.log_prob(Y, theta)
    _check_finite(ll, "likelihood")
    return -ll.mean()


def nple_loss(posterior, likelihood, theta, Y) -> Tensor:
    """Mean of ``-log q(theta | Y) - log q(Y | theta)``."""
    return npe_loss(posterior, theta, Y) + nle_part(likelihood, theta, Y)


# --------------------------------------------------------------------------
# self-consistency
# --------------------------------------------------------------------------


def sample_variance(values: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Row-wise unbiased variance over the last axis, restricted to ``mask``.

    Returns ``(variance, count)``; rows with fewer than two valid entries get
    variance 0.
    """
    if mask is None:
        mask = torch.ones_like(values, dtype=torch.bool)
    # shift by the first valid entry; identical values then give exactly 0
    first = torch.argmax(mask.to(torch.int8), dim=-1, keepdim=True)
    pivot = torch.gather(torch.where(mask, values, torch.zeros_like(values)), -1, first).detach()
    clean = torch.where(mask, values - pivot, torch.zeros_like(values))
    w = mask.to(values.dtype)
    n = w.sum(-1)
    mean = clean.sum(-1) / n.clamp(min=1)
    dev = (clean - mean[..., None]) * w
    var = (dev**2).sum(-1) / (n - 1).clamp(min=1)
    return torch.where(n >= 2, var, torch.zeros_like(var)), n


def log_marginal_estimate(theta_k, Y, prior, likelihood, posterior) -> Tensor:
    """Bayes-inverted log marginal likelihood for one data set.

    ``theta_k`` has shape ``(K, D)`` and ``Y`` shape ``(J, d)``; returns ``(K,)``
    values ``log p(theta_k) + log lik(Y | theta_k) - log q(theta_k | Y)``.
    ``prior`` is anything with ``prior_log_prob`` (a task). Draws with ``-inf``
    prior density come back as ``-inf``.
    """
    theta_k = torch.as_tensor(theta_k, dtype=DTYPE)
    Yb = torch.as_tensor(Y, dtype=DTYPE)[None]
    est, _ = _estimates(theta_k[None], Yb, prior, likelihood, posterior)
    return est[0]


@dataclass
class SCTerms:
    """Per-item self-consistency values plus bookkeeping counters."""

    per_item: Tensor
    estimates: Tensor
    valid: Tensor
    clamped: int = 0
    excluded: int = 0
    degenerate: int = 0

    @property
    def loss(self) -> Tensor:
        return self.per_item.mean()


def _estimates(theta, Y, prior, likelihood, posterior) -> tuple[Tensor, dict]:
    theta_np = theta.detach().numpy()
    lp = torch.as_tensor(np.asarray(prior.prior_log_prob(theta_np), dtype=np.float64))
    in_support = torch.isfinite(lp)
    safe_theta = torch.where(in_support[..., None], theta, torch.zeros_like(theta)) if not bool(in_support.all()) else theta
    lq = posterior.log_prob_multi(safe_theta, Y)
    ll = likelihood.log_prob_multi(Y, safe_theta)
    clamped = int(((lq.detach() < LOG_DENSITY_FLOOR) & in_support).sum() + ((ll.detach() < LOG_DENSITY_FLOOR) & in_support).sum())
    lq = torch.clamp(lq, min=LOG_DENSITY_FLOOR)
    ll = torch.clamp(ll, min=LOG_DENSITY_FLOOR)
    lp_safe = torch.where(in_support, lp, torch.zeros_like(lp))
    est = lp_safe + ll - lq
    est = torch.where(in_support, est, torch.full_like(est, -math.inf))
    return est, {"clamped": clamped, "excluded": int((~in_support).sum())}


def self_consistency_terms(
    Y,
    posterior,
    likelihood,
    prior,
    cfg: SelfConsistencyConfig,
    rng: np.random.Generator,
    transform=None,
) -> SCTerms:
    """Self-consistency variance for each data set in the batch ``Y (B, J, d)``.

    ``K`` proposal draws per item come from the posterior itself and are held
    fixed: gradients flow only through the density evaluations. ``transform``
    (default identity) is applied to the log estimates before the variance.
    """
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if Y.ndim == 2:
        Y = Y[None]
    theta = posterior.sample(Y, cfg.K, rng, latent_scale=cfg.latent_scale).detach()
    est, counts = _estimates(theta, Y, prior, likelihood, posterior)
    valid = torch.isfinite(est)
    values = transform(est) if transform is not None else est
    var, n = sample_variance(values, valid)
    degenerate = int((n < 2).sum())
    if degenerate:
        log.warning("self-consistency: %d item(s) had fewer than 2 finite estimates; contribution set to 0", degenerate)
    return SCTerms(var, est, valid, counts["clamped"], counts["excluded"], degenerate)


def self_consistency_loss(Y, posterior, likelihood, prior, cfg: SelfConsistencyConfig, rng: np.random.Generator) -> Tensor:
    """Batch mean of the per-item self-consistency variances."""
    return self_consistency_terms(Y, posterior, likelihood, prior, cfg, rng).loss


@dataclass
class LossTerms:
    total: Tensor
    base: Tensor
    sc: Tensor | None = None
    clamped: int = 0
    excluded: int = 0


def loss_terms(
    posterior,
    theta,
    Y,
    lam: float,
    cfg: SelfConsistencyConfig | None,
    rng: np.random.Generator | None,
    *,
    prior=None,
    likelihood=None,
    likelihood_model=None,
) -> LossTerms:
    """Base loss (NPE, or NPLE when ``likelihood_model`` is given) plus the weighted SC term.

    ``likelihood`` is the density used inside the self-consistency estimate;
    it defaults to ``likelihood_model``. With ``lam == 0`` the SC branch is
    skipped entirely, so no random numbers are consumed.
    """
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    if likelihood_model is None:
        base = npe_loss(posterior, theta, Y)
    else:
        base = nple_loss(posterior, likelihood_model, theta, Y)
    if lam == 0 or cfg is None:
        return LossTerms(base, base)
    source = likelihood if likelihood is not None else likelihood_model
    if source is None or prior is None:
        raise ContractError("self-consistency requires a prior and a likelihood source")
    terms = self_consistency_terms(Y, posterior, source, prior, cfg, rng)
    sc = terms.loss
    return LossTerms(base + lam * sc, base, sc, terms.clamped, terms.excluded)


def combined_loss(posterior, theta, Y, lam, cfg, rng, *, prior=None, likelihood=None, likelihood_model=None) -> Tensor:
    """Scalar training objective; see :func:`loss_terms`."""
    return loss_terms(
        posterior, theta, Y, lam, cfg, rng, prior=prior, likelihood=likelihood, likelihood_model=likelihood_model
    ).total
