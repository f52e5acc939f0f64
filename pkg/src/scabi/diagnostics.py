"""Evaluation: MMD, calibration, marginal-likelihood sharpness and reference posteriors."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from .densities import keyed_rng
from .errors import ContractError, SimulationError
from .objectives import log_marginal_estimate
from .simulators import JointTask, SimulationSet

# --------------------------------------------------------------------------
# MMD
# --------------------------------------------------------------------------


def median_bandwidth(A: np.ndarray, B: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled sample (1.0 if degenerate)."""
    pooled = np.concatenate([A, B])
    h = float(np.median(pdist(pooled)))
    return h if h > 0 and math.isfinite(h) else 1.0


def mmd(A, B, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) MMD with a Gaussian kernel.

    Kernel sums use :func:`math.fsum`, which is correctly rounded, so the
    result does not depend on argument order: ``mmd(A, B) == mmd(B, A)``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A[:, None] if A.ndim == 1 else A
    B = B[:, None] if B.ndim == 1 else B
    if len(A) < 2 or len(B) < 2:
        raise ContractError("mmd needs at least two samples per set")
    if A.shape[1] != B.shape[1]:
        raise ContractError("sample sets differ in dimension")
    h = median_bandwidth(A, B) if bandwidth is None else float(bandwidth)

    def mean_kernel(X, Z):
        K = np.exp(-cdist(X, Z, "sqeuclidean") / (2 * h * h))
        return math.fsum(K.ravel()) / K.size

    value = mean_kernel(A, A) + mean_kernel(B, B) - 2 * mean_kernel(A, B)
    return math.sqrt(max(value, 0.0))


# --------------------------------------------------------------------------
# simulation-based calibration
# --------------------------------------------------------------------------


def sbc(task: JointTask, posterior, num_sims: int, num_draws: int, seed: int, batch: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Ranks of prior draws among posterior draws for fresh prior-predictive data.

    Returns ``(ranks (S, D), theta_star (S, D))``; rank ``r`` counts posterior
    draws strictly below the true value, so ``r`` lies in ``{0, ..., L}``.
    """
    from .training import DOMAIN_SBC, DOMAIN_EVAL, generate_training_set

    if num_sims < 100 or num_draws < 20:
        raise ContractError("sbc needs S >= 100 simulations and L >= 20 draws")
    sims = generate_training_set(task, num_sims, seed, domain=DOMAIN_SBC)
    rng = keyed_rng(seed, DOMAIN_EVAL, DOMAIN_SBC)
    ranks = []
    for s in range(0, num_sims, batch):
        draws = posterior.sample(sims.Y[s : s + batch], num_draws, rng)
        draws = np.asarray(torch.as_tensor(draws).detach(), dtype=np.float64)
        ranks.append((draws < sims.theta[s : s + batch, None, :]).sum(1))
    return np.concatenate(ranks).astype(np.int64), sims.theta


@dataclass
class EcdfBand:
    """ECDF of ranks on an evaluation grid, with Bonferroni-corrected binomial bands."""

    points: np.ndarray
    ecdf: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    passed: bool

    def to_csv(self) -> str:
        D = self.ecdf.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point", "lower", "upper"] + [f"ecdf_{d}" for d in range(D)])
        for i, p in enumerate(self.points):
            w.writerow([repr(float(p)), repr(float(self.lower[i])), repr(float(self.upper[i]))]
                       + [repr(float(v)) for v in self.ecdf[i]])
        return buf.getvalue()


def ecdf_band(ranks, num_draws: int, confidence: float = 0.95) -> EcdfBand:
    """Rank ECDF with pointwise binomial bands, Bonferroni-corrected.

    Under calibration ``P(rank <= m) = (m + 1) / (L + 1)``. The ECDF is checked
    at ``m = 0, ..., L - 1`` against binomial quantiles at level
    ``(1 - confidence) / (L * D)``.
    """
    ranks = np.asarray(ranks)
    if ranks.ndim == 1:
        ranks = ranks[:, None]
    S, D = ranks.shape
    L = int(num_draws)
    m = np.arange(L)
    p = (m + 1) / (L + 1)
    ecdf = (ranks[None, :, :] <= m[:, None, None]).mean(1)
    alpha = (1 - confidence) / (L * D)
    lower = stats.binom.ppf(alpha / 2, S, p) / S
    upper = stats.binom.ppf(1 - alpha / 2, S, p) / S
    passed = bool(((ecdf >= lower[:, None]) & (ecdf <= upper[:, None])).all())
    return EcdfBand(p, ecdf, lower, upper, passed)


# --------------------------------------------------------------------------
# marginal likelihood sharpness and likelihood at the truth
# --------------------------------------------------------------------------


@dataclass
class LmlInterval:
    mean: float
    width: float
    valid: int


def lml_interval(posterior, likelihood, prior, Y, K: int = 1000, rng: np.random.Generator | None = None) -> LmlInterval:
    """Mean and central 95% width of ``K`` Bayes-inverted log-marginal estimates."""
    if K < 100:
        raise ContractError("lml_interval needs K >= 100")
    rng = rng if rng is not None else np.random.default_rng(0)
    Y = torch.as_tensor(np.asarray(Y, dtype=np.float64))
    with torch.no_grad():
        theta = posterior.sample(Y, K, rng)
        est = log_marginal_estimate(theta, Y, prior, likelihood, posterior).numpy()
    est = est[np.isfinite(est)]
    if len(est) < 2:
        raise ContractError("fewer than two finite log-marginal estimates")
    lo, hi = np.percentile(est, [2.5, 97.5])
    return LmlInterval(float(est.mean()), float(hi - lo), int(len(est)))


def loglik_at_truth(likelihood, Y, theta_star) -> np.ndarray:
    """``log q(Y_i | theta*_i)`` per instance; ``Y (M, J, d)``, ``theta_star (M, D)``."""
    with torch.no_grad():
        values = likelihood.log_prob(np.asarray(Y, dtype=np.float64), np.asarray(theta_star, dtype=np.float64))
    return np.asarray(torch.as_tensor(values), dtype=np.float64)


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error ``sd / sqrt(M)`` (sample sd, ``ddof=1``)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


# --------------------------------------------------------------------------
# reference posteriors
# --------------------------------------------------------------------------


@dataclass
class ReferencePosterior:
    task: str
    Y: np.ndarray
    method: str
    samples: np.ndarray
    log_evidence: float = float("nan")
    info: dict = field(default_factory=dict)


def _prior_box(task: JointTask, width: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    p = task.prior
    if p.kind == "uniform-box":
        return np.asarray(p.params["low"]), np.asarray(p.params["high"])
    mean, sd = p.mean(), np.sqrt(p.variance())
    if task.log_space:
        raise ContractError("grid reference is not supported for log-space tasks")
    return mean - width * sd, mean + width * sd


def _grid(lo, hi, n):
    axes = [np.linspace(a, b, n + 1) for a, b in zip(lo, hi)]
    centers = [0.5 * (ax[1:] + ax[:-1]) for ax in axes]
    mesh = np.stack(np.meshgrid(*centers, indexing="ij"), -1).reshape(-1, len(lo))
    widths = np.array([(b - a) / n for a, b in zip(lo, hi)])
    return mesh, widths


def _log_post(task, Y, theta, chunk=65536):
    out = np.empty(len(theta))
    for s in range(0, len(theta), chunk):
        t = theta[s : s + chunk]
        lp = task.prior_log_prob(t)
        ll = np.full(len(t), -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            ll[ok] = task.loglik(Y[None], t[ok])
        out[s : s + chunk] = lp + ll
    return out


def grid_posterior(task: JointTask, Y, resolution: int | None = None, cutoff: float = 30.0):
    """Adaptive grid: coarse pass over the prior box, then a fine pass over the
    bounding box of cells within ``cutoff`` nats of the maximum.

    Returns ``(centers, log_mass, cell_widths, log_evidence)`` with
    ``exp(log_mass)`` summing to one.
    """
    Y = np.asarray(Y, dtype=np.float64)
    D = task.param_dim
    if D > 2:
        raise ContractError("grid reference needs D <= 2")
    res = resolution or (4000 if D == 1 else 400)
    lo, hi = _prior_box(task)
    centers, widths = _grid(lo, hi, res)
    lp = _log_post(task, Y, centers)
    if not np.isfinite(lp).any():
        raise SimulationError("posterior has no mass on the grid")
    keep = centers[lp > lp.max() - cutoff]
    new_lo = np.maximum(keep.min(0) - 2 * widths, lo)
    new_hi = np.minimum(keep.max(0) + 2 * widths, hi)
    centers, widths = _grid(new_lo, new_hi, res)
    lp = _log_post(task, Y, centers)
    log_cell = float(np.log(widths).sum())
    log_z = float(logsumexp(lp)) + log_cell
    log_mass = lp - logsumexp(lp)
    return centers, log_mass, widths, log_z


def reference_posterior(task: JointTask, Y, method: str = "grid", n: int = 1000, seed: int = 0, **kw) -> ReferencePosterior:
    """Samples from the exact posterior of a task with an explicit likelihood.

    ``method`` is ``"grid"`` (D <= 2), ``"rejection"`` (prior envelope) or
    ``"mcmc"`` (random-walk Metropolis).
    """
    if not task.has_loglik:
        raise ContractError(f"task {task.name!r} has no explicit likelihood")
    Y = np.asarray(Y, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    if method == "grid":
        centers, log_mass, widths, log_z = grid_posterior(task, Y, kw.get("resolution"))
        idx = rng.choice(len(centers), size=n, p=np.exp(log_mass))
        samples = centers[idx] + (rng.random((n, task.param_dim)) - 0.5) * widths
        return ReferencePosterior(task.name, Y, method, samples, log_z, {"cells": len(centers)})
    if method == "rejection":
        return _rejection(task, Y, n, rng, kw.get("pool", 200_000))
    if method == "mcmc":
        return _metropolis(task, Y, n, rng, kw.get("burn_in", 2000), kw.get("thin", 5))
    raise ContractError(f"unknown reference method {method!r}")


def _rejection(task, Y, n, rng, pool) -> ReferencePosterior:
    theta = task.prior_sample(pool, rng)
    ll = task.loglik(Y[None], theta)
    accept = rng.random(pool) < np.exp(ll - ll.max())
    rate = accept.mean()
    if rate < 1e-4:
        raise SimulationError(f"rejection acceptance rate {rate:.1e} < 1e-4; use the grid method")
    samples = theta[accept]
    if len(samples) < n:
        raise SimulationError(f"only {len(samples)} accepted draws for {n} requested; raise the pool size")
    log_z = float(logsumexp(ll) - math.log(pool))
    return ReferencePosterior(task.name, Y, "rejection", samples[:n], log_z, {"acceptance": float(rate)})


def _metropolis(task, Y, n, rng, burn_in, thin) -> ReferencePosterior:
    pilot = task.prior_sample(2000, rng)
    lp_pilot = _log_post(task, Y, pilot)
    x = pilot[int(np.argmax(lp_pilot))]
    lp = _log_post(task, Y, x[None])[0]
    scale = np.sqrt(task.prior.variance()) * 0.1 if not task.log_space else np.full(task.param_dim, 0.05)
    accepted = 0
    out = []
    total = burn_in + n * thin
    for i in range(total):
        prop = x + scale * rng.standard_normal(len(x))
        lp_prop = _log_post(task, Y, prop[None])[0]
        if math.log(rng.random()) < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted += 1
        if i < burn_in and (i + 1) % 100 == 0:
            rate = accepted / (i + 1)
            scale = scale * (1.2 if rate > 0.3 else 0.8)
        if i >= burn_in and (i - burn_in) % thin == 0:
            out.append(x.copy())
    return ReferencePosterior(task.name, Y, "mcmc", np.array(out), info={"acceptance": accepted / total})


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def instance_hash(theta, Y) -> str:
    raw = np.ascontiguousarray(theta, dtype="<f8").tobytes() + np.ascontiguousarray(Y, dtype="<f8").tobytes()
    return hashlib.sha256(raw).hexdigest()[:16]


INSTANCE_FIELDS = ["index", "hash", "mmd", "lml_mean", "lml_width", "loglik_truth"]


@dataclass
class DiagnosticsReport:
    """Per-instance and aggregate evaluation results for one trained model."""

    task: str
    config_hash: str
    instances: list[dict]
    sbc_ranks: np.ndarray | None = None
    sbc_draws: int = 0
    ecdf_pass: bool | None = None
    extra: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.instances if r.get(name) is not None], dtype=np.float64)

    def summary(self) -> dict:
        out = {}
        for name in ("mmd", "lml_width", "lml_mean", "loglik_truth"):
            v = self.column(name)
            if len(v):
                m, se = mean_se(v)
                out[name] = {"mean": m, "se": se, "median": float(np.median(v)), "count": int(len(v))}
        return out

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "config_hash": self.config_hash,
            "summary": self.summary(),
            "instances": self.instances,
            "sbc": None if self.sbc_ranks is None else {
                "draws": self.sbc_draws, "ecdf_pass": self.ecdf_pass, "ranks": self.sbc_ranks.tolist()
            },
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["config_hash"] + INSTANCE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.instances:
            w.writerow({"config_hash": self.config_hash} | {k: ("" if row.get(k) is None else row[k]) for k in INSTANCE_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticsReport":
        sbc_part = data.get("sbc") or {}
        ranks = np.asarray(sbc_part["ranks"]) if sbc_part else None
        extra = {k: v for k, v in data.items() if k not in ("task", "config_hash", "summary", "instances", "sbc")}
        return cls(data["task"], data["config_hash"], data["instances"], ranks, sbc_part.get("draws", 0),
                   sbc_part.get("ecdf_pass"), extra)


@dataclass
class EvaluationSpec:
    M: int = 100
    reference: str | None = "grid"
    posterior_draws: int = 1000
    sbc_sims: int = 0
    sbc_draws: int = 100
    lml_K: int = 1000
    loglik_truth: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationSpec":
        return cls(**data)


def evaluate(
    bundle,
    test: SimulationSet,
    spec: EvaluationSpec,
    seed: int,
    config_hash: str = "",
    samples_out: dict | None = None,
    reference_cache: dict | None = None,
) -> DiagnosticsReport:
    """Compute every configured diagnostic for a trained bundle on a test set.

    Instance ``i`` draws its random numbers from ``(seed, eval, i)`` so results
    do not depend on evaluation order. When ``samples_out`` is a dict the first
    few instances' posterior and reference samples are stored in it. A dict
    passed as ``reference_cache`` lets several models evaluated on the same
    test set share reference posteriors; results are unchanged.
    """
    from .models import ExplicitLikelihood
    from .training import DOMAIN_EVAL

    task = bundle.task
    posterior = bundle.posterior
    lml_source = bundle.likelihood if bundle.likelihood is not None else (
        ExplicitLikelihood(task) if task.has_loglik else None)
    truth_ll = None
    if spec.loglik_truth:
        truth_ll = bundle.likelihood if bundle.likelihood is not None else lml_source
    rows = []
    for i in range(len(test)):
        theta_star, Y = test.theta[i], test.Y[i]
        rng = keyed_rng(seed, DOMAIN_EVAL, i)
        row = {"index": i, "hash": instance_hash(theta_star, Y), "mmd": None, "lml_mean": None, "lml_width": None,
               "loglik_truth": None}
        if spec.reference:
            ref_seed = int(rng.integers(2**31))
            key = (task.name, row["hash"], spec.reference, spec.posterior_draws, ref_seed)
            ref = reference_cache.get(key) if reference_cache is not None else None
            if ref is None:
                ref = reference_posterior(task, Y, spec.reference, spec.posterior_draws, seed=ref_seed)
                if reference_cache is not None:
                    reference_cache[key] = ref
            with torch.no_grad():
                draws = posterior.sample(Y, spec.posterior_draws, rng).numpy()
            row["mmd"] = mmd(draws, ref.samples)
            if samples_out is not None and i < 5:
                samples_out[f"posterior_{i}"] = draws
                samples_out[f"reference_{i}"] = ref.samples
        if lml_source is not None and spec.lml_K:
            lml = lml_interval(posterior, lml_source, task, Y, spec.lml_K, rng)
            row["lml_mean"], row["lml_width"] = lml.mean, lml.width
        if truth_ll is not None:
            row["loglik_truth"] = float(loglik_at_truth(truth_ll, Y[None], theta_star[None])[0])
        rows.append(row)
    report = DiagnosticsReport(task.name, config_hash, rows)
    if spec.sbc_sims:
        ranks, _ = sbc(task, posterior, spec.sbc_sims, spec.sbc_draws, seed)
        report.sbc_ranks = ranks
        report.sbc_draws = spec.sbc_draws
        report.ecdf_pass = ecdf_band(ranks, spec.sbc_draws).passed
    return report
