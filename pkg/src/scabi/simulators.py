"""Benchmark forward models.

Every task exposes a prior, a batched simulator and an explicit log-likelihood.
Simulators take one :class:`numpy.random.Generator` per row so that each draw
depends only on its own stream; batching and threading never change results.

Data sets are arrays of shape ``(J, d)``; batches are ``(n, J, d)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import densities
from .densities import DistributionSpec
from .errors import ContractError

LOG_PI = math.log(math.pi)
LOG_2PI = math.log(2 * math.pi)


def _rows(theta, dim: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != dim:
        raise ContractError(f"expected parameters with trailing dimension {dim}, got {theta.shape}")
    return theta


def _normal_logpdf(x, loc, scale):
    return -0.5 * ((x - loc) / scale) ** 2 - np.log(scale) - 0.5 * LOG_2PI


# --------------------------------------------------------------------------
# ODE integration
# --------------------------------------------------------------------------


def rk4_step(rhs: Callable, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def ode_integrate(rhs: Callable, initial: np.ndarray, t_grid: Sequence[float], step: float, t0: float = 0.0) -> np.ndarray:
    """Fixed-step classical RK4 from ``t0``; returns the states at ``t_grid``.

    ``initial`` has shape ``(..., S)``; the result has shape ``(..., len(t_grid), S)``.
    Every grid time must be reachable in a whole number of steps.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    steps = np.rint((t_grid - t0) / step).astype(int)
    if np.any(np.abs(steps * step + t0 - t_grid) > 1e-9 * max(1.0, float(np.abs(t_grid).max()))):
        raise ContractError("observation times must be multiples of the step size")
    if np.any(np.diff(steps) < 0) or steps[0] < 0:
        raise ContractError("observation times must be sorted and >= t0")
    y = np.array(initial, dtype=np.float64)
    out = np.empty(y.shape[:-1] + (len(t_grid), y.shape[-1]))
    n = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i, target in enumerate(steps):
            while n < target:
                y = rk4_step(rhs, t0 + n * step, y, step)
                n += 1
            out[..., i, :] = y
    return out


# --------------------------------------------------------------------------
# task container
# --------------------------------------------------------------------------


@dataclass
class JointTask:
    """Prior, simulator and explicit likelihood of one benchmark model.

    When ``log_space`` is set the inferred parameters are the logarithms of the
    prior variables, and :meth:`prior_log_prob` includes the Jacobian term.
    """

    name: str
    prior: DistributionSpec
    data_shape: tuple[int, int]
    simulate_fn: Callable
    loglik_fn: Callable | None
    param_names: tuple[str, ...]
    log_space: bool = False
    summary_dim: int | None = None
    constants: dict = field(default_factory=dict)

    @property
    def param_dim(self) -> int:
        return self.prior.dim

    @property
    def has_loglik(self) -> bool:
        return self.loglik_fn is not None

    def prior_log_prob(self, theta) -> np.ndarray:
        theta = _rows(theta, self.param_dim)
        if not self.log_space:
            return densities.log_prob(self.prior, theta)
        return densities.log_prob(self.prior, np.exp(theta)) + theta.sum(-1)

    def prior_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        draws = densities.sample(self.prior, n, rng)
        return np.log(draws) if self.log_space else draws

    def simulate(self, theta, rng) -> np.ndarray:
        """Simulate one data set ``(J, d)`` from ``theta (D,)`` and a generator,
        or a batch ``(n, J, d)`` from ``theta (n, D)`` and ``n`` generators."""
        theta = _rows(theta, self.param_dim)
        if theta.ndim == 1:
            return self.simulate_fn(theta[None], [rng], self.constants)[0]
        rngs = list(rng)
        if len(rngs) != theta.shape[0]:
            raise ContractError("need exactly one generator per parameter row")
        return self.simulate_fn(theta, rngs, self.constants)

    def loglik(self, Y, theta) -> np.ndarray:
        """Explicit ``log p(Y | theta)``; broadcasts ``Y (..., J, d)`` against ``theta (..., D)``."""
        if self.loglik_fn is None:
            raise ContractError(f"task {self.name!r} has no explicit likelihood")
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[-2:] != tuple(self.data_shape):
            raise ContractError(f"expected data shape {self.data_shape}, got {Y.shape[-2:]}")
        return self.loglik_fn(Y, _rows(theta, self.param_dim), self.constants)

    def log_joint(self, Y, theta) -> np.ndarray:
        return self.prior_log_prob(theta) + self.loglik(Y, theta)


# --------------------------------------------------------------------------
# conjugate Gaussian toy model
# --------------------------------------------------------------------------


def conjugate_simulate(theta, rngs, constants):
    sigma = constants["noise_sd"]
    J = constants["J"]
    return np.stack([t[:, None] + sigma * r.standard_normal((J, 1)) for t, r in zip(theta, rngs)])


def conjugate_loglik(Y, theta, constants):
    sigma = constants["noise_sd"]
    return _normal_logpdf(Y[..., 0], theta[..., None, :1][..., 0], sigma).sum(-1)


def conjugate_posterior(y_mean: float, J: int = 1, prior_sd: float = 1.0, noise_sd: float = 1.0) -> tuple[float, float]:
    """Exact posterior ``(mean, sd)`` for the conjugate toy model."""
    precision = 1.0 / prior_sd**2 + J / noise_sd**2
    var = 1.0 / precision
    return var * J * y_mean / noise_sd**2, math.sqrt(var)


def conjugate_log_marginal(y: float, prior_sd: float = 1.0, noise_sd: float = 1.0) -> float:
    """``log N(y; 0, prior_sd^2 + noise_sd^2)`` for a single observation."""
    var = prior_sd**2 + noise_sd**2
    return -0.5 * y**2 / var - 0.5 * math.log(2 * math.pi * var)


# --------------------------------------------------------------------------
# Gaussian mixture
# --------------------------------------------------------------------------


def gmm_simulate(theta, rngs, constants):
    J = constants["J"]
    sd = math.sqrt(constants["component_var"])
    out = np.empty((len(theta), J, 2))
    for i, (t, r) in enumerate(zip(theta, rngs)):
        sign = np.where(r.random(J) < 0.5, 1.0, -1.0)
        out[i] = sign[:, None] * t + sd * r.standard_normal((J, 2))
    return out


def gmm_loglik(Y, theta, constants):
    var = constants["component_var"]
    t = theta[..., None, :]
    const = -LOG_2PI - math.log(var)
    plus = const - 0.5 * ((Y - t) ** 2).sum(-1) / var
    minus = const - 0.5 * ((Y + t) ** 2).sum(-1) / var
    return (np.logaddexp(plus, minus) + math.log(0.5)).sum(-1)


# --------------------------------------------------------------------------
# two moons
# --------------------------------------------------------------------------


def two_moons_shift(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    a = -np.abs(theta[..., 0] + theta[..., 1]) / math.sqrt(2)
    b = (-theta[..., 0] + theta[..., 1]) / math.sqrt(2)
    return np.stack([a, b], axis=-1)


def two_moons_simulate(theta, rngs, constants):
    r_loc, r_sd, offset = constants["r_loc"], constants["r_sd"], constants["x_offset"]
    out = np.empty((len(theta), 1, 2))
    shift = two_moons_shift(theta)
    for i, rng in enumerate(rngs):
        alpha = rng.uniform(-math.pi / 2, math.pi / 2)
        r = rng.normal(r_loc, r_sd)
        out[i, 0] = (r * math.cos(alpha) + offset + shift[i, 0], r * math.sin(alpha) + shift[i, 1])
    return out


def two_moons_loglik(Y, theta, constants):
    r_loc, r_sd, offset = constants["r_loc"], constants["r_sd"], constants["x_offset"]
    u = Y[..., 0, :] - two_moons_shift(theta)
    p = u[..., 0] - offset
    q = u[..., 1]
    r = np.hypot(p, q)
    alpha = np.arctan2(q, p)
    inside = (alpha > -math.pi / 2) & (alpha < math.pi / 2) & (r > 0)
    with np.errstate(divide="ignore"):
        value = _normal_logpdf(r, r_loc, r_sd) - LOG_PI - np.log(r)
    return np.where(inside, value, -np.inf)


# --------------------------------------------------------------------------
# source location
# --------------------------------------------------------------------------


def source_grid() -> np.ndarray:
    """30 fixed measurement points on a 6 x 5 lattice over [-4, 4]^2."""
    g1, g2 = np.meshgrid(np.linspace(-4, 4, 6), np.linspace(-4, 4, 5), indexing="ij")
    return np.stack([g1.ravel(), g2.ravel()], axis=-1)


def source_intensity(theta, points, constants) -> np.ndarray:
    """``b + alpha / (m + ||theta - x||^2)`` for every measurement point."""
    theta = np.asarray(theta, dtype=np.float64)
    d2 = ((np.asarray(points)[..., :, :] - theta[..., None, :]) ** 2).sum(-1)
    return constants["b"] + constants["alpha"] / (constants["m"] + d2)


def source_simulate(theta, rngs, constants):
    X = np.asarray(constants["points"])
    nu = source_intensity(theta, X, constants)
    out = np.empty((len(theta), len(X), 3))
    out[:, :, :2] = X
    for i, rng in enumerate(rngs):
        out[i, :, 2] = nu[i] + constants["sigma"] * rng.standard_normal(len(X))
    return out


def source_loglik(Y, theta, constants):
    nu = source_intensity(theta, Y[..., :2], constants)
    return _normal_logpdf(Y[..., 2], nu, constants["sigma"]).sum(-1)


# --------------------------------------------------------------------------
# Hes1 gene expression
# --------------------------------------------------------------------------

HES1_REAL_DATA = np.array([1.20, 5.90, 4.58, 2.64, 5.38, 6.42, 5.60, 4.48])


def hes1_rhs(params: np.ndarray, k_deg: float) -> Callable:
    """Right-hand side for states ``(m, p1, p2)``; ``params`` rows are ``(p0, h, k1, nu)``."""
    p0, h, k1, nu = (params[..., i] for i in range(4))

    def rhs(t, y):
        m, p1, p2 = y[..., 0], y[..., 1], y[..., 2]
        hill = 1.0 / (1.0 + np.power(np.maximum(p2, 0.0) / p0, h))
        return np.stack(
            [
                -k_deg * m + hill,
                -k_deg * p1 + nu * m - k1 * p1,
                -k_deg * p2 + k1 * p1,
            ],
            axis=-1,
        )

    return rhs


def hes1_trajectory(theta, constants, step: float | None = None) -> np.ndarray:
    """mRNA concentrations at the observation times; ``theta`` is in log space."""
    params = np.exp(np.asarray(theta, dtype=np.float64))
    initial = np.broadcast_to(np.asarray(constants["initial"], dtype=np.float64), params.shape[:-1] + (3,))
    states = ode_integrate(
        hes1_rhs(params, constants["k_deg"]), initial, constants["times"], step or constants["step"]
    )
    return states[..., 0]


def hes1_simulate(theta, rngs, constants):
    m = hes1_trajectory(theta, constants)
    noise = np.stack([r.standard_normal(m.shape[-1]) for r in rngs])
    return (m + constants["obs_sd"] * noise)[..., None]


def hes1_loglik(Y, theta, constants):
    m = hes1_trajectory(theta, constants)
    return _normal_logpdf(Y[..., 0], m, constants["obs_sd"]).sum(-1)


# --------------------------------------------------------------------------
# SIR epidemic
# --------------------------------------------------------------------------


def sir_rhs(beta, gamma, population: float) -> Callable:
    def rhs(t, y):
        s, i = y[..., 0], y[..., 1]
        infection = beta * s * i / population
        recovery = gamma * i
        return np.stack([-infection, infection - recovery, recovery], axis=-1)

    return rhs


def sir_infected_fraction(theta, constants, step: float | None = None) -> np.ndarray:
    """Infected fraction at the observation times; ``theta`` is ``(log beta, log gamma)``."""
    theta = np.asarray(theta, dtype=np.float64)
    beta, gamma = np.exp(theta[..., 0]), np.exp(theta[..., 1])
    pop = constants["population"]
    init = np.array([pop - constants["initial_infected"], constants["initial_infected"], 0.0])
    initial = np.broadcast_to(init, theta.shape[:-1] + (3,))
    states = ode_integrate(sir_rhs(beta, gamma, pop), initial, constants["times"], step or constants["step"])
    return np.clip(states[..., 1] / pop, 0.0, 1.0)


def sir_simulate(theta, rngs, constants):
    frac = sir_infected_fraction(theta, constants)
    trials = constants["trials"]
    out = np.empty(frac.shape + (1,))
    for i, rng in enumerate(rngs):
        if np.all(np.isfinite(frac[i])):
            out[i, :, 0] = rng.binomial(trials, frac[i])
        else:
            out[i] = np.nan
    return out


def sir_loglik(Y, theta, constants):
    frac = sir_infected_fraction(theta, constants)
    k = Y[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return stats.binom.logpmf(k, constants["trials"], frac).sum(-1)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------


def _conjugate(**kw) -> JointTask:
    c = {"noise_sd": 1.0, "J": 1, "prior_sd": 1.0} | kw
    return JointTask(
        "conjugate",
        DistributionSpec.gaussian(0.0, c["prior_sd"], dim=1),
        (c["J"], 1),
        conjugate_simulate,
        conjugate_loglik,
        ("theta",),
        constants=c,
    )


def _gmm(**kw) -> JointTask:
    c = {"J": 10, "component_var": 0.5} | kw
    return JointTask(
        "gmm", DistributionSpec.gaussian(0.0, 1.0, dim=2), (c["J"], 2), gmm_simulate, gmm_loglik,
        ("theta_1", "theta_2"), summary_dim=4, constants=c,
    )


def _two_moons(**kw) -> JointTask:
    c = {"r_loc": 0.1, "r_sd": 0.01, "x_offset": 0.25} | kw
    return JointTask(
        "two_moons", DistributionSpec.uniform(-2.0, 2.0, dim=2), (1, 2), two_moons_simulate, two_moons_loglik,
        ("theta_1", "theta_2"), constants=c,
    )


def _source(**kw) -> JointTask:
    c = {"sigma": 0.5, "alpha": 1.0, "b": 0.1, "m": 1e-4} | kw
    c["points"] = np.asarray(c.get("points", source_grid()), dtype=np.float64).tolist()
    return JointTask(
        "source", DistributionSpec.gaussian(0.0, 1.0, dim=2), (len(c["points"]), 3), source_simulate,
        source_loglik, ("x", "y"), summary_dim=32, constants=c,
    )


def _hes1(**kw) -> JointTask:
    c = {
        "k_deg": 0.03,
        "initial": [2.0, 5.0, 3.0],
        "times": [30.0 * (i + 1) for i in range(8)],
        "step": 0.5,
        "obs_sd": 1.0,
    } | kw
    prior = DistributionSpec.gamma([2.0, 10.0, 2.0, 2.0], [1.0, 1.0, 50.0, 50.0])
    return JointTask(
        "hes1", prior, (len(c["times"]), 1), hes1_simulate, hes1_loglik,
        ("log_p0", "log_h", "log_k1", "log_nu"), log_space=True, constants=c,
    )


def _sir(**kw) -> JointTask:
    c = {
        "population": 1e6,
        "initial_infected": 1.0,
        "trials": 1000,
        "times": [float(t) for t in range(1, 161)],
        "step": 0.1,
        "beta_loc": math.log(0.4),
        "beta_sd": 0.5,
        "gamma_loc": math.log(0.125),
        "gamma_sd": 0.2,
    } | kw
    prior = DistributionSpec.gaussian([c["beta_loc"], c["gamma_loc"]], [c["beta_sd"], c["gamma_sd"]])
    return JointTask(
        "sir", prior, (len(c["times"]), 1), sir_simulate, sir_loglik, ("log_beta", "log_gamma"), constants=c,
    )


TASKS: dict[str, Callable[..., JointTask]] = {
    "conjugate": _conjugate,
    "gmm": _gmm,
    "two_moons": _two_moons,
    "source": _source,
    "hes1": _hes1,
    "sir": _sir,
}


def make_task(name: str, **constants) -> JointTask:
    try:
        factory = TASKS[name]
    except KeyError:
        raise ContractError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return factory(**constants)


# --------------------------------------------------------------------------
# training-set files
# --------------------------------------------------------------------------

MAGIC = b"SCABI-SIMSET v1\n"


@dataclass
class SimulationSet:
    """``n`` simulated tuples ``(theta, Y)`` plus provenance."""

    task: str
    seed: int
    theta: np.ndarray
    Y: np.ndarray
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.theta)

    def header(self) -> dict:
        return {
            "task": self.task,
            "N": len(self),
            "seed": int(self.seed),
            "theta_shape": list(self.theta.shape),
            "data_shape": list(self.Y.shape),
            "rejected": int(self.rejected),
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
        buf.write(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.Y, dtype="<f8").tobytes())
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_simulations(sims: SimulationSet, path: str | Path) -> Path:
    """Write a header line (JSON) followed by little-endian float64 theta then Y blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(sims.to_bytes())
    return path


def load_simulations(path: str | Path) -> SimulationSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ContractError(f"{path} is not a simulation-set file")
    rest = raw[len(MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1 :]
    t_shape, y_shape = tuple(header["theta_shape"]), tuple(header["data_shape"])
    n_theta = int(np.prod(t_shape)) * 8
    n_y = int(np.prod(y_shape)) * 8
    if len(body) != n_theta + n_y:
        raise ContractError(f"{path} is truncated or corrupted")
    theta = np.frombuffer(body[:n_theta], dtype="<f8").reshape(t_shape).astype(np.float64)
    Y = np.frombuffer(body[n_theta:], dtype="<f8").reshape(y_shape).astype(np.float64)
    return SimulationSet(header["task"], header["seed"], theta, Y, header.get("rejected", 0), header.get("meta", {}))
