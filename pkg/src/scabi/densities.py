"""Priors and latent base distributions.

Only the four families used by the benchmark tasks are provided. Densities are
evaluated with torch so that base-distribution log densities stay differentiable
inside a flow; numpy inputs are accepted and returned as numpy arrays.
All sampling goes through :class:`numpy.random.Generator` streams owned by the
caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

from .errors import ContractError

KINDS = ("diagonal-gaussian", "student-t", "uniform-box", "gamma-product")

_REQUIRED = {
    "diagonal-gaussian": ("loc", "scale"),
    "student-t": ("df",),
    "uniform-box": ("low", "high"),
    "gamma-product": ("shape", "rate"),
}


def _vec(value: Any, dim: int, name: str) -> tuple[float, ...]:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (dim,))
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class DistributionSpec:
    """A fully specified elementary distribution on ``R^dim``.

    ``params`` holds per-dimension vectors keyed by name:

    * diagonal-gaussian: ``loc``, ``scale``
    * student-t: ``df`` (a single value, identity scale, zero location)
    * uniform-box: ``low``, ``high``
    * gamma-product: ``shape``, ``rate``
    """

    kind: str
    dim: int
    params: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown distribution kind {self.kind!r}")
        if int(self.dim) < 1:
            raise ContractError("dim must be a positive integer")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.params]
        if missing:
            raise ContractError(f"{self.kind} requires parameters {missing}")
        p = self.params
        if self.kind == "diagonal-gaussian" and min(p["scale"]) <= 0:
            raise ContractError("gaussian scales must be strictly positive")
        if self.kind == "student-t" and p["df"][0] <= 0:
            raise ContractError("degrees of freedom must be strictly positive")
        if self.kind == "uniform-box" and any(lo >= hi for lo, hi in zip(p["low"], p["high"])):
            raise ContractError("uniform box requires low < high in every dimension")
        if self.kind == "gamma-product" and (min(p["shape"]) <= 0 or min(p["rate"]) <= 0):
            raise ContractError("gamma shape and rate must be strictly positive")

    # constructors -----------------------------------------------------------

    @classmethod
    def gaussian(cls, loc: Any = 0.0, scale: Any = 1.0, dim: int | None = None) -> "DistributionSpec":
        dim = dim or int(np.size(loc) if np.size(loc) > 1 else np.size(scale))
        return cls("diagonal-gaussian", dim, {"loc": _vec(loc, dim, "loc"), "scale": _vec(scale, dim, "scale")})

    @classmethod
    def student_t(cls, df: float, dim: int) -> "DistributionSpec":
        return cls("student-t", dim, {"df": (float(df),)})

    @classmethod
    def uniform(cls, low: Any, high: Any, dim: int | None = None) -> "DistributionSpec":
        dim = dim or int(max(np.size(low), np.size(high)))
        return cls("uniform-box", dim, {"low": _vec(low, dim, "low"), "high": _vec(high, dim, "high")})

    @classmethod
    def gamma(cls, shape: Any, rate: Any, dim: int | None = None) -> "DistributionSpec":
        dim = dim or int(max(np.size(shape), np.size(rate)))
        return cls("gamma-product", dim, {"shape": _vec(shape, dim, "shape"), "rate": _vec(rate, dim, "rate")})

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "params": {k: list(v) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "DistributionSpec":
        kind = data["kind"]
        dim = int(data["dim"])
        params = {}
        for key, value in data.get("params", {}).items():
            params[key] = (float(np.asarray(value).ravel()[0]),) if key == "df" else _vec(value, dim, key)
        return cls(kind, dim, params)

    # analytic moments, used by tests and diagnostics -------------------------

    def mean(self) -> np.ndarray:
        p = self.params
        if self.kind == "diagonal-gaussian":
            return np.array(p["loc"])
        if self.kind == "student-t":
            return np.zeros(self.dim)
        if self.kind == "uniform-box":
            return 0.5 * (np.array(p["low"]) + np.array(p["high"]))
        return np.array(p["shape"]) / np.array(p["rate"])

    def variance(self) -> np.ndarray:
        p = self.params
        if self.kind == "diagonal-gaussian":
            return np.array(p["scale"]) ** 2
        if self.kind == "student-t":
            df = p["df"][0]
            return np.full(self.dim, df / (df - 2.0) if df > 2 else np.inf)
        if self.kind == "uniform-box":
            return (np.array(p["high"]) - np.array(p["low"])) ** 2 / 12.0
        return np.array(p["shape"]) / np.array(p["rate"]) ** 2


def _as_tensor(x: Any) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def log_prob(spec: DistributionSpec, x: Any) -> Any:
    """Log density of ``x`` with shape ``(..., dim)``; returns shape ``(...)``.

    Points outside the support get exactly ``-inf``.
    """
    t, was_numpy = _as_tensor(x)
    if t.ndim == 0 or t.shape[-1] != spec.dim:
        raise ContractError(f"expected trailing dimension {spec.dim}, got shape {tuple(t.shape)}")
    out = _log_prob_tensor(spec, t)
    return out.detach().numpy() if was_numpy else out


def _log_prob_tensor(spec: DistributionSpec, x: torch.Tensor) -> torch.Tensor:
    p = spec.params
    kw = {"dtype": x.dtype, "device": x.device}
    if spec.kind == "diagonal-gaussian":
        loc = torch.tensor(p["loc"], **kw)
        scale = torch.tensor(p["scale"], **kw)
        u = (x - loc) / scale
        return (-0.5 * u**2 - torch.log(scale) - 0.5 * math.log(2 * math.pi)).sum(-1)

    if spec.kind == "student-t":
        df = p["df"][0]
        d = spec.dim
        const = (
            math.lgamma(0.5 * (df + d))
            - math.lgamma(0.5 * df)
            - 0.5 * d * math.log(df * math.pi)
        )
        return const - 0.5 * (df + d) * torch.log1p((x**2).sum(-1) / df)

    if spec.kind == "uniform-box":
        low = torch.tensor(p["low"], **kw)
        high = torch.tensor(p["high"], **kw)
        inside = ((x > low) & (x < high)).all(-1)
        value = -torch.log(high - low).sum()
        return torch.where(inside, value.expand(inside.shape), torch.full_like(inside, -math.inf, dtype=x.dtype))

    shape = torch.tensor(p["shape"], **kw)
    rate = torch.tensor(p["rate"], **kw)
    positive = (x > 0).all(-1)
    safe = torch.where(x > 0, x, torch.ones_like(x))
    terms = shape * torch.log(rate) + (shape - 1) * torch.log(safe) - rate * safe - torch.lgamma(shape)
    return torch.where(positive, terms.sum(-1), torch.full_like(positive, -math.inf, dtype=x.dtype))


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an ``(n, dim)`` matrix from ``spec`` using the caller's generator."""
    if int(n) < 1:
        raise ContractError("n must be >= 1")
    n, d, p = int(n), spec.dim, spec.params
    if spec.kind == "diagonal-gaussian":
        return np.asarray(p["loc"]) + np.asarray(p["scale"]) * rng.standard_normal((n, d))
    if spec.kind == "student-t":
        df = p["df"][0]
        z = rng.standard_normal((n, d))
        w = rng.chisquare(df, size=(n, 1)) / df
        return z / np.sqrt(w)
    if spec.kind == "uniform-box":
        low, high = np.asarray(p["low"]), np.asarray(p["high"])
        u = rng.random((n, d))
        out = low + (high - low) * u
        # keep the open-interval support even if u == 0
        return np.where(out <= low, np.nextafter(low, high), out)
    return rng.gamma(np.asarray(p["shape"]), 1.0 / np.asarray(p["rate"]), size=(n, d))


def spawn_rngs(seed: int, n: int, domain: int | Sequence[int] = 0, start: int = 0) -> list[np.random.Generator]:
    """Independent generators keyed by ``(seed, domain, index)``.

    Streams depend only on the key, never on how many streams were requested or
    on the order in which they are consumed.
    """
    dom = list(domain) if isinstance(domain, (list, tuple)) else [int(domain)]
    return [np.random.default_rng(np.random.SeedSequence([int(seed), *dom, start + i])) for i in range(n)]


def keyed_rng(*key: int) -> np.random.Generator:
    """A single generator keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
