"""Training loop, training-set generation and checkpoints."""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import objectives
from .densities import keyed_rng, spawn_rngs
from .errors import CheckpointError, ContractError, SimulationError, TrainingError
from .flows import DTYPE, FlowConfig, fit_step
from .models import ExplicitLikelihood, LikelihoodModel, PosteriorModel
from .objectives import ScheduleSpec, SelfConsistencyConfig
from .simulators import JointTask, SimulationSet
from .summaries import SummaryConfig

log = logging.getLogger(__name__)

# seed domains; every random stream is keyed by (seed, domain, ...)
DOMAIN_TRAIN = 1
DOMAIN_VALIDATION = 2
DOMAIN_TEST = 3
DOMAIN_SBC = 4
DOMAIN_SHUFFLE = 10
DOMAIN_SC = 11
DOMAIN_INIT = 12
DOMAIN_EVAL = 13

SIM_CHUNK = 64
MAX_REJECTION_RATE = 0.10
MAX_ATTEMPTS = 100


# --------------------------------------------------------------------------
# training sets
# --------------------------------------------------------------------------


def _simulate_chunk(task: JointTask, seed: int, domain: int, start: int, n: int) -> tuple[np.ndarray, np.ndarray, int]:
    rngs = spawn_rngs(seed, n, domain, start)
    theta = np.stack([task.prior_sample(1, r)[0] for r in rngs])
    Y = task.simulate(theta, rngs)
    rejected = 0
    bad = ~np.isfinite(Y.reshape(n, -1)).all(-1)
    for i in np.flatnonzero(bad):
        for _ in range(MAX_ATTEMPTS):
            rejected += 1
            theta[i] = task.prior_sample(1, rngs[i])[0]
            Y[i] = task.simulate(theta[i], rngs[i])
            if np.isfinite(Y[i]).all():
                break
        else:
            raise SimulationError(f"draw {start + i} of task {task.name!r} never produced finite data")
    return theta, Y, rejected


def generate_training_set(task: JointTask, N: int, seed: int, threads: int = 1, domain: int = DOMAIN_TRAIN) -> SimulationSet:
    """Simulate ``N`` tuples ``(theta, Y)``; draw ``i`` uses the stream ``(seed, domain, i)``.

    Work is split into fixed chunks, so the result does not depend on ``threads``.

    Raises:
        SimulationError: if more than 10% of draws had to be re-simulated.
    """
    if int(N) < 1:
        raise ContractError("N must be >= 1")
    starts = list(range(0, N, SIM_CHUNK))
    jobs = [(s, min(SIM_CHUNK, N - s)) for s in starts]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda j: _simulate_chunk(task, seed, domain, *j), jobs))
    else:
        parts = [_simulate_chunk(task, seed, domain, *j) for j in jobs]
    theta = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    rejected = sum(p[2] for p in parts)
    if rejected > MAX_REJECTION_RATE * N:
        raise SimulationError(f"simulator rejected {rejected} of {N} draws (> {MAX_REJECTION_RATE:.0%})")
    if rejected:
        log.info("%s: re-simulated %d non-finite draws", task.name, rejected)
    return SimulationSet(task.name, int(seed), theta, Y, rejected, {"domain": int(domain)})


# --------------------------------------------------------------------------
# configs and model bundles
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Architecture shared by the posterior and (optional) likelihood networks."""

    n_couplings: int = 4
    coupling: str = "spline"
    bins: int = 8
    bound: float = 5.0
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "silu"
    base: str = "student-t"
    base_df: float = 100.0
    summary_dim: int | None = None
    summary_embed: int = 64
    summary_hidden: tuple[int, ...] = (64,)
    attention: bool = False
    learn_likelihood: bool = False
    likelihood_n_couplings: int | None = None
    likelihood_hidden: tuple[int, ...] | None = None
    likelihood_activation: str | None = None
    standardize: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.summary_hidden = tuple(self.summary_hidden)
        if self.likelihood_hidden is not None:
            self.likelihood_hidden = tuple(self.likelihood_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("hidden", "summary_hidden", "likelihood_hidden"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class TrainingConfig:
    N: int = 1024
    batch_size: int = 32
    epochs: int = 35
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lr_decay: str = "none"
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec.off)
    sc: SelfConsistencyConfig | None = None
    seed: int = 0
    checkpoint_every: int = 0
    weight_decay: float = 0.0
    weight_clip: float | None = None
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1 or self.batch_size > self.N:
            raise ContractError("batch size must be in [1, N]")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ContractError(f"unknown lr_decay {self.lr_decay!r}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("schedule", "sc")}
        d["schedule"] = self.schedule.to_dict()
        d["sc"] = self.sc.to_dict() if self.sc else None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        data["schedule"] = ScheduleSpec.from_dict(data.get("schedule") or {"kind": "stepwise", "steps": [[0, 0.0]]})
        sc = data.get("sc")
        data["sc"] = SelfConsistencyConfig.from_dict(sc) if sc else None
        return cls(**data)


class ModelBundle(nn.Module):
    """Posterior network, optional likelihood network and their provenance."""

    def __init__(self, task: JointTask, model: ModelConfig, seed: int = 0):
        super().__init__()
        self.task = task
        self.model_config = model
        self.seed = int(seed)
        D = task.param_dim
        J, d = task.data_shape
        summary_dim = model.summary_dim if model.summary_dim is not None else task.summary_dim
        summary = None
        if summary_dim:
            summary = SummaryConfig(d, summary_dim, model.summary_embed, model.summary_hidden, model.summary_hidden,
                                    model.activation, model.attention)
        cond_dim = summary_dim if summary_dim else J * d
        flow_kw = dict(coupling=model.coupling, bins=model.bins, bound=model.bound, activation=model.activation,
                       base=model.base, base_df=model.base_df)
        with torch.random.fork_rng():
            torch.manual_seed(int(np.random.SeedSequence([self.seed, DOMAIN_INIT]).generate_state(1)[0]))
            self.posterior = PosteriorModel(
                FlowConfig(D, cond_dim, model.n_couplings, hidden=model.hidden, perm_seed=self.seed, **flow_kw),
                task.data_shape, summary,
            )
            self.likelihood = None
            if model.learn_likelihood:
                lk = dict(flow_kw)
                lk["activation"] = model.likelihood_activation or model.activation
                self.likelihood = LikelihoodModel(
                    FlowConfig(J * d, D, model.likelihood_n_couplings or model.n_couplings,
                               hidden=model.likelihood_hidden or model.hidden, perm_seed=self.seed + 1, **lk),
                    task.data_shape,
                )

    def set_standardization(self, sims: SimulationSet) -> None:
        if not self.model_config.standardize:
            return
        self.posterior.set_standardization(sims.theta, sims.Y)
        if self.likelihood is not None:
            self.likelihood.set_standardization(sims.theta, sims.Y)

    def likelihood_source(self, cfg: SelfConsistencyConfig | None):
        if cfg is None:
            return None
        if cfg.likelihood_source == "learned":
            if self.likelihood is None:
                raise ContractError("learned likelihood source requires model.learn_likelihood = true")
            return self.likelihood
        return ExplicitLikelihood(self.task)


# --------------------------------------------------------------------------
# history
# --------------------------------------------------------------------------

HISTORY_FIELDS = ["epoch", "lambda", "sc_active", "base_loss", "sc_loss", "val_loss", "steps", "clamped", "excluded", "nonfinite"]


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    base_loss: float
    sc_loss: float | None
    val_loss: float | None
    steps: int
    clamped: int = 0
    excluded: int = 0
    nonfinite: int = 0
    wall_time_ms: float = 0.0

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "lambda": repr(float(self.lam)),
            "sc_active": int(self.lam > 0),
            "base_loss": repr(float(self.base_loss)),
            "sc_loss": "" if self.sc_loss is None else repr(float(self.sc_loss)),
            "val_loss": "" if self.val_loss is None else repr(float(self.val_loss)),
            "steps": self.steps,
            "clamped": self.clamped,
            "excluded": self.excluded,
            "nonfinite": self.nonfinite,
        }


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, config_hash: str | None = None) -> str:
        """Deterministic per-epoch table; wall times are kept out (see :meth:`timing_csv`)."""
        buf = io.StringIO()
        fields = HISTORY_FIELDS + (["config_hash"] if config_hash is not None else [])
        writer = csv.DictWriter(buf, fields, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            row = r.row()
            if config_hash is not None:
                row["config_hash"] = config_hash
            writer.writerow(row)
        return buf.getvalue()

    def timing_csv(self, config_hash: str | None = None) -> str:
        if config_hash is None:
            lines = ["epoch,wall_time_ms"] + [f"{r.epoch},{r.wall_time_ms:.1f}" for r in self.records]
        else:
            lines = ["epoch,wall_time_ms,config_hash"] + [f"{r.epoch},{r.wall_time_ms:.1f},{config_hash}" for r in self.records]
        return "\n".join(lines) + "\n"

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, items: list[dict]) -> "TrainingHistory":
        return cls([EpochRecord(**it) for it in items])

    def truncated(self, epoch: int) -> "TrainingHistory":
        return TrainingHistory([r for r in self.records if r.epoch < epoch])


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def make_optimizer(params, kind: str, lr: float) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def learning_rate_at(config: TrainingConfig, N: int, epoch: int, step: int) -> float:
    """Learning rate for a step; cosine decay runs from the initial rate to zero over all steps."""
    if config.lr_decay == "none":
        return config.learning_rate
    per_epoch = -(-N // config.batch_size)
    t = (epoch * per_epoch + step) / (config.epochs * per_epoch)
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * t))


def _l2(module: nn.Module) -> torch.Tensor:
    return sum((p**2).sum() for name, p in module.named_parameters() if name.endswith("weight"))


@dataclass
class TrainState:
    """Everything needed to resume training after ``epoch`` completed epochs."""

    epoch: int
    history: TrainingHistory
    optimizer_state: dict | None = None


def train(
    bundle: ModelBundle,
    sims: SimulationSet,
    config: TrainingConfig,
    validation: SimulationSet | None = None,
    state: TrainState | None = None,
    on_epoch=None,
) -> tuple[ModelBundle, TrainingHistory]:
    """Run the configured number of epochs over the fixed simulation set.

    Each epoch shuffles with the stream ``(seed, shuffle, epoch)``; each step's
    self-consistency proposals use ``(seed, sc, epoch, step)``. Histories are
    therefore reproducible, and identical to plain NPE/NPLE when the schedule
    is zero throughout. ``on_epoch(bundle, optimizer, history)`` is called after
    every epoch (used for checkpointing).

    Raises:
        TrainingError: after three consecutive non-finite steps.
    """
    task = bundle.task
    if sims.theta.shape[1] != task.param_dim or tuple(sims.Y.shape[1:]) != tuple(task.data_shape):
        raise ContractError("simulation set does not match the task's shapes")
    N = len(sims)
    if config.batch_size > N:
        raise ContractError("batch size exceeds the training-set size")
    history = state.history if state else TrainingHistory()
    start_epoch = state.epoch if state else 0
    if start_epoch == 0 and state is None:
        bundle.set_standardization(sims)

    opt = make_optimizer(list(bundle.parameters()), config.optimizer, config.learning_rate)
    if state and state.optimizer_state:
        opt.load_state_dict(state.optimizer_state)
    lik_source = bundle.likelihood_source(config.sc)
    theta_all = torch.as_tensor(sims.theta, dtype=DTYPE)
    Y_all = torch.as_tensor(sims.Y, dtype=DTYPE)
    streak = 0

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        lam = objectives.schedule_weight(config.schedule, epoch)
        order = keyed_rng(config.seed, DOMAIN_SHUFFLE, epoch).permutation(N)
        base_sum = sc_sum = 0.0
        steps = clamped = excluded = nonfinite = 0
        for step, start in enumerate(range(0, N, config.batch_size)):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            theta, Y = theta_all[idx], Y_all[idx]
            rng = keyed_rng(config.seed, DOMAIN_SC, epoch, step)
            try:
                terms = objectives.loss_terms(
                    bundle.posterior, theta, Y, lam, config.sc, rng,
                    prior=task, likelihood=lik_source, likelihood_model=bundle.likelihood,
                )
                loss = terms.total
                if config.weight_decay:
                    loss = loss + config.weight_decay * _l2(bundle)
                if not bool(torch.isfinite(loss)):
                    raise TrainingError("non-finite loss", {"value": float(loss.detach())})
                opt.zero_grad(set_to_none=True)
                loss.backward()
                for group in opt.param_groups:
                    group["lr"] = learning_rate_at(config, N, epoch, step)
                fit_step(bundle, opt, {"epoch": epoch, "step": step})
            except TrainingError as err:
                streak += 1
                nonfinite += 1
                opt.zero_grad(set_to_none=True)
                log.warning("epoch %d step %d skipped: %s %s", epoch, step, err, err.payload)
                if streak >= 3:
                    raise TrainingError(
                        "three consecutive non-finite steps; aborting",
                        {"epoch": epoch, "step": step, **err.payload},
                    ) from err
                continue
            streak = 0
            if config.weight_clip:
                with torch.no_grad():
                    for name, p in bundle.named_parameters():
                        if name.endswith("weight"):
                            p.clamp_(-config.weight_clip, config.weight_clip)
            steps += 1
            base_sum += float(terms.base.detach())
            if terms.sc is not None:
                sc_sum += float(terms.sc.detach())
            clamped += terms.clamped
            excluded += terms.excluded

        val = _validation_loss(bundle, validation) if validation is not None and len(validation) else None
        history.records.append(
            EpochRecord(
                epoch=epoch,
                lam=lam,
                base_loss=base_sum / max(steps, 1),
                sc_loss=(sc_sum / max(steps, 1)) if lam > 0 else None,
                val_loss=val,
                steps=steps,
                clamped=clamped,
                excluded=excluded,
                nonfinite=nonfinite,
                wall_time_ms=1000.0 * (time.perf_counter() - t0),
            )
        )
        if on_epoch is not None:
            on_epoch(bundle, opt, history)
    return bundle, history


def _validation_loss(bundle: ModelBundle, sims: SimulationSet, chunk: int = 512) -> float:
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(sims), chunk):
            theta = torch.as_tensor(sims.theta[s : s + chunk], dtype=DTYPE)
            Y = torch.as_tensor(sims.Y[s : s + chunk], dtype=DTYPE)
            lp = bundle.posterior.log_prob(theta, Y)
            if bundle.likelihood is not None:
                lp = lp + bundle.likelihood.log_prob(Y, theta)
            total += float(-lp.sum())
    return total / len(sims)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "scabi-checkpoint"
CHECKPOINT_VERSION = 1


def _encode(t: torch.Tensor) -> dict:
    arr = np.ascontiguousarray(t.detach().cpu().numpy())
    return {"dtype": str(arr.dtype), "shape": list(arr.shape), "data": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode()}


def _decode(item: dict) -> torch.Tensor:
    dt = np.dtype(item["dtype"]).newbyteorder("<")
    arr = np.frombuffer(base64.b64decode(item["data"]), dtype=dt).reshape(item["shape"])
    return torch.as_tensor(arr.astype(arr.dtype.newbyteorder("=")))


def _optimizer_payload(opt: torch.optim.Optimizer | None) -> dict | None:
    if opt is None:
        return None
    sd = opt.state_dict()
    state = {}
    for key, entry in sd["state"].items():
        state[str(key)] = {name: _encode(v) if torch.is_tensor(v) else v for name, v in entry.items()}
    return {"state": state, "param_groups": sd["param_groups"]}


def _optimizer_restore(payload: dict | None) -> dict | None:
    if not payload:
        return None
    state = {}
    for key, entry in payload["state"].items():
        state[int(key)] = {name: _decode(v) if isinstance(v, dict) else v for name, v in entry.items()}
    return {"state": state, "param_groups": payload["param_groups"]}


def save_checkpoint(
    bundle: ModelBundle,
    path: str | Path,
    *,
    config_hash: str = "",
    epoch: int = 0,
    history: TrainingHistory | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    """Write a JSON checkpoint: architecture, flat parameters, buffers, metadata.

    Tensors are stored as base64 little-endian bytes so a reload reproduces
    ``log_prob`` bit for bit. A SHA-256 over the body detects corruption.
    """
    params = torch.cat([p.detach().reshape(-1) for p in bundle.parameters()])
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task": bundle.task.name,
        "task_constants": bundle.task.constants,
        "model": bundle.model_config.to_dict(),
        "seed": bundle.seed,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "parameters": _encode(params),
        "buffers": {name: _encode(b) for name, b in bundle.named_buffers()},
        "history": (history or TrainingHistory()).to_list(),
        "optimizer": _optimizer_payload(optimizer),
    }
    text = json.dumps(body, sort_keys=True, default=_json_default)
    digest = hashlib.sha256(text.encode()).hexdigest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps({"sha256": digest, "body": text}))
    tmp.replace(path)
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


@dataclass
class Checkpoint:
    bundle: ModelBundle
    epoch: int
    config_hash: str
    history: TrainingHistory
    optimizer_state: dict | None


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    """Restore a bundle; raises :class:`CheckpointError` on corruption or mismatch."""
    from .simulators import make_task

    try:
        outer = json.loads(Path(path).read_text())
        text = outer["body"]
        if hashlib.sha256(text.encode()).hexdigest() != outer["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch (corrupted checkpoint)")
        body = json.loads(text)
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from err
    if body.get("format") != CHECKPOINT_FORMAT or body.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    if expected_hash is not None and body["config_hash"] != expected_hash:
        raise CheckpointError(
            f"{path}: config hash {body['config_hash'][:12]} does not match the supplied config {expected_hash[:12]}"
        )
    constants = {k: v for k, v in body["task_constants"].items()}
    task = make_task(body["task"], **constants)
    bundle = ModelBundle(task, ModelConfig.from_dict(body["model"]), seed=body["seed"])
    flat = _decode(body["parameters"])
    offset = 0
    with torch.no_grad():
        for p in bundle.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].reshape(p.shape))
            offset += n
        buffers = dict(bundle.named_buffers())
        for name, item in body["buffers"].items():
            buffers[name].copy_(_decode(item))
    if offset != flat.numel():
        raise CheckpointError(f"{path}: parameter count mismatch")
    history = TrainingHistory.from_list(body["history"]).truncated(body["epoch"])
    return Checkpoint(bundle, body["epoch"], body["config_hash"], history, _optimizer_restore(body["optimizer"]))
