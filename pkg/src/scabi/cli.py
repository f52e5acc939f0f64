"""Config-driven experiment runner: simulate, train, evaluate, compare."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from scipy import stats

from .diagnostics import DiagnosticsReport, EvaluationSpec, ecdf_band, evaluate
from .errors import CheckpointError, ContractError, SimulationError, TrainingError
from .simulators import load_simulations, make_task, save_simulations
from .training import (
    DOMAIN_TEST,
    DOMAIN_VALIDATION,
    ModelBundle,
    ModelConfig,
    TrainingConfig,
    TrainState,
    generate_training_set,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("scabi")


@dataclass
class ExperimentConfig:
    """One experiment: task, architecture, training, evaluation and seeds."""

    name: str
    task: str
    task_constants: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    seeds: dict = field(default_factory=lambda: {"data": 0, "train": 1, "eval": 2})
    output: str = "runs/experiment"
    threads: int = 1

    def __post_init__(self):
        make_task(self.task, **self.task_constants)
        missing = {"data", "train", "eval"} - set(self.seeds)
        if missing:
            raise ContractError(f"seeds section lacks {sorted(missing)}")
        if len({int(v) for v in self.seeds.values()}) != len(self.seeds):
            raise ContractError("data, train and eval seeds must be distinct")
        self.training.seed = int(self.seeds["train"])

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        task = data.pop("task")
        if isinstance(task, dict):
            data["task"], data["task_constants"] = task["name"], task.get("constants") or {}
        else:
            data["task"] = task
        training = dict(data.get("training") or {})
        training.setdefault("seed", int((data.get("seeds") or {}).get("train", 1)))
        data["model"] = ModelConfig.from_dict(data.get("model") or {})
        data["training"] = TrainingConfig.from_dict(training)
        data["evaluation"] = EvaluationSpec.from_dict(data.get("evaluation") or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config sections {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        training = self.training.to_dict()
        training.pop("seed")
        return {
            "name": self.name,
            "task": {"name": self.task, "constants": self.task_constants},
            "model": self.model.to_dict(),
            "training": training,
            "evaluation": self.evaluation.to_dict(),
            "seeds": dict(self.seeds),
            "output": self.output,
            "threads": self.threads,
        }

    def config_hash(self) -> str:
        """Hash of everything that determines the trained model."""
        d = self.to_dict()
        relevant = {"task": d["task"], "model": d["model"], "training": d["training"],
                    "seeds": {"data": d["seeds"]["data"], "train": d["seeds"]["train"]}}
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path, seed_override: int | None = None, out: str | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ContractError(f"config file {path} does not exist") from None
    if not isinstance(data, dict):
        raise ContractError(f"{path}: expected a mapping at top level")
    if seed_override is not None:
        data.setdefault("seeds", {"data": 0, "train": 1, "eval": 2})
        data["seeds"]["train"] = int(seed_override)
    if out is not None:
        data["output"] = out
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


class Paths:
    """File layout of one experiment output directory."""

    def __init__(self, out: str | Path):
        self.root = Path(out)
        self.train_set = self.root / "train.simset"
        self.validation_set = self.root / "validation.simset"
        self.checkpoint = self.root / "checkpoint.json"
        self.history = self.root / "history.csv"
        self.timing = self.root / "timing.csv"
        self.report_json = self.root / "report.json"
        self.report_csv = self.root / "report.csv"
        self.config = self.root / "config_resolved.yaml"


def _write_resolved(cfg: ExperimentConfig, paths: Paths) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    body = {"config_hash": cfg.config_hash(), **cfg.to_dict()}
    paths.config.write_text(yaml.safe_dump(body, sort_keys=True))


def cmd_simulate(cfg: ExperimentConfig) -> Path:
    """Simulate and persist the training and validation sets."""
    paths = Paths(cfg.output)
    _write_resolved(cfg, paths)
    task = make_task(cfg.task, **cfg.task_constants)
    N = cfg.training.N
    seed = int(cfg.seeds["data"])
    sims = generate_training_set(task, N, seed, cfg.threads)
    sims.meta["config_hash"] = cfg.config_hash()
    save_simulations(sims, paths.train_set)
    n_val = math.ceil(cfg.training.validation_fraction * N)
    if n_val:
        val = generate_training_set(task, n_val, seed, cfg.threads, domain=DOMAIN_VALIDATION)
        val.meta["config_hash"] = cfg.config_hash()
        save_simulations(val, paths.validation_set)
    return paths.train_set


def _load_or_simulate(cfg: ExperimentConfig, paths: Paths):
    if not paths.train_set.exists():
        cmd_simulate(cfg)
    sims = load_simulations(paths.train_set)
    if sims.task != cfg.task or len(sims) != cfg.training.N or sims.seed != int(cfg.seeds["data"]):
        raise ContractError(f"{paths.train_set} was simulated for a different config")
    val = load_simulations(paths.validation_set) if paths.validation_set.exists() else None
    return sims, val


def cmd_train(cfg: ExperimentConfig, checkpoint: str | Path | None = None) -> Path:
    """Train (or resume) and write checkpoint plus history.

    An existing checkpoint for the same config is resumed; at the final epoch
    this is a no-op.
    """
    paths = Paths(cfg.output)
    _write_resolved(cfg, paths)
    ckpt_path = Path(checkpoint) if checkpoint else paths.checkpoint
    chash = cfg.config_hash()
    task = make_task(cfg.task, **cfg.task_constants)
    state = None
    if ckpt_path.exists():
        ck = load_checkpoint(ckpt_path, expected_hash=chash)
        if ck.epoch >= cfg.training.epochs:
            log.info("checkpoint %s already at final epoch %d; nothing to do", ckpt_path, ck.epoch)
            if not paths.history.exists():
                paths.history.write_text(ck.history.to_csv(chash))
            return ckpt_path
        bundle = ck.bundle
        state = TrainState(ck.epoch, ck.history, ck.optimizer_state)
    else:
        bundle = ModelBundle(task, cfg.model, seed=cfg.training.seed)
    sims, val = _load_or_simulate(cfg, paths)
    every = cfg.training.checkpoint_every

    def on_epoch(b, opt, history):
        e = len(history)
        if (every and e % every == 0) or e == cfg.training.epochs:
            save_checkpoint(b, ckpt_path, config_hash=chash, epoch=e, history=history, optimizer=opt)
            paths.history.write_text(history.to_csv(chash))
            paths.timing.write_text(history.timing_csv(chash))

    train(bundle, sims, cfg.training, validation=val, state=state, on_epoch=on_epoch)
    return ckpt_path


def _samples_csv(arr: np.ndarray, chash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash"] + [f"theta_{d}" for d in range(arr.shape[1])])
    for row in arr:
        w.writerow([chash] + [repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | Path | None = None) -> DiagnosticsReport:
    """Evaluate a trained checkpoint on a fresh test set and write the report files."""
    paths = Paths(cfg.output)
    ckpt_path = Path(checkpoint) if checkpoint else paths.checkpoint
    if not ckpt_path.exists():
        raise CheckpointError(f"checkpoint {ckpt_path} does not exist; run `scabi train` first")
    chash = cfg.config_hash()
    ck = load_checkpoint(ckpt_path, expected_hash=chash)
    torch.manual_seed(0)
    spec = cfg.evaluation
    eval_seed = int(cfg.seeds["eval"])
    test = generate_training_set(ck.bundle.task, spec.M, eval_seed, cfg.threads, domain=DOMAIN_TEST)
    samples: dict = {}
    report = evaluate(ck.bundle, test, spec, eval_seed, chash, samples_out=samples)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.report_json.write_text(report.to_json())
    paths.report_csv.write_text(report.to_csv())
    if report.sbc_ranks is not None:
        band = ecdf_band(report.sbc_ranks, report.sbc_draws)
        text = band.to_csv().splitlines()
        text = [text[0] + ",config_hash"] + [line + "," + chash for line in text[1:]]
        (paths.root / "ecdf_posterior.csv").write_text("\n".join(text) + "\n")
    for name, arr in samples.items():
        (paths.root / f"samples_{name}.csv").write_text(_samples_csv(arr, chash))
    return report


def cmd_compare(report_a: str | Path, report_b: str | Path) -> dict:
    """Paired per-instance MMD comparison of two reports on identical test instances."""
    a = DiagnosticsReport.from_dict(json.loads(Path(report_a).read_text()))
    b = DiagnosticsReport.from_dict(json.loads(Path(report_b).read_text()))
    ha = [r["hash"] for r in a.instances]
    hb = [r["hash"] for r in b.instances]
    if ha != hb:
        raise ContractError("reports cover different test instances (instance hashes differ)")
    ma = np.array([r["mmd"] for r in a.instances], dtype=np.float64)
    mb = np.array([r["mmd"] for r in b.instances], dtype=np.float64)
    if np.isnan(ma).any() or np.isnan(mb).any():
        raise ContractError("both reports need per-instance MMD values")
    delta = ma - mb
    wins = int((delta < 0).sum())
    losses = int((delta > 0).sum())
    ties = len(delta) - wins - losses
    fraction = (wins + 0.5 * ties) / len(delta)
    p = float(stats.binomtest(wins, wins + losses, 0.5).pvalue) if wins + losses else 1.0
    return {
        "report_a": str(report_a),
        "report_b": str(report_b),
        "config_hash_a": a.config_hash,
        "config_hash_b": b.config_hash,
        "instances": len(delta),
        "fraction_a_lower": fraction,
        "a_lower": wins,
        "b_lower": losses,
        "ties": ties,
        "sign_test_p": p,
        "median_mmd_a": float(np.median(ma)),
        "median_mmd_b": float(np.median(mb)),
        "delta": delta.tolist(),
    }


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scabi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed-override", type=int, help="replace the training seed")
        p.add_argument("--threads", type=int, help="worker threads for simulation and torch")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")

    common(sub.add_parser("simulate", help="simulate the training and validation sets"))
    common(sub.add_parser("train", help="train or resume from a checkpoint"), checkpoint=True)
    common(sub.add_parser("evaluate", help="evaluate a checkpoint"), checkpoint=True)
    common(sub.add_parser("all", help="simulate, train and evaluate"), checkpoint=True)
    cmp = sub.add_parser("compare", help="paired comparison of two reports")
    cmp.add_argument("report_a")
    cmp.add_argument("report_b")
    cmp.add_argument("--out", help="directory for compare.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            result = cmd_compare(args.report_a, args.report_b)
            text = json.dumps(result, sort_keys=True, indent=1)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "compare.json").write_text(text)
            summary = {k: v for k, v in result.items() if k != "delta"}
            print(json.dumps(summary, sort_keys=True, indent=1))
            return 0
        cfg = load_config(args.config, args.seed_override, args.out)
        if args.threads:
            cfg.threads = args.threads
        torch.set_num_threads(max(1, cfg.threads))
        checkpoint = getattr(args, "checkpoint", None)
        if args.command == "simulate":
            print(cmd_simulate(cfg))
        elif args.command == "train":
            print(cmd_train(cfg, checkpoint))
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, checkpoint)
            print(json.dumps(report.summary(), sort_keys=True, indent=1))
        elif args.command == "all":
            cmd_simulate(cfg)
            cmd_train(cfg, checkpoint)
            report = cmd_evaluate(cfg, checkpoint)
            print(json.dumps(report.summary(), sort_keys=True, indent=1))
        return 0
    except (ContractError, CheckpointError, SimulationError, TrainingError) as err:
        print(f"scabi: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
