"""Training loop and multi-seed runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import UtteranceSample, load_dataset, make_batches
from .metrics import EvalReport, evaluate, format_summary, summarize
from .model import ConfigError, HiPAMA, ModelConfig, hierarchical_loss
from .optim import Adam
from .tensor import no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 100
    batch_size: int = 25
    learning_rate: float = 1e-3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    out_dir: str = "runs"

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or not self.seeds:
            raise ConfigError("epochs, batch_size, learning_rate must be positive and seeds non-empty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown run config keys: {sorted(extra)}")
        return cls(model=model, **d)


@dataclass
class TrainResult:
    model: HiPAMA
    history: list[dict]
    best_params: list[tuple[str, np.ndarray]]
    best_epoch: int
    best_loss: float


def format_epoch(entry: dict) -> str:
    terms = " ".join(f"{k}={v:.6f}" for k, v in entry["terms"].items())
    line = f"epoch {entry['epoch']} L_total={entry['loss']:.6f} {terms}"
    if entry.get("valid_loss") is not None:
        line += f" valid_L_total={entry['valid_loss']:.6f}"
    return line


def dataset_loss(model: HiPAMA, samples: Sequence[UtteranceSample], batch_size: int) -> float:
    """Batch-size weighted mean of the total loss, in eval mode."""
    cfg = model.config
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    with no_grad():
        for batch in make_batches(samples, batch_size, None, cfg.n_phones, cfg.max_len):
            total += hierarchical_loss(model(batch), batch).total.item() * batch.size
            n += batch.size
    model.train(was_training)
    return total / n


def train_model(
    config: ModelConfig,
    samples: Sequence[UtteranceSample],
    epochs: int = 100,
    batch_size: int = 25,
    learning_rate: float = 1e-3,
    valid: Sequence[UtteranceSample] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model; the best snapshot minimises validation (else training) loss."""
    if not samples:
        raise ValueError("train_model: no training samples")
    model = HiPAMA(config)
    log.info("parameters: %d", model.num_parameters())
    opt = Adam(model.parameters(), lr=learning_rate)
    history = []
    best = (math.inf, -1, None)
    for epoch in range(epochs):
        model.train()
        sums: dict[str, float] = {}
        loss_sum, n_batches = 0.0, 0
        batches = make_batches(samples, batch_size, (config.seed, epoch), config.n_phones, config.max_len)
        for b_idx, batch in enumerate(batches):
            result = hierarchical_loss(model(batch), batch)
            value = result.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b_idx} (first utt {batch.utt_ids[0]})")
            opt.zero_grad()
            result.total.backward()
            opt.step()
            loss_sum += value
            n_batches += 1
            for k, v in result.terms.items():
                sums[k] = sums.get(k, 0.0) + v
        entry = {
            "epoch": epoch,
            "loss": loss_sum / n_batches,
            "terms": {k: v / n_batches for k, v in sums.items()},
            "valid_loss": dataset_loss(model, valid, batch_size) if valid else None,
        }
        history.append(entry)
        log.info(format_epoch(entry))
        if on_epoch:
            on_epoch(entry)
        score = entry["valid_loss"] if valid else entry["loss"]
        if score < best[0]:
            best = (score, epoch, [(n, p.data.copy()) for n, p in model.named_parameters()])
    model.eval()
    return TrainResult(model, history, best[2], best[1], best[0])


def run(config: RunConfig) -> dict:
    """Train one model per seed, write checkpoints/logs/reports under ``out_dir``."""
    config.validate()
    if not config.train_path:
        raise ConfigError("train_path is required")
    m = config.model
    train = load_dataset(config.train_path, n_phones=m.n_phones, max_len=m.max_len)
    if not train:
        raise ConfigError(f"{config.train_path}: no training samples")
    valid = load_dataset(config.valid_path, m.n_phones, m.max_len) if config.valid_path else None
    test = load_dataset(config.test_path, m.n_phones, m.max_len) if config.test_path else None
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = config.to_dict()
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    reports: list[EvalReport] = []
    for seed in config.seeds:
        mc = ModelConfig.from_dict({**m.to_dict(), "seed": seed})
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(exist_ok=True)
        lines = [f"parameters {HiPAMA(mc).num_parameters()}"]
        log.info("seed %d: %s", seed, lines[0])
        result = train_model(
            mc, train, config.epochs, config.batch_size, config.learning_rate, valid,
            on_epoch=lambda e: lines.append(format_epoch(e)),
        )
        lines.append(f"best epoch {result.best_epoch} loss {result.best_loss:.6f}")
        (run_dir / "train.log").write_text("\n".join(lines) + "\n")
        extra = {"run": resolved, "seed": seed, "epochs_trained": config.epochs}
        save_checkpoint(run_dir / "final.ckpt", result.model, extra)
        save_checkpoint(run_dir / "best.ckpt", result.model, {**extra, "best_epoch": result.best_epoch},
                        params=result.best_params)
        if test:
            report = evaluate(result.model, test, config.batch_size)
            (run_dir / "report.txt").write_text(report.to_text())
            reports.append(report)
    summary = None
    if reports:
        summary = summarize(reports)
        (out / "summary.txt").write_text(format_summary(summary))
    return {"reports": reports, "summary": summary}
