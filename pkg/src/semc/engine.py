"""Training loop, evaluation metrics and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from .config import RunConfig, fixed_alpha
from .data import AugmentPolicy, DatasetManifest, ManifestDataset, load_manifest
from .errors import CheckpointError, DataError, NumericalError
from .mcrm import ContrastiveQueue, LossBreakdown, anneal_tau, compute_losses, queue_update
from .model import SEMC

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["epoch", "lr", "L_sup", "L_self", "L_mc", "L_moe", "alpha", "L_total",
                  "val_acc", "val_precision", "val_recall", "val_f1"]
STEP_COLUMNS = ["epoch", "step", "lr", "L_sup", "L_self", "L_mc", "L_moe", "alpha", "L_total"]
MAX_BAD_STEPS = 3


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic or os.environ.get("SEMC_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)


def cosine_lr(t: float, total: int, base: float) -> float:
    """Single-cycle cosine annealing from ``base`` at t=0 to 0 at t=total."""
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total))


def build_optimizer(model: nn.Module, cfg) -> torch.optim.SGD:
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "confusion": self.confusion.tolist()}


def metrics_from_predictions(y_true, y_pred, num_classes: int) -> MetricsReport:
    """Accuracy and macro precision/recall/F1 in percent; 0/0 counts as 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("cannot evaluate an empty split")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(float(100.0 * tp.sum() / cm.sum()), float(100.0 * precision.mean()),
                         float(100.0 * recall.mean()), float(100.0 * f1.mean()), cm)


@torch.no_grad()
def predict(model: SEMC, loader) -> tuple[np.ndarray, np.ndarray]:
    was_training = model.training
    model.eval()
    ys, ps = [], []
    try:
        for x, y in loader:
            out = model(x, project=False)
            ps.append(out.logits.argmax(dim=1).cpu())
            ys.append(torch.as_tensor(y))
    finally:
        model.train(was_training)
    if not ys:
        raise DataError("cannot evaluate an empty split")
    return torch.cat(ys).numpy(), torch.cat(ps).numpy()


def evaluate(model: SEMC, loader) -> MetricsReport:
    """Noise-free gated predictions scored against labels; never touches the queue."""
    y, p = predict(model, loader)
    return metrics_from_predictions(y, p, model.num_classes)


class Trainer:
    """Owns the model's optimizer, contrastive queue and schedule position."""

    def __init__(self, model: SEMC, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.queue = ContrastiveQueue(cfg.mcrm.queue_size, cfg.mcrm.embed_dim)
        self.optimizer = build_optimizer(model, cfg.train)
        self.alpha_fixed = fixed_alpha(cfg.train.alpha_mode)
        self.epoch = 0
        self.bad_steps = 0
        self.stats: dict = {}

    def set_epoch(self, epoch: int) -> float:
        self.epoch = epoch
        t = self.cfg.train
        lr = cosine_lr(epoch, t.epochs, t.lr)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        m = self.cfg.mcrm
        self.model.mcrm.gate.tau = anneal_tau(m.gate_tau, m.gate_tau_end, epoch, t.epochs)
        return lr

    def losses(self, x, y, gate_noise=None):
        m, t = self.cfg.mcrm, self.cfg.train
        out = self.model(x, gate_noise=gate_noise, project=t.lmc_on)
        parts = compute_losses(out.head, y, self.queue, temperature=m.temperature, lam=m.lambda_,
                               lmc_on=t.lmc_on, alpha_override=self.alpha_fixed,
                               aux_weight=m.aux_expert_ce, stats=self.stats)
        return parts, out

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> Optional[LossBreakdown]:
        """Forward, backward on L_total, optimizer step, then enqueue detached key views."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            parts, out = self.losses(x, y)
        except NumericalError as e:
            self._bad_step(str(e))
            return None
        parts.L_total.backward()
        if self.cfg.train.grad_clip > 0:
            norm = nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
            if not torch.isfinite(norm):
                self.optimizer.zero_grad(set_to_none=True)
                self._bad_step("gradient norm is not finite")
                return None
        self.optimizer.step()
        self.bad_steps = 0
        if self.cfg.train.lmc_on:
            keys = self.model.mcrm.key_embeddings(out.fused.O[1:], out.head.embeddings[1:])
            queue_update(self.queue, keys, y)
            self.model.mcrm.momentum_update()
        return parts

    def _bad_step(self, reason: str) -> None:
        self.bad_steps += 1
        log.warning("skipping step with non-finite values (%s), %d in a row", reason, self.bad_steps)
        if self.bad_steps >= MAX_BAD_STEPS:
            raise NumericalError(f"{self.bad_steps} consecutive non-finite steps: {reason}")

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                "queue": self.queue.state_dict(), "epoch": self.epoch, "rng": torch.get_rng_state()}


def save_checkpoint(path: str | Path, trainer: Trainer, extra: Optional[dict] = None) -> None:
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config": trainer.cfg.to_dict(),
        "config_hash": trainer.cfg.model_hash(),
        **trainer.state_dict(),
        "extra": extra or {},
    }
    torch.save(blob, path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version') if isinstance(blob, dict) else None}")
    return blob


def load_checkpoint(path: str | Path, trainer: Trainer, restore_rng: bool = True) -> dict:
    """Restore parameters, optimizer, queue and epoch into ``trainer``."""
    blob = read_checkpoint(path)
    if blob["config_hash"] != trainer.cfg.model_hash():
        theirs = RunConfig.from_dict(blob["config"])
        diff = [k for k, v in theirs.to_flat().items() if trainer.cfg.to_flat().get(k) != v
                and not k.startswith(("train.", "data."))]
        raise CheckpointError(f"checkpoint config does not match the model ({', '.join(diff) or 'hash'})")
    trainer.model.load_state_dict(blob["model"])
    trainer.optimizer.load_state_dict(blob["optimizer"])
    trainer.queue.load_state_dict(blob["queue"])
    trainer.epoch = blob["epoch"]
    if restore_rng and "rng" in blob:
        torch.set_rng_state(blob["rng"])
    return blob


def model_from_checkpoint(path: str | Path) -> tuple[Trainer, dict]:
    blob = read_checkpoint(path)
    cfg = RunConfig.from_dict(blob["config"]).validate()
    trainer = Trainer(SEMC(cfg), cfg)
    load_checkpoint(path, trainer)
    return trainer, blob


# --- data plumbing -------------------------------------------------------------------

def make_datasets(cfg: RunConfig, manifest: Optional[DatasetManifest] = None):
    """(train set, eval set, manifest) for the configured splits."""
    d = cfg.data
    if manifest is None:
        manifest = load_manifest(Path(d.root) / d.manifest, Path(d.root) / d.classes)
    if manifest.num_classes != cfg.model.num_classes:
        raise DataError(f"manifest has {manifest.num_classes} classes, model.num_classes = {cfg.model.num_classes}")
    size, ch, seed = cfg.backbone.input_size, cfg.backbone.in_channels, cfg.train.seed
    policy = None
    if d.augment:
        policy = AugmentPolicy(d.rotation, d.hflip, d.vflip, tuple(d.brightness), size)
    train = ManifestDataset(manifest, manifest.indices(d.train_on, seed, d.split), size, ch, policy, seed)
    held = ManifestDataset(manifest, manifest.indices(d.eval_on, seed, d.split), size, ch, None, seed)
    return train, held, manifest


def train_loader(dataset, batch_size: int, seed: int) -> DataLoader:
    g = torch.Generator()
    g.manual_seed(seed)
    # a trailing batch of one breaks batch statistics and contrastive positives
    drop_last = len(dataset) % batch_size == 1
    return DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=g, drop_last=drop_last)


def eval_loader(dataset, batch_size: int) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=False)


def _fmt(v) -> str:
    return f"{v:.8g}" if isinstance(v, float) else str(v)


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_metrics: Optional[MetricsReport] = None
    best_epoch: int = -1
    best_path: Optional[Path] = None


def fit(trainer: Trainer, train_set, val_set, run_dir: Optional[str | Path] = None,
        epochs: Optional[int] = None) -> FitResult:
    """Cosine-scheduled epochs of ``train_step``; keeps the checkpoint with the best val macro F1."""
    cfg = trainer.cfg
    epochs = cfg.train.epochs if epochs is None else epochs
    run_dir = Path(run_dir) if run_dir is not None else None
    loader = train_loader(train_set, cfg.train.batch_size, cfg.train.seed)
    val = eval_loader(val_set, max(cfg.train.batch_size, 32))
    result = FitResult()
    metrics_fh = steps_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = (run_dir / "metrics.csv").open("w", newline="")
        steps_fh = (run_dir / "steps.csv").open("w", newline="")
        metrics_w = csv.writer(metrics_fh, lineterminator="\n")
        steps_w = csv.writer(steps_fh, lineterminator="\n")
        metrics_w.writerow(METRIC_COLUMNS)
        steps_w.writerow(STEP_COLUMNS)
    try:
        for epoch in range(trainer.epoch, epochs):
            lr = trainer.set_epoch(epoch)
            if hasattr(train_set, "set_epoch"):
                train_set.set_epoch(epoch)
            sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
            steps = 0
            for step, (x, y) in enumerate(loader):
                parts = trainer.train_step(x, torch.as_tensor(y))
                if parts is None:
                    continue
                row = parts.as_floats()
                for k in sums:
                    sums[k] += row[k]
                steps += 1
                if steps_fh is not None:
                    steps_w.writerow([epoch, step, _fmt(lr)] + [_fmt(row[k]) for k in LossBreakdown.FIELDS])
            trainer.epoch = epoch + 1
            report = evaluate(trainer.model, val)
            means = {k: v / max(steps, 1) for k, v in sums.items()}
            row = {"epoch": epoch, "lr": lr, **means, "val_acc": report.accuracy,
                   "val_precision": report.precision, "val_recall": report.recall, "val_f1": report.f1}
            result.history.append(row)
            log.info("epoch %d lr %.3g L_total %.4f val acc %.2f f1 %.2f", epoch, lr, means["L_total"],
                     report.accuracy, report.f1)
            if metrics_fh is not None:
                metrics_w.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])
                metrics_fh.flush()
            if result.best_metrics is None or report.f1 > result.best_metrics.f1:
                result.best_metrics, result.best_epoch = report, epoch
                if run_dir is not None:
                    result.best_path = run_dir / "best.ckpt"
                    save_checkpoint(result.best_path, trainer, {"val": report.as_dict(), "epoch": epoch})
        if run_dir is not None:
            save_checkpoint(run_dir / "last.ckpt", trainer)
    finally:
        for fh in (metrics_fh, steps_fh):
            if fh is not None:
                fh.close()
    return result
