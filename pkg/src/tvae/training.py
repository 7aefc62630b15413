"""Adam training loop for T-VAE, VAE and VAE+ with seeded replay."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augmentation import augment_single, make_triplets
from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .datasets import ImageSet
from .networks import VAE, build_model
from .objective import LossBreakdown, tvae_loss, vae_loss

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
EVAL_BATCH = 500


def lr_at(epoch: int, lr0: float, period: int = 50) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 2.0 ** -(epoch // period)


@dataclass
class MetricsLog:
    """Per-epoch loss terms on train/test plus the learning rate used."""

    epochs: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def record(self, epoch, lr, train, test, seconds):
        self.epochs.append(epoch)
        self.lr.append(lr)
        self.train.append(train)
        self.test.append(test)
        self.seconds.append(seconds)

    def series(self, split: str, term: str) -> list:
        return [row.get(term) for row in getattr(self, split)]

    def rows(self):
        for i, epoch in enumerate(self.epochs):
            yield epoch, "schedule", "lr", self.lr[i]
            for split in ("train", "test"):
                for term, value in sorted(getattr(self, split)[i].items()):
                    yield epoch, split, term, value

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "split", "term", "value"])
        for epoch, split, term, value in self.rows():
            writer.writerow([epoch, split, term, repr(float(value))])
        return buf.getvalue()

    def __eq__(self, other):
        # wall-clock is excluded from equality
        return (isinstance(other, MetricsLog) and self.epochs == other.epochs and self.lr == other.lr
                and self.train == other.train and self.test == other.test)


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _streams(seed: int, purpose: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, purpose]))
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def batch_loss(model: VAE, cfg: TrainConfig, x: torch.Tensor, rng, gen) -> LossBreakdown:
    if cfg.model == "tvae":
        tri = make_triplets(x, rng, cfg.aug)
        return tvae_loss(model, tri.x0, tri.x1, tri.x2, gen, cfg.mmd_squared)
    if cfg.model == "vae_plus":
        return vae_loss(model, augment_single(x, rng, cfg.aug), gen)
    return vae_loss(model, x, gen)


def evaluate_split(model: VAE, cfg: TrainConfig, data: ImageSet, seed_offset: int = 2) -> dict:
    """Batch-averaged loss terms on ``data`` with a fixed augmentation/noise stream.

    VAE+ is scored on the unaugmented images, like the other models' ``nllx0``.
    """
    rng, gen = _streams(cfg.aug.seed * 7919 + cfg.seed, seed_offset)
    sums, n = {}, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(data), EVAL_BATCH):
            x = data.tensor(slice(start, start + EVAL_BATCH)).to(_dtype(model))
            if cfg.model == "tvae":
                values = batch_loss(model, cfg, x, rng, gen).values()
            else:
                values = vae_loss(model, x, gen).values()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v * len(x)
            n += len(x)
    model.train(was_training)
    return {k: v / n for k, v in sums.items()}


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def train(config: RunConfig, train_set: ImageSet, test_set: Optional[ImageSet] = None,
          out_dir=None, model: Optional[VAE] = None) -> tuple[VAE, MetricsLog]:
    """Run the full optimisation; returns the final model and its metrics log.

    A NaN/inf loss raises ``NumericalError``; the most recent checkpoint in
    ``out_dir`` is left untouched.
    """
    cfg = config.train
    seed_everything(cfg.seed, cfg.deterministic)
    if model is None:
        model = build_model(cfg.model_spec())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    rng, gen = _streams(cfg.aug.seed * 7919 + cfg.seed, 1)
    metrics = MetricsLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dtype = _dtype(model)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, cfg.lr0, cfg.lr_halving_period)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        sums, n = {}, 0
        perm = rng.permutation(len(train_set))
        for start in range(0, len(perm), cfg.batch):
            idx = perm[start:start + cfg.batch]
            x = train_set.tensor(idx).to(dtype)
            loss = batch_loss(model, cfg, x, rng, gen)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            for k, v in loss.values().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            n += len(idx)
        train_terms = {k: v / n for k, v in sums.items()}
        test_terms = evaluate_split(model, cfg, test_set) if test_set is not None else {}
        metrics.record(epoch, lr, train_terms, test_terms, time.perf_counter() - started)
        log.info("epoch %d lr %.3g train total %.3f test nllx0 %s", epoch, lr, train_terms["total"],
                 f"{test_terms['nllx0']:.3f}" if test_terms else "-")
        last = epoch == cfg.epochs - 1
        if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or last):
            save_checkpoint(model, out_dir / CHECKPOINT_NAME, config.to_dict(), {"epoch": epoch})
    return model, metrics
