"""Optimisation loop, input standardisation and cross-validation folds."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-5
    epochs: int = 15
    batch_size: int = 5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    selection: str = "val_loss"  # or "val_dsc"
    seed: int = 0
    num_workers: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.selection not in ("val_loss", "val_dsc"):
            raise ValueError(f"unknown selection criterion {self.selection!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- standardisation -------------------------------------------------------------


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def compute_stats(images: np.ndarray) -> ChannelStats:
    """Per-channel mean and standard deviation over an ``N x H x W x C`` stack."""
    x = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-1])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for c, s in enumerate(std):
        if not s > 0:
            raise ValueError(f"channel {c} has zero variance; cannot standardise")
    return ChannelStats(mean, std)


def normalize(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Zero-mean, unit-variance transform with frozen statistics."""
    for c, s in enumerate(stats.std):
        if not s > 0:
            raise ValueError(f"channel {c} has zero variance; cannot standardise")
    return (np.asarray(images, np.float64) - stats.mean) / stats.std


# -- folds ------------------------------------------------------------------------


@dataclass
class Fold:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldSplit:
    folds: list[Fold]
    seed: int = 0

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]

    def fold_of_test(self, wsi_id: str) -> int:
        for i, f in enumerate(self.folds):
            if wsi_id in f.test:
                return i
        raise KeyError(f"{wsi_id} is not in the test split of any fold")

    def to_dict(self):
        return {"seed": self.seed, "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d):
        return cls([Fold(**f) for f in d["folds"]], d.get("seed", 0))


def make_folds(wsi_ids, n_folds: int = 8, seed: int = 0) -> FoldSplit:
    """k-fold split: each fold tests one group, validates on the next, trains on the rest.

    With 24 slides and 8 folds this gives 18/3/3 per fold, and every slide is
    test data in exactly one fold.
    """
    ids = list(wsi_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("slide ids must be unique")
    if n_folds < 3:
        raise ValueError("need at least 3 folds (train, validation and test groups)")
    if len(ids) % n_folds:
        raise ValueError(f"{len(ids)} slides cannot be split evenly into {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    size = len(ids) // n_folds
    groups = [[ids[j] for j in order[g * size : (g + 1) * size]] for g in range(n_folds)]
    folds = []
    for i in range(n_folds):
        v = (i + 1) % n_folds
        train = [x for g, grp in enumerate(groups) if g not in (i, v) for x in grp]
        folds.append(Fold(train, list(groups[v]), list(groups[i])))
    return FoldSplit(folds, seed)


# -- optimisation -------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    final_state: dict | None = None

    def write_csv(self, path) -> None:
        keys = ["epoch", "train_loss", "val_loss"] + (["val_dsc"] if self.epochs and "val_dsc" in self.epochs[0] else [])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.epochs)


def select_best_epoch(values, mode: str = "min") -> int:
    """1-based index of the best epoch; ties resolve to the earliest."""
    arr = np.asarray(values, float)
    return int(np.argmin(arr) if mode == "min" else np.argmax(arr)) + 1


def collate(batch):
    images = torch.from_numpy(np.stack([b[0] for b in batch])).permute(0, 3, 1, 2).float()
    targets = torch.from_numpy(np.stack([np.asarray(b[1]) for b in batch]).astype(np.int64))
    return images, targets


def make_optimizer(model, cfg: TrainingConfig) -> torch.optim.Optimizer:
    # coupled L2 penalty on every trainable tensor
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)


def evaluate_loss(model, dataset, batch_size: int = 8) -> tuple[float, float]:
    """Mean cross-entropy and pooled pixel Dice over a dataset (eval mode)."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    model.eval()
    total, count = 0.0, 0
    tp = fp = fn = 0
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=collate)
    with torch.no_grad():
        for x, y in loader:
            logits = model(x)
            total += F.cross_entropy(logits, y, reduction="sum").item()
            count += y.numel()
            pred = logits.argmax(1)
            tp += int(((pred == 1) & (y == 1)).sum())
            fp += int(((pred == 1) & (y == 0)).sum())
            fn += int(((pred == 0) & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    return total / count, (2 * tp / denom if denom else 1.0)


def train(model, dataset, val_dataset, cfg: TrainingConfig, stats=None):
    """Train for ``cfg.epochs`` epochs and return the snapshot with the best validation score.

    ``stats`` (per-channel mean/std of the training images) is written into the
    model's input standardisation; it is computed from ``dataset`` when omitted.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if stats is None:
        stats = compute_stats(dataset.raw_images())
    model.set_input_stats(stats.mean, stats.std)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        dataset, batch_size=cfg.batch_size, shuffle=True, generator=gen,
        collate_fn=collate, num_workers=cfg.num_workers,
    )
    opt = make_optimizer(model, cfg)
    history = History()
    best_state, best_score = None, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running, seen = 0.0, 0
        for b, (x, y) in enumerate(loader):
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b, loss.item())
            loss.backward()
            opt.step()
            running += loss.item() * len(x)
            seen += len(x)
        val_loss, val_dsc = evaluate_loss(model, val_dataset)
        row = {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss, "val_dsc": val_dsc}
        history.epochs.append(row)
        log.info("epoch %d train %.4f val %.4f dsc %.3f", epoch, row["train_loss"], val_loss, val_dsc)
        score = -val_dsc if cfg.selection == "val_dsc" else val_loss
        if best_score is None or score < best_score or (math.isnan(best_score) and not math.isnan(score)):
            best_score, best_state = score, copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
    history.final_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, history
