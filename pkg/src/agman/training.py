"""Training loop, step-decay schedule and checkpoint container."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig
from .data import AttributeSpace, DatasetSplit, ImageStore, Triplet, sample_triplets
from .losses import DynamicWeighting, classification_loss, triplet_loss
from .model import AGMAN, build_model

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_c", "L_triplet", "total", "w0", "w1", "lr")
PARAMS_FILE = "params.pt"
META_FILE = "meta.json"


class TrainingAborted(RuntimeError):
    """A loss became non-finite."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupted or incompatible with the run config."""


@dataclass
class Checkpoint:
    model: AGMAN
    weighting: DynamicWeighting
    config: RunConfig
    space: AttributeSpace
    epoch: int = 0
    metrics: dict = field(default_factory=dict)


def lr_at_epoch(lr: float, gamma: float, step: int, epoch: int) -> float:
    """Learning rate in effect during 0-based ``epoch``."""
    return lr * gamma ** (epoch // step)


def epoch_batches(split: DatasetSplit, space: AttributeSpace, count: int, batch_size: int,
                  seed: int) -> list[list[Triplet]]:
    """Sample ``count`` triplets split evenly over attributes and group them
    into single-attribute batches, interleaved round-robin."""
    per_attr = [count // space.n + (1 if a < count % space.n else 0) for a in range(space.n)]
    queues = []
    for a, k in enumerate(per_attr):
        if k == 0:
            queues.append([])
            continue
        ts = sample_triplets(split, a, k, seed=seed * 1_000_003 + a)
        queues.append([ts[i:i + batch_size] for i in range(0, k, batch_size)])
    batches = []
    for i in range(max(len(q) for q in queues)):
        for q in queues:
            if i < len(q):
                batches.append(q[i])
    return batches


def _make_optimizer(params, config: RunConfig):
    t = config.train
    if t.optimizer == "sgd":
        return torch.optim.SGD(params, lr=t.learning_rate, momentum=0.9)
    return torch.optim.Adam(params, lr=t.learning_rate)


def batch_losses(model: AGMAN, store: ImageStore, batch: list[Triplet], config: RunConfig,
                 class_weights: torch.Tensor):
    """(L_c, L_triplet) for one single-attribute batch."""
    k = len(batch)
    ids = [t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch]
    images = store.get(ids)
    attrs = torch.tensor([t.attribute for t in batch] * 3)
    emb, logits, _ = model(images, attrs)
    ea, ep, en = emb[:k], emb[k:2 * k], emb[2 * k:]
    l_trip = triplet_loss(ea, ep, en, config.train.margin, config.train.triplet_mode)
    target = model.one_hot(attrs[:k], logits.dtype)
    l_cls = classification_loss(logits[:k], target, class_weights)
    return l_cls, l_trip


def train(dataset: DatasetSplit, space: AttributeSpace, config: RunConfig,
          store: ImageStore | None = None, workers: int = 1) -> tuple[Checkpoint, list[dict]]:
    """Train from a seeded initialisation; returns the checkpoint and per-epoch history."""
    t = config.train
    torch.manual_seed(config.seed)
    model = build_model(config, space)
    weighting = DynamicWeighting(t.weight_clamp, freeze_w0=not t.enable_classification_loss)
    store = store or ImageStore(dataset, config.image_size, workers)
    params = [p for p in model.parameters()] + [p for p in weighting.parameters() if p.requires_grad]
    optimizer = _make_optimizer(params, config)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=t.lr_step, gamma=t.lr_gamma)
    class_weights = torch.tensor(t.class_weights or [1.0] * space.n)
    history = []
    for epoch in range(t.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        batches = epoch_batches(dataset, space, t.triplets_per_epoch, t.batch_size,
                                seed=config.seed * 7919 + epoch)
        sums = {"L_c": 0.0, "L_triplet": 0.0, "total": 0.0}
        for bi, batch in enumerate(batches):
            l_cls, l_trip = batch_losses(model, store, batch, config, class_weights)
            if not t.enable_classification_loss:
                l_cls = torch.zeros_like(l_cls)
            total = weighting(l_cls, l_trip)
            for name, value in (("L_c", l_cls), ("L_triplet", l_trip), ("total", total)):
                if not torch.isfinite(value):
                    raise TrainingAborted(f"epoch {epoch} batch {bi}: non-finite {name} ({value.item()})")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            weighting.clamp_()
            sums["L_c"] += l_cls.item()
            sums["L_triplet"] += l_trip.item()
            sums["total"] += total.item()
        scheduler.step()
        row = {"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()},
               "w0": weighting.w0.item(), "w1": weighting.w1.item(), "lr": lr}
        history.append(row)
        logger.info("epoch %d  L_c %.4f  L_triplet %.4f  total %.4f  w0 %.5f  w1 %.5f  lr %.3g",
                    row["epoch"], row["L_c"], row["L_triplet"], row["total"], row["w0"], row["w1"], lr)
    model.eval()
    return Checkpoint(model, weighting, config, space, epoch=t.epochs), history


# -- persistence --------------------------------------------------------------

def write_history(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write ``params.pt`` (torch state dict) and ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {"model": ckpt.model.state_dict(), "weighting": ckpt.weighting.state_dict()}
    torch.save(state, directory / PARAMS_FILE)
    meta = {
        "format": "agman-checkpoint/1",
        "config": ckpt.config.to_dict(),
        "space": ckpt.space.to_dict(),
        "epoch": ckpt.epoch,
        "seeds": {"init": ckpt.config.seed, "triplets": ckpt.config.seed * 7919},
        "metrics": ckpt.metrics,
    }
    (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path, expect: RunConfig | None = None) -> Checkpoint:
    """Load a checkpoint; if ``expect`` is given, its profile and attribute
    space must match the stored ones."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / META_FILE).read_text())
        config = RunConfig.from_dict(meta["config"])
        space = AttributeSpace.from_dict(meta["space"])
    except FileNotFoundError as exc:
        raise CheckpointError(f"cannot load checkpoint {directory}: missing {Path(exc.filename).name}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {directory}: bad {META_FILE} ({exc})") from None
    if expect is not None:
        if expect.model.profile != config.model.profile:
            raise CheckpointError(f"checkpoint profile {config.model.profile!r} does not match "
                                  f"config profile {expect.model.profile!r}")
        if expect.space is not None and expect.space != space:
            raise CheckpointError(f"checkpoint has n={space.n} attributes {list(space.names)}, "
                                  f"config has n={expect.space.n} {list(expect.space.names)}")
    model = AGMAN(config, space)
    weighting = DynamicWeighting(config.train.weight_clamp,
                                 freeze_w0=not config.train.enable_classification_loss)
    try:
        state = torch.load(directory / PARAMS_FILE, map_location="cpu", weights_only=True)
        model.load_state_dict(state["model"])
        weighting.load_state_dict(state["weighting"])
    except FileNotFoundError:
        raise CheckpointError(f"cannot load checkpoint {directory}: missing {PARAMS_FILE}") from None
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot load checkpoint {directory}: {exc}") from None
    model.eval()
    return Checkpoint(model, weighting, config, space, meta["epoch"], meta.get("metrics", {}))
