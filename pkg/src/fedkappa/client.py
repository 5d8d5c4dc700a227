"""Client-side training runtime.

One federated round on a client is a single epoch of class-balanced,
augmented mini-batches optimized with Adam, producing a weight delta and the
iteration count that weights it during aggregation. The client also tracks
its per-round validation kappa history, selects its best model across rounds
(global or local candidates), and can fine-tune from that selection.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import EmptySplit, InvalidConfig, NoCandidates
from .imageops import rotate_batch
from .metrics import evaluate_kappa
from .seeding import make_rng


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 45.0
    intensity_shift_range: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip_prob must lie in [0, 1]")
        if self.max_rotation_deg < 0:
            raise InvalidConfig("max_rotation_deg must be >= 0")
        if self.intensity_shift_range < 0:
            raise InvalidConfig("intensity_shift_range must be >= 0")


def augment_batch(images: np.ndarray, config: AugmentConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Random flips, rotation, and intensity shift for a batch of images.

    Draw order per batch: horizontal flips [B], vertical flips [B], angles
    [B], shifts [B]. Rotation resamples bilinearly with zero-padded corners;
    the result is clamped back to [0, 1].
    """
    b = images.shape[0]
    out = images.astype(np.float32, copy=True)
    flip_h = rng.random(b) < config.flip_prob
    flip_v = rng.random(b) < config.flip_prob
    angles = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg, b)
    shifts = rng.uniform(-config.intensity_shift_range,
                         config.intensity_shift_range, b)
    if flip_h.any():
        out[flip_h] = out[flip_h, :, ::-1]
    if flip_v.any():
        out[flip_v] = out[flip_v, ::-1, :]
    if config.max_rotation_deg > 0:
        out = rotate_batch(out, angles).astype(np.float32)
    if config.intensity_shift_range > 0:
        out = out + shifts[:, None, None].astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Augment a single image (same draw order as a batch of one)."""
    return augment_batch(image[None], config, rng)[0]


def balanced_batches(labels: np.ndarray, batch_size: int,
                     rng: np.random.Generator) -> list:
    """Index batches in which every present class appears equally often.

    Per batch, each present class contributes batch_size // n_present
    samples. Every sample of every class is visited at least once per epoch
    (the majority class exactly once); smaller classes top up by sampling
    with replacement. Epoch length is ceil(majority_count / per_class).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySplit("no samples to batch")
    present = [c for c in range(4) if (labels == c).any()]
    per_class = batch_size // len(present)
    if per_class == 0:
        raise InvalidConfig(
            f"batch_size {batch_size} too small for {len(present)} classes")
    class_indices = [np.flatnonzero(labels == c) for c in present]
    majority = max(idx.size for idx in class_indices)
    n_batches = math.ceil(majority / per_class)
    quota = n_batches * per_class

    streams = []
    for idx in class_indices:
        stream = rng.permutation(idx)
        if quota > idx.size:
            stream = np.concatenate(
                [stream, rng.choice(idx, quota - idx.size, replace=True)])
        streams.append(stream[:quota])

    batches = []
    for b in range(n_batches):
        chunk = [s[b * per_class:(b + 1) * per_class] for s in streams]
        batches.append(np.concatenate(chunk))
    return batches


@dataclass(frozen=True)
class TrainConfig:
    spec: nn.ModelSpec
    schedule: nn.LrSchedule
    batch_size: int = 32
    weight_decay: float = 1e-5
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def local_training(params: nn.ParamVector, site, config: TrainConfig,
                   round_index: int, seed: int):
    """One epoch of local training; returns (delta, n_k, epoch_loss).

    Deterministic given (seed, round_index) and the inputs: batching and
    augmentation randomness come from a Philox stream keyed by both, and the
    optimizer state starts fresh each round.
    """
    train_idx = site.split_indices("train")
    if train_idx.size == 0:
        raise EmptySplit(f"site {site.site_id!r} has an empty training split")
    rng = make_rng("local", seed, round_index)
    labels = site.labels[train_idx]
    batches = balanced_batches(labels, config.batch_size, rng)

    lr = nn.lr_at(config.schedule, round_index)
    theta = params.copy()
    state = nn.AdamState.fresh(theta.values.shape[0])
    loss_sum = 0.0
    for batch_idx in batches:
        rows = train_idx[batch_idx]
        images = augment_batch(site.images[rows], config.augment, rng)
        loss, grad = nn.loss_and_grad(config.spec, theta, images,
                                      site.labels[rows])
        theta, state = nn.adam_step(theta, grad, state, lr, config.weight_decay)
        loss_sum += loss
    delta = nn.ParamVector(theta.values - params.values, params.spec_hash)
    return delta, len(batches), loss_sum / len(batches)


# ---------------------------------------------------------------------------
# History, checkpoint storage, and model selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryEntry:
    round_index: int
    val_kappa: float
    digest: str
    source: str  # "global" (post-aggregation) or "local" (post-epoch)


@dataclass
class TrainHistory:
    entries: list = field(default_factory=list)

    def append(self, entry: HistoryEntry) -> None:
        self.entries.append(entry)

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for e in self.entries:
                fh.write(json.dumps({
                    "round": e.round_index,
                    "val_kappa": e.val_kappa,
                    "digest": e.digest,
                    "source": e.source,
                }, sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path) -> "TrainHistory":
        history = TrainHistory()
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    history.append(HistoryEntry(rec["round"], rec["val_kappa"],
                                                rec["digest"], rec["source"]))
        return history


class CheckpointStore:
    """Digest-addressed ParamVector storage, in memory and optionally on disk."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory
        self._cache = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def put(self, params: nn.ParamVector) -> str:
        digest = params.digest()
        if digest not in self._cache:
            self._cache[digest] = params.copy()
            if self.directory:
                nn.save_params(os.path.join(self.directory, digest + ".fkpv"),
                               params)
        return digest

    def get(self, digest: str) -> nn.ParamVector:
        if digest in self._cache:
            return self._cache[digest]
        if self.directory:
            path = os.path.join(self.directory, digest + ".fkpv")
            if os.path.exists(path):
                params = nn.load_params(path)
                self._cache[digest] = params
                return params
        raise NoCandidates(f"no checkpoint stored under digest {digest}")


def select_best_model(history: TrainHistory, store: CheckpointStore):
    """Entry with maximal validation kappa; ties resolve to the earliest.

    Returns (params, round_index, val_kappa).
    """
    if not history.entries:
        raise NoCandidates("history holds no candidate models")
    best = max(history.entries, key=lambda e: e.val_kappa)
    # max() already keeps the earliest entry on ties (strict > comparison)
    return store.get(best.digest), best.round_index, best.val_kappa


def fine_tune(best: nn.ParamVector, site, config: TrainConfig, epochs: int,
              seed: int, lr_scale: float = 0.1):
    """Continue local training from the selected model at a reduced rate.

    The input model is candidate round 0, so the returned model is never
    worse on validation than the input. Returns (params, TrainHistory).
    """
    if epochs < 0:
        raise InvalidConfig("epochs must be >= 0")
    store = CheckpointStore()
    history = TrainHistory()
    ft_schedule = nn.LrSchedule(config.schedule.base_lr * lr_scale, 1.0, 1)
    ft_config = TrainConfig(config.spec, ft_schedule, config.batch_size,
                            config.weight_decay, config.augment)

    current = best
    digest = store.put(current)
    history.append(HistoryEntry(0, evaluate_kappa(config.spec, current, site,
                                                  "val"), digest, "local"))
    for epoch in range(1, epochs + 1):
        delta, _, _ = local_training(current, site, ft_config, epoch,
                                     seed)
        current = nn.ParamVector(current.values + delta.values,
                                 current.spec_hash)
        digest = store.put(current)
        history.append(HistoryEntry(epoch, evaluate_kappa(config.spec, current,
                                                          site, "val"),
                                    digest, "local"))
    params, _, _ = select_best_model(history, store)
    return params, history
