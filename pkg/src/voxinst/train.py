"""Training loop: seeded shuffling, optional flip/rotation expansion of each
scene, joint-loss optimization with Adam, CSV loss logging, and atomic
checkpointing.

Batches larger than one scene are handled by averaging the per-scene joint
losses inside one graph before the backward pass — numerically identical to
padded batching with per-voxel masks, since the losses never mix voxels
across scenes.

Determinism contract: (config, dataset bytes) fully determine every logged
loss value; a rerun reproduces the log bit-for-bit.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as modellib
from .errors import ConfigError, NumericalDivergence
from .evaluation import ap_summary
from .formats import read_mvox
from .grid import AUGMENT_OPS, InstanceLabeling, SceneSample, augment
from .losses import LossParams, l_joint
from .meanshift import MeanShiftParams
from .model import ModelConfig
from .optim import AdamState, adam_step
from .proposals import ScoreWeights, segment
from .synthgen import encode_input

LOG_COLUMNS = ("step", "epoch", "l_var", "l_dist", "l_reg", "l_dir", "l_joint")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 2
    epochs: int = 100
    seed: int = 0
    augmentation: bool = True
    checkpoint_every: int = 200  # steps; the final checkpoint is always written
    noise_probability: float = 0.0  # input label corruption during training
    loss_params: LossParams = field(default_factory=LossParams)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps: int
    final_losses: dict


def load_split(data_dir, split="train"):
    """SceneSamples for one manifest split."""
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    if split not in manifest or not manifest[split]:
        raise ConfigError(f"dataset at {data_dir} has no '{split}' split")
    by_id = {s["id"]: s for s in manifest["scenes"]}
    samples = []
    for sid in manifest[split]:
        grid, _ = read_mvox(data_dir / by_id[sid]["file"])
        samples.append(
            SceneSample(grid, InstanceLabeling.from_grid(grid), scene_id=sid, meta={})
        )
    return samples, manifest


def _atomic_save(model, path):
    tmp = Path(path).with_suffix(".tmp")
    modellib.save(model, tmp)
    os.replace(tmp, path)


def _scene_loss(model, sample, num_classes, params, noise_p, noise_rng):
    x = encode_input(sample.grid, num_classes, noise_probability=noise_p, rng=noise_rng)
    fields = model.forward(x)
    return l_joint(fields, sample, params)


def train(config, samples=None, data_dir=None, out_dir="."):
    """Optimize the joint loss over the train split; returns checkpoint and
    CSV log paths. Aborts with NumericalDivergence (carrying the last good
    checkpoint path) if any loss component goes non-finite."""
    if samples is None:
        if data_dir is None:
            raise ConfigError("train needs either `samples` or `data_dir`")
        samples, _ = load_split(data_dir, "train")
    if not samples:
        raise ConfigError("empty training split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.mtml"
    log_path = out / "loss_log.csv"

    model = modellib.build(config.model, seed=config.seed)
    state = AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    ops = AUGMENT_OPS if config.augmentation else AUGMENT_OPS[:1]
    deck = [(i, op) for i in range(len(samples)) for op in ops]

    step = 0
    last_good = None
    final = {}
    with open(log_path, "w", newline="") as logf:
        writer = csv.writer(logf)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(config.epochs):
            order = rng.permutation(len(deck))
            for b0 in range(0, len(order), config.batch_size):
                batch = [deck[i] for i in order[b0 : b0 + config.batch_size]]
                losses = []
                comps_acc = []
                for scene_i, op in batch:
                    sample = samples[scene_i] if op == "identity" else augment(samples[scene_i], op)
                    loss, comps = _scene_loss(
                        model, sample, config.model.num_classes, config.loss_params,
                        config.noise_probability, rng,
                    )
                    losses.append(loss)
                    comps_acc.append(comps)
                total = losses[0] if len(losses) == 1 else ad.scale(
                    _sum_tensors(losses), 1.0 / len(losses)
                )
                mean_comps = {
                    k: float(np.mean([c[k] for c in comps_acc])) for k in comps_acc[0]
                }
                if not all(np.isfinite(v) for v in mean_comps.values()):
                    raise NumericalDivergence(
                        f"non-finite loss at step {step + 1}: {mean_comps}",
                        last_checkpoint=str(last_good) if last_good else None,
                    )
                for p in model.params.values():
                    p.grad = None
                total.backward()
                grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
                adam_step(state, model.params, grads)
                step += 1
                writer.writerow(
                    [step, epoch]
                    + [f"{mean_comps[k]:.10g}" for k in LOG_COLUMNS[2:]]
                )
                final = mean_comps
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    _atomic_save(model, ckpt_path)
                    last_good = ckpt_path
    _atomic_save(model, ckpt_path)
    return TrainResult(str(ckpt_path), str(log_path), step, final)


def _sum_tensors(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return total


def evaluate_epoch(
    model,
    samples,
    loss_params=None,
    ms_params=None,
    weights=None,
    nms_threshold=0.3,
):
    """Validation pass: mean loss components plus class-mean AP50 from the
    full segmentation pipeline. Does not mutate weights."""
    if not samples:
        raise ConfigError("evaluate_epoch: empty split")
    loss_params = loss_params or LossParams()
    ms_params = ms_params or MeanShiftParams.from_delta_var(loss_params.delta_var)
    weights = weights or ScoreWeights()
    comps_acc = []
    preds_by_scene = {}
    gt_by_scene = {}
    ignore_by_scene = {}
    with ad.no_grad():
        for sample in samples:
            x = encode_input(sample.grid, model.config.num_classes)
            fields = model.forward(x)
            _, comps = l_joint(fields, sample, loss_params)
            comps_acc.append(comps)
            sem = sample.grid.linear_semantic()
            mask = np.flatnonzero(
                (sem > 0) & ~np.isin(sem, list(loss_params.ignore_classes))
            )
            kept = segment(
                fields, sample.grid, mask, ms_params, weights,
                loss_params.delta_var, loss_params.ignore_classes, nms_threshold,
            )
            preds_by_scene[sample.scene_id] = [
                (p.semantic, p.final_score, p.voxels) for p in kept
            ]
            gt_by_scene[sample.scene_id] = sample.gt
            ignore_by_scene[sample.scene_id] = np.flatnonzero(
                np.isin(sem, list(loss_params.ignore_classes))
            )
    report = ap_summary(
        preds_by_scene, gt_by_scene, loss_params.ignore_classes, ignore_by_scene
    )
    out = {k: float(np.mean([c[k] for c in comps_acc])) for k in comps_acc[0]}
    out["ap50"] = report.average["ap50"]
    return out, report
