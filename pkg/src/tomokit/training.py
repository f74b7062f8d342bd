"""
Two-stage training.

Stage 1 fits the pre-imaging network alone: azimuth-elevation echo slices
(one per range index of every training scene) are batched by concatenating
their columns, and |P(G)| is pulled toward the ground-truth slice with a
mean squared error.

Stage 2 trains the whole operator end to end on whole scenes, so both
refinement branches see coherent volumes and batchnorm statistics come from
one scene at a time. The loss adds an L1 sparsity term on the merged volume.
Gradients of the scenes of a batch are accumulated before one Adam step.

Losses are mean-normalized: sums of squares and absolute values are divided
by the element count.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from .autodiff import Tensor, absolute, add, as_tensor, complex_abs, mean, mul, no_grad, square, sub
from .config import TrainConfig
from .container import Checkpoint, write_checkpoint
from .errors import DivergenceError, NonFiniteError, ShapeError
from .optim import Adam
from .prenet import PreNetParams, prenet_forward
from .refine import TomoNet, forward_branches
from .simulator import DatasetRecord

logger = logging.getLogger(__name__)


def loss_pre(prediction, target) -> Tensor:
    """Mean squared error between predicted magnitudes and the real ground truth."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} differ")
    return mean(square(sub(prediction, target)))


def loss_full(prediction, target, l1_weight: float) -> Tensor:
    """Mean squared error plus l1_weight times the mean absolute value of the prediction."""
    if l1_weight < 0:
        raise ValueError(f"l1 weight must be >= 0, got {l1_weight}")
    data_term = loss_pre(prediction, target)
    if l1_weight == 0:
        return data_term
    return add(data_term, mul(l1_weight, mean(absolute(as_tensor(prediction)))))


@dataclass
class LossCurve:
    """Per-epoch losses as (epoch, split, loss) rows."""
    rows: List[Tuple[int, str, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, loss: float) -> None:
        self.rows.append((epoch, split, float(loss)))

    def losses(self, split: str) -> List[float]:
        return [loss for _, s, loss in self.rows if s == split]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "split", "loss"])
            for epoch, split, loss in self.rows:
                writer.writerow([epoch, split, repr(loss)])


@dataclass
class StageResult:
    """Outcome of one training stage."""
    curve: LossCurve
    best_epoch: int
    best_loss: float
    best_path: Optional[str] = None
    final_path: Optional[str] = None


def _checkpoint(tensors: Dict[str, np.ndarray], optimizer: Adam) -> Checkpoint:
    step, moments = optimizer.state_dict()
    return Checkpoint(tensors=dict(tensors), step=step, moments=moments)


def _check_loss(stage: str, epoch: int, batch: int, value: float) -> None:
    if not math.isfinite(value):
        raise DivergenceError(stage, epoch, batch, value)


# --- stage 1 ------------------------------------------------------------------

def azimuth_elevation_slices(records: Sequence[DatasetRecord],
                             indices: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(echo slice N x A, truth slice L x A) for every range index of the selected scenes."""
    slices = []
    for i in indices:
        echoes = records[i].echoes.data.astype(np.complex128)
        truth = records[i].truth.data.astype(np.float64)
        for r in range(echoes.shape[1]):
            slices.append((echoes[:, r, :], truth[r].T))
    return slices


def _stack_columns(slices: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([g for g, _ in slices], axis=1),
            np.concatenate([t for _, t in slices], axis=1))


def _stage1_batch_loss(prenet: PreNetParams, slices) -> Tensor:
    G, target = _stack_columns(slices)
    return loss_pre(complex_abs(prenet_forward(G, prenet)), target)


def _stage1_eval(prenet: PreNetParams, slices, batch_size: int) -> float:
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(slices), batch_size):
            chunk = slices[start:start + batch_size]
            loss = _stage1_batch_loss(prenet, chunk)
            elements = sum(t.size for _, t in chunk)
            total += loss.item() * elements
            count += elements
    return total / count if count else float("nan")


def train_stage1(records: Sequence[DatasetRecord], split: Dict[str, List[int]], prenet: PreNetParams,
                 cfg: TrainConfig, out_dir: Optional[str] = None,
                 progress: bool = False) -> StageResult:
    """Pre-train the pre-imaging network with the slice MSE and Adam(stage1_lr).

    Args:
        records: dataset
        split: train/val/test record indices
        prenet: parameters, updated in place
        cfg: training settings
        out_dir: where stage1_loss.csv and the best/final checkpoints go (nothing written when None)
        progress: show a progress bar

    Returns:
        StageResult with the per-epoch train and val losses
    """
    train_slices = azimuth_elevation_slices(records, split["train"])
    val_slices = azimuth_elevation_slices(records, split.get("val", []))
    if not train_slices:
        raise ValueError("stage 1 needs at least one training scene")
    if not val_slices:
        logger.warning("no validation scenes; the best checkpoint follows the training loss")

    optimizer = Adam(prenet.parameters(), lr=cfg.stage1_lr, beta1=cfg.adam_beta1,
                     beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    best_loss, best_epoch = math.inf, 0
    best_path = final_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "stage1_best.tswt")
        final_path = os.path.join(out_dir, "stage1_final.tswt")
    logger.info("stage 1: %d training slices, %d validation slices, %d epochs",
                len(train_slices), len(val_slices), cfg.stage1_epochs)

    for epoch in tqdm(range(1, cfg.stage1_epochs + 1), desc="stage 1", disable=not progress):
        order = rng.permutation(len(train_slices))
        total, count = 0.0, 0
        for batch, start in enumerate(range(0, len(order), cfg.stage1_batch), start=1):
            chunk = [train_slices[i] for i in order[start:start + cfg.stage1_batch]]
            optimizer.zero_grad()
            try:
                loss = _stage1_batch_loss(prenet, chunk)
            except NonFiniteError as e:
                logger.error("%s", e)
                raise DivergenceError("stage 1", epoch, batch, float("nan")) from e
            _check_loss("stage 1", epoch, batch, loss.item())
            loss.backward()
            optimizer.step()
            elements = sum(t.size for _, t in chunk)
            total += loss.item() * elements
            count += elements
        train_loss = total / count
        curve.add(epoch, "train", train_loss)
        val_loss = _stage1_eval(prenet, val_slices, cfg.stage1_batch) if val_slices else train_loss
        _check_loss("stage 1", epoch, 0, val_loss)
        if val_slices:
            curve.add(epoch, "val", val_loss)
        logger.info("stage 1 epoch %d: train %.6g, val %.6g", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            if best_path:
                write_checkpoint(best_path, _checkpoint(prenet.named_tensors(), optimizer))

    if out_dir:
        write_checkpoint(final_path, _checkpoint(prenet.named_tensors(), optimizer))
        curve.write_csv(os.path.join(out_dir, "stage1_loss.csv"))
    return StageResult(curve, best_epoch, best_loss, best_path, final_path)


# --- stage 2 ------------------------------------------------------------------

def _scene_loss(model: TomoNet, record: DatasetRecord, l1_weight: float, training: bool) -> Tensor:
    outputs = forward_branches(record.echoes.data.astype(np.complex128), model, training=training)
    return loss_full(outputs.merged, record.truth.data.astype(np.float64), l1_weight)


def _stage2_eval(model: TomoNet, records: Sequence[DatasetRecord], indices: Sequence[int],
                 l1_weight: float) -> float:
    with no_grad():
        losses = [_scene_loss(model, records[i], l1_weight, training=False).item() for i in indices]
    return float(np.mean(losses)) if losses else float("nan")


def train_stage2(records: Sequence[DatasetRecord], split: Dict[str, List[int]], model: TomoNet,
                 cfg: TrainConfig, out_dir: Optional[str] = None,
                 progress: bool = False) -> StageResult:
    """End-to-end training with loss_full and Adam(stage2_lr), batches of stage2_batch scenes.

    The pre-imaging network is fine-tuned too unless cfg.freeze_prenet is set,
    in which case its tensors are left bit-identical.
    """
    train_idx = list(split["train"])
    val_idx = list(split.get("val", []))
    if not train_idx:
        raise ValueError("stage 2 needs at least one training scene")

    frozen = model.prenet.parameters() if cfg.freeze_prenet else []
    for p in frozen:
        p.requires_grad = False
    optimizer = Adam(model.parameters(include_prenet=not cfg.freeze_prenet), lr=cfg.stage2_lr,
                     beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    best_loss, best_epoch = math.inf, 0
    best_path = final_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "stage2_best.tswt")
        final_path = os.path.join(out_dir, "stage2_final.tswt")
    logger.info("stage 2: %d training scenes, %d validation scenes, %d epochs%s",
                len(train_idx), len(val_idx), cfg.stage2_epochs,
                " (pre-imaging frozen)" if cfg.freeze_prenet else "")

    try:
        for epoch in tqdm(range(1, cfg.stage2_epochs + 1), desc="stage 2", disable=not progress):
            order = rng.permutation(len(train_idx))
            losses = []
            for batch, start in enumerate(range(0, len(order), cfg.stage2_batch), start=1):
                scenes = [train_idx[i] for i in order[start:start + cfg.stage2_batch]]
                optimizer.zero_grad()
                for index in scenes:
                    try:
                        loss = _scene_loss(model, records[index], cfg.l1_weight, training=True)
                    except NonFiniteError as e:
                        logger.error("%s", e)
                        raise DivergenceError("stage 2", epoch, batch, float("nan")) from e
                    _check_loss("stage 2", epoch, batch, loss.item())
                    mul(loss, 1.0 / len(scenes)).backward()
                    losses.append(loss.item())
                optimizer.step()
            train_loss = float(np.mean(losses))
            curve.add(epoch, "train", train_loss)
            val_loss = _stage2_eval(model, records, val_idx, cfg.l1_weight) if val_idx else train_loss
            _check_loss("stage 2", epoch, 0, val_loss)
            if val_idx:
                curve.add(epoch, "val", val_loss)
            logger.info("stage 2 epoch %d: train %.6g, val %.6g", epoch, train_loss, val_loss)
            if val_loss < best_loss:
                best_loss, best_epoch = val_loss, epoch
                if best_path:
                    write_checkpoint(best_path, _checkpoint(model.named_tensors(), optimizer))
    finally:
        for p in frozen:
            p.requires_grad = True

    if out_dir:
        write_checkpoint(final_path, _checkpoint(model.named_tensors(), optimizer))
        curve.write_csv(os.path.join(out_dir, "stage2_loss.csv"))
    return StageResult(curve, best_epoch, best_loss, best_path, final_path)
