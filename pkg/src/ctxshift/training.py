"""Dual-branch context-shift training and the CE / CB-RS / cRT / mixup baselines.

Images live in [0, 1] pixel space through sampling, cropping and blending;
per-dataset mean/std normalisation is applied right before the forward pass.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .context_bank import ContextBank
from .lt_data import LongTailDataset
from .models import DualBranchModel
from .sampling import BatchStream, balanced_replica_indices
from .saliency import select_and_extract

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# elementary pieces


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} outside [0, {z.shape[-1]})")
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[label])


def blend(target, context_image, mask, lam):
    """``lam * mask * context + (1 - lam * mask) * target``.

    ``target``/``context_image`` are (..., C, H, W); ``mask`` is (..., H, W)
    and is broadcast over channels.  ``lam`` is a scalar or one value per
    leading batch item.
    """
    if tuple(target.shape) != tuple(context_image.shape):
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs context {tuple(context_image.shape)}")
    if tuple(mask.shape) != tuple(target.shape[:-3]) + tuple(target.shape[-2:]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not fit image {tuple(target.shape)}")
    m = mask.unsqueeze(-3)
    if isinstance(lam, torch.Tensor) and lam.ndim:
        lam = lam.view(-1, *([1] * (target.ndim - 1)))
    w = lam * m
    return w * context_image + (1 - w) * target


def draw_lambda(config: TrainConfig, rng: np.random.Generator, size=None):
    if config.lambda_dist == "uniform":
        return rng.uniform(config.lambda_a, config.lambda_b, size)
    return rng.beta(config.lambda_a, config.lambda_b, size)


@dataclass
class LossRecord:
    loss_uniform: float
    loss_balanced: float
    total: float
    bank_ready: bool = False
    extracted: int = 0
    lam: float | None = None


# ---------------------------------------------------------------------------
# data plumbing


def channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    return mean.tolist(), np.maximum(std, 1e-6).tolist()


class Normalizer:
    def __init__(self, mean, std):
        self.mean = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def state(self) -> dict:
        return {"mean": self.mean.flatten().tolist(), "std": self.std.flatten().tolist()}


def to_chw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def crop_flip(x: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop with zero padding and random horizontal flip, per sample."""
    B, _, H, W = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    flip = rng.random(B) < 0.5
    out = torch.empty_like(x)
    for i in range(B):
        crop = padded[i, :, dy[i] : dy[i] + H, dx[i] : dx[i] + W]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(params, config: TrainConfig, total_steps: int, steps_per_epoch: int):
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    if config.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))
    elif config.lr_schedule == "step":
        milestones = [m * steps_per_epoch for m in config.lr_milestones]
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=config.lr_gamma)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


@dataclass
class TrainState:
    """Everything a training run carries between steps."""

    model: DualBranchModel
    config: TrainConfig
    normalize: Normalizer
    rng: np.random.Generator
    bank: ContextBank | None = None
    optimizer: torch.optim.Optimizer | None = None
    scheduler: object = None
    epoch: int = 0
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.augment == "crop_flip":
            x = crop_flip(x, self.rng)
        return x


def new_model(dataset: LongTailDataset, config: TrainConfig) -> DualBranchModel:
    torch.manual_seed(config.seed)
    return DualBranchModel.from_name(config.backbone, dataset.images.shape[-1], dataset.num_classes)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return max(n // batch_size, 1)


# ---------------------------------------------------------------------------
# context-shift augmentation


def train_step_csa(state: TrainState, x_u, y_u, x_b, y_b, augment: bool = True) -> LossRecord:
    """One step of the dual-branch objective ``L = L_u + L_b``.

    ``x_u``/``x_b`` are raw-pixel batches from the instance stream and the
    balanced replica.  Contexts extracted from the uniform batch are pushed
    before the balanced branch queries the bank.  With ``augment=False`` the
    balanced batch is used as-is (the final no-augmentation epochs).
    """
    cfg, model = state.config, state.model
    if x_u.shape[0] != x_b.shape[0]:
        raise ValueError(f"batch size mismatch: {x_u.shape[0]} vs {x_b.shape[0]}")
    norm = state.normalize
    model.train()

    extracted = 0
    if augment:
        entries = select_and_extract(model, x_u, y_u, cfg.delta, norm, head="uniform")
        state.bank.extend(entries)
        extracted = len(entries)

    if cfg.mixup_uniform and augment:
        xm, ya, yb, mix = mixup_batch(x_u, y_u, cfg.mixup_alpha, state.rng)
        logits_u = model(norm(xm), head="uniform")
        loss_u = mix * F.cross_entropy(logits_u, ya) + (1 - mix) * F.cross_entropy(logits_u, yb)
    else:
        loss_u = F.cross_entropy(model(norm(x_u), head="uniform"), y_u)

    lam = None
    ready = (not augment) or state.bank.is_ready()
    if ready:
        if augment:
            ctx_img, ctx_mask = state.bank.sample_tensors(x_b.shape[0], state.rng)
            if cfg.lambda_per_sample:
                lam_v = torch.as_tensor(draw_lambda(cfg, state.rng, x_b.shape[0]), dtype=torch.float32)
                lam = float(lam_v.mean())
            else:
                lam = float(draw_lambda(cfg, state.rng))
                lam_v = lam
            x_b = blend(x_b, ctx_img, ctx_mask, lam_v)
        loss_b = F.cross_entropy(model(norm(x_b), head="balanced"), y_b)
    else:
        loss_b = torch.zeros((), dtype=loss_u.dtype)

    total = loss_u + loss_b
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    lu, lb = float(loss_u.detach()), float(loss_b.detach())
    return LossRecord(lu, lb, lu + lb, ready, extracted, lam)


def _warmup_step(state: TrainState, x_u, y_u) -> LossRecord:
    model = state.model
    model.train()
    loss_u = F.cross_entropy(model(state.normalize(x_u), head="uniform"), y_u)
    state.optimizer.zero_grad(set_to_none=True)
    loss_u.backward()
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    lu = float(loss_u.detach())
    return LossRecord(lu, 0.0, lu)


def _batch(state: TrainState, images: torch.Tensor, labels: torch.Tensor, idx: np.ndarray):
    ii = torch.from_numpy(idx)
    return state.prepare(images[ii]), labels[ii]


def train_csa(dataset: LongTailDataset, config: TrainConfig, test=None, evaluate_fn=None,
              on_epoch=None) -> tuple[DualBranchModel, list[dict]]:
    """Full context-shift training run.

    Epochs ``[0, warmup)`` train the uniform branch only; the last
    ``freeze_aug_last_epochs`` epochs train both branches with plain
    balanced batches; the rest run :func:`train_step_csa` with blending.
    """
    seed_everything(config.seed, config.deterministic)
    model = new_model(dataset, config)
    images, labels = to_chw(dataset.images), torch.from_numpy(dataset.labels)
    state = TrainState(model, config, Normalizer(*channel_stats(dataset.images)),
                       np.random.default_rng(config.seed), ContextBank(config.capacity))
    N, B, K = len(dataset), config.batch_size, dataset.num_classes
    spe = _steps_per_epoch(N, B)
    state.optimizer, state.scheduler = make_optimizer(model.parameters(), config, spe * config.epochs, spe)

    uniform = BatchStream(dataset.labels, B, config.seed + 1, q=1.0)
    replica = balanced_replica_indices(dataset.labels, K, config.seed + 2) if config.balanced_q == 0.0 else None
    balanced = BatchStream(dataset.labels, B, config.seed + 3, q=config.balanced_q, indices=replica)

    aug_stop = config.epochs - config.freeze_aug_last_epochs
    for epoch in range(config.epochs):
        state.epoch = epoch
        if epoch > 0 and config.replica_refresh == "per_epoch" and replica is not None:
            balanced.indices = balanced_replica_indices(dataset.labels, K, config.seed + 2 + epoch)
        records = []
        for _ in range(spe):
            x_u, y_u = _batch(state, images, labels, uniform.next())
            if epoch < config.warmup_epochs:
                records.append(_warmup_step(state, x_u, y_u))
                continue
            x_b, y_b = _batch(state, images, labels, balanced.next())
            records.append(train_step_csa(state, x_u, y_u, x_b, y_b, augment=epoch < aug_stop))
        state.losses.extend(records)
        _end_epoch(state, records, test, evaluate_fn, on_epoch, dataset, head="balanced")
    model.normalizer_state = state.normalize.state()
    model.loss_records = state.losses
    _keep_final_state(model, state)
    return model, state.history


def _keep_final_state(model, state: TrainState) -> None:
    model.final_state = {
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch + 1,
        "rng": state.rng.bit_generator.state,
    }


def _end_epoch(state, records, test, evaluate_fn, on_epoch, dataset, head):
    row = {
        "epoch": state.epoch + 1,
        "loss_uniform": float(np.mean([r.loss_uniform for r in records])),
        "loss_balanced": float(np.mean([r.loss_balanced for r in records])),
        "extracted": int(sum(r.extracted for r in records)),
    }
    if test is not None and evaluate_fn is not None:
        m = evaluate_fn(state.model, test, dataset.shot_groups, head, state.normalize)
        row.update(m.to_row())
    state.history.append(row)
    log.info(json.dumps(row))
    if on_epoch is not None:
        on_epoch(state, row)


# ---------------------------------------------------------------------------
# baselines


def mixup_batch(x, y, alpha: float, rng: np.random.Generator):
    lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    perm = torch.from_numpy(rng.permutation(x.shape[0]))
    return lam * x + (1 - lam) * x[perm], y, y[perm], lam


def train_baseline(dataset: LongTailDataset, config: TrainConfig, method: str = "CE", test=None,
                   evaluate_fn=None, on_epoch=None) -> tuple[DualBranchModel, list[dict]]:
    """CE (q=1, uniform head), CB_RS (q=0, balanced head) or MIXUP (q=1 with
    pairwise input/label mixing, uniform head)."""
    if method not in ("CE", "CB_RS", "MIXUP"):
        raise ValueError(f"unknown baseline {method!r}")
    seed_everything(config.seed, config.deterministic)
    model = new_model(dataset, config)
    head = "balanced" if method == "CB_RS" else "uniform"
    images, labels = to_chw(dataset.images), torch.from_numpy(dataset.labels)
    state = TrainState(model, config, Normalizer(*channel_stats(dataset.images)), np.random.default_rng(config.seed))
    N, B = len(dataset), config.batch_size
    spe = _steps_per_epoch(N, B)
    params = list(model.extractor.parameters()) + list(model.head(head).parameters())
    state.optimizer, state.scheduler = make_optimizer(params, config, spe * config.epochs, spe)
    stream = BatchStream(dataset.labels, B, config.seed + 1, q=0.0 if method == "CB_RS" else 1.0)
    mix_stop = config.epochs - config.freeze_aug_last_epochs

    for epoch in range(config.epochs):
        state.epoch = epoch
        records = []
        model.train()
        for _ in range(spe):
            x, y = _batch(state, images, labels, stream.next())
            if method == "MIXUP" and epoch < mix_stop:
                x, ya, yb, lam = mixup_batch(x, y, config.mixup_alpha, state.rng)
                logits = model(state.normalize(x), head=head)
                loss = lam * F.cross_entropy(logits, ya) + (1 - lam) * F.cross_entropy(logits, yb)
            else:
                loss = F.cross_entropy(model(state.normalize(x), head=head), y)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            state.scheduler.step()
            lv = float(loss.detach())
            records.append(LossRecord(lv, 0.0, lv) if head == "uniform" else LossRecord(0.0, lv, lv))
        _end_epoch(state, records, test, evaluate_fn, on_epoch, dataset, head)
    model.normalizer_state = state.normalize.state()
    model.trained_head = head
    _keep_final_state(model, state)
    return model, state.history


def crt_finetune(model: DualBranchModel, dataset: LongTailDataset, config: TrainConfig,
                 finetune_epochs: int | None = None, source_head: str = "uniform", test=None,
                 evaluate_fn=None) -> tuple[DualBranchModel, list[dict]]:
    """Classifier re-training: freeze everything, re-initialise the balanced
    head and fit it with class-balanced sampling.  The head is initialised
    from ``source_head`` shapes; its weights start fresh."""
    epochs = config.crt_epochs if finetune_epochs is None else finetune_epochs
    torch.manual_seed(config.seed + 7)
    model.head_balanced.reset_parameters()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.head_balanced.parameters():
        p.requires_grad_(True)
    norm = Normalizer(model.normalizer_state["mean"], model.normalizer_state["std"])
    state = TrainState(model, config, norm, np.random.default_rng(config.seed + 7))
    images, labels = to_chw(dataset.images), torch.from_numpy(dataset.labels)
    N, B = len(dataset), config.batch_size
    spe = _steps_per_epoch(N, B)
    state.optimizer, state.scheduler = make_optimizer(
        model.head_balanced.parameters(), config.replace(lr_schedule="cosine"), spe * epochs, spe)
    stream = BatchStream(dataset.labels, B, config.seed + 8, q=0.0)
    # frozen extractor: eval mode keeps BatchNorm statistics fixed
    for epoch in range(epochs):
        state.epoch = epoch
        model.eval()
        records = []
        for _ in range(spe):
            x, y = _batch(state, images, labels, stream.next())
            with torch.no_grad():
                feats = model.features(norm(x))
            loss = F.cross_entropy(model.head_balanced(feats), y)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            state.scheduler.step()
            records.append(LossRecord(0.0, float(loss.detach()), float(loss.detach())))
        _end_epoch(state, records, test, evaluate_fn, None, dataset, "balanced")
    for p in model.parameters():
        p.requires_grad_(True)
    model.trained_head = "balanced"
    _keep_final_state(model, state)
    return model, state.history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DualBranchModel, optimizer=None, epoch: int | None = None, rng_state=None,
                    extra=None) -> None:
    """torch.save container; keys documented in the README.  Optimizer, epoch
    and numpy RNG state default to the ones the last trainer left on ``model``."""
    final = getattr(model, "final_state", {})
    if optimizer is not None:
        opt_state = optimizer.state_dict()
    else:
        opt_state = final.get("optimizer")
    payload = {
        "format": "ctxshift-checkpoint/1",
        "extractor": model.extractor.state_dict(),
        "head_uniform": model.head_uniform.state_dict(),
        "head_balanced": model.head_balanced.state_dict(),
        "optimizer": opt_state,
        "epoch": final.get("epoch", 0) if epoch is None else epoch,
        "rng_state": {"torch": torch.get_rng_state(), "numpy": final.get("rng") if rng_state is None else rng_state},
        "normalizer": getattr(model, "normalizer_state", None),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path, model: DualBranchModel) -> dict:
    payload = torch.load(Path(path), weights_only=False)
    model.extractor.load_state_dict(payload["extractor"])
    model.head_uniform.load_state_dict(payload["head_uniform"])
    model.head_balanced.load_state_dict(payload["head_balanced"])
    model.normalizer_state = payload["normalizer"]
    return payload
