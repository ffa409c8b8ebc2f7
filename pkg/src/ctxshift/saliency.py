"""Grad-CAM maps, fitting probabilities and background masks.

The activation map for class ``y`` weights every channel of the last
convolutional feature map by the spatial mean of the gradient of the logit
``z_y`` with respect to that channel, keeps the positive part of the weighted
sum, upsamples bilinearly to the input size and min-max normalises per image.
The background mask is ``1 - cam`` and is never binarised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ActivationMap:
    values: np.ndarray  # (H, W) in [0, 1]
    source_class: int
    source_image_id: object = None


@dataclass
class ContextEntry:
    image: torch.Tensor  # (C, H, W), raw pixel range [0, 1]
    mask: torch.Tensor  # (H, W) in [0, 1]


def fitting_probability(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def background_mask(cam) -> np.ndarray | torch.Tensor:
    if isinstance(cam, ActivationMap):
        cam = cam.values
    return 1 - cam


def normalize_maps(cam: torch.Tensor) -> torch.Tensor:
    """Per-map min-max to [0, 1] over the last two axes; constant maps -> 0."""
    flat = cam.flatten(-2)
    lo = flat.min(-1).values[..., None, None]
    hi = flat.max(-1).values[..., None, None]
    span = hi - lo
    out = torch.where(span > 0, (cam - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(cam))
    return out.clamp_(0.0, 1.0)


def cam_from_features(features: torch.Tensor, grads: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Grad-CAM from a feature map (B, C, h, w) and its gradient -> (B, H, W)."""
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * features).sum(dim=1, keepdim=True))
    if cam.shape[-2:] != tuple(size):
        cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
    return normalize_maps(cam[:, 0])


def grad_cam_batch(model, x: torch.Tensor, targets: torch.Tensor, head: str = "uniform"):
    """Grad-CAM maps for a batch of (already normalised) inputs.

    Returns ``(cams, logits)``.  Gradients are taken with
    ``torch.autograd.grad`` against the feature map only, so no parameter
    ``.grad`` is touched.
    """
    if not hasattr(model, "conv_features"):
        raise TypeError(f"{type(model).__name__} exposes no convolutional feature map")
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            fmap = model.conv_features(x.detach())
            if not fmap.requires_grad:
                fmap.requires_grad_(True)
            logits = model.head_logits(model.features_from_conv(fmap), head)
            score = logits.gather(1, targets.view(-1, 1)).sum()
            (grads,) = torch.autograd.grad(score, fmap)
        cams = cam_from_features(fmap.detach(), grads, tuple(x.shape[-2:]))
    finally:
        model.train(was_training)
    return cams, logits.detach()


def grad_cam(model, image: torch.Tensor, target_class: int, head: str = "uniform", image_id=None) -> ActivationMap:
    """Grad-CAM for one image of shape (C, H, W) at ``target_class``."""
    K = model.num_classes
    if not 0 <= target_class < K:
        raise ValueError(f"target_class {target_class} outside [0, {K})")
    cams, _ = grad_cam_batch(model, image[None], torch.tensor([target_class]), head)
    return ActivationMap(cams[0].cpu().numpy(), target_class, image_id)


def select_and_extract(model, images: torch.Tensor, labels: torch.Tensor, delta: float,
                       normalize=None, head: str = "uniform") -> list[ContextEntry]:
    """Contexts from every sample whose ground-truth fitting probability is >= delta.

    ``images`` are raw [0, 1] pixels; ``normalize`` maps them to model input.
    Stored entries keep the raw image so blending happens in pixel space.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    x = normalize(images) if normalize is not None else images
    cams, logits = grad_cam_batch(model, x, labels, head)
    probs = torch.softmax(logits.double(), dim=1)
    p_true = probs.gather(1, labels.view(-1, 1))[:, 0]
    keep = torch.nonzero(p_true >= delta).flatten().tolist()
    return [ContextEntry(images[i].detach(), 1 - cams[i]) for i in keep]


def to_uint8(values) -> np.ndarray:
    """Render a [0, 1] map as 8-bit grayscale."""
    arr = values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
