"""Grad-CAM attention maps that split an image into causal and spurious regions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    DTYPE,
    ImageView,
    InvalidInputError,
    NumericalFailureError,
    Temperature,
    UnsupportedEncoderError,
    argmax_lowest,
    as_tensor,
    l2_normalize,
    predict,
)
from .encoders import VisualEncoder, encode_image, spatial_features

# relative spread below which a raw map counts as constant
CONSTANT_MAP_RTOL = 1e-12


@dataclass(frozen=True)
class AttentionMap:
    """Soft ``(H, W)`` mask in [0, 1]; high values mark the causal region.

    ``source`` is ``"gradcam"``, ``"constant"`` (degenerate raw map) or
    ``"prior"`` (encoder without spatial features).
    """

    weights: torch.Tensor
    source_class: Optional[int] = None
    source: str = "gradcam"

    def __post_init__(self) -> None:
        w = as_tensor(self.weights).detach()
        if w.ndim != 2:
            raise InvalidInputError("attention map must be 2-D")
        if not torch.isfinite(w).all() or w.min() < 0 or w.max() > 1:
            raise InvalidInputError("attention weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.weights.shape[0]), int(self.weights.shape[1])

    def to_uint8(self) -> np.ndarray:
        return np.round(self.weights.numpy() * 255.0).astype(np.uint8)


def center_prior(height: int, width: int, corner_value: float = 0.1) -> torch.Tensor:
    """Centred Gaussian with peak 1 and ``corner_value`` at the corners."""
    ys = torch.arange(height, dtype=DTYPE) + 0.5 - height / 2
    xs = torch.arange(width, dtype=DTYPE) + 0.5 - width / 2
    r2 = ys[:, None] ** 2 + xs[None, :] ** 2
    # measured from the innermost pixel centres so the peak is exactly 1
    r2 = r2 - r2.min()
    sigma2 = float(r2.max()) / (2.0 * math.log(1.0 / corner_value))
    return torch.exp(-r2 / (2.0 * sigma2))


def upsample(grid: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a 2-D grid (convex weights, so the range is preserved)."""
    out = F.interpolate(grid[None, None], size=size, mode="bilinear", align_corners=False)
    return out[0, 0]


def minmax_normalize(raw: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Rescale to [0, 1]; a constant input becomes 0.5 everywhere.

    Returns the map and whether the degenerate branch was taken.
    """
    lo, hi = raw.min(), raw.max()
    span = hi - lo
    if span <= CONSTANT_MAP_RTOL * max(1.0, float(hi.abs())):
        return torch.full_like(raw, 0.5), True
    return ((raw - lo) / span).clamp(0.0, 1.0), False


def resolve_target_class(
    img: ImageView,
    enc: VisualEncoder,
    prompts: Union[torch.Tensor, Sequence[torch.Tensor]],
    tau: Union[Temperature, float],
) -> int:
    """Argmax of the zero-shot prediction, ties to the lowest index."""
    with torch.no_grad():
        p = predict(encode_image(enc, img), prompts, tau)
    return argmax_lowest(p)


def gradcam(
    enc: VisualEncoder,
    img: ImageView,
    prompts: Union[torch.Tensor, Sequence[torch.Tensor]],
    tau: Union[Temperature, float] = 100.0,
    target_class: Optional[int] = None,
) -> AttentionMap:
    """Grad-CAM on the scaled cosine logit of ``target_class``.

    Channel weights are spatial means of the logit gradient at the encoder's
    last spatial layer; the weighted channel sum is rectified, bilinearly
    upsampled to the image size and min-max normalized.
    """
    P = l2_normalize(as_tensor(prompts if isinstance(prompts, torch.Tensor) else torch.stack(list(prompts))).detach())
    tau_v = tau.tau if isinstance(tau, Temperature) else Temperature(float(tau)).tau
    try:
        handle = spatial_features(enc, img)
    except UnsupportedEncoderError:
        cls = target_class if target_class is not None else resolve_target_class(img, enc, P, tau_v)
        return AttentionMap(center_prior(img.height, img.width), cls, source="prior")

    if target_class is None:
        with torch.no_grad():
            target_class = argmax_lowest(predict(handle.embedding, P, tau_v))
    if not 0 <= target_class < P.shape[0]:
        raise InvalidInputError(f"target class {target_class} out of range")

    score = tau_v * torch.dot(handle.embedding, P[target_class])
    grads = handle.grad(score)
    if not torch.isfinite(grads).all():
        raise NumericalFailureError("non-finite Grad-CAM gradients")
    A = handle.features.detach()
    channel_weights = grads.mean(dim=(1, 2))
    cam = F.relu((channel_weights[:, None, None] * A).sum(0))
    cam = upsample(cam, (img.height, img.width))
    weights, degenerate = minmax_normalize(cam)
    return AttentionMap(weights, int(target_class), source="constant" if degenerate else "gradcam")
