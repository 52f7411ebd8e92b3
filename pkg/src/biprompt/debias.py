"""View construction and balanced prompt normalization.

``PromptSet`` holds the frozen class prompt embeddings together with the only
parameters adapted at test time: the gate ``alpha = sigmoid(alpha_raw)`` and
a per-dimension positive ``scale`` applied after interpolating each prompt
toward the class centroid.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .attention import AttentionMap
from .core import (
    DTYPE,
    DegenerateCollapseError,
    ImageView,
    InvalidInputError,
    InvalidTaskError,
    as_tensor,
)

DEFAULT_ALPHA0 = 0.9
COLLAPSE_EPS = 1e-8


def logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p / (1.0 - p))


@dataclass
class PromptSet:
    base_embeddings: torch.Tensor
    alpha_raw: torch.Tensor = field(default=None)
    scale: torch.Tensor = field(default=None)
    alpha0: float = DEFAULT_ALPHA0

    def __post_init__(self) -> None:
        base = as_tensor(self.base_embeddings).detach().clone()
        if base.ndim != 2 or base.shape[0] < 2:
            raise InvalidTaskError("a prompt set needs at least two class embeddings")
        norms = base.norm(dim=1)
        if (norms - 1.0).abs().max() > 1e-6:
            raise InvalidInputError("base embeddings must be unit-norm")
        self.base_embeddings = base
        if self.alpha_raw is None:
            self.alpha_raw = torch.tensor(logit(self.alpha0), dtype=DTYPE)
        else:
            self.alpha_raw = as_tensor(self.alpha_raw).detach().clone().reshape(())
        if self.scale is None:
            self.scale = torch.ones(base.shape[1], dtype=DTYPE)
        else:
            self.scale = as_tensor(self.scale).detach().clone()
        if self.scale.shape != (base.shape[1],) or (self.scale <= 0).any():
            raise InvalidInputError("scale must be a positive vector of length d")

    @classmethod
    def with_alpha(cls, base_embeddings, alpha: float, scale=None) -> "PromptSet":
        ps = cls(base_embeddings, scale=scale, alpha0=alpha)
        return ps

    @property
    def num_classes(self) -> int:
        return int(self.base_embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.base_embeddings.shape[1])

    @property
    def alpha(self) -> float:
        return float(torch.sigmoid(self.alpha_raw))

    def copy(self) -> "PromptSet":
        return PromptSet(self.base_embeddings, self.alpha_raw, self.scale, self.alpha0)

    def base_digest(self) -> str:
        arr = np.ascontiguousarray(self.base_embeddings.numpy(), dtype="<f8")
        return hashlib.sha256(arr.tobytes()).hexdigest()

    def state_equal(self, other: "PromptSet") -> bool:
        return (
            torch.equal(self.base_embeddings, other.base_embeddings)
            and torch.equal(self.alpha_raw, other.alpha_raw)
            and torch.equal(self.scale, other.scale)
        )


def interpolate_prompts(
    base: torch.Tensor, alpha_raw: torch.Tensor, scale: torch.Tensor
) -> torch.Tensor:
    """Differentiable core of :func:`normalize_prompts` on raw parameter tensors."""
    alpha = torch.sigmoid(alpha_raw)
    centroid = base.mean(dim=0, keepdim=True)
    mixed = scale * (alpha * base + (1.0 - alpha) * centroid)
    norms = mixed.norm(dim=1, keepdim=True)
    if (norms < COLLAPSE_EPS).any():
        raise DegenerateCollapseError("a normalized prompt collapsed to (near) zero norm")
    return mixed / norms


def normalize_prompts(ps: PromptSet) -> torch.Tensor:
    """Unit-norm prompts ``(C, d)`` re-centred toward the class centroid."""
    return interpolate_prompts(ps.base_embeddings, ps.alpha_raw, ps.scale)


def reset(ps: PromptSet) -> PromptSet:
    """Fresh copy with ``alpha_raw`` and ``scale`` at their initial values."""
    return PromptSet(ps.base_embeddings, alpha0=ps.alpha0)


def split_views(img: ImageView, attention: AttentionMap) -> tuple[ImageView, ImageView]:
    """Foreground ``m * x`` and background ``(1 - m) * x``, mask broadcast over channels."""
    if attention.shape != (img.height, img.width):
        raise InvalidInputError(
            f"attention map {attention.shape} does not match image {(img.height, img.width)}"
        )
    m = attention.weights.unsqueeze(0)
    fg = m * img.pixels
    bg = (1.0 - m) * img.pixels
    return ImageView(fg, "foreground"), ImageView(bg, "background")


def random_erase(
    img: ImageView,
    grid: int = 8,
    num_patches: int = 4,
    rng_seed: int = 0,
    placement: Literal["random", "corners"] = "random",
) -> ImageView:
    """Zero ``num_patches`` cells of a ``grid x grid`` partition of the image.

    Sides that are not multiples of ``grid`` are centre-cropped first, so the
    returned view can be smaller than the input. ``placement="corners"``
    erases the four corner cells instead of sampling cells.
    """
    if grid < 1:
        raise InvalidInputError("grid must be positive")
    if not 0 <= num_patches <= grid * grid:
        raise InvalidInputError(f"num_patches must be in [0, {grid * grid}], got {num_patches}")
    H, W = img.height, img.width
    ch, cw = (H // grid) * grid, (W // grid) * grid
    if ch == 0 or cw == 0:
        raise InvalidInputError("image is smaller than the erasure grid")
    top, left = (H - ch) // 2, (W - cw) // 2
    px = img.pixels[:, top : top + ch, left : left + cw].clone()
    if placement == "corners":
        cells = [0, grid - 1, grid * (grid - 1), grid * grid - 1][:num_patches]
    elif placement == "random":
        rng = np.random.default_rng(rng_seed)
        cells = rng.choice(grid * grid, size=num_patches, replace=False).tolist()
    else:
        raise InvalidInputError(f"unknown placement {placement!r}")
    sh, sw = ch // grid, cw // grid
    for cell in cells:
        r, c = divmod(int(cell), grid)
        px[:, r * sh : (r + 1) * sh, c * sw : (c + 1) * sw] = 0.0
    return ImageView(px, "random-erased")


# state file: magic, version, C, d, sha256(base), alpha_raw, alpha0, scale[d]
_MAGIC = b"BPPS"
_VERSION = 1
_HEADER = struct.Struct("<4sHII32sdd")


def save_prompt_state(ps: PromptSet, path: str | Path) -> None:
    """Write ``alpha_raw``, ``alpha0`` and ``scale`` with a digest of the base embeddings.

    Layout (little-endian): 4-byte magic ``BPPS``, uint16 version, uint32 C,
    uint32 d, 32-byte SHA-256 of the float64 base embeddings, float64
    alpha_raw, float64 alpha0, then d float64 scale entries.
    """
    digest = bytes.fromhex(ps.base_digest())
    header = _HEADER.pack(_MAGIC, _VERSION, ps.num_classes, ps.dim, digest,
                          float(ps.alpha_raw), float(ps.alpha0))
    body = np.ascontiguousarray(ps.scale.numpy(), dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_prompt_state(path: str | Path, base_embeddings: torch.Tensor) -> PromptSet:
    """Restore a state written by :func:`save_prompt_state` onto matching base embeddings."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError("prompt state file is truncated")
    magic, version, C, d, digest, alpha_raw, alpha0 = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise InvalidInputError("not a prompt state file, or unsupported version")
    scale = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if scale.shape != (d,):
        raise InvalidInputError("prompt state file has a malformed scale block")
    ps = PromptSet(base_embeddings, torch.tensor(alpha_raw, dtype=DTYPE),
                   torch.as_tensor(scale.copy()), alpha0)
    if (ps.num_classes, ps.dim) != (C, d) or bytes.fromhex(ps.base_digest()) != digest:
        raise InvalidInputError("prompt state does not belong to these base embeddings")
    return ps
