"""Shared domain types and the similarity-softmax prediction head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

DTYPE = torch.float64
MIN_SIDE = 8
DEFAULT_TAU = 100.0
VIEW_TAGS = ("original", "foreground", "background", "random-erased")

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float]]


class BiPromptError(Exception):
    """Base class for all library errors."""


class InvalidInputError(BiPromptError, ValueError):
    pass


class InvalidTaskError(BiPromptError, ValueError):
    pass


class DegenerateInputError(BiPromptError, ValueError):
    pass


class DegenerateCollapseError(DegenerateInputError):
    pass


class NumericalFailureError(BiPromptError, ArithmeticError):
    pass


class UnsupportedEncoderError(BiPromptError, TypeError):
    pass


def as_tensor(x: ArrayLike) -> torch.Tensor:
    """Convert to a float64 tensor, keeping autograd history for tensors."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class ImageView:
    """A channel-first ``(3, H, W)`` raster with values in [0, 1].

    ``tag`` records how the view was produced (original image, attention
    foreground/background, or random erasure).
    """

    pixels: torch.Tensor
    tag: str = "original"

    def __post_init__(self) -> None:
        px = as_tensor(self.pixels)
        if px.ndim != 3 or px.shape[0] != 3:
            raise InvalidInputError(f"expected (3, H, W) pixels, got shape {tuple(px.shape)}")
        if px.shape[1] < MIN_SIDE or px.shape[2] < MIN_SIDE:
            raise InvalidInputError(
                f"image is {px.shape[1]}x{px.shape[2]}, minimum side is {MIN_SIDE}"
            )
        if self.tag not in VIEW_TAGS:
            raise InvalidInputError(f"unknown view tag {self.tag!r}")
        if not torch.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px.detach())

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class Temperature:
    """Inverse softness of the prediction softmax; frozen during adaptation."""

    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidInputError(f"temperature must be positive, got {self.tau}")


def _tau(tau: Union[Temperature, float]) -> float:
    return tau.tau if isinstance(tau, Temperature) else Temperature(float(tau)).tau


def l2_normalize(v: torch.Tensor, dim: int = -1, eps: float = 0.0) -> torch.Tensor:
    norm = v.norm(dim=dim, keepdim=True)
    if eps and (norm < eps).any():
        raise DegenerateInputError("cannot normalize a (near) zero-norm vector")
    return v / norm


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> torch.Tensor:
    """Cosine of the angle between two equal-length vectors.

    Returns a 0-d tensor so the result stays differentiable.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return torch.dot(a, b) / (na * nb)


def _prompt_matrix(prompts: Union[ArrayLike, Sequence[ArrayLike]]) -> torch.Tensor:
    if isinstance(prompts, torch.Tensor):
        return as_tensor(prompts)
    if isinstance(prompts, np.ndarray):
        return as_tensor(prompts)
    return torch.stack([as_tensor(p) for p in prompts])


def similarity_logits(
    image_embedding: ArrayLike,
    prompts: Union[ArrayLike, Sequence[ArrayLike]],
    tau: Union[Temperature, float] = DEFAULT_TAU,
) -> torch.Tensor:
    """Scaled cosine similarities ``tau * cos(image, prompt_c)`` for every class.

    ``image_embedding`` may also be a batch ``(N, d)``; the result is then ``(N, C)``.
    """
    e = as_tensor(image_embedding)
    P = _prompt_matrix(prompts)
    if P.ndim != 2 or P.shape[0] < 2:
        raise InvalidTaskError("prediction needs at least two class prompts")
    if e.shape[-1] != P.shape[1]:
        raise InvalidInputError(
            f"embedding dimension {e.shape[-1]} does not match prompt dimension {P.shape[1]}"
        )
    e = l2_normalize(e)
    P = l2_normalize(P)
    return _tau(tau) * (e @ P.T)


def predict(
    image_embedding: ArrayLike,
    prompts: Union[ArrayLike, Sequence[ArrayLike]],
    tau: Union[Temperature, float] = DEFAULT_TAU,
) -> torch.Tensor:
    """Zero-shot class distribution: softmax over temperature-scaled cosines."""
    return torch.softmax(similarity_logits(image_embedding, prompts, tau), dim=-1)


def argmax_lowest(p: ArrayLike) -> int:
    """Index of the largest entry; exact ties resolve to the lowest index."""
    arr = as_tensor(p).detach().cpu().numpy()
    return int(np.flatnonzero(arr == arr.max())[0])


def check_distribution(p: ArrayLike, atol: float = 1e-9) -> torch.Tensor:
    """Validate a probability vector and return it as a tensor."""
    t = as_tensor(p)
    if t.ndim != 1 or t.numel() < 1:
        raise InvalidInputError("a distribution must be a non-empty vector")
    if not torch.isfinite(t).all() or (t < 0).any():
        raise InvalidInputError("distribution entries must be finite and non-negative")
    if abs(float(t.sum()) - 1.0) > atol:
        raise InvalidInputError(f"distribution sums to {float(t.sum())}, expected 1")
    return t
