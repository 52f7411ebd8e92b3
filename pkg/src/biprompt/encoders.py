"""Visual and text encoders sharing one embedding space.

The toy encoders are small, seeded and fully differentiable so every
downstream quantity (Grad-CAM, losses, gradients) can be checked at desk
scale. ``TorchModuleEncoder`` is the seam for real pretrained models.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    DTYPE,
    DegenerateInputError,
    ImageView,
    InvalidInputError,
    InvalidTaskError,
    UnsupportedEncoderError,
    l2_normalize,
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def parameter_digest(params: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names and their little-endian float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].detach().cpu().numpy(), dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class VisualEncoder:
    """Interface for image encoders.

    Subclasses implement :meth:`encode_batch`. Encoders with a spatial feature
    map also implement :meth:`features` and :meth:`head`, which Grad-CAM uses.
    """

    embed_dim: int
    feature_layer: Optional[str] = None

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        raise UnsupportedEncoderError(f"{type(self).__name__} has no spatial feature map")

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        raise UnsupportedEncoderError(f"{type(self).__name__} has no spatial feature map")

    def encode_batch(self, pixels: torch.Tensor) -> torch.Tensor:
        """Map ``(N, 3, H, W)`` pixels to raw (unnormalized) ``(N, d)`` embeddings."""
        return self.head(self.features(pixels))

    def parameters(self) -> dict[str, torch.Tensor]:
        return {}

    def digest(self) -> str:
        return parameter_digest(self.parameters())


class TextEncoder:
    embed_dim: int

    def encode_text(self, text: str) -> torch.Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, torch.Tensor]:
        return {}

    def digest(self) -> str:
        return parameter_digest(self.parameters())


class ConvEncoder(VisualEncoder):
    """Two stride-2 convolutions, global average pool, linear projection.

    Kernels are 2x2 with stride 2 and no padding, so each cell of the final
    feature map sees exactly one 4x4 pixel block. Convolutions carry no bias,
    which makes an all-zeros image map to the projection bias.
    """

    feature_layer = "conv2"

    def __init__(
        self,
        embed_dim: int = 32,
        hidden: int = 16,
        channels: int = 24,
        seed: int = 0,
        projection: Optional[torch.Tensor] = None,
        bias: Optional[torch.Tensor] = None,
    ):
        g = _generator(seed)
        self.embed_dim = embed_dim
        self.conv1 = torch.randn(hidden, 3, 2, 2, generator=g, dtype=DTYPE) / np.sqrt(12.0)
        self.conv2 = torch.randn(channels, hidden, 2, 2, generator=g, dtype=DTYPE) / np.sqrt(4.0 * hidden)
        if projection is None:
            projection = torch.randn(embed_dim, channels, generator=g, dtype=DTYPE) / np.sqrt(channels)
        if bias is None:
            bias = 0.1 * torch.randn(embed_dim, generator=g, dtype=DTYPE)
        self.projection = torch.as_tensor(projection, dtype=DTYPE).clone()
        self.bias = torch.as_tensor(bias, dtype=DTYPE).clone()
        if self.projection.shape != (embed_dim, channels) or self.bias.shape != (embed_dim,):
            raise InvalidInputError("projection/bias shapes do not match the encoder")

    @property
    def channels(self) -> int:
        return int(self.conv2.shape[0])

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        x = F.relu(F.conv2d(pixels, self.conv1, stride=2))
        return F.relu(F.conv2d(x, self.conv2, stride=2))

    def pool(self, fmap: torch.Tensor) -> torch.Tensor:
        return fmap.mean(dim=(-2, -1))

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.pool(fmap) @ self.projection.T + self.bias

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "conv1": self.conv1,
            "conv2": self.conv2,
            "projection": self.projection,
            "bias": self.bias,
        }


class CellProbeEncoder(ConvEncoder):
    """Conv encoder whose output depends on a single feature cell only.

    Activations outside ``cell`` are zeroed at the Grad-CAM layer and the
    projection maps onto a fixed positive direction offset by an orthogonal
    bias, so the class score grows with the activation at that cell.
    """

    def __init__(self, embed_dim: int = 8, seed: int = 0, cell: tuple[int, int] = (0, 0)):
        super().__init__(embed_dim=embed_dim, seed=seed)
        g = _generator(seed + 7919)
        self.cell = cell
        self.direction = l2_normalize(torch.randn(embed_dim, generator=g, dtype=DTYPE))
        weights = torch.rand(self.channels, generator=g, dtype=DTYPE) + 0.1
        self.projection = torch.outer(self.direction, weights)
        b = torch.randn(embed_dim, generator=g, dtype=DTYPE)
        b = b - torch.dot(b, self.direction) * self.direction
        self.bias = l2_normalize(b)

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        fmap = super().features(pixels)
        mask = torch.zeros(fmap.shape[-2:], dtype=DTYPE)
        mask[self.cell] = 1.0
        return fmap * mask

    def receptive_field(self) -> tuple[slice, slice]:
        """Pixel rows/columns feeding ``cell`` (4x4 blocks for this architecture)."""
        r, c = self.cell
        return slice(4 * r, 4 * r + 4), slice(4 * c, 4 * c + 4)


class PlantedBiasEncoder(ConvEncoder):
    """Conv encoder whose projection is aligned with a text embedding space.

    Coordinates of the shared space are split into *object* and *context*
    dimensions, balanced so both carry the same share of the between-class
    prompt energy. Object prototypes (class foreground patterns) map to a
    shared objectness direction (the prompt centroid) plus the object-coordinate
    part of their class prompt's offset from the centroid; context prototypes
    (background textures) map to the context-coordinate offset of the class
    they co-occur with. ``context_gain > object_gain`` plants the shortcut:
    backgrounds dominate the zero-shot decision.
    """

    def __init__(
        self,
        class_embeddings: torch.Tensor,
        object_prototypes: torch.Tensor,
        context_prototypes: torch.Tensor,
        object_gain: float = 1.0,
        context_gain: float = 1.5,
        objectness: float = 1.0,
        bias_scale: float = 0.05,
        seed: int = 0,
        hidden: int = 16,
        channels: int = 24,
    ):
        class_embeddings = torch.as_tensor(class_embeddings, dtype=DTYPE)
        C, d = class_embeddings.shape
        super().__init__(embed_dim=d, hidden=hidden, channels=channels, seed=seed)
        if len(object_prototypes) != C:
            raise InvalidInputError("need one object prototype per class")
        if len(context_prototypes) > C:
            raise InvalidInputError("context prototypes cannot outnumber classes")
        centroid = class_embeddings.mean(0)
        offsets = class_embeddings - centroid
        self.context_mask = balanced_partition((offsets ** 2).sum(0))
        self.object_mask = 1.0 - self.context_mask
        self.object_gain = float(object_gain)
        self.context_gain = float(context_gain)

        obj_dirs = l2_normalize(offsets * self.object_mask, eps=1e-12)
        ctx_dirs = l2_normalize(offsets * self.context_mask, eps=1e-12)
        targets = torch.cat([
            objectness * l2_normalize(centroid) + object_gain * obj_dirs,
            context_gain * ctx_dirs[: len(context_prototypes)],
        ])  # (P, d)
        protos = torch.cat([torch.as_tensor(object_prototypes, dtype=DTYPE),
                            torch.as_tensor(context_prototypes, dtype=DTYPE)])
        pooled = self.pool(self.features(protos))  # (P, k)
        # minimum-norm least squares: pooled @ W.T = targets
        self.projection = (torch.linalg.pinv(pooled) @ targets).T.contiguous()
        self.bias = bias_scale * l2_normalize(centroid)

    def parameters(self) -> dict[str, torch.Tensor]:
        params = super().parameters()
        params["context_mask"] = self.context_mask
        return params


def balanced_partition(energy: torch.Tensor) -> torch.Tensor:
    """0/1 mask splitting coordinates into two halves of near-equal total energy.

    Greedy: visit coordinates by decreasing energy and give each to the
    lighter half that still has room.
    """
    d = energy.numel()
    order = torch.argsort(energy, descending=True, stable=True).tolist()
    mask = torch.zeros(d, dtype=DTYPE)
    totals, counts, cap = [0.0, 0.0], [0, 0], (d + 1) // 2
    for i in order:
        side = 0 if totals[0] <= totals[1] else 1
        if counts[side] >= cap:
            side = 1 - side
        totals[side] += float(energy[i])
        counts[side] += 1
        mask[i] = float(side)
    return mask


class HashTextEncoder(TextEncoder):
    """Seeded token hashing into a frozen table, mean-pooled and projected.

    Each token's row is generated from a keyed BLAKE2 hash of the token, so
    the table is effectively unbounded and collision-free for small
    vocabularies.
    """

    def __init__(self, embed_dim: int = 32, token_dim: int = 64, seed: int = 0):
        self.embed_dim = embed_dim
        self.token_dim = token_dim
        self.seed = int(seed)
        g = _generator(seed)
        self.projection = torch.randn(embed_dim, token_dim, generator=g, dtype=DTYPE) / np.sqrt(token_dim)

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def token_vector(self, token: str) -> torch.Tensor:
        key = self.seed.to_bytes(8, "little", signed=True)
        digest = hashlib.blake2b(token.encode(), key=key, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return torch.as_tensor(rng.standard_normal(self.token_dim))

    def encode_text(self, text: str) -> torch.Tensor:
        tokens = self.tokenize(text)
        if not tokens:
            raise InvalidInputError(f"no tokens in {text!r}")
        pooled = torch.stack([self.token_vector(t) for t in tokens]).mean(0)
        return l2_normalize(self.projection @ pooled, eps=1e-12)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"projection": self.projection, "seed": torch.tensor([float(self.seed)])}


class TorchModuleEncoder(VisualEncoder):
    """Adapter for an external image model.

    ``backbone`` maps ``(N, 3, H, W)`` to a spatial feature map ``(N, k, h, w)``
    and ``head`` maps that map to ``(N, d)`` embeddings. Pass ``backbone=None``
    with ``encode`` for models that expose no spatial features; Grad-CAM then
    falls back to a centre prior.
    """

    def __init__(
        self,
        embed_dim: int,
        backbone: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
        head: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
        encode: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
        params: Optional[Mapping[str, torch.Tensor]] = None,
        feature_layer: Optional[str] = None,
    ):
        if encode is None and (backbone is None or head is None):
            raise InvalidInputError("provide either encode, or both backbone and head")
        self.embed_dim = embed_dim
        self._backbone, self._head, self._encode = backbone, head, encode
        self._params = dict(params or {})
        self.feature_layer = feature_layer if backbone is not None else None

    @classmethod
    def from_checkpoint(cls, path: str | Path, **kwargs) -> "TorchModuleEncoder":
        """Load a TorchScript module exposing ``features`` and ``head`` methods."""
        module = torch.jit.load(str(path), map_location="cpu").double().eval()
        for p in module.parameters():
            p.requires_grad_(False)
        params = {k: v for k, v in module.state_dict().items()}
        embed_dim = kwargs.pop("embed_dim", None)
        if embed_dim is None:
            raise InvalidInputError("embed_dim is required for external checkpoints")
        return cls(
            embed_dim,
            backbone=module.features,
            head=module.head,
            params=params,
            feature_layer=kwargs.pop("feature_layer", "features"),
        )

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        if self._backbone is None:
            return super().features(pixels)
        return self._backbone(pixels)

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        if self._head is None:
            return super().head(fmap)
        return self._head(fmap)

    def encode_batch(self, pixels: torch.Tensor) -> torch.Tensor:
        if self._encode is not None:
            return self._encode(pixels)
        return self.head(self.features(pixels))

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self._params)


@dataclass
class FeatureHandle:
    """Spatial feature map of one image plus the embedding computed from it.

    ``features`` is a leaf tensor with ``requires_grad`` set; use
    :meth:`grad` for gradient queries. Single consumer only.
    """

    features: torch.Tensor
    embedding: torch.Tensor

    def grad(self, scalar: torch.Tensor) -> torch.Tensor:
        (g,) = torch.autograd.grad(scalar, self.features, retain_graph=True)
        return g


def _batch(img: ImageView) -> torch.Tensor:
    return img.pixels.unsqueeze(0)


def encode_image(enc: VisualEncoder, img: ImageView) -> torch.Tensor:
    """Unit-norm embedding of one image."""
    return encode_images(enc, [img])[0]


def encode_images(enc: VisualEncoder, imgs: Sequence[ImageView]) -> torch.Tensor:
    """Unit-norm embeddings ``(N, d)`` for a batch of equally sized images."""
    if not imgs:
        raise InvalidInputError("no images to encode")
    pixels = torch.stack([i.pixels for i in imgs])
    raw = enc.encode_batch(pixels)
    return l2_normalize(raw, eps=1e-12)


def spatial_features(enc: VisualEncoder, img: ImageView) -> FeatureHandle:
    """Feature map ``(k, h, w)`` at the encoder's Grad-CAM layer, with a gradient handle."""
    if getattr(enc, "feature_layer", None) is None:
        raise UnsupportedEncoderError(f"{type(enc).__name__} exposes no spatial features")
    with torch.no_grad():
        fmap = enc.features(_batch(img))[0]
    leaf = fmap.detach().clone().requires_grad_(True)
    raw = enc.head(leaf.unsqueeze(0))[0]
    if raw.norm() == 0:
        raise DegenerateInputError("encoder produced a zero embedding")
    return FeatureHandle(features=leaf, embedding=l2_normalize(raw))


def encode_class_prompts(
    enc: TextEncoder, class_names: Sequence[str], template: str = "a photo of a {}."
) -> torch.Tensor:
    """Unit-norm prompt embeddings ``(C, d)``, one per class name."""
    names = list(class_names)
    if len(names) < 2:
        raise InvalidTaskError("need at least two classes")
    if any(not str(n).strip() for n in names):
        raise InvalidTaskError("class names must be non-empty")
    if len(set(names)) != len(names):
        raise InvalidTaskError("duplicate class names")
    if template.count("{}") != 1:
        raise InvalidInputError("template must contain exactly one '{}' placeholder")
    return torch.stack([enc.encode_text(template.format(n)) for n in names])
