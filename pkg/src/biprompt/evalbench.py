"""Synthetic spurious-correlation benchmark, group metrics and the CMI diagnostic."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import DTYPE, ImageView, InvalidInputError

TILE = 4  # pattern period; matches one feature cell of the toy conv encoders
METADATA_FIELDS = ("id", "class_label", "spurious_label", "split")


@dataclass(frozen=True)
class GroupedExample:
    image: ImageView
    class_label: int
    spurious_label: int
    num_spurious: int
    example_id: int = 0
    split: str = "test"

    def __post_init__(self) -> None:
        if not 0 <= self.spurious_label < self.num_spurious or self.class_label < 0:
            raise InvalidInputError("labels outside their declared ranges")

    @property
    def group(self) -> int:
        return self.class_label * self.num_spurious + self.spurious_label


@dataclass(frozen=True)
class BiasSpec:
    """Generator settings.

    Each class owns a random ``4x4x3`` tile repeated over a centred
    ``foreground_size`` square; each spurious label owns a tile repeated over
    the remaining border. ``rho`` is the probability that the spurious label
    equals the class label.
    """

    num_classes: int = 2
    num_spurious: int = 2
    rho: float = 0.95
    image_size: int = 32
    foreground_size: int = 16
    noise: float = 0.05
    contrast_jitter: float = 0.5
    seed: int = 0
    pattern_seed: int = 1234

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must lie in [0, 1]")
        if self.num_classes < 2 or self.num_spurious < 2:
            raise InvalidInputError("need at least two classes and two spurious labels")
        if self.num_classes != self.num_spurious:
            raise InvalidInputError("aligned correlation requires num_classes == num_spurious")
        if self.image_size % TILE or self.foreground_size % TILE:
            raise InvalidInputError(f"image and foreground sizes must be multiples of {TILE}")
        if not TILE <= self.foreground_size < self.image_size:
            raise InvalidInputError("foreground must be smaller than the image")
        if (self.image_size - self.foreground_size) % (2 * TILE):
            raise InvalidInputError("foreground must sit on the tile grid when centred")
        if self.noise < 0:
            raise InvalidInputError("noise must be >= 0")
        if not 0.0 <= self.contrast_jitter < 1.0:
            raise InvalidInputError("contrast_jitter must lie in [0, 1)")

    @property
    def num_groups(self) -> int:
        return self.num_classes * self.num_spurious

    def foreground_slice(self) -> slice:
        lo = (self.image_size - self.foreground_size) // 2
        return slice(lo, lo + self.foreground_size)

    def foreground_mask(self) -> np.ndarray:
        m = np.zeros((self.image_size, self.image_size), dtype=bool)
        s = self.foreground_slice()
        m[s, s] = True
        return m


def pattern_tiles(spec: BiasSpec) -> tuple[np.ndarray, np.ndarray]:
    """Object tiles ``(C, 3, 4, 4)`` and background tiles ``(S, 3, 4, 4)``."""
    rng = np.random.default_rng(spec.pattern_seed)
    objects = rng.uniform(0.15, 0.85, size=(spec.num_classes, 3, TILE, TILE))
    backgrounds = rng.uniform(0.15, 0.85, size=(spec.num_spurious, 3, TILE, TILE))
    return objects, backgrounds


def _tile(tile: np.ndarray, size: int) -> np.ndarray:
    reps = size // TILE
    return np.tile(tile, (1, reps, reps))


def render(spec: BiasSpec, class_label: int, spurious_label: Optional[int],
           noise: Optional[np.ndarray] = None, include_object: bool = True,
           object_contrast: float = 1.0, background_contrast: float = 1.0) -> np.ndarray:
    """Compose one image; ``spurious_label=None`` leaves the border black."""
    objects, backgrounds = pattern_tiles(spec)
    n = spec.image_size
    img = np.zeros((3, n, n))
    fg = spec.foreground_mask()
    if spurious_label is not None:
        img[:, ~fg] = background_contrast * _tile(backgrounds[spurious_label], n)[:, ~fg]
    if include_object:
        img[:, fg] = object_contrast * _tile(objects[class_label], n)[:, fg]
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def prototypes(spec: BiasSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise-free object-only and background-only images, for aligning toy encoders."""
    objs = np.stack([render(spec, c, None) for c in range(spec.num_classes)])
    bgs = np.stack([render(spec, 0, s, include_object=False) for s in range(spec.num_spurious)])
    return torch.as_tensor(objs, dtype=DTYPE), torch.as_tensor(bgs, dtype=DTYPE)


def generate_dataset(spec: BiasSpec, n: int, split: str = "test") -> list[GroupedExample]:
    """``n`` examples with balanced classes and rho-correlated backgrounds."""
    if n < spec.num_groups:
        raise InvalidInputError(f"need n >= {spec.num_groups} so every group can appear")
    rng = np.random.default_rng(spec.seed)
    C, S = spec.num_classes, spec.num_spurious
    classes = rng.integers(0, C, size=n)
    aligned = rng.random(n) < spec.rho
    offsets = rng.integers(1, S, size=n)  # uniform over the other labels
    spurious = np.where(aligned, classes, (classes + offsets) % S)
    contrast = rng.uniform(1.0 - spec.contrast_jitter, 1.0, size=(n, 2))
    shape = (3, spec.image_size, spec.image_size)
    out = []
    for i in range(n):
        noise = rng.normal(0.0, spec.noise, size=shape) if spec.noise > 0 else None
        px = render(spec, int(classes[i]), int(spurious[i]), noise,
                    object_contrast=contrast[i, 0], background_contrast=contrast[i, 1])
        out.append(GroupedExample(ImageView(torch.as_tensor(px)), int(classes[i]),
                                  int(spurious[i]), S, example_id=i, split=split))
    return out


def _check_lengths(preds: Sequence[int], examples: Sequence[GroupedExample]) -> np.ndarray:
    if len(preds) != len(examples):
        raise InvalidInputError(f"{len(preds)} predictions for {len(examples)} examples")
    return np.asarray(preds, dtype=np.int64)


def average_accuracy(preds: Sequence[int], examples: Sequence[GroupedExample]) -> float:
    p = _check_lengths(preds, examples)
    if len(p) == 0:
        raise InvalidInputError("no examples")
    y = np.array([e.class_label for e in examples])
    return float(np.mean(p == y))


def group_accuracies(preds: Sequence[int], examples: Sequence[GroupedExample]) -> dict[int, float]:
    p = _check_lengths(preds, examples)
    y = np.array([e.class_label for e in examples])
    g = np.array([e.group for e in examples])
    return {int(k): float(np.mean(p[g == k] == y[g == k])) for k in np.unique(g)}


def worst_group_accuracy(preds: Sequence[int], examples: Sequence[GroupedExample]) -> tuple[float, int]:
    """Minimum per-group accuracy and its group id (ties to the lowest id)."""
    accs = group_accuracies(preds, examples)
    if not accs:
        raise InvalidInputError("no groups present")
    worst = min(accs.values())
    return worst, min(k for k, v in accs.items() if v == worst)


def _codes(x: Sequence[int]) -> tuple[np.ndarray, int]:
    values, codes = np.unique(np.asarray(x), return_inverse=True)
    return codes.reshape(-1), len(values)


def conditional_mutual_information(spurious: Sequence[int], preds: Sequence[int],
                                   causal: Sequence[int]) -> float:
    """Plug-in ``I(spurious; prediction | causal)`` in nats from empirical frequencies."""
    if not (len(spurious) == len(preds) == len(causal)):
        raise InvalidInputError("spurious, preds and causal must have equal lengths")
    if len(spurious) == 0:
        raise InvalidInputError("empty input")
    s, ns = _codes(spurious)
    y, ny = _codes(preds)
    c, nc = _codes(causal)
    joint = np.zeros((nc, ns, ny))
    np.add.at(joint, (c, s, y), 1.0)
    joint /= joint.sum()
    p_c = joint.sum(axis=(1, 2), keepdims=True)
    p_cs = joint.sum(axis=2, keepdims=True)
    p_cy = joint.sum(axis=1, keepdims=True)
    nz = joint > 0
    # p(s,y|c) / (p(s|c) p(y|c)) == p(c,s,y) p(c) / (p(c,s) p(c,y))
    num = joint * p_c
    den = p_cs * p_cy
    return float(np.sum(joint[nz] * np.log(num[nz] / den[nz])))


def export_dataset(examples: Sequence[GroupedExample], directory: str | Path) -> Path:
    """Write ``images/<id>.png`` plus ``metadata.csv`` (8-bit quantized pixels)."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METADATA_FIELDS)
        for ex in examples:
            arr = np.round(ex.image.pixels.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(root / "images" / f"{ex.example_id}.png")
            w.writerow([ex.example_id, ex.class_label, ex.spurious_label, ex.split])
    return root


def load_dataset(directory: str | Path, num_spurious: Optional[int] = None) -> list[GroupedExample]:
    """Read a directory written by :func:`export_dataset` (or prepared by hand)."""
    root = Path(directory)
    meta = root / "metadata.csv"
    if not meta.is_file():
        raise InvalidInputError(f"{meta} not found")
    with open(meta, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METADATA_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidInputError(f"metadata.csv lacks columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise InvalidInputError("metadata.csv has no rows")
    S = num_spurious or (max(int(r["spurious_label"]) for r in rows) + 1)
    out = []
    for r in rows:
        path = root / "images" / f"{r['id']}.png"
        try:
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise InvalidInputError(f"cannot read {path}: {exc}") from exc
        out.append(GroupedExample(ImageView(torch.as_tensor(arr.transpose(2, 0, 1).copy())),
                                  int(r["class_label"]), int(r["spurious_label"]), S,
                                  example_id=int(r["id"]), split=r["split"]))
    return out
