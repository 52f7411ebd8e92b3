"""Episodic per-sample test-time adaptation of the prompt parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Literal, Optional

import torch

from .attention import AttentionMap, gradcam
from .core import (
    BiPromptError,
    DEFAULT_TAU,
    ImageView,
    InvalidInputError,
    argmax_lowest,
    predict,
)
from .debias import (
    PromptSet,
    interpolate_prompts,
    normalize_prompts,
    random_erase,
    reset,  # re-exported for callers that manage state themselves
    split_views,
)
from .encoders import VisualEncoder, encode_images
from .objective import LossBreakdown, LossWeights, entropy_reg, total_loss_biprompt, total_loss_seraser

Method = Literal["vanilla", "seraser", "biprompt"]
METHODS = ("vanilla", "seraser", "biprompt")
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class AdaptationConfig:
    steps: int = 1
    step_size: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    method: Method = "biprompt"
    episodic: bool = True
    seed: int = 0
    tau: float = DEFAULT_TAU
    learn_scale: bool = True
    erase_grid: int = 8
    erase_patches: int = 4

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise InvalidInputError("step_size must be positive")
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]
    alpha: float
    entropy: float


@dataclass
class AdaptationTrace:
    records: list[StepRecord] = field(default_factory=list)
    prediction: Optional[torch.Tensor] = None
    zero_shot: Optional[torch.Tensor] = None
    pseudo_label: int = 0
    failed: bool = False
    error: str = ""
    attention: Optional[AttentionMap] = None

    @property
    def final_losses(self) -> dict[str, float]:
        return self.records[-1].losses if self.records else {}


def _loss(method: Method, embeddings: torch.Tensor, base, alpha_raw, scale,
          pseudo: int, cfg: AdaptationConfig) -> tuple[LossBreakdown, torch.Tensor]:
    prompts = interpolate_prompts(base, alpha_raw, scale)
    probs = predict(embeddings, prompts, cfg.tau)
    p = probs[0]
    if method == "biprompt":
        return total_loss_biprompt(p, probs[1], probs[2], pseudo, cfg.weights), p
    return total_loss_seraser(p, probs[1], pseudo, cfg.weights), p


def _views(method: Method, img: ImageView, enc: VisualEncoder, prompts0, cfg: AdaptationConfig,
           trace: AdaptationTrace) -> list[ImageView]:
    if method == "biprompt":
        attn = gradcam(enc, img, prompts0, cfg.tau, target_class=trace.pseudo_label)
        trace.attention = attn
        fg, bg = split_views(img, attn)
        return [img, fg, bg]
    erased = random_erase(img, cfg.erase_grid, cfg.erase_patches, rng_seed=cfg.seed)
    return [img, erased]


def adapt_sample(
    img: ImageView, ps: PromptSet, enc: VisualEncoder, cfg: AdaptationConfig
) -> tuple[torch.Tensor, AdaptationTrace, PromptSet]:
    """Adapt a private copy of ``ps`` to one image and predict with it.

    Views are built once from the zero-shot prediction; each step is a plain
    gradient step on ``alpha_raw`` (and ``scale`` when ``cfg.learn_scale``).
    On a non-finite loss or gradient the zero-shot prediction is returned and
    the trace is marked failed.
    """
    work = ps.copy()
    trace = AdaptationTrace()
    with torch.no_grad():
        prompts0 = normalize_prompts(work)
        zero_shot = predict(encode_images(enc, [img])[0], prompts0, cfg.tau)
    trace.zero_shot = zero_shot
    trace.pseudo_label = argmax_lowest(zero_shot)
    if cfg.method == "vanilla" or cfg.steps == 0:
        trace.prediction = zero_shot
        return zero_shot, trace, work

    try:
        views = _views(cfg.method, img, enc, prompts0, cfg, trace)
        with torch.no_grad():
            embeddings = encode_images(enc, views) if len({v.pixels.shape for v in views}) == 1 \
                else torch.cat([encode_images(enc, [v]) for v in views])
        alpha_raw = work.alpha_raw.clone().requires_grad_(True)
        scale = work.scale.clone().requires_grad_(cfg.learn_scale)
        for step in range(cfg.steps):
            loss, p = _loss(cfg.method, embeddings, work.base_embeddings, alpha_raw, scale,
                            trace.pseudo_label, cfg)
            if not torch.isfinite(loss.total):
                raise FloatingPointError("non-finite loss")
            params = [alpha_raw, scale] if cfg.learn_scale else [alpha_raw]
            grads = torch.autograd.grad(loss.total, params)
            if not all(torch.isfinite(g).all() for g in grads):
                raise FloatingPointError("non-finite gradient")
            trace.records.append(StepRecord(step, loss.as_floats(),
                                            float(torch.sigmoid(alpha_raw.detach())),
                                            float(entropy_reg(p.detach()))))
            with torch.no_grad():
                alpha_raw -= cfg.step_size * grads[0]
                if cfg.learn_scale:
                    scale -= cfg.step_size * grads[1]
                    scale.clamp_(min=SCALE_FLOOR)
        work = PromptSet(work.base_embeddings, alpha_raw.detach(), scale.detach(), work.alpha0)
        with torch.no_grad():
            final = predict(embeddings[0], normalize_prompts(work), cfg.tau)
        if not torch.isfinite(final).all():
            raise FloatingPointError("non-finite prediction")
    except (FloatingPointError, BiPromptError) as exc:
        trace.failed = True
        trace.error = str(exc)
        trace.prediction = zero_shot
        return zero_shot, trace, ps.copy()
    trace.prediction = final
    return final, trace, work


def adapt_stream(
    images: Iterable[ImageView], ps: PromptSet, enc: VisualEncoder, cfg: AdaptationConfig
) -> Iterator[tuple[torch.Tensor, AdaptationTrace, PromptSet]]:
    """Adapt samples in order.

    With ``cfg.episodic`` every sample starts from a copy of ``ps``; otherwise
    the adapted state carries over from one sample to the next.
    """
    state = ps.copy()
    for img in images:
        start = ps.copy() if cfg.episodic else state
        pred, trace, state = adapt_sample(img, start, enc, cfg)
        yield pred, trace, state
