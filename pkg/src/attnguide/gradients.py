"""Scalar losses over logits and their gradients w.r.t. attention maps and pixels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .vit import ForwardTrace, ModelWeights, as_image, forward

VARIANTS = ("single", "diff", "ratio", "ndiff")


class LossSpecError(ValueError):
    pass


class DegenerateDenominator(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """``single`` -> logit[c1]; ``diff`` -> logit[c1] - logit[c2];
    ``ratio`` -> logit[c1] / logit[c2]; ``ndiff`` -> (logit[c1] - logit[c2]) / logit[c1]."""

    variant: str
    c1: int
    c2: int = -1
    scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LossSpecError(f"unknown loss variant {self.variant!r}")
        if self.c1 < 0:
            raise LossSpecError("class index must be non-negative")
        if self.variant != "single":
            if self.c2 < 0:
                raise LossSpecError(f"{self.variant} needs two classes")
            if self.c1 == self.c2:
                raise LossSpecError("classes must differ")

    @classmethod
    def single(cls, target: int) -> "LossSpec":
        return cls("single", target)

    @classmethod
    def diff(cls, c1: int, c2: int) -> "LossSpec":
        return cls("diff", c1, c2)

    @classmethod
    def ratio(cls, c1: int, c2: int) -> "LossSpec":
        return cls("ratio", c1, c2)

    @classmethod
    def ndiff(cls, c1: int, c2: int) -> "LossSpec":
        return cls("ndiff", c1, c2)

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """Parse ``single:C``, ``diff:C1,C2``, ``ratio:C1,C2`` or ``ndiff:C1,C2``."""
        try:
            kind, _, args = text.partition(":")
            nums = [int(a) for a in args.split(",")]
        except ValueError:
            raise LossSpecError(f"cannot parse loss {text!r}") from None
        if kind == "single" and len(nums) == 1:
            return cls.single(nums[0])
        if kind in VARIANTS[1:] and len(nums) == 2:
            return cls(kind, nums[0], nums[1])
        raise LossSpecError(f"cannot parse loss {text!r}")

    def __str__(self):
        s = f"{self.variant}:{self.c1}" if self.variant == "single" else f"{self.variant}:{self.c1},{self.c2}"
        return s if self.scale == 1.0 else f"{s}*{self.scale:g}"

    def scaled(self, factor: float) -> "LossSpec":
        return LossSpec(self.variant, self.c1, self.c2, self.scale * factor)

    def check(self, num_classes: int):
        for c in (self.c1, self.c2) if self.variant != "single" else (self.c1,):
            if c >= num_classes:
                raise LossSpecError(f"class {c} out of range for {num_classes} classes")


_DENOM_EPS = 1e-8


def loss_tensor(logits: Tensor, spec: LossSpec) -> Tensor:
    """Differentiable loss for taped ``logits``."""
    spec.check(logits.shape[-1])
    a = logits[spec.c1]
    if spec.variant == "single":
        out = a
    elif spec.variant == "diff":
        out = a - logits[spec.c2]
    else:
        denom_idx = spec.c2 if spec.variant == "ratio" else spec.c1
        denom = logits.data[denom_idx]
        # degenerate denominators are reported, never clamped
        if abs(denom) < _DENOM_EPS:
            raise DegenerateDenominator(
                f"{spec.variant} loss: |logit[{denom_idx}]| = {abs(denom):.3g} < {_DENOM_EPS}")
        out = a / logits[spec.c2] if spec.variant == "ratio" else (a - logits[spec.c2]) / a
    return out * spec.scale if spec.scale != 1.0 else out


def eval_loss(logits, spec: LossSpec) -> float:
    return loss_tensor(ad.as_tensor(np.asarray(logits, dtype=np.float64)), spec).item()


@dataclass
class GradStack:
    grads: np.ndarray     # L x H x T x T

    def __len__(self):
        return self.grads.shape[0]

    def __getitem__(self, layer):
        return self.grads[layer]


def traced_gradients(w: ModelWeights, image, spec: LossSpec, *, attention_override=None,
                     watch_image: bool = False) -> Tuple[ForwardTrace, float, dict]:
    """Forward on a fresh tape, evaluate ``spec`` and backpropagate."""
    tape = Tape()
    trace = forward(w, image, tape, attention_override=attention_override,
                    watch_image=watch_image)
    loss = loss_tensor(trace.logits, spec)
    grads = ad.backward(loss, tape)
    return trace, loss.item(), grads


def attention_gradients(w: ModelWeights, image, spec: LossSpec, *,
                        attention_override=None) -> Tuple[ForwardTrace, GradStack]:
    """d loss / d A for every layer's post-softmax attention map."""
    trace, _, grads = traced_gradients(w, image, spec, attention_override=attention_override)
    return trace, GradStack(np.stack([grads[a.id] for a in trace.attention]))


def pixel_gradients(w: ModelWeights, image, spec: LossSpec) -> np.ndarray:
    """d loss / d pixel in model space, shaped like the image."""
    trace, _, grads = traced_gradients(w, as_image(image), spec, watch_image=True)
    return grads[trace.image.id]
