"""Gradient-corrected attention rollout and signed cls saliency.

Per layer the head-averaged map is ``I + mean_h(f(dA) * A)`` where ``f`` is
the positive part (``positive``), identity (``complete``) or absolute value
(``absolute``) of the attention gradient. The corrected maps are chained
last-layer-leftmost and the cls row (without its own column) is the score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .gradients import GradStack, LossSpec, attention_gradients
from .vit import ModelWeights


class CorrectionScheme(str, Enum):
    POSITIVE = "positive"
    COMPLETE = "complete"
    ABSOLUTE = "absolute"

    @classmethod
    def parse(cls, value) -> "CorrectionScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown correction scheme {value!r}; "
                             f"expected one of {[s.value for s in cls]}") from None


_WEIGHTING = {
    CorrectionScheme.POSITIVE: lambda g: np.maximum(g, 0.0),
    CorrectionScheme.COMPLETE: lambda g: g,
    CorrectionScheme.ABSOLUTE: np.abs,
}


def correct_layer(attn: np.ndarray, grad: np.ndarray, scheme="complete") -> np.ndarray:
    """One layer's corrected map from H x T x T attention and gradient."""
    attn = np.asarray(attn, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if attn.shape != grad.shape or attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise ad.ShapeError("correct_layer", attn.shape, grad.shape)
    weighted = _WEIGHTING[CorrectionScheme.parse(scheme)](grad) * attn
    return np.eye(attn.shape[-1]) + weighted.mean(axis=0)


def correct_stack(attention: np.ndarray, grads, scheme="complete") -> np.ndarray:
    """L x T x T corrected stack."""
    g = grads.grads if isinstance(grads, GradStack) else grads
    return np.stack([correct_layer(a, gl, scheme) for a, gl in zip(attention, g)])


def rollout(corrected: np.ndarray) -> np.ndarray:
    """``corrected[L-1] @ ... @ corrected[0]`` (no row renormalisation)."""
    corrected = np.asarray(corrected, dtype=np.float64)
    if corrected.ndim != 3 or len(corrected) < 1:
        raise ad.ShapeError("rollout", corrected.shape)
    out = corrected[0]
    for layer in corrected[1:]:
        out = layer @ out
    return out


@dataclass
class SaliencyMap:
    scores: np.ndarray
    grid: Tuple[int, int]
    normalized: Optional[np.ndarray] = None
    degenerate: bool = False
    scheme: Optional[str] = None
    loss: Optional[str] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.grid = tuple(int(g) for g in self.grid)
        if self.grid[0] * self.grid[1] != self.scores.size:
            raise ad.ShapeError("saliency grid", self.scores.shape, self.grid)

    @property
    def values(self) -> np.ndarray:
        """Normalized scores when available, raw scores otherwise."""
        return self.scores if self.normalized is None else self.normalized

    def as_grid(self, normalized: bool = True) -> np.ndarray:
        v = self.values if normalized else self.scores
        return v.reshape(self.grid)

    def region_mean(self, idx: Sequence[int], normalized: bool = True) -> float:
        v = self.values if normalized else self.scores
        return float(np.mean(v[np.asarray(list(idx), dtype=int)]))

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "scores": [float(x) for x in self.scores],
            "normalized": None if self.normalized is None else [float(x) for x in self.normalized],
            "degenerate": bool(self.degenerate),
            "scheme": self.scheme,
            "loss": self.loss,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SaliencyMap":
        norm = d.get("normalized")
        return cls(scores=np.array(d["scores"], dtype=np.float64), grid=tuple(d["grid"]),
                   normalized=None if norm is None else np.array(norm, dtype=np.float64),
                   degenerate=bool(d.get("degenerate", False)), scheme=d.get("scheme"),
                   loss=d.get("loss"))

    @classmethod
    def from_json(cls, text: str) -> "SaliencyMap":
        return cls.from_dict(json.loads(text))


def cls_saliency(r: np.ndarray, grid: Optional[Tuple[int, int]] = None) -> SaliencyMap:
    """Row 0 of the rollout without its own column."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] < 2:
        raise ad.ShapeError("cls_saliency", r.shape)
    scores = r[0, 1:].copy()
    if grid is None:
        side = int(round(np.sqrt(scores.size)))
        grid = (side, side) if side * side == scores.size else (1, scores.size)
    return SaliencyMap(scores=scores, grid=grid)


def normalize_signed(s: SaliencyMap) -> SaliencyMap:
    """Divide by max |score|; an all-zero map stays zero and is flagged."""
    peak = float(np.max(np.abs(s.scores))) if s.scores.size else 0.0
    if peak > 0.0:
        norm, degenerate = s.scores / peak, False
    else:
        norm, degenerate = np.zeros_like(s.scores), True
    return SaliencyMap(scores=s.scores.copy(), grid=s.grid, normalized=norm,
                       degenerate=degenerate, scheme=s.scheme, loss=s.loss)


def saliency_from(attention: np.ndarray, grads, scheme, grid, spec=None) -> SaliencyMap:
    """Correct, roll out, extract and normalize in one go."""
    scheme = CorrectionScheme.parse(scheme)
    sal = cls_saliency(rollout(correct_stack(attention, grads, scheme)), grid)
    sal.scheme, sal.loss = scheme.value, None if spec is None else str(spec)
    return normalize_signed(sal)


def interpret(w: ModelWeights, image, spec: LossSpec, scheme="complete") -> SaliencyMap:
    """Signed saliency of ``image`` for ``spec`` under the chosen correction."""
    trace, grads = attention_gradients(w, image, spec)
    g = w.config.grid
    return saliency_from(trace.attention_stack, grads, scheme, (g, g), spec)


def argmax_first(v) -> int:
    """Index of the max; ties go to the lowest index."""
    return int(np.argmax(np.asarray(v)))
