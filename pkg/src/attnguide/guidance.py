"""Attention guidance: compositing a guide image, and contrastive detail losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .gradients import LossSpec
from .imaging import resize_bilinear
from .rollout import SaliencyMap, interpret
from .vit import ImageTensor, ModelConfig, ModelWeights, as_image


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class CompositeLayout:
    """Where the guide goes and how much of the frame it takes.

    ``placement='right'`` splits the frame into source | guide columns,
    ``'bottom'`` into source over guide rows. The guide strip is
    ``floor(size * fraction + 0.5)`` pixels wide; the source gets the rest.
    """

    placement: str = "right"
    fraction: float = 0.5

    def __post_init__(self):
        if self.placement not in ("right", "bottom"):
            raise LayoutError(f"placement must be 'right' or 'bottom', got {self.placement!r}")
        if not 0.0 < self.fraction < 1.0:
            raise LayoutError("fraction must lie strictly between 0 and 1")

    def split(self, size: int) -> Tuple[int, int]:
        guide = int(np.floor(size * self.fraction + 0.5))
        return size - guide, guide


@dataclass
class Composite:
    image: ImageTensor
    source_mask: List[int]
    guide_mask: List[int]
    boundary: List[int]


def composite_masks(cfg: ModelConfig, layout: CompositeLayout):
    """Patch indices fully inside the source / guide strip, and the straddlers."""
    src_px, _ = layout.split(cfg.image_size)
    p, g = cfg.patch_size, cfg.grid
    src, guide, boundary = [], [], []
    for idx in range(cfg.num_patches):
        r, c = divmod(idx, g)
        lane = c if layout.placement == "right" else r
        lo, hi = lane * p, (lane + 1) * p
        if hi <= src_px:
            src.append(idx)
        elif lo >= src_px:
            guide.append(idx)
        else:
            boundary.append(idx)
    return src, guide, boundary


def composite_guide(image, guide, layout: CompositeLayout, cfg: ModelConfig) -> Composite:
    """Place ``image`` and ``guide`` side by side at model resolution.

    Both inputs (model-space H x W x C) are bilinearly resized into their
    strips. Patches straddling the seam belong to neither mask.
    """
    image, guide = as_image(image), as_image(guide)
    S = cfg.image_size
    src_px, guide_px = layout.split(S)
    if min(src_px, guide_px) < cfg.patch_size:
        raise LayoutError(f"fraction {layout.fraction} leaves a strip narrower than one patch "
                          f"({src_px} / {guide_px} px, patch {cfg.patch_size})")
    if image.channels != guide.channels:
        raise LayoutError("source and guide differ in channel count")
    out = np.empty((S, S, image.channels))
    if layout.placement == "right":
        out[:, :src_px] = resize_bilinear(image.data, S, src_px)
        out[:, src_px:] = resize_bilinear(guide.data, S, guide_px)
    else:
        out[:src_px] = resize_bilinear(image.data, src_px, S)
        out[src_px:] = resize_bilinear(guide.data, guide_px, S)
    prov = dict(image.provenance)
    prov["composite"] = {"placement": layout.placement, "fraction": layout.fraction,
                         "guide_source": guide.provenance.get("source")}
    src, gmask, boundary = composite_masks(cfg, layout)
    return Composite(ImageTensor(out, prov), src, gmask, boundary)


DETAIL_FORMS = ("ndiff", "diff", "ratio")


def detail_interpret(w: ModelWeights, image, c1: int, c2: int, form: str = "ndiff",
                     scheme="complete") -> SaliencyMap:
    """Contrastive saliency between two classes read from the same region.

    Positive (red) patches push the model toward ``c1``, negative (blue)
    ones toward ``c2``.
    """
    if c1 == c2:
        raise ValueError("classes must differ")
    if form not in DETAIL_FORMS:
        raise ValueError(f"form must be one of {DETAIL_FORMS}")
    return interpret(w, image, LossSpec(form, c1, c2), scheme)
