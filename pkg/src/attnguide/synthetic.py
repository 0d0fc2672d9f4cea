"""Desk-scale stand-ins for pretrained weights and natural images.

The planted model reads class ``c`` from the brightness of a fixed patch
region. "Object" images are bright textured frames; compositing two of
them side by side gives a two-class scene in the model's eyes.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from .guidance import Composite, CompositeLayout, composite_guide
from .vit import ImageTensor, ModelConfig, ModelWeights, PlantSettings, plant_model

PLANT_CONFIG = ModelConfig(image_size=16, patch_size=4, embed_dim=32, num_layers=2,
                           num_heads=2, mlp_ratio=2.0, num_classes=2)

OBJECT_LEVEL = 0.75
TEXTURE = 0.15
PROVENANCE = {"source": "synthetic", "mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]}


def band_regions(cfg: ModelConfig, bands: int = 2) -> Dict[int, List[int]]:
    """Split the patch grid into ``bands`` vertical bands, class ``k`` = band ``k``."""
    g = cfg.grid
    if g % bands:
        raise ValueError(f"grid width {g} is not divisible into {bands} bands")
    cols = np.arange(cfg.num_patches) % g
    w = g // bands
    return {k: [int(i) for i in np.flatnonzero(cols // w == k)] for k in range(bands)}


def planted(seed: int = 0, cfg: ModelConfig = PLANT_CONFIG, bands: int = 2,
            settings: Optional[PlantSettings] = None) -> ModelWeights:
    return plant_model(cfg, band_regions(cfg, bands), seed=seed, settings=settings)


def object_image(rng: np.random.Generator, cfg: ModelConfig = PLANT_CONFIG,
                 level: float = OBJECT_LEVEL, texture: float = TEXTURE) -> ImageTensor:
    """A frame-filling bright textured object, clipped to the pixel range."""
    s = cfg.image_size
    x = level + texture * rng.standard_normal((s, s, cfg.channels))
    return ImageTensor(np.clip(x, -1.0, 1.0), dict(PROVENANCE))


def background_image(rng: Optional[np.random.Generator] = None, cfg: ModelConfig = PLANT_CONFIG,
                     texture: float = 0.0) -> ImageTensor:
    """Plain mean-gray frame (model-space zero), optionally with faint texture."""
    s = cfg.image_size
    x = np.zeros((s, s, cfg.channels))
    if texture and rng is not None:
        x = np.clip(texture * rng.standard_normal(x.shape), -1.0, 1.0)
    return ImageTensor(x, dict(PROVENANCE))


def band_image(rng: np.random.Generator, levels, cfg: ModelConfig = PLANT_CONFIG,
               texture: float = TEXTURE) -> ImageTensor:
    """Vertical bands at the given brightness levels, left to right."""
    s = cfg.image_size
    x = texture * rng.standard_normal((s, s, cfg.channels))
    edges = np.linspace(0, s, len(levels) + 1).astype(int)
    for lv, a, b in zip(levels, edges[:-1], edges[1:]):
        x[:, a:b] += lv
    return ImageTensor(np.clip(x, -1.0, 1.0), dict(PROVENANCE))


def two_class_scene(rng: np.random.Generator, cfg: ModelConfig = PLANT_CONFIG,
                    layout: CompositeLayout = CompositeLayout("right", 0.5)) -> Composite:
    """Class-0 object on the left, class-1 object as the guide on the right."""
    return composite_guide(object_image(rng, cfg), object_image(rng, cfg), layout, cfg)


def single_class_scene(rng: np.random.Generator, cfg: ModelConfig = PLANT_CONFIG,
                       layout: CompositeLayout = CompositeLayout("right", 0.5)) -> Composite:
    """Class-0 object on the left, plain background where a guide would go."""
    return composite_guide(object_image(rng, cfg), background_image(rng, cfg), layout, cfg)
