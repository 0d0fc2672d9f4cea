# %% [markdown]
# Signed saliency on a planted model
#
# The planted model reads class 0 from the left half of the image and
# class 1 from the right half. We build a scene with one object in each
# half and ask which patches support class 0.

# %%
import os

import numpy as np

from _common import OUT, show_grid
from attnguide.gradients import LossSpec
from attnguide.imaging import RenderSpec, encode_image, render_heatmap, to_raw
from attnguide.rollout import interpret
from attnguide.synthetic import planted, two_class_scene
from attnguide.vit import logits

w = planted(0)
scene = two_class_scene(np.random.default_rng(0))
print("logits:", np.round(logits(w, scene.image), 3))

# %% [markdown]
# The three correction schemes differ only in what they do with the
# gradient sign. "positive" throws negative evidence away, "absolute"
# folds it into positive, "complete" keeps it, so only "complete" can
# paint the class-1 half blue.

# %%
for scheme in ("positive", "absolute", "complete"):
    s = interpret(w, scene.image, LossSpec.single(0), scheme)
    show_grid(f"\n{scheme}: left {s.region_mean(scene.source_mask):+.2f}  "
              f"right {s.region_mean(scene.guide_mask):+.2f}", s)

# %%
s = interpret(w, scene.image, LossSpec.single(0), "complete")
big = np.kron(to_raw(scene.image), np.ones((8, 8, 1), dtype=np.uint8))
encode_image(render_heatmap(s, big, RenderSpec(colorbar=True)), os.path.join(OUT, "01_complete.png"))
print("\nwrote", os.path.join(OUT, "01_complete.png"))
