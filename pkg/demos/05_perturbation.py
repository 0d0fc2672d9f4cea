# %% [markdown]
# Does the saliency rank patches well?
#
# Mask patches from most to least salient and watch the target
# probability fall. A good map makes it fall fast, so the area under the
# curve is small compared to masking in random order.

# %%
import numpy as np

from attnguide.experiments import auc, perturbation_curve
from attnguide.gradients import LossSpec
from attnguide.rollout import interpret
from attnguide.synthetic import planted, two_class_scene
from attnguide.vit import logits

w = planted(0)
rng = np.random.default_rng(3000)
img = two_class_scene(rng).image
target = int(np.argmax(logits(w, img)))
s = interpret(w, img, LossSpec.single(target))

pos = perturbation_curve(w, img, s, "positive", target=target)
neg = perturbation_curve(w, img, s, "negative", target=target)
rnd = [auc(perturbation_curve(w, img, None, target=target, order=rng.permutation(16)))
       for _ in range(5)]

print("fraction  positive  negative")
for f, p, n in zip(pos.fractions, pos.values, neg.values):
    print(f"{f:8.3f}  {p:8.3f}  {n:8.3f}")
print(f"AUC positive {auc(pos):.3f}  negative {auc(neg):.3f}  random {np.mean(rnd):.3f}")
