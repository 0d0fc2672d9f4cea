"""Signed, gradient-corrected attention saliency for Vision Transformers."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_diff_check  # noqa: E402
from .vit import (ImageTensor, ModelConfig, ModelWeights, PlantSettings, forward,  # noqa: E402
                  patchify, plant_model, random_weights)
from .gradients import LossSpec, attention_gradients, eval_loss, pixel_gradients  # noqa: E402
from .rollout import (CorrectionScheme, SaliencyMap, cls_saliency, correct_layer,  # noqa: E402
                      interpret, normalize_signed, rollout)
from .guidance import CompositeLayout, composite_guide, detail_interpret  # noqa: E402
from .experiments import (attention_transfer, auc, perturb_benchmark,  # noqa: E402
                          perturbation_curve, rewrite_image)

__all__ = [
    "Tape", "Tensor", "backward", "finite_diff_check",
    "ImageTensor", "ModelConfig", "ModelWeights", "PlantSettings", "forward", "patchify",
    "plant_model", "random_weights",
    "LossSpec", "attention_gradients", "eval_loss", "pixel_gradients",
    "CorrectionScheme", "SaliencyMap", "cls_saliency", "correct_layer", "interpret",
    "normalize_signed", "rollout",
    "CompositeLayout", "composite_guide", "detail_interpret",
    "attention_transfer", "auc", "perturb_benchmark", "perturbation_curve", "rewrite_image",
]
