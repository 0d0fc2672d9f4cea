"""Attention transfer, pixel rewriting and perturbation (AUC) evaluation."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .gradients import LossSpec, loss_tensor, traced_gradients
from .rollout import CorrectionScheme, SaliencyMap, interpret, saliency_from
from .vit import ImageTensor, ModelWeights, as_image, forward, softmax

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- attention transfer

@dataclass
class TransferStep:
    step: int
    loss: float
    logits: np.ndarray
    saliency: SaliencyMap
    attention: Optional[np.ndarray] = None   # L x H x T x T snapshot when requested


@dataclass
class TransferRun:
    lr: float
    steps: int
    scheme: str
    loss: str
    records: List[TransferStep] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "steps": self.steps, "scheme": self.scheme, "loss": self.loss,
            "records": [{"step": r.step, "loss": r.loss, "logits": r.logits.tolist(),
                         "saliency": r.saliency.to_dict()} for r in self.records],
        }


def attention_transfer(w: ModelWeights, image, spec: LossSpec, lr: float = 4e-4,
                       steps: int = 10, scheme="complete", snapshot_every: int = 0) -> TransferRun:
    """Gradient descent on the attention maps alone.

    The maps of the initial forward pass become free variables (detached
    from Q and K); each step does ``A <- A - lr * dloss/dA`` on every layer
    without renormalising rows, and the resulting model is interpreted.
    Record 0 is the unmodified model seen through free maps, so its
    gradients lack the path through later softmaxes and its saliency is
    close to, not equal to, :func:`interpret` when there are several layers.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    scheme = CorrectionScheme.parse(scheme)
    image = as_image(image)
    g = w.config.grid
    attn = forward(w, image).attention_stack.copy()
    run = TransferRun(lr=lr, steps=steps, scheme=scheme.value, loss=str(spec))
    for step in range(steps + 1):
        trace, loss, grads = traced_gradients(w, image, spec, attention_override=dict(enumerate(attn)))
        dA = np.stack([grads[a.id] for a in trace.attention])
        sal = saliency_from(attn, dA, scheme, (g, g), spec)
        snap = attn.copy() if snapshot_every and step % snapshot_every == 0 else None
        run.records.append(TransferStep(step, loss, trace.logits.data.copy(), sal, snap))
        if step < steps:
            attn = attn - lr * dA
    return run


# ---------------------------------------------------------------- pixel rewriting

@dataclass
class Prediction:
    label: int
    probability: float
    logit: float

    def to_dict(self):
        return {"class": self.label, "probability": self.probability, "logit": self.logit}


def top1(logits) -> Prediction:
    z = np.asarray(logits, dtype=np.float64)
    k = int(np.argmax(z))
    return Prediction(k, float(softmax(z)[k]), float(z[k]))


@dataclass
class RewriteStep:
    step: int
    loss: float
    logits: np.ndarray
    argmax: int


@dataclass
class RewriteRun:
    step_size: float
    max_steps: int
    eps: Optional[float]
    clamp: Optional[tuple]
    loss: str
    original: Prediction
    updated: Prediction
    linf: float
    l2: float
    flipped: bool
    image: ImageTensor
    records: List[RewriteStep] = field(default_factory=list)

    @property
    def steps_taken(self) -> int:
        return len(self.records)

    def report(self) -> dict:
        return {
            "loss": self.loss, "step_size": self.step_size, "max_steps": self.max_steps,
            "eps": self.eps, "steps_taken": self.steps_taken, "flipped": self.flipped,
            "original": self.original.to_dict(), "updated": self.updated.to_dict(),
            "linf": self.linf, "l2": self.l2,
            "records": [{"step": r.step, "loss": r.loss, "argmax": r.argmax,
                         "logits": r.logits.tolist()} for r in self.records],
        }


def rewrite_image(w: ModelWeights, image, spec: LossSpec, step_size: float = 1.0,
                  max_steps: int = 500, eps: Optional[float] = None, stop_when: str = "argmax_flip",
                  clamp=None) -> RewriteRun:
    """Descend ``spec`` in pixel space with raw gradient steps.

    ``x <- clip(proj_eps(x - step_size * dloss/dx))``. ``clamp`` is a
    ``(low, high)`` pair of scalars or per-channel arrays in model space;
    ``None`` leaves pixels unclamped. Each record holds the state after
    that step; not flipping is a reported outcome, not an error.
    """
    if stop_when not in ("argmax_flip", "steps"):
        raise ValueError("stop_when must be 'argmax_flip' or 'steps'")
    if step_size < 0:
        raise ValueError("step_size must be non-negative")
    image = as_image(image)
    x0 = image.data
    z0 = forward(w, image).logits.data.copy()
    orig = top1(z0)
    lo = hi = None
    if clamp is not None:
        lo, hi = (np.asarray(c, dtype=np.float64) for c in clamp)
    x = x0.copy()
    records: List[RewriteStep] = []
    z = z0
    if step_size > 0:
        for step in range(1, max_steps + 1):
            trace, _, grads = traced_gradients(w, x, spec, watch_image=True)
            x = x - step_size * grads[trace.image.id]
            if eps is not None:
                x = np.clip(x, x0 - eps, x0 + eps)
            if lo is not None:
                x = np.clip(x, lo, hi)
            out = forward(w, x).logits
            z = out.data.copy()
            records.append(RewriteStep(step, loss_tensor(out, spec).item(), z, int(np.argmax(z))))
            if stop_when == "argmax_flip" and records[-1].argmax != orig.label:
                break
    delta = x - x0
    upd = top1(z)
    return RewriteRun(
        step_size=step_size, max_steps=max_steps, eps=eps,
        clamp=None if lo is None else (lo.tolist(), hi.tolist()), loss=str(spec),
        original=orig, updated=upd, linf=float(np.max(np.abs(delta))),
        l2=float(np.sqrt(np.sum(delta * delta))), flipped=upd.label != orig.label,
        image=image.copy(x), records=records)


# ---------------------------------------------------------------- perturbation

@dataclass
class PerturbCurve:
    fractions: np.ndarray
    values: np.ndarray
    direction: str
    order: np.ndarray
    provenance: str

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.fractions) != len(self.values):
            raise ValueError("fractions and values differ in length")
        if np.any(np.diff(self.fractions) <= 0):
            raise ValueError("fractions must be strictly increasing")


def masking_order(scores, direction: str) -> np.ndarray:
    """Token order for masking; ties resolved toward the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if direction == "positive":
        return np.lexsort((idx, -scores))
    if direction == "negative":
        return np.lexsort((idx, scores))
    raise ValueError("direction must be 'positive' or 'negative'")


def mask_patches(image: np.ndarray, tokens: Sequence[int], patch: int, value: float = 0.0) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    g = out.shape[1] // patch
    for t in tokens:
        r, c = divmod(int(t), g)
        out[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = value
    return out


def perturbation_curve(w: ModelWeights, image, s: Optional[SaliencyMap], direction: str = "positive",
                       K: Optional[int] = None, target: int = 0, order=None) -> PerturbCurve:
    """Target-class probability as tokens are replaced by the mean value (0).

    Tokens are masked by descending score (``positive``) or ascending
    (``negative``); an explicit ``order`` overrides the saliency. After
    step ``i`` the first ``floor(i * N / K)`` tokens of the order are
    masked, so step ``K`` masks everything.
    """
    cfg = w.config
    N = cfg.num_patches
    K = N if K is None else int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    if order is None:
        if s is None or s.scores.size != N:
            raise ValueError(f"saliency must have {N} scores")
        order = masking_order(s.values, direction)
        prov = f"saliency-{'descending' if direction == 'positive' else 'ascending'}"
    else:
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(N)):
            raise ValueError("order must be a permutation of token indices")
        prov = "explicit"
    base = as_image(image).data
    values = []
    for i in range(K + 1):
        n = (i * N) // K
        x = mask_patches(base, order[:n], cfg.patch_size)
        values.append(softmax(forward(w, x).logits.data)[target])
    return PerturbCurve(np.arange(K + 1) / K, np.array(values), direction, order, prov)


def auc(curve: PerturbCurve) -> float:
    """Trapezoidal area over the masked fraction."""
    f, v = curve.fractions, curve.values
    return float(np.sum((f[1:] - f[:-1]) * (v[1:] + v[:-1]) * 0.5))


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchConfig:
    scheme: str
    loss: str = "single:label"

    def spec_for(self, label: int) -> LossSpec:
        return LossSpec.parse(self.loss.replace("label", str(label)))

    @property
    def name(self) -> str:
        return f"{self.scheme}/{self.loss}"

    @classmethod
    def parse(cls, text: str) -> "BenchConfig":
        scheme, _, loss = text.partition("/")
        CorrectionScheme.parse(scheme)
        return cls(scheme.lower(), loss or "single:label")


IMAGE_EXTS = (".png", ".ppm", ".pnm")


class EmptyDataset(ValueError):
    pass


def list_dataset(dataset_dir) -> List[tuple]:
    """``(path, label)`` for every image in a directory-per-class layout.

    Class directories named by an integer use that integer as the label;
    otherwise labels follow the sorted directory order.
    """
    if not os.path.isdir(dataset_dir):
        raise EmptyDataset(f"{dataset_dir} is not a directory")
    classes = sorted(d for d in os.listdir(dataset_dir)
                     if os.path.isdir(os.path.join(dataset_dir, d)))
    numeric = all(c.isdigit() for c in classes)
    items = []
    for rank, c in enumerate(classes):
        label = int(c) if numeric else rank
        folder = os.path.join(dataset_dir, c)
        for f in sorted(os.listdir(folder)):
            if f.lower().endswith(IMAGE_EXTS):
                items.append((os.path.join(folder, f), label))
    if not items:
        raise EmptyDataset(f"no images under {dataset_dir}")
    return items


def evaluate_image(w: ModelWeights, image: ImageTensor, label: int, cfg: BenchConfig, K=None) -> dict:
    spec = cfg.spec_for(label)
    sal = interpret(w, image, spec, cfg.scheme)
    pos = auc(perturbation_curve(w, image, sal, "positive", K, label))
    neg = auc(perturbation_curve(w, image, sal, "negative", K, label))
    return {"scheme": cfg.scheme, "loss": str(spec), "pos_auc": pos, "neg_auc": neg}


def perturb_benchmark(w: ModelWeights, dataset_dir, configs: Sequence, guide=None, layout=None,
                      K=None, mean=None, std=None, seed: int = 0) -> dict:
    """Mean positive/negative AUC per config over a directory-per-class dataset.

    ``guide`` (model-space image) is composited next to every image first
    when given. Unreadable images are skipped and listed in the report.
    """
    from .guidance import CompositeLayout, composite_guide
    from .imaging import CorruptImageError, ImageFormatError, IMAGENET_HALF, decode_image, preprocess

    configs = [c if isinstance(c, BenchConfig) else BenchConfig.parse(c) for c in configs]
    if not configs:
        raise ValueError("at least one config is required")
    mean = IMAGENET_HALF if mean is None else mean
    std = IMAGENET_HALF if std is None else std
    items = list_dataset(dataset_dir)
    rows, skipped = [], []
    for path, label in items:
        try:
            raw = decode_image(path)
        except (OSError, ImageFormatError, CorruptImageError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append({"path": path, "error": str(exc)})
            continue
        img = preprocess(raw, w.config, mean, std, source=path)
        if guide is not None:
            img = composite_guide(img, guide, layout or CompositeLayout(), w.config).image
        for cfg in configs:
            row = {"path": path, "label": label}
            row.update(evaluate_image(w, img, label, cfg, K))
            row["config"] = cfg.name
            rows.append(row)
    if not rows:
        raise EmptyDataset(f"no readable images under {dataset_dir}")
    means = {}
    for cfg in configs:
        sel = [r for r in rows if r["config"] == cfg.name]
        means[cfg.name] = {"pos_auc": float(np.mean([r["pos_auc"] for r in sel])),
                           "neg_auc": float(np.mean([r["neg_auc"] for r in sel])),
                           "images": len(sel)}
    return {
        "means": means,
        "configs": [{"scheme": c.scheme, "loss": c.loss} for c in configs],
        "guide": guide is not None,
        "K": K,
        "seed": seed,
        "engine_version": __version__,
        "rows": rows,
        "skipped": skipped,
    }


CSV_FIELDS = ("path", "label", "scheme", "loss", "pos_auc", "neg_auc")


def write_benchmark(report: dict, csv_path=None, json_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore",
                                lineterminator="\n")
            wr.writeheader()
            for r in report["rows"]:
                wr.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
