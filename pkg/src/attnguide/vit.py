"""A small pre-LN Vision Transformer built on :mod:`attnguide.autodiff`.

Weights live in a flat ``name -> ndarray`` mapping (see ``docs/FORMATS.md``
for the naming scheme). The forward pass captures every post-softmax
attention map and watches it on the tape so gradients with respect to the
maps can be read back after :func:`autodiff.backward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 16
    num_layers: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 10
    channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError("image_size must be a positive multiple of patch_size")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def weight_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Expected name -> shape for every tensor of a model with config ``cfg``."""
    D, M = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, D),
        "patch_embed.bias": (D,),
        "cls_token": (D,),
        "pos_embed": (cfg.tokens, D),
    }
    for i in range(cfg.num_layers):
        p = f"block{i}."
        shapes.update({
            p + "ln1.gamma": (D,), p + "ln1.beta": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.gamma": (D,), p + "ln2.beta": (D,),
            p + "mlp.w1": (D, M), p + "mlp.b1": (M,),
            p + "mlp.w2": (M, D), p + "mlp.b2": (D,),
        })
    shapes.update({
        "norm.gamma": (D,), "norm.beta": (D,),
        "head.weight": (D, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


@dataclass
class ModelWeights:
    """All parameters of a model plus its config. Treat as immutable."""

    config: ModelConfig
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = weight_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing tensor {name!r}")
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"tensor {name!r} has non-finite values")
            self.params[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def replace(self, **updates) -> "ModelWeights":
        params = dict(self.params)
        params.update({k.replace("__", "."): v for k, v in updates.items()})
        return ModelWeights(self.config, params)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "ModelWeights":
        params = dict(self.params)
        params.update(updates)
        return ModelWeights(self.config, params)


@dataclass
class ImageTensor:
    """H x W x C image in model space, with where it came from."""

    data: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError(f"image must be H x W x C, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self, data: Optional[np.ndarray] = None) -> "ImageTensor":
        return ImageTensor(self.data.copy() if data is None else data, dict(self.provenance))


def as_image(x) -> ImageTensor:
    return x if isinstance(x, ImageTensor) else ImageTensor(x)


@dataclass
class ForwardTrace:
    logits: Tensor
    attention: List[Tensor]          # per layer, H x T x T, watched
    tape: Optional[Tape]
    tokens: int
    image: Tensor

    @property
    def attention_stack(self) -> np.ndarray:
        """L x H x T x T array of the captured maps."""
        return np.stack([a.data for a in self.attention])


def _check_image(image: ImageTensor, cfg: ModelConfig):
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if image.data.shape != want:
        raise ad.ShapeError("image", image.data.shape, want)


def patchify(image, cfg: ModelConfig):
    """Split into non-overlapping patches, row-major over the grid.

    Each patch is flattened in (row, col, channel) order, i.e. the patch's
    own H x W x C block raveled C-contiguously. Accepts an ``ImageTensor``,
    an ndarray or a taped ``Tensor``; returns the same kind (ndarray for
    the first two).
    """
    g, p, c = cfg.grid, cfg.patch_size, cfg.channels
    if isinstance(image, Tensor):
        if image.shape != (cfg.image_size, cfg.image_size, c):
            raise ad.ShapeError("patchify", image.shape, (cfg.image_size, cfg.image_size, c))
        x = image.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4)
        return x.reshape(g * g, p * p * c)
    image = as_image(image)
    _check_image(image, cfg)
    x = image.data.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, p * p * c).copy()


def _linear(x: Tensor, w: np.ndarray, b: np.ndarray) -> Tensor:
    return x @ Tensor(w) + Tensor(b)


def _attention_block(w: ModelWeights, i: int, h: Tensor, override: Optional[np.ndarray],
                     tape: Optional[Tape]):
    cfg = w.config
    T, D, H, dh = h.shape[0], cfg.embed_dim, cfg.num_heads, cfg.head_dim
    p = f"block{i}.attn."

    def heads(t):
        return t.reshape(T, H, dh).transpose(1, 0, 2)

    v = heads(_linear(h, w[p + "wv"], w[p + "bv"]))
    if override is None:
        q = heads(_linear(h, w[p + "wq"], w[p + "bq"]))
        k = heads(_linear(h, w[p + "wk"], w[p + "bk"]))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax_lastdim(scores)
    else:
        if override.shape != (H, T, T):
            raise ad.ShapeError("attention override", override.shape, (H, T, T))
        attn = Tensor(override)
    if tape is not None:
        tape.watch(attn)
    out = (attn @ v).transpose(1, 0, 2).reshape(T, D)
    return _linear(out, w[p + "wo"], w[p + "bo"]), attn


def forward(w: ModelWeights, image, tape: Optional[Tape] = None, *,
            attention_override: Optional[Mapping[int, np.ndarray]] = None,
            watch_image: bool = False) -> ForwardTrace:
    """Run the model, capturing every layer's attention map.

    ``attention_override`` maps layer index to an H x T x T array used in
    place of that layer's softmax output (a free leaf, detached from Q/K).
    With a ``tape`` every captured map is watched, and so is the input
    image when ``watch_image`` is set.
    """
    cfg = w.config
    image = as_image(image)
    _check_image(image, cfg)
    override = attention_override or {}
    eps = cfg.ln_eps

    x = Tensor(image.data)
    if tape is not None and watch_image:
        tape.watch(x)
    patches = patchify(x, cfg)
    emb = _linear(patches, w["patch_embed.weight"], w["patch_embed.bias"])
    cls = Tensor(w["cls_token"].reshape(1, -1))
    h = ad.concat([cls, emb], axis=0) + Tensor(w["pos_embed"])

    maps = []
    for i in range(cfg.num_layers):
        p = f"block{i}."
        a_out, attn = _attention_block(
            w, i, ad.layernorm(h, w[p + "ln1.gamma"], w[p + "ln1.beta"], eps),
            override.get(i), tape)
        maps.append(attn)
        h = h + a_out
        z = ad.layernorm(h, w[p + "ln2.gamma"], w[p + "ln2.beta"], eps)
        z = ad.gelu(_linear(z, w[p + "mlp.w1"], w[p + "mlp.b1"]))
        h = h + _linear(z, w[p + "mlp.w2"], w[p + "mlp.b2"])

    cls_out = ad.layernorm(h[0:1], w["norm.gamma"], w["norm.beta"], eps)
    logits = _linear(cls_out, w["head.weight"], w["head.bias"]).reshape(cfg.num_classes)
    return ForwardTrace(logits=logits, attention=maps, tape=tape, tokens=cfg.tokens, image=x)


def logits(w: ModelWeights, image) -> np.ndarray:
    return forward(w, image).logits.data.copy()


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# ---------------------------------------------------------------- initialisation

def _f32(a: np.ndarray) -> np.ndarray:
    # keep values float32-representable so the weight container round-trips exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def random_weights(cfg: ModelConfig, seed: int = 0, scale: float = 0.3) -> ModelWeights:
    """Generic random weights (no planted behaviour) for gradient checks."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif len(shape) == 2 and name != "pos_embed":
            arr = rng.standard_normal(shape) * (scale * 3.0 / math.sqrt(shape[0]))
        else:
            arr = rng.standard_normal(shape) * scale
        params[name] = _f32(arr)
    return ModelWeights(cfg, params)


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class PlantSettings:
    """Knobs of :func:`plant_model`; defaults were calibrated on 4x4 grids.

    ``anchor`` is the magnitude of the constant +/- coordinates every token
    carries (keeps per-token LayerNorms near-affine), ``cls_anchor`` the
    same for the cls token, whose final LayerNorm is where class evidence
    competes. ``gain`` scales the region-intensity feature, ``head_scale``
    the classifier, ``noise`` every weight that carries no planted signal.
    """

    anchor: float = 8.0
    cls_anchor: float = 0.1
    gain: float = 4.0
    offset: float = 4.0
    gate: float = 12.0
    head_scale: float = 4.0
    head_bias: float = 10.0
    prior: float = 3.0
    carry: float = 1.2
    evidence: float = 3.0
    qk_noise: float = 0.3
    noise: float = 0.05


def plant_model(cfg: ModelConfig, class_regions: Mapping[int, Iterable[int]], seed: int = 0,
                settings: Optional[PlantSettings] = None) -> ModelWeights:
    """Build weights whose logit for class ``c`` tracks the brightness of its region.

    ``class_regions`` maps a class index to the patch indices (row-major,
    0-based, cls excluded) it reads. Layout of the residual stream:

    * coords 0/1: +/- anchors, 2: patch mean intensity, 3: zero reference,
    * one membership flag per planted class (set by the positional embedding),
    * one evidence slot per planted class, filled by block 0's MLP with
      ``gelu(g*m + o) - gelu(o)`` on member patches and ~0 elsewhere,
    * the rest is junk space that only noise writes to.

    The last block's attention copies evidence slots into the cls token
    (near-uniform attention from small random Q/K), and the head reads the
    cls evidence slots after the final LayerNorm. The cls token starts with
    a per-class ``prior`` in its slots and the last block also carries the
    anchors through (``carry``); both feed the final LayerNorm, so a lone
    bright region competes with the shared prior rather than winning by
    default. Anything that carries no
    planted signal is small seeded noise confined to the junk space, so
    class logits stay exactly tied on an all-background image when regions
    have equal size.
    """
    s = settings or PlantSettings()
    regions = {int(c): sorted(set(int(i) for i in idx)) for c, idx in class_regions.items()}
    K = len(regions)
    D, M, T, N = cfg.embed_dim, cfg.mlp_dim, cfg.tokens, cfg.num_patches
    if not regions:
        raise RegionError("need at least one class region")
    seen = set()
    for c, idx in regions.items():
        if not 0 <= c < cfg.num_classes:
            raise RegionError(f"class {c} out of range")
        if not idx:
            raise RegionError(f"region for class {c} is empty")
        if idx[0] < 0 or idx[-1] >= N:
            raise RegionError(f"region for class {c} leaves the {cfg.grid}x{cfg.grid} grid")
        if seen & set(idx):
            raise RegionError(f"region for class {c} overlaps another region")
        seen |= set(idx)
    junk0 = 4 + 2 * K
    if D < junk0 + 2:
        raise ConfigError(f"embed_dim must be >= {junk0 + 2} to plant {K} classes")
    if M < 2 * K:
        raise ConfigError(f"mlp hidden size must be >= {2 * K}")
    if cfg.num_layers < 2:
        raise ConfigError("plant_model needs at least two layers")

    rng = np.random.default_rng(seed)
    classes = sorted(regions)
    flag = {c: 4 + k for k, c in enumerate(classes)}
    slot = {c: 4 + K + k for k, c in enumerate(classes)}
    junk = np.arange(junk0, D)
    nj = len(junk)

    def junk_matrix(rows):
        m = np.zeros((rows, D))
        m[:, junk] = s.noise * rng.standard_normal((rows, nj))
        return m

    P = {}
    pe = np.zeros((cfg.patch_dim, D))
    pe[:, 2] = 1.0 / cfg.patch_dim
    pe[:, junk] = s.noise * rng.standard_normal((cfg.patch_dim, nj))
    P["patch_embed.weight"] = pe
    P["patch_embed.bias"] = np.zeros(D)

    cls = np.zeros(D)
    cls[0], cls[1] = s.cls_anchor, -s.cls_anchor
    cls[junk] = s.cls_anchor * rng.standard_normal(nj)
    for c in classes:
        cls[slot[c]] = s.prior
    P["cls_token"] = cls
    pos = np.zeros((T, D))
    pos[1:, 0], pos[1:, 1] = s.anchor, -s.anchor
    pos[1:, junk] = s.noise * rng.standard_normal((N, nj))
    for c, idx in regions.items():
        pos[1 + np.asarray(idx), flag[c]] = 1.0
    P["pos_embed"] = pos

    last = cfg.num_layers - 1
    for i in range(cfg.num_layers):
        p = f"block{i}."
        P[p + "ln1.gamma"] = np.ones(D)
        P[p + "ln1.beta"] = np.zeros(D)
        P[p + "ln2.gamma"] = np.ones(D)
        P[p + "ln2.beta"] = np.zeros(D)
        for nm in ("wq", "wk"):
            P[p + f"attn.{nm}"] = s.qk_noise * rng.standard_normal((D, D)) / math.sqrt(D)
            P[p + f"attn.b{nm[1]}"] = np.zeros(D)
        wv = junk_matrix(D)
        if i == last:
            for c in classes:
                wv[slot[c], slot[c]] = s.evidence
                wv[3, slot[c]] = -s.evidence
            wv[0, 0] = wv[1, 1] = s.carry
        P[p + "attn.wv"] = wv
        P[p + "attn.bv"] = np.zeros(D)
        wo = junk_matrix(D)
        if i == last:
            for c in classes:
                wo[slot[c], slot[c]] = 1.0
            wo[0, 0] = wo[1, 1] = 1.0
        P[p + "attn.wo"] = wo
        P[p + "attn.bo"] = np.zeros(D)

        w1 = np.zeros((D, M))
        b1 = np.zeros(M)
        w2 = np.zeros((M, D))
        if i == 0:
            # LN scales token coords by ~1/sigma with sigma ~ anchor*sqrt(2/D);
            # undo that so gain/offset/gate act in embedding units.
            unit = s.anchor * math.sqrt(2.0 / D)
            for k, c in enumerate(classes):
                hi, lo = 2 * k, 2 * k + 1
                for col in (hi, lo):
                    w1[flag[c], col] = s.gate * unit
                    w1[3, col] = -s.gate * unit
                    b1[col] = s.offset - s.gate
                w1[2, hi] = s.gain * unit
                w1[3, hi] -= s.gain * unit
                w2[hi, slot[c]] = 1.0
                w2[lo, slot[c]] = -1.0
        P[p + "mlp.w1"] = w1
        P[p + "mlp.b1"] = b1
        P[p + "mlp.w2"] = w2
        P[p + "mlp.b2"] = np.zeros(D)

    P["norm.gamma"] = np.ones(D)
    P["norm.beta"] = np.zeros(D)
    head = np.zeros((D, cfg.num_classes))
    for c in classes:
        head[slot[c], c] = s.head_scale
    P["head.weight"] = head
    P["head.bias"] = np.full(cfg.num_classes, s.head_bias)
    return ModelWeights(cfg, {k: _f32(v) for k, v in P.items()})

