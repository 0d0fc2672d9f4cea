import numpy as np
import pytest

from attnguide.autodiff import ShapeError, Tape
from attnguide.gradients import LossSpec, attention_gradients
from attnguide.synthetic import PLANT_CONFIG, band_regions, planted
from attnguide.vit import (ConfigError, ImageTensor, ModelConfig, ModelWeights, RegionError, forward,
                           patchify, plant_model, random_weights, weight_shapes)


def test_config_derived_sizes(tiny_cfg):
    assert tiny_cfg.grid == 4
    assert tiny_cfg.num_patches == 16
    assert tiny_cfg.tokens == 17
    assert tiny_cfg.patch_dim == 48
    assert tiny_cfg.head_dim == 8
    assert tiny_cfg.mlp_dim == 32


@pytest.mark.parametrize("kw", [dict(image_size=15), dict(num_heads=3), dict(num_layers=0),
                                dict(num_classes=1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_roundtrip(tiny_cfg):
    assert ModelConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg


def test_weights_validate_shape(tiny_weights):
    bad = dict(tiny_weights.params)
    bad["head.bias"] = np.zeros(3)
    with pytest.raises(ConfigError):
        ModelWeights(tiny_weights.config, bad)
    del bad["head.bias"]
    with pytest.raises(ConfigError):
        ModelWeights(tiny_weights.config, bad)


def test_patchify_order():
    cfg = ModelConfig(image_size=4, patch_size=2, embed_dim=4, num_heads=1, channels=1)
    img = np.arange(16.0).reshape(4, 4, 1)
    p = patchify(img, cfg)
    # row-major grid, each patch raveled row by row
    assert np.array_equal(p, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_patchify_channel_order():
    cfg = ModelConfig(image_size=2, patch_size=2, embed_dim=4, num_heads=1, channels=2)
    img = np.arange(8.0).reshape(2, 2, 2)
    assert np.array_equal(patchify(img, cfg)[0], np.arange(8.0))


def test_trace_shapes(tiny_weights, rng):
    tr = forward(tiny_weights, rng.standard_normal((16, 16, 3)))
    assert tr.tokens == 17
    assert tr.logits.shape == (10,)
    assert tr.attention_stack.shape == (2, 2, 17, 17)


def test_attention_rows_sum_to_one(tiny_weights, rng):
    a = forward(tiny_weights, rng.standard_normal((16, 16, 3))).attention_stack
    assert np.all(a >= 0)
    assert np.allclose(a.sum(-1), 1.0, atol=1e-6)


def test_wrong_image_shape(tiny_weights):
    with pytest.raises(ShapeError):
        forward(tiny_weights, np.zeros((8, 8, 3)))


def test_patch_permutation_symmetry(tiny_weights, rng):
    cfg = tiny_weights.config
    img = rng.standard_normal((16, 16, 3))
    i, j = 2, 9
    p = patchify(img, cfg)
    p[[i, j]] = p[[j, i]]
    g, s = cfg.grid, cfg.patch_size
    swapped = p.reshape(g, g, s, s, 3).transpose(0, 2, 1, 3, 4).reshape(16, 16, 3)
    pos = tiny_weights["pos_embed"].copy()
    pos[[1 + i, 1 + j]] = pos[[1 + j, 1 + i]]
    w2 = tiny_weights.with_params({"pos_embed": pos})
    assert np.allclose(forward(tiny_weights, img).logits.data, forward(w2, swapped).logits.data,
                       atol=1e-12)


def test_captured_maps_are_differentiated(tiny_weights, rng):
    _, gs = attention_gradients(tiny_weights, rng.standard_normal((16, 16, 3)), LossSpec.single(0))
    assert any(np.abs(gs[l]).max() > 0 for l in range(len(gs)))


def test_override_replaces_softmax(tiny_weights, rng):
    img = rng.standard_normal((16, 16, 3))
    tr = forward(tiny_weights, img)
    over = {i: a.data.copy() for i, a in enumerate(tr.attention)}
    tr2 = forward(tiny_weights, img, Tape(), attention_override=over)
    assert np.array_equal(tr.logits.data, tr2.logits.data)
    with pytest.raises(ShapeError):
        forward(tiny_weights, img, attention_override={0: np.ones((2, 3, 3))})


def test_random_weights_deterministic(tiny_cfg):
    a, b = random_weights(tiny_cfg, 3), random_weights(tiny_cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in weight_shapes(tiny_cfg))


# ---------------------------------------------------------------- planted model

def _halves(left, right):
    x = np.zeros((16, 16, 3))
    x[:, :8] = left
    x[:, 8:] = right
    return x


def test_planted_bright_left_wins(planted_w):
    assert int(np.argmax(forward(planted_w, _halves(0.75, 0.0)).logits.data)) == 0
    assert int(np.argmax(forward(planted_w, _halves(0.0, 0.75)).logits.data)) == 1


@pytest.mark.parametrize("seed", range(5))
def test_planted_brightening_raises_logit(seed, rng):
    w = planted(seed)
    x = np.clip(0.2 * rng.standard_normal((16, 16, 3)), -0.9, 0.9)
    for c, cols in ((0, slice(0, 8)), (1, slice(8, 16))):
        y = x.copy()
        y[:, cols] += 0.1
        assert forward(w, y).logits.data[c] > forward(w, x).logits.data[c]


def test_planted_logit_monotone_over_pixel_range():
    # strictly increasing in region brightness across the whole model-space range
    w = planted(1)
    for other in (-1.0, 0.0, 1.0):
        z = [forward(w, _halves(lv, other)).logits.data[0] for lv in np.linspace(-1, 1, 21)]
        assert np.all(np.diff(z) > 0)


def test_planted_zero_image_ties(planted_w):
    z = forward(planted_w, np.zeros((16, 16, 3))).logits.data
    assert abs(z[0] - z[1]) <= 1e-6


def test_planted_deterministic():
    a, b = planted(4), planted(4)
    assert all(np.array_equal(a[k], b[k]) for k in a.params)
    assert not np.array_equal(planted(5)["block0.attn.wq"], a["block0.attn.wq"])


@pytest.mark.parametrize("regions", [
    {0: [0, 1], 1: [1, 2]},        # overlap
    {0: [], 1: [3]},               # empty
    {0: [0], 1: [16]},             # off grid
])
def test_plant_region_errors(regions):
    with pytest.raises(RegionError):
        plant_model(PLANT_CONFIG, regions)


def test_plant_needs_room():
    cfg = ModelConfig(embed_dim=8, num_heads=2, num_classes=2)
    with pytest.raises(ConfigError):
        plant_model(cfg, band_regions(cfg))


def test_image_tensor_rank():
    with pytest.raises(ConfigError):
        ImageTensor(np.zeros((4, 4)))
