import numpy as np
import pytest
from hypothesis import given, strategies as st

from dorl import lora_seg
from dorl.core import Tensor
from dorl.errors import ConfigError, DataError, ShapeError
from dorl.lora_seg import (FILL_VALUE, annotated_count, backbone_embedding, dice, init_lora,
                           init_seg_model, lora_forward, postprocess, seg_loss, segment, train_seg)
from dorl.vit import PROFILES

TINY = PROFILES["tiny"]


@given(st.integers(1, 3), st.integers(12, 24), st.integers(12, 24), st.integers(0, 99))
def test_lora_forward_equals_merged_weight(r, c_in, c_out, seed):
    g = np.random.default_rng(seed)
    ad = init_lora(r, c_in, c_out, seed, scale=0.7)
    ad.B.data = g.standard_normal(ad.B.shape)
    W = g.standard_normal((c_out, c_in))
    x = g.standard_normal((5, c_in))
    merged = x @ (W + 0.7 * ad.B.data @ ad.A.data).T
    np.testing.assert_allclose(lora_forward(x, W, ad), merged, rtol=1e-10, atol=1e-10)


def test_fresh_adapter_is_exact_noop(rng):
    ad = init_lora(2, 16, 16, 0)
    assert not ad.B.data.any()
    W = rng.standard_normal((16, 16))
    x = rng.standard_normal((4, 16))
    assert lora_forward(x, W, ad).tobytes() == (x @ W.T).tobytes()


def test_rank_limits():
    with pytest.raises(ConfigError):
        init_lora(0, 16, 16, 0)
    with pytest.raises(ConfigError):
        init_lora(5, 16, 16, 0)
    with pytest.raises(ShapeError):
        lora_forward(np.ones(3), np.ones((4, 4)), init_lora(1, 4, 4, 0))


def test_fresh_model_embedding_is_backbone_output(rng):
    model = init_seg_model(TINY, seed=1, rank=1)
    x = rng.uniform(size=(2, 32, 32, 3)).astype(np.float32)
    out = segment(x, model)
    assert out.embedding.tokens.data.tobytes() == backbone_embedding(x, model).tobytes()
    assert out.probs.shape == (2, 32, 32) and out.mask.dtype == bool


def test_postprocess_fills_outside_mask(rng):
    img = rng.uniform(size=(6, 6, 3))
    mask = rng.uniform(size=(6, 6)) > 0.5
    c = postprocess(img, mask)
    np.testing.assert_array_equal(c[mask], img[mask])
    assert np.all(c[~mask] == FILL_VALUE)
    with pytest.raises(ShapeError):
        postprocess(img, mask[:5])


@given(st.integers(0, 999))
def test_dice_bounds_and_identity(seed):
    g = np.random.default_rng(seed)
    a, b = g.uniform(size=(8, 8)) > 0.5, g.uniform(size=(8, 8)) > 0.5
    assert 0.0 <= dice(a, b) <= 1.0
    assert dice(a, b) == dice(b, a)
    assert dice(a, a) == 1.0


def test_dice_empty_masks():
    z = np.zeros((4, 4), bool)
    assert dice(z, z) == 1.0
    assert dice(z, ~z) == 0.0


def test_seg_loss_gradient():
    from dorl.core.gradcheck import check_function
    g = np.random.default_rng(0)
    p = g.uniform(0.1, 0.9, size=(2, 4, 4))
    y = (g.uniform(size=(2, 4, 4)) > 0.5).astype(float)
    rep = check_function(lambda t: seg_loss(t, y), [p])
    assert rep.max_rel_err <= 1e-4


def test_seg_loss_rejects_non_probabilities():
    with pytest.raises(ValueError):
        seg_loss(np.full((2, 2), 1.5), np.zeros((2, 2)))


@pytest.mark.parametrize("n,f,k", [(1200, 0.01, 12), (960, 0.01, 10), (10, 0.01, 1), (50, 1.0, 50)])
def test_annotated_count(n, f, k):
    assert annotated_count(n, f) == k


def test_train_seg_respects_freeze_and_learns(tiny_benchmark, tmp_path):
    d = tiny_benchmark[0]
    x = list(d.pixels())
    masks = list(d.masks)
    model = init_seg_model(TINY, seed=0, rank=1)
    frozen = model.frozen_snapshot()
    train_seg(x, masks, TINY, annotated_fraction=0.2, epochs=4, seed=0, rank=1, model=model)
    after = model.frozen_snapshot()
    assert all(frozen[k].tobytes() == after[k].tobytes() for k in frozen)
    assert len(model.trace) == 4 and model.trace[-1] < model.trace[0]
    lora_seg.save_seg(tmp_path / "seg.ckpt", model)
    back = lora_seg.load_seg(tmp_path / "seg.ckpt")
    np.testing.assert_array_equal(segment(d.pixels()[:3], back).probs,
                                  segment(d.pixels()[:3], model).probs)


def test_train_seg_needs_masks(tiny_benchmark):
    d = tiny_benchmark[0]
    with pytest.raises(DataError):
        train_seg(list(d.pixels()), [None] * len(d), TINY, epochs=1)


def test_segment_rejects_out_of_range():
    with pytest.raises(DataError):
        segment(np.full((1, 32, 32, 3), 2.0), init_seg_model(TINY, 0, rank=1))
