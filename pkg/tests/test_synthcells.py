import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from dorl import synthcells
from dorl.errors import ConfigError, DataError, ParseError
from dorl.synthcells import (DomainSpec, default_classes, default_domains, gen_domain,
                             grayscale_histogram, histogram_mean, load_dataset, luminance,
                             resize_dataset, save_dataset)


@pytest.fixture(scope="module")
def small():
    return synthcells.gen_benchmark(n_domains=3, n_classes=8, n_per_class=2, seed=11)


def test_shapes_and_ids(small):
    d = small[0]
    assert d.images.shape == (16, 224, 224, 3) and d.images.dtype == np.uint8
    assert d.masks.shape == (16, 224, 224) and d.has_mask.all()
    assert len(set(d.sample_ids)) == 16
    assert sorted(set(d.labels.tolist())) == list(range(8))


def test_geometry_is_domain_independent(small):
    for other in small[1:]:
        np.testing.assert_array_equal(small[0].masks, other.masks)
        assert not np.array_equal(small[0].images, other.images)


def test_deterministic():
    classes = default_classes(3)
    a = gen_domain(default_domains(2)[1], classes, 2, seed=4, size=64)
    b = gen_domain(default_domains(2)[1], classes, 2, seed=4, size=64)
    np.testing.assert_array_equal(a.images, b.images)
    c = gen_domain(default_domains(2)[1], classes, 2, seed=5, size=64)
    assert not np.array_equal(a.images, c.images)


def test_artifacts_never_touch_cells(small):
    for d in small:
        assert not np.logical_and(d.artifact_masks, d.masks).any()
    assert any(d.artifact_masks.any() for d in small)


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_artifacts_disjoint_for_any_domain(seed, bar, smudge, vig, rbc):
    dom = DomainSpec("x", p_scale_bar=bar, p_smudge=smudge, p_vignette=vig, p_rbc=rbc)
    for cls in default_classes(8)[::3]:
        _, cell, art = synthcells.render_sample(cls, dom, seed, 0, size=48)
        assert not (cell & art).any()


def test_default_domains_shift_gray_levels(small):
    means = [histogram_mean(grayscale_histogram(d)) for d in small]
    assert abs(means[0] - means[1]) > 5


def test_histogram_counts_every_pixel(small):
    h = grayscale_histogram(small[0], bins=32)
    assert h.sum() == 16 * 224 * 224 and len(h) == 32
    assert histogram_mean(np.eye(256, dtype=np.int64)[100]) == 100.5


def test_luminance_weights():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    np.testing.assert_allclose(luminance(px), [[0.299 * 255, 0.587 * 255, 0.114 * 255]])
    np.testing.assert_allclose(luminance(px / 255.0), luminance(px))


def test_resize_keeps_contract(small):
    for size in (56, 50):
        r = resize_dataset(small[2], size)
        assert r.images.shape == (16, size, size, 3)
        assert not (r.masks & r.artifact_masks).any()
        assert r.meta["resized_from"] == [224, 224]
        assert abs(r.masks.mean() - small[2].masks.mean()) < 0.02
    assert resize_dataset(small[0], 224) is small[0]


def test_save_load_round_trip(small, tmp_path):
    d = small[1].subset([0, 3, 5])
    d.has_mask[1] = False
    save_dataset(d, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.images, d.images)
    np.testing.assert_array_equal(back.masks[[0, 2]], d.masks[[0, 2]])
    assert back.has_mask.tolist() == [True, False, True]
    assert back.sample_ids == d.sample_ids and back.class_names == d.class_names
    assert back.domain == d.domain
    small_back = load_dataset(tmp_path / "ds", size=32)
    assert small_back.images.shape == (3, 32, 32, 3)


def _write_manifest(path, records, classes=("a", "b")):
    (path / "images").mkdir(parents=True)
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(path / "images" / "x.png")
    (path / "dataset.json").write_text(json.dumps({"version": 1, "classes": list(classes)}))
    (path / "manifest.jsonl").write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_manifest_errors_name_the_line(tmp_path):
    good = {"id": "1", "label": 0, "image": "images/x.png"}
    _write_manifest(tmp_path / "a", [good, {"id": "2", "label": "zebra", "image": "images/x.png"}])
    with pytest.raises(ParseError, match=":2: unknown label 'zebra'"):
        load_dataset(tmp_path / "a")
    _write_manifest(tmp_path / "b", [good, {"id": "2", "label": 1, "image": "images/nope.png"}])
    with pytest.raises(ParseError, match=":2: image file"):
        load_dataset(tmp_path / "b")
    _write_manifest(tmp_path / "c", [{"id": "1", "image": "images/x.png"}])
    with pytest.raises(ParseError, match="missing field 'label'"):
        load_dataset(tmp_path / "c")


def test_folder_layout(tmp_path):
    for c in ("b_cls", "a_cls"):
        (tmp_path / c).mkdir()
        for i in range(2):
            Image.fromarray(np.full((10, 10, 3), i * 50, np.uint8)).save(tmp_path / c / f"{i}.png")
    d = load_dataset(tmp_path, size=8)
    assert d.class_names == ["a_cls", "b_cls"] and not d.has_mask.any()
    assert d.images.shape == (4, 8, 8, 3)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")
    (tmp_path / "empty" / "cls").mkdir(parents=True)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "empty")


def test_validation():
    with pytest.raises(ConfigError):
        gen_domain(DomainSpec("x", p_rbc=1.5), default_classes(2), 1, 0, 32)
    with pytest.raises(ConfigError):
        default_classes(1)
    with pytest.raises(ConfigError):
        default_domains(4)
    with pytest.raises(ConfigError):
        gen_domain(default_domains(1)[0], default_classes(2), 0, 0, 32)
