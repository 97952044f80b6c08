import json

import numpy as np
import pytest
import torch

from sapiens_mini.augmentation import (ViewSpec, denormalize, make_views, normalize, resize, sample_crop_box,
                                       write_provenance)
from sapiens_mini.errors import ConfigError


def image(h=64, w=48, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=g, dtype=torch.float64)


def test_default_view_counts(rng):
    vs = make_views(image(), ViewSpec(), rng)
    assert len(vs.global_views) == 2 and len(vs.local_views) == 4
    assert [v.kind for v in vs.views] == ["global"] * 2 + ["local"] * 4
    assert all(v.image.shape == (3, 64, 48) for v in vs.global_views)
    assert all(v.image.shape == (3, 32, 32) for v in vs.local_views)


def test_identity_spec_gives_resized_copies(rng):
    spec = ViewSpec(global_scale=(1.0, 1.0), local_scale=(1.0, 1.0), flip_prob=0, color_jitter_prob=0,
                    grayscale_prob=0, blur_prob=0, solarize_prob=0)
    img = image()
    for v in make_views(img, spec, rng).views:
        assert v.box == (0, 0, 64, 48)
        expected = resize(img, v.image.shape[-2:])
        assert torch.allclose(denormalize(v.image, spec.mean, spec.std), expected, atol=1e-12)


def test_crop_area_bounds_monte_carlo():
    rng = np.random.default_rng(1)
    spec = ViewSpec()
    g_ratios, l_ratios = [], []
    for _ in range(1000):
        top, left, h, w = sample_crop_box(64, 48, spec.global_scale, 64 / 48, rng)
        assert 0 <= top and top + h <= 64 and 0 <= left and left + w <= 48
        g_ratios.append(h * w / (64 * 48))
        top, left, h, w = sample_crop_box(64, 48, spec.local_scale, 1.0, rng)
        l_ratios.append(h * w / (64 * 48))
    assert 0.5 <= min(g_ratios) and max(g_ratios) <= 1.0
    assert 0.2 <= min(l_ratios) and max(l_ratios) <= 0.7


def test_global_views_carry_no_photometric_change(rng):
    spec = ViewSpec(color_jitter_prob=1, grayscale_prob=1, blur_prob=1, solarize_prob=1)
    img = image()
    vs = make_views(img, spec, rng)
    for v in vs.global_views:
        assert v.record["photometric"] == {}
        top, left, h, w = v.box
        crop = resize(img[:, top:top + h, left:left + w], (64, 48))
        if v.record["flipped"]:
            crop = crop.flip(-1)
        assert torch.allclose(denormalize(v.image, spec.mean, spec.std), crop, atol=1e-12)
    assert all(set(v.record["photometric"]) == {"color_jitter", "grayscale", "blur", "solarize"}
               for v in vs.local_views)


def test_fixed_seed_is_bit_identical():
    img = image()
    a = make_views(img, ViewSpec(), np.random.default_rng(5))
    b = make_views(img, ViewSpec(), np.random.default_rng(5))
    for va, vb in zip(a.views, b.views):
        assert torch.equal(va.image, vb.image) and va.record == vb.record


def test_small_image_falls_back_to_resize(rng):
    vs = make_views(image(20, 16), ViewSpec(), rng)
    assert all(v.record["fallback"] is not None for v in vs.views)
    assert vs.global_views[0].image.shape == (3, 64, 48)


def test_normalize_round_trip():
    img = image()
    m, s = (0.1, 0.2, 0.3), (0.5, 0.6, 0.7)
    assert torch.allclose(denormalize(normalize(img, m, s), m, s), img, atol=1e-15)
    assert torch.allclose(normalize(img, m, s)[1], (img[1] - 0.2) / 0.6)


def test_invalid_specs(rng):
    with pytest.raises(ConfigError):
        make_views(image(), ViewSpec(num_global=1), rng)
    with pytest.raises(ConfigError):
        make_views(image(), ViewSpec(local_scale=(0.0, 0.5)), rng)


def test_provenance_jsonl(tmp_path, rng):
    vs = make_views(image(), ViewSpec(), rng)
    path = tmp_path / "prov.jsonl"
    write_provenance(path, "img0", vs, iteration=3)
    write_provenance(path, "img1", vs)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["sample"] for l in lines] == ["img0", "img1"]
    assert lines[0]["iter"] == 3 and len(lines[0]["views"]) == 6
    assert lines[0]["views"][0]["box"] == list(vs.views[0].box)
