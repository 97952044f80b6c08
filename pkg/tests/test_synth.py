import numpy as np
import pytest

from sapiens_mini.errors import ConfigError, DegenerateInputError
from sapiens_mini.synth import (KEYPOINT_NAMES, Primitive, SyntheticSceneSpec, camera_rays, generate_dataset,
                                render, synth_generate)


def trace_pixel(i, j, H, W, f, center, radius):
    """Scalar ray-sphere intersection for one pixel; returns the hit point or None."""
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    d = np.array([(j - cx) / f, (i - cy) / f, 1.0])
    a = d @ d
    b = -2.0 * (d @ center)
    c = center @ center - radius * radius
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    t = (-b - np.sqrt(disc)) / (2 * a)
    return t * d


def sphere_scene(H=15, W=15, z=5.0, r=1.0, color=(0.8, 0.4, 0.2)):
    prim = Primitive(center=(0.0, 0.0, z), radii=(r, r, r), color=color, part=2)
    spec = SyntheticSceneSpec(image_size=(H, W), focal=20.0, light_dir=(0.0, 0.0, -1.0), primitives=[prim],
                              keypoints=np.array([[0.0, 0.0, z - r]]))
    return spec, prim


def test_sphere_center_pixel():
    spec, prim = sphere_scene()
    s = synth_generate(spec, np.random.default_rng(0))
    n = s.normal[:, 7, 7]
    assert np.allclose(n, [0, 0, -1], atol=1e-12)
    # light straight at the camera: shading is 1 at the center
    assert np.allclose(s.image[:, 7, 7], prim.color, atol=1e-12)
    assert np.allclose(s.pointmap[:, 7, 7], [0, 0, 4.0], atol=1e-12)
    assert s.seg[7, 7] == 2 and s.fg[7, 7]


def test_depth_matches_scalar_tracer():
    H = W = 15
    spec, prim = sphere_scene(H, W, z=4.5, r=1.2)
    s = synth_generate(spec, np.random.default_rng(0))
    for i in range(H):
        for j in range(W):
            hit = trace_pixel(i, j, H, W, 20.0, np.array([0.0, 0.0, 4.5]), 1.2)
            if hit is None:
                assert not s.fg[i, j]
                assert np.all(s.pointmap[:, i, j] == 0)
            else:
                assert s.fg[i, j]
                assert np.abs(s.pointmap[:, i, j] - hit).max() <= 1e-9
                expect_n = (hit - np.array([0, 0, 4.5])) / 1.2
                assert np.abs(s.normal[:, i, j] - expect_n).max() <= 1e-9


def test_normals_unit_and_background_zero():
    s = generate_dataset(3, seed=1)[0]
    norms = np.linalg.norm(s.normal, axis=0)
    assert np.abs(norms[s.fg] - 1).max() <= 1e-9
    assert np.all(s.normal[:, ~s.fg] == 0) and np.all(s.image[:, ~s.fg] == 0)
    assert np.all(s.seg[~s.fg] == 0)


def test_lambertian_image():
    s = generate_dataset(1, seed=4)[0]
    light = np.array(SyntheticSceneSpec().light_dir)
    light = light / np.linalg.norm(light)
    shade = np.clip(np.einsum("chw,c->hw", s.normal, light), 0, None)
    assert np.abs(s.image - s.albedo * shade).max() <= 1e-12


def test_nearest_surface_wins():
    near = Primitive((0.0, 0.0, 4.0), (0.5, 0.5, 0.5), (1.0, 0.0, 0.0), 1)
    far = Primitive((0.0, 0.0, 6.0), (2.0, 2.0, 0.5), (0.0, 1.0, 0.0), 2)
    s = render([far, near], (9, 9), 10.0, (0, 0, -1))
    assert s.seg[4, 4] == 1 and s.pointmap[2, 4, 4] == pytest.approx(3.5, abs=1e-12)
    assert s.seg[2, 2] == 2 and s.seg[0, 0] == 0


def test_keypoints_projected():
    spec, _ = sphere_scene()
    s = synth_generate(spec, np.random.default_rng(0))
    assert np.allclose(s.keypoints, [[7.0, 7.0, 2.0]])
    rand = generate_dataset(1, seed=2)[0]
    assert rand.keypoints.shape == (len(KEYPOINT_NAMES), 3)


def test_dataset_deterministic():
    a, b = generate_dataset(4, seed=9), generate_dataset(4, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.keypoints, y.keypoints)
    c = generate_dataset(4, seed=10)
    assert not np.array_equal(a[0].image, c[0].image)


def test_rays_through_pixel_centers():
    d = camera_rays(3, 5, 2.0)
    assert np.allclose(d[1, 2], [0, 0, 1])
    assert np.allclose(d[0, 0], [-1.0, -0.5, 1])


def test_errors():
    with pytest.raises(DegenerateInputError):
        render([], (4, 4), 5.0, (0, 0, -1))
    with pytest.raises(DegenerateInputError):
        synth_generate(SyntheticSceneSpec(primitives=[]), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(focal=-1.0)
    behind = Primitive((0.0, 0.0, 0.5), (1.0, 1.0, 1.0), (1, 1, 1), 1)
    with pytest.raises(ConfigError):
        synth_generate(SyntheticSceneSpec(primitives=[behind]), np.random.default_rng(0))
