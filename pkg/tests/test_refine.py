import numpy as np
import pytest

from tofjoint.errors import ContractViolation
from tofjoint.geometry import CameraIntrinsics, DepthMap, NormalMap, normals_from_depth
from tofjoint.refine import RefineConfig, estimate_error_map, joint_refine, normal_to_depth


def plane(k, n=(0.2, -0.1, -1.0), offset=-800.0):
    n = np.asarray(n, float) / np.linalg.norm(n)
    z = offset / (k.rays() @ n)
    mask = np.ones(k.shape, bool)
    return DepthMap(z, mask), NormalMap(np.broadcast_to(n, k.shape + (3,)).copy(), mask)


def test_config_validation():
    for bad in (dict(window=4), dict(window=1), dict(iterations=0), dict(blend=0), dict(normal_affinity_gamma=-1)):
        with pytest.raises(ContractViolation):
            RefineConfig(**bad)


def test_single_perturbation_is_halved(small_k):
    d, n = plane(small_k)
    z = d.values.copy()
    z[15, 20] += 5.0
    out = normal_to_depth(DepthMap(z, d.mask), n, small_k)
    assert out.values[15, 20] - d.values[15, 20] == pytest.approx(2.5, abs=1e-9)


def test_isolated_pixel_keeps_depth():
    k = CameraIntrinsics(10, 10, 2.0, 2.0, 5, 5)
    z = np.full(k.shape, np.nan)
    z[2, 2] = 700.0
    d = DepthMap.from_array(z)
    n = np.zeros(k.shape + (3,))
    n[2, 2] = [0, 0, -1]
    out = normal_to_depth(d, NormalMap(n, d.mask), k)
    assert out.values[2, 2] == 700.0 and out.n_valid == 1


def test_grazing_normal_keeps_depth(small_k):
    d, n = plane(small_k)
    v = n.vectors.copy()
    v[15, 20] = [0, 1, 0]  # perpendicular to the ray through (15, 20) only approximately
    r = small_k.rays()[15, 20]
    v[15, 20] = np.cross(r, [1, 0, 0])
    v[15, 20] /= np.linalg.norm(v[15, 20])
    out = normal_to_depth(d, NormalMap(v, n.mask), small_k)
    assert out.values[15, 20] == d.values[15, 20]


def test_joint_refine_preserves_invalid_pixels(small_k):
    d, n = plane(small_k)
    z = d.values.copy()
    z[:3, :3] = np.nan
    dd = DepthMap.from_array(z)
    out, _ = joint_refine(dd, n, small_k)
    np.testing.assert_array_equal(out.mask, dd.mask)


def test_error_map_on_planes(small_k):
    d, _ = plane(small_k)
    e = estimate_error_map(d, small_k)
    assert e.mask.all() and np.all(e.values == 0.1)
    rng = np.random.default_rng(0)
    noisy = DepthMap(d.values + rng.normal(0, 10, small_k.shape), d.mask)
    e = estimate_error_map(noisy, small_k)
    inner = e.values[2:-2, 2:-2]
    assert 0.9 < np.mean((inner > 5) & (inner < 20))


def test_error_map_marks_unfittable_pixels(small_k):
    z = np.full(small_k.shape, np.nan)
    z[5, 5] = 900.0
    e = estimate_error_map(DepthMap.from_array(z), small_k)
    assert not e.mask.any()


def test_refine_reduces_noise_on_plane(small_k):
    d, n = plane(small_k)
    rng = np.random.default_rng(2)
    noisy = DepthMap(d.values + rng.normal(0, 5, small_k.shape), d.mask)
    est = normals_from_depth(noisy, small_k)
    out, _ = joint_refine(noisy, est, small_k)
    before = np.abs(noisy.values - d.values).mean()
    after = np.abs(out.values - d.values).mean()
    assert after < 0.6 * before
