import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tofjoint.alignment import (
    ICPConfig,
    ICPResult,
    average_transforms,
    averaged_icp,
    icp,
    kabsch,
    quaternion_to_rotation,
    rotation_to_quaternion,
)
from tofjoint.errors import ContractViolation, NumericalFailure
from tofjoint.geometry import PointCloud, RigidTransform, transform
from tofjoint.scenegen import calibration_target


def random_rigid(rng, max_deg=20.0, max_mm=50.0):
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0, max_deg))
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0, max_mm)
    return RigidTransform.from_axis_angle(axis, angle, t)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kabsch_exact(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(scale=100, size=(20, 3))
    t = random_rigid(rng, 180, 500)
    est = kabsch(src, t.apply(src))
    deg, mm = est.error_to(t)
    assert deg < 1e-6 and mm < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quaternion_round_trip(seed):
    rng = np.random.default_rng(seed)
    t = random_rigid(rng, 180, 0)
    q = rotation_to_quaternion(t.rotation)
    assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
    np.testing.assert_allclose(quaternion_to_rotation(q), t.rotation, atol=1e-12)


def test_quaternion_near_180_degrees():
    r = RigidTransform.from_axis_angle((1, 1, 0), np.pi - 1e-9).rotation
    np.testing.assert_allclose(quaternion_to_rotation(rotation_to_quaternion(r)), r, atol=1e-9)


def test_icp_identity_and_history_monotone():
    src = calibration_target(np.random.default_rng(0))
    t = random_rigid(np.random.default_rng(1))
    res = icp(src, transform(src, t))
    assert res.converged
    assert all(b <= a for a, b in zip(res.rms_history, res.rms_history[1:]))
    deg, mm = res.transform.error_to(t)
    assert deg < 0.01 and mm < 0.05


def test_icp_contract_violations():
    with pytest.raises(ContractViolation):
        icp(np.zeros((2, 3)), np.zeros((5, 3)))
    line = np.outer(np.arange(10.0), [1, 2, 3])
    with pytest.raises(ContractViolation):
        icp(line, np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(ContractViolation):
        ICPConfig(trim_fraction=0.6)


def test_icp_far_clouds_fail_numerically():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 3))
    with pytest.raises(NumericalFailure):
        icp(a, a + 1e4)


def test_average_transforms_identity_cases(rng):
    t = random_rigid(rng)
    avg = average_transforms([t, t, t])
    deg, mm = avg.error_to(t)
    assert deg < 1e-6 and mm < 1e-12
    # a quaternion and its negation describe the same rotation
    r = ICPResult(t, 0.0, 1, True)
    assert average_transforms([r, t]).error_to(t)[0] < 1e-6
    with pytest.raises(ContractViolation):
        average_transforms([])


def test_average_of_symmetric_rotations_is_identity():
    a = RigidTransform.from_axis_angle((0, 0, 1), 0.2, (5, 0, 0))
    b = RigidTransform.from_axis_angle((0, 0, 1), -0.2, (-5, 0, 0))
    avg = average_transforms([a, b])
    deg, mm = avg.error_to(RigidTransform.identity())
    assert deg < 1e-6 and mm < 1e-12


def test_averaged_icp_returns_per_pair_results():
    rng = np.random.default_rng(3)
    t = random_rigid(rng)
    pairs = []
    for _ in range(3):
        src = calibration_target(rng)
        pairs.append((src, transform(src, t)))
    avg, results = averaged_icp(pairs)
    assert len(results) == 3
    assert avg.error_to(t)[0] < 0.01
    with pytest.raises(ContractViolation):
        averaged_icp([])


def test_icp_accepts_point_clouds_and_init():
    src = calibration_target(np.random.default_rng(4))
    t = RigidTransform.translation_only((3, -2, 1))
    res = icp(PointCloud(src.points), transform(src, t), init=t)
    assert res.transform.error_to(t)[1] < 1e-9
