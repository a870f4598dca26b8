import numpy as np
import pytest
from hypothesis import given, strategies as st

from scanrecon.core import (PointCloud, RigidTransform, apply, compose, exp_so3, log_so3,
                            left_jacobian_so3, rot_z, rotation_angle_between)

from conftest import transforms

I = RigidTransform.identity()


def test_compose_identity():
    assert compose(I, I).allclose(I, atol=0)


def test_compose_with_inverse(rng):
    from conftest import random_transform
    T = random_transform(rng)
    assert compose(T, T.inverse()).allclose(I, atol=1e-9)


def test_rz90_twice_is_rz180():
    Rz90 = RigidTransform(rot_z(np.pi / 2))
    got = compose(Rz90, Rz90)
    # oracle: plain matrix product
    assert np.abs(got.rotation - rot_z(np.pi / 2) @ rot_z(np.pi / 2)).max() < 1e-12
    assert np.abs(got.rotation - np.diag([-1.0, -1.0, 1.0])).max() < 1e-12


def test_apply_identity_bit_exact(rng):
    c = PointCloud(rng.normal(size=(50, 3)) * 100)
    assert np.array_equal(apply(I, c).xyz, c.xyz)


def test_apply_translation():
    c = PointCloud([[0.0, 0.0, 0.0]])
    out = apply(RigidTransform(np.eye(3), [1, 0, 0]), c)
    assert np.array_equal(out.xyz, [[1.0, 0.0, 0.0]])


def test_apply_frame_and_metadata():
    c = PointCloud([[1.0, 2, 3]], [0.5], "s1")
    out = apply(I, c, frame="reference")
    assert out.frame == "reference" and out.scan_id == "s1" and out.intensity[0] == 0.5


def test_rejects_improper_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.001)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [1.5])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], frame="world")


def test_dict_round_trip_through_json_text(rng):
    import json
    from conftest import random_transform
    T = random_transform(rng)
    back = RigidTransform.from_dict(json.loads(json.dumps(T.to_dict())))
    assert back.allclose(T, atol=1e-15)


def test_log_exp_near_pi():
    w = np.array([0.0, 0.0, np.pi - 1e-9])
    assert np.abs(log_so3(exp_so3(w)) - w).max() < 1e-6


def test_left_jacobian_matches_fd(rng):
    # d/dd exp(w + d) ~ skew(J_l(w) d) exp(w)
    w = rng.normal(size=3)
    d = rng.normal(size=3) * 1e-6
    lhs = exp_so3(w + d) @ exp_so3(w).T
    rhs = exp_so3(left_jacobian_so3(w) @ d)
    assert np.abs(lhs - rhs).max() < 1e-11


@given(transforms(), st.integers(2, 30), st.integers(0, 2**31))
def test_apply_is_rigid(T, n, seed):
    X = np.random.default_rng(seed).uniform(-500, 500, size=(n, 3))
    Y = apply(T, PointCloud(X)).xyz
    dx = np.linalg.norm(X[:, None] - X[None], axis=2)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=2)
    assert np.all(np.abs(dx - dy) <= 1e-9 * np.maximum(dx, 1.0))


@given(transforms(), st.integers(0, 2**31))
def test_round_trip(T, seed):
    X = np.random.default_rng(seed).uniform(-300, 300, size=(20, 3))
    back = apply(T, apply(T.inverse(), PointCloud(X))).xyz
    assert np.abs(back - X).max() < 1e-9


@given(transforms(), transforms(), transforms())
def test_compose_associative(a, b, c):
    l, r = compose(compose(a, b), c), compose(a, compose(b, c))
    assert rotation_angle_between(l.rotation, r.rotation) < 1e-9
    assert np.abs(l.translation - r.translation).max() < 1e-9


@given(st.lists(transforms(), min_size=1, max_size=60))
def test_long_chains_stay_orthonormal(ts):
    acc = I
    for t in ts:
        acc = compose(acc, t)
    R = acc.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9
