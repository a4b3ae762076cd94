import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturelab import autodiff as ad
from gesturelab.kinematics import (
    DegenerateRotationError,
    Skeleton,
    axis_angle_to_rotmat,
    euler_xyz_to_rotmat,
    forward_kinematics,
    forward_kinematics_t,
    geodesic_distance,
    geodesic_distance_t,
    identity_sixd,
    rotmat_to_euler_xyz,
    rotmat_to_sixd,
    sixd_to_rotmat,
    sixd_to_rotmat_t,
    upper_body_skeleton,
)

Z = np.array([0.0, 0.0, 1.0])


def chain():
    return Skeleton(parent=[-1, 0, 1], offsets=[[0, 0, 0], [1, 0, 0], [0, 2, 0]])


def random_rotations(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def test_sixd_round_trip():
    R = random_rotations(np.random.default_rng(0), 500)
    assert np.abs(sixd_to_rotmat(rotmat_to_sixd(R)) - R).max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_gram_schmidt_gives_proper_rotation(v):
    v = np.array(v)
    a, b = v[:3], v[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * max(np.linalg.norm(b), 1.0):
        return
    R = sixd_to_rotmat(v)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1.0) < 1e-6


def test_identity_sixd_maps_to_identity():
    np.testing.assert_array_equal(sixd_to_rotmat(identity_sixd()), np.eye(3))


def test_degenerate_6d_inputs_raise():
    with pytest.raises(DegenerateRotationError):
        sixd_to_rotmat(np.zeros(6))
    with pytest.raises(DegenerateRotationError):
        sixd_to_rotmat(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_tensor_gram_schmidt_matches_numpy():
    v = np.random.default_rng(1).standard_normal((4, 6))
    np.testing.assert_allclose(sixd_to_rotmat_t(ad.Tensor(v)).data, sixd_to_rotmat(v), atol=1e-12)


def test_rotmat_to_sixd_rejects_reflections():
    with pytest.raises(ValueError):
        rotmat_to_sixd(np.diag([1.0, 1.0, -1.0]))


def test_fk_three_joint_chain_by_hand():
    rots = np.stack([axis_angle_to_rotmat(Z, np.pi / 2), axis_angle_to_rotmat(Z, np.pi / 2), np.eye(3)])
    p = forward_kinematics(chain(), rots)
    # G1 = Rz(180): the unit x bone points to -x; G2 = Rz(180): the 2-unit y bone points to -y
    expected = np.array([[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.0, -2.0, 0.0]])
    assert np.abs(p - expected).max() < 1e-12


def test_fk_root_translation_and_rest_pose():
    p = forward_kinematics(chain(), identity_sixd((3,)), root_position=(5.0, 0.0, 1.0))
    np.testing.assert_allclose(p, [[5, 0, 1], [6, 0, 1], [6, 2, 1]], atol=1e-12)


def test_fk_preserves_bone_lengths():
    skel = upper_body_skeleton()
    R = random_rotations(np.random.default_rng(2), 8 * 5).reshape(5, 8, 3, 3)
    p = forward_kinematics(skel, R)
    for j in range(1, 8):
        bone = np.linalg.norm(p[:, j] - p[:, skel.parent[j]], axis=-1)
        np.testing.assert_allclose(bone, np.linalg.norm(skel.offsets[j]), atol=1e-9)


def test_fk_tensor_matches_numpy():
    skel = upper_body_skeleton()
    R = random_rotations(np.random.default_rng(3), 16).reshape(2, 8, 3, 3)
    np.testing.assert_allclose(forward_kinematics_t(skel, ad.Tensor(R)).data, forward_kinematics(skel, R), atol=1e-12)


def test_fk_rejects_wrong_joint_count():
    with pytest.raises(ValueError):
        forward_kinematics(chain(), identity_sixd((4,)))


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton(parent=[0, 0], offsets=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Skeleton(parent=[-1, 2, 0], offsets=np.zeros((3, 3)))


def test_skeleton_json_round_trip(tmp_path):
    skel = upper_body_skeleton()
    skel.save(tmp_path / "s.json")
    back = Skeleton.load(tmp_path / "s.json")
    assert back.parent == skel.parent and back.joint_names == skel.joint_names
    np.testing.assert_array_equal(back.offsets, skel.offsets)
    assert skel.depth() >= 3 and skel.n_joints >= 6


def test_geodesic_identities():
    R = random_rotations(np.random.default_rng(4), 10)
    eps = ad.ACOS_EPS
    np.testing.assert_allclose(geodesic_distance(R, R), np.arccos(1 - eps), atol=1e-12)
    flip = R @ axis_angle_to_rotmat(Z, np.pi)
    np.testing.assert_allclose(geodesic_distance(R, flip), np.arccos(-1 + eps), atol=1e-12)
    # the clamp keeps both ends within sqrt(2 eps) of the true angle
    assert np.arccos(1 - eps) < 5e-4 and np.pi - np.arccos(-1 + eps) < 5e-4


def test_geodesic_known_angle_and_symmetry():
    R = random_rotations(np.random.default_rng(5), 6)
    Q = R @ axis_angle_to_rotmat([1.0, 2.0, 0.5], 0.7)
    np.testing.assert_allclose(geodesic_distance(R, Q), 0.7, atol=1e-9)
    np.testing.assert_allclose(geodesic_distance(Q, R), geodesic_distance(R, Q), atol=1e-12)
    np.testing.assert_allclose(geodesic_distance_t(ad.Tensor(R), ad.Tensor(Q)).data, 0.7, atol=1e-9)


def test_euler_round_trip_and_order():
    rng = np.random.default_rng(6)
    ang = rng.uniform(-1.2, 1.2, (200, 3))
    R = euler_xyz_to_rotmat(ang)
    np.testing.assert_allclose(rotmat_to_euler_xyz(R), ang, atol=1e-9)
    a, b, c = 0.3, -0.4, 0.5
    Rx, Ry, Rz = (axis_angle_to_rotmat(e, t) for e, t in ((np.eye(3)[0], a), (np.eye(3)[1], b), (np.eye(3)[2], c)))
    np.testing.assert_allclose(euler_xyz_to_rotmat(np.array([a, b, c])), Rx @ Ry @ Rz, atol=1e-12)


def test_euler_gimbal_lock_still_reconstructs():
    R = euler_xyz_to_rotmat(np.array([0.4, np.pi / 2, -0.3]))
    ang = rotmat_to_euler_xyz(R)
    assert ang[2] == 0.0
    np.testing.assert_allclose(euler_xyz_to_rotmat(ang), R, atol=1e-9)
