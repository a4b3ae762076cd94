"""6D rotations, geodesic distance and forward kinematics.

Plain numpy versions serve evaluation; the ``*_t`` variants build autodiff
graphs for training.  A 6D rotation is the first two columns of a rotation
matrix, ``[c1x, c1y, c1z, c2x, c2y, c2z]``.

Forward kinematics accumulates local joint rotations along the chain,
``G_j = G_parent(j) @ L_j``, and places each joint at
``p_j = p_parent(j) + G_j @ s_j`` where ``s_j`` is the bone offset in cm.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEGENERATE_NORM = 1e-8


class DegenerateRotationError(ValueError):
    pass


@dataclass
class Skeleton:
    parent: list
    offsets: np.ndarray
    joint_names: list = field(default_factory=list)
    wrist_indices: tuple = (0, 0)

    def __post_init__(self):
        self.parent = [int(p) for p in self.parent]
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(len(self.parent), 3)
        if not self.joint_names:
            self.joint_names = [f"joint{j}" for j in range(len(self.parent))]
        self.wrist_indices = tuple(int(i) for i in self.wrist_indices)
        self.validate()

    @property
    def n_joints(self):
        return len(self.parent)

    def validate(self):
        if not self.parent or self.parent[0] != -1:
            raise ValueError("skeleton root (index 0) must have parent -1")
        for j, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} ({self.joint_names[j]}) has parent {p}; parents must precede children")
        if len(self.joint_names) != self.n_joints:
            raise ValueError("joint_names length does not match parent list")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("skeleton offsets must be finite")
        if any(not 0 <= i < self.n_joints for i in self.wrist_indices):
            raise ValueError(f"wrist indices {self.wrist_indices} out of range")

    def depth(self):
        d = [0] * self.n_joints
        for j in range(1, self.n_joints):
            d[j] = d[self.parent[j]] + 1
        return max(d)

    def wrist_distance(self, rotations=None):
        """Wrist-to-wrist distance in the rest pose (or the first frame of ``rotations``)."""
        if rotations is None:
            rotations = identity_sixd((1, self.n_joints))
        pos = forward_kinematics(self, rotations)[0]
        a, b = self.wrist_indices
        return float(np.linalg.norm(pos[a] - pos[b]))

    def to_dict(self):
        return {
            "joint_names": list(self.joint_names),
            "parent": list(self.parent),
            "offsets": self.offsets.tolist(),
            "wrist_indices": list(self.wrist_indices),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["parent"], d["offsets"], d.get("joint_names", []), tuple(d.get("wrist_indices", (0, 0))))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def upper_body_skeleton():
    """Small 8-joint upper body used by the synthetic dataset (offsets in cm)."""
    return Skeleton(
        parent=[-1, 0, 1, 2, 3, 1, 5, 6],
        offsets=[
            [0.0, 0.0, 0.0],
            [0.0, 30.0, 0.0],
            [15.0, 0.0, 0.0],
            [26.0, 0.0, 0.0],
            [24.0, 0.0, 0.0],
            [-15.0, 0.0, 0.0],
            [-26.0, 0.0, 0.0],
            [-24.0, 0.0, 0.0],
        ],
        joint_names=["pelvis", "chest", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"],
        wrist_indices=(4, 7),
    )


# ---------------------------------------------------------------------------
# numpy rotation helpers
# ---------------------------------------------------------------------------

def identity_sixd(shape=()):
    out = np.zeros(tuple(shape) + (6,))
    out[..., 0] = 1.0
    out[..., 4] = 1.0
    return out


def axis_angle_to_rotmat(axis, angle):
    """Rodrigues' formula; ``angle`` may be an array (broadcast over leading dims)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _where_degenerate(mask):
    idx = np.argwhere(mask)[0]
    return "index " + ",".join(str(i) for i in idx) if idx.size else "scalar input"


def sixd_to_rotmat(r6):
    """Gram-Schmidt the two 3-vectors of ``r6`` (..., 6) into rotations (..., 3, 3)."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_NORM):
        raise DegenerateRotationError(f"zero first vector at {_where_degenerate(n1[..., 0] <= DEGENERATE_NORM)}")
    x = a1 / n1
    b2 = a2 - np.sum(x * a2, axis=-1, keepdims=True) * x
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    scale = np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)
    if np.any(n2 <= DEGENERATE_NORM * scale):
        raise DegenerateRotationError(
            f"parallel or zero second vector at {_where_degenerate(n2[..., 0] <= DEGENERATE_NORM * scale[..., 0])}"
        )
    y = b2 / n2
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def rotmat_to_sixd(R, atol=1e-4):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) rotation matrices, got {R.shape}")
    gram = np.swapaxes(R, -1, -2) @ R
    if not (np.allclose(gram, np.eye(3), atol=atol) and np.allclose(np.linalg.det(R), 1.0, atol=atol)):
        raise ValueError("input is not a proper rotation (orthonormal with det +1)")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def geodesic_distance(R, R_hat, eps=ad.ACOS_EPS):
    """Angle of ``R @ R_hat^-1`` in radians, with the acos argument clamped."""
    R, R_hat = np.asarray(R), np.asarray(R_hat)
    trace = np.sum(R * R_hat, axis=(-2, -1))  # Tr(R R_hat^T)
    cos = np.clip((trace - 1.0) / 2.0, -1.0 + eps, 1.0 - eps)
    return np.arccos(cos)


def forward_kinematics(skeleton, rotations, root_position=(0.0, 0.0, 0.0)):
    """World positions (..., J, 3) from local 6D rotations (..., J, 6) or matrices (..., J, 3, 3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    local = rotations if rotations.shape[-2:] == (3, 3) else sixd_to_rotmat(rotations)
    J = skeleton.n_joints
    if local.shape[-3] != J:
        raise ValueError(f"rotations have {local.shape[-3]} joints, skeleton has {J}")
    glob = np.empty_like(local)
    pos = np.empty(local.shape[:-2] + (3,))
    glob[..., 0, :, :] = local[..., 0, :, :]
    pos[..., 0, :] = np.asarray(root_position, dtype=np.float64)
    for j in range(1, J):
        p = skeleton.parent[j]
        glob[..., j, :, :] = glob[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + glob[..., j, :, :] @ skeleton.offsets[j]
    return pos


def joint_speed(positions):
    positions = np.asarray(positions)
    if positions.shape[0] < 2:
        raise ValueError(f"joint speed needs at least 2 frames, got {positions.shape[0]}")
    return np.diff(positions, axis=0)


# ---------------------------------------------------------------------------
# Intrinsic XYZ Euler angles (radians), R = Rx(a) @ Ry(b) @ Rz(c)
# ---------------------------------------------------------------------------

GIMBAL_EPS = 1e-6


def euler_xyz_to_rotmat(angles):
    angles = np.asarray(angles, dtype=np.float64)
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    return (
        axis_angle_to_rotmat([1, 0, 0], a)
        @ axis_angle_to_rotmat([0, 1, 0], b)
        @ axis_angle_to_rotmat([0, 0, 1], c)
    )


def rotmat_to_euler_xyz(R):
    """Inverse of :func:`euler_xyz_to_rotmat`.

    Near gimbal lock (|cos b| < 1e-6) the third angle is pinned to 0 and the
    first absorbs the remaining rotation.
    """
    R = np.asarray(R, dtype=np.float64)
    b = np.arcsin(np.clip(R[..., 0, 2], -1.0, 1.0))
    a = np.arctan2(-R[..., 1, 2], R[..., 2, 2])
    c = np.arctan2(-R[..., 0, 1], R[..., 0, 0])
    lock = np.abs(np.cos(b)) < GIMBAL_EPS
    if np.any(lock):
        a = np.where(lock, np.arctan2(R[..., 2, 1], R[..., 1, 1]), a)
        c = np.where(lock, 0.0, c)
    return np.stack([a, b, c], axis=-1)


# ---------------------------------------------------------------------------
# Differentiable versions
# ---------------------------------------------------------------------------

def _cross_t(u, v):
    ux, uy, uz = u[..., 0:1], u[..., 1:2], u[..., 2:3]
    vx, vy, vz = v[..., 0:1], v[..., 1:2], v[..., 2:3]
    return ad.concat([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx], axis=-1)


def sixd_to_rotmat_t(r6):
    """Tensor (..., 6) -> Tensor (..., 3, 3), same convention as :func:`sixd_to_rotmat`."""
    n1 = np.linalg.norm(r6.data[..., :3], axis=-1)
    if np.any(n1 <= DEGENERATE_NORM):
        raise DegenerateRotationError(f"zero first vector at {_where_degenerate(n1 <= DEGENERATE_NORM)}")
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    x = a1 / ad.sqrt((a1 * a1).sum(axis=-1, keepdims=True))
    b2 = a2 - (x * a2).sum(axis=-1, keepdims=True) * x
    sq = (b2 * b2).sum(axis=-1, keepdims=True)
    if np.any(sq.data <= DEGENERATE_NORM ** 2):
        raise DegenerateRotationError(f"parallel second vector at {_where_degenerate(sq.data[..., 0] <= DEGENERATE_NORM ** 2)}")
    y = b2 / ad.sqrt(sq)
    z = _cross_t(x, y)
    return ad.stack([x, y, z], axis=-1)


def geodesic_distance_t(R, R_hat, eps=ad.ACOS_EPS):
    trace = (R * R_hat).sum(axis=(-2, -1))
    return ad.acos((trace - 1.0) * 0.5, eps=eps)


def forward_kinematics_t(skeleton, rotmats, root_position=(0.0, 0.0, 0.0)):
    """Tensor of local rotation matrices (..., J, 3, 3) -> world positions (..., J, 3)."""
    J = skeleton.n_joints
    if rotmats.shape[-3] != J:
        raise ValueError(f"rotations have {rotmats.shape[-3]} joints, skeleton has {J}")
    lead = rotmats.shape[:-3]
    root = ad.Tensor(np.broadcast_to(np.asarray(root_position, dtype=np.float64), lead + (3,)))
    glob = [rotmats[..., 0, :, :]]
    pos = [root]
    for j in range(1, J):
        p = skeleton.parent[j]
        g = glob[p] @ rotmats[..., j, :, :]
        glob.append(g)
        pos.append(pos[p] + (g @ skeleton.offsets[j].reshape(3, 1))[..., 0])
    return ad.stack(pos, axis=-2)
