"""SMPL-form parametric body: 6D rotations, linear blend skinning, weak-perspective projection.

The template is synthetic (seeded) but has the same structure as SMPL:
rest vertices, linear shape blendshapes, a joint regressor, skinning weights
and a 24-joint kinematic tree. A real template with these arrays can be
loaded through :func:`load_template`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .tensor import Tensor, as_tensor, cross, stack

NUM_JOINTS = 24
NUM_BETAS = 10
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_DEGENERATE = 1e-12


@dataclass
class SmplParams:
    """Pose as 6D rotations (..., 24, 6), shape (..., 10), camera (..., 3) = (scale, tx, ty)."""

    pose: object
    shape: object
    camera: object


@dataclass
class MeshOutput:
    vertices: object  # (..., N_v, 3) meters
    joints3d: object  # (..., 24, 3) meters
    joints2d: object  # (..., 24, 2)


@dataclass
class BodyTemplate:
    template_vertices: np.ndarray  # (N_v, 3)
    shape_dirs: np.ndarray  # (N_v, 3, 10)
    joint_regressor: np.ndarray  # (24, N_v)
    skin_weights: np.ndarray  # (N_v, 24)
    parents: np.ndarray  # (24,), parents[0] == -1

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    def validate(self, tol=1e-9):
        nv = self.num_vertices
        expected = {
            "template_vertices": (nv, 3),
            "shape_dirs": (nv, 3, NUM_BETAS),
            "joint_regressor": (NUM_JOINTS, nv),
            "skin_weights": (nv, NUM_JOINTS),
            "parents": (NUM_JOINTS,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"template {name}: expected shape {shape}, got {getattr(self, name).shape}")
        for name in ("joint_regressor", "skin_weights"):
            m = getattr(self, name)
            if (m < 0).any() or np.abs(m.sum(axis=1) - 1.0).max() > tol:
                raise ParameterError(f"template {name}: rows must be nonnegative and sum to 1")
        parents = self.parents
        if parents[0] != -1 or any(not 0 <= parents[j] < j for j in range(1, NUM_JOINTS)):
            raise ParameterError("template parents must form a tree rooted at joint 0 with parents[j] < j")
        return self


def rot6d_to_matrix(r):
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3) with columns b1, b2, b3."""
    r = as_tensor(r)
    if r.shape[-1] != 6:
        raise DimensionError(f"rot6d_to_matrix: last axis must be 6, got {r.shape}")
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = (a1 * a1).sum(axis=-1, keepdims=True).sqrt()
    _check_degenerate(n1.data, "first column")
    b1 = a1 / n1
    u2 = a2 - b1 * (b1 * a2).sum(axis=-1, keepdims=True)
    n2 = (u2 * u2).sum(axis=-1, keepdims=True).sqrt()
    _check_degenerate(n2.data, "second column")
    b2 = u2 / n2
    b3 = cross(b1, b2)
    return stack([b1, b2, b3], axis=-1)


def _check_degenerate(norms, what):
    bad = np.argwhere(~(norms[..., 0] > _DEGENERATE))
    if bad.size:
        where = tuple(int(i) for i in bad[0])
        joint = where[-1] if where else 0
        err = NumericError(f"degenerate 6D rotation ({what}) at joint {joint} (index {where})")
        err.joint = joint
        raise err


def matrix_to_rot6d(mat):
    """First two columns, concatenated: the inverse of :func:`rot6d_to_matrix` on rotations."""
    mat = np.asarray(mat)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def project_weak_perspective(points, camera):
    """``s * (X, Y) + (tx, ty)`` for points (B, J, 3) and camera (B, 3)."""
    points, camera = as_tensor(points), as_tensor(camera)
    s = camera[..., 0:1].reshape(*camera.shape[:-1], 1, 1)
    t = camera[..., 1:3].reshape(*camera.shape[:-1], 1, 2)
    return points[..., 0:2] * s + t


def lbs_forward(params, template):
    """Skin the template for a batch of parameters; returns vertices, posed joints and their projection."""
    pose, betas, camera = as_tensor(params.pose), as_tensor(params.shape), as_tensor(params.camera)
    if pose.ndim != 3 or pose.shape[1:] != (NUM_JOINTS, 6):
        raise DimensionError(f"pose must be (B, 24, 6), got {pose.shape}")
    b = pose.shape[0]
    if betas.shape != (b, NUM_BETAS) or camera.shape != (b, 3):
        raise DimensionError(f"shape {betas.shape} / camera {camera.shape} do not match batch {b}")
    nv = template.num_vertices
    parents = template.parents

    dirs = template.shape_dirs.reshape(nv * 3, NUM_BETAS).T
    v_shaped = (betas @ dirs).reshape(b, nv, 3) + template.template_vertices
    rest_joints = as_tensor(template.joint_regressor) @ v_shaped

    # Deviation form: A_j = R_j - I and d_j = posed joint - rest joint. With
    # rows of skin_weights summing to 1 this is ordinary LBS, and at rest pose
    # every correction term is an exact zero.
    rot = rot6d_to_matrix(pose)
    eye = np.eye(3)
    world_rot = [rot[:, 0]]
    disp = [Tensor(np.zeros((b, 3)))]
    for j in range(1, NUM_JOINTS):
        p = parents[j]
        bone = (rest_joints[:, j] - rest_joints[:, p]).reshape(b, 3, 1)
        world_rot.append(world_rot[p] @ rot[:, j])
        disp.append(((world_rot[p] - eye) @ bone).reshape(b, 3) + disp[p])
    dev_rot = stack(world_rot, axis=1) - eye  # (B, 24, 3, 3)
    disp = stack(disp, axis=1)  # (B, 24, 3)
    joints3d = rest_joints + disp
    dev_t = disp - (dev_rot @ rest_joints.reshape(b, NUM_JOINTS, 3, 1)).reshape(b, NUM_JOINTS, 3)

    weights = as_tensor(template.skin_weights)
    blend_rot = (weights @ dev_rot.reshape(b, NUM_JOINTS, 9)).reshape(b, nv, 3, 3)
    vertices = v_shaped + (blend_rot * v_shaped.reshape(b, nv, 1, 3)).sum(axis=-1) + weights @ dev_t
    return MeshOutput(vertices, joints3d, project_weak_perspective(joints3d, camera))


def balanced_parents(num_joints=NUM_JOINTS):
    """Binary-heap tree: parent of j is (j - 1) // 2."""
    parents = np.array([(j - 1) // 2 for j in range(num_joints)])
    parents[0] = -1
    return parents


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def make_synthetic_template(seed=0, num_vertices=128, parents=None):
    """Deterministic SMPL-form template.

    Joints are placed by walking the tree with random bone vectors; vertices
    scatter around joints; regressor and skin weights are softmaxes of
    negative squared distances.
    """
    if num_vertices < NUM_JOINTS:
        raise ParameterError(f"need at least {NUM_JOINTS} vertices, got {num_vertices}")
    parents = balanced_parents() if parents is None else np.asarray(parents)
    rng = np.random.default_rng(seed)
    joints = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        joints[j] = joints[parents[j]] + direction * rng.uniform(0.1, 0.25)
    owner = np.concatenate([np.arange(NUM_JOINTS), rng.integers(0, NUM_JOINTS, num_vertices - NUM_JOINTS)])
    vertices = joints[owner] + 0.04 * rng.standard_normal((num_vertices, 3))

    d2 = ((vertices[:, None, :] - joints[None, :, :]) ** 2).sum(-1)  # (N_v, 24)
    skin = _softmax_rows(-d2 / 0.01)
    regressor = _softmax_rows(-d2.T / 0.005)
    shape_dirs = 0.01 * rng.standard_normal((num_vertices, 3, NUM_BETAS))
    return BodyTemplate(vertices, shape_dirs, regressor, skin, parents).validate()


def template_to_dict(template):
    return {
        "template_vertices": template.template_vertices.tolist(),
        "shape_dirs": template.shape_dirs.tolist(),
        "joint_regressor": template.joint_regressor.tolist(),
        "skin_weights": template.skin_weights.tolist(),
        "parents": template.parents.tolist(),
    }


def template_from_dict(data):
    try:
        arrays = {k: np.asarray(data[k], dtype=np.float64) for k in ("template_vertices", "shape_dirs", "joint_regressor", "skin_weights")}
        parents = np.asarray(data["parents"], dtype=np.int64)
    except KeyError as exc:
        raise DimensionError(f"template file missing field {exc.args[0]!r}") from None
    return BodyTemplate(parents=parents, **arrays).validate()


def save_template(template, path):
    Path(path).write_text(json.dumps(template_to_dict(template)))


def load_template(path):
    return template_from_dict(json.loads(Path(path).read_text()))


def write_obj(path, vertices, faces=None):
    """Wavefront OBJ text: ``v x y z`` lines, then optional 1-based ``f`` lines."""
    vertices = np.asarray(vertices.data if isinstance(vertices, Tensor) else vertices)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if faces is not None:
        lines += ["f " + " ".join(str(int(i) + 1) for i in face) for face in faces]
    Path(path).write_text("\n".join(lines) + "\n")
