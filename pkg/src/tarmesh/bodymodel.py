"""Synthetic SMPL-structured body: shape blendshapes, joint regression, forward
kinematics, linear blend skinning and the 26-marker set.

Coordinates are meters in a camera-aligned frame: x right, y down, z away from
the camera. The rest body faces the camera (front is -z).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .diffcore import load_container, save_container

N_JOINTS = 24
N_BETAS = 10
N_MARKERS = 26

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Marker k and refinement state k refer to the same body site: 0..23 are the
# joint sites (0 doubling as global orientation), 24 chest (shape), 25 mid-back (camera).
MARKER_NAMES = JOINT_NAMES + ("chest", "mid_back")

REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],
    [0.09, 0.08, 0.00], [-0.09, 0.08, 0.00],
    [0.00, -0.11, 0.00],
    [0.10, 0.48, 0.00], [-0.10, 0.48, 0.00],
    [0.00, -0.24, 0.00],
    [0.10, 0.88, 0.02], [-0.10, 0.88, 0.02],
    [0.00, -0.33, 0.00],
    [0.10, 0.94, -0.10], [-0.10, 0.94, -0.10],
    [0.00, -0.52, 0.00],
    [0.07, -0.45, 0.00], [-0.07, -0.45, 0.00],
    [0.00, -0.62, 0.00],
    [0.18, -0.46, 0.00], [-0.18, -0.46, 0.00],
    [0.34, -0.29, 0.00], [-0.34, -0.29, 0.00],
    [0.49, -0.12, 0.00], [-0.49, -0.12, 0.00],
    [0.54, -0.06, 0.00], [-0.54, -0.06, 0.00],
])

# tube radius of the bone ending at each joint
_BONE_RADIUS = np.array([
    0.0, 0.07, 0.07, 0.11, 0.065, 0.065, 0.11, 0.05, 0.05, 0.11, 0.04, 0.04,
    0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.045, 0.045, 0.035, 0.035, 0.03, 0.03,
])
# leaf joint -> (extension vector, radius)
_TERMINALS = {
    10: (np.array([0.0, 0.0, -0.07]), 0.035),
    11: (np.array([0.0, 0.0, -0.07]), 0.035),
    15: (np.array([0.0, -0.20, 0.0]), 0.09),
    22: (np.array([0.05, 0.06, 0.0]), 0.025),
    23: (np.array([-0.05, 0.06, 0.0]), 0.025),
}


@dataclass(frozen=True)
class SyntheticBodyConfig:
    n_vertices: int = 690
    ring_points: int = 6
    blendshape_max: float = 0.03
    skin_temperature: float = 0.015
    regressor_sigma: float = 0.04
    regressor_neighbors: int = 8


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (V, 3)
    shape_blendshapes: np.ndarray  # (10, V, 3)
    joint_regressor: np.ndarray  # (24, V)
    skinning_weights: np.ndarray  # (V, 24)
    parents: tuple
    marker_indices: np.ndarray  # (26,) int
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = self.template_vertices.shape[0]
        if self.template_vertices.shape != (v, 3):
            raise ValueError(f"template_vertices must be (V, 3), got {self.template_vertices.shape}")
        if self.shape_blendshapes.shape != (N_BETAS, v, 3):
            raise ValueError(f"shape_blendshapes must be (10, {v}, 3), got {self.shape_blendshapes.shape}")
        if self.joint_regressor.shape != (N_JOINTS, v):
            raise ValueError(f"joint_regressor must be (24, {v}), got {self.joint_regressor.shape}")
        if self.skinning_weights.shape != (v, N_JOINTS):
            raise ValueError(f"skinning_weights must be ({v}, 24), got {self.skinning_weights.shape}")
        for name, w, axis in (("joint_regressor", self.joint_regressor, 1),
                              ("skinning_weights", self.skinning_weights, 1)):
            if (w < 0).any():
                raise ValueError(f"{name} has negative entries")
            if np.abs(w.sum(axis=axis) - 1.0).max() > 1e-6:
                raise ValueError(f"{name} rows must sum to 1")
        _check_tree(self.parents)
        mi = np.asarray(self.marker_indices)
        if mi.shape != (N_MARKERS,):
            raise ValueError(f"expected {N_MARKERS} marker indices, got shape {mi.shape}")
        if mi.min() < 0 or mi.max() >= v:
            raise ValueError(f"marker index out of range for {v} vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def tensors(self, dtype=torch.float32) -> "BodyTensors":
        if dtype not in self._cache:
            self._cache[dtype] = BodyTensors(
                template=torch.as_tensor(self.template_vertices, dtype=dtype),
                blendshapes=torch.as_tensor(self.shape_blendshapes, dtype=dtype),
                regressor=torch.as_tensor(self.joint_regressor, dtype=dtype),
                weights=torch.as_tensor(self.skinning_weights, dtype=dtype),
                markers=torch.as_tensor(np.asarray(self.marker_indices), dtype=torch.long),
                parents=tuple(self.parents),
            )
        return self._cache[dtype]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "template_vertices": self.template_vertices,
            "shape_blendshapes": self.shape_blendshapes,
            "joint_regressor": self.joint_regressor,
            "skinning_weights": self.skinning_weights,
        }

    def meta(self) -> dict:
        return {
            "kinematic_tree": [int(p) for p in self.parents],
            "marker_indices": [int(i) for i in self.marker_indices],
            "faces": np.asarray(self.faces).astype(int).tolist(),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict, prefix: str = "") -> "BodyModel":
        def get(name):
            return np.asarray(arrays[prefix + name], dtype=np.float64)

        reg = get("joint_regressor")
        skin = get("skinning_weights")
        # float32 storage perturbs row sums by ~1e-7; renormalize in float64
        return cls(
            template_vertices=get("template_vertices"),
            shape_blendshapes=get("shape_blendshapes"),
            joint_regressor=reg / reg.sum(1, keepdims=True),
            skinning_weights=skin / skin.sum(1, keepdims=True),
            parents=tuple(meta["kinematic_tree"]),
            marker_indices=np.asarray(meta["marker_indices"], dtype=np.int64),
            faces=np.asarray(meta.get("faces", []), dtype=np.int64).reshape(-1, 3),
        )

    def save(self, path) -> None:
        save_container(path, self.arrays(), meta=self.meta(), kind="body_model")

    @classmethod
    def load(cls, path) -> "BodyModel":
        arrays, manifest = load_container(path)
        return cls.from_arrays(arrays, manifest["meta"])


class BodyTensors(NamedTuple):
    template: torch.Tensor
    blendshapes: torch.Tensor
    regressor: torch.Tensor
    weights: torch.Tensor
    markers: torch.Tensor
    parents: tuple


class BodyParams(NamedTuple):
    theta: torch.Tensor  # (..., 24, 3) axis-angle, joint 0 is the global orientation
    beta: torch.Tensor  # (..., 10)
    cam: torch.Tensor  # (..., 3) crop camera (s, t_x, t_y)

    def flat(self) -> torch.Tensor:
        """(..., 85) concatenation of theta, beta and cam."""
        return torch.cat([self.theta.flatten(-2), self.beta, self.cam], dim=-1)

    @classmethod
    def unflat(cls, x: torch.Tensor) -> "BodyParams":
        return cls(x[..., :72].unflatten(-1, (24, 3)), x[..., 72:82], x[..., 82:85])


class BodyOutput(NamedTuple):
    vertices: torch.Tensor  # (..., V, 3)
    joints: torch.Tensor  # (..., 24, 3)
    markers: torch.Tensor  # (..., 26, 3)


def _check_tree(parents) -> None:
    if len(parents) != N_JOINTS:
        raise ValueError(f"kinematic tree must have {N_JOINTS} joints, got {len(parents)}")
    if parents[0] != -1:
        raise ValueError("joint 0 must be the root")
    for j in range(1, len(parents)):
        p = parents[j]
        if not 0 <= p < j:
            # forward kinematics visits joints in index order, so parents come first
            raise ValueError(f"joint {j} has invalid parent {p} (parents must precede children)")
        seen = {j}
        while p != -1:
            if p in seen:
                raise ValueError(f"kinematic tree has a cycle through joint {j}")
            seen.add(p)
            p = parents[p]


def skew(w: torch.Tensor) -> torch.Tensor:
    x, y, z = w.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([o, -z, y, z, o, -x, -y, x, o], dim=-1).reshape(w.shape[:-1] + (3, 3))


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    theta2 = (axis_angle * axis_angle).sum(-1)[..., None, None]
    small = theta2 < 1e-16  # |w| < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    half = torch.sin(0.5 * theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, 2.0 * half * half / safe2)
    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + a * k + b * (k @ k)


def shape_and_regress(bt: BodyTensors, beta: torch.Tensor):
    shaped = bt.template + torch.einsum("...i,ivc->...vc", beta, bt.blendshapes)
    joints = torch.einsum("jv,...vc->...jc", bt.regressor, shaped)
    return shaped, joints


def forward_kinematics(bt: BodyTensors, theta: torch.Tensor, rest_joints: torch.Tensor):
    """Return posed joints (..., 24, 3) and global transforms (..., 24, 4, 4)."""
    rot = rodrigues(theta)
    g_rot = [rot[..., 0, :, :]]
    g_pos = [rest_joints[..., 0, :]]
    for j in range(1, len(bt.parents)):
        p = bt.parents[j]
        offset = rest_joints[..., j, :] - rest_joints[..., p, :]
        g_pos.append(g_pos[p] + (g_rot[p] @ offset[..., None])[..., 0])
        g_rot.append(g_rot[p] @ rot[..., j, :, :])
    R = torch.stack(g_rot, dim=-3)
    t = torch.stack(g_pos, dim=-2)
    bottom = torch.zeros(R.shape[:-2] + (1, 4), dtype=R.dtype, device=R.device)
    bottom[..., 0, 3] = 1.0
    transforms = torch.cat([torch.cat([R, t[..., None]], dim=-1), bottom], dim=-2)
    return t, transforms


def rest_corrected(transforms: torch.Tensor, rest_joints: torch.Tensor) -> torch.Tensor:
    """Apply the inverse rest pose so transforms act on rest-space vertices."""
    R = transforms[..., :3, :3]
    t = transforms[..., :3, 3] - (R @ rest_joints[..., None])[..., 0]
    return torch.cat([torch.cat([R, t[..., None]], dim=-1), transforms[..., 3:, :]], dim=-2)


def linear_blend_skinning(bt: BodyTensors, shaped: torch.Tensor, transforms: torch.Tensor) -> torch.Tensor:
    """Skin ``shaped`` (..., V, 3) with rest-corrected ``transforms`` (..., 24, 4, 4)."""
    blended = torch.einsum("vj,...jab->...vab", bt.weights, transforms[..., :3, :])
    return (blended[..., :3] @ shaped[..., None])[..., 0] + blended[..., 3]


def sample_markers(bt: BodyTensors, posed_vertices: torch.Tensor) -> torch.Tensor:
    return posed_vertices.index_select(-2, bt.markers)


def body_forward(bt: BodyTensors, theta: torch.Tensor, beta: torch.Tensor) -> BodyOutput:
    """Pose (..., 24, 3) and shape (..., 10) to posed vertices, joints and markers."""
    shaped, rest = shape_and_regress(bt, beta)
    joints, transforms = forward_kinematics(bt, theta, rest)
    verts = linear_blend_skinning(bt, shaped, rest_corrected(transforms, rest))
    return BodyOutput(verts, joints, sample_markers(bt, verts))


def _segments():
    """(owner joint, start, end, radius) for every bone tube."""
    segs = []
    for j in range(1, N_JOINTS):
        p = PARENTS[j]
        segs.append((p, REST_JOINTS[p], REST_JOINTS[j], _BONE_RADIUS[j]))
    for j, (ext, r) in _TERMINALS.items():
        segs.append((j, REST_JOINTS[j], REST_JOINTS[j] + ext, r))
    return segs


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def make_synthetic_model(config: SyntheticBodyConfig | None = None, seed: int = 0) -> BodyModel:
    """Build a deterministic humanoid tube mesh with SMPL's 24-joint topology."""
    cfg = config or SyntheticBodyConfig()
    if cfg.n_vertices < 100:
        raise ValueError(f"need at least 100 vertices, got {cfg.n_vertices}")
    if cfg.ring_points < 3:
        raise ValueError("ring_points must be >= 3")
    rng = np.random.default_rng(seed)
    segs = _segments()

    # markers first: front surface of each joint site, then chest and mid-back
    joint_r = np.zeros(N_JOINTS)
    for owner, _, _, r in segs:
        joint_r[owner] = max(joint_r[owner], r)
    for j in range(1, N_JOINTS):
        joint_r[j] = max(joint_r[j], _BONE_RADIUS[j])
    markers = [REST_JOINTS[j] + np.array([0.0, 0.0, -joint_r[j]]) for j in range(N_JOINTS)]
    markers.append(0.6 * REST_JOINTS[9] + 0.4 * REST_JOINTS[12] + np.array([0.0, 0.0, -0.11]))
    markers.append(REST_JOINTS[6] + np.array([0.0, 0.0, 0.11]))
    markers = np.array(markers)

    # remaining vertices on helical tubes, allocated by bone length
    remaining = cfg.n_vertices - N_MARKERS
    lengths = np.array([np.linalg.norm(e - s) for _, s, e, _ in segs])
    share = 1 + (remaining - len(segs)) * lengths / lengths.sum()
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: remaining - counts.sum()]] += 1

    verts = [markers]
    faces = []
    base = N_MARKERS
    ppr = cfg.ring_points
    for (owner, s, e, r), c in zip(segs, counts):
        axis = (e - s) / np.linalg.norm(e - s)
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        i = np.arange(c)
        t = (i + 0.5) / c
        phase = rng.uniform(0, 2 * math.pi)
        phi = 2 * math.pi * i / ppr + phase
        rad = r * rng.uniform(0.95, 1.05, size=c)
        pts = s + t[:, None] * (e - s) + rad[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        verts.append(pts)
        for k in range(c - ppr - 1):
            faces.append((base + k, base + k + 1, base + k + ppr))
            faces.append((base + k + 1, base + k + ppr + 1, base + k + ppr))
        base += c
    verts = np.concatenate(verts)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    v = len(verts)

    # skinning: softmax over joints of negative distance to the bones each joint owns
    dist = np.full((v, N_JOINTS), np.inf)
    for owner, s, e, _ in segs:
        dist[:, owner] = np.minimum(dist[:, owner], _point_segment_distance(verts, s, e))
    logits = -dist / cfg.skin_temperature
    logits -= logits.max(axis=1, keepdims=True)
    skin = np.exp(logits)
    skin /= skin.sum(axis=1, keepdims=True)

    # regressor: gaussian weights over the nearest tube vertices of each joint
    reg = np.zeros((N_JOINTS, v))
    tube = np.arange(N_MARKERS, v)
    for j in range(N_JOINTS):
        d = np.linalg.norm(verts[tube] - REST_JOINTS[j], axis=1)
        near = np.argsort(d, kind="stable")[: cfg.regressor_neighbors]
        w = np.exp(-0.5 * (d[near] / cfg.regressor_sigma) ** 2) + 1e-12
        reg[j, tube[near]] = w / w.sum()

    # blendshapes: low-frequency sinusoidal displacement fields
    blend = np.zeros((N_BETAS, v, 3))
    for b in range(N_BETAS):
        field_ = np.zeros((v, 3))
        for _ in range(3):
            direction = rng.normal(size=3)
            k = direction / np.linalg.norm(direction) * rng.uniform(1.0, 4.0)
            amp = rng.normal(size=3)
            field_ += np.sin(verts @ k + rng.uniform(0, 2 * math.pi))[:, None] * amp
        field_ *= cfg.blendshape_max * rng.uniform(0.5, 1.0) / np.linalg.norm(field_, axis=1).max()
        blend[b] = field_

    # shuffle vertex order so marker indices are not a prefix
    perm = rng.permutation(v)
    inv = np.empty(v, dtype=np.int64)
    inv[perm] = np.arange(v)
    return BodyModel(
        template_vertices=verts[perm],
        shape_blendshapes=blend[:, perm],
        joint_regressor=reg[:, perm],
        skinning_weights=skin[perm],
        parents=PARENTS,
        marker_indices=inv[np.arange(N_MARKERS)],
        faces=inv[faces],
    )
