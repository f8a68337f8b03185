"""Simplified differentiable right hand: shape blend + linear blend skinning.

The template is built procedurally (five finger tubes and a palm tube), so the
module ships no licensed asset while keeping the 61-parameter interface and the
778-vertex default topology.
"""

import logging
import math
import struct
from dataclasses import dataclass
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import trimesh

logger = logging.getLogger(__name__)

# Parameter layout
NUM_SHAPE = 10
NUM_POSE = 45
POSTURE_DIM = NUM_SHAPE + NUM_POSE
POSITION_DIM = 6
PARAM_DIM = POSTURE_DIM + POSITION_DIM

# Canonical part order; codebook indices depend on it
PART_NAMES = ("thumb", "index", "middle", "ring", "little", "palm")
NUM_PARTS = len(PART_NAMES)
NUM_FINGERS = 5
PALM_PART = 5

# Joint layout: 0 wrist, three joints per finger in part order, then five tips
NUM_JOINTS = 21
CHAIN_JOINTS = tuple(tuple(1 + 3 * c + k for k in range(3)) for c in range(5))
TIP_JOINTS = tuple(16 + c for c in range(5))
PARENTS = (
    (-1,)
    + tuple(0 if k == 0 else 1 + 3 * c + k - 1 for c in range(5) for k in range(3))
    + tuple(3 + 3 * c for c in range(5))
)
# (previous, center, next) along each chain: wrist-j1-j2, j1-j2-j3, j2-j3-tip
ANGLE_TRIPLETS = tuple(
    triplet
    for chain, tip in zip(CHAIN_JOINTS, TIP_JOINTS, strict=True)
    for triplet in (
        (0, chain[0], chain[1]),
        (chain[0], chain[1], chain[2]),
        (chain[1], chain[2], tip),
    )
)

# Grouping of the six canonical parts for the part-count ablation
PART_GROUPINGS = {
    1: ((0, 1, 2, 3, 4, 5),),
    2: ((0, 1, 2, 3, 4), (5,)),
    3: ((0,), (1, 2, 3, 4), (5,)),
    4: ((0,), (1, 2), (3, 4), (5,)),
    5: ((0,), (1,), (2,), (3, 4), (5,)),
    6: ((0,), (1,), (2,), (3,), (4,), (5,)),
}

BONE_EPS = 1e-8
COS_CLAMP = 1e-7

TEMPLATE_MAGIC = b"DVQT"
TEMPLATE_VERSION = 1
TEMPLATE_HEADER = struct.Struct("<4sIIIIII")


class InvalidParameterError(ValueError):
    pass


class TopologyError(ValueError):
    pass


class DegenerateBoneError(ValueError):
    pass


class TemplateFormatError(ValueError):
    pass


@dataclass
class HandParams:
    """61 grasp parameters; every field may carry leading batch dimensions."""

    shape: torch.Tensor
    pose: torch.Tensor
    rotation: torch.Tensor
    translation: torch.Tensor

    def posture(self) -> torch.Tensor:
        return torch.cat([self.shape, self.pose], dim=-1)

    def position(self) -> torch.Tensor:
        return torch.cat([self.translation, self.rotation], dim=-1)

    def to_vector(self) -> torch.Tensor:
        """shape ∥ pose ∥ translation ∥ rotation"""
        return torch.cat([self.posture(), self.position()], dim=-1)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.to_vector()).all())

    @property
    def batch_shape(self) -> torch.Size:
        return self.shape.shape[:-1]

    @classmethod
    def from_parts(cls, posture: torch.Tensor, position: torch.Tensor) -> "HandParams":
        if posture.shape[-1] != POSTURE_DIM or position.shape[-1] != POSITION_DIM:
            error_msg = (
                f"Expected posture/position widths {POSTURE_DIM}/{POSITION_DIM}, "
                f"got {posture.shape[-1]}/{position.shape[-1]}"
            )
            raise InvalidParameterError(error_msg)
        shape, pose = posture.split([NUM_SHAPE, NUM_POSE], dim=-1)
        translation, rotation = position.split([3, 3], dim=-1)
        return cls(shape=shape, pose=pose, rotation=rotation, translation=translation)

    @classmethod
    def from_vector(cls, vector: torch.Tensor) -> "HandParams":
        if vector.shape[-1] != PARAM_DIM:
            error_msg = f"Expected {PARAM_DIM} hand parameters, got {vector.shape[-1]}"
            raise InvalidParameterError(error_msg)
        posture, position = vector.split([POSTURE_DIM, POSITION_DIM], dim=-1)
        return cls.from_parts(posture, position)

    @classmethod
    def zeros(
        cls, *batch_shape: int, dtype: torch.dtype = torch.float32
    ) -> "HandParams":
        return cls.from_vector(torch.zeros(*batch_shape, PARAM_DIM, dtype=dtype))


@dataclass
class HandMesh:
    vertices: torch.Tensor
    joints: torch.Tensor
    faces: torch.Tensor

    def to_trimesh(self, index: int | None = None):
        """Convert one mesh (or batch item ``index``) to a trimesh object"""
        vertices = self.vertices if index is None else self.vertices[index]
        return trimesh.Trimesh(
            vertices=vertices.detach().cpu().numpy().astype(np.float64),
            faces=self.faces.cpu().numpy(),
            process=False,
        )


@dataclass
class HandTemplate:
    vertices0: torch.Tensor
    faces: torch.Tensor
    joints0: torch.Tensor
    skinning_weights: torch.Tensor
    shape_basis: torch.Tensor
    joint_shape_basis: torch.Tensor
    parents: tuple[int, ...]
    part_labels: torch.Tensor
    contact_candidates: torch.Tensor
    angle_triplets: torch.Tensor

    @property
    def num_vertices(self) -> int:
        return self.vertices0.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints0.shape[0]

    @property
    def num_angles(self) -> int:
        return self.angle_triplets.shape[0]

    @property
    def part_partition(self) -> tuple[torch.Tensor, ...]:
        return tuple(
            torch.nonzero(self.part_labels == part).flatten()
            for part in range(NUM_PARTS)
        )

    def to(
        self, dtype: torch.dtype | None = None, device: torch.device | str | None = None
    ) -> "HandTemplate":
        def move(tensor: torch.Tensor) -> torch.Tensor:
            if tensor.is_floating_point():
                return tensor.to(device=device, dtype=dtype)
            return tensor.to(device=device)

        return replace(
            self,
            vertices0=move(self.vertices0),
            faces=move(self.faces),
            joints0=move(self.joints0),
            skinning_weights=move(self.skinning_weights),
            shape_basis=move(self.shape_basis),
            joint_shape_basis=move(self.joint_shape_basis),
            part_labels=move(self.part_labels),
            contact_candidates=move(self.contact_candidates),
            angle_triplets=move(self.angle_triplets),
        )

    def validate(self) -> None:
        num_vertices = self.num_vertices
        row_sums = self.skinning_weights.sum(dim=1)
        if not torch.allclose(
            row_sums, torch.ones_like(row_sums), atol=1e-6, rtol=0.0
        ):
            error_msg = "Skinning weight rows must sum to 1"
            raise TemplateFormatError(error_msg)
        if (self.skinning_weights < 0).any():
            error_msg = "Skinning weights must be nonnegative"
            raise TemplateFormatError(error_msg)
        labels = self.part_labels
        out_of_range = labels.min() < 0 or labels.max() >= NUM_PARTS
        if labels.shape[0] != num_vertices or out_of_range:
            error_msg = "Every vertex must belong to exactly one of the six parts"
            raise TemplateFormatError(error_msg)
        if self.faces.min() < 0 or self.faces.max() >= num_vertices:
            error_msg = "Faces reference vertices outside the template"
            raise TemplateFormatError(error_msg)
        if len(self.parents) != self.num_joints:
            error_msg = "Kinematic tree must list one parent per joint"
            raise TemplateFormatError(error_msg)
        for joint, parent in enumerate(self.parents):
            if parent >= joint:
                error_msg = f"Joint {joint} is listed before its parent {parent}"
                raise TemplateFormatError(error_msg)


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3); exact identity at zero"""
    angle = torch.sqrt((axis_angle * axis_angle).sum(dim=-1, keepdim=True) + 1e-16)
    axis = axis_angle / angle
    x, y, z = axis.unbind(dim=-1)
    zero = torch.zeros_like(x)
    cross = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1)
    cross = cross.reshape(*axis.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    sin = torch.sin(angle).unsqueeze(-1)
    cos = torch.cos(angle).unsqueeze(-1)
    return eye + sin * cross + (1.0 - cos) * (cross @ cross)


def forward_kinematics(params: HandParams, template: HandTemplate) -> HandMesh:
    """Shape blend, LBS over the kinematic tree, then global rotation/translation"""
    vector = params.to_vector()
    if not torch.isfinite(vector).all():
        error_msg = "Hand parameters contain non-finite values"
        raise InvalidParameterError(error_msg)

    batch_shape = params.batch_shape
    shape = params.shape.reshape(-1, NUM_SHAPE)
    pose = params.pose.reshape(-1, NUM_POSE // 3, 3)
    rotation = params.rotation.reshape(-1, 3)
    translation = params.translation.reshape(-1, 3)
    batch = shape.shape[0]

    v_shaped = template.vertices0 + torch.einsum(
        "bk,kvc->bvc", shape, template.shape_basis
    )
    j_shaped = template.joints0 + torch.einsum(
        "bk,kjc->bjc", shape, template.joint_shape_basis
    )

    local = rodrigues(pose)
    eye = torch.eye(3, dtype=shape.dtype, device=shape.device).expand(batch, 3, 3)
    zero = torch.zeros(batch, 3, dtype=shape.dtype, device=shape.device)

    # Posed joint j sits at j_shaped[j] + deltas[j]; rotations are global
    rotations: list[torch.Tensor] = []
    deltas: list[torch.Tensor] = []
    for joint, parent in enumerate(template.parents):
        if parent < 0:
            rotations.append(eye)
            deltas.append(zero)
            continue
        local_rot = local[:, joint - 1] if 1 <= joint <= local.shape[1] else eye
        offset = (j_shaped[:, joint] - j_shaped[:, parent]).unsqueeze(-1)
        deltas.append(
            deltas[parent] + ((rotations[parent] - eye) @ offset).squeeze(-1)
        )
        rotations.append(rotations[parent] @ local_rot)

    rot = torch.stack(rotations, dim=1)
    delta = torch.stack(deltas, dim=1)
    rel = v_shaped.unsqueeze(2) - j_shaped.unsqueeze(1)
    moved = torch.einsum("bjcd,bvjd->bvjc", rot - eye.unsqueeze(1), rel)
    moved = moved + delta.unsqueeze(1)
    v_posed = v_shaped + torch.einsum("vj,bvjc->bvc", template.skinning_weights, moved)
    j_posed = j_shaped + delta

    global_rot = rodrigues(rotation)
    vertices = v_posed @ global_rot.transpose(-1, -2) + translation.unsqueeze(1)
    joints = j_posed @ global_rot.transpose(-1, -2) + translation.unsqueeze(1)

    return HandMesh(
        vertices=vertices.reshape(*batch_shape, template.num_vertices, 3),
        joints=joints.reshape(*batch_shape, template.num_joints, 3),
        faces=template.faces,
    )


def partition_vertices(
    mesh: HandMesh, template: HandTemplate
) -> tuple[torch.Tensor, ...]:
    """Per-part vertex arrays in canonical order (thumb, ..., little, palm)"""
    if mesh.vertices.shape[-2] != template.num_vertices:
        error_msg = (
            f"Mesh has {mesh.vertices.shape[-2]} vertices, "
            f"template expects {template.num_vertices}"
        )
        raise TopologyError(error_msg)
    return tuple(mesh.vertices[..., index, :] for index in template.part_partition)


def group_parts(parts: tuple[torch.Tensor, ...], num_parts: int) -> list[torch.Tensor]:
    """Merge the six canonical parts into ``num_parts`` groups"""
    if len(parts) != NUM_PARTS:
        error_msg = f"Expected {NUM_PARTS} parts, got {len(parts)}"
        raise TopologyError(error_msg)
    if num_parts not in PART_GROUPINGS:
        error_msg = f"Unsupported part count {num_parts}; choose 1-{NUM_PARTS}"
        raise ValueError(error_msg)
    return [
        torch.cat([parts[i] for i in group], dim=-2)
        for group in PART_GROUPINGS[num_parts]
    ]


def joint_angles(
    joints: torch.Tensor, triplets: torch.Tensor | None = None
) -> torch.Tensor:
    """Angles (radians) at the center of each (previous, center, next) triplet"""
    if triplets is None:
        triplets = torch.tensor(ANGLE_TRIPLETS, device=joints.device)
    previous = joints[..., triplets[:, 0], :]
    center = joints[..., triplets[:, 1], :]
    following = joints[..., triplets[:, 2], :]
    to_previous = previous - center
    to_next = following - center
    len_previous = torch.linalg.vector_norm(to_previous, dim=-1)
    len_next = torch.linalg.vector_norm(to_next, dim=-1)
    if (len_previous < BONE_EPS).any() or (len_next < BONE_EPS).any():
        error_msg = f"Bone shorter than {BONE_EPS} m in joint-angle computation"
        raise DegenerateBoneError(error_msg)
    cos = (to_previous * to_next).sum(dim=-1) / (len_previous * len_next)
    cos = cos.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    return torch.arccos(cos)


def center_vertices(vertices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = vertices.mean(dim=-2, keepdim=True)
    return vertices - mean, mean.squeeze(-2)


# Procedural template geometry (meters, right hand, palm side towards -z)
_PALM_LENGTH = 0.09
_PALM_HALF_WIDTH = 0.042
_PALM_HALF_THICKNESS = 0.014
_PALM_CENTER_X = -0.004
_FINGER_BASES = (
    (0.030, 0.022, -0.008),
    (0.026, 0.090, 0.0),
    (0.005, 0.094, 0.0),
    (-0.015, 0.090, 0.0),
    (-0.033, 0.082, 0.0),
)
_FINGER_DIRECTIONS = (
    (math.sqrt(0.5), math.sqrt(0.5), 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0),
)
_BONE_LENGTHS = (
    (0.035, 0.030, 0.025),
    (0.040, 0.025, 0.020),
    (0.045, 0.028, 0.022),
    (0.042, 0.026, 0.021),
    (0.033, 0.020, 0.018),
)
_FINGER_RADII = (0.0095, 0.0085, 0.0085, 0.008, 0.007)
_SHAPE_SCALE = 0.1

# num_vertices -> (finger sides, finger rings, palm sides, palm rings)
_LAYOUTS = {
    778: (8, 16, 9, 14),
    60: (3, 2, 6, 3),
}


def _frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    reference = np.array([0.0, 0.0, 1.0])
    if abs(direction @ reference) > 0.9:
        reference = np.array([1.0, 0.0, 0.0])
    u = np.cross(reference, direction)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def _tube_faces(start: int, rings: int, sides: int) -> list[tuple[int, int, int]]:
    """Closed tube: ring quads plus a fan cap at each end (outward winding)"""

    def ring_vertex(ring: int, side: int) -> int:
        return start + ring * sides + side % sides

    faces = []
    for ring in range(rings - 1):
        for side in range(sides):
            a = ring_vertex(ring, side)
            b = ring_vertex(ring, side + 1)
            c = ring_vertex(ring + 1, side + 1)
            d = ring_vertex(ring + 1, side)
            faces.extend([(a, b, c), (a, c, d)])
    start_cap = start + rings * sides
    end_cap = start_cap + 1
    for side in range(sides):
        faces.append(
            (start_cap, ring_vertex(0, side + 1), ring_vertex(0, side))
        )
        faces.append(
            (end_cap, ring_vertex(rings - 1, side), ring_vertex(rings - 1, side + 1))
        )
    return faces


def build_template(num_vertices: int = 778) -> HandTemplate:
    """Procedural hand template with the requested vertex count"""
    if num_vertices not in _LAYOUTS:
        error_msg = (
            f"No procedural layout for {num_vertices} vertices; "
            f"available: {sorted(_LAYOUTS)}"
        )
        raise ValueError(error_msg)
    finger_sides, finger_rings, palm_sides, palm_rings = _LAYOUTS[num_vertices]

    positions: list[np.ndarray] = []
    axis_points: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    labels: list[int] = []
    faces: list[tuple[int, int, int]] = []
    candidates: list[int] = []

    joints = np.zeros((NUM_JOINTS, 3))
    for finger in range(NUM_FINGERS):
        base = np.array(_FINGER_BASES[finger])
        direction = np.array(_FINGER_DIRECTIONS[finger])
        cumulative = base.copy()
        for k, joint in enumerate(CHAIN_JOINTS[finger]):
            joints[joint] = cumulative
            cumulative = cumulative + direction * _BONE_LENGTHS[finger][k]
        joints[TIP_JOINTS[finger]] = cumulative

    def add_vertex(point, axis_point, weight_row, label) -> int:
        positions.append(point)
        axis_points.append(axis_point)
        weights.append(weight_row)
        labels.append(label)
        return len(positions) - 1

    for finger in range(NUM_FINGERS):
        base = np.array(_FINGER_BASES[finger])
        direction = np.array(_FINGER_DIRECTIONS[finger])
        u, w = _frame(direction)
        bones = np.array(_BONE_LENGTHS[finger])
        bounds = np.concatenate([[0.0], np.cumsum(bones)])
        total = bounds[-1]
        chain = CHAIN_JOINTS[finger]
        radius = _FINGER_RADII[finger]

        def chain_weights(arc: float, chain=chain, bones=bones, bounds=bounds):
            bone = min(int(np.searchsorted(bounds, arc, side="right")) - 1, 2)
            fraction = (arc - bounds[bone]) / bones[bone]
            previous = chain[bone - 1] if bone > 0 else 0
            row = np.zeros(NUM_JOINTS)
            blend = 0.4 * max(0.0, 1.0 - fraction / 0.25)
            row[previous] += blend
            row[chain[bone]] += 1.0 - blend
            return row

        start = len(positions)
        for ring in range(finger_rings):
            arc = total * ring / max(finger_rings - 1, 1)
            center = base + direction * arc
            ring_radius = radius * (1.0 - 0.2 * arc / total)
            row = chain_weights(arc)
            for side in range(finger_sides):
                phi = 2.0 * math.pi * side / finger_sides
                offset = ring_radius * (math.cos(phi) * u + math.sin(phi) * w)
                index = add_vertex(center + offset, center, row, finger)
                if ring == finger_rings - 1:
                    candidates.append(index)
        add_vertex(base - direction * 0.5 * radius, base, chain_weights(0.0), finger)
        tip_row = np.zeros(NUM_JOINTS)
        tip_row[chain[2]] = 1.0
        tip = base + direction * (total + 0.4 * radius)
        candidates.append(add_vertex(tip, tip, tip_row, finger))
        faces.extend(_tube_faces(start, finger_rings, finger_sides))

    start = len(positions)
    palm_direction = np.array([0.0, 1.0, 0.0])
    u, w = _frame(palm_direction)
    root_row = np.zeros(NUM_JOINTS)
    root_row[0] = 1.0
    for ring in range(palm_rings):
        y = _PALM_LENGTH * ring / max(palm_rings - 1, 1)
        center = np.array([_PALM_CENTER_X, y, 0.0])
        for side in range(palm_sides):
            phi = 2.0 * math.pi * side / palm_sides
            local = _PALM_HALF_WIDTH * math.cos(phi) * u + (
                _PALM_HALF_THICKNESS * math.sin(phi) * w
            )
            index = add_vertex(center + local, center, root_row, PALM_PART)
            if local[2] < -0.5 * _PALM_HALF_THICKNESS:
                candidates.append(index)
    add_vertex(
        np.array([_PALM_CENTER_X, -0.006, 0.0]), np.zeros(3), root_row, PALM_PART
    )
    add_vertex(
        np.array([_PALM_CENTER_X, _PALM_LENGTH + 0.006, 0.0]),
        np.array([_PALM_CENTER_X, _PALM_LENGTH, 0.0]),
        root_row,
        PALM_PART,
    )
    faces.extend(_tube_faces(start, palm_rings, palm_sides))

    vertices = np.array(positions)
    axis = np.array(axis_points)
    weight_matrix = np.array(weights)
    vertex_labels = np.array(labels)
    if vertices.shape[0] != num_vertices:
        error_msg = f"Layout produced {vertices.shape[0]} vertices, not {num_vertices}"
        raise TopologyError(error_msg)

    # Palm = vertices whose dominant weight is not on a finger chain
    chain_mass = np.stack(
        [weight_matrix[:, list(chain)].sum(axis=1) for chain in CHAIN_JOINTS]
        + [weight_matrix[:, 0]],
        axis=1,
    )
    dominant = chain_mass.argmax(axis=1)
    if not np.array_equal(dominant, vertex_labels):
        logger.warning("Dominant-weight partition differs from tube membership")

    joint_labels = np.full(NUM_JOINTS, PALM_PART)
    for finger in range(NUM_FINGERS):
        joint_labels[list(CHAIN_JOINTS[finger]) + [TIP_JOINTS[finger]]] = finger

    shape_basis = _shape_basis(vertices, dominant, axis)
    joint_shape_basis = _shape_basis(joints, joint_labels, joints)

    template = HandTemplate(
        vertices0=torch.tensor(vertices, dtype=torch.float32),
        faces=torch.tensor(faces, dtype=torch.long),
        joints0=torch.tensor(joints, dtype=torch.float32),
        skinning_weights=torch.tensor(weight_matrix, dtype=torch.float32),
        shape_basis=torch.tensor(shape_basis, dtype=torch.float32),
        joint_shape_basis=torch.tensor(joint_shape_basis, dtype=torch.float32),
        parents=PARENTS,
        part_labels=torch.tensor(dominant, dtype=torch.long),
        contact_candidates=torch.tensor(sorted(candidates), dtype=torch.long),
        angle_triplets=torch.tensor(ANGLE_TRIPLETS, dtype=torch.long),
    )
    template.validate()
    return template


def _shape_basis(
    points: np.ndarray, labels: np.ndarray, axis: np.ndarray
) -> np.ndarray:
    """Ten displacement fields: global length/width/thickness, per-finger
    length, finger spread and finger girth"""
    basis = np.zeros((NUM_SHAPE, *points.shape))
    basis[0, :, 1] = points[:, 1]
    basis[1, :, 0] = points[:, 0]
    basis[2, :, 2] = points[:, 2]
    for finger in range(NUM_FINGERS):
        mask = labels == finger
        basis[3 + finger, mask] = points[mask] - np.array(_FINGER_BASES[finger])
        if finger > 0:
            basis[8, mask, 0] = _FINGER_BASES[finger][0]
    fingers = labels < NUM_FINGERS
    basis[9, fingers] = points[fingers] - axis[fingers]
    return basis * _SHAPE_SCALE


@lru_cache(maxsize=4)
def default_template(num_vertices: int = 778) -> HandTemplate:
    return build_template(num_vertices)


def curl_pose(flexion: torch.Tensor) -> torch.Tensor:
    """Pose vector (..., 45) bending each finger joint towards the palm.

    ``flexion`` holds (..., 5, 3) angles in radians, one per chain joint.
    """
    axes = []
    for direction in _FINGER_DIRECTIONS:
        axis = np.cross(np.array(direction), np.array([0.0, 0.0, -1.0]))
        axes.append(axis / np.linalg.norm(axis))
    axes = torch.tensor(np.array(axes), dtype=flexion.dtype, device=flexion.device)
    pose = flexion.unsqueeze(-1) * axes.unsqueeze(-2)
    return pose.reshape(*flexion.shape[:-2], NUM_POSE)


def save_template(template: HandTemplate, path: str | Path) -> None:
    """Write the template archive (layout in docs/FILE_FORMATS.md)"""
    header = TEMPLATE_HEADER.pack(
        TEMPLATE_MAGIC,
        TEMPLATE_VERSION,
        template.num_vertices,
        template.num_joints,
        template.faces.shape[0],
        template.contact_candidates.shape[0],
        template.num_angles,
    )
    floats = [
        template.vertices0,
        template.joints0,
        template.skinning_weights,
        template.shape_basis,
        template.joint_shape_basis,
    ]
    ints = [
        template.faces,
        torch.tensor(template.parents),
        template.part_labels,
        template.contact_candidates,
        template.angle_triplets,
    ]
    with open(path, "wb") as f:
        f.write(header)
        for array in floats:
            f.write(array.detach().cpu().numpy().astype("<f4").tobytes())
        for array in ints:
            f.write(array.cpu().numpy().astype("<i4").tobytes())


def load_template(path: str | Path) -> HandTemplate:
    data = Path(path).read_bytes()
    if len(data) < TEMPLATE_HEADER.size:
        error_msg = f"Template archive {path} is truncated"
        raise TemplateFormatError(error_msg)
    magic, version, num_v, num_j, num_f, num_c, num_k = TEMPLATE_HEADER.unpack_from(
        data
    )
    if magic != TEMPLATE_MAGIC or version != TEMPLATE_VERSION:
        error_msg = f"Unsupported template archive {path} (version {version})"
        raise TemplateFormatError(error_msg)

    offset = TEMPLATE_HEADER.size
    arrays = []
    layout = [
        ("<f4", (num_v, 3)),
        ("<f4", (num_j, 3)),
        ("<f4", (num_v, num_j)),
        ("<f4", (NUM_SHAPE, num_v, 3)),
        ("<f4", (NUM_SHAPE, num_j, 3)),
        ("<i4", (num_f, 3)),
        ("<i4", (num_j,)),
        ("<i4", (num_v,)),
        ("<i4", (num_c,)),
        ("<i4", (num_k, 3)),
    ]
    for dtype, shape in layout:
        count = int(np.prod(shape))
        nbytes = count * 4
        if offset + nbytes > len(data):
            error_msg = f"Template archive {path} is truncated"
            raise TemplateFormatError(error_msg)
        arrays.append(
            np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        )
        offset += nbytes

    template = HandTemplate(
        vertices0=torch.tensor(arrays[0], dtype=torch.float32),
        joints0=torch.tensor(arrays[1], dtype=torch.float32),
        skinning_weights=torch.tensor(arrays[2], dtype=torch.float32),
        shape_basis=torch.tensor(arrays[3], dtype=torch.float32),
        joint_shape_basis=torch.tensor(arrays[4], dtype=torch.float32),
        faces=torch.tensor(arrays[5], dtype=torch.long),
        parents=tuple(int(p) for p in arrays[6]),
        part_labels=torch.tensor(arrays[7], dtype=torch.long),
        contact_candidates=torch.tensor(arrays[8], dtype=torch.long),
        angle_triplets=torch.tensor(arrays[9], dtype=torch.long),
    )
    template.validate()
    return template


def load_mano_params(path: str | Path) -> HandParams:
    """Read externally supplied MANO-format grasps, 61 floats each in the order
    shape ∥ pose ∥ translation ∥ rotation (.npy or whitespace text)"""
    path = Path(path)
    if path.suffix == ".npy":
        values = np.load(path)
    else:
        values = np.loadtxt(path, ndmin=2)
    values = np.asarray(values, dtype=np.float32)
    if values.size % PARAM_DIM != 0:
        error_msg = f"{path} does not hold a whole number of {PARAM_DIM}-value grasps"
        raise InvalidParameterError(error_msg)
    params = HandParams.from_vector(torch.from_numpy(values.reshape(-1, PARAM_DIM)))
    if not params.is_finite():
        error_msg = f"{path} contains non-finite hand parameters"
        raise InvalidParameterError(error_msg)
    return params
