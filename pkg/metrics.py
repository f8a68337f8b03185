"""Grasp evaluation: contact, penetration volume, drop-test displacement,
diversity and the quality index."""

import logging
import math
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np
import torch
import trimesh
from sklearn.cluster import KMeans
from sklearn.neighbors import KDTree

from hand_model import HandMesh
from hand_model import HandParams
from hand_model import HandTemplate
from hand_model import forward_kinematics

logger = logging.getLogger(__name__)

QUALITY_WEIGHT = 0.301
VOXEL_VOLUME_CM3 = 0.1
VOXEL_EDGE_M = (VOXEL_VOLUME_CM3 * 1e-6) ** (1.0 / 3.0)
DIVERSITY_CLUSTERS = 20


class NonWatertightError(ValueError):
    pass


@dataclass
class SimulationConfig:
    time_step: float = 1.0 / 240.0
    duration: float = 1.0
    gravity: float = 9.8
    contact_radius: float = 0.005
    stiffness: float = 1e5
    damping: float = 600.0
    friction: float = 200.0
    max_object_points: int = 4000


@dataclass
class GraspMetrics:
    in_contact: bool
    penetration_cm3: float
    displacement_cm: float
    quality: float


@dataclass
class MetricsReport:
    contact_ratio: float
    penetration_volume: float
    grasp_disp: float
    entropy: float
    cluster_size: float
    quality_index: float
    runtime_s: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def as_trimesh(hand: HandMesh | trimesh.Trimesh) -> trimesh.Trimesh:
    if isinstance(hand, trimesh.Trimesh):
        return hand
    return hand.to_trimesh()


def _require_watertight(mesh: trimesh.Trimesh, name: str) -> None:
    if not mesh.is_watertight:
        error_msg = f"{name} mesh is not watertight"
        raise NonWatertightError(error_msg)


def _components(mesh: trimesh.Trimesh) -> list[trimesh.Trimesh]:
    parts = mesh.split(only_watertight=False)
    return list(parts) if len(parts) else [mesh]


def _occupied(components: list[trimesh.Trimesh], points: np.ndarray) -> np.ndarray:
    """Inside test that tolerates overlapping closed components"""
    inside = np.zeros(len(points), dtype=bool)
    for component in components:
        lower, upper = component.bounds
        candidates = ~inside & np.all((points >= lower) & (points <= upper), axis=1)
        if candidates.any():
            inside[candidates] = component.contains(points[candidates])
    return inside


def hand_object_distance(hand: trimesh.Trimesh, object_mesh: trimesh.Trimesh) -> float:
    """Smallest distance from a hand vertex to the object surface"""
    _, distance, _ = object_mesh.nearest.on_surface(hand.vertices)
    return float(distance.min())


def is_in_contact(
    hand: HandMesh | trimesh.Trimesh, object_mesh: trimesh.Trimesh, tau: float = 0.005
) -> bool:
    hand = as_trimesh(hand)
    if hand_object_distance(hand, object_mesh) <= tau:
        return True
    _require_watertight(object_mesh, "Object")
    return bool(_occupied([object_mesh], hand.vertices).any())


def contact_ratio(
    grasps: list[tuple[HandMesh | trimesh.Trimesh, trimesh.Trimesh]],
    tau: float = 0.005,
) -> float:
    """Percentage of grasps touching (or penetrating) their object"""
    if not grasps:
        error_msg = "contact_ratio needs at least one grasp"
        raise ValueError(error_msg)
    if tau <= 0:
        error_msg = f"Contact threshold must be positive, got {tau}"
        raise ValueError(error_msg)
    touching = sum(is_in_contact(hand, obj, tau) for hand, obj in grasps)
    return 100.0 * touching / len(grasps)


def _grid_centers(
    lower: np.ndarray, upper: np.ndarray, clip_lower: np.ndarray, clip_upper: np.ndarray
) -> np.ndarray:
    """Voxel centres of the grid anchored at ``lower`` that fall in the clip box"""
    axes = []
    for axis in range(3):
        count = max(1, math.ceil((upper[axis] - lower[axis]) / VOXEL_EDGE_M))
        centers = lower[axis] + (np.arange(count) + 0.5) * VOXEL_EDGE_M
        keep = (centers >= clip_lower[axis]) & (centers <= clip_upper[axis])
        axes.append(centers[keep])
    if any(len(a) == 0 for a in axes):
        return np.zeros((0, 3))
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def penetration_volume(
    hand: HandMesh | trimesh.Trimesh, object_mesh: trimesh.Trimesh
) -> float:
    """Volume (cm^3) of voxels occupied by both meshes.

    The grid starts at the minimum corner of the joint bounding box and each
    voxel holds 0.1 cm^3; only centres inside both bounding boxes are tested.
    """
    hand = as_trimesh(hand)
    _require_watertight(hand, "Hand")
    _require_watertight(object_mesh, "Object")
    hand_lower, hand_upper = hand.bounds
    obj_lower, obj_upper = object_mesh.bounds
    clip_lower = np.maximum(hand_lower, obj_lower)
    clip_upper = np.minimum(hand_upper, obj_upper)
    if np.any(clip_lower > clip_upper):
        return 0.0
    centers = _grid_centers(
        np.minimum(hand_lower, obj_lower),
        np.maximum(hand_upper, obj_upper),
        clip_lower,
        clip_upper,
    )
    if len(centers) == 0:
        return 0.0
    both = _occupied(_components(hand), centers)
    if both.any():
        both[both] = _occupied(_components(object_mesh), centers[both])
    return float(both.sum()) * VOXEL_VOLUME_CM3


def voxelized_volume(mesh: trimesh.Trimesh) -> float:
    """Volume (cm^3) of ``mesh`` on the same grid rule"""
    _require_watertight(mesh, "Input")
    lower, upper = mesh.bounds
    centers = _grid_centers(lower, upper, lower, upper)
    return float(_occupied(_components(mesh), centers).sum()) * VOXEL_VOLUME_CM3


def _object_samples(object_mesh: trimesh.Trimesh, limit: int) -> np.ndarray:
    points = np.concatenate([object_mesh.vertices, object_mesh.triangles_center])
    if len(points) > limit:
        points = points[np.linspace(0, len(points) - 1, limit).astype(int)]
    return points


def _contact_terms(
    world: np.ndarray,
    velocity: np.ndarray,
    tree: KDTree,
    hand_vertices: np.ndarray,
    bounds: tuple[np.ndarray, np.ndarray],
    share: float,
    config: SimulationConfig,
) -> tuple[np.ndarray, np.ndarray] | None:
    """Spring acceleration and linear drag from samples inside the contact radius.

    Each touching sample pushes along the direction from its nearest hand
    vertex with ``stiffness * depth``. Damping acts only while the sample is
    approaching. Tangential motion is resisted by viscous friction.
    """
    lower, upper = bounds
    near = np.all((world >= lower) & (world <= upper), axis=1)
    if not near.any():
        return None
    distance, index = tree.query(world[near], k=1)
    distance = distance[:, 0]
    touching = distance < config.contact_radius
    if not touching.any():
        return None
    gap = world[near][touching] - hand_vertices[index[touching, 0]]
    length = np.maximum(distance[touching], 1e-12)[:, None]
    normal = gap / length
    depth = config.contact_radius - length
    force = share * config.stiffness * (depth * normal).sum(axis=0)

    outer = np.einsum("ni,nj->nij", normal, normal)
    approaching = (normal @ velocity) < 0
    drag = share * config.damping * outer[approaching].sum(axis=0)
    drag += share * config.friction * (np.eye(3) - outer).sum(axis=0)
    return force, drag


def simulation_displacement(
    hand: HandMesh | trimesh.Trimesh | None,
    object_mesh: trimesh.Trimesh,
    config: SimulationConfig | None = None,
) -> float:
    """Centre-of-mass travel (cm) of the object dropped inside a fixed hand.

    The object translates as one rigid body whose mass is spread evenly over
    its surface samples. Hand vertices act as penalty springs on any sample
    within the contact radius. Steps with contact use semi-implicit Euler with
    the damping and friction drag solved implicitly. Steps without contact are
    exact ballistic updates under gravity (-z).
    """
    config = config or SimulationConfig()
    steps = round(config.duration / config.time_step)
    dt = config.time_step
    gravity = np.array([0.0, 0.0, -config.gravity])
    points = _object_samples(object_mesh, config.max_object_points)
    share = 1.0 / len(points)

    tree = None
    if hand is not None:
        hand_vertices = np.asarray(as_trimesh(hand).vertices, dtype=np.float64)
        tree = KDTree(hand_vertices)
        bounds = (
            hand_vertices.min(axis=0) - config.contact_radius,
            hand_vertices.max(axis=0) + config.contact_radius,
        )

    offset = np.zeros(3)
    velocity = np.zeros(3)
    for _ in range(steps):
        terms = None
        if tree is not None:
            terms = _contact_terms(
                points + offset, velocity, tree, hand_vertices, bounds, share, config
            )
        if terms is None:
            offset = offset + velocity * dt + 0.5 * gravity * dt * dt
            velocity = velocity + gravity * dt
            continue
        force, drag = terms
        velocity = np.linalg.solve(
            np.eye(3) + dt * drag, velocity + dt * (gravity + force)
        )
        offset = offset + velocity * dt
    return float(np.linalg.norm(offset)) * 100.0


def diversity_from_features(
    features: np.ndarray, k: int = DIVERSITY_CLUSTERS, seed: int = 0
) -> tuple[float, float]:
    """(entropy in nats, mean member-to-centroid distance) of a k-means split"""
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if len(features) < k:
        error_msg = f"Diversity needs at least {k} grasps, got {len(features)}"
        raise ValueError(error_msg)
    kmeans = KMeans(n_clusters=k, n_init=20, random_state=seed).fit(features)
    labels = kmeans.labels_
    counts = np.bincount(labels, minlength=k)
    occupancy = counts[counts > 0] / len(features)
    entropy = float(-(occupancy * np.log(occupancy)).sum())
    sizes = []
    for cluster in np.flatnonzero(counts):
        members = features[labels == cluster]
        center = kmeans.cluster_centers_[cluster]
        sizes.append(np.linalg.norm(members - center, axis=1).mean())
    return max(entropy, 0.0), float(np.mean(sizes))


def diversity(
    grasps: HandParams,
    template: HandTemplate,
    k: int = DIVERSITY_CLUSTERS,
    seed: int = 0,
) -> tuple[float, float]:
    """Diversity of a batch of grasps, clustered on flattened joint positions"""
    with torch.no_grad():
        joints = forward_kinematics(grasps, template).joints
    return diversity_from_features(joints.reshape(joints.shape[0], -1).numpy(), k, seed)


def quality_index(
    penetration: float, displacement: float, weight: float = QUALITY_WEIGHT
) -> float:
    """weight * penetration + (1 - weight) * displacement; lower is better"""
    if penetration < 0 or displacement < 0:
        error_msg = "Penetration and displacement must be nonnegative"
        raise ValueError(error_msg)
    return weight * penetration + (1.0 - weight) * displacement


def high_quality_ratio(
    penetrations: list[float] | np.ndarray,
    displacements: list[float] | np.ndarray,
    pen_thresholds: list[float] | np.ndarray | None = None,
    disp_threshold: float = 2.0,
) -> list[tuple[float, float]]:
    """(threshold, fraction of grasps under both limits) per penetration limit"""
    pen = np.asarray(penetrations, dtype=np.float64)
    disp = np.asarray(displacements, dtype=np.float64)
    if pen.shape != disp.shape or pen.size == 0:
        error_msg = "Need matching, non-empty penetration and displacement lists"
        raise ValueError(error_msg)
    if pen_thresholds is None:
        pen_thresholds = np.linspace(0.0, 10.0, 21)
    stable = disp <= disp_threshold
    return [
        (float(threshold), float(np.mean((pen <= threshold) & stable)))
        for threshold in pen_thresholds
    ]


def evaluate_grasp(
    hand: HandMesh | trimesh.Trimesh,
    object_mesh: trimesh.Trimesh,
    tau: float = 0.005,
    simulation: SimulationConfig | None = None,
) -> GraspMetrics:
    hand = as_trimesh(hand)
    penetration = penetration_volume(hand, object_mesh)
    displacement = simulation_displacement(hand, object_mesh, simulation)
    return GraspMetrics(
        in_contact=is_in_contact(hand, object_mesh, tau),
        penetration_cm3=penetration,
        displacement_cm=displacement,
        quality=quality_index(penetration, displacement),
    )


def summarize(
    rows: list[GraspMetrics],
    entropy: float,
    cluster_size: float,
    runtime_s: float,
) -> MetricsReport:
    if not rows:
        error_msg = "Cannot summarize an empty evaluation"
        raise ValueError(error_msg)
    penetration = float(np.mean([r.penetration_cm3 for r in rows]))
    displacement = float(np.mean([r.displacement_cm for r in rows]))
    return MetricsReport(
        contact_ratio=100.0 * float(np.mean([r.in_contact for r in rows])),
        penetration_volume=penetration,
        grasp_disp=displacement,
        entropy=entropy,
        cluster_size=cluster_size,
        quality_index=quality_index(penetration, displacement),
        runtime_s=runtime_s,
    )
