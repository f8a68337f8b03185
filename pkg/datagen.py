"""Procedural desk-scale grasp corpus.

Objects are parametric primitives; each ground-truth grasp is found by
optimizing finger curl and hand placement against the object, and accepted
only when it touches the object without deep penetration.
"""

import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import torch
import trimesh

from hand_model import NUM_FINGERS
from hand_model import PALM_PART
from hand_model import PARAM_DIM
from hand_model import HandParams
from hand_model import HandTemplate
from hand_model import curl_pose
from hand_model import default_template
from hand_model import forward_kinematics
from hand_model import load_mano_params
from losses import LossWeights
from losses import compute_contact_sets
from losses import contact_losses
from losses import penetration_loss
from metrics import is_in_contact
from metrics import penetration_volume
from object_encoding import DEFAULT_POINTS_PER_OBJECT
from object_encoding import PointCloud

logger = logging.getLogger(__name__)

OBJECT_FAMILIES = ("sphere", "box", "cylinder", "capsule", "composite")
EXTERNAL_FAMILY = "external"
MIN_EXTENT = 0.03
MAX_EXTENT = 0.12

DATASET_MAGIC = b"DVQD"
DATASET_VERSION = 1
DATASET_HEADER = struct.Struct("<4sII")


class GenerationFailureError(RuntimeError):
    pass


class DatasetVersionError(ValueError):
    pass


@dataclass
class ObjectSpec:
    """Primitive family and its dimensions in meters.

    sphere: (radius,); box: (x, y, z); cylinder and capsule: (radius, height);
    composite: (radius, height, handle_length, handle_thickness), a cylinder
    with a square box handle sticking out of its side; external: bounding box
    size of an imported mesh
    """

    family: str
    dimensions: tuple[float, ...]

    def extent(self) -> float:
        if self.family == "sphere":
            return 2.0 * self.dimensions[0]
        if self.family == "box":
            return max(self.dimensions)
        if self.family == "composite":
            radius, height, length, thickness = self.dimensions
            return max(2.0 * radius + length, height, thickness)
        radius, height = self.dimensions
        if self.family == "capsule":
            return max(2.0 * radius, height + 2.0 * radius)
        return max(2.0 * radius, height)

    def validate(self) -> None:
        arity = {"sphere": 1, "box": 3, "cylinder": 2, "capsule": 2, "composite": 4}
        if self.family not in arity:
            error_msg = (
                f"Unknown object family '{self.family}'; use one of {OBJECT_FAMILIES}"
            )
            raise ValueError(error_msg)
        if len(self.dimensions) != arity[self.family] or min(self.dimensions) <= 0:
            error_msg = f"Invalid dimensions {self.dimensions} for a {self.family}"
            raise ValueError(error_msg)
        if self.family == "composite":
            radius, height, _, thickness = self.dimensions
            if thickness >= min(2.0 * radius, height):
                error_msg = (
                    f"Handle thickness {thickness} must be below the body "
                    "diameter and height"
                )
                raise ValueError(error_msg)
        if not MIN_EXTENT <= self.extent() <= MAX_EXTENT:
            error_msg = (
                f"Object extent {self.extent():.3f} m outside "
                f"[{MIN_EXTENT}, {MAX_EXTENT}] m"
            )
            raise ValueError(error_msg)


@dataclass
class OracleConfig:
    steps: int = 120
    learning_rate: float = 2e-3
    approach_gap: float = 0.01
    lambda_c: float = 1500.0
    lambda_p: float = 5.0
    max_penetration_cm3: float = 1.0
    contact_threshold: float = 0.005
    max_attempts: int = 20


@dataclass
class SyntheticObject:
    name: str
    spec: ObjectSpec
    mesh: trimesh.Trimesh
    cloud: PointCloud
    seed: int = 0


@dataclass
class SyntheticSample:
    object: SyntheticObject
    gt_params: HandParams
    gt_vertices: torch.Tensor
    seed: int = 0

    @property
    def object_mesh(self) -> trimesh.Trimesh:
        return self.object.mesh

    @property
    def object_cloud(self) -> PointCloud:
        return self.object.cloud


@dataclass
class CorpusConfig:
    num_objects: int = 64
    grasps_per_object: int = 8
    seed: int = 0
    points_per_object: int = DEFAULT_POINTS_PER_OBJECT
    num_vertices: int = 778
    workers: int = 0
    oracle: OracleConfig = field(default_factory=OracleConfig)


def random_object_spec(rng: np.random.Generator) -> ObjectSpec:
    family = OBJECT_FAMILIES[rng.integers(len(OBJECT_FAMILIES))]
    if family == "sphere":
        dims = (rng.uniform(0.02, 0.05),)
    elif family == "box":
        dims = tuple(rng.uniform(0.03, 0.10, size=3))
    elif family == "cylinder":
        dims = (rng.uniform(0.015, 0.04), rng.uniform(0.04, 0.11))
    elif family == "composite":
        dims = (
            rng.uniform(0.015, 0.03),
            rng.uniform(0.03, 0.08),
            rng.uniform(0.02, 0.05),
            rng.uniform(0.008, 0.015),
        )
    else:
        dims = (rng.uniform(0.015, 0.03), rng.uniform(0.02, 0.06))
    return ObjectSpec(family=family, dimensions=tuple(float(d) for d in dims))


def _composite(spec: ObjectSpec) -> trimesh.Trimesh:
    radius, height, length, thickness = spec.dimensions
    body = trimesh.creation.cylinder(radius=radius, height=height, sections=32)
    handle = trimesh.creation.box(extents=(length, thickness, thickness))
    handle.apply_translation((radius + 0.5 * length, 0.0, 0.0))
    mesh = trimesh.util.concatenate([body, handle])
    trimesh.repair.fix_normals(mesh, multibody=True)
    return mesh


def _primitive(spec: ObjectSpec) -> trimesh.Trimesh:
    if spec.family == "sphere":
        return trimesh.creation.icosphere(subdivisions=4, radius=spec.dimensions[0])
    if spec.family == "box":
        return trimesh.creation.box(extents=spec.dimensions)
    if spec.family == "composite":
        return _composite(spec)
    radius, height = spec.dimensions
    if spec.family == "cylinder":
        return trimesh.creation.cylinder(radius=radius, height=height, sections=32)
    return trimesh.creation.capsule(height=height, radius=radius, count=[32, 32])


def make_object(
    spec: ObjectSpec,
    seed: int,
    num_points: int = DEFAULT_POINTS_PER_OBJECT,
) -> tuple[trimesh.Trimesh, PointCloud]:
    """Watertight primitive centred on its centre of mass, randomly oriented,
    plus ``num_points`` surface samples"""
    spec.validate()
    rng = np.random.default_rng(seed)
    mesh = _primitive(spec)
    if spec.family != "sphere":
        rotation = trimesh.transformations.random_rotation_matrix(rand=rng.random(3))
        mesh.apply_transform(rotation)
    mesh.apply_translation(-mesh.center_mass)
    if not mesh.is_watertight:
        error_msg = f"Generated {spec.family} mesh is not watertight"
        raise GenerationFailureError(error_msg)
    points, _ = trimesh.sample.sample_surface(mesh, num_points, seed=seed)
    return mesh, PointCloud.from_numpy(points)


def _palm_pad(template: HandTemplate) -> np.ndarray:
    candidates = template.contact_candidates
    palm = candidates[template.part_labels[candidates] == PALM_PART]
    return template.vertices0[palm].mean(dim=0).double().numpy()


def _initial_placement(
    cloud: PointCloud, template: HandTemplate, rng: np.random.Generator, gap: float
) -> tuple[np.ndarray, np.ndarray]:
    """Axis-angle rotation and translation putting the palm pad ``gap`` above
    the object along a random approach direction, palm facing the object"""
    approach = rng.normal(size=3)
    approach /= np.linalg.norm(approach)
    align = trimesh.geometry.align_vectors([0.0, 0.0, 1.0], approach)
    twist = trimesh.transformations.rotation_matrix(
        rng.uniform(0, 2 * math.pi), approach
    )
    transform = twist @ align
    matrix = transform[:3, :3]
    angle, direction, _ = trimesh.transformations.rotation_from_matrix(transform)
    support = float((cloud.points.double().numpy() @ approach).max())
    translation = approach * (support + gap) - matrix @ _palm_pad(template)
    return angle * np.asarray(direction), translation


def _optimize_grasp(
    object_mesh: trimesh.Trimesh,
    cloud: PointCloud,
    template: HandTemplate,
    rng: np.random.Generator,
    config: OracleConfig,
) -> HandParams:
    rotation0, translation0 = _initial_placement(
        cloud, template, rng, config.approach_gap
    )
    shape = torch.tensor(rng.normal(0.0, 0.5, size=10), dtype=torch.float32)
    flexion = torch.tensor(
        rng.uniform(0.15, 0.6, size=(NUM_FINGERS, 3)), dtype=torch.float32
    ).requires_grad_(True)
    rotation = torch.tensor(rotation0, dtype=torch.float32).requires_grad_(True)
    translation = torch.tensor(translation0, dtype=torch.float32).requires_grad_(True)
    points = cloud.points.float()
    candidates = template.contact_candidates
    optimizer = torch.optim.Adam(
        [flexion, rotation, translation], lr=config.learning_rate
    )

    def params() -> HandParams:
        return HandParams(
            shape=shape,
            pose=curl_pose(flexion),
            rotation=rotation,
            translation=translation,
        )

    weights = LossWeights(lambda_c=config.lambda_c, lambda_p=config.lambda_p)
    for _ in range(config.steps):
        mesh = forward_kinematics(params(), template)
        with torch.no_grad():
            targets = torch.cdist(mesh.vertices[candidates], points).argmin(dim=1)
        sets = compute_contact_sets(
            mesh,
            cloud,
            object_mesh,
            config.contact_threshold,
            candidates=candidates,
            gt_map=targets,
        )
        l_contact, _ = contact_losses(sets, mesh, cloud, normalize=True)
        l_penetration = penetration_loss(sets, mesh, cloud)
        over = torch.relu(flexion - 1.6) ** 2
        under = torch.relu(-0.1 - flexion) ** 2
        limits = (over + under).sum()
        loss = (
            weights.lambda_c * l_contact + weights.lambda_p * l_penetration + limits
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        return HandParams(
            shape=shape.clone(),
            pose=curl_pose(flexion).detach().clone(),
            rotation=rotation.detach().clone(),
            translation=translation.detach().clone(),
        )


def make_synthetic_grasp(
    object_mesh: trimesh.Trimesh,
    cloud: PointCloud,
    seed: int,
    template: HandTemplate | None = None,
    config: OracleConfig | None = None,
) -> HandParams:
    """Oracle grasp passing the contact and penetration filters"""
    template = template or default_template()
    config = config or OracleConfig()
    rng = np.random.default_rng(seed)
    for attempt in range(1, config.max_attempts + 1):
        params = _optimize_grasp(object_mesh, cloud, template, rng, config)
        if not params.is_finite():
            logger.warning("Grasp attempt %d (seed %d) diverged", attempt, seed)
            continue
        with torch.no_grad():
            hand = forward_kinematics(params, template)
        penetration = penetration_volume(hand, object_mesh)
        touching = is_in_contact(hand, object_mesh, config.contact_threshold)
        if penetration < config.max_penetration_cm3 and touching:
            return params
        logger.warning(
            "Rejected grasp attempt %d (seed %d): penetration %.2f cm3, contact %s",
            attempt,
            seed,
            penetration,
            touching,
        )
    error_msg = f"No valid grasp after {config.max_attempts} attempts (seed {seed})"
    raise GenerationFailureError(error_msg)


def _object_samples(
    index: int, config: CorpusConfig
) -> list[SyntheticSample]:
    template = default_template(config.num_vertices)
    rng = np.random.default_rng([config.seed, index])
    spec = random_object_spec(rng)
    object_seed = int(rng.integers(2**31))
    mesh, cloud = make_object(spec, object_seed, config.points_per_object)
    obj = SyntheticObject(
        name=f"{spec.family}_{index:03d}",
        spec=spec,
        mesh=mesh,
        cloud=cloud,
        seed=object_seed,
    )
    samples = []
    for _ in range(config.grasps_per_object):
        grasp_seed = int(rng.integers(2**31))
        params = make_synthetic_grasp(mesh, cloud, grasp_seed, template, config.oracle)
        with torch.no_grad():
            vertices = forward_kinematics(params, template).vertices
        samples.append(
            SyntheticSample(
                object=obj, gt_params=params, gt_vertices=vertices, seed=grasp_seed
            )
        )
    logger.info("Generated %d grasps for %s", len(samples), obj.name)
    return samples


def generate_corpus(config: CorpusConfig | None = None) -> list[SyntheticSample]:
    config = config or CorpusConfig()
    indices = range(config.num_objects)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(_object_samples, indices, [config] * len(indices)))
    else:
        chunks = [_object_samples(i, config) for i in indices]
    return [sample for chunk in chunks for sample in chunk]


def samples_from_external(
    mesh_path: str | Path,
    params_path: str | Path,
    template: HandTemplate | None = None,
    num_points: int = DEFAULT_POINTS_PER_OBJECT,
    seed: int = 0,
) -> list[SyntheticSample]:
    """Wrap an externally supplied object mesh and MANO-format grasps"""
    template = template or default_template()
    mesh = trimesh.load(mesh_path, force="mesh")
    if not mesh.is_watertight:
        error_msg = f"{mesh_path} is not a watertight mesh"
        raise ValueError(error_msg)
    points, _ = trimesh.sample.sample_surface(mesh, num_points, seed=seed)
    lower, upper = mesh.bounds
    spec = ObjectSpec(
        family=EXTERNAL_FAMILY, dimensions=tuple(float(v) for v in upper - lower)
    )
    obj = SyntheticObject(
        name=Path(mesh_path).stem,
        spec=spec,
        mesh=mesh,
        cloud=PointCloud.from_numpy(points),
        seed=seed,
    )
    params = load_mano_params(params_path)
    with torch.no_grad():
        vertices = forward_kinematics(params, template).vertices
    return [
        SyntheticSample(
            object=obj,
            gt_params=HandParams.from_vector(params.to_vector()[i]),
            gt_vertices=vertices[i],
        )
        for i in range(vertices.shape[0])
    ]


def save_dataset(samples: list[SyntheticSample], path: str | Path) -> None:
    """Write the dataset archive (layout in docs/FILE_FORMATS.md)"""
    if not samples:
        error_msg = "Refusing to save an empty dataset"
        raise ValueError(error_msg)

    objects: list[SyntheticObject] = []
    object_index: dict[int, int] = {}
    for sample in samples:
        if id(sample.object) not in object_index:
            object_index[id(sample.object)] = len(objects)
            objects.append(sample.object)

    arrays: list[tuple[str, np.ndarray]] = []
    for i, obj in enumerate(objects):
        vertices = np.asarray(obj.mesh.vertices, dtype="<f8")
        arrays.append((f"object/{i}/vertices", vertices))
        arrays.append((f"object/{i}/faces", np.asarray(obj.mesh.faces, dtype="<i4")))
        arrays.append((f"object/{i}/cloud", obj.cloud.points.numpy().astype("<f4")))
    params = torch.stack([s.gt_params.to_vector() for s in samples])
    vertices = torch.stack([s.gt_vertices for s in samples])
    arrays.append(("params", params.numpy().astype("<f4")))
    arrays.append(("vertices", vertices.numpy().astype("<f4")))

    table = []
    offset = 0
    for name, array in arrays:
        table.append(
            {
                "name": name,
                "dtype": array.dtype.str,
                "shape": list(array.shape),
                "offset": offset,
            }
        )
        offset += array.nbytes
    manifest = {
        "version": DATASET_VERSION,
        "num_vertices": int(vertices.shape[1]),
        "objects": [
            {
                "name": obj.name,
                "family": obj.spec.family,
                "dimensions": list(obj.spec.dimensions),
                "seed": obj.seed,
            }
            for obj in objects
        ],
        "samples": [
            {"object": object_index[id(s.object)], "seed": s.seed} for s in samples
        ],
        "arrays": table,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(encoded)))
        f.write(encoded)
        for _, array in arrays:
            f.write(array.tobytes())
    logger.info(
        "Saved %d samples over %d objects to %s", len(samples), len(objects), path
    )


def load_dataset(path: str | Path) -> list[SyntheticSample]:
    data = Path(path).read_bytes()
    if len(data) < DATASET_HEADER.size:
        error_msg = f"Dataset {path} is truncated"
        raise DatasetVersionError(error_msg)
    magic, version, manifest_size = DATASET_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        error_msg = f"Unsupported dataset archive {path} (version {version})"
        raise DatasetVersionError(error_msg)
    body_start = DATASET_HEADER.size + manifest_size
    try:
        manifest = json.loads(data[DATASET_HEADER.size : body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        error_msg = f"Dataset {path} has a corrupted manifest"
        raise DatasetVersionError(error_msg) from e

    arrays = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        start = body_start + entry["offset"]
        if start + count * dtype.itemsize > len(data):
            error_msg = f"Dataset {path} is truncated"
            raise DatasetVersionError(error_msg)
        arrays[entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=count, offset=start
        ).reshape(entry["shape"])
    if not manifest["samples"]:
        error_msg = f"Dataset {path} holds no samples"
        raise ValueError(error_msg)

    objects = []
    for i, info in enumerate(manifest["objects"]):
        mesh = trimesh.Trimesh(
            vertices=arrays[f"object/{i}/vertices"].copy(),
            faces=arrays[f"object/{i}/faces"].astype(np.int64),
            process=False,
        )
        objects.append(
            SyntheticObject(
                name=info["name"],
                spec=ObjectSpec(info["family"], tuple(info["dimensions"])),
                mesh=mesh,
                cloud=PointCloud(
                    points=torch.from_numpy(arrays[f"object/{i}/cloud"].copy())
                ),
                seed=info["seed"],
            )
        )
    params = torch.from_numpy(arrays["params"].copy())
    vertices = torch.from_numpy(arrays["vertices"].copy())
    if params.shape[1] != PARAM_DIM:
        error_msg = f"Dataset {path} stores {params.shape[1]} hand parameters"
        raise DatasetVersionError(error_msg)
    return [
        SyntheticSample(
            object=objects[info["object"]],
            gt_params=HandParams.from_vector(params[i]),
            gt_vertices=vertices[i],
            seed=info["seed"],
        )
        for i, info in enumerate(manifest["samples"])
    ]
