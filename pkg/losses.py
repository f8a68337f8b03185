"""Reconstruction, contact and penetration losses for grasp training."""

import logging
import math
from dataclasses import dataclass
from dataclasses import fields

import numpy as np
import torch
import trimesh
from torch import Tensor

from hand_model import HandMesh
from hand_model import HandParams
from hand_model import HandTemplate
from hand_model import forward_kinematics
from object_encoding import PointCloud

logger = logging.getLogger(__name__)

DEFAULT_CONTACT_THRESHOLD = 0.005


class InsideTestError(ValueError):
    pass


class LossDiagnosticsError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_e: float = 10.0
    lambda_m: float = -50.0
    lambda_c: float = 1500.0
    lambda_p: float = 5.0
    lambda_h: float = 0.1
    lambda_v: float = 10.0
    beta: float = 0.25

    def __post_init__(self) -> None:
        if self.lambda_m > 0:
            error_msg = (
                "lambda_m rewards contact coverage and must be <= 0, "
                f"got {self.lambda_m}"
            )
            raise ValueError(error_msg)
        if self.beta < 0:
            error_msg = f"beta must be nonnegative, got {self.beta}"
            raise ValueError(error_msg)


@dataclass
class ContactSets:
    gt_map: Tensor
    predicted_map: Tensor
    candidates: Tensor
    inside: Tensor


@dataclass
class ReconstructionLosses:
    posture: Tensor
    position: Tensor
    vertices: Tensor
    total: Tensor


@dataclass
class LossComponents:
    reconstruction: Tensor
    codebook: Tensor
    contact_map: Tensor
    contact: Tensor
    penetration: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _empty_index(device: torch.device | None = None) -> Tensor:
    return torch.zeros(0, dtype=torch.long, device=device)


def reconstruction_total(
    l_posture: Tensor | float,
    l_position: Tensor | float,
    l_vertices: Tensor | float,
    weights: LossWeights,
) -> Tensor | float:
    return weights.lambda_h * (l_posture + l_position) + weights.lambda_v * l_vertices


def reconstruction_loss(
    gt: HandParams,
    pred_posture: Tensor,
    pred_position: Tensor,
    gt_vertices: Tensor,
    template: HandTemplate,
    weights: LossWeights,
) -> ReconstructionLosses:
    """L2 distances of posture, position and skinned vertices, batch-averaged"""
    l_posture = torch.linalg.vector_norm(gt.posture() - pred_posture, dim=-1).mean()
    l_position = torch.linalg.vector_norm(gt.position() - pred_position, dim=-1).mean()
    predicted = HandParams.from_parts(pred_posture, pred_position)
    mesh = forward_kinematics(predicted, template)
    diff = (mesh.vertices - gt_vertices).flatten(start_dim=-2)
    l_vertices = torch.linalg.vector_norm(diff, dim=-1).mean()
    return ReconstructionLosses(
        posture=l_posture,
        position=l_position,
        vertices=l_vertices,
        total=reconstruction_total(l_posture, l_position, l_vertices, weights),
    )


def contact_map(vertices: Tensor, points: Tensor, tau: float) -> Tensor:
    """Indices of object points within ``tau`` of any hand vertex"""
    with torch.no_grad():
        nearest = torch.cdist(points, vertices).min(dim=1).values
    return torch.nonzero(nearest <= tau).flatten()


def inside_vertices(vertices: Tensor, object_mesh: trimesh.Trimesh) -> Tensor:
    """Indices of hand vertices strictly inside a watertight object mesh"""
    if not object_mesh.is_watertight:
        error_msg = "Inside test needs a watertight object mesh"
        raise InsideTestError(error_msg)
    points = vertices.detach().cpu().numpy().astype(np.float64)
    lower, upper = object_mesh.bounds
    in_box = np.all((points > lower) & (points < upper), axis=1)
    inside = np.zeros(len(points), dtype=bool)
    if in_box.any():
        inside[in_box] = object_mesh.contains(points[in_box])
    return torch.from_numpy(np.flatnonzero(inside)).to(vertices.device)


def compute_contact_sets(
    hand: HandMesh,
    cloud: PointCloud,
    object_mesh: trimesh.Trimesh,
    tau: float = DEFAULT_CONTACT_THRESHOLD,
    candidates: Tensor | None = None,
    gt_hand: HandMesh | None = None,
    gt_map: Tensor | None = None,
) -> ContactSets:
    """Contact sets of one (unbatched) hand against one object.

    The ground-truth map comes from ``gt_map`` when cached, otherwise from
    ``gt_hand`` by the same threshold rule, otherwise it is empty.
    """
    if tau <= 0:
        error_msg = f"Contact threshold must be positive, got {tau}"
        raise ValueError(error_msg)
    vertices = hand.vertices
    if vertices.ndim != 2:
        error_msg = "compute_contact_sets works on a single hand; loop over the batch"
        raise ValueError(error_msg)
    points = cloud.points.to(vertices.dtype)
    if gt_map is None:
        gt_map = (
            contact_map(gt_hand.vertices.to(points.dtype), points, tau)
            if gt_hand is not None
            else _empty_index(points.device)
        )
    if candidates is None:
        candidates = torch.arange(vertices.shape[0], device=vertices.device)
    return ContactSets(
        gt_map=gt_map.unique(),
        predicted_map=contact_map(vertices, points, tau),
        candidates=candidates.unique(),
        inside=inside_vertices(vertices, object_mesh),
    )


def contact_losses(
    sets: ContactSets, hand: HandMesh, cloud: PointCloud, normalize: bool = False
) -> tuple[Tensor, Tensor]:
    """(L_c, L_m): distance from every ground-truth contact point to the nearest
    candidate hand vertex, and the coverage ratio of the ground-truth map"""
    vertices = hand.vertices
    points = cloud.points.to(vertices.dtype)
    if sets.gt_map.numel() == 0 or sets.candidates.numel() == 0:
        l_contact = vertices.sum() * 0.0
    else:
        distances = torch.cdist(points[sets.gt_map], vertices[sets.candidates])
        l_contact = distances.min(dim=1).values.sum()
        if normalize:
            l_contact = l_contact / points.shape[0]
    if sets.gt_map.numel() == 0:
        l_map = torch.zeros((), dtype=vertices.dtype, device=vertices.device)
    else:
        covered = torch.isin(sets.gt_map, sets.predicted_map).sum()
        l_map = (covered / sets.gt_map.numel()).to(vertices.dtype)
    return l_contact, l_map


def penetration_loss(sets: ContactSets, hand: HandMesh, cloud: PointCloud) -> Tensor:
    """Squared distance of every penetrating vertex to its nearest object point"""
    vertices = hand.vertices
    if sets.inside.numel() == 0:
        return vertices.sum() * 0.0
    inside = vertices[sets.inside]
    points = cloud.points.to(vertices.dtype)
    return (torch.cdist(inside, points).min(dim=1).values ** 2).sum()


def total_loss(
    reconstruction: Tensor | float,
    codebook: Tensor | float,
    contact_map_ratio: Tensor | float,
    contact: Tensor | float,
    penetration: Tensor | float,
    weights: LossWeights,
) -> LossComponents:
    """L_R + L_E + lambda_m * L_m + lambda_c * L_c + lambda_p * L_p"""
    named = {
        "reconstruction": torch.as_tensor(reconstruction),
        "codebook": torch.as_tensor(codebook),
        "contact_map": torch.as_tensor(contact_map_ratio),
        "contact": torch.as_tensor(contact),
        "penetration": torch.as_tensor(penetration),
    }
    for name, value in named.items():
        if not torch.isfinite(value).all():
            error_msg = f"Loss component '{name}' is not finite ({value.item()})"
            raise LossDiagnosticsError(error_msg)
    total = (
        named["reconstruction"]
        + named["codebook"]
        + weights.lambda_m * named["contact_map"]
        + weights.lambda_c * named["contact"]
        + weights.lambda_p * named["penetration"]
    )
    if not math.isfinite(float(total)):
        error_msg = f"Weighted total loss is not finite ({float(total)})"
        raise LossDiagnosticsError(error_msg)
    return LossComponents(**named, total=total)
