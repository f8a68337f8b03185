"""Permutation-invariant point-set encoders for objects and hand parts."""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor
from torch import nn

logger = logging.getLogger(__name__)

OBJECT_TYPE = "object_type"
OBJECT_POSE = "object_pose"
DEFAULT_POINTS_PER_OBJECT = 3000


class InvalidInputError(ValueError):
    pass


class ArityError(ValueError):
    pass


def part_encoder_id(part: int) -> str:
    """Encoder id of hand part ``part`` (0-based) -> ``part_1`` ... ``part_N``"""
    return f"part_{part + 1}"


@dataclass
class PointCloud:
    points: Tensor

    @property
    def num_points(self) -> int:
        return self.points.shape[-2]

    @classmethod
    def from_numpy(cls, points: np.ndarray) -> "PointCloud":
        return cls(points=torch.as_tensor(np.asarray(points), dtype=torch.float32))

    def validate(self) -> None:
        if self.points.ndim < 2 or self.points.shape[-1] != 3:
            shape = tuple(self.points.shape)
            error_msg = f"Point cloud must have shape (..., n, 3), got {shape}"
            raise InvalidInputError(error_msg)
        if self.num_points < 1:
            error_msg = "Point cloud is empty"
            raise InvalidInputError(error_msg)
        if not torch.isfinite(self.points).all():
            error_msg = "Point cloud contains non-finite coordinates"
            raise InvalidInputError(error_msg)

    def masked(
        self, ratio: float, generator: torch.Generator | None = None
    ) -> "PointCloud":
        """Randomly drop ``ratio`` of the points, keeping at least one"""
        if not 0.0 <= ratio < 1.0:
            error_msg = f"Mask ratio must be in [0, 1), got {ratio}"
            raise ValueError(error_msg)
        keep = max(1, math.ceil((1.0 - ratio) * self.num_points))
        order = torch.randperm(self.num_points, generator=generator)
        index = order[:keep].sort().values
        return PointCloud(points=self.points[..., index, :])


class PointNetEncoder(nn.Module):
    """Shared per-point MLP (1x1 convolutions) followed by global max pooling."""

    def __init__(
        self,
        in_channels: int = 3,
        feat_dim: int = 64,
        hidden: tuple[int, ...] = (64, 128),
    ) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        width = in_channels
        for size in hidden:
            layers.extend([nn.Conv1d(width, size, kernel_size=1), nn.ReLU()])
            width = size
        layers.append(nn.Conv1d(width, feat_dim, kernel_size=1))
        self.mlp = nn.Sequential(*layers)
        self.feat_dim = feat_dim

    def forward(self, points: Tensor) -> Tensor:
        """(B, N, 3) or (N, 3) -> (B, feat_dim) or (feat_dim,)"""
        single = points.ndim == 2
        if single:
            points = points.unsqueeze(0)
        feats = self.mlp(points.transpose(1, 2))
        feats = feats.max(dim=2).values
        return feats.squeeze(0) if single else feats


class SetEncoders(nn.Module):
    """Object type/pose encoders plus one encoder per hand part."""

    def __init__(
        self,
        latent_dim: int = 64,
        num_parts: int = 6,
        hidden: tuple[int, ...] = (64, 128),
        shared_object_encoder: bool = False,
    ) -> None:
        super().__init__()
        self.latent_dim = latent_dim
        self.num_parts = num_parts
        self.shared_object_encoder = shared_object_encoder
        self.object_type = PointNetEncoder(3, latent_dim, hidden)
        if shared_object_encoder:
            self.object_pose = self.object_type
        else:
            self.object_pose = PointNetEncoder(3, latent_dim, hidden)
        self.parts = nn.ModuleList(
            PointNetEncoder(3, latent_dim, hidden) for _ in range(num_parts)
        )

    def encoder(self, encoder_id: str) -> PointNetEncoder:
        if encoder_id == OBJECT_TYPE:
            return self.object_type
        if encoder_id == OBJECT_POSE:
            return self.object_pose
        if encoder_id.startswith("part_"):
            part = int(encoder_id.removeprefix("part_")) - 1
            if 0 <= part < self.num_parts:
                return self.parts[part]
        error_msg = f"Unknown encoder id: {encoder_id}"
        raise InvalidInputError(error_msg)

    def encode_pointset(self, cloud: PointCloud | Tensor, encoder_id: str) -> Tensor:
        if not isinstance(cloud, PointCloud):
            cloud = PointCloud(points=cloud)
        cloud.validate()
        return self.encoder(encoder_id)(cloud.points)

    def encode_object(self, cloud: PointCloud | Tensor) -> tuple[Tensor, Tensor]:
        """(z_t, z_p); a shared encoder yields the same feature twice"""
        z_t = self.encode_pointset(cloud, OBJECT_TYPE)
        if self.shared_object_encoder:
            return z_t, z_t
        return z_t, self.encode_pointset(cloud, OBJECT_POSE)

    def encode_hand_parts(
        self, parts: list[Tensor] | tuple[Tensor, ...]
    ) -> list[Tensor]:
        if len(parts) != self.num_parts:
            error_msg = f"Expected {self.num_parts} hand parts, got {len(parts)}"
            raise ArityError(error_msg)
        return [
            self.encode_pointset(points, part_encoder_id(i))
            for i, points in enumerate(parts)
        ]
