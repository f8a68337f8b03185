"""Posture-then-position decoding with a gated skeletal correction."""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor
from torch import nn

from hand_model import POSITION_DIM
from hand_model import POSTURE_DIM
from hand_model import HandParams
from hand_model import HandTemplate
from hand_model import forward_kinematics
from hand_model import joint_angles

logger = logging.getLogger(__name__)


@dataclass
class GateCorrection:
    gate: Tensor
    delta: Tensor

    def apply(self, posture: Tensor) -> Tensor:
        return posture + self.gate * self.delta


@dataclass
class DecoderOutput:
    raw_posture: Tensor
    posture: Tensor
    position: Tensor
    correction: GateCorrection | None


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class SkeletalCorrection(nn.Module):
    """posture + G(theta) * T(posture).

    G maps the joint angles of the zero-position hand to a [0, 1] gate per
    posture value; T runs one attention block over the posture split into
    fixed-size chunks.
    """

    def __init__(
        self,
        template: HandTemplate,
        chunk: int = 5,
        hidden: int = 64,
        heads: int = 1,
    ) -> None:
        super().__init__()
        self.template = template
        self.chunk = chunk
        self.num_tokens = math.ceil(POSTURE_DIM / chunk)
        self.gate = nn.Sequential(
            nn.Linear(template.num_angles, hidden),
            nn.ReLU(),
            nn.Linear(hidden, POSTURE_DIM),
            nn.Sigmoid(),
        )
        self.embed = nn.Linear(chunk, hidden)
        self.token_position = nn.Parameter(torch.zeros(self.num_tokens, hidden))
        self.block = nn.TransformerEncoderLayer(
            d_model=hidden,
            nhead=heads,
            dim_feedforward=2 * hidden,
            dropout=0.0,
            batch_first=True,
        )
        self.project = nn.Linear(hidden, chunk)

    def angles(self, posture: Tensor) -> Tensor:
        template = self.template.to(dtype=posture.dtype, device=posture.device)
        position = posture.new_zeros(*posture.shape[:-1], POSITION_DIM)
        mesh = forward_kinematics(HandParams.from_parts(posture, position), template)
        return joint_angles(mesh.joints, template.angle_triplets)

    def transform(self, posture: Tensor) -> Tensor:
        batch_shape = posture.shape[:-1]
        flat = posture.reshape(-1, POSTURE_DIM)
        padded = F.pad(flat, (0, self.num_tokens * self.chunk - POSTURE_DIM))
        tokens = self.embed(padded.reshape(-1, self.num_tokens, self.chunk))
        tokens = self.block(tokens + self.token_position)
        delta = self.project(tokens).reshape(-1, self.num_tokens * self.chunk)
        return delta[:, :POSTURE_DIM].reshape(*batch_shape, POSTURE_DIM)

    def gate_correction(self, posture: Tensor) -> GateCorrection:
        return GateCorrection(
            gate=self.gate(self.angles(posture)), delta=self.transform(posture)
        )

    def forward(self, posture: Tensor) -> Tensor:
        return self.gate_correction(posture).apply(posture)


class DualStageDecoder(nn.Module):
    def __init__(
        self,
        template: HandTemplate,
        num_parts: int = 6,
        latent_dim: int = 64,
        hidden: int = 256,
        correction_chunk: int = 5,
        correction_hidden: int = 64,
        use_correction: bool = True,
        reverse_stages: bool = False,
    ) -> None:
        super().__init__()
        self.num_parts = num_parts
        self.latent_dim = latent_dim
        self.reverse_stages = reverse_stages
        parts_dim = num_parts * latent_dim
        if reverse_stages:
            # position from (parts, z_p); posture from (parts, z_t, position feature)
            self.position_decoder = _mlp(parts_dim + latent_dim, hidden, POSITION_DIM)
            self.position_encoder = _mlp(POSITION_DIM, hidden // 2, latent_dim)
            self.posture_decoder = _mlp(parts_dim + 2 * latent_dim, hidden, POSTURE_DIM)
        else:
            self.posture_decoder = _mlp(parts_dim + latent_dim, hidden, POSTURE_DIM)
            self.posture_encoder = _mlp(POSTURE_DIM, hidden // 2, latent_dim)
            self.position_decoder = _mlp(2 * latent_dim, hidden, POSITION_DIM)
        self.correction = (
            SkeletalCorrection(template, correction_chunk, correction_hidden)
            if use_correction
            else None
        )

    def _check_parts(self, zq_f: list[Tensor]) -> Tensor:
        if len(zq_f) != self.num_parts:
            error_msg = f"Expected {self.num_parts} part features, got {len(zq_f)}"
            raise ValueError(error_msg)
        for feature in zq_f:
            if feature.shape[-1] != self.latent_dim:
                error_msg = (
                    f"Part feature width {feature.shape[-1]} != latent width "
                    f"{self.latent_dim}"
                )
                raise ValueError(error_msg)
        return torch.cat(list(zq_f), dim=-1)

    def decode_posture(self, zq_f: list[Tensor], z_t: Tensor) -> Tensor:
        """Raw posture (55 values) before the skeletal correction"""
        if self.reverse_stages:
            error_msg = "decode_posture needs the position feature in reversed order"
            raise RuntimeError(error_msg)
        return self.posture_decoder(torch.cat([self._check_parts(zq_f), z_t], dim=-1))

    def skeletal_correction(self, posture: Tensor) -> Tensor:
        if self.correction is None:
            return posture
        return self.correction(posture)

    def _correct(self, raw: Tensor) -> tuple[Tensor, GateCorrection | None]:
        if self.correction is None:
            return raw, None
        correction = self.correction.gate_correction(raw)
        return correction.apply(raw), correction

    def encode_posture(self, posture: Tensor) -> Tensor:
        return self.posture_encoder(posture)

    def decode_position(self, z_h: Tensor, z_p: Tensor) -> Tensor:
        return self.position_decoder(torch.cat([z_h, z_p], dim=-1))

    def forward(self, zq_f: list[Tensor], z_t: Tensor, z_p: Tensor) -> DecoderOutput:
        if self.reverse_stages:
            return self._forward_reversed(zq_f, z_t, z_p)
        raw = self.decode_posture(zq_f, z_t)
        posture, correction = self._correct(raw)
        # stop-gradient: the position loss never reaches the posture stage
        z_h = self.encode_posture(posture.detach())
        position = self.decode_position(z_h, z_p)
        return DecoderOutput(
            raw_posture=raw, posture=posture, position=position, correction=correction
        )

    def _forward_reversed(
        self, zq_f: list[Tensor], z_t: Tensor, z_p: Tensor
    ) -> DecoderOutput:
        parts = self._check_parts(zq_f)
        position = self.position_decoder(torch.cat([parts, z_p], dim=-1))
        z_pos = self.position_encoder(position.detach())
        raw = self.posture_decoder(torch.cat([parts, z_t, z_pos], dim=-1))
        posture, correction = self._correct(raw)
        return DecoderOutput(
            raw_posture=raw, posture=posture, position=position, correction=correction
        )
