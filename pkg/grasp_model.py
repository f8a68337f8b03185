"""Decomposed VQ-VAE for grasps: encoders, codebooks and the dual-stage decoder."""

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor
from torch import nn

from autoregressive_prior import PriorModel
from autoregressive_prior import sample_indices
from decomposed_quantizer import DecomposedQuantizer
from decomposed_quantizer import QuantizeResult
from decomposed_quantizer import straight_through
from dual_stage_decoder import DecoderOutput
from dual_stage_decoder import DualStageDecoder
from hand_model import HandMesh
from hand_model import HandParams
from hand_model import HandTemplate
from hand_model import center_vertices
from hand_model import default_template
from hand_model import forward_kinematics
from hand_model import group_parts
from hand_model import partition_vertices
from object_encoding import PointCloud
from object_encoding import SetEncoders

logger = logging.getLogger(__name__)


class NotReadyError(RuntimeError):
    pass


@dataclass
class ForwardOutput:
    z_t: Tensor
    z_p: Tensor
    object_code: QuantizeResult
    z_f: list[Tensor]
    part_codes: list[QuantizeResult]
    decoded: DecoderOutput

    @property
    def indices(self) -> Tensor:
        """(B, 1 + num_parts) codebook index sequence, object first"""
        return torch.stack(
            [self.object_code.index, *[code.index for code in self.part_codes]], dim=-1
        )


@dataclass
class GeneratedGrasps:
    params: HandParams
    mesh: HandMesh
    object_index: int
    part_indices: Tensor


class GraspVQVAE(nn.Module):
    def __init__(
        self,
        template: HandTemplate,
        num_parts: int = 6,
        latent_dim: int = 64,
        codebook_size: int = 64,
        encoder_hidden: tuple[int, ...] = (64, 128),
        decoder_hidden: int = 256,
        correction_chunk: int = 5,
        correction_hidden: int = 64,
        use_correction: bool = True,
        shared_object_encoder: bool = False,
        reverse_stages: bool = False,
    ) -> None:
        super().__init__()
        self.template = template
        self.num_parts = num_parts
        self.hparams = {
            "num_vertices": template.num_vertices,
            "num_parts": num_parts,
            "latent_dim": latent_dim,
            "codebook_size": codebook_size,
            "encoder_hidden": list(encoder_hidden),
            "decoder_hidden": decoder_hidden,
            "correction_chunk": correction_chunk,
            "correction_hidden": correction_hidden,
            "use_correction": use_correction,
            "shared_object_encoder": shared_object_encoder,
            "reverse_stages": reverse_stages,
        }
        self.encoders = SetEncoders(
            latent_dim, num_parts, tuple(encoder_hidden), shared_object_encoder
        )
        self.quantizer = DecomposedQuantizer(num_parts, codebook_size, latent_dim)
        self.decoder = DualStageDecoder(
            template,
            num_parts=num_parts,
            latent_dim=latent_dim,
            hidden=decoder_hidden,
            correction_chunk=correction_chunk,
            correction_hidden=correction_hidden,
            use_correction=use_correction,
            reverse_stages=reverse_stages,
        )
        self.register_buffer("trained", torch.tensor(False))

    @property
    def is_trained(self) -> bool:
        return bool(self.trained)

    def mark_trained(self) -> None:
        self.trained.fill_(True)

    def hand_parts(self, gt_vertices: Tensor) -> list[Tensor]:
        """Centre the hand, split it into parts and merge them into N groups"""
        centered, _ = center_vertices(gt_vertices)
        mesh = HandMesh(
            vertices=centered, joints=centered.new_zeros(0), faces=self.template.faces
        )
        return group_parts(partition_vertices(mesh, self.template), self.num_parts)

    def forward(self, object_points: Tensor, gt_vertices: Tensor) -> ForwardOutput:
        z_t, z_p = self.encoders.encode_object(object_points)
        object_code = self.quantizer.quantize_object(z_t)
        z_f = self.encoders.encode_hand_parts(self.hand_parts(gt_vertices))
        part_codes = self.quantizer.quantize_parts(z_f)
        zq_f = [
            straight_through(z, code)
            for z, code in zip(z_f, part_codes, strict=True)
        ]
        decoded = self.decoder(zq_f, z_t, z_p)
        return ForwardOutput(
            z_t=z_t,
            z_p=z_p,
            object_code=object_code,
            z_f=z_f,
            part_codes=part_codes,
            decoded=decoded,
        )

    @classmethod
    def from_hparams(
        cls, hparams: dict, template: HandTemplate | None = None
    ) -> "GraspVQVAE":
        template = template or default_template(hparams["num_vertices"])
        kwargs = {k: v for k, v in hparams.items() if k != "num_vertices"}
        kwargs["encoder_hidden"] = tuple(kwargs["encoder_hidden"])
        return cls(template, **kwargs)


def _check_ready(model: GraspVQVAE, prior: PriorModel | None) -> None:
    if not model.is_trained:
        error_msg = "Grasp model has not been trained"
        raise NotReadyError(error_msg)
    if prior is None:
        error_msg = "No fitted prior; run the second training phase first"
        raise NotReadyError(error_msg)
    if prior.vocab_sizes != model.quantizer.vocab_sizes():
        error_msg = (
            f"Prior vocabularies {prior.vocab_sizes} do not match the codebooks "
            f"{model.quantizer.vocab_sizes()}"
        )
        raise NotReadyError(error_msg)


@torch.no_grad()
def generate_grasp(
    model: GraspVQVAE,
    prior: PriorModel | None,
    cloud: PointCloud,
    seed: int = 0,
    num: int = 1,
    temperature: float = 1.0,
) -> GeneratedGrasps:
    """Sample ``num`` grasps for one object cloud; deterministic given seed"""
    _check_ready(model, prior)
    model.eval()
    prior.eval()
    points = cloud.points.float().unsqueeze(0)
    z_t, z_p = model.encoders.encode_object(points)
    object_index = model.quantizer.quantize_object(z_t).index
    generator = torch.Generator().manual_seed(seed)
    part_indices = sample_indices(
        prior, object_index.expand(num), temperature=temperature, generator=generator
    )
    zq_f = model.quantizer.lookup_parts(part_indices)
    decoded = model.decoder(zq_f, z_t.expand(num, -1), z_p.expand(num, -1))
    params = HandParams.from_parts(decoded.posture, decoded.position)
    mesh = forward_kinematics(params, model.template)
    return GeneratedGrasps(
        params=params,
        mesh=mesh,
        object_index=int(object_index[0]),
        part_indices=part_indices,
    )


@torch.no_grad()
def refine_position(
    model: GraspVQVAE, cloud: PointCloud, params: HandParams
) -> HandParams:
    """Keep the given posture and re-decode the position for this object"""
    if not model.is_trained:
        error_msg = "Grasp model has not been trained"
        raise NotReadyError(error_msg)
    if model.decoder.reverse_stages:
        error_msg = "Position refinement needs posture-first decoding"
        raise NotReadyError(error_msg)
    model.eval()
    posture = params.posture().float()
    single = posture.ndim == 1
    posture = posture.reshape(-1, posture.shape[-1])
    _, z_p = model.encoders.encode_object(cloud.points.float().unsqueeze(0))
    z_h = model.decoder.encode_posture(posture)
    position = model.decoder.decode_position(z_h, z_p.expand(posture.shape[0], -1))
    refined = HandParams.from_parts(posture, position)
    if single:
        return HandParams.from_vector(refined.to_vector()[0])
    return refined


def save_checkpoint(model: GraspVQVAE, path: str | Path, **extra) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "hparams": model.hparams,
            "state_dict": model.state_dict(),
            "usage": model.quantizer.usage_histogram(),
            **extra,
        },
        path,
    )
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(
    path: str | Path, template: HandTemplate | None = None
) -> tuple[GraspVQVAE, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = GraspVQVAE.from_hparams(payload["hparams"], template)
    model.load_state_dict(payload["state_dict"])
    return model, payload
