"""Two-phase training: the grasp VQ-VAE first, then the prior on frozen codes."""

import csv
import logging
import time
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import torch
from torch import Tensor

from autoregressive_prior import PriorModel
from autoregressive_prior import fit_prior
from autoregressive_prior import save_prior
from config import RunConfig
from datagen import SyntheticSample
from db import Database
from db import EpochLoss
from decomposed_quantizer import codebook_losses
from grasp_model import ForwardOutput
from grasp_model import GraspVQVAE
from grasp_model import save_checkpoint
from hand_model import HandMesh
from hand_model import HandParams
from hand_model import default_template
from hand_model import forward_kinematics
from losses import LossComponents
from losses import compute_contact_sets
from losses import contact_losses
from losses import contact_map
from losses import penetration_loss
from losses import reconstruction_loss
from losses import total_loss

logger = logging.getLogger(__name__)

LOSS_COLUMNS = (
    "epoch",
    "total",
    "reconstruction",
    "codebook",
    "contact_map",
    "contact",
    "penetration",
    "posture",
    "position",
    "vertices",
    "learning_rate",
)
CHECKPOINT_NAME = "model.pt"
RESUME_NAME = "resume.pt"
PRIOR_NAME = "prior.pt"


@dataclass
class TrainResult:
    model: GraspVQVAE
    prior: PriorModel | None
    history: list[dict[str, float]] = field(default_factory=list)
    prior_history: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    prior_checkpoint: Path | None = None


def build_model(config: RunConfig) -> GraspVQVAE:
    return GraspVQVAE(
        default_template(config.hand.num_vertices),
        num_parts=config.model.num_parts,
        latent_dim=config.model.latent_dim,
        codebook_size=config.quantizer.codebook_size,
        encoder_hidden=tuple(config.model.encoder_hidden),
        decoder_hidden=config.decoder.hidden,
        correction_chunk=config.decoder.correction_chunk,
        correction_hidden=config.decoder.correction_hidden,
        use_correction=config.decoder.use_correction,
        shared_object_encoder=config.model.shared_object_encoder,
        reverse_stages=config.decoder.reverse_stages,
    )


def _stack(samples: list[SyntheticSample]) -> tuple[Tensor, Tensor, HandParams]:
    points = torch.stack([s.object_cloud.points.float() for s in samples])
    vertices = torch.stack([s.gt_vertices.float() for s in samples])
    vectors = torch.stack([s.gt_params.to_vector() for s in samples])
    params = HandParams.from_vector(vectors)
    return points, vertices, params


def epoch_order(num_samples: int, seed: int, epoch: int) -> Tensor:
    """Shuffle depends only on (seed, epoch) so resumed runs see the same batches"""
    generator = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(num_samples, generator=generator)


def gt_contact_maps(samples: list[SyntheticSample], tau: float) -> list[Tensor]:
    return [
        contact_map(s.gt_vertices.float(), s.object_cloud.points.float(), tau)
        for s in samples
    ]


@torch.no_grad()
def initialize_codebooks(
    model: GraspVQVAE, samples: list[SyntheticSample], seed: int
) -> None:
    """Seed every codebook with encoder features of the training corpus"""
    points, vertices, _ = _stack(samples)
    z_t, _ = model.encoders.encode_object(points)
    z_f = model.encoders.encode_hand_parts(model.hand_parts(vertices))
    generator = torch.Generator().manual_seed(seed)
    model.quantizer.object_book.initialize_from(z_t, generator)
    for book, features in zip(model.quantizer.part_books, z_f, strict=True):
        book.initialize_from(features, generator)


def batch_losses(
    model: GraspVQVAE,
    samples: list[SyntheticSample],
    gt_maps: list[Tensor],
    config: RunConfig,
) -> tuple[LossComponents, dict[str, float], ForwardOutput]:
    weights = config.losses.weights()
    points, vertices, params = _stack(samples)
    out = model(points, vertices)
    decoded = out.decoded

    recon = reconstruction_loss(
        params, decoded.posture, decoded.position, vertices, model.template, weights
    )
    codebook = codebook_losses(
        out.z_f,
        [code.quantized for code in out.part_codes],
        out.z_t,
        out.object_code.quantized,
        beta=weights.beta,
        lambda_e=weights.lambda_e,
    )

    zero = recon.total * 0.0
    l_map = l_contact = l_pen = zero
    if config.losses.contact_terms:
        hands = forward_kinematics(
            HandParams.from_parts(decoded.posture, decoded.position), model.template
        )
        maps, contacts, pens = [], [], []
        for i, sample in enumerate(samples):
            hand = HandMesh(
                vertices=hands.vertices[i], joints=hands.joints[i], faces=hands.faces
            )
            sets = compute_contact_sets(
                hand,
                sample.object_cloud,
                sample.object_mesh,
                tau=config.losses.contact_threshold,
                candidates=model.template.contact_candidates,
                gt_map=gt_maps[i],
            )
            l_c, l_m = contact_losses(
                sets, hand, sample.object_cloud, config.losses.normalize_contact
            )
            contacts.append(l_c)
            maps.append(l_m)
            pens.append(penetration_loss(sets, hand, sample.object_cloud))
        l_map = torch.stack(maps).mean()
        l_contact = torch.stack(contacts).mean()
        l_pen = torch.stack(pens).mean()

    components = total_loss(
        recon.total, codebook.total, l_map, l_contact, l_pen, weights
    )
    parts = {
        "posture": float(recon.posture),
        "position": float(recon.position),
        "vertices": float(recon.vertices),
    }
    return components, parts, out


def _write_loss_csv(path: Path, history: list[dict[str, float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)


def train_vqvae(
    samples: list[SyntheticSample],
    config: RunConfig,
    run_id: str = "",
    db: Database | None = None,
    resume: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[GraspVQVAE, list[dict[str, float]], Path]:
    """Phase one: encoders, codebooks and decoders on the combined objective"""
    if not samples:
        error_msg = "Training needs at least one sample"
        raise ValueError(error_msg)
    train = config.train
    checkpoint_dir = Path(checkpoint_dir or train.checkpoint_dir)
    checkpoint_path = checkpoint_dir / CHECKPOINT_NAME
    resume_path = checkpoint_dir / RESUME_NAME

    torch.manual_seed(train.seed)
    model = build_model(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=train.milestones, gamma=train.gamma
    )

    start_epoch = 0
    history: list[dict[str, float]] = []
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=True)
        if "optimizer" not in payload:
            error_msg = f"{resume} holds no optimizer state; resume from {RESUME_NAME}"
            raise ValueError(error_msg)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        start_epoch = int(payload["epoch"]) + 1
        history = list(payload.get("history", []))
        logger.info("Resuming from %s at epoch %d", resume, start_epoch + 1)
    elif config.quantizer.init_from_data:
        initialize_codebooks(model, samples, train.seed)

    gt_maps = gt_contact_maps(samples, config.losses.contact_threshold)
    for epoch in range(start_epoch, train.epochs):
        model.train()
        order = epoch_order(len(samples), train.seed, epoch).tolist()
        totals: dict[str, float] = {}
        learning_rate = optimizer.param_groups[0]["lr"]
        for start in range(0, len(order), train.batch_size):
            chosen = order[start : start + train.batch_size]
            batch = [samples[i] for i in chosen]
            components, parts, _ = batch_losses(
                model, batch, [gt_maps[i] for i in chosen], config
            )
            optimizer.zero_grad()
            components.total.backward()
            optimizer.step()
            for name, value in {**components.as_dict(), **parts}.items():
                totals[name] = totals.get(name, 0.0) + value * len(batch)
        scheduler.step()

        row = {name: value / len(samples) for name, value in totals.items()}
        row["epoch"] = epoch + 1
        row["learning_rate"] = learning_rate
        history.append(row)
        logger.info(
            "epoch %d/%d total=%.4f recon=%.4f codebook=%.4f map=%.4f contact=%.5f "
            "pen=%.5f vertices=%.5f lr=%.2e",
            epoch + 1,
            train.epochs,
            row["total"],
            row["reconstruction"],
            row["codebook"],
            row["contact_map"],
            row["contact"],
            row["penetration"],
            row["vertices"],
            learning_rate,
        )
        if db is not None:
            db.save_epoch_loss(EpochLoss(run_id=run_id, phase="main", **row))
        save_checkpoint(
            model,
            resume_path,
            epoch=epoch,
            optimizer=optimizer.state_dict(),
            scheduler=scheduler.state_dict(),
            history=history,
            config=config.as_dict(),
        )
    return model, history, checkpoint_path


@torch.no_grad()
def collect_indices(
    model: GraspVQVAE, samples: list[SyntheticSample], batch_size: int = 32
) -> Tensor:
    """Index sequences of the corpus, counting codebook usage along the way"""
    model.eval()
    model.quantizer.reset_usage()
    model.quantizer.set_counting(True)
    sequences = []
    try:
        for start in range(0, len(samples), batch_size):
            points, vertices, _ = _stack(samples[start : start + batch_size])
            sequences.append(model(points, vertices).indices)
    finally:
        model.quantizer.set_counting(False)
    return torch.cat(sequences)


def train_prior(
    model: GraspVQVAE,
    samples: list[SyntheticSample],
    config: RunConfig,
    run_id: str = "",
    db: Database | None = None,
) -> tuple[PriorModel, list[float]]:
    """Phase two: fit the prior on index sequences of the frozen model"""
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    tokens = collect_indices(model, samples, config.train.batch_size)
    usage = model.quantizer.usage_histogram()
    for name, counts in usage.items():
        logger.info("codebook %s uses %d entries", name, sum(c > 0 for c in counts))
    prior, history = fit_prior(
        tokens,
        model.quantizer.vocab_sizes(),
        epochs=config.prior.epochs,
        seed=config.train.seed,
        lr=config.prior.learning_rate,
        batch_size=config.prior.batch_size,
        dim=config.prior.dim,
        layers=config.prior.layers,
        heads=config.prior.heads,
    )
    if db is not None:
        db.save_codebook_usage(run_id, usage)
        for epoch, nll in enumerate(history, start=1):
            db.save_epoch_loss(
                EpochLoss(run_id=run_id, phase="prior", epoch=epoch, total=nll)
            )
    return prior, history


def run_training(
    samples: list[SyntheticSample],
    config: RunConfig,
    run_id: str = "",
    db: Database | None = None,
    resume: str | Path | None = None,
    loss_csv: str | Path | None = None,
) -> TrainResult:
    started = time.perf_counter()
    model, history, checkpoint = train_vqvae(samples, config, run_id, db, resume)
    if loss_csv is not None:
        _write_loss_csv(Path(loss_csv), history)
    prior, prior_history = train_prior(model, samples, config, run_id, db)
    model.mark_trained()
    save_checkpoint(
        model, checkpoint, epoch=config.train.epochs - 1, config=config.as_dict()
    )
    prior_checkpoint = checkpoint.parent / PRIOR_NAME
    save_prior(prior, prior_checkpoint)
    logger.info(
        "Training finished in %.1fs (%d epochs, %d samples)",
        time.perf_counter() - started,
        config.train.epochs,
        len(samples),
    )
    return TrainResult(
        model=model,
        prior=prior,
        history=history,
        prior_history=prior_history,
        checkpoint=checkpoint,
        prior_checkpoint=prior_checkpoint,
    )
