#!/usr/bin/env python3
import argparse
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path

import numpy as np
import torch
import trimesh

from autoregressive_prior import load_prior
from config import BASE_DIR
from config import RunConfig
from config import load_config
from datagen import generate_corpus
from datagen import load_dataset
from datagen import samples_from_external
from datagen import save_dataset
from db import Database
from db import GraspMetricRow
from db import RunRecord
from grasp_model import generate_grasp
from grasp_model import load_checkpoint
from hand_model import HandParams
from hand_model import default_template
from hand_model import save_template
from metrics import diversity
from metrics import diversity_from_features
from metrics import evaluate_grasp
from metrics import high_quality_ratio
from metrics import summarize
from object_encoding import InvalidInputError
from object_encoding import PointCloud
from training import LOSS_COLUMNS
from training import run_training

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"
REPORT_COLUMNS = (
    "grasp",
    "object",
    "contact_ratio",
    "penetration_volume",
    "grasp_disp",
    "entropy",
    "cluster_size",
    "quality_index",
    "runtime_s",
)
CURVE_COLUMNS = ("pen_threshold", "ratio")
USAGE_COLUMNS = ("book", "index", "count")
METRIC_COLUMNS = (
    "grasp",
    "object",
    "in_contact",
    "penetration_cm3",
    "displacement_cm",
    "quality",
)


def setup_logging(config: RunConfig):
    """Route every dvq_grasp module to the rotating run log and the console.

    Module loggers (``datagen``, ``training``, ``metrics``...) propagate to the
    root logger configured here; trimesh's own chatter is held to warnings.
    """
    log_file = Path(config.logging.file)
    if not log_file.is_absolute():
        log_file = BASE_DIR / log_file

    log_file.parent.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger()
    logger.setLevel(getattr(logging, config.logging.level))

    # Clear existing handlers
    logger.handlers.clear()

    # File handler (with rotation)
    file_handler = RotatingFileHandler(
        log_file,
        maxBytes=config.logging.max_size_mb * 1024 * 1024,
        backupCount=config.logging.backup_count,
    )
    file_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    logger.addHandler(file_handler)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s | %(levelname)-8s | %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
        )
    )
    console_handler.setLevel(getattr(logging, config.logging.console_level))
    logger.addHandler(console_handler)
    logging.getLogger("trimesh").setLevel(logging.WARNING)

    return logger


def new_run_id(command: str) -> str:
    return f"{command}-{datetime.now():%Y%m%d-%H%M%S-%f}"


def open_database(config: RunConfig) -> Database:
    db_path = Path(config.database.path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    return Database(str(db_path))


def write_obj(path: Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII OBJ with vertex and 1-based triangle records"""
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    path.write_text("\n".join(lines) + "\n")


def read_mesh(path: Path) -> trimesh.Trimesh:
    return trimesh.load(path, force="mesh", process=False)


def read_object_cloud(path: Path, num_points: int, seed: int) -> PointCloud:
    """Object points from a mesh (surface-sampled) or a point cloud file.

    ``.npy`` and ``.xyz`` are read as raw (n, 3) coordinates; a ``.ply``
    without faces is taken as a cloud. Clouds larger than ``num_points`` are
    subsampled with ``seed``.
    """
    suffix = path.suffix.lower()
    if suffix == ".npy":
        points = np.load(path)
    elif suffix == ".xyz":
        points = np.loadtxt(path, ndmin=2)[:, :3]
    else:
        loaded = (
            trimesh.load(path, process=False) if suffix == ".ply" else read_mesh(path)
        )
        if isinstance(loaded, trimesh.Trimesh) and len(loaded.faces):
            points, _ = trimesh.sample.sample_surface(loaded, num_points, seed=seed)
        elif isinstance(loaded, trimesh.PointCloud):
            points = np.asarray(loaded.vertices)
        else:
            error_msg = f"Cannot read object points from {path}"
            raise InvalidInputError(error_msg)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2 and len(points) > num_points:
        rng = np.random.default_rng(seed)
        points = points[np.sort(rng.choice(len(points), num_points, replace=False))]
    return PointCloud.from_numpy(points)


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def cmd_datagen(config: RunConfig, args: argparse.Namespace) -> Path:
    if (args.external_mesh is None) != (args.external_params is None):
        error_msg = "--external-mesh and --external-params must be given together"
        raise ValueError(error_msg)
    if args.objects is not None:
        config.data.num_objects = args.objects
    if args.grasps_per_object is not None:
        config.data.grasps_per_object = args.grasps_per_object
    if args.seed is not None:
        config.data.seed = args.seed
    out = Path(args.out) if args.out else config.data.dataset_path
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.external_mesh is not None:
        samples = samples_from_external(
            args.external_mesh,
            args.external_params,
            default_template(config.hand.num_vertices),
            num_points=config.data.points_per_object,
            seed=config.data.seed,
        )
        logger.info("Imported %d grasps from %s", len(samples), args.external_params)
        save_dataset(samples, out)
        return out

    logger.info(
        "Generating %d objects x %d grasps (seed %d)",
        config.data.num_objects,
        config.data.grasps_per_object,
        config.data.seed,
    )
    samples = generate_corpus(config.data.corpus(config.hand.num_vertices))
    save_dataset(samples, out)
    return out


def cmd_train(config: RunConfig, args: argparse.Namespace) -> Path:
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.prior_epochs is not None:
        config.prior.epochs = args.prior_epochs
    if args.num_parts is not None:
        config.model.num_parts = args.num_parts
        config.validate()
    dataset = Path(args.dataset) if args.dataset else config.data.dataset_path
    if not dataset.exists():
        error_msg = f"Dataset not found: {dataset} (run datagen first)"
        raise FileNotFoundError(error_msg)

    samples = load_dataset(dataset)
    logger.info("Loaded %d samples from %s", len(samples), dataset)
    run_id = new_run_id("train")
    checkpoint_dir = Path(config.train.checkpoint_dir)

    with open_database(config) as db:
        db.init_db()
        db.start_run(
            RunRecord(
                id=run_id,
                command="train",
                config_json=json.dumps(config.as_dict(), sort_keys=True),
                dataset=str(dataset),
            )
        )
        try:
            result = run_training(
                samples,
                config,
                run_id=run_id,
                db=db,
                resume=args.resume,
                loss_csv=checkpoint_dir / "losses.csv",
            )
        except Exception:
            db.finish_run(run_id, "failed")
            raise
        db.finish_run(run_id, "finished", str(result.checkpoint))
    logger.info("Run %s stored checkpoint %s", run_id, result.checkpoint)
    return result.checkpoint


def cmd_sample(config: RunConfig, args: argparse.Namespace) -> Path:
    num = args.num if args.num is not None else config.sample.num
    seed = args.seed if args.seed is not None else config.sample.seed
    temperature = (
        args.temperature if args.temperature is not None else config.sample.temperature
    )
    mask_ratio = (
        args.mask_ratio if args.mask_ratio is not None else config.sample.mask_ratio
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model, _ = load_checkpoint(args.checkpoint)
    prior = load_prior(args.prior) if args.prior else None
    object_path = Path(args.object)
    cloud = read_object_cloud(object_path, config.data.points_per_object, seed)
    if mask_ratio > 0:
        cloud = cloud.masked(mask_ratio, torch.Generator().manual_seed(seed))
    cloud.validate()

    started = time.perf_counter()
    grasps = generate_grasp(
        model, prior, cloud, seed=seed, num=num, temperature=temperature
    )
    elapsed = time.perf_counter() - started

    name = object_path.stem
    faces = grasps.mesh.faces.numpy()
    vectors = grasps.params.to_vector()
    entries = []
    for k in range(num):
        filename = f"{name}_{k}.obj"
        write_obj(out / filename, grasps.mesh.vertices[k].numpy(), faces)
        entries.append(
            {
                "file": filename,
                "object": name,
                "indices": [grasps.object_index, *grasps.part_indices[k].tolist()],
                "params": [float(v) for v in vectors[k]],
            }
        )
    manifest = {
        "object": name,
        "seed": seed,
        "temperature": temperature,
        "mask_ratio": mask_ratio,
        "num_vertices": model.template.num_vertices,
        "grasps": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / TIMING_NAME).write_text(json.dumps({"batch_seconds": elapsed}))
    distinct = len({tuple(e["indices"]) for e in entries})
    logger.info(
        "Sampled %d grasps for %s in %.3fs (%d distinct index sequences)",
        num,
        name,
        elapsed,
        distinct,
    )
    return out


def _match_files(grasp_dir: Path, object_dir: Path) -> list[tuple[Path, Path]]:
    objects = {path.stem: path for path in object_dir.glob("*.obj")}
    pairs, offenders = [], []
    for grasp in sorted(grasp_dir.glob("*.obj")):
        stem, _, suffix = grasp.stem.rpartition("_")
        if stem in objects and suffix.isdigit():
            pairs.append((grasp, objects[stem]))
        else:
            offenders.append(grasp.name)
    if offenders:
        error_msg = f"No matching object mesh for: {', '.join(offenders)}"
        raise ValueError(error_msg)
    if not pairs:
        error_msg = f"No grasp meshes found in {grasp_dir}"
        raise ValueError(error_msg)
    return pairs


def _evaluate_pair(pair: tuple[Path, Path], tau: float, simulation):
    grasp, obj = pair
    return evaluate_grasp(read_mesh(grasp), read_mesh(obj), tau, simulation)


def _grasp_diversity(
    config: RunConfig, grasp_dir: Path, pairs: list[tuple[Path, Path]]
) -> tuple[float, float]:
    """Cluster on joint positions when the manifest holds parameters, else on
    vertex positions"""
    k = config.evaluate.diversity_clusters
    manifest_path = grasp_dir / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        params = torch.tensor([g["params"] for g in manifest["grasps"]])
        template = default_template(manifest.get("num_vertices", 778))
        return diversity(
            HandParams.from_vector(params), template, k, config.evaluate.seed
        )
    features = np.stack([read_mesh(grasp).vertices.ravel() for grasp, _ in pairs])
    return diversity_from_features(features, k, config.evaluate.seed)


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> Path:
    grasp_dir = Path(args.grasp_dir)
    pairs = _match_files(grasp_dir, Path(args.object_dir))
    tau = config.evaluate.contact_threshold
    logger.info("Evaluating %d grasps from %s", len(pairs), grasp_dir)
    entropy, cluster_size = _grasp_diversity(config, grasp_dir, pairs)

    if config.data.workers > 1:
        with ProcessPoolExecutor(max_workers=config.data.workers) as pool:
            metrics = list(
                pool.map(
                    _evaluate_pair,
                    pairs,
                    [tau] * len(pairs),
                    [config.simulation] * len(pairs),
                )
            )
    else:
        metrics = [_evaluate_pair(pair, tau, config.simulation) for pair in pairs]

    timing_path = grasp_dir / TIMING_NAME
    runtime = (
        json.loads(timing_path.read_text())["batch_seconds"]
        if timing_path.exists()
        else 0.0
    )
    report = summarize(metrics, entropy, cluster_size, runtime)

    rows = [
        {
            "grasp": grasp.name,
            "object": obj.stem,
            "contact_ratio": 100.0 if m.in_contact else 0.0,
            "penetration_volume": m.penetration_cm3,
            "grasp_disp": m.displacement_cm,
            "entropy": "",
            "cluster_size": "",
            "quality_index": m.quality,
            "runtime_s": "",
        }
        for (grasp, obj), m in zip(pairs, metrics, strict=True)
    ]
    rows.append({"grasp": "aggregate", "object": "", **report.as_dict()})
    out = Path(args.out) if args.out else grasp_dir / "report.csv"
    _write_csv(out, REPORT_COLUMNS, rows)

    thresholds = np.linspace(
        0.0, config.evaluate.max_pen_threshold, config.evaluate.curve_points
    )
    curve = high_quality_ratio(
        [m.penetration_cm3 for m in metrics],
        [m.displacement_cm for m in metrics],
        thresholds,
        config.evaluate.disp_threshold,
    )
    curve_path = Path(args.curve) if args.curve else out.with_name("curve.csv")
    _write_csv(
        curve_path,
        CURVE_COLUMNS,
        [{"pen_threshold": t, "ratio": r} for t, r in curve],
    )

    run_id = new_run_id("evaluate")
    with open_database(config) as db:
        db.init_db()
        db.start_run(
            RunRecord(
                id=run_id,
                command="evaluate",
                config_json=json.dumps(config.as_dict(), sort_keys=True),
                dataset=str(grasp_dir),
                status="finished",
            )
        )
        db.save_grasp_metrics(
            [
                GraspMetricRow(
                    run_id=run_id,
                    grasp=grasp.name,
                    object=obj.stem,
                    in_contact=m.in_contact,
                    penetration_cm3=m.penetration_cm3,
                    displacement_cm=m.displacement_cm,
                    quality=m.quality,
                )
                for (grasp, obj), m in zip(pairs, metrics, strict=True)
            ]
        )
    logger.info(
        "contact %.1f%% penetration %.3f cm3 displacement %.3f cm quality %.3f",
        report.contact_ratio,
        report.penetration_volume,
        report.grasp_disp,
        report.quality_index,
    )
    return out


def export_ground_truth(dataset: Path, out: Path) -> None:
    """Write a dataset as grasps/ and objects/ directories for evaluate"""
    samples = load_dataset(dataset)
    grasp_dir = out / "grasps"
    object_dir = out / "objects"
    grasp_dir.mkdir(parents=True, exist_ok=True)
    object_dir.mkdir(parents=True, exist_ok=True)
    template = default_template(samples[0].gt_vertices.shape[0])
    faces = template.faces.numpy()

    counts: dict[str, int] = {}
    entries = []
    for sample in samples:
        name = sample.object.name
        if name not in counts:
            write_obj(
                object_dir / f"{name}.obj",
                sample.object_mesh.vertices,
                sample.object_mesh.faces,
            )
        k = counts.get(name, 0)
        counts[name] = k + 1
        filename = f"{name}_{k}.obj"
        write_obj(grasp_dir / filename, sample.gt_vertices.numpy(), faces)
        entries.append(
            {
                "file": filename,
                "object": name,
                "params": [float(v) for v in sample.gt_params.to_vector()],
            }
        )
    manifest = {"num_vertices": template.num_vertices, "grasps": entries}
    (grasp_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    logger.info("Exported %d ground-truth grasps to %s", len(entries), out)


def _export_loss_curve(config: RunConfig, run_id: str | None, path: Path) -> None:
    if not run_id:
        error_msg = "--loss-curve needs --run-id"
        raise ValueError(error_msg)
    with open_database(config) as db:
        db.init_db()
        losses = db.get_epoch_losses(run_id)
    if not losses:
        error_msg = f"No epoch losses stored for run {run_id}"
        raise ValueError(error_msg)
    rows = [
        {column: getattr(loss, column) for column in LOSS_COLUMNS} for loss in losses
    ]
    _write_csv(path, LOSS_COLUMNS, rows)


def _export_evaluation(config: RunConfig, args: argparse.Namespace) -> None:
    """Per-grasp metrics and stored configuration of an earlier run"""
    if not args.run_id:
        error_msg = "--metrics and --run-config need --run-id"
        raise ValueError(error_msg)
    with open_database(config) as db:
        db.init_db()
        metric_rows = db.get_grasp_metrics(args.run_id)
        run_config = db.get_run_config(args.run_id)
    if args.metrics:
        if not metric_rows:
            error_msg = f"No grasp metrics stored for run {args.run_id}"
            raise ValueError(error_msg)
        rows = [
            {column: getattr(row, column) for column in METRIC_COLUMNS}
            for row in metric_rows
        ]
        _write_csv(Path(args.metrics), METRIC_COLUMNS, rows)
    if args.run_config:
        if not run_config:
            error_msg = f"Unknown run {args.run_id}"
            raise ValueError(error_msg)
        path = Path(args.run_config)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(run_config, indent=2, sort_keys=True))


def cmd_export(config: RunConfig, args: argparse.Namespace) -> None:
    if args.template:
        save_template(default_template(config.hand.num_vertices), args.template)
        logger.info("Wrote hand template to %s", args.template)
    if args.usage:
        if not args.checkpoint:
            error_msg = "--usage needs --checkpoint"
            raise ValueError(error_msg)
        _, payload = load_checkpoint(args.checkpoint)
        rows = [
            {"book": book, "index": i, "count": count}
            for book, counts in payload["usage"].items()
            for i, count in enumerate(counts)
        ]
        _write_csv(Path(args.usage), USAGE_COLUMNS, rows)
    if args.loss_curve:
        _export_loss_curve(config, args.run_id, Path(args.loss_curve))
    if args.metrics or args.run_config:
        _export_evaluation(config, args)
    if args.ground_truth:
        dataset = Path(args.dataset) if args.dataset else config.data.dataset_path
        export_ground_truth(dataset, Path(args.ground_truth))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvq_grasp", description="Part-aware VQ-VAE grasp generation"
    )
    parser.add_argument("--config", default="config.yaml")
    commands = parser.add_subparsers(dest="command", required=True)

    datagen = commands.add_parser("datagen", help="generate the synthetic corpus")
    datagen.add_argument("--objects", type=int)
    datagen.add_argument("--grasps-per-object", type=int)
    datagen.add_argument("--seed", type=int)
    datagen.add_argument("--out")
    datagen.add_argument("--external-mesh", help="watertight object mesh to import")
    datagen.add_argument(
        "--external-params", help="MANO-format grasps (.npy or text) for that mesh"
    )

    train = commands.add_parser("train", help="train the VQ-VAE and the prior")
    train.add_argument("--dataset")
    train.add_argument("--epochs", type=int)
    train.add_argument("--prior-epochs", type=int)
    train.add_argument("--resume")
    train.add_argument("--num-parts", type=int)

    sample = commands.add_parser("sample", help="generate grasps for an object")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--prior")
    sample.add_argument("--object", required=True)
    sample.add_argument("--num", type=int)
    sample.add_argument("--seed", type=int)
    sample.add_argument("--temperature", type=float)
    sample.add_argument("--mask-ratio", type=float)
    sample.add_argument("--out", required=True)

    evaluate = commands.add_parser("evaluate", help="score grasp meshes")
    evaluate.add_argument("--grasp-dir", required=True)
    evaluate.add_argument("--object-dir", required=True)
    evaluate.add_argument("--out")
    evaluate.add_argument("--curve")

    export = commands.add_parser("export", help="write template, usage and curves")
    export.add_argument("--template")
    export.add_argument("--usage")
    export.add_argument("--checkpoint")
    export.add_argument("--loss-curve")
    export.add_argument("--run-id")
    export.add_argument("--metrics")
    export.add_argument("--run-config")
    export.add_argument("--ground-truth")
    export.add_argument("--dataset")
    return parser


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
}


def main(argv: list[str] | None = None):
    """Main processing"""
    args = build_parser().parse_args(argv)
    config = load_config(args.config)

    logger = setup_logging(config)
    logger.info("=" * 50)
    logger.info("Starting dvq_grasp %s", args.command)

    try:
        result = COMMANDS[args.command](config, args)
        logger.info("Finished %s", args.command)
        return result
    except Exception as e:
        logger.exception("Error during %s: %s", args.command, e)
        raise


if __name__ == "__main__":
    main()
