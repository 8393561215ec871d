"""Command-line entry point wiring every module into reproducible runs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every
subcommand takes --seed and funnels all randomness through it; each run
directory gets a run_metadata.json recording the config hash, seed, and
library versions, so reruns are attributable and checksum-stable.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .config import build_dataclass, load_config, write_run_metadata
from .control import DIAGNOSES, MAX_GAP_YEARS

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)


def _gap_value(text: str) -> float:
    try:
        gap = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gap must be a number, got {text!r}")
    if not 0 < gap <= MAX_GAP_YEARS:
        raise argparse.ArgumentTypeError(
            f"gap must lie in (0, {MAX_GAP_YEARS:g}] years, got {gap:g}"
        )
    return gap


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed", type=int, default=0, help="seed for all randomness in this run"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="progdae",
        description=(
            "Train a diffusion auto-encoder on phantom brain slices and "
            "simulate attribute-conditioned disease progression."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom cohort on disk")
    p.add_argument("--config", help="cohort config file (key = value lines)")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_seed(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the model on a generated dataset")
    p.add_argument("--config", help="training config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument(
        "--phase",
        choices=("autoencode-only", "progression-only", "both"),
        default="both",
        help="restrict training to one phase",
    )
    p.add_argument("--resume", help="state file from an interrupted run")
    p.add_argument(
        "--epoch-limit", type=int, default=None, help="stop after this total epoch"
    )
    _add_seed(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="generate one follow-up from a baseline image")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--image", required=True, help="baseline image (flat volume file)")
    p.add_argument("--status", required=True, choices=DIAGNOSES, help="diagnosis")
    p.add_argument(
        "--gap", required=True, type=_gap_value, help="follow-up age gap in years"
    )
    p.add_argument("--out", required=True, help="output image path (flat volume)")
    p.add_argument("--sample-steps", type=int, default=50)
    _add_seed(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate generated follow-ups against truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument(
        "--error-maps", action="store_true", help="also render per-case error maps"
    )
    _add_seed(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("swap", help="progression-subspace swap experiment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-steps", type=int, default=50)
    _add_seed(p)
    p.set_defaults(func=_cmd_swap)

    p = sub.add_parser("project", help="2-D latent projection and cluster report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_seed(p)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser(
        "augment-study", help="classifier accuracy vs real/generated training ratio"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=None, help="training images per ratio")
    p.add_argument("--epochs", type=int, default=25, help="classifier epochs")
    p.add_argument("--sample-steps", type=int, default=50)
    _add_seed(p)
    p.set_defaults(func=_cmd_augment_study)

    return parser


def _cmd_gen_data(args) -> int:
    from .data import write_cohort
    from .phantom import CohortConfig, generate_cohort

    pairs = load_config(args.config) if args.config else {}
    image_size = 64
    if "image_size" in pairs:
        image_size = int(pairs.pop("image_size"))
    cohort_config = build_dataclass(CohortConfig, pairs)
    cohort_config = dataclasses.replace(cohort_config, seed=args.seed)
    cohort = generate_cohort(cohort_config)
    manifest = write_cohort(cohort, args.out, image_size=image_size)
    write_run_metadata(
        args.out,
        command="gen-data",
        seed=args.seed,
        config_pairs=pairs,
        argv=args.argv,
        extra={"image_size": image_size},
    )
    n_train = sum(1 for v in cohort.visits if v.split == "train")
    n_test = sum(1 for v in cohort.visits if v.split == "test")
    train_subjects = len({v.subject_id for v in cohort.visits if v.split == "train"})
    test_subjects = len({v.subject_id for v in cohort.visits if v.split == "test"})
    print(f"wrote {manifest}")
    print(
        f"train: {train_subjects} subjects / {n_train} visits; "
        f"test: {test_subjects} subjects / {n_test} visits; "
        f"swap pairs: {len(cohort.swap_pairs)}"
    )
    return 0


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .training import TrainConfig, run_training

    pairs = load_config(args.config) if args.config else {}
    train_config = build_dataclass(TrainConfig, pairs)
    train_config = dataclasses.replace(train_config, seed=args.seed)
    if args.phase == "autoencode-only":
        train_config = dataclasses.replace(train_config, epochs_progression=0)
    elif args.phase == "progression-only":
        train_config = dataclasses.replace(train_config, epochs_autoencode=0)
    dataset = load_dataset(args.data)
    write_run_metadata(
        args.out,
        command="train",
        seed=args.seed,
        config_pairs=pairs,
        argv=args.argv,
        extra={"phase": args.phase},
    )
    result = run_training(
        train_config,
        dataset,
        args.out,
        resume_from=args.resume,
        epoch_limit=args.epoch_limit,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_infer(args) -> int:
    from .data import read_flat_volume, write_flat_volume
    from .training import infer_followup, load_model_for_inference

    model, _ = load_model_for_inference(args.checkpoint)
    volume = read_flat_volume(args.image)
    if volume.shape[2] != 1:
        raise ValueError(
            f"{args.image}: expected a single 2-D slice, got depth {volume.shape[2]}"
        )
    image = volume[:, :, 0]
    followup = infer_followup(
        model,
        image,
        args.status,
        args.gap,
        sample_steps=args.sample_steps,
        seed=args.seed,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_flat_volume(args.out, followup.astype(np.float32), "f32")
    write_run_metadata(
        out_dir,
        command="infer",
        seed=args.seed,
        argv=args.argv,
        extra={"status": args.status, "gap": args.gap},
    )
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import evaluate_cohort, render_summary, write_metric_report
    from .training import load_model_for_inference

    model, _ = load_model_for_inference(args.checkpoint)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    error_dir = os.path.join(args.out, "error_maps") if args.error_maps else None
    report = evaluate_cohort(
        model,
        dataset,
        split=args.split,
        sample_steps=args.sample_steps,
        seed=args.seed,
        error_map_dir=error_dir,
    )
    report_path = os.path.join(args.out, "metrics_report.csv")
    write_metric_report(report, report_path)
    write_run_metadata(args.out, command="eval", seed=args.seed, argv=args.argv)
    print(render_summary(report))
    print(f"wrote {report_path}")
    return 0


def _cmd_swap(args) -> int:
    from .data import load_dataset
    from .latents import run_swap_experiment, write_swap_report
    from .training import load_model_for_inference

    model, _ = load_model_for_inference(args.checkpoint)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    report = run_swap_experiment(
        model, dataset, sample_steps=args.sample_steps, seed=args.seed
    )
    report_path = os.path.join(args.out, "swap_report.csv")
    write_swap_report(report, report_path)
    write_run_metadata(args.out, command="swap", seed=args.seed, argv=args.argv)
    for key, value in report.summary().items():
        print(f"{key}: {value:.4f}")
    print(f"wrote {report_path}")
    return 0


def _cmd_project(args) -> int:
    import torch

    from .data import load_dataset
    from .latents import (
        make_class_labels,
        project_latents,
        render_projection,
        silhouette_score,
        write_projection_csv,
    )
    from .training import load_model_for_inference

    model, _ = load_model_for_inference(args.checkpoint)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    visits = dataset.baselines(args.split)
    if not visits:
        raise ValueError(f"no {args.split} baselines in {args.data}")
    images = torch.stack(
        [torch.from_numpy(np.asarray(v.image, dtype=np.float32)) for v in visits]
    ).unsqueeze(1)
    with torch.no_grad():
        latents = model.encode(images).numpy()
    labels = make_class_labels(
        [v.diagnosis for v in visits], [v.age for v in visits]
    )
    diag_labels = [v.diagnosis for v in visits]
    m = model.config.shift_dim
    scores = {}
    for subspace in ("full", "first_m"):
        result = project_latents(
            latents, subspace, m=m if subspace == "first_m" else None,
            class_labels=labels,
        )
        stem = os.path.join(args.out, f"projection_{subspace}")
        write_projection_csv(result, stem + ".csv", labels)
        render_projection(
            result, stem + ".png", labels, title=f"{subspace} latent projection"
        )
        scores[subspace] = silhouette_score(result.coordinates, diag_labels)
    write_run_metadata(
        args.out,
        command="project",
        seed=args.seed,
        argv=args.argv,
        extra={"silhouette": scores},
    )
    print(
        f"silhouette (diagnosis): first_m {scores['first_m']:.4f}, "
        f"full {scores['full']:.4f}"
    )
    print(f"wrote projections under {args.out}")
    return 0


def _cmd_augment_study(args) -> int:
    import torch

    from .data import load_dataset
    from .metrics import ClassifierConfig, augmentation_study, write_study_table
    from .training import generate_followups, load_model_for_inference

    model, _ = load_model_for_inference(args.checkpoint)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    train_visits = [v for v in dataset.split("train")]
    test_visits = [v for v in dataset.split("test")]
    real_images = np.stack([np.asarray(v.image, dtype=np.float32) for v in train_visits])
    real_labels = [v.diagnosis for v in train_visits]
    test_images = np.stack([np.asarray(v.image, dtype=np.float32) for v in test_visits])
    test_labels = [v.diagnosis for v in test_visits]

    baselines = dataset.baselines("train")
    gaps = []
    for v in baselines:
        follows = dataset.followups(v.subject_id)
        gaps.append(follows[0].age_gap if follows else 2.0)
    gen_images = generate_followups(
        model,
        np.stack([np.asarray(v.image, dtype=np.float32) for v in baselines]),
        [v.diagnosis for v in baselines],
        gaps,
        sample_steps=args.sample_steps,
        seed=args.seed,
    )
    gen_labels = [v.diagnosis for v in baselines]

    rows = augmentation_study(
        real_images,
        real_labels,
        gen_images,
        gen_labels,
        test_images,
        test_labels,
        budget=args.budget,
        config=ClassifierConfig(epochs=args.epochs),
        seeds=(args.seed, args.seed + 1, args.seed + 2),
    )
    table_path = os.path.join(args.out, "augmentation_study.csv")
    write_study_table(rows, table_path)
    write_run_metadata(args.out, command="augment-study", seed=args.seed, argv=args.argv)
    for row in rows:
        print(
            f"real {row.real_percent:3d}% / generated {row.generated_percent:3d}%: "
            f"accuracy {row.accuracy_mean:.3f} +/- {row.accuracy_std:.3f}"
        )
    print(f"wrote {table_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
