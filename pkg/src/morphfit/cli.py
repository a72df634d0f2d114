"""Command-line surface.

Subcommands: synth-basis, synth-data, render, fit, fit-multi, train,
evaluate, experiment, report. Exit codes: 0 success, 2 config error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import yaml

from . import classify, harness
from .errors import ConfigError
from .fit import (
    FitSchedule,
    LossWeights,
    Observation,
    fit_single_view,
    load_coefficients,
    save_fit_result,
)
from .model import (
    CameraIntrinsics,
    ToyBasisConfig,
    generate_toy_basis,
    load_basis,
    save_basis,
)
from .multiview import fit_multi_view, save_multi_view_result
from .render import load_image, load_landmarks, render_view, save_image, save_landmarks


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return data


def _apply_config(cls, overrides: dict, **extra):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in overrides if k not in fields]
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {unknown}")
    return cls(**{**overrides, **extra})


def _intrinsics_from(cfg: dict) -> CameraIntrinsics:
    size = int(cfg.get("image_size", 224))
    return CameraIntrinsics.default(size)


def cmd_synth_basis(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    basis = generate_toy_basis(_apply_config(ToyBasisConfig, cfg))
    save_basis(basis, args.out)
    print(f"wrote basis ({basis.vertex_count} vertices) to {args.out}")


def cmd_synth_data(args):
    cfg = _load_config(args.config)
    basis = load_basis(args.basis)
    intrinsics = _intrinsics_from(cfg)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    count = int(cfg.get("identity_count", 3))
    views = int(cfg.get("views_per_subject", 3))
    expression = cfg.get("expression_class", "NE")
    identities = harness.generate_identities(count, basis, seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = []
    for ident in identities:
        records = harness.sample_views(
            ident, basis, intrinsics, views, expression,
            pose_range_deg=float(cfg.get("pose_range_deg", 30.0)),
            landmark_noise_px=float(cfg.get("landmark_noise_px", 0.3)),
            seed=ident.seed)
        for j, rec in enumerate(records):
            stem = f"{ident.label}_v{j}"
            save_image(rec.image, os.path.join(args.out, stem + ".png"))
            save_landmarks(rec.landmarks, os.path.join(args.out, stem + ".json"))
            manifest.append({"image": stem + ".png", "landmarks": stem + ".json",
                             "subject": ident.label,
                             "attribute": ident.attribute,
                             "expression": rec.expression_class})
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(manifest)} views to {args.out}")


def cmd_render(args):
    cfg = _load_config(args.config)
    basis = load_basis(args.basis)
    coeffs = load_coefficients(args.coeffs)
    view = render_view(basis, coeffs, _intrinsics_from(cfg))
    save_image(view.image, args.out)
    if args.landmarks_out:
        save_landmarks(view.landmarks, args.landmarks_out)
    print(f"wrote render to {args.out}")


def _schedule_from(cfg: dict) -> FitSchedule:
    keys = {f.name for f in dataclasses.fields(FitSchedule)}
    return FitSchedule(**{k: v for k, v in cfg.items() if k in keys})


def cmd_fit(args):
    cfg = _load_config(args.config)
    basis = load_basis(args.basis)
    obs = Observation(image=load_image(args.image),
                      landmarks=load_landmarks(args.landmarks))
    result = fit_single_view(obs, basis, _intrinsics_from(cfg),
                             schedule=_schedule_from(cfg))
    save_fit_result(result, args.out)
    print(f"fit converged={result.converged} "
          f"landmark_rmse={result.final_landmark_rmse:.3f}px -> {args.out}")


def cmd_fit_multi(args):
    cfg = _load_config(args.config)
    basis = load_basis(args.basis)
    with open(args.manifest) as f:
        manifest = json.load(f)
    views = manifest["views"] if isinstance(manifest, dict) else manifest
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    observations = []
    for v in views:
        observations.append(Observation(
            image=load_image(os.path.join(base_dir, v["image"])),
            landmarks=load_landmarks(os.path.join(base_dir, v["landmarks"]))))
    result = fit_multi_view(observations, basis, _intrinsics_from(cfg),
                            schedule=_schedule_from(cfg),
                            strategy=cfg.get("strategy", "residual"))
    save_multi_view_result(result, args.out)
    print(f"aggregated {len(result.per_view)} views "
          f"(set loss {result.set_loss:.6f}) -> {args.out}")


def cmd_train(args):
    cfg = _load_config(args.config)
    dataset = classify.LabeledDataset.load(args.dataset)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    model = classify.init_model(
        input_dim=dataset.inputs.shape[1],
        class_count=len(dataset.class_names),
        block_count=int(cfg.get("block_count", 8)),
        hidden_dim=int(cfg.get("hidden_dim", 128)),
        seed=seed)
    keys = {f.name for f in dataclasses.fields(classify.TrainSchedule)}
    schedule = classify.TrainSchedule(
        **{k: v for k, v in cfg.items() if k in keys and k != "seed"}, seed=seed)
    model, history = classify.train(model, dataset, schedule)
    classify.save_model(model, args.out)
    if args.history_out:
        classify.history_to_csv(history, args.history_out)
    print(f"trained {schedule.epochs} epochs, final loss "
          f"{history[-1]['loss']:.4f}, accuracy {history[-1]['accuracy']:.3f}")


def cmd_evaluate(args):
    model = classify.load_model(args.model)
    dataset = classify.LabeledDataset.load(args.dataset)
    acc, preds = classify.evaluate(model, dataset)
    cm = harness.confusion_matrix(preds, dataset.labels, dataset.class_names)
    out = {"accuracy": acc, "class_names": dataset.class_names,
           "confusion_matrix": cm.matrix.tolist()}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=2)
    print(f"accuracy {acc:.4f} over {len(dataset.inputs)} samples")


def cmd_experiment(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = _apply_config(harness.ExperimentConfig, cfg)
    config.validate()
    report = harness.run_experiment(config)
    harness.emit_report(report, args.out)
    print(f"{config.task}/{config.input_mode}: accuracy {report['accuracy']:.4f} "
          f"-> {args.out}")


def cmd_report(args):
    with open(args.report) as f:
        report = json.load(f)
    harness.emit_report(report, args.out)
    print(f"re-emitted report artifacts to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphfit",
        description="Face-model synthesis, fitting, aggregation, and "
                    "coefficient-space classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML key-value config file")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker count (current implementation is "
                            "single-threaded; accepted for compatibility)")

    p = sub.add_parser("synth-basis", help="generate and save a toy basis")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_synth_basis)

    p = sub.add_parser("synth-data", help="render synthetic views to a directory")
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("render", help="render a coefficient file to PNG")
    p.add_argument("--basis", required=True)
    p.add_argument("--coeffs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--landmarks-out")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit coefficients to one view")
    p.add_argument("--basis", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-multi", help="fit and aggregate a view set")
    p.add_argument("--basis", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_fit_multi)

    p = sub.add_parser("train", help="train a classifier on a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history-out")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a full experiment protocol")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-emit CSV artifacts from report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
