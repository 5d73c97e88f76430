"""Command-line front end.

Subcommands: zs, tf, fs-train, fs-eval, search-alpha, synth, validate.
Settings come from the dataset manifest with flag overrides.  Exit codes
are grouped by error family: 2 usage, 3 file format, 4 data validation,
5 engine/numerics, 6 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .embeddings_io import (
    DatasetManifest,
    check_manifest_files,
    load_feature_set,
    load_manifest,
    load_text_classifier,
    save_feature_set,
    save_manifest,
    save_text_classifier,
    validate_against,
)
from .errors import (
    EngineError,
    FormatError,
    MemclfError,
    ModeRequirementError,
    ValidationError,
)
from .memory import DynamicMemory, build_static_from_labeled
from .pipeline import (
    EngineState,
    FusionWeights,
    RunMode,
    render_report,
    run_stream,
    stream_from_feature_set,
)
from .readout import ProjectionSet, ReadoutConfig, load_projections, save_projections
from .search import FIXED_WEIGHTS, alpha_grid_search
from .synthetic import (
    CALIBRATED_SPEC,
    load_synthetic_spec,
    make_synthetic,
    save_synthetic_spec,
)
from .training import TrainConfig, render_training_log, train

EXIT_OK = 0
EXIT_FORMAT = 3
EXIT_VALIDATION = 4
EXIT_ENGINE = 5
EXIT_IO = 6

OUT_DIR_ENV = "MEMCLF_OUT"


def _out_dir(args) -> Path | None:
    out = getattr(args, "out", None) or os.environ.get(OUT_DIR_ENV)
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_alpha(spec: str, manifest: DatasetManifest) -> FusionWeights | str:
    if spec == "search":
        return "search"
    if spec == "fixed":
        return FIXED_WEIGHTS
    if spec == "manifest":
        return FusionWeights(*manifest.alpha)
    parts = spec.split(",")
    if len(parts) != 3:
        raise ValidationError(f"--alpha expects 'search', 'fixed' or 'a1,a2,a3', got {spec!r}")
    return FusionWeights(*(float(p) for p in parts))


def _load_common(args):
    manifest = load_manifest(args.manifest)
    if getattr(args, "beta", None) is not None:
        manifest = replace(manifest, beta=args.beta)
    if getattr(args, "memory_length", None) is not None:
        manifest = replace(manifest, memory_length=args.memory_length)
    if getattr(args, "rho", None) is not None:
        manifest = replace(manifest, rho=args.rho)
    if getattr(args, "seed", None) is not None:
        manifest = replace(manifest, seed=args.seed)
    check_manifest_files(manifest)
    text = load_text_classifier(manifest.text_path)
    if text.num_classes != manifest.num_classes:
        raise ValidationError(
            f"manifest names {manifest.num_classes} classes but the text file "
            f"has {text.num_classes} rows"
        )
    return manifest, text


def _readout_cfg(manifest: DatasetManifest) -> ReadoutConfig:
    return ReadoutConfig(beta=manifest.beta, weighting=manifest.weighting,
                         logit_scale=manifest.logit_scale)


def _build_state(mode: RunMode, manifest: DatasetManifest, text, fusion: FusionWeights,
                 projections: ProjectionSet | None = None) -> EngineState:
    static = None
    if mode is not RunMode.ZS:
        if manifest.shots_path is None:
            raise ModeRequirementError(f"mode {mode.value} needs a shots file in the manifest")
        shots = load_feature_set(manifest.shots_path)
        validate_against(shots, text)
        if shots.labels is None:
            raise ValidationError("shots file must carry labels")
        static = build_static_from_labeled(shots.features, shots.labels, text.num_classes)
    if mode is RunMode.FS:
        if projections is None:
            raise ModeRequirementError("fs mode needs trained projections (--projections)")
        proj = projections
    else:
        proj = ProjectionSet.identity(text.dim)
    return EngineState(
        text=text,
        dynamic=DynamicMemory(text.num_classes, manifest.memory_length, text.dim),
        projections=proj,
        readout_cfg=_readout_cfg(manifest),
        fusion=fusion,
        static=static,
        rho=manifest.rho,
    )


def _load_stream(manifest: DatasetManifest, text, which: str = "test"):
    path = manifest.test_path if which == "test" else manifest.val_path
    if path is None:
        raise ValidationError(f"manifest has no {which} file")
    fset = load_feature_set(path)
    validate_against(fset, text)
    return stream_from_feature_set(fset)


def _emit_run(args, result, extra: dict | None = None) -> None:
    report = render_report(result, include_labels=False)
    sys.stdout.write(report)
    out = _out_dir(args)
    if out is not None:
        (out / "report.txt").write_text(render_report(result, include_labels=True))
        summary = {
            "mode": result.mode.value,
            "samples": len(result.predictions),
            "accuracy": result.accuracy,
            "labels": result.labels,
            "config": result.config,
            "footprint_bytes": result.footprint,
        }
        if extra:
            summary.update(extra)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        sys.stdout.write(f"report written to {out}\n")


def _resolve_weights(args, manifest, mode: RunMode, text, projections=None) -> FusionWeights:
    choice = _parse_alpha(args.alpha, manifest)
    if choice != "search":
        return choice
    samples, truth = _load_stream(manifest, text)
    if truth is None:
        raise ValidationError("--alpha search needs a labeled test stream")
    sys.stderr.write(
        "warning: searching fusion weights on the evaluation stream itself\n"
    )
    state = _build_state(mode, manifest, text, FIXED_WEIGHTS, projections)
    found = alpha_grid_search(mode, samples, truth, state)
    sys.stdout.write(
        f"searched weights: alpha=({found.best.alpha1}, {found.best.alpha2}, "
        f"{found.best.alpha3}) accuracy={found.best_accuracy:.4f}\n"
    )
    return found.best


def _cmd_eval(args, mode: RunMode) -> int:
    manifest, text = _load_common(args)
    projections = None
    if mode is RunMode.FS:
        proj_path = args.projections or manifest.projections_path
        if proj_path is None:
            raise ModeRequirementError("fs mode needs --projections or a manifest entry")
        projections = load_projections(proj_path)
        if projections.dim != text.dim:
            raise ValidationError(
                f"projection dim {projections.dim} != feature dim {text.dim}"
            )
    fusion = _resolve_weights(args, manifest, mode, text, projections)
    samples, truth = _load_stream(manifest, text)
    state = _build_state(mode, manifest, text, fusion, projections)
    result = run_stream(mode, samples, state, truth=truth)
    _emit_run(args, result)
    return EXIT_OK


def _cmd_fs_train(args) -> int:
    manifest, text = _load_common(args)
    if manifest.shots_path is None:
        raise ModeRequirementError("fs-train needs a shots file in the manifest")
    shots = load_feature_set(manifest.shots_path)
    validate_against(shots, text)
    if shots.labels is None:
        raise ValidationError("shots file must carry labels")
    static = build_static_from_labeled(shots.features, shots.labels, text.num_classes)

    cfg = TrainConfig(
        epochs=args.epochs if args.epochs is not None else manifest.epochs,
        seed=manifest.seed,
        leave_one_out=args.leave_one_out,
    )
    fusion = FusionWeights(*manifest.alpha)
    projections, history = train(static, text, _readout_cfg(manifest), fusion, cfg)

    out = _out_dir(args) or Path(".")
    proj_path = out / "projections.embp"
    save_projections(projections, proj_path)
    (out / "training_log.txt").write_text(render_training_log(history))
    first, last = history[0].loss, history[-1].loss
    sys.stdout.write(
        f"trained {len(history)} steps, loss {first:.6f} -> {last:.6f}\n"
        f"projections written to {proj_path}\n"
    )
    return EXIT_OK


def _cmd_search_alpha(args) -> int:
    manifest, text = _load_common(args)
    mode = RunMode(args.mode)
    projections = None
    if mode is RunMode.FS:
        proj_path = args.projections or manifest.projections_path
        if proj_path is None:
            raise ModeRequirementError("fs search needs --projections or a manifest entry")
        projections = load_projections(proj_path)
    if args.search_on == "test":
        sys.stderr.write(
            "warning: searching fusion weights on the test stream itself; "
            "pass --search-on val to use a held-out split\n"
        )
    samples, truth = _load_stream(manifest, text, which=args.search_on)
    state = _build_state(mode, manifest, text, FIXED_WEIGHTS, projections)
    found = alpha_grid_search(mode, samples, truth, state)
    sys.stdout.write(
        f"evaluated {found.evaluations} grid points\n"
        f"best alpha: ({found.best.alpha1}, {found.best.alpha2}, {found.best.alpha3})\n"
        f"best accuracy: {found.best_accuracy:.4f}\n"
    )
    out = _out_dir(args)
    if out is not None:
        rows = [
            {"alpha2": a2, "alpha3": a3, "accuracy": acc}
            for (a2, a3), acc in sorted(found.table.items())
        ]
        (out / "alpha_search.json").write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.spec is not None:
        spec = load_synthetic_spec(args.spec)
    elif args.preset == "calibrated":
        spec = CALIBRATED_SPEC
    else:
        raise ValidationError("synth needs --spec or --preset calibrated")
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _out_dir(args)
    if out is None:
        raise ValidationError("synth needs --out (or MEMCLF_OUT)")

    text, shots, test = make_synthetic(spec)
    save_text_classifier(text, out / "text.embf")
    save_feature_set(shots, out / "shots.embf")
    save_feature_set(test, out / "test.embf")
    save_synthetic_spec(spec, out / "synthetic_spec.yaml")
    manifest = DatasetManifest(
        class_names=[f"class_{i}" for i in range(spec.num_classes)],
        text_path=Path("text.embf"),
        test_path=Path("test.embf"),
        shots_path=Path("shots.embf"),
        seed=spec.seed,
    )
    save_manifest(manifest, out / "manifest.yaml")
    sys.stdout.write(
        f"synthetic dataset written to {out} "
        f"(C={spec.num_classes}, D={spec.dim}, test={test.count}, shots={shots.count})\n"
    )
    return EXIT_OK


def _cmd_validate(args) -> int:
    manifest, text = _load_common(args)
    dims = check_manifest_files(manifest)
    test = load_feature_set(manifest.test_path)
    validate_against(test, text)
    shot_note = "absent"
    if manifest.shots_path is not None:
        shots = load_feature_set(manifest.shots_path)
        validate_against(shots, text)
        shot_note = f"{shots.count} rows"
    sys.stdout.write(
        f"manifest ok: {manifest.num_classes} classes, dim {dims['text']}, "
        f"test {test.count} rows, shots {shot_note}\n"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memclf",
        description="Streaming memory-augmented adaptation for embedding classifiers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_manifest=True):
        if needs_manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest (YAML)")
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUT_DIR_ENV})")
        p.add_argument("--seed", type=int, default=None)

    def add_eval_flags(p):
        p.add_argument("--alpha", default="manifest",
                       help="'search', 'fixed', 'manifest' or 'a1,a2,a3'")
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--memory-length", type=int, default=None)
        p.add_argument("--rho", type=float, default=None)

    p_zs = sub.add_parser("zs", help="zero-shot run (dynamic memory only)")
    add_common(p_zs)
    add_eval_flags(p_zs)

    p_tf = sub.add_parser("tf", help="training-free few-shot run")
    add_common(p_tf)
    add_eval_flags(p_tf)

    p_train = sub.add_parser("fs-train", help="train the projection maps on the shots")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--leave-one-out", action="store_true")

    p_fs = sub.add_parser("fs-eval", help="few-shot run with trained projections")
    add_common(p_fs)
    add_eval_flags(p_fs)
    p_fs.add_argument("--projections", default=None, help="trained projection file")

    p_search = sub.add_parser("search-alpha", help="grid-search the fusion weights")
    add_common(p_search)
    p_search.add_argument("--mode", choices=[m.value for m in RunMode], required=True)
    p_search.add_argument("--search-on", choices=["test", "val"], default="test")
    p_search.add_argument("--projections", default=None)
    p_search.add_argument("--beta", type=float, default=None)
    p_search.add_argument("--memory-length", type=int, default=None)
    p_search.add_argument("--rho", type=float, default=None)

    p_synth = sub.add_parser("synth", help="generate a synthetic benchmark")
    add_common(p_synth, needs_manifest=False)
    p_synth.add_argument("--spec", default=None, help="synthetic spec (YAML)")
    p_synth.add_argument("--preset", choices=["calibrated"], default=None)

    p_val = sub.add_parser("validate", help="check a manifest and its files")
    add_common(p_val)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "zs":
            return _cmd_eval(args, RunMode.ZS)
        if args.command == "tf":
            return _cmd_eval(args, RunMode.TF)
        if args.command == "fs-eval":
            return _cmd_eval(args, RunMode.FS)
        if args.command == "fs-train":
            return _cmd_fs_train(args)
        if args.command == "search-alpha":
            return _cmd_search_alpha(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "validate":
            return _cmd_validate(args)
        parser.error(f"unknown command {args.command!r}")
    except FormatError as exc:
        sys.stderr.write(f"format error: {exc}\n")
        return EXIT_FORMAT
    except ValidationError as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except EngineError as exc:
        sys.stderr.write(f"engine error: {exc}\n")
        return EXIT_ENGINE
    except MemclfError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ENGINE
    except OSError as exc:
        sys.stderr.write(f"i/o error: {exc}\n")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
