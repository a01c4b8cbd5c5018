"""Command-line entrypoint.

    mvseg gen-scene --config toy.yaml --output scene/
    mvseg extract-features --scene scene/ --backend stub
    mvseg pseudo-label --scene scene/
    mvseg train --stage 1 --scene scene/ --config toy.yaml --output run/
    mvseg train --stage 2 --scene scene/ --config toy.yaml --checkpoint run/stage1.ckpt --output run/
    mvseg render --checkpoint run/stage2.ckpt --scene scene/ --view 3 --output renders/
    mvseg evaluate --checkpoint run/stage2.ckpt --scene scene/ --output eval/
    mvseg run --config toy.yaml --output runs/toy
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .foundation_features import CACHE_ENV, SAM_WEIGHTS_ENV, BackendUnavailable, make_backend
from .pipeline import STEPS, PipelineConfig, run_pipeline

log = logging.getLogger("mvseg")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output is not None:
        changes["output"] = args.output
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def cmd_gen_scene(args) -> int:
    from .scene_io import save_scene
    from .synthetic_scenes import ToySceneSpec, generate_toy_scene

    cfg = _config(args)
    if args.spec:
        spec = ToySceneSpec.from_dict(yaml.safe_load(_require_file(args.spec, "scene spec").read_text()))
        if args.seed is not None:
            spec = dataclasses.replace(spec, rng_seed=args.seed)
    else:
        spec = cfg.toy_spec()
        if spec is None:
            raise ValueError("config points at an existing scene; nothing to generate")
    out = Path(args.output or cfg.output)
    save_scene(generate_toy_scene(spec), out)
    print(out)
    return 0


def cmd_extract_features(args) -> int:
    from .scene_io import load_scene
    from .workflow import save_scene_features, scene_features

    scene_dir = _require_dir(args.scene, "scene directory")
    scene = load_scene(scene_dir)
    opts = {"patch_size": args.patch_size} if args.backend == "stub" else {"checkpoint": args.sam_checkpoint}
    backend = make_backend(args.backend, **opts)
    paths = save_scene_features(scene_dir, scene, scene_features(scene, backend, args.cache_dir))
    print(f"wrote {len(paths)} feature files ({backend.backend_id}) to {paths[0].parent}")
    return 0


def cmd_pseudo_label(args) -> int:
    from .scene_io import load_scene
    from .workflow import load_scene_features, write_pseudo_labels

    scene_dir = _require_dir(args.scene, "scene directory")
    scene = load_scene(scene_dir)
    centroids, maps = write_pseudo_labels(scene_dir, scene, load_scene_features(scene_dir, scene), args.metric)
    print(f"pseudo-labeled {len(maps)} test views; class pixel counts {centroids.counts.tolist()}")
    return 0


def cmd_train(args) -> int:
    from .scene_io import load_scene
    from .trainer import train_stage1, train_stage2
    from .workflow import dense_features, load_scene_features, read_pseudo_labels

    cfg = _config(args)
    scene_dir = _require_dir(args.scene, "scene directory")
    scene = load_scene(scene_dir)
    out = Path(args.output or cfg.output)
    resume = _require_file(args.resume, "resume checkpoint") if args.resume else None
    if args.stage == 1:
        res = train_stage1(scene, cfg.train_config(1), cfg.field_config(), out_dir=out, resume=resume)
    else:
        if not args.checkpoint:
            raise ValueError("stage 2 needs --checkpoint pointing at a stage-1 checkpoint")
        feats = dense_features(load_scene_features(scene_dir, scene))
        res = train_stage2(
            scene,
            _require_file(args.checkpoint, "stage-1 checkpoint"),
            read_pseudo_labels(scene_dir, scene),
            feats,
            cfg.train_config(2),
            cfg.fusion,
            out_dir=out,
            resume=resume,
        )
    print(res.checkpoint_path)
    return 0


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import render_view_chunks
    from .scene_io import load_scene, view_rays
    from .trainer import load_field, load_head
    from .workflow import load_scene_features, dense_features

    scene = load_scene(_require_dir(args.scene, "scene directory"))
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    field = load_field(ckpt)
    head = load_head(ckpt) if "fusion" in ckpt.configs else None
    n = args.samples or int(ckpt.meta.get("train", {}).get("samples_per_ray", 64))
    if not 0 <= args.view < len(scene):
        raise ValueError(f"view {args.view} outside [0, {len(scene)})")
    view = scene.views[args.view]
    feats = None
    if head is not None:
        feats = dense_features(load_scene_features(args.scene, scene))[args.view].reshape(-1, head.config.prior_dim)
    colour, seg = render_view_chunks(field, view_rays(scene, args.view), n, head, feats)
    h, w = view.camera.height, view.camera.width
    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(colour.reshape(h, w, 3), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(out / f"{view.name}_rgb.png")
    if seg is not None:
        Image.fromarray(seg.argmax(-1).astype(np.uint8).reshape(h, w), mode="L").save(out / f"{view.name}_labels.png")
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluator import format_table, write_scores_csv
    from .scene_io import load_scene
    from .workflow import dense_features, evaluate_views, load_scene_features

    scene = load_scene(_require_dir(args.scene, "scene directory"))
    feats = dense_features(load_scene_features(args.scene, scene))
    out = Path(args.output or ".")
    scores, total = evaluate_views(
        _require_file(args.checkpoint, "checkpoint"), scene, feats, args.views, args.samples, dump_dir=out / "pred"
    )
    write_scores_csv(out / "scores.csv", scores, total, scene.class_names)
    print(format_table(scores, total))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    for o in run_pipeline(cfg, args.until):
        print(f"{o.name:>13}: {'ran' if o.ran else 'up to date'}" + (f" ({o.seconds:.1f}s)" if o.ran else ""))
    return 0


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # subcommands get SUPPRESS defaults so flags given before the subcommand survive
    parent = argparse.ArgumentParser(add_help=False)
    g = parent.add_argument_group("global options")
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    g.add_argument("--config", default=d(None), help="pipeline config file (YAML)")
    g.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    g.add_argument("--output", default=d(None), help="output directory")
    g.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(False)

    p = argparse.ArgumentParser(
        prog="mvseg",
        description="Sparse-label multi-view semantic segmentation with a neural field.",
        epilog=f"environment: {CACHE_ENV} sets the feature cache directory; "
        f"{SAM_WEIGHTS_ENV} points at SAM encoder weights.",
        parents=[_global_options(True)],
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="generate a toy scene directory")
    s.add_argument("--spec", help="scene spec file (YAML); default: the config's scene spec")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("extract-features", parents=[common], help="compute per-view feature maps")
    s.add_argument("--scene", required=True, help="scene directory")
    s.add_argument("--backend", choices=["stub", "sam"], default="stub")
    s.add_argument("--patch-size", type=int, default=2, help="stub backend patch size in pixels")
    s.add_argument("--sam-checkpoint", default=os.environ.get(SAM_WEIGHTS_ENV), help="SAM encoder weights")
    s.add_argument("--cache-dir", help=f"feature cache directory (default: ${CACHE_ENV})")
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("pseudo-label", parents=[common], help="nearest-centroid labels for test views")
    s.add_argument("--scene", required=True, help="scene directory with extracted features")
    s.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("train", parents=[common], help="train stage 1 (RGB) or stage 2 (semantics)")
    s.add_argument("--stage", type=int, choices=[1, 2], required=True)
    s.add_argument("--scene", required=True, help="scene directory")
    s.add_argument("--checkpoint", help="stage-1 checkpoint (stage 2 only)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render a view's colour and label map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--view", type=int, required=True, help="view index")
    s.add_argument("--samples", type=int, help="samples per ray (default: from checkpoint)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", parents=[common], help="mIoU of a stage-2 checkpoint on test views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--views", type=int, nargs="*", help="view indices (default: test views)")
    s.add_argument("--samples", type=int, help="samples per ray (default: from checkpoint)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", parents=[common], help="run the whole pipeline, skipping up-to-date steps")
    s.add_argument("--until", choices=STEPS, help="stop after this step")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BackendUnavailable as e:
        log.error("%s", e)
        return 3
    except (FileNotFoundError, ValueError, KeyError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
