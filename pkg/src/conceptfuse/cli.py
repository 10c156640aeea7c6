"""``conceptfuse`` command line: init-toy, train, generate, inspect-attention, evaluate.

Exit codes: 0 success, 2 validation, 3 overwrite guard, 4 plugin failure,
5 training-invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attention import render_grid, token_attention
from .checkpoint import MANIFEST, Checkpoint, build_backend, directory_digest
from .data import list_images, load_image
from .diffusion import forward_noise
from .errors import ConceptFuseError, ConfigurationError, OverwriteError
from .evaluation import evaluate
from .generation import request_from_dict, request_to_dict, write_outputs
from .plugins import AESTHETIC_PREDICTORS, IDENTITY_EMBEDDERS, IMAGE_EMBEDDERS, load_plugin_modules
from .project import (
    ProjectLayout, apply_overrides, concept_settings, ensure_masks, load_concept_images, load_config,
    make_segmenter, provenance, write_json, write_toy_project,
)
from .templates import COMPOSED_TEMPLATES, REFERENCE, SOURCE, fill
from .trainer import ConceptSpec, TrainConfig, Trainer, jsonl_writer

log = logging.getLogger("conceptfuse")


# shared helpers ---------------------------------------------------------------

def _project(args) -> tuple[ProjectLayout, dict]:
    path = Path(args.config)
    if path.is_dir():
        path = ProjectLayout(path.resolve()).config_path()
    layout = ProjectLayout(path.resolve().parent)
    config = apply_overrides(load_config(path), getattr(args, "set", None) or [])
    return layout, config


def _identity_embedder(config: dict):
    plugins = config.get("plugins", {})
    name = plugins.get("identity_embedder", "toy")
    if name not in IDENTITY_EMBEDDERS:
        raise ConfigurationError(f"plugins.identity_embedder: unknown {name!r}; registered: {sorted(IDENTITY_EMBEDDERS)}")
    opts = dict(plugins.get("identity_options", {}))
    if name == "toy" and "box" not in opts:
        box = config.get("masks", {}).get("default_box")
        opts["box"] = tuple(box) if box is not None else None
    return IDENTITY_EMBEDDERS[name](**opts)


def _image_embedder(config: dict):
    plugins = config.get("plugins", {})
    name = plugins.get("image_embedder", "toy")
    if name not in IMAGE_EMBEDDERS:
        raise ConfigurationError(f"plugins.image_embedder: unknown {name!r}; registered: {sorted(IMAGE_EMBEDDERS)}")
    return IMAGE_EMBEDDERS[name](**plugins.get("image_options", {}))


def _aesthetic(config: dict):
    name = config.get("plugins", {}).get("aesthetic")
    if name is None:
        return None
    if name not in AESTHETIC_PREDICTORS:
        log.warning("aesthetic predictor %r is not registered; the metric is omitted", name)
        return None
    return AESTHETIC_PREDICTORS[name]


def _concepts(layout: ProjectLayout, config: dict):
    segmenter = make_segmenter(config)
    specs, inputs = [], []
    for cid in (SOURCE, REFERENCE):
        s = concept_settings(config, cid)
        paths, images = load_concept_images(layout, s["dir"])
        masks = ensure_masks(layout, cid, paths, images, segmenter)
        specs.append(ConceptSpec(cid, s["token"], images, masks, s.get("init_word")))
        inputs += paths
    return specs, inputs


def _latest_checkpoint(layout: ProjectLayout, explicit: str | None) -> Path:
    if explicit:
        path = layout.inside(explicit)
        if not (path / MANIFEST).exists():
            raise ConfigurationError(f"no checkpoint at {path}")
        return path
    for phase in (2, 1):
        d = layout.checkpoint_dir(phase)
        if (d / MANIFEST).exists():
            return d
    raise ConfigurationError(f"no checkpoint under {layout.checkpoints}; run `conceptfuse train` first")


def _load_backend(path: Path):
    ck = Checkpoint.load(path)
    return ck.restore(build_backend(ck.backend)), ck


def _out_dir(layout: ProjectLayout, explicit: str | None, parent: Path, prefix: str) -> Path:
    if explicit:
        return layout.inside(explicit)
    return layout.next_run_dir(parent, prefix)


# commands -----------------------------------------------------------------------

def cmd_init_toy(args) -> int:
    path = write_toy_project(Path(args.root), args.n_source, args.n_reference, args.seed)
    print(f"wrote toy project {path}")
    return 0


def cmd_train(args, argv) -> int:
    layout, config = _project(args)
    train_cfg = TrainConfig.from_dict(config.get("train", {}))
    backend_spec = config.get("backend", {"name": "toy"})
    phases = [1, 2] if args.phase == "all" else [int(args.phase)]
    done = {p: (layout.checkpoint_dir(p) / MANIFEST).exists() for p in (1, 2)}

    if not args.resume:
        existing = [p for p in phases if done[p]]
        if existing:
            raise OverwriteError(
                f"checkpoint {layout.checkpoint_dir(existing[0])} already exists; pass --resume to continue"
            )
        if phases == [2]:
            raise ConfigurationError("phase 2 continues from checkpoints/phase1; pass --resume")
    run = [p for p in phases if not done[p]] if args.resume else phases
    if not run:
        print("nothing to do: all requested phases have checkpoints")
        return 0
    if 2 in run and 1 not in run and not done[1]:
        raise ConfigurationError(f"phase 2 needs a phase-1 checkpoint at {layout.checkpoint_dir(1)}")

    concepts, inputs = _concepts(layout, config)
    backend = build_backend(backend_spec)
    if 1 not in run:
        previous = Checkpoint.load(layout.checkpoint_dir(1))
        if previous.config != train_cfg.to_dict():
            raise ConfigurationError("the [train] section differs from the one the phase-1 checkpoint was trained with")
        previous.restore(backend)
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(train_cfg, concepts, backend, embedder=_identity_embedder(config))
    for phase in run:
        trace_path = layout.checkpoints / f"trace_phase{phase}.jsonl"
        trainer.trace = jsonl_writer(trace_path, mode="w")
        try:
            ck = trainer.run_phase1() if phase == 1 else trainer.run_phase2()
        finally:
            trainer.trace.close()
        out = ck.save(layout.checkpoint_dir(phase))
        write_json(out / "provenance.json", provenance(argv, config, inputs, phase=phase,
                                                       trace=trace_path.name, digest=ck.digest()), overwrite=True)
        print(f"phase {phase}: checkpoint {out} digest {ck.digest()}")
    return 0


def _request(config: dict, args):
    data = dict(config.get("generate", {}))
    for flag, key in (("prompt", "prompt"), ("extra", "extra"), ("seed", "seed"), ("count", "num_images"),
                      ("steps", "num_denoise_steps"), ("guidance", "guidance_scale")):
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if getattr(args, "postprocess", None) is not None:
        data["postprocess"] = [p for p in args.postprocess.split(",") if p]
    return request_from_dict(data)


def cmd_generate(args, argv) -> int:
    layout, config = _project(args)
    ck_dir = _latest_checkpoint(layout, args.checkpoint)
    backend, ck = _load_backend(ck_dir)
    request = _request(config, args)
    out = _out_dir(layout, args.out, layout.outputs, "run")
    paths = write_outputs(out, backend, request, directory_digest(ck_dir),
                          {"checkpoint": str(ck_dir.relative_to(layout.root)), "command": ["conceptfuse", *argv]})
    write_json(out / "provenance.json", provenance(argv, config, request=request_to_dict(request),
                                                   checkpoint=str(ck_dir), checkpoint_digest=directory_digest(ck_dir)),
               overwrite=True)
    for p in paths:
        print(p)
    return 0


def cmd_inspect_attention(args, argv) -> int:
    layout, config = _project(args)
    ck_dir = _latest_checkpoint(layout, args.checkpoint)
    backend, _ = _load_backend(ck_dir)
    tokens = backend.concept_tokens()
    text = fill(args.prompt, tokens) if "{" in args.prompt else args.prompt
    prompt = backend.resolve_prompt(text, args.prompt)
    T = backend.schedule.T
    t = args.timestep if args.timestep is not None else T // 2
    gen = torch.Generator().manual_seed(args.seed)
    regions = {}
    if args.image:
        img_path = layout.inside(args.image)
        image = load_image(img_path)
        hw = tuple(image.shape[-2:])
        x0 = backend.encode(image[None])
        eps = torch.randn(x0.shape, generator=gen)
        z = forward_noise(x0, t, eps, backend.schedule).z
        face = make_segmenter(config).segment(image.numpy(), img_path)
        if face is not None:
            face = np.asarray(face, dtype=np.uint8)
            regions = {SOURCE: face, REFERENCE: 1 - face}
    else:
        hw = tuple(config.get("generate", {}).get("image_hw", (32, 32)))
        z = torch.randn((1, *backend.latent_shape(hw)), generator=gen)
    items = token_attention(backend, prompt, z, t, hw, regions)
    out = _out_dir(layout, args.out, layout.reports, "attention")
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for item in items:
        png = out / f"attention_{item.concept_id}.png"
        if png.exists():
            raise OverwriteError(f"{png} already exists")
        render_grid(item).save(png)
        summary[item.concept_id] = {
            "token": tokens[item.concept_id], "position": item.position,
            "cells": [name for name, _ in item.cells],
            "min": min(float(c.min()) for _, c in item.cells), "max": max(float(c.max()) for _, c in item.cells),
            "outside_mean": item.outside_mean(), "grid": png.name,
        }
        print(png)
    write_json(out / "attention.json", {"prompt": text, "timestep": t, "tokens": summary,
                                         "provenance": provenance(argv, config, checkpoint=str(ck_dir))})
    return 0


def _face_bitmaps(images, paths, segmenter, notices, label):
    out = []
    for img, p in zip(images, paths):
        face = segmenter.segment(img.numpy(), p)
        if face is None:
            notices.append(f"no face mask for {label} image {Path(p).name}; nothing masked")
            face = np.zeros(img.shape[-2:], dtype=np.uint8)
        out.append(np.asarray(face, dtype=np.uint8))
    return out


def cmd_evaluate(args, argv) -> int:
    layout, config = _project(args)
    if args.outputs:
        gen_dir = layout.inside(args.outputs)
    else:
        ck_dir = _latest_checkpoint(layout, args.checkpoint)
        backend, _ = _load_backend(ck_dir)
        request = _request(config, args)
        gen_dir = layout.next_run_dir(layout.outputs, "run")
        write_outputs(gen_dir, backend, request, directory_digest(ck_dir),
                      {"checkpoint": str(ck_dir.relative_to(layout.root)), "command": ["conceptfuse", *argv]})
    gen_paths = [p for p in list_images(gen_dir) if not p.name.endswith(".post.png")]
    if not gen_paths:
        raise ConfigurationError(f"no generated images in {gen_dir}")
    src_dir = args.source or concept_settings(config, SOURCE)["dir"]
    ref_dir = args.reference or concept_settings(config, REFERENCE)["dir"]
    src_paths, src = load_concept_images(layout, src_dir)
    ref_paths, ref = load_concept_images(layout, ref_dir)
    gen = [load_image(p) for p in gen_paths]
    segmenter = make_segmenter(config)
    notices: list[str] = []
    gen_faces = _face_bitmaps(gen, gen_paths, segmenter, notices, "generated")
    ref_faces = _face_bitmaps(ref, ref_paths, segmenter, notices, "reference")
    report = evaluate(gen, list(src), list(ref), identity_embedder=_identity_embedder(config),
                      image_embedder=_image_embedder(config), generated_face_masks=gen_faces,
                      reference_face_masks=ref_faces, aesthetic=_aesthetic(config),
                      names=[p.name for p in gen_paths], jobs=args.jobs,
                      reduction=config.get("evaluate", {}).get("reduction", "nearest"))
    report.notices = notices + report.notices
    out = _out_dir(layout, args.out, layout.reports, "eval")
    out.mkdir(parents=True, exist_ok=True)
    for name in ("report.json", "report.txt"):
        if (out / name).exists():
            raise OverwriteError(f"{out / name} already exists")
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table() + "\n")
    write_json(out / "provenance.json", provenance(argv, config, gen_paths + src_paths + ref_paths,
                                                   generated=str(gen_dir)), overwrite=True)
    for n in report.notices:
        log.warning(n)
    print(report.table())
    print(f"report written to {out}")
    return 0


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conceptfuse", description="Compose a subject and a style with a diffusion model.")
    ap.add_argument("--version", action="version", version=f"conceptfuse {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def project_args(p):
        p.add_argument("--config", default=".", help="config file or project directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("init-toy", help="write a toy-backend project")
    p.add_argument("root")
    p.add_argument("--n-source", type=int, default=2)
    p.add_argument("--n-reference", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run training phases")
    project_args(p)
    p.add_argument("--phase", choices=["1", "2", "all"], default="all")
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")

    def gen_args(p):
        p.add_argument("--checkpoint")
        p.add_argument("--prompt", help=f"template or text (default {COMPOSED_TEMPLATES[0]!r})")
        p.add_argument("--extra", help="description appended to the prompt")
        p.add_argument("--seed", type=int)
        p.add_argument("--count", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--guidance", type=float)
        p.add_argument("--postprocess", help="comma-separated postprocessor ids")

    p = sub.add_parser("generate", help="sample composed-prompt images")
    project_args(p)
    gen_args(p)
    p.add_argument("--out")

    p = sub.add_parser("inspect-attention", help="render per-token attention grids")
    project_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompt", default=COMPOSED_TEMPLATES[0])
    p.add_argument("--image", help="noise this image instead of a random latent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timestep", type=int)
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="identity / style / aesthetic report")
    project_args(p)
    gen_args(p)
    p.add_argument("--outputs", help="directory of generated images (default: generate from the checkpoint)")
    p.add_argument("--source")
    p.add_argument("--reference")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    return ap


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "inspect-attention": cmd_inspect_attention,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        load_plugin_modules()
        if args.command == "init-toy":
            return cmd_init_toy(args)
        return COMMANDS[args.command](args, argv)
    except ConceptFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
