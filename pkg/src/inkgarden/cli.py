"""Operator command surface.

Every artifact-producing subcommand resolves its full configuration, writes a
run manifest (command, resolved config, seed, input hashes, output paths,
tool version) before touching any output, and never mutates its inputs.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    filter_record,
    load_corpus,
    RawImageMeta,
    read_manifest,
    scale_image,
    split_indices,
    write_manifest,
)
from .errors import InkgardenError
from .evaluator import (
    ContrastiveConfig,
    contrastive_train,
    evaluate,
    load_dual_encoder,
    save_dual_encoder,
)
from .imageio import image_size, load_image, save_image
from .lora import apply_adapter_arrays, load_adapter_arrays
from .panorama import SceneSequence, build_bundle, stitch, to_equirectangular
from .text import Vocabulary
from .toydata import synth_toy_dataset
from .trainer import (
    ModelSpec,
    TrainConfig,
    TrainData,
    TrainerSession,
    load_pipeline,
    train,
)

MODEL_KEYS = set(ModelSpec.__dataclass_fields__)
TRAIN_KEYS = {
    "total_steps",
    "batch_size",
    "lr",
    "lr_schedule",
    "lr_warmup_fraction",
    "lr_final_fraction",
    "checkpoint_every",
    "preview_count",
    "preview_prompt",
    "preview_steps",
    "seed",
    "kl_coeff",
    "train_text",
    "lora_rank",
    "lora_alpha",
    "log_wall_time",
}


class UsageError(Exception):
    pass


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path, command, config, seed, inputs, outputs):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_hashes": {str(p): _hash_file(p) for p in inputs},
        "output_paths": [str(p) for p in outputs],
        "tool_version": __version__,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


# -- prepare-data ---------------------------------------------------------

def cmd_prepare_data(args, workdir):
    root = workdir / args.root
    config = {
        "root": str(args.root),
        "synth": args.synth,
        "style_count": args.style_count,
        "eval_count": args.eval_count,
        "seed": args.seed,
        "side": args.side,
        "ingest": str(args.ingest) if args.ingest else None,
    }
    inputs = []
    if args.ingest:
        src = workdir / args.ingest
        inputs = sorted(p for p in src.rglob("*") if p.is_file())
    write_run_manifest(
        root / "run_manifest.json", "prepare-data", config, args.seed, inputs, [root]
    )
    if args.ingest:
        _ingest(workdir / args.ingest, root / "train", args.side)
    else:
        synth_toy_dataset(args.synth, seed=args.seed, side=args.side, out_dir=root / "train")
        synth_toy_dataset(
            args.style_count, seed=args.seed + 1, side=args.side, out_dir=root / "style", style="ink"
        )
        eval_records, _, _ = synth_toy_dataset(
            args.eval_count, seed=args.seed + 2, side=args.side, out_dir=root / "eval"
        )
        train_idx, holdout_idx = split_indices(len(eval_records), args.seed + 3)
        with (root / "eval" / "split.json").open("w", encoding="utf-8", newline="\n") as f:
            json.dump({"train": train_idx, "holdout": holdout_idx}, f)
            f.write("\n")
    captions = []
    for sub in ("train", "style", "eval"):
        manifest = root / sub / "metadata.jsonl"
        if manifest.exists():
            captions.extend(r.caption for r in read_manifest(manifest))
    Vocabulary.build(captions).save(root / "vocab.txt")
    print(f"prepared dataset under {root}")
    return 0


def _ingest(src, out_dir, side):
    """Filter and scale a raw directory: images/ + metadata.jsonl + curation.jsonl."""
    records = read_manifest(src / "metadata.jsonl", src / "curation.jsonl")
    accepted = []
    rejected = {}
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        path = src / "images" / rec.file_name
        width, height = image_size(path)
        meta = RawImageMeta(
            width=width,
            height=height,
            has_caption=bool(rec.caption.strip()),
            has_architecture=rec.has_architecture,
        )
        decision = filter_record(meta)
        if not decision.accepted:
            rejected[decision.reason] = rejected.get(decision.reason, 0) + 1
            continue
        scaled = scale_image(load_image(path), side)
        save_image(scaled, img_dir / rec.file_name)
        accepted.append(rec)
    write_manifest(accepted, out_dir / "metadata.jsonl", out_dir / "curation.jsonl")
    print(f"ingest: accepted {len(accepted)}, rejected {rejected}")


# -- train ------------------------------------------------------------------

def _load_train_config(args, workdir):
    values = {}
    if args.config:
        raw = json.loads((workdir / args.config).read_text(encoding="utf-8"))
        unknown = set(raw) - TRAIN_KEYS - MODEL_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    for key in ("total_steps", "batch_size", "lr", "checkpoint_every", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if args.preview_prompt is not None:
        values["preview_prompt"] = args.preview_prompt
    if "total_steps" not in values:
        raise UsageError("missing required config key: total_steps (set it in --config or via --total-steps)")
    model_values = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    if "channel_mults" in model_values:
        model_values["channel_mults"] = tuple(model_values["channel_mults"])
    return TrainConfig(stage=args.stage, model=ModelSpec(**model_values), **train_values)


def _load_train_data(root):
    records, images = load_corpus(root)
    return TrainData(images=images.astype(np.float32), captions=[r.caption for r in records])


def cmd_train(args, workdir):
    if args.stage == "diffusion" and not args.vae_ckpt:
        raise UsageError("stage diffusion requires --vae-ckpt (the pretrained VAE checkpoint)")
    if args.stage == "lora" and not args.base_ckpt:
        raise UsageError(
            "stage lora requires --base-ckpt (the frozen diffusion checkpoint to adapt)"
        )
    config = _load_train_config(args, workdir)
    out_dir = workdir / args.out
    data_root = workdir / args.data
    data = _load_train_data(data_root)

    vocab = None
    vocab_path = args.vocab or (Path(args.data).parent / "vocab.txt" if (data_root.parent / "vocab.txt").exists() else None)
    if args.stage in ("diffusion", "lora"):
        if vocab_path is None:
            raise UsageError("no vocab.txt found next to the data root; pass --vocab")
        vocab = Vocabulary.load(workdir / vocab_path)

    inputs = [data_root / "metadata.jsonl"]
    if args.vae_ckpt:
        inputs.append(workdir / args.vae_ckpt)
    if args.base_ckpt:
        inputs.append(workdir / args.base_ckpt)
    resolved = {
        "stage": args.stage,
        "data": str(args.data),
        "out": str(args.out),
        "vae_ckpt": str(args.vae_ckpt) if args.vae_ckpt else None,
        "base_ckpt": str(args.base_ckpt) if args.base_ckpt else None,
        "resume": str(args.resume) if args.resume else None,
        "vocab": str(vocab_path) if vocab_path else None,
        "train": {k: getattr(config, k) for k in sorted(TRAIN_KEYS)},
        "model": config.model.to_dict(),
    }
    write_run_manifest(
        out_dir / "run_manifest.json", "train", resolved, config.seed, inputs, [out_dir]
    )

    session = TrainerSession(config, data, vocab)
    if args.stage == "vae":
        session.init_vae_stage()
    elif args.stage == "diffusion":
        session.init_diffusion_stage(workdir / args.vae_ckpt)
    else:
        session.init_lora_stage(workdir / args.base_ckpt)
    final, losses = train(session, out_dir, resume_from=(workdir / args.resume) if args.resume else None)
    print(f"stage {args.stage}: {len(losses)} steps, final loss {losses[-1]:.5f}, checkpoint {final}")
    return 0


def cmd_train_evaluator(args, workdir):
    data_root = workdir / args.data
    records, images = load_corpus(data_root)
    split_path = data_root / "split.json"
    if split_path.exists():
        split = json.loads(split_path.read_text(encoding="utf-8"))
        idx = split["train"]
    else:
        idx = list(range(len(records)))
    vocab = Vocabulary.load(workdir / args.vocab)
    out = workdir / args.out
    resolved = {
        "data": str(args.data),
        "out": str(args.out),
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "vocab": str(args.vocab),
    }
    write_run_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "train-evaluator",
        resolved,
        args.seed,
        [data_root / "metadata.jsonl", workdir / args.vocab],
        [out],
    )
    captions = [records[i].caption for i in idx]
    encoder, losses = contrastive_train(
        images[idx],
        captions,
        vocab,
        ContrastiveConfig(total_steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed),
    )
    save_dual_encoder(out, encoder, vocab)
    print(f"evaluator: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}, saved {out}")
    return 0


# -- sampling ---------------------------------------------------------------

def _pipeline_with_adapter(workdir, ckpt, adapter):
    pipeline, header = load_pipeline(workdir / ckpt)
    if adapter:
        if header.get("lora"):
            raise UsageError("checkpoint already contains adapters; --adapter would double-inject")
        entries = load_adapter_arrays(workdir / adapter)
        apply_adapter_arrays(pipeline.unet, "unet", entries)
    return pipeline


def cmd_sample(args, workdir):
    out = workdir / args.out
    inputs = [workdir / args.ckpt] + ([workdir / args.adapter] if args.adapter else [])
    resolved = {
        "ckpt": str(args.ckpt),
        "adapter": str(args.adapter) if args.adapter else None,
        "prompt": args.prompt,
        "steps": args.steps,
        "sampler": args.sampler,
        "seed": args.seed,
        "guidance_scale": args.guidance_scale,
        "out": str(args.out),
    }
    write_run_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "sample", resolved, args.seed, inputs, [out]
    )
    pipeline = _pipeline_with_adapter(workdir, args.ckpt, args.adapter)
    image = pipeline.sample(
        args.prompt, steps=args.steps, seed=args.seed, sampler=args.sampler, guidance_scale=args.guidance_scale
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(image, out)
    print(f"wrote {out}")
    return 0


def cmd_inpaint(args, workdir):
    from .diffusion import InpaintTask

    out = workdir / args.out
    inputs = [workdir / args.ckpt, workdir / args.image, workdir / args.mask]
    resolved = {
        "ckpt": str(args.ckpt),
        "adapter": str(args.adapter) if args.adapter else None,
        "image": str(args.image),
        "mask": str(args.mask),
        "prompt": args.prompt,
        "steps": args.steps,
        "seed": args.seed,
        "out": str(args.out),
    }
    write_run_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "inpaint", resolved, args.seed, inputs, [out]
    )
    pipeline = _pipeline_with_adapter(workdir, args.ckpt, args.adapter)
    source = load_image(workdir / args.image)
    mask_img = load_image(workdir / args.mask)
    mask = (mask_img.mean(axis=0) > 0.0).astype(np.int64)  # white = regenerate
    task = InpaintTask(source=source, mask=mask, prompt=args.prompt)
    result = pipeline.inpaint(task, steps=args.steps, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(result, out)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args, workdir):
    out = workdir / args.out
    image_dir = workdir / args.images
    image_paths = sorted(image_dir.glob("*.png"))
    if not image_paths:
        raise UsageError(f"no PNG files under {image_dir}")
    prompts = (workdir / args.prompts).read_text(encoding="utf-8").splitlines()
    prompts = [p for p in prompts if p.strip()]
    inputs = [workdir / args.encoder, workdir / args.prompts] + image_paths
    refs = None
    if args.refs:
        refs_dir = workdir / args.refs
        refs = [load_image(refs_dir / p.name) for p in image_paths]
        inputs.extend(refs_dir / p.name for p in image_paths)
    resolved = {
        "encoder": str(args.encoder),
        "images": str(args.images),
        "prompts": str(args.prompts),
        "refs": str(args.refs) if args.refs else None,
        "out": str(args.out),
    }
    write_run_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "evaluate", resolved, 0, inputs, [out]
    )
    encoder, vocab = load_dual_encoder(workdir / args.encoder)
    images = [load_image(p) for p in image_paths]
    report = evaluate(encoder, vocab, images, prompts, references=refs, image_names=[p.name for p in image_paths])
    with out.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {out} (mean text-image cos {report['aggregate']['text_image_cos']['mean']:.4f})")
    return 0


def cmd_panorama(args, workdir):
    out_dir = workdir / args.out
    scene_paths = [workdir / s for s in args.scenes]
    prompts_path = workdir / args.seam_prompts
    seam_prompts = [p for p in prompts_path.read_text(encoding="utf-8").splitlines() if p.strip()]
    inputs = [workdir / args.ckpt, prompts_path] + scene_paths
    resolved = {
        "ckpt": str(args.ckpt),
        "adapter": str(args.adapter) if args.adapter else None,
        "scenes": [str(s) for s in args.scenes],
        "seam_prompts": str(args.seam_prompts),
        "gap": args.gap,
        "height": args.height,
        "steps": args.steps,
        "seed": args.seed,
        "out": str(args.out),
    }
    write_run_manifest(
        out_dir / "run_manifest.json", "panorama", resolved, args.seed, inputs, [out_dir]
    )
    pipeline = _pipeline_with_adapter(workdir, args.ckpt, args.adapter)
    scenes = [load_image(p) for p in scene_paths]
    seq = SceneSequence(images=scenes, seam_prompts=seam_prompts, gap_width=args.gap)

    def inpaint_fn(task, seed):
        return pipeline.inpaint(task, steps=args.steps, seed=seed)

    strip = stitch(seq, inpaint_fn, args.seed, latent_factor=pipeline.vae.config.downsample_factor)
    pano = to_equirectangular(strip, args.height)
    save_image(strip, out_dir / "strip.png")
    meta = build_bundle(out_dir, seq, strip, pano, args.seed)
    print(f"wrote {out_dir / 'panorama.png'} ({meta['width']}x{meta['height']}), wrap error {pano.wrap_error():.6f}")
    return 0


def cmd_rerun(args, workdir):
    manifest = json.loads((workdir / args.manifest).read_text(encoding="utf-8"))
    command = manifest["command"]
    cfg = manifest["config"]
    argv = _manifest_to_argv(command, cfg)
    print(f"rerunning: inkgarden {' '.join(argv)}")
    return main(["--workdir", str(workdir)] + argv)


def _manifest_to_argv(command, cfg):
    if command == "sample":
        argv = [
            "sample", "--ckpt", cfg["ckpt"], "--prompt", cfg["prompt"],
            "--steps", str(cfg["steps"]), "--sampler", cfg["sampler"],
            "--seed", str(cfg["seed"]), "--guidance-scale", str(cfg["guidance_scale"]),
            "--out", cfg["out"],
        ]
        if cfg.get("adapter"):
            argv += ["--adapter", cfg["adapter"]]
        return argv
    if command == "inpaint":
        argv = [
            "inpaint", "--ckpt", cfg["ckpt"], "--image", cfg["image"], "--mask", cfg["mask"],
            "--prompt", cfg["prompt"], "--steps", str(cfg["steps"]), "--seed", str(cfg["seed"]),
            "--out", cfg["out"],
        ]
        if cfg.get("adapter"):
            argv += ["--adapter", cfg["adapter"]]
        return argv
    if command == "prepare-data":
        argv = ["prepare-data", "--root", cfg["root"], "--seed", str(cfg["seed"]), "--side", str(cfg["side"]),
                "--synth", str(cfg["synth"]), "--style-count", str(cfg["style_count"]),
                "--eval-count", str(cfg["eval_count"])]
        if cfg.get("ingest"):
            argv += ["--ingest", cfg["ingest"]]
        return argv
    raise UsageError(f"rerun does not support command '{command}'")


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="inkgarden", description=__doc__)
    parser.add_argument("--workdir", default=".", help="base directory all paths resolve against")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="synthesize or ingest an image-caption corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--synth", type=int, default=64, help="training corpus size")
    p.add_argument("--style-count", type=int, default=16, help="ink-style adaptation subset size")
    p.add_argument("--eval-count", type=int, default=320, help="evaluator corpus size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--ingest", default=None, help="raw source dir to filter and scale instead of synthesis")

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["vae", "diffusion", "lora"])
    p.add_argument("--config", default=None, help="flat JSON config file")
    p.add_argument("--data", required=True, help="corpus dir with metadata.jsonl and images/")
    p.add_argument("--out", required=True)
    p.add_argument("--vae-ckpt", default=None)
    p.add_argument("--base-ckpt", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preview-prompt", dest="preview_prompt", default=None)

    p = sub.add_parser("train-evaluator", help="train the contrastive dual encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample", help="generate one image from a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--sampler", choices=["ddpm", "pndm"], default="pndm")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--guidance-scale", dest="guidance_scale", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inpaint", help="regenerate the masked region of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="PNG; white pixels are regenerated")
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score generated images against prompts")
    p.add_argument("--encoder", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--prompts", required=True, help="text file, one prompt per line")
    p.add_argument("--refs", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("panorama", help="stitch scenes and assemble the roaming bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--seam-prompts", dest="seam_prompts", required=True)
    p.add_argument("--gap", type=int, default=None)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="reproduce a run from its manifest")
    p.add_argument("manifest")
    return parser


_DISPATCH = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "train-evaluator": cmd_train_evaluator,
    "sample": cmd_sample,
    "inpaint": cmd_inpaint,
    "evaluate": cmd_evaluate,
    "panorama": cmd_panorama,
    "rerun": cmd_rerun,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    workdir = Path(args.workdir)
    try:
        return _DISPATCH[args.command](args, workdir)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except InkgardenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
