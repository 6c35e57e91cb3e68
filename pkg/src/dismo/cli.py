"""Command-line entry point.

Subcommands: gen-data, train, transfer, sample-frame, eval, analyze,
align-check. Every invocation emits one RunReport (run_report.json in the
output directory, or stdout when the command writes no files). Primary
outputs (manifests, reports, CSVs) contain no timestamps, so a rerun with
the same config and seed reproduces them byte for byte; wall time lives
only in the RunReport.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

import dismo
from dismo import evalsuite, plots, transfer as transfer_mod
from dismo.config import RunConfig, parse_config
from dismo.datagen import (
    DatasetManifest,
    config_hash,
    generate_dataset,
    load_clip,
    quantize_frames,
)
from dismo.errors import (
    CliValidationError,
    ConfigurationError,
    DegenerateDataError,
    NotFoundError,
)
from dismo.training import CheckpointBundle, run_training

PROTOCOLS = ("identity-leak", "action-knn", "mir", "composite", "cycles",
             "reversibility", "all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="dismo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="render a synthetic sprite dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="jointly train extractor and generator")
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--out", default="train")
    p.add_argument("--data", default=None, help="overrides train.dataset from the config")
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("transfer", help="autoregressive motion transfer")
    p.add_argument("--driving", required=True, help="clip frames dir, or clip id with --data")
    p.add_argument("--data", default=None)
    p.add_argument("--target", required=True, help="target initial frame (PNG)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-frame", help="one conditional frame sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source-frame", required=True)
    p.add_argument("--driving", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--motion-index", type=int, default=0)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run evaluation protocols")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default="all")
    p.add_argument("--out", default="report.json")
    p.add_argument("--config", default=None)

    p = sub.add_parser("analyze", help="emit PCA/cycle figures and raw coordinates")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("align-check", help="print the motion/latent alignment table")
    p.add_argument("--len", dest="video_len", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--latent-stride", type=int, default=8)

    return parser


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("DISMO_OUT")
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def _load_driving_frames(driving: str, data: str | None) -> tuple[np.ndarray, str]:
    if data is not None:
        manifest = DatasetManifest.load(data)
        clip = load_clip(manifest, driving)
        return clip.frames, clip.clip_id
    path = Path(driving)
    if not path.is_dir():
        raise CliValidationError(f"--driving: {path} is not a directory "
                                 "(pass --data to load by clip id)")
    files = sorted(path.glob("frame_*.png"))
    if not files:
        raise CliValidationError(f"--driving: no frame_*.png files in {path}")
    frames = np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8)
                       for f in files]).astype(np.float32) / 255.0
    return frames, path.name


def _load_image(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8).astype(np.float32) / 255.0


def _save_image(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(quantize_frames(frame[None])[0]).save(path)


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Handlers: each returns (report_dir | None, output_paths, config_hash)
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> tuple[Path | None, list[str], str]:
    cfg = parse_config(args.config)
    out = _resolve_out(args.out)
    manifest = generate_dataset(cfg.data.to_generation_config(), out)
    print(f"wrote {len(manifest.records)} clips to {out}")
    return out, [str(out / "manifest.json")], cfg.hash


def _cmd_train(args) -> tuple[Path | None, list[str], str]:
    cfg = parse_config(args.config)
    out = _resolve_out(args.out)
    train_cfg = cfg.train
    if args.data is not None:
        import dataclasses
        train_cfg = dataclasses.replace(train_cfg, dataset=str(_resolve_out(args.data)))
    bundle = run_training(train_cfg, cfg.motion_extractor, cfg.frame_generator,
                          cfg.augment, out_dir=out, resume=args.resume,
                          progress=args.progress)
    print(f"finished at iteration {bundle.iteration}; checkpoint in {out}")
    return out, [str(out / "checkpoint.pt"), str(out / "loss_log.jsonl")], cfg.hash


def _cmd_transfer(args) -> tuple[Path | None, list[str], str]:
    bundle = CheckpointBundle.load(args.ckpt)
    frames, clip_id = _load_driving_frames(args.driving, args.data)
    target = _load_image(args.target)
    req = transfer_mod.TransferRequest(driving_frames=frames, target_frame=target,
                                       delta=args.delta, ode_steps=args.steps,
                                       seed=args.seed, driving_clip_id=clip_id)
    clip = transfer_mod.autoregressive_transfer(req, bundle)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(clip.frames):
        fp = out / f"frame_{t:04d}.png"
        _save_image(fp, frame)
        paths.append(str(fp))
    print(f"wrote {len(paths)} transferred frames to {out}")
    return out, paths, bundle.config_hash


def _cmd_sample_frame(args) -> tuple[Path | None, list[str], str]:
    bundle = CheckpointBundle.load(args.ckpt)
    extractor, generator = bundle.build_models()
    frames, clip_id = _load_driving_frames(args.driving, args.data)
    motion = extractor.extract(frames, clip_id=clip_id)
    if not 0 <= args.motion_index < len(motion):
        raise CliValidationError(
            f"--motion-index: must be in [0, {len(motion) - 1}], got {args.motion_index}")
    source = torch.from_numpy(_load_image(args.source_frame)).permute(2, 0, 1)
    m = torch.from_numpy(motion.embeddings[args.motion_index]).float()
    rng = torch.Generator().manual_seed(args.seed)
    frame = generator.sample(source, m, args.delta, args.steps, rng)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_image(out, frame.permute(1, 2, 0).numpy())
    print(f"wrote sampled frame to {out}")
    return out.parent, [str(out)], bundle.config_hash


def _run_protocols(protocol: str, bundle: CheckpointBundle, manifest: DatasetManifest,
                   cfg: RunConfig) -> dict:
    ev = cfg.eval
    sections = {}
    want = lambda name: protocol in (name, "all")
    if want("identity-leak"):
        sections["identity_leak"] = evalsuite.identity_leak_protocol(
            bundle, manifest, k=ev.knn_k)
    if want("action-knn"):
        sections["action_knn"] = evalsuite.action_knn_protocol(bundle, manifest, k=ev.knn_k)
    if want("mir"):
        sections["mir"] = evalsuite.mir_protocol(bundle, manifest, k=ev.mi_k)
    if want("composite"):
        sections["composite"] = evalsuite.composite_motion_protocol(
            bundle, manifest, n_samples=ev.composite_samples, k=ev.mi_k,
            n_perm=ev.n_perm, seed=ev.seed)
    if want("cycles"):
        sections["cycles"] = evalsuite.cycles_protocol(
            bundle, manifest, clips_per_action=ev.cycles_clips_per_action,
            dims=ev.pca_dims, seed=ev.seed)
    if want("reversibility"):
        sections["reversibility"] = evalsuite.reversibility_protocol(
            bundle, manifest, clips_per_action=ev.reversibility_clips,
            k=ev.mi_k, seed=ev.seed)
    if protocol == "all":
        import dataclasses
        sections["augmentation_invariance"] = evalsuite.augmentation_invariance_protocol(
            bundle, manifest, n_clips=ev.invariance_clips, seed=ev.seed,
            photometric=dataclasses.replace(cfg.augment, enable_geometric=False),
            geometric=dataclasses.replace(cfg.augment, enable_photometric=False))
    return sections


def _cmd_eval(args) -> tuple[Path | None, list[str], str]:
    cfg = parse_config(args.config)
    bundle = CheckpointBundle.load(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    sections = _run_protocols(args.protocol, bundle, manifest, cfg)
    report = {
        "schema_version": evalsuite.REPORT_SCHEMA_VERSION,
        "protocol": args.protocol,
        "config": cfg.to_json(),
        "config_hash": cfg.hash,
        "checkpoint_hash": bundle.config_hash,
        "checkpoint_iteration": bundle.iteration,
        "dataset_hash": manifest.doc.get("config_hash", ""),
        "protocols": sections,
    }
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    print(f"wrote evaluation report to {out}")
    return out.parent, [str(out)], cfg.hash


def _cmd_analyze(args) -> tuple[Path | None, list[str], str]:
    cfg = parse_config(args.config)
    bundle = CheckpointBundle.load(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    out = _resolve_out(args.out)

    full = evalsuite.embed_split(bundle, manifest, split=None)
    proj = evalsuite.pca_project(full.vectors, dims=max(cfg.eval.pca_dims, 2))
    cycles = evalsuite.cycles_protocol(bundle, manifest,
                                       clips_per_action=cfg.eval.cycles_clips_per_action,
                                       dims=cfg.eval.pca_dims, seed=cfg.eval.seed)
    rev = evalsuite.reversibility_protocol(bundle, manifest,
                                           clips_per_action=cfg.eval.reversibility_clips,
                                           k=cfg.eval.mi_k, seed=cfg.eval.seed)
    written = plots.emit_analysis(out, proj.coordinates, full.labels, cycles, rev)
    summary = {
        "schema_version": evalsuite.REPORT_SCHEMA_VERSION,
        "explained_variance_ratio": [float(v) for v in proj.explained_variance_ratio],
        "config_hash": cfg.hash,
        "checkpoint_hash": bundle.config_hash,
        "files": written,
    }
    _write_json(out / "analysis.json", summary)
    print(f"wrote analysis artifacts to {out}: {', '.join(written)}")
    return out, [str(out / w) for w in written] + [str(out / "analysis.json")], cfg.hash


def _cmd_align_check(args) -> tuple[Path | None, list[str], str]:
    motion = transfer_mod.select_motion_frames(args.video_len, args.stride)
    latent = transfer_mod.select_latent_frames(args.video_len, args.latent_stride)
    aligned_src = [(0,), (1, 2), (3, 4), (5, 6)]
    print(f"video length {args.video_len}, motion stride {args.stride}, "
          f"latent stride {args.latent_stride}")
    print(f"motion frames : {motion}")
    print(f"latent frames : {latent}")
    print("token pairing : ", end="")
    print(", ".join(f"latent {i} <- m{list(src)}" for i, src in enumerate(aligned_src)))
    return None, [], config_hash({"len": args.video_len, "stride": args.stride})


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "transfer": _cmd_transfer,
    "sample-frame": _cmd_sample_frame,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "align-check": _cmd_align_check,
}


def dispatch(argv: list[str] | None = None) -> int:
    """Parse and run one subcommand; returns the process exit code."""
    parser = build_parser()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    start = time.time()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1

    status = "ok"
    report_dir, outputs, cfg_hash = None, [], ""
    try:
        report_dir, outputs, cfg_hash = _HANDLERS[args.command](args)
        code = 0
    except (CliValidationError, ConfigurationError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = f"validation-error: {exc}"
        code = 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = f"runtime-error: {type(exc).__name__}: {exc}"
        code = 2

    report = {
        "command": args.command,
        "argv": argv,
        "config_hash": cfg_hash,
        "artifact_version": dismo.__version__,
        "wall_time_s": round(time.time() - start, 3),
        "output_paths": outputs,
        "status": status,
    }
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
        _write_json(report_dir / "run_report.json", report)
    else:
        print(json.dumps(report, sort_keys=True))
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
