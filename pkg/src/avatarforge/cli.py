"""``avatarforge`` command line: synth, train, infer, render, check.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
files, invalid config). Every command writes its effective arguments and
config to ``run.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .assets import (
    ImageFormatError,
    load_image,
    load_mesh,
    load_subject,
    make_mini_rig,
    make_synthetic_subject,
    save_image,
    save_mesh,
    save_subject,
)
from .autodiff import CheckpointError, load_weights, save_weights
from .config import Config, ConfigError
from .headmodel import PoseParams, animate, load_params
from .losses import write_metrics
from .mesh import MeshError
from .pipeline import init_blocks, run, train_overfit
from .raster import rasterize, render_mask, render_normals, shade_texture
from .remesh import refit_joint_regressor

log = logging.getLogger("avatarforge")


class UsageError(Exception):
    """Bad user input: reported with exit code 2."""


def _write_run(out: Path, command: str, args: dict, config: Config | None = None) -> None:
    rec = {"command": command, "version": __version__,
           "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items()}}
    if config is not None:
        rec["config"] = config.to_dict()
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _config(args, profile: str | None = None) -> Config:
    if getattr(args, "config", None):
        cfg = Config.load(_existing(args.config, "config file"))
    else:
        cfg = Config.for_profile(profile or getattr(args, "profile", "desk"))
    overrides = {k: getattr(args, k) for k in ("steps", "K", "lr", "seed") if getattr(args, k, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


# -- commands -------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = Config.for_profile(args.profile)
    rig = make_mini_rig(args.profile)
    res = args.resolution or cfg.image_res
    subject = make_synthetic_subject(args.seed, rig, resolution=res, tex_resolution=cfg.tex_res)
    out = save_subject(subject, args.out)
    _write_run(out, "synth", vars_of(args), cfg)
    print(f"synth: seed={args.seed} profile={args.profile} resolution={res} "
          f"vertices={rig.n_vertices} mask_pixels={int(subject.fg_mask.sum())} -> {out}")
    return 0


def cmd_train(args) -> int:
    subject = load_subject(_existing(args.subject, "subject bundle"))
    cfg = _config(args)
    if subject.resolution != cfg.image_res:
        raise UsageError(f"subject resolution {subject.resolution} != config image_res {cfg.image_res}")
    out = Path(args.out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    blocks = init_blocks(cfg)

    def on_step(row, result):
        step = row["step"]
        if step % cfg.snapshot_every == 0 or step == cfg.steps:
            save_image(np.clip(result.images()[-1], 0, 1), out / "snapshots" / f"step_{step:05d}.png")
        if args.verbose:
            print(f"  step {step:5d}  L_total {row['L_total']:.6f}  L_img {row['L_img']:.6f}  psnr {row['psnr']:.2f}")

    result = train_overfit(subject, blocks, cfg, on_step=on_step)
    save_weights(blocks.store.state_dict(), out / "weights.bin")
    write_metrics(result.history, out / "metrics.csv")
    cfg.save(out / "config.json")
    _write_run(out, "train", vars_of(args), cfg)
    first, last = result.history[0], result.history[-1]
    print(f"train: steps={cfg.steps} L_img {first['L_img']:.6f} -> {last['L_img']:.6f} "
          f"psnr {first['psnr']:.2f} -> {last['psnr']:.2f} dB -> {out / 'weights.bin'}")
    return 0


def _checkpoint_config(ckpt: Path, args) -> Config:
    if getattr(args, "config", None):
        return _config(args)
    side = ckpt.parent / "config.json"
    if side.exists():
        return Config.load(side)
    return _config(args)


def cmd_infer(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    image = load_image(_existing(args.image, "input image"))[..., :3]
    params = load_params(_existing(args.params, "pose parameters"))
    rig = load_mesh(_existing(args.rig, "rig mesh")) if args.rig else None
    cfg = _checkpoint_config(ckpt, args)
    rig = rig if rig is not None else make_mini_rig(cfg.profile)
    blocks = init_blocks(cfg)
    blocks.store.load_state_dict(load_weights(ckpt))
    result = run(image, params, rig, blocks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    mesh = result.mesh.copy()
    # re-anchor the regressor on the exported vertices so `render` recovers the same skeleton
    mesh.joint_regressor = refit_joint_regressor(result.context.joints, mesh.vertices,
                                                 prior=mesh.joint_regressor)
    save_mesh(mesh, out / "mesh.obj")
    tex = result.texture.data
    save_image(tex, out / "texture.png")
    save_image(tex.astype(np.float32), out / "texture.pfm")
    for t, img in enumerate(result.images()):
        save_image(np.clip(img, 0, 1), out / f"render_t{t}.png")
    save_image(result.images()[-1].astype(np.float32), out / "render_final.pfm")
    _write_run(out, "infer", vars_of(args), cfg)
    print(f"infer: K={cfg.K} vertices={mesh.n_vertices} faces={mesh.n_faces} "
          f"texture={tex.shape[0]}x{tex.shape[1]} -> {out}")
    return 0


def trajectory(params: PoseParams, frames: int, amplitude: float = 1.0) -> list[PoseParams]:
    """Smooth pose/expression loop that starts exactly at ``params``."""
    out = []
    for i in range(frames):
        s = np.sin(2 * np.pi * i / max(frames, 1))
        rot = params.joint_rotations.copy()
        rot[0, 1] += amplitude * 0.35 * s        # head yaw
        rot[2, 0] += amplitude * 0.12 * abs(s)   # jaw
        expr = params.expr_coeffs.copy()
        expr += amplitude * 0.5 * s * np.cos(np.arange(len(expr)))
        out.append(PoseParams(params.shape_coeffs.copy(), expr, rot, params.camera))
    return out


def cmd_render(args) -> int:
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    tex_path = _existing(args.texture, "texture")
    pfm = tex_path.with_suffix(".pfm")
    texture = load_image(pfm if tex_path.suffix == ".png" and pfm.exists() else tex_path)[..., :3]
    params = load_params(_existing(args.params, "pose parameters"))
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam = params.camera
    res = (int(round(2 * cam.cy)), int(round(2 * cam.cx)))
    for i, p in enumerate(trajectory(params, args.frames)):
        posed = animate(mesh.vertices, mesh, p, joints=None)
        rmap = rasterize(posed, cam, res)
        img = shade_texture(rmap, texture)
        save_image(np.clip(img, 0, 1), out / f"frame_{i:04d}.png")
        if i == 0:
            save_image(img.astype(np.float32), out / "frame_0000.pfm")
        if args.dump_gbuffer:
            save_image(render_mask(rmap).astype(np.float32), out / f"mask_{i:04d}.pfm")
            save_image(render_normals(rmap).astype(np.float32), out / f"normal_{i:04d}.pfm")
            save_image(rmap.depth.astype(np.float32), out / f"depth_{i:04d}.pfm")
            save_image(np.concatenate([rmap.uv, np.zeros(rmap.uv.shape[:2] + (1,))], axis=2).astype(np.float32),
                       out / f"uv_{i:04d}.pfm")
    _write_run(out, "render", vars_of(args))
    print(f"render: frames={args.frames} resolution={res[0]}x{res[1]} gbuffer={bool(args.dump_gbuffer)} -> {out}")
    return 0


def cmd_check(args) -> int:
    from .checks import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names)
    for r in results:
        print(r.report())
    ok = all(r.passed for r in results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rep = {r.name: {"passed": r.passed, "seconds": r.seconds,
                        "rows": [vars(row) for row in r.rows]} for r in results}
        (out / "check.json").write_text(json.dumps(rep, indent=2) + "\n")
        _write_run(out, "check", vars_of(args))
    print(f"check: suites={','.join(names)} result={'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------------------------

def vars_of(args) -> dict:
    # output locations are not configuration; leaving them out keeps bundles byte-identical
    return {k: v for k, v in vars(args).items() if k not in ("func", "out")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic subject bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--resolution", type=int, default=None, help="image size (default: profile)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="overfit the pipeline to one subject")
    t.add_argument("--subject", required=True)
    t.add_argument("--config", default=None, help="JSON config (default: desk profile)")
    t.add_argument("--profile", choices=("desk", "paper"), default="desk")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--K", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True, help="output directory for weights.bin, metrics.csv, snapshots")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="reconstruct an avatar from one image")
    i.add_argument("--image", required=True)
    i.add_argument("--params", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", default=None, help="default: config.json next to the checkpoint")
    i.add_argument("--profile", choices=("desk", "paper"), default="desk")
    i.add_argument("--rig", default=None, help="rig OBJ (default: the profile's mini-rig)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="animate a reconstructed avatar")
    r.add_argument("--mesh", required=True)
    r.add_argument("--texture", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--frames", type=int, default=8)
    r.add_argument("--dump-gbuffer", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("check", help="run the acceptance suites")
    c.add_argument("--suite", choices=("grad", "geometry", "roundtrip", "all"), default="all")
    c.add_argument("--out", default=None, help="optional directory for check.json and run.json")
    c.set_defaults(func=cmd_check)
    return p


def _thread_limit():
    env = os.environ.get("AVATARFORGE_THREADS")
    if not env:
        return contextlib.nullcontext()
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"AVATARFORGE_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"AVATARFORGE_THREADS must be a positive integer, got {env!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"avatarforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MeshError, ImageFormatError, CheckpointError, KeyError, ValueError, RuntimeError) as exc:
        print(f"avatarforge {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
