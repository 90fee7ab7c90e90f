"""Command-line interface.

Subcommands: train, render, query, mesh, codec-train, synth, gradcheck, eval.
Global flags: --seed, --threads, --config (key=value file).  Exit codes:
0 success, 2 validation error, 1 internal error.  All randomness flows from
the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ValidationError

logger = logging.getLogger("svscene")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2


def _parse_config_file(path):
    """key=value lines into a dict (ints, floats, bools, strings)."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{line_no}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if val.lower() in ("true", "false"):
            out[key] = val.lower() == "true"
            continue
        try:
            out[key] = int(val)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(val)
            continue
        except ValueError:
            pass
        out[key] = val
    return out


def _train_config(args, overrides):
    from .optim import TrainConfig

    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in overrides.items() if k in fields}
    unknown = set(overrides) - fields
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kw.setdefault("seed", args.seed)
    if getattr(args, "iters", None) is not None:
        kw["iterations"] = args.iters
    if getattr(args, "holdout", None) is not None:
        kw["holdout"] = args.holdout
    return TrainConfig(**kw)


def _load_checkpoint(path):
    from .tensorio import Checkpoint

    return Checkpoint.load(path)


def _camera_for(args, dataset):
    if args.view is None:
        raise ValidationError("--view is required")
    if not 0 <= args.view < len(dataset):
        raise ValidationError(f"--view {args.view} out of range (dataset has {len(dataset)})")
    return dataset.views[args.view].camera


# ------------------------------------------------------------- subcommands

def _cmd_synth(args, overrides):
    from .synth import make_synthetic_scene, write_synthetic_dataset

    k = int(overrides.get("k", 32))
    scene = make_synthetic_scene(
        seed=args.seed, n_views=args.views, n_objects=args.objects,
        res=args.res, spheres=args.spheres,
    )
    out = write_synthetic_dataset(
        scene, args.out, k=k, seed=args.seed, affine_depth=args.affine_depth,
        codec_epochs=args.codec_epochs,
    )
    print(f"synthetic dataset with {args.views} views written to {out}")
    return EXIT_OK


def _cmd_train(args, overrides):
    from .dataset import load_dataset
    from .optim import train
    from .tensorio import Checkpoint

    dataset = load_dataset(args.dataset)
    cfg = _train_config(args, overrides)
    views = dataset.images_and_cameras()
    teachers = dataset.teachers() if dataset.has_teachers() else None
    codec = None
    if dataset.codec_path is not None and dataset.codec_path.exists():
        codec = Checkpoint.load(dataset.codec_path).codec
    result = train(views, teachers, cfg, grid_cfg=dataset.scene, log_file=args.log)
    ck = Checkpoint(
        grid=result.grid, net=result.net, codec=codec,
        meta={
            "k": cfg.k, "n_d": cfg.n_d, "seed": cfg.seed,
            "iteration": cfg.iterations, "holdout": cfg.holdout,
        },
    )
    ck.save(args.out)
    print(f"trained {cfg.iterations} iterations ({result.grid.n} voxels); checkpoint: {args.out}")
    return EXIT_OK


def _cmd_render(args, overrides):
    from .dataset import load_dataset, save_image
    from .raster import render
    from .tensorio import write_tensor

    ck = _load_checkpoint(args.checkpoint).require("grid")
    dataset = load_dataset(args.dataset)
    cam = _camera_for(args, dataset)
    bundle = render(ck.grid, cam, with_tape=False)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_image(f"{prefix}.rgb.png", bundle.rgb)
    save_image(f"{prefix}.normal.png", 0.5 * (bundle.normal + 1.0))
    write_tensor(f"{prefix}.feat.lsvt", bundle.feat)
    write_tensor(f"{prefix}.depth.lsvt", bundle.depth)
    write_tensor(f"{prefix}.conf.lsvt", bundle.conf)
    print(f"rendered view {args.view} to {prefix}.*")
    return EXIT_OK


def _cmd_query(args, overrides):
    from .dataset import load_dataset, save_image
    from .query import QueryEmbedding, iou, relevance

    ck = _load_checkpoint(args.checkpoint).require("grid", "net", "codec")
    dataset = load_dataset(args.dataset)
    cam = _camera_for(args, dataset)
    raw = np.fromfile(args.embedding, dtype="<f4")
    if raw.size != 512:
        raise ValidationError(f"query embedding must be 512 float32, got {raw.size}")
    q = QueryEmbedding(vector=raw.astype(np.float64), label=args.label)
    res = relevance(ck.grid, cam, ck.codec, q, net=ck.net, tau=args.tau)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_image(f"{prefix}.relevance.png", 0.5 * (res.relevance + 1.0))
    save_image(f"{prefix}.mask.png", res.mask.astype(np.float64))
    record = {"label": q.label, "argmax": [int(res.argmax[0]), int(res.argmax[1])]}
    if args.gt_mask:
        from .dataset import load_mask

        record["iou"] = iou(res.mask, load_mask(args.gt_mask))
    Path(f"{prefix}.json").write_text(json.dumps(record, sort_keys=True))
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _cmd_mesh(args, overrides):
    from .geomex import extract_mesh, write_obj, write_stl

    ck = _load_checkpoint(args.checkpoint).require("grid")
    mesh = extract_mesh(ck.grid, args.iso)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".obj":
        write_obj(out, mesh)
    else:
        write_stl(out, mesh)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out}")
    return EXIT_OK


def _cmd_codec_train(args, overrides):
    from .codec import train_autoencoder
    from .tensorio import Checkpoint, read_tensor, write_tensor

    feats = read_tensor(args.features).reshape(-1, 512)
    codec, report = train_autoencoder(
        feats, k=args.k, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
    )
    Checkpoint(codec=codec, meta={"k": args.k, "seed": args.seed, "role": "codec"}).save(args.out)
    if args.encode:
        src = Path(args.encode)
        dst = Path(args.encoded_out or src)
        dst.mkdir(parents=True, exist_ok=True)
        files = sorted(src.glob("*.raw.lsvt"))
        for f in files:
            enc = codec.encode(read_tensor(f))
            write_tensor(dst / f.name.replace(".raw.lsvt", ".ma.lsvt"), enc)
        print(f"encoded {len(files)} feature maps into {dst}")
    print(f"codec: L1={report.mean_l1:.5f} cosine={report.mean_cosine:.5f} -> {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args, overrides):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(seed=args.seed, max_per_group=args.max_per_group)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.group:10s} n={r.n_checked:5d} worst_rel={r.worst_rel:.3e} worst_abs={r.worst_abs:.3e} {status}")
        ok &= r.passed
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_INTERNAL


def _cmd_eval(args, overrides):
    from .dataset import load_dataset
    from .metrics import psnr, ssim
    from .query import QueryEmbedding, iou, relevance
    from .raster import render
    from .tensorio import read_tensor

    ck = _load_checkpoint(args.checkpoint).require("grid")
    dataset = load_dataset(args.dataset)
    view_ids = args.views if args.views else list(range(len(dataset)))
    out = {"views": {}}
    psnrs, ssims = [], []
    for vid in view_ids:
        if not 0 <= vid < len(dataset):
            raise ValidationError(f"view {vid} out of range")
        img = dataset.image(vid)
        cam = dataset.views[vid].camera
        bundle = render(ck.grid, cam, with_tape=False, with_normals=False)
        p = psnr(bundle.rgb, img)
        s = ssim(bundle.rgb, img)
        psnrs.append(p)
        ssims.append(s)
        out["views"][vid] = {"psnr": p, "ssim": s}
    out["psnr"] = float(np.mean(psnrs))
    out["ssim"] = float(np.mean(ssims))

    if args.with_query and dataset.codes_path is not None:
        ck.require("net", "codec")
        codes = read_tensor(dataset.codes_path)[:, 0, :]
        ious, hits = [], []
        for vid in view_ids:
            masks = dataset.masks(vid)
            if len(masks) != codes.shape[0]:
                continue
            cam = dataset.views[vid].camera
            for oi in range(codes.shape[0]):
                q = QueryEmbedding(vector=codes[oi], label=f"object{oi}")
                res = relevance(ck.grid, cam, ck.codec, q, net=ck.net)
                ious.append(iou(res.mask, masks[oi]))
                hits.append(1.0 if masks[oi][res.argmax[1], res.argmax[0]] else 0.0)
        if ious:
            out["miou"] = float(np.mean(ious))
            out["macc"] = float(np.mean(hits))
    text = json.dumps(out, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# ------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="svscene", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker cap (execution is serial and deterministic)")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--objects", type=int, default=3)
    s.add_argument("--res", type=int, default=48)
    s.add_argument("--out", required=True)
    s.add_argument("--spheres", action="store_true")
    s.add_argument("--affine-depth", action="store_true", dest="affine_depth")
    s.add_argument("--codec-epochs", type=int, default=200, dest="codec_epochs")
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("train", help="train a scene from a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--holdout", type=int, default=None)
    s.add_argument("--log", type=str, default=None, help="newline-delimited JSON loss log")
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("render", help="render maps from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--out-prefix", required=True, dest="out_prefix")
    s.set_defaults(fn=_cmd_render)

    s = sub.add_parser("query", help="open-vocabulary relevance query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--embedding", required=True, help="raw 512 float32 little-endian file")
    s.add_argument("--label", default="")
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--gt-mask", default=None, dest="gt_mask")
    s.add_argument("--out-prefix", required=True, dest="out_prefix")
    s.set_defaults(fn=_cmd_query)

    s = sub.add_parser("mesh", help="extract an isosurface mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--iso", type=float, default=1.0)
    s.add_argument("--out", required=True, help=".stl (binary) or .obj (ascii)")
    s.set_defaults(fn=_cmd_mesh)

    s = sub.add_parser("codec-train", help="pre-train the feature autoencoder")
    s.add_argument("--features", required=True, help="LSVT tensor of 512-d features")
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch", type=int, default=4096)
    s.add_argument("--out", required=True)
    s.add_argument("--encode", default=None, help="directory of *.raw.lsvt maps to encode")
    s.add_argument("--encoded-out", default=None, dest="encoded_out")
    s.set_defaults(fn=_cmd_codec_train)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--max-per-group", type=int, default=None, dest="max_per_group")
    s.set_defaults(fn=_cmd_gradcheck)

    s = sub.add_parser("eval", help="reconstruction / query metrics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--views", type=int, nargs="*", default=None)
    s.add_argument("--with-query", action="store_true", dest="with_query")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=_cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = _parse_config_file(args.config) if args.config else {}
        return args.fn(args, overrides)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # internal failure
        logger.exception("internal error: %s", e)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
