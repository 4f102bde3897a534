"""Command-line entry point: ``efdr <subcommand> ...``.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage or
configuration errors. Every failure prints exactly one line to stderr of the
form ``efdr: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .network import NetConfig

PROG = "efdr"

NET_KEYS = {f.name for f in dataclasses.fields(NetConfig)}


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


def fail(kind, message, code):
    print(f"{PROG}: error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


# ---------------------------------------------------------------- config files

def _parse_pair(text, conv):
    parts = [p for p in text.replace("(", "").replace(")", "").replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two values, got {text!r}")
    return tuple(conv(p) for p in parts)


def _parse_pos(text):
    if text.lower() in ("none", "off", ""):
        return None
    return _parse_pair(text, int)


CONFIG_KEYS = {
    "lr": float, "eps": float, "weight_decay": float, "batch_size": int, "epochs": int,
    "plateau_factor": float, "plateau_patience": int, "qf": int, "crop": int, "seed": int,
    "val_fraction": float, "checkpoint_every": int,
    "betas": lambda t: _parse_pair(t, float),
    "num_submodules": int, "heads": int, "dim_heads": int, "dim_mlp": int,
    "blocks_per_branch": int, "clamp_alpha": float, "init_std": float,
    "enhance_init": str, "pos_embed": _parse_pos,
}


def read_config(path):
    """``key = value`` lines with ``#`` comments; unknown keys are a usage error."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def build_train_config(args):
    from .pipeline import TrainConfig

    values = read_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    net = {k: values.pop(k) for k in list(values) if k in NET_KEYS}
    try:
        return TrainConfig(**values, net=NetConfig(**net))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- argument types

def qf_type(text):
    v = int(text)
    if not 1 <= v <= 100:
        raise argparse.ArgumentTypeError(f"quality factor {v} outside 1..100")
    return v


def crop_type(text):
    v = int(text)
    if v <= 0 or v % 8:
        raise argparse.ArgumentTypeError(f"crop {v} must be a positive multiple of 8")
    return v


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = Parser(prog=PROG, description="Coefficient-domain JPEG image hiding toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    s = sub.add_parser("prepare", help="center-crop a folder of images into covers and secrets")
    s.add_argument("src")
    s.add_argument("out")
    s.add_argument("--qf", type=qf_type, default=75)
    s.add_argument("--crop", type=crop_type, default=128)

    s = sub.add_parser("train", help="train a hiding network on a prepared dataset")
    s.add_argument("data")
    s.add_argument("out")
    s.add_argument("--config", help="key = value file; flags override it")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    s.add_argument("--val-fraction", dest="val_fraction", type=float)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s.add_argument("--submodules", dest="num_submodules", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--dim-heads", dest="dim_heads", type=int)
    s.add_argument("--dim-mlp", dest="dim_mlp", type=int)
    s.add_argument("--blocks-per-branch", dest="blocks_per_branch", type=int)
    s.add_argument("--clamp-alpha", dest="clamp_alpha", type=float)
    s.add_argument("--enhance-init", dest="enhance_init", choices=["orthogonal", "identity"])

    s = sub.add_parser("hide", help="embed a secret image into a cover JPEG")
    s.add_argument("cover")
    s.add_argument("secret")
    s.add_argument("model")
    s.add_argument("out")
    s.add_argument("--dump-rf", dest="dump_rf", help="write r_f as a tensor file")

    s = sub.add_parser("reveal", help="recover the secret image from a stego JPEG")
    s.add_argument("stego")
    s.add_argument("model")
    s.add_argument("out")
    s.add_argument("--aux", default="zero", help="tensor file from --dump-rf, or 'zero'")

    s = sub.add_parser("eval", help="hide/reveal every manifest pair and report quality")
    s.add_argument("data")
    s.add_argument("model")
    s.add_argument("out_csv")

    s = sub.add_parser("inspect", help="describe a JPEG's tables and coefficients")
    s.add_argument("file")
    s.add_argument("--subband", type=int, help="sub-band channel 0..191 to export")
    s.add_argument("--pgm", help="output path for the sub-band plane (default <stem>_sb<k>.pgm)")

    sub.add_parser("selftest", help="run the built-in correctness checks")
    return p


# ---------------------------------------------------------------- subcommands

def cmd_prepare(args):
    from .dataset import prepare_dataset

    if not Path(args.src).is_dir():
        raise FileNotFoundError(f"source directory {args.src} not found")
    summary = prepare_dataset(args.src, args.out, args.qf, args.crop)
    print(f"written {summary.written} skipped {summary.skipped} manifest {summary.manifest}")
    return 0 if summary.written else 1


def cmd_train(args):
    from .network import EfdrModel
    from .pipeline import train

    config = build_train_config(args)
    data = Path(args.data)
    for d in ("covers", "secrets"):
        if not (data / d).is_dir():
            raise FileNotFoundError(f"{data / d} not found; run 'prepare' first")
    model = None
    if config.epochs == 0:
        model = EfdrModel(config.net, seed=config.seed)
    model, records = train(config, data / "covers", data / "secrets", args.out, model=model)
    if records:
        last = records[-1]
        print(f"epoch {last['epoch']} l_total {last['l_total']:.4f} -> {Path(args.out) / 'model.ckpt'}")
    else:
        print(f"untrained model -> {Path(args.out) / 'model.ckpt'}")
    return 0


def cmd_hide(args):
    from . import tensor_io
    from .dataset import read_rgb
    from .jpeg_codec import read_jpeg, write_jpeg
    from .network import load_checkpoint
    from .pipeline import hide

    cover = read_jpeg(args.cover)
    secret = read_rgb(args.secret)
    model = load_checkpoint(args.model)
    result = hide(cover, secret, model)
    write_jpeg(result.stego_jpeg, args.out)
    if args.dump_rf:
        tensor_io.save_tensors(args.dump_rf, {"r_f": result.r_f}, {"kind": "efdr-rf"})
    print(f"prequant_psnr {_num(result.prequant_psnr)} postquant_psnr {_num(result.postquant_psnr)}")
    return 0


def _num(v):
    return v if isinstance(v, str) else f"{v:.4f}"


def cmd_reveal(args):
    from . import tensor_io
    from .dataset import write_png
    from .jpeg_codec import read_jpeg
    from .network import load_checkpoint
    from .pipeline import reveal

    stego = read_jpeg(args.stego)
    model = load_checkpoint(args.model)
    aux = None
    if args.aux != "zero":
        tensors, meta = tensor_io.load_tensors(args.aux)
        if "r_f" not in tensors:
            raise ValueError(f"{args.aux} holds no r_f tensor")
        aux = tensors["r_f"]
    write_png(reveal(stego, model, aux), args.out)
    return 0


def cmd_eval(args):
    from .dataset import read_jpeg, read_manifest, read_rgb
    from .metrics import evaluate_pairs, write_csv, write_json
    from .network import load_checkpoint

    model = load_checkpoint(args.model)
    pairs, names = [], []
    for cover, secret in read_manifest(args.data):
        pairs.append((read_jpeg(cover), read_rgb(secret)))
        names.append(cover.stem)
    if not pairs:
        raise ValueError("manifest lists no pairs")
    rows, mean = evaluate_pairs(model, pairs, names)
    out = Path(args.out_csv)
    write_csv(rows, mean, out)
    write_json(rows, mean, out.with_suffix(".json"))
    print(" ".join(f"{k} {_num(v)}" for k, v in mean.items() if k != "file"))
    return 0


def cmd_inspect(args):
    from PIL import Image

    from .jpeg_codec import read_jpeg
    from .transforms import coefficients_to_subbands

    jf = read_jpeg(args.file)
    c = jf.coefficients
    print(f"size {jf.width}x{jf.height} blocks {c.blocks.shape[1]}x{c.blocks.shape[2]}"
          f" restart_interval {jf.restart_interval or 0}")
    for comp in jf.components:
        print(f"component {comp.id} sampling {comp.h}x{comp.v} quant_table {comp.quant_table_id}"
              f" huffman dc{comp.dc_table_id} ac{comp.ac_table_id}")
    for tid, table in sorted(jf.quant_tables.items()):
        print(f"quant_table {tid}")
        for row in np.asarray(table):
            print("  " + " ".join(f"{int(v):3d}" for v in row))
    names = ("Y", "Cb", "Cr")
    for ch in range(3):
        b = c.blocks[ch]
        vals, counts = np.unique(np.clip(b, -4, 4), return_counts=True)
        hist = " ".join(f"{_bin(v)}:{n}" for v, n in zip(vals, counts))
        print(f"coefficients {names[ch]} min {b.min()} max {b.max()} dc_mean {b[..., 0, 0].mean():.2f}"
              f" histogram {hist}")
    if args.subband is not None:
        if not 0 <= args.subband < 192:
            raise UsageError(f"--subband {args.subband} outside 0..191")
        plane = coefficients_to_subbands(c)[args.subband].astype(np.float64)
        lo, hi = plane.min(), plane.max()
        img = np.zeros_like(plane) if hi == lo else (plane - lo) / (hi - lo) * 255
        path = Path(args.pgm) if args.pgm else Path(f"{Path(args.file).stem}_sb{args.subband}.pgm")
        Image.fromarray(np.floor(img + 0.5).astype(np.uint8)).save(path, format="PPM")
        print(f"subband {args.subband} range {lo:g}..{hi:g} -> {path}")
    return 0


def _bin(v):
    return {-4: "<=-4", 4: ">=4"}.get(int(v), str(int(v)))


def cmd_selftest(args):
    from .selftest import run_all

    return 0 if run_all(print) else 1


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "hide": cmd_hide, "reveal": cmd_reveal,
    "eval": cmd_eval, "inspect": cmd_inspect, "selftest": cmd_selftest,
}


def main(argv=None):
    from .jpeg_codec import JpegError
    from .tensor_io import CheckpointError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return fail("usage", exc, 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return fail("config", exc, 2)
    except JpegError as exc:
        return fail("jpeg", f"{type(exc).__name__}: {exc}", 1)
    except CheckpointError as exc:
        return fail("checkpoint", f"{type(exc).__name__}: {exc}", 1)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        return fail("runtime", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
