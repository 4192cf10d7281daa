"""``birvae`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import secrets
import sys
import warnings
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .channel import dequantize, make_quantizer, quantize
from .coding import entropy_decode, entropy_encode, read_bitstream, write_bitstream
from .datasets import Dataset, load_idx_images, take_prefix
from .errors import BirvaeError, FormatError, NumericalError, ShapeError
from .model import (DEFAULT_LAMBDA, EVAL_SEED, TrainConfig, TrainingDiverged, Variant, decode,
                    evaluate_mse, generate, latents, load_checkpoint, reconstruct, save_checkpoint, train)
from .report import ImageGrid, MseReport, fmt, image_shape_for

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _arch(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--arch wants comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) <= 0:
        raise argparse.ArgumentTypeError("--arch needs at least one positive width")
    return sizes


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="birvae", description="Rate-bounded autoencoder toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *flags):
        if "data" in flags:
            sp.add_argument("--data", type=Path, required=True)
        if "labels" in flags:
            sp.add_argument("--labels", type=Path)
        if "test" in flags:
            sp.add_argument("--test-data", type=Path)
        if "model" in flags:
            sp.add_argument("--model", type=Path, required=True)
        if "limit" in flags:
            sp.add_argument("--limit", type=int)
        if "grid" in flags:
            sp.add_argument("--rows", type=int, default=8)
            sp.add_argument("--cols", type=int, default=8)
        if "mode" in flags:
            sp.add_argument("--mode", choices=("stochastic", "noiseless", "quantized"), default="stochastic")
            sp.add_argument("--dither", type=_bool, default=True)
        sp.add_argument("--seed", type=_u64)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t, "data", "labels", "limit")
    t.add_argument("--out", type=Path, required=True)
    rate = t.add_mutually_exclusive_group()
    rate.add_argument("--rate", type=float, help="channel rate in bits per image")
    rate.add_argument("--sigma2", type=float, help="channel noise variance")
    t.add_argument("--latent-dim", type=int, default=2)
    t.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--arch", type=_arch, default=(1024, 1024))
    t.add_argument("--objective", choices=("birvae", "mmdvae"), default="birvae")

    e = sub.add_parser("eval", help="train/test MSE table for one or more checkpoints")
    e.add_argument("--model", type=Path, action="append", required=True)
    common(e, "data", "test", "limit", "mode")
    e.add_argument("--out", type=Path)

    ld = sub.add_parser("latent-dump", help="noiseless latent coordinates as CSV")
    common(ld, "data", "labels", "model", "limit")
    ld.add_argument("--out", type=Path)

    g = sub.add_parser("generate", help="decode N(0, I) samples into a PGM grid")
    common(g, "model", "grid")
    g.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("reconstruct", help="reconstruct test images into a PGM grid")
    common(r, "model", "grid", "mode")
    r.add_argument("--data", type=Path)
    r.add_argument("--test-data", type=Path)
    r.add_argument("--out", type=Path, required=True)

    en = sub.add_parser("encode", help="quantize and entropy-code images into a bitstream")
    common(en, "data", "model", "limit")
    en.add_argument("--dither", type=_bool, default=True)
    en.add_argument("--out", type=Path, required=True)

    de = sub.add_parser("decode", help="decode a bitstream into a PGM grid")
    common(de, "data", "model")
    de.add_argument("--cols", type=int)
    de.add_argument("--out", type=Path, required=True)
    return p


def _seed(args, out) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(64)
        print(f"# seed {args.seed} (derived)", file=out)
    return args.seed


def _load(path: Path, labels: Path | None = None, limit: int | None = None) -> Dataset:
    ds = load_idx_images(path, labels)
    if limit is not None:
        if limit <= 0:
            raise UsageError(f"--limit must be positive, got {limit}")
        ds = take_prefix(ds, min(limit, len(ds)))
    return ds


def _check_width(model, ds: Dataset, what: str) -> None:
    if ds.width != model.input_dim:
        raise ShapeError(f"{what} has {ds.width} pixels per image, the model expects {model.input_dim}")


def cmd_train(args, out) -> int:
    seed = _seed(args, out)
    variant = Variant.MMDVAE_BASELINE if args.objective == "mmdvae" else Variant.BIRVAE
    if variant == Variant.BIRVAE and args.rate is None and args.sigma2 is None:
        raise UsageError("train needs --rate or --sigma2")
    ds = _load(args.data, args.labels, args.limit)
    try:
        config = TrainConfig(lam=args.lam, epochs=args.epochs, batch=args.batch, seed=seed, lr=args.lr,
                             arch=args.arch, latent_dim=args.latent_dim, rate_bpi=args.rate,
                             sigma_eps2=args.sigma2, variant=variant)
        channel = config.channel
    except BirvaeError as exc:
        raise UsageError(str(exc)) from exc
    print(f"# objective {args.objective}  d {channel.d}  sigma_eps2 {fmt(channel.sigma_eps2)}  "
          f"rate_bpi {fmt(channel.rate_bpi)}  lambda {fmt(config.lam)}", file=out)
    print(f"# n_train {len(ds)}  epochs {config.epochs}  batch {config.batch}  "
          f"arch {','.join(map(str, config.arch))}  seed {seed}", file=out)
    print("epoch\tloss\tmse\tmmd", file=out)

    def report(epoch, loss, mse, mmd):
        print(f"{epoch}\t{fmt(loss)}\t{fmt(mse)}\t{fmt(mmd)}", file=out, flush=True)

    try:
        ckpt = train(ds, config, on_epoch=report)
    except TrainingDiverged as exc:
        save_checkpoint(args.out, exc.checkpoint)
        print(f"birvae: {exc}; last finite state written to {args.out}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(args.out, ckpt)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    seed = EVAL_SEED if args.seed is None else args.seed
    train_ds = _load(args.data, limit=args.limit)
    test_ds = _load(args.test_data) if args.test_data is not None else None
    print(f"# mode {args.mode}  seed {seed}  n_train {len(train_ds)}  "
          f"n_test {len(test_ds) if test_ds is not None else 0}", file=out)
    rep = MseReport()
    for path in args.model:
        model = load_checkpoint(path).model
        _check_width(model, train_ds, str(args.data))
        tr = evaluate_mse(model, train_ds.items, args.mode, seed, args.dither)
        te = float("nan")
        if test_ds is not None:
            _check_width(model, test_ds, str(args.test_data))
            te = evaluate_mse(model, test_ds.items, args.mode, seed, args.dither)
        rep.add(path.stem, model.channel.rate_bpi, tr, te)
    out.write(rep.to_table())
    if args.out is not None:
        args.out.write_text(rep.to_csv(), encoding="ascii", newline="\n")
    return EXIT_OK


def cmd_latent_dump(args, out) -> int:
    ckpt = load_checkpoint(args.model)
    ds = _load(args.data, args.labels, args.limit)
    _check_width(ckpt.model, ds, str(args.data))
    z = latents(ckpt.model, ds.items)
    if ds.labels is None:
        warnings.warn("no labels given; the label column is omitted", stacklevel=1)
    d = z.shape[1]
    lines = [f"# sigma_eps {fmt(ckpt.model.channel.sigma_eps)} latent_std "
             + " ".join(fmt(s) for s in z.std(axis=0))]
    header = [f"z{i + 1}" for i in range(d)] + (["label"] if ds.labels is not None else [])
    target = args.out.open("w", encoding="ascii", newline="") if args.out is not None else out
    try:
        target.write(lines[0] + "\n")
        w = csv.writer(target, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(z):
            cells = [fmt(v) for v in row]
            if ds.labels is not None:
                cells.append(str(int(ds.labels[i])))
            w.writerow(cells)
    finally:
        if target is not out:
            target.close()
    return EXIT_OK


def _grid_size(args) -> int:
    if args.rows <= 0 or args.cols <= 0:
        raise UsageError(f"--rows and --cols must be positive, got {args.rows}x{args.cols}")
    return args.rows * args.cols


def cmd_generate(args, out) -> int:
    count = _grid_size(args)
    seed = _seed(args, out)
    model = load_checkpoint(args.model).model
    images = generate(model, count, Rng(seed))
    grid = ImageGrid.from_images(images, args.rows, args.cols, image_shape_for(model.input_dim))
    args.out.write_bytes(grid.to_pgm())
    return EXIT_OK


def cmd_reconstruct(args, out) -> int:
    count = _grid_size(args)
    source = args.test_data or args.data
    if source is None:
        raise UsageError("reconstruct needs --test-data (or --data)")
    seed = _seed(args, out)
    model = load_checkpoint(args.model).model
    ds = _load(source, limit=count)
    _check_width(model, ds, str(source))
    rng = Rng(seed) if args.mode == "stochastic" else None
    x_hat = reconstruct(model, ds.items, rng, args.mode, args.dither, seed)
    shape = ds.image_shape or image_shape_for(model.input_dim)
    args.out.write_bytes(ImageGrid.from_images(x_hat, args.rows, args.cols, shape).to_pgm())
    return EXIT_OK


def cmd_encode(args, out) -> int:
    seed = _seed(args, out)
    model = load_checkpoint(args.model).model
    ds = _load(args.data, limit=args.limit)
    _check_width(model, ds, str(args.data))
    q = make_quantizer(model.channel, args.dither, seed)
    bs = entropy_encode(quantize(latents(model, ds.items), q), q)
    write_bitstream(args.out, bs)
    print(f"images\t{bs.count}", file=out)
    print(f"rate_bpi\t{fmt(model.channel.rate_bpi)}", file=out)
    print(f"bits_per_image\t{fmt(np.mean(bs.bit_lengths))}", file=out)
    return EXIT_OK


def cmd_decode(args, out) -> int:
    model = load_checkpoint(args.model).model
    bs = read_bitstream(args.data)
    if bs.d != model.d:
        raise FormatError(f"bitstream carries d={bs.d} latents, the model expects d={model.d}")
    z = dequantize(entropy_decode(bs), bs.quantizer)
    images = decode(model, z).data
    cols = args.cols if args.cols is not None else min(bs.count, 10)
    if cols <= 0:
        raise UsageError(f"--cols must be positive, got {cols}")
    rows = math.ceil(bs.count / cols)
    args.out.write_bytes(ImageGrid.from_images(images, rows, cols, image_shape_for(model.input_dim)).to_pgm())
    print(f"images\t{bs.count}", file=out)
    print(f"bits_per_image\t{fmt(np.mean(bs.bit_lengths))}", file=out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "latent-dump": cmd_latent_dump,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "encode": cmd_encode,
    "decode": cmd_decode,
}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"birvae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BirvaeError, OSError, IndexError) as exc:
        print(f"birvae: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
