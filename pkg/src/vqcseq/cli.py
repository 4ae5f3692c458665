"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data / integrity / format error,
3 numeric failure during training.  Sequence numbers on the command line
are 1-based.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augmentation import AugmentConfig, add_noise, bias_field, gamma_transform, intensity_transform, maybe_augment
from .checkpoint import load_checkpoint
from .config import dump_config, load_config
from .data import PhantomDataset, generate_dataset, read_tensor, write_tensor
from .evaluation import (
    default_chain,
    eval_anti_interference,
    eval_probe,
    eval_translation,
    fit_code_probe,
    mean_dice,
    _write_rows,
)
from .exceptions import ConfigError, ConfigMismatchError, FormatError, IntegrityError, NumericError, ShapeError
from .experiments import lesion_label, probe_subject, sweep
from .trainer import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("vqcseq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. weights.lambda_con=1.0 (repeatable)")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqcseq", description="Vector-quantized common latent space for multi-sequence image translation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=90)
    p.add_argument("--n-val", type=int, default=12)
    p.add_argument("--n-test", type=int, default=30)
    p.add_argument("--size", type=int, default=32, help="image height and width")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="shorthand for --set total_steps=N")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    _add_config_args(p)

    p = sub.add_parser("translate", help="translate a .vqt image through a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--steps", choices=("single", "multi"), default="single")
    p.add_argument("--chain", type=_int_list, help="explicit chain for --steps multi, e.g. 1,2,3,4")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="translation or robustness report")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--task", choices=("translation", "noise", "bias"), default="translation")
    p.add_argument("--source", type=int, default=1)
    p.add_argument("--target", type=int, default=4)
    p.add_argument("--split", default="test")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("augment", help="apply one augmentation to a .vqt image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--transform", choices=("gamma", "noise", "bias", "intensity", "random"), required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=0.2)
    p.add_argument("--checkpoint", type=Path, help="model for --transform random")
    p.add_argument("--sequence", type=int, default=1, help="input sequence for --transform random")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="fit and evaluate the latent code probe")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subject", help="labelled subject id (default: first val subject with a lesion)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="train and evaluate a (D, K) grid")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--D", dest="D_list", type=_int_list, default=[3])
    p.add_argument("--K", dest="K_list", type=_int_list, default=[16, 256])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--plots", action="store_true")
    _add_config_args(p)
    return parser


def _seq(value, flag, N):
    if not 1 <= value <= N:
        raise UsageError(f"{flag} must be in 1..{N}, got {value}")
    return value - 1


def _train_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"total_steps={args.steps}")
    return load_config(args.config, overrides)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n} is required")


def cmd_gen_data(args):
    m = generate_dataset(args.out, seed=args.seed, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, H=args.size, W=args.size)
    print(f"wrote {len(m.subjects)} subjects to {args.out}")


def cmd_train(args):
    cfg = _train_config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return
    _require(args, "data", "out")
    res = train(args.data, cfg, args.out, resume_from=args.resume)
    last = res.val_rows[-1]
    print(f"step {last[0]}: val_psnr {last[1]:.3f} val_ssim {last[2]:.4f}; checkpoint {res.checkpoint}")


def cmd_translate(args):
    ms = load_checkpoint(args.checkpoint)
    model = ms.model
    N = model.cfg.N
    source = _seq(args.source, "--source", N)
    target = _seq(args.target, "--target", N)
    X = read_tensor(args.input)
    model.eval()
    with torch.no_grad():
        if args.steps == "single":
            if args.chain:
                raise UsageError("--chain only applies to --steps multi")
            out = model.translate(X, source, target)
        else:
            chain = [_seq(c, "--chain", N) for c in args.chain] if args.chain else None
            if chain and (chain[0] != source or chain[-1] != target):
                raise UsageError("--chain must start at --source and end at --target")
            out = model.translate_chain(X, chain or default_chain(source, target))
    write_tensor(args.output, out.clamp(0, 1).cpu().numpy().astype(np.float32))
    print(f"wrote {args.output}")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint).model
    ds = PhantomDataset(args.data)
    subjects = ds.split(args.split)
    if not subjects:
        raise UsageError(f"--split {args.split!r} has no subjects")
    if args.task == "translation":
        N = model.cfg.N
        report = eval_translation(model, subjects, _seq(args.source, "--source", N), _seq(args.target, "--target", N), mode="both")
    else:
        report = eval_anti_interference(model, subjects, args.task, sigma=args.sigma, alpha=args.alpha, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / f"{args.task}.csv", args.out / f"{args.task}_summary.csv")
    for row in report.aggregate():
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def cmd_augment(args):
    X = read_tensor(args.input)
    rng = np.random.default_rng(args.seed)
    if args.transform == "gamma":
        out = gamma_transform(X, args.gamma)
    elif args.transform == "noise":
        out = add_noise(X, args.sigma, rng)
    elif args.transform == "bias":
        out = bias_field(X, args.alpha, args.scale, rng)
    elif args.transform == "intensity":
        out = intensity_transform(X, AugmentConfig(), rng)
    else:
        _require(args, "checkpoint")
        model = load_checkpoint(args.checkpoint).model
        out = maybe_augment(X, _seq(args.sequence, "--sequence", model.cfg.N), model, AugmentConfig(replace_probability=1.0), rng)
    write_tensor(args.output, np.asarray(out, dtype=np.float32))
    print(f"wrote {args.output}")


def cmd_probe(args):
    model = load_checkpoint(args.checkpoint).model
    ds = PhantomDataset(args.data)
    lab = lesion_label(ds)
    ref = ds.subject(args.subject) if args.subject else probe_subject(ds)
    probe = fit_code_probe(model, ref, n_labels=lab + 1)
    control = probe.permuted(args.seed)
    test = ds.split("test")
    labels = list(range(1, lab + 1))
    rows = [dict(r, probe="fitted") for r in eval_probe(probe, model, test, labels)]
    rows += [dict(r, probe="permuted") for r in eval_probe(control, model, test, labels)]
    args.out.mkdir(parents=True, exist_ok=True)
    _write_rows(args.out / "probe.csv", rows)
    fitted = [r for r in rows if r["probe"] == "fitted"]
    permuted = [r for r in rows if r["probe"] == "permuted"]
    print(f"probe fitted on {ref.subject_id}: lesion dice {mean_dice(fitted, lab):.4f} (permuted control {mean_dice(permuted, lab):.4f})")


def cmd_sweep(args):
    cfg = _train_config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return
    _require(args, "data", "out")
    rows = sweep(args.data, args.D_list, args.K_list, cfg, args.out, plots=args.plots)
    for r in rows:
        print(f"D={r['D']} K={r['K']}: psnr_1to4 {r['psnr_1to4']:.3f} lesion_dice {r['lesion_dice']:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "augment": cmd_augment,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        COMMANDS[args.command](args)
    except (FormatError, IntegrityError, ConfigMismatchError, OSError) as e:
        print(f"vqcseq {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, ShapeError, ValueError) as e:
        # library parameter checks raise ValueError for bad flag values
        print(f"vqcseq {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"vqcseq {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


run = main


def console() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console()
