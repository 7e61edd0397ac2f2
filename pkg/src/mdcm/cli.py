"""Command-line entry point.

Commands::

    mdcm data gen    --out DIR [--seed N --train N --test N --classes N
                      --size N --clutter F]
    mdcm train       --data DIR --out DIR [--config FILE --set k=v ...
                      --seed N --resume CKPT]
    mdcm eval        --data DIR --checkpoint CKPT [--config FILE --set k=v
                      --seed N --aggregation gate|sum --quartile --out DIR]
    mdcm visualize   --data DIR --checkpoint CKPT --sample N --out DIR
                      [--config FILE --set k=v]
    mdcm score-gate  --data DIR --checkpoint CKPT [--config FILE --set k=v
                      --out DIR]

Exit codes: 0 success, 2 usage or config error, 1 runtime error.  The
environment variable ``MDCM_SEED`` supplies a default seed when ``--seed``
is absent (an explicit flag wins).  Every training/eval run writes the
fully resolved config beside its outputs; rerunning from that echo file
reproduces the run bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import evalharness as E
from . import train as training
from .config import RunConfig, load_file, set_key, to_text, validate
from .errors import ConfigError, MdcmError
from .model import Model


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """Config file -> --set overrides -> convenience flags -> seed rules."""
    cfg = load_file(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_key(cfg, key.strip(), value.strip())
    if getattr(args, "msca_gamma", None) is not None:
        set_key(cfg, "msca.gamma", str(args.msca_gamma))
    if getattr(args, "aggregation", None) is not None:
        set_key(cfg, "eval.aggregation", args.aggregation)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    elif os.environ.get("MDCM_SEED"):
        try:
            cfg.seed = int(os.environ["MDCM_SEED"])
        except ValueError:
            raise ConfigError(
                f"MDCM_SEED must be an integer, got "
                f"{os.environ['MDCM_SEED']!r}")
    return validate(cfg)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text config file (key = value)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int,
                   help="run seed (default: $MDCM_SEED, then config)")


def _load_model(args, cfg: RunConfig) -> Model:
    model = Model(cfg)
    ckpt.load_into_model(args.checkpoint, model)
    return model


def _config_name(cfg: RunConfig) -> str:
    key = (cfg.msts.enabled, cfg.msda.enabled, cfg.msca.enabled)
    return {
        (False, False, False): "a_baseline",
        (True, False, False): "b_msts",
        (True, True, False): "c_msts_msda",
        (True, True, True): "d_full",
    }.get(key, "custom")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_data_gen(args) -> int:
    spec = D.SynthSpec(n_classes=args.classes, image_size=args.size,
                       clutter_density=args.clutter)
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get("MDCM_SEED", "0") or "0")
    digest = hashlib.sha256()
    for split, n in (("train", args.train), ("test", args.test)):
        if n == 0:
            continue
        manifest = D.build_split(args.out, split, n, seed, spec)
        with open(manifest, "rb") as fh:
            body = fh.read()
        digest.update(body)
        for line in body.decode().splitlines():
            rel = line.split("\t", 1)[0]
            with open(os.path.join(args.out, rel), "rb") as fh:
                digest.update(fh.read())
        print(f"manifest {manifest}")
    print(f"sha256 {digest.hexdigest()}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    split = D.load_split(args.data, "train")
    result = training.run_training(cfg, split, args.out, resume=args.resume)
    print(f"log {result.log_path}")
    print(f"final {result.final_path}")
    print(f"best {result.best_path} (epoch {result.best_epoch}, "
          f"train acc {E.format_pct(100.0 * result.best_acc)})")
    return 0


def _rebucket_quartile(split: D.SplitData, image_size: int) -> D.SplitData:
    sizes = np.maximum(split.bboxes[:, 2], split.bboxes[:, 3]) / image_size
    split.buckets = E.quartile_buckets(sizes)
    return split


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    split = D.load_split(args.data, args.split)
    if args.quartile:
        split = _rebucket_quartile(split, cfg.backbone.image_size)
    model = _load_model(args, cfg)
    row = E.evaluate_row(model, cfg, split, _config_name(cfg), cfg.seed)
    csv_text = E.CSV_HEADER + "\n" + row.csv_row() + "\n"
    print(csv_text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
            fh.write(csv_text)
        with open(os.path.join(args.out, "config.txt"), "w") as fh:
            fh.write(to_text(cfg))
    return 0


def cmd_visualize(args) -> int:
    cfg = resolve_config(args)
    split = D.load_split(args.data, args.split)
    n = split.images.shape[0]
    if not 0 <= args.sample < n:
        raise MdcmError(
            f"sample id {args.sample} outside the manifest (0..{n - 1})")
    model = _load_model(args, cfg)
    overlays = E.selection_overlays(model, split.images[args.sample], cfg)
    os.makedirs(args.out, exist_ok=True)
    for stage, img in sorted(overlays.items()):
        path = os.path.join(args.out, f"overlay_stage{stage}.ppm")
        with open(path, "wb") as fh:
            fh.write(D.write_ppm(np.clip(img, 0.0, 1.0)))
        print(f"wrote {path}")
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(to_text(cfg))
    return 0


def cmd_score_gate(args) -> int:
    cfg = resolve_config(args)
    split = D.load_split(args.data, args.split)
    model = _load_model(args, cfg)
    row = E.evaluate_row(model, cfg, split, _config_name(cfg), cfg.seed)
    csv_text = E.CSV_HEADER + "\n" + row.csv_row() + "\n"
    print(csv_text, end="")
    if row.score_gate is not None and row.score_sum is not None:
        verdict = "gate >= sum" if row.score_gate >= row.score_sum \
            else "gate < sum"
        print(f"score_gate={row.score_gate} score_sum={row.score_sum} "
              f"({verdict})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "scores.csv"), "w") as fh:
            fh.write(csv_text)
        with open(os.path.join(args.out, "config.txt"), "w") as fh:
            fh.write(to_text(cfg))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdcm",
        description="Multi-stage pooled-attention classifier: data "
                    "generation, training, evaluation, visualization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_gen = data_sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--train", type=int, default=512,
                       help="training samples (default 512)")
    p_gen.add_argument("--test", type=int, default=256,
                       help="test samples (default 256)")
    p_gen.add_argument("--classes", type=int, default=8)
    p_gen.add_argument("--size", type=int, default=64,
                       help="square image side in pixels")
    p_gen.add_argument("--clutter", type=float, default=1.0,
                       help="background clutter density")
    p_gen.set_defaults(func=cmd_data_gen)

    p_train = sub.add_parser("train", help="train a model")
    _add_config_flags(p_train)
    p_train.add_argument("--data", required=True,
                         help="dataset directory (train.txt manifest)")
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--aggregation", choices=("gate", "sum"))
    p_eval.add_argument("--quartile", action="store_true",
                        help="rebucket by size quartiles instead of the "
                             "generator's ground-truth ranges")
    p_eval.add_argument("--msca-gamma", type=float, dest="msca_gamma")
    p_eval.add_argument("--out", help="directory for metrics.csv + config "
                                      "echo")
    p_eval.set_defaults(func=cmd_eval)

    p_vis = sub.add_parser("visualize",
                           help="render selected-token overlays")
    _add_config_flags(p_vis)
    p_vis.add_argument("--data", required=True)
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--split", default="test")
    p_vis.add_argument("--sample", type=int, required=True,
                       help="manifest row index")
    p_vis.add_argument("--out", required=True)
    p_vis.set_defaults(func=cmd_visualize)

    p_score = sub.add_parser("score-gate",
                             help="compare gated vs summed aggregation")
    _add_config_flags(p_score)
    p_score.add_argument("--data", required=True)
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--split", default="test")
    p_score.add_argument("--out", help="directory for scores.csv + config "
                                       "echo")
    p_score.set_defaults(func=cmd_score_gate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2 already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mdcm: config error: {exc}", file=sys.stderr)
        return 2
    except MdcmError as exc:
        print(f"mdcm: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mdcm: i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
