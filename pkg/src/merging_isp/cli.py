"""Command-line entry point: mosaic, synth, train, infer, eval, ablate,
gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import tensor as tz
from .align import Displacement
from .cfa import mosaic_rggb
from .dataio import (
    DataError,
    load_scene,
    read_dataset_file,
    read_manifest,
    read_png16,
    synthesize_scene,
    write_pfm,
    write_png16,
    write_scene,
)
from .gradsuite import run_gradient_suite
from .model import merging_isp_forward  # noqa: F401  (re-exported surface)
from .objective import tonemap
from .tensor import DomainError, ShapeError
from .training import (
    AblationVariant,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    infer,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    write_loss_log,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


class CliUsageError(Exception):
    pass


def _load_config(args):
    """Config file values first, then flag overrides."""
    values = {}
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise DataError(f"{args.config}: config must be a mapping")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"{args.config}: unknown config keys {sorted(unknown)}")
        values.update(doc)
    for key in ("epochs", "batch_size", "lr", "seed", "patch_size", "stride",
                "mu", "gamma", "n_blocks", "num_exposures", "val_fraction",
                "augment_copies"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        config = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid configuration: {exc}") from exc
    print("effective config:", config)
    return config


def _add_config_flags(p):
    p.add_argument("--config", help="YAML config file mirroring TrainConfig")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--num-exposures", dest="num_exposures", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--augment-copies", dest="augment_copies", type=int)


def _load_dataset(dataset_file):
    paths = read_dataset_file(dataset_file)
    return [load_scene(read_manifest(p), p.parent) for p in paths]


def cmd_mosaic(args):
    rgb = read_png16(args.input)
    raw = mosaic_rggb(rgb)
    write_png16(args.output, raw.values)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_lines = []
    for i in range(args.count):
        motions = [Displacement(0, 0)] * 3
        if args.max_shift > 0:
            motions = [
                Displacement(0, 0)
                if j == 1
                else Displacement(
                    2 * int(rng.integers(-args.max_shift // 2, args.max_shift // 2 + 1)),
                    2 * int(rng.integers(-args.max_shift // 2, args.max_shift // 2 + 1)),
                )
                for j in range(3)
            ]
        scene = synthesize_scene(
            rng, args.height, args.width, scene_id=f"scene_{i:03d}", motions=motions
        )
        manifest_path = write_scene(scene, out / f"scene_{i:03d}")
        dataset_lines.append(str(manifest_path.relative_to(out)))
    (out / "dataset.txt").write_text("\n".join(dataset_lines) + "\n", encoding="utf-8")
    print(f"wrote {args.count} scenes under {out}")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(args)
    scenes = _load_dataset(args.dataset)
    resume = load_checkpoint(args.resume) if args.resume else None
    checkpoint, loss_log = train(
        config, scenes, resume=resume,
        progress=lambda e, tr, va: print(f"epoch {e}: train {tr:.6g} val {va:.6g}"),
    )
    save_checkpoint(args.output, checkpoint)
    if args.loss_log:
        write_loss_log(args.loss_log, loss_log)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_infer(args):
    checkpoint = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    scene = load_scene(manifest, Path(args.manifest).parent)
    prediction = infer(checkpoint, scene)
    write_pfm(args.output, prediction)
    if args.preview:
        write_png16(args.preview, tonemap(prediction, checkpoint.config.mu))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args):
    checkpoint = load_checkpoint(args.checkpoint)
    scenes = _load_dataset(args.dataset)
    table = evaluate(checkpoint, scenes)
    Path(args.output).write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(args):
    config = _load_config(args)
    scenes = _load_dataset(args.dataset)
    table = run_ablation(
        AblationVariant(args.variant), config, scenes,
        levels=args.levels, radius=args.radius,
    )
    Path(args.output).write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    failures = run_gradient_suite(seed=args.seed, verbose=True)
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="merging-isp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mosaic", help="mask an RGB PNG16 down to RGGB CFA samples")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_mosaic)

    p = sub.add_parser("synth", help="generate synthetic bracketed scenes")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--max-shift", dest="max_shift", type=int, default=0,
                   help="max per-exposure translation in pixels (even shifts)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the joint pipeline")
    p.add_argument("dataset", help="dataset file listing scene manifests")
    p.add_argument("output", help="checkpoint path to write")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss-log", dest="loss_log", help="loss log output path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct one scene's HDR image")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("output", help="linear HDR output (PFM)")
    p.add_argument("--preview", help="tonemapped preview (PNG16)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("output", help="metric table (CSV)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score one pipeline variant")
    p.add_argument("variant", choices=[v.value for v in AblationVariant])
    p.add_argument("dataset")
    p.add_argument("output", help="metric table (CSV)")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--radius", type=int, default=4)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliUsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, ShapeError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, DomainError, tz.GraphError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
