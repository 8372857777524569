"""Command-line entry point: gen-synth, train, eval, ablate, predict.

Every TrainConfig key is also a flag (``--epochs 10``, ``--ablation.sga false``);
flags override values from ``--config``. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, _flatten, dump_kv, load_config, parse_kv_text, set_value
from .dataset import SynthConfig, generate_synthetic, synthetic_manifest, write_dataset
from .errors import ConfigError, GeoPromptError, SchemaError


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"time": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "msg": record.getMessage()})


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    group = p.add_argument_group("config overrides")
    for key in _flatten(dataclasses.asdict(TrainConfig())):
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V")


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def _cfg(args) -> TrainConfig:
    return load_config(args.config, _overrides(args))


def cmd_gen_synth(args) -> int:
    try:
        synth = SynthConfig(seed=args.seed, count=args.count, resolution=args.resolution,
                            curve_thickness_px=args.thickness, deformation_amplitude=args.deformation)
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None
    manifest = synthetic_manifest(synth, val_frac=args.val_frac, test_frac=args.test_frac)
    samples = (generate_synthetic(synth, i) for i in range(synth.count))
    manifest = write_dataset(args.out, samples, manifest)
    print(json.dumps({"out": str(args.out), "counts": manifest.counts}))
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _cfg(args)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "config.txt").write_text(dump_kv(cfg))
    result = train(cfg)
    print(json.dumps({"last": str(result.last), "best": str(result.best) if result.best else None,
                      "steps": result.steps, "history": result.history}, default=str))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, read_checkpoint_config

    values = parse_kv_text(Path(args.config).read_text()) if args.config else {}
    values.update(_overrides(args))
    cfg = None
    if values:
        # start from the checkpoint's own config; architecture changes trip the hash check
        cfg = read_checkpoint_config(args.ckpt)
        for k, v in values.items():
            set_value(cfg, k, v)
        cfg.validate()
    report = evaluate(args.ckpt, args.split, cfg, out=args.out)
    print(report.table(f"{args.split}"))
    return 0


def cmd_ablate(args) -> int:
    from .train import ablate, ablation_grid, ablation_table

    cfg = _cfg(args)
    names = ["design", "backbone"] if args.grid == "all" else [args.grid]
    grid = [row for n in names for row in ablation_grid(n)]
    if args.rows:
        keep = set(args.rows.split(","))
        grid = [row for row in grid if row[0] in keep]
    rows = ablate(cfg, grid, args.split)
    table = ablation_table(rows)
    print(table)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "ablation.txt").write_text(table + "\n")
    return 0


def cmd_predict(args) -> int:
    from .train import predict

    written = predict(args.ckpt, args.images, args.out)
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoprompt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset in the L3D layout")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--thickness", type=int, default=8)
    p.add_argument("--deformation", type=float, default=0.08)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--test-frac", type=float, default=0.15)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    _config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the ablation grids")
    p.add_argument("--grid", default="design", choices=("design", "backbone", "all"))
    p.add_argument("--rows", default="", help="comma-separated subset of row names")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="write probability maps and overlays for a folder of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, handlers=[handler], force=True)
    try:
        return args.func(args)
    except GeoPromptError as exc:
        logging.getLogger("geoprompt").error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
