"""``caac`` command line: gen-data, train, eval, compare, plot, bench.

Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration or usage
error. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError
from .evaluate import GridSyntaxError, HygieneError, parse_angle_grid, read_metrics
from .model import ModelConfigError
from .train import TrainConfigError, TrainingError

log = logging.getLogger("caac")


class UsageError(Exception):
    pass


def _apply_overrides(cfg: RunConfig, items) -> RunConfig:
    if not items:
        return cfg
    data = cfg.resolved()
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        *path, last = key.split(".")
        for part in path:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"--set: unknown section {part!r}")
            node = node[part]
        if last not in node:
            raise ConfigError(f"--set: unknown key {key!r}")
        node[last] = value
    return RunConfig.from_dict(data)


def _config(args) -> RunConfig:
    cfg = _apply_overrides(load_config(args.config), getattr(args, "set", None))
    log.info("resolved config %s: %s", cfg.hash(), json.dumps(cfg.resolved(), sort_keys=True))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    from .pipeline import gen_data

    manifest = gen_data(cfg, args.out)
    out = Path(args.out)
    size = sum(f.stat().st_size for f in out.glob("*.caacds"))
    counts = {k: v["n"] for k, v in manifest["splits"].items()}
    print(f"wrote {sum(counts.values())} scenes {counts} to {out} ({size} bytes)", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    from .pipeline import train_run

    if not Path(args.data).exists():
        raise FileNotFoundError(f"dataset {args.data} does not exist")

    def progress(h):
        print(f"epoch {h['epoch']:3d}  train {h['train_loss']:.5f}  val {h['val_loss']:.5f}",
              file=sys.stderr)

    train_run(cfg, args.data, args.out, kind=args.model, resume=args.resume, progress=progress)
    print(f"checkpoint written to {Path(args.out) / 'checkpoint.caacckpt'}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    from .pipeline import eval_run

    if not args.checkpoint and not args.method:
        raise UsageError("eval needs --checkpoint or --method")
    if args.angles:
        parse_angle_grid(args.angles)
    m = eval_run(cfg, args.data, args.out, method=args.method, checkpoint=args.checkpoint,
                 angles=args.angles, label=args.label)
    print(f"{m.method}: rmse_tau={m.rmse_tau:.4f} flatness={m.flatness:.4f} -> {args.out}",
          file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    from .pipeline import compare_run

    comp = compare_run(args.metrics, args.out, reference=args.reference)
    print(comp.table())
    return 0


def cmd_plot(args) -> int:
    from . import plotting

    if bool(args.scene) == bool(args.metrics):
        raise UsageError("plot needs exactly one of --scene or --metrics")
    if args.metrics:
        for p in args.metrics:
            if not Path(p).is_file():
                raise FileNotFoundError(f"cannot read metrics file {p}")
        plotting.error_vs_angle(args.out, [read_metrics(p) for p in args.metrics])
        return 0

    from .dataset import load_split
    from .pipeline import retriever_for
    from .scene import render_scene

    cfg = _config(args)
    scenes = load_split(args.scene, args.split)
    if not 0 <= args.index < len(scenes):
        raise UsageError(f"--index {args.index} outside 0..{len(scenes) - 1}")
    grid = parse_angle_grid(args.geometry, cfg.data.cloud_top_km)
    if len(grid) != 1:
        raise UsageError("--geometry must name a single geometry")
    geom = grid[0]
    retriever, kind, _ = retriever_for(args.method or ("oracle" if not args.checkpoint else None),
                                       args.checkpoint)
    cot = scenes.cot(args.index)
    r = render_scene(cot, geom, scenes.params, effects=cfg.eval.effects,
                     noise_sigma=cfg.eval.noise_sigma, noise_seed=[int(cot.seed), 0, 7])
    if getattr(retriever, "oracle", False):
        pred = retriever(r.reflectance[None], [geom], truth=cot.tau[None])[0]
    else:
        pred = np.asarray(retriever(r.reflectance[None], [geom]))[0]
    plotting.scene_maps(args.out, cot.tau, pred, scenes.params.tau_max, err_max=args.err_max,
                        title=f"{kind}, scene {cot.seed}, sza {geom.sza_deg:g} vza {geom.vza_deg:g}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    from .pipeline import BENCH_VARIANTS, bench

    def progress(h):
        print(f"  epoch {h['epoch']:3d}  train {h['train_loss']:.5f}  val {h['val_loss']:.5f}",
              file=sys.stderr)

    result = bench(cfg, args.out, variants=args.variants or BENCH_VARIANTS, progress=progress)
    print(result["comparison"].table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caac", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"caac {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON literal)")

    sp = sub.add_parser("gen-data", help="generate train/val/test scenes")
    with_config(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train CAAC or the pixel MLP")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--model", choices=("caac", "mlp"), default="caac")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate over an angle sweep")
    with_config(sp)
    sp.add_argument("--data", required=True)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--method", choices=("ipa", "mlp", "caac", "oracle"))
    sp.add_argument("--angles", help='e.g. "sza=0:60:15,vza=0:45:15"')
    sp.add_argument("--label", help="method label written to the metrics file")
    sp.add_argument("--out", required=True, help="metrics CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="tabulate metrics files against a reference")
    sp.add_argument("--metrics", nargs="+", required=True)
    sp.add_argument("--reference", help="method label used as the ratio denominator")
    sp.add_argument("--out", required=True, help="comparison CSV path")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("plot", help="COT maps or error-vs-angle curves")
    with_config(sp)
    sp.add_argument("--scene", help="dataset directory or .caacds file")
    sp.add_argument("--split", default="test")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--geometry", default="sza=30,vza=0")
    sp.add_argument("--checkpoint")
    sp.add_argument("--method", choices=("ipa", "oracle"))
    sp.add_argument("--err-max", type=float, help="fixed upper end of the error colour scale")
    sp.add_argument("--metrics", nargs="+", help="metrics CSV files")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("bench", help="full desk-scale comparison run")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", nargs="+", choices=("caac", "caac-fixed", "caac-noangle", "mlp"))
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, TrainConfigError, ModelConfigError, GridSyntaxError, HygieneError,
            UsageError) as err:
        print(f"caac {args.command}: {err}", file=sys.stderr)
        return 2
    except (OSError, DatasetError, TrainingError, ValueError) as err:
        print(f"caac {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
