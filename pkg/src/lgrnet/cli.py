"""``lgrnet`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from lgrnet import dataio
from lgrnet.config import RunConfig, read_scene_spec
from lgrnet.errors import ConfigError, InvalidArgument, NumericError, ParseError
from lgrnet.inspection import render_region, seed_trace, write_grid
from lgrnet.timing import bench
from lgrnet.train import (
    build_model, dump_json, eval_seeds, evaluate, load_model, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("lgrnet")

ABLATION_VARIANTS = {
    "base": [],
    "conv1x1": ["sp.kernel_size=1"],
    "avg_pool": ["grid.aggregation=avg_pool"],
    "nearest_neighbor": ["grid.aggregation=nearest_neighbor"],
}


def scene_seed(seed, i):
    """Generator seed of scene ``i`` in a dataset drawn with ``seed``."""
    return int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])


def load_config(args):
    cfg = RunConfig.from_file(args.config)
    return cfg.with_overrides(getattr(args, "set", None) or [])


def cmd_gen(args):
    spec, val_fraction = read_scene_spec(args.spec)
    if args.count < 1:
        raise ConfigError("--count must be positive")
    samples = []
    for i in range(args.count):
        s = dataio.generate_scene(spec, scene_seed(args.seed, i))
        dataio.validate_sample(s, spec.min_object_points)
        samples.append(s)
    n_val = int(round(args.count * val_fraction))
    ids = list(range(args.count))
    dataio.write_dataset(args.out, samples, ids[:args.count - n_val], ids[args.count - n_val:])
    print(f"wrote {args.count} scenes ({args.count - n_val} train, {n_val} val) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    samples = dataio.load_split(args.data, args.split)
    train(cfg, samples, args.out)
    print(f"checkpoint written to {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args)
    samples = dataio.load_split(args.data, args.split)
    model, _ = load_model(cfg, args.ckpt)
    metrics, timing = evaluate(model, cfg, samples)
    text = dump_json(metrics, args.out)
    if args.out is None:
        sys.stdout.write(text)
    if args.timing_out:
        dump_json(timing, args.timing_out)
    log.info("%.3f s per scan", timing["seconds_per_scan"])
    return EXIT_OK


def cmd_inspect(args):
    cfg = load_config(args)
    pc = dataio.load_points(args.points)
    spec = cfg.detector.backbone.stages[args.stage - 1]
    _, grid = render_region(pc, args.centroid_index, spec.region, spec.grid, seed=cfg["seed"])
    if args.out:
        write_grid(args.out, grid.values[0])
    else:
        from lgrnet.inspection import format_grid
        sys.stdout.write(format_grid(grid.values[0]))
    if args.trace_out:
        model = load_model(cfg, args.ckpt)[0] if args.ckpt else build_model(cfg)
        trace = seed_trace(model, pc, int(eval_seeds(cfg["seed"], 1)[0]), cfg["head.nms_iou"])
        dump_json(trace, args.trace_out)
    return EXIT_OK


def cmd_bench(args):
    cfg = load_config(args)
    pc = dataio.load_points(args.points)
    model = load_model(cfg, args.ckpt)[0] if args.ckpt else build_model(cfg)
    text = dump_json(bench(model, cfg, pc, args.repeat), args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def run_ablation(cfg, data, out, seeds, variants):
    """Train and evaluate every variant for every seed; returns the summary dict."""
    train_set = dataio.load_split(data, "train")
    val_set = dataio.load_split(data, "val")
    out = Path(out)
    results = {}
    for name, overrides in variants.items():
        results[name] = {}
        for seed in seeds:
            run_cfg = cfg.with_overrides(list(overrides) + [f"seed={seed}"])
            run_dir = out / f"{name}_seed{seed}"
            model = train(run_cfg, train_set, run_dir)
            metrics, _ = evaluate(model, run_cfg, val_set)
            dump_json(metrics, run_dir / "metrics.json")
            results[name][str(seed)] = metrics["mAP@0.25"]
            log.info("%s seed %d: val mAP@0.25 %.4f", name, seed, metrics["mAP@0.25"])
    summary = {"seeds": list(seeds), "variants": {k: list(v) for k, v in variants.items()},
               "val_mAP@0.25": results}
    dump_json(summary, out / "summary.json")
    return summary


def _parse_variant(text):
    name, _, items = text.partition(":")
    if not name:
        raise ConfigError(f"bad --variant {text!r}; expected NAME:key=value,...")
    return name, [s for s in items.split(",") if s]


def cmd_ablate(args):
    cfg = load_config(args)
    if args.variant:
        variants = {"base": []}
        variants.update(_parse_variant(v) for v in args.variant)
    else:
        variants = dict(ABLATION_VARIANTS)
    for overrides in variants.values():
        cfg.with_overrides(overrides)  # reject typos before any training starts
    summary = run_ablation(cfg, args.data, args.out, args.seeds, variants)
    sys.stdout.write(dump_json(summary))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lgrnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="scene spec file (scene.* keys)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    with_config(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoints and log")
    t.add_argument("--split", default="train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", help="metrics JSON path (default: stdout)")
    e.add_argument("--timing-out", help="per-scan timing JSON path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", aliases=["render-inspect"], help="dump a rendered grid and a seed trace")
    with_config(i)
    i.add_argument("--points", required=True, help=".lgrpc point file")
    i.add_argument("--centroid-index", type=int, required=True)
    i.add_argument("--stage", type=int, default=1, choices=(1, 2, 3, 4),
                   help="SP stage whose region and grid settings are used")
    i.add_argument("--ckpt", help="weights for the seed trace (default: fresh init)")
    i.add_argument("--out", help="grid dump path (default: stdout)")
    i.add_argument("--trace-out", help="seed-trace JSON path")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="per-stage timing of one forward pass")
    with_config(b)
    b.add_argument("--points", required=True)
    b.add_argument("--repeat", type=int, default=1)
    b.add_argument("--ckpt")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants over seeds")
    with_config(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--variant", action="append", metavar="NAME:KEY=VALUE,...",
                   help="custom variant (default: the built-in mini-CNN and aggregation set)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, InvalidArgument, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
