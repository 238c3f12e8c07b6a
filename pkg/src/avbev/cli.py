"""Command line entry point.

    avbev generate  --out DIR [--config FILE] [--seed N]
    avbev train     --data DIR --out DIR [--config FILE] [--seed N]
    avbev eval      --data DIR --checkpoint FILE --out FILE
                    [--config FILE] [--seed N] [--text on|off]
                    [--view front|all] [--gt-as-prediction]
    avbev viz       --data DIR --checkpoint FILE --out DIR
                    [--config FILE] [--scene SEED] [--step K]
    avbev gradcheck [--seeds N]

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
Errors print one machine-parseable line to stderr: "error: <code>: <reason>".
AVBEV_THREADS caps evaluation worker parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dataset import DataError, generate_dataset, load_frame, load_manifest
from .evaluation import load_scene_lane, run_eval, write_report
from .model import DrivingModel, NumericError, embedding_for_captions
from .training import run_train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg.validate()


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    manifest = generate_dataset(cfg, args.out)
    print(json.dumps({"scenes": len(manifest["train_seeds"])
                      + len(manifest["val_seeds"]),
                      "config_hash": manifest["config_hash"],
                      "out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = run_train(cfg, args.data, args.out)
    print(json.dumps(result))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    report = run_eval(cfg, args.data, checkpoint=args.checkpoint,
                      text_mode=args.text, view=args.view,
                      use_gt_as_prediction=args.gt_as_prediction)
    write_report(report, args.out)
    print(json.dumps({"report": str(args.out), "iou": report["iou"]}))
    return 0


def cmd_viz(args) -> int:
    from .heads import decode_instances
    from .planner import sample_trajectories, select_best
    from .viz import export_viz
    cfg = _load_config(args)
    manifest = load_manifest(args.data)
    seed = args.scene if args.scene is not None else manifest["val_seeds"][0]
    step = args.step if args.step is not None else cfg.history
    model = DrivingModel(cfg)
    if args.checkpoint:
        model.load(args.checkpoint)
    record = load_frame(args.data, seed, step, cfg.history)
    emb = embedding_for_captions(cfg, record.captions,
                                 f"{seed:05d}/{step:03d}", None)
    out = model.forward(record.images, record.poses, emb)
    heat = 1.0 / (1.0 + np.exp(-out.instance.heatmap.data[0]))
    ids = decode_instances((heat, out.instance.offsets.data))
    from .evaluation import load_scene_lane as _lane
    lane = _lane(args.data, seed, record)
    from .planner import Costmap, collision_rate, l2_error, planner_report
    costmap = Costmap(out.costmap.tensor().data, model.spec)
    candidates = sample_trajectories(record.gt.expert.states[0], [lane],
                                     cfg.sampler_config())
    best = select_best(candidates, costmap)
    report = planner_report(candidates, best, costmap,
                            l2=l2_error(best, record.gt.expert),
                            cr=collision_rate(best, record.gt.occupancy,
                                              model.spec))
    from pathlib import Path
    Path(args.out).mkdir(parents=True, exist_ok=True)
    with open(Path(args.out) / "planner.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    files = export_viz(args.out, cameras=record.images[-1], heatmap=heat,
                       instances=ids, offsets=out.instance.offsets.data,
                       flow=out.instance.flow.data,
                       costmap=costmap.cost if isinstance(costmap.cost,
                                                          np.ndarray)
                       else costmap.cost.data,
                       trajectory=best, spec=model.spec)
    print(json.dumps({"written": files, "out": str(args.out)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_full_suite
    report = run_full_suite(op_seeds=args.seeds)
    worst = 0.0
    for name in sorted(report):
        err = report[name]
        worst = max(worst, err)
        print(f"{name:36s} {err:.3e} {'ok' if err <= 1e-4 else 'FAIL'}")
    if worst > 1e-4:
        raise NumericError(f"gradient suite max error {worst:.3e} > 1e-4")
    print(f"gradient suite passed: max error {worst:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avbev",
                                description="text-conditioned BEV pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--text", choices=("on", "off"), default="on")
    e.add_argument("--view", choices=("front", "all"))
    e.add_argument("--gt-as-prediction", action="store_true")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("viz", help="export figure panels")
    v.add_argument("--config")
    v.add_argument("--seed", type=int)
    v.add_argument("--data", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--out", required=True)
    v.add_argument("--scene", type=int)
    v.add_argument("--step", type=int)
    v.set_defaults(fn=cmd_viz)

    c = sub.add_parser("gradcheck", help="finite-difference suite")
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
