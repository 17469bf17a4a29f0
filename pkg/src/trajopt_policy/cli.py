"""Command-line entry point.

Subcommands: gen-data, train, eval, rollout, metrics, gradcheck. Every
command takes --config (JSON, see config.DEFAULTS) plus --set overrides.

Exit codes: 0 success, 2 config error, 3 numerical failure (infeasible QP,
failed gradient check), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import types

import numpy as np

from . import config as config_mod
from . import data, dto, gradcheck, qp, rollout, storage, training

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _load(args):
    return config_mod.load_config(args.config, args.set or ())


def cmd_gen_data(args):
    cfg = _load(args)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    task = config_mod.task_config(cfg)
    demos = data.generate_demos(task, cfg["data"]["demos"], cfg["data"]["seed"])
    normalizer = data.fit_normalizer(demos)
    data.save_dataset(cfg["data"]["path"], demos, task, normalizer)
    lengths = [d.length for d in demos]
    print(f"wrote {len(demos)} demos to {cfg['data']['path']}")
    print(f"demo length min/mean/max: {min(lengths)}/{np.mean(lengths):.1f}/{max(lengths)}")
    for dim in normalizer.continuous:
        print(f"action dim {dim} range: [{normalizer.lo[dim]:.6f}, {normalizer.hi[dim]:.6f}]")
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    tcfg = config_mod.train_config(cfg)
    demos, task, _ = data.load_dataset(cfg["data"]["path"])
    resume = None
    if args.resume:
        resume = training.load_checkpoint(tcfg.checkpoint_path)
        if resume.epoch >= tcfg.epochs:
            print(f"checkpoint already at epoch {resume.epoch}; nothing to do")
            return EXIT_OK
    ckpt = training.train(demos, tcfg, delta_t=task.delta_t, resume=resume)
    print(f"trained to epoch {ckpt.epoch}; final loss {ckpt.loss_history[-1]:.6f}")
    print(f"checkpoint: {tcfg.checkpoint_path}")
    return EXIT_OK


def _checkpoint_path(args, cfg):
    return args.checkpoint or cfg["train"]["checkpoint_path"]


def cmd_eval(args):
    cfg = _load(args)
    task = config_mod.task_config(cfg)
    ckpt = training.load_checkpoint(_checkpoint_path(args, cfg))
    ev = cfg["eval"]
    clip = ev["clip"] or args.baseline == "clipped"
    report, records = rollout.evaluate(
        ckpt, task, ev["episodes"], ev["seed"], horizon=ev["horizon"],
        clip=clip, success_radius=ev["success_radius"])
    _write_eval_outputs(ev["report_prefix"], cfg, report, records, ev["seed"])
    if ev["traces_dir"]:
        _write_traces(ev["traces_dir"], cfg, ckpt, records, ev["seed"])
    print(f"success rate: {report.success_rate:.3f}")
    for name in report.avg_max:
        print(f"{name}: avg-mean {report.avg_mean[name]:.4f} "
              f"avg-max {report.avg_max[name]:.4f} avg-std {report.avg_std[name]:.4f}")
    print(f"acc-peak: {report.acc_peak:.4f}")
    print(f"violations: {report.violations}")
    return EXIT_OK


def cmd_rollout(args):
    cfg = _load(args)
    task = config_mod.task_config(cfg)
    ckpt = training.load_checkpoint(_checkpoint_path(args, cfg))
    ev = cfg["eval"]
    traces_dir = ev["traces_dir"] or os.path.abspath("runs/traces")
    episodes = args.episodes or ev["episodes"]
    records = [rollout.rollout(ckpt, task, ev["seed"] + i, ev["horizon"],
                               clip=ev["clip"], success_radius=ev["success_radius"])
               for i in range(episodes)]
    _write_traces(traces_dir, cfg, ckpt, records, ev["seed"])
    print(f"wrote {episodes} traces to {traces_dir}; "
          f"successes {sum(r.success for r in records)}/{episodes}")
    return EXIT_OK


def cmd_metrics(args):
    cfg = _load(args)
    traces_dir = args.traces_dir or cfg["eval"]["traces_dir"]
    if not traces_dir:
        raise config_mod.ConfigError("metrics needs --traces-dir or eval.traces_dir")
    records, bounds = _read_traces(traces_dir)
    groups = {"lin": tuple(range(bounds.v_min.shape[0]))}
    report = rollout.compute_metrics(records, groups, params=bounds)
    prefix = os.path.join(traces_dir, "metrics")
    _write_report_csv(f"{prefix}.csv", cfg, report, records, None)
    _write_report_json(f"{prefix}.json", cfg, report)
    print(f"recomputed metrics for {len(records)} traces -> {prefix}.csv/.json")
    print(f"success rate: {report.success_rate:.3f}; violations: {report.violations}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_all(corrupt=args.corrupt_pullback, fast=args.fast)
    failed = False
    for name, worst in results.items():
        status = "PASS" if worst <= gradcheck.THRESHOLD else "FAIL"
        failed = failed or worst > gradcheck.THRESHOLD
        print(f"{name:24s} worst relative error {worst:.3e}  {status}")
    if failed:
        print(f"gradient check exceeded {gradcheck.THRESHOLD}")
        return EXIT_NUMERICAL
    return EXIT_OK


def _episode_rows(records, base_seed):
    for i, rec in enumerate(records):
        mini = rollout.compute_metrics(
            [rec], {"lin": tuple(range(rec.velocities.shape[1]))})
        yield [i, base_seed + i if base_seed is not None else "",
               int(rec.success), rec.velocities.shape[0],
               f"{mini.avg_mean['lin']:.12g}", f"{mini.avg_max['lin']:.12g}",
               f"{mini.avg_std['lin']:.12g}", f"{mini.acc_peak:.12g}",
               rec.failure or ""]


def _write_eval_outputs(prefix, cfg, report, records, base_seed):
    _write_report_csv(f"{prefix}.csv", cfg, report, records, base_seed)
    _write_report_json(f"{prefix}.json", cfg, report)


def _write_report_csv(path, cfg, report, records, base_seed):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {json.dumps(cfg, sort_keys=True)}\n")
        writer = csv.writer(fh)
        writer.writerow(["episode", "seed", "success", "steps", "avg_mean",
                         "avg_max", "avg_std", "acc_peak", "failure"])
        for row in _episode_rows(records, base_seed):
            writer.writerow(row)
        writer.writerow(["summary", "", f"{report.success_rate:.12g}", "",
                         f"{report.avg_mean['lin']:.12g}",
                         f"{report.avg_max['lin']:.12g}",
                         f"{report.avg_std['lin']:.12g}",
                         f"{report.acc_peak:.12g}",
                         json.dumps(report.violations)])


def _write_report_json(path, cfg, report):
    payload = {
        "config": cfg,
        "success_rate": report.success_rate,
        "avg_mean": report.avg_mean,
        "avg_max": report.avg_max,
        "avg_std": report.avg_std,
        "acc_peak": report.acc_peak,
        "violations": report.violations,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_traces(traces_dir, cfg, ckpt, records, base_seed):
    os.makedirs(traces_dir, exist_ok=True)
    params = ckpt.dto_params
    episodes = []
    for i, rec in enumerate(records):
        name = f"episode_{i:03d}.csv"
        with open(os.path.join(traces_dir, name), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tick", "pos_x", "pos_y", "vel_x", "vel_y",
                             "drop", "plan_start"])
            starts = set(rec.plan_starts)
            for t in range(rec.positions.shape[0]):
                if t < rec.velocities.shape[0]:
                    writer.writerow([
                        t, f"{rec.positions[t, 0]:.17g}", f"{rec.positions[t, 1]:.17g}",
                        f"{rec.velocities[t, 0]:.17g}", f"{rec.velocities[t, 1]:.17g}",
                        int(rec.drops[t]), int(t in starts)])
                else:
                    writer.writerow([t, f"{rec.positions[t, 0]:.17g}",
                                     f"{rec.positions[t, 1]:.17g}", "", "", "", ""])
        episodes.append({"file": name,
                         "seed": base_seed + i if base_seed is not None else None,
                         "success": bool(rec.success),
                         "goal": [float(g) for g in rec.goal],
                         "plan_starts": [int(s) for s in rec.plan_starts],
                         "failure": rec.failure})
    summary = {
        "config": cfg,
        "delta_t": params.delta_t,
        "bounds": {
            "v_min": list(params.v_min), "v_max": list(params.v_max),
            "a_min": list(params.a_min), "a_max": list(params.a_max),
            "A_pos": None if params.A_pos is None else [list(r) for r in params.A_pos],
            "b_min": None if params.A_pos is None else list(params.b_min),
            "b_max": None if params.A_pos is None else list(params.b_max),
        },
        "episodes": episodes,
    }
    with open(os.path.join(traces_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_traces(traces_dir):
    summary_path = os.path.join(traces_dir, "summary.json")
    try:
        with open(summary_path) as fh:
            summary = json.load(fh)
    except json.JSONDecodeError as exc:
        raise storage.StorageError(f"{summary_path}: malformed ({exc})") from None
    b = summary["bounds"]
    bounds = types.SimpleNamespace(
        v_min=np.array(b["v_min"]), v_max=np.array(b["v_max"]),
        a_min=np.array(b["a_min"]), a_max=np.array(b["a_max"]),
        A_pos=None if b["A_pos"] is None else np.array(b["A_pos"]),
        b_min=None if b["b_min"] is None else np.array(b["b_min"]),
        b_max=None if b["b_max"] is None else np.array(b["b_max"]),
        delta_t=summary["delta_t"], D_v=len(b["v_min"]))
    records = []
    for ep in summary["episodes"]:
        positions, velocities, drops = [], [], []
        with open(os.path.join(traces_dir, ep["file"]), newline="") as fh:
            for row in csv.DictReader(fh):
                positions.append([float(row["pos_x"]), float(row["pos_y"])])
                if row["vel_x"] != "":
                    velocities.append([float(row["vel_x"]), float(row["vel_y"])])
                    drops.append(float(row["drop"]))
        velocities = np.array(velocities) if velocities else np.zeros((0, bounds.D_v))
        acc = (np.diff(velocities, axis=0) / bounds.delta_t
               if velocities.shape[0] >= 2 else np.zeros((0, bounds.D_v)))
        records.append(rollout.RolloutRecord(
            np.array(positions), velocities, np.array(drops), acc,
            bool(ep["success"]), np.array(ep["goal"]), list(ep["plan_starts"]),
            [], [], ep.get("failure")))
    return records, bounds


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajopt-policy",
        description="Constrained imitation learning with a trajectory-optimization "
                    "action head.")
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = "config keys (set in the JSON file or via --set KEY=VALUE):\n" \
             + config_mod.config_docs()

    def add(name, func, help_text, **extra):
        p = sub.add_parser(name, help=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.epochs=5")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic demonstration dataset")
    p.add_argument("--seed", type=int, help="shortcut for --set data.seed=N")

    p = add("train", cmd_train, "train a policy on a dataset")
    p.add_argument("--resume", action="store_true",
                   help="continue from train.checkpoint_path")

    p = add("eval", cmd_eval, "evaluate a checkpoint and write metric reports")
    p.add_argument("--checkpoint", help="checkpoint path (default: train.checkpoint_path)")
    p.add_argument("--baseline", choices=["none", "clipped"], default="none",
                   help="'clipped' applies the post-hoc clipping baseline")

    p = add("rollout", cmd_rollout, "run episodes and dump per-episode trace CSVs")
    p.add_argument("--checkpoint", help="checkpoint path (default: train.checkpoint_path)")
    p.add_argument("--episodes", type=int, help="number of episodes")

    p = add("metrics", cmd_metrics, "recompute metrics from dumped traces")
    p.add_argument("--traces-dir", help="directory holding episode CSVs + summary.json")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every adjoint path")
    p.add_argument("--fast", action="store_true", help="fewer instances per suite")
    p.add_argument("--corrupt-pullback", action="store_true",
                   help="test hook: corrupt one pullback to verify the gate trips")
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("TRAJOPT_POLICY_LOGLEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingAbortError, dto.TrajectoryOptError,
            dto.InfeasibleStartError, qp.SingularKktError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except storage.StorageError as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
