"""Command-line entry point: ``duet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Set ``DUET_LOG`` to error, info or debug to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agent, envsim, trace, training
from .model import DuetConfig, DuetModel, param_shapes
from .tensorcore import ParamStore

log = logging.getLogger("duet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FUSION_FLAGS = {"dynamic": "dynamic", "average": "average", "coarse": "coarse_only", "fine": "fine_only"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


# -- shared helpers -----------------------------------------------------------------


def _load_houses(manifest):
    path = Path(manifest)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        return envsim.read_dataset(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"could not read dataset {path}: {exc}") from exc


def _model_config(args, houses):
    if args.model_config:
        path = Path(args.model_config)
        if not path.is_file():
            raise DataError(f"model config not found: {path}")
        return DuetConfig.load(path)
    if getattr(args, "init", None):
        sibling = Path(args.init).with_name("model_config.json")
        if sibling.is_file():
            return DuetConfig.load(sibling)
    return DuetConfig.for_env(houses[0].env.config, **training.DESK_MODEL)


def _load_model(config, checkpoint, seed):
    if checkpoint is None:
        return DuetModel(config, seed=seed)
    path = Path(checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        store = ParamStore.load(path, expected_shapes=param_shapes(config))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc
    return DuetModel(config, store)


def _write_run(out_dir, model, log_lines):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.config.save(out / "model_config.json")
    model.params.save(out / "checkpoint.json")
    (out / "train_log.jsonl").write_text("".join(line + "\n" for line in log_lines))
    log.info("wrote %s (sha256 %s)", out / "checkpoint.json", model.params.digest())
    return out / "checkpoint.json"


# -- subcommands --------------------------------------------------------------------


def cmd_gen_env(args):
    cfg = envsim.EnvConfig(node_count=args.nodes)
    houses = envsim.generate_dataset(
        args.seed, houses=args.houses, config=cfg, unseen_fraction=args.split_ratio,
        train_episodes=args.train_episodes, seen_episodes=args.seen_episodes,
        unseen_episodes=args.unseen_episodes, style=args.style,
    )
    manifest = envsim.write_dataset(houses, args.out, seed=args.seed)
    print(manifest)


def _train(args, finetune):
    houses = _load_houses(args.manifest)
    pairs = envsim.split_episodes(houses, "train")
    if not pairs:
        raise DataError("dataset has no training episodes")
    config = _model_config(args, houses)
    model = _load_model(config, args.init, args.seed)
    lines = []
    cfg = training.TrainConfig(
        steps=args.steps, lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
        seed=args.seed, t_max=args.t_max, lr_schedule=args.lr_schedule,
    )

    def report(rep):
        lines.append(rep.to_json())
        if rep.step % max(1, args.steps // 10) == 0:
            log.info("step %d %s total=%.4f", rep.step, rep.task, rep.total)

    if finetune:
        training.finetune(model, pairs, cfg, lam=args.lam, on_report=report)
    else:
        cfg.tasks = tuple(args.tasks.split(","))
        training.pretrain(model, pairs, cfg, on_report=report)
    print(_write_run(args.out, model, lines))


def cmd_pretrain(args):
    _train(args, finetune=False)


def cmd_finetune(args):
    _train(args, finetune=True)


def _eval_chunk(job):
    config, store_doc, pairs, cfg, offset = job
    model = None if store_doc is None else DuetModel(config, ParamStore.from_dict(store_doc))
    return [
        agent.run_episode(env, ep, model if cfg.policy == "model" else None, cfg.t_max, cfg.fusion, cfg.use_gasa,
                          agent.POLICIES[cfg.policy], np.random.default_rng([cfg.seed, offset + i]), cfg.trace)
        for i, (env, ep) in enumerate(pairs)
    ]


def cmd_evaluate(args):
    houses = _load_houses(args.manifest)
    pairs = envsim.split_episodes(houses, args.split)
    if not pairs:
        raise DataError(f"split {args.split!r} has no episodes")
    ecfg = agent.EvalConfig(
        t_max=args.t_max, fusion=FUSION_FLAGS[args.fusion], use_gasa=not args.no_gasa,
        policy=args.policy, seed=args.seed, trace=bool(args.dump_traces),
    )
    model = None
    if args.policy == "model":
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required with --policy model")
        args.init = args.checkpoint
        model = _load_model(_model_config(args, houses), args.checkpoint, args.seed)
    if args.workers == 1:
        report, trajs = agent.evaluate_split(pairs, model, ecfg)
    else:
        # contiguous chunks with global episode offsets keep results independent of the worker count
        bounds = np.linspace(0, len(pairs), args.workers + 1).astype(int)
        doc = None if model is None else model.params.to_dict()
        cfg = None if model is None else model.config
        jobs = [(cfg, doc, pairs[a:b], ecfg, a) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(args.workers) as pool:
            trajs = [t for chunk in pool.map(_eval_chunk, jobs) for t in chunk]
        report = agent.compute_metrics(trajs, [ep for _, ep in pairs], [env for env, _ in pairs])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    if args.dump_traces:
        tdir = Path(args.dump_traces)
        tdir.mkdir(parents=True, exist_ok=True)
        for traj, (env, ep), row in zip(trajs, pairs, report.rows):
            trace.write_trace(tdir / f"{ep.episode_id}.json", traj, ep, env, row)
    print(json.dumps({k: round(v, 4) for k, v in report.summary().items()}))


def cmd_trace_plot(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.traces:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"trace not found: {p}")
        try:
            doc = trace.load_trace(p)
        except (ValueError, json.JSONDecodeError) as exc:
            raise DataError(str(exc)) from exc
        target = out / (p.stem + ".svg")
        target.write_text(trace.render_svg(doc))
        print(target)


# -- parser -----------------------------------------------------------------------------


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="duet", description="Dual-scale graph transformer navigation on synthetic houses.",
                formatter_class=fmt)
    p.add_argument("--config", help="JSON file of flag defaults (flags given on the command line win)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="generate houses, episodes and a manifest", formatter_class=fmt)
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--houses", type=_positive, default=50)
    g.add_argument("--nodes", type=_positive, default=20)
    g.add_argument("--split-ratio", type=float, default=0.2, help="fraction of houses held out as unseen")
    g.add_argument("--train-episodes", type=_nonneg, default=20)
    g.add_argument("--seen-episodes", type=_nonneg, default=2)
    g.add_argument("--unseen-episodes", type=_nonneg, default=5)
    g.add_argument("--style", choices=("goal_oriented", "step_by_step"), default="goal_oriented")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_env)

    for name, fn, steps in (("pretrain", cmd_pretrain, training.DESK_PRETRAIN.steps),
                            ("finetune", cmd_finetune, training.DESK_FINETUNE.steps)):
        t = sub.add_parser(name, help=f"{name} a model on the training split", formatter_class=fmt)
        t.add_argument("--manifest", required=True)
        t.add_argument("--model-config", help="model config JSON (default: desk-scale model)")
        t.add_argument("--init", help="checkpoint to start from")
        t.add_argument("--out", default=f"runs/{name}", help="output directory")
        t.add_argument("--seed", type=_seed, default=0)
        t.add_argument("--steps", type=_nonneg, default=steps)
        recipe = training.DESK_PRETRAIN if name == "pretrain" else training.DESK_FINETUNE
        t.add_argument("--lr", type=float, default=recipe.lr)
        t.add_argument("--lr-schedule", choices=training.LR_SCHEDULES, default=recipe.lr_schedule)
        t.add_argument("--weight-decay", type=float, default=recipe.weight_decay)
        t.add_argument("--batch-size", type=_positive, default=recipe.batch_size)
        t.add_argument("--t-max", type=_positive, default=recipe.t_max)
        if name == "pretrain":
            t.add_argument("--tasks", default=",".join(recipe.tasks), help="comma-separated task cycle")
        else:
            t.add_argument("--lambda", dest="lam", type=float, default=0.2, help="weight of the SAP term")
        t.set_defaults(func=fn)

    e = sub.add_parser("evaluate", help="run episodes and write a metrics CSV", formatter_class=fmt)
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--model-config")
    e.add_argument("--split", default="unseen", choices=("train", "seen", "unseen"))
    e.add_argument("--fusion", choices=tuple(FUSION_FLAGS), default="dynamic")
    e.add_argument("--no-gasa", action="store_true", help="drop the graph distance bias")
    e.add_argument("--policy", choices=tuple(agent.POLICIES), default="model")
    e.add_argument("--t-max", type=_positive, default=15)
    e.add_argument("--seed", type=_seed, default=0)
    e.add_argument("--workers", type=_positive, default=1)
    e.add_argument("--dump-traces", metavar="DIR", help="write one trace JSON per episode")
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_evaluate)

    tp = sub.add_parser("trace-plot", help="render trace JSON files to SVG", formatter_class=fmt)
    tp.add_argument("traces", nargs="+")
    tp.add_argument("--out", default="plots")
    tp.set_defaults(func=cmd_trace_plot)
    return p


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        values = json.loads(path.read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    level = os.environ.get("DUET_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        try:
            args = _apply_config_file(parser, argv)
        except SystemExit as exc:
            return exc.code
        if args.command == "gen-env" and not 0.0 <= args.split_ratio <= 1.0:
            raise UsageError("--split-ratio must be in [0, 1]")
        args.func(args)
    except UsageError as exc:
        print(f"duet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"duet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"duet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"duet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
