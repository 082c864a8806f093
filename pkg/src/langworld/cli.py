"""Command-line entry point.

Subcommands: gen-data, embed, train, eval, rollout, decode-imagination.
Exit codes: 0 success, 1 usage error, 2 runtime failure. All randomness is
derived from a single --seed per command.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import episodes as eps
from . import lexicon as lx
from . import minibench as mb
from .config import Config, desk_config, load_config
from .harness import SwitchSchedule, decode_imagination, evaluate, run_schedule
from .system import load_checkpoint
from .trainer import run_training


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> Parser:
    p = Parser(prog="langworld", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="generate scripted play-data episodes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=int, default=160)
    g.add_argument("--horizon", type=int, default=30)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--out", required=True)

    e = sub.add_parser("embed", help="create or import instruction embeddings")
    esub = e.add_subparsers(dest="embed_mode", required=True, parser_class=Parser)
    es = esub.add_parser("synth", help="synthetic clustered embeddings")
    es.add_argument("--seed", type=int, default=7)
    es.add_argument("--dim", type=int, default=16)
    es.add_argument("--per-task", type=int, default=8)
    es.add_argument("--noise", type=float, default=0.1)
    es.add_argument("--out", required=True)
    ei = esub.add_parser("import", help="validate and install a fixture file")
    ei.add_argument("--in", dest="in_path", required=True)
    ei.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the staged training pipeline")
    t.add_argument("--config", help="JSON config file (defaults to the desk profile)")
    t.add_argument("--variant", default=None, choices=["limt", "limt_nl", "limt_nlac", "mbrl_st"])
    t.add_argument("--task", default=None, help="single task for the mbrl_st variant")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", default=None, help="dataset directory from gen-data")
    t.add_argument("--embeddings", default=None, help="embedding fixture file")
    t.add_argument("--out", required=True)

    v = sub.add_parser("eval", help="success rates from a trained checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--n", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--policy", default="mean", choices=["mean", "sample", "random"])
    v.add_argument("--out", default=None, help="write the report JSON here")

    r = sub.add_parser("rollout", help="run a task-switching schedule")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--schedule", required=True, help='JSON file {"switches": [[t, task], ...]}')
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default=None, help="write the transcript JSON here")

    d = sub.add_parser("decode-imagination", help="decode an imagined rollout to a PNG strip")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--task", required=True)
    d.add_argument("--horizon", type=int, default=6)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    return p


def cmd_gen_data(args) -> int:
    episodes, filtered = mb.generate_play_data(args.seed, args.episodes, args.horizon,
                                               args.image_size)
    eps.save_dataset(episodes, args.out)
    print(f"wrote {len(episodes)} episodes ({len(filtered)} complete a task) to {args.out}")
    return 0


def cmd_embed(args) -> int:
    if args.embed_mode == "synth":
        es = lx.generate_synthetic(args.seed, args.dim, args.per_task, args.noise)
        lx.save_fixture(es, args.out)
        print(f"wrote synthetic fixture ({len(es.entries)} entries, dim {es.dim}) to {args.out}")
    else:
        es = lx.load_fixture(args.in_path)
        lx.save_fixture(es, args.out)
        print(f"validated and installed fixture ({len(es.entries)} entries) at {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg: Config = load_config(args.config) if args.config else desk_config()
    cfg.seed = args.seed
    if args.data:
        cfg.data.dir = args.data
    if args.embeddings:
        cfg.embeddings.path = args.embeddings
        cfg.embeddings.dim = lx.load_fixture(args.embeddings).dim
    if args.variant:
        cfg.variant = args.variant
    if cfg.variant == "mbrl_st":
        if not args.task:
            raise UsageError("--variant mbrl_st requires --task")
        cfg.env.tasks = (args.task,)
    elif args.task:
        raise UsageError("--task is only valid with --variant mbrl_st")
    out = run_training(cfg, args.seed, args.out)
    print(f"training finished; metrics and checkpoint under {out}")
    return 0


def cmd_eval(args) -> int:
    system = load_checkpoint(args.checkpoint)
    report = evaluate(system, n_eval=args.n, seed=args.seed, policy=args.policy)
    doc = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(doc)
    print(doc)
    return 0


def cmd_rollout(args) -> int:
    system = load_checkpoint(args.checkpoint)
    schedule = SwitchSchedule.from_json(args.schedule)
    transcript = run_schedule(system, schedule, seed=args.seed)
    if args.out:
        transcript.save(args.out)
        print(f"wrote transcript ({len(transcript.steps)} steps) to {args.out}")
    else:
        print(json.dumps(transcript.to_dict()["steps"][:3], indent=1))
    return 0


def cmd_decode(args) -> int:
    system = load_checkpoint(args.checkpoint)
    task = lx.task_by_name(args.task)
    frames = decode_imagination(system, task, args.horizon, args.out, seed=args.seed)
    print(f"wrote {frames.shape[0]} frames ({args.horizon} imagined) to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "embed": cmd_embed,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "decode-imagination": cmd_decode,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
