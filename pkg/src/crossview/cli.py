"""Command line interface: gen / extract / register / mesh / texture / eval / pipeline."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, read_config
from .errors import AlgorithmError, InputError

_SUBCOMMANDS = ("gen", "extract", "register", "mesh", "texture", "eval", "pipeline")
_USAGE = (
    "usage: crossview {gen,extract,register,mesh,texture,eval,pipeline} "
    "[--config PATH] [--seed N] [--out DIR] [--verbose]\n"
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossview", add_help=True)
    p.add_argument("command", choices=_SUBCOMMANDS)
    p.add_argument("--config", default=None, help="run configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="artifact directory")
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in _SUBCOMMANDS and argv[0] not in ("-h", "--help"):
        sys.stderr.write(f"crossview: unknown subcommand {argv[0]!r}\n{_USAGE}")
        return 64
    if not argv:
        sys.stderr.write(_USAGE)
        return 64
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    log = logging.getLogger("crossview")
    try:
        cfg = read_config(args.config) if args.config else RunConfig()
    except InputError as exc:
        sys.stderr.write(f"crossview: {exc}\n")
        return 2

    from . import pipeline as pl

    try:
        if args.command == "gen":
            pl.stage_gen(cfg, args.seed, args.out)
        elif args.command == "extract":
            pl.stage_extract(cfg, args.out)
        elif args.command == "register":
            pl.stage_register(cfg, args.out)
        elif args.command == "mesh":
            pl.stage_mesh(cfg, args.out, args.seed)
        elif args.command == "texture":
            pl.stage_texture(cfg, args.out)
        elif args.command == "eval":
            rep = pl.stage_eval(cfg, args.out, args.seed)
            sys.stdout.write(rep.text())
        elif args.command == "pipeline":
            rep = pl.run_pipeline(cfg, args.seed, args.out)
            sys.stdout.write(rep.text())
        log.info("%s finished", args.command)
        return 0
    except (InputError, FileNotFoundError) as exc:
        sys.stderr.write(f"crossview: input error: {exc}\n")
        return 2
    except AlgorithmError as exc:
        sys.stderr.write(f"crossview: {exc}\n")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
