"""Command-line entry point: ``run``, ``batch``, ``fixtures`` and ``eval``.

Every verb prints a JSON document on stdout and exits 0; failures print
``{"error": <code>, "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from .episode import RunConfig, dumps, evaluate_dir, run_batch, run_episode
from .errors import ArticulateError, InvalidConfig
from .fixtures import FIXTURES, make_fixtures

EXIT_FAILURE = 1
EXIT_USAGE = 2
RUN_FLAGS = ("object", "policy", "mode", "steps", "seed", "out", "noise", "candidates")


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Load a config document: JSON, or ``key = value`` lines (``#`` comments)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"malformed JSON config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise InvalidConfig(f"malformed config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        out.update({k: _coerce(v) for k, v in parser.items(section)})
    return out


def _merged(args) -> dict:
    """Config file values overridden by any flag given on the command line."""
    d = read_config(args.config) if args.config else {}
    for key in RUN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return d


def _add_run_flags(p: argparse.ArgumentParser, with_object: bool = True) -> None:
    if with_object:
        p.add_argument("--object", help="fixture name or URDF path")
    p.add_argument("--policy", choices=["oracle", "lookahead", "random"])
    p.add_argument("--mode", choices=["oracle-flow", "estimated"])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, help="depth noise standard deviation")
    p.add_argument("--candidates", type=int, help="lookahead candidate count")
    p.add_argument("--config", help="JSON or key = value config file; flags win")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="articulate", description="Interactive articulated-object reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run one episode")
    _add_run_flags(run)
    run.add_argument("--out", help="artifact directory")

    batch = sub.add_parser("batch", help="run every object in a dataset over several seeds")
    batch.add_argument("dataset", help="directory of URDF files, or 'fixtures' for the bundled set")
    _add_run_flags(batch, with_object=False)
    batch.add_argument("--seeds", type=int, nargs="+", default=[0])
    batch.add_argument("--out", required=True, help="output root")

    fx = sub.add_parser("fixtures", help="write the bundled synthetic objects")
    fx.add_argument("--out", required=True)
    fx.add_argument("--names", nargs="+", choices=sorted(FIXTURES))

    ev = sub.add_parser("eval", help="recompute metrics from an episode directory")
    ev.add_argument("episode")
    ev.add_argument("--write", action="store_true", help="overwrite metrics.json")
    return ap


def _cmd_run(args) -> dict:
    cfg = RunConfig.from_dict(_merged(args))
    res = run_episode(cfg)
    return {"report": res.report.to_dict(), "out": str(res.out_dir) if res.out_dir else None, "wall_time": res.wall_time}


def _cmd_batch(args) -> dict:
    template = _merged(args)
    template.pop("out", None)
    template.setdefault("object", next(iter(FIXTURES)))
    RunConfig.from_dict(template)  # validate once before any episode runs
    dataset = sorted(FIXTURES) if args.dataset == "fixtures" else args.dataset
    return run_batch(dataset, template, args.seeds, args.out)


def _cmd_fixtures(args) -> dict:
    paths = make_fixtures(args.out, args.names)
    return {"fixtures": [str(p) for p in paths]}


def _cmd_eval(args) -> dict:
    out = Path(args.episode)
    if not (out / "volumes" / "H_final.vol").exists():
        raise InvalidConfig(f"{out} is not an episode directory")
    report = evaluate_dir(out).to_dict()
    if args.write:
        (out / "metrics.json").write_text(dumps(report))
    return report


COMMANDS = {"run": _cmd_run, "batch": _cmd_batch, "fixtures": _cmd_fixtures, "eval": _cmd_eval}


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("UsageError", "invalid command line", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.verb](args)
    except ArticulateError as exc:
        return _fail(exc.code, str(exc), EXIT_FAILURE)
    except (OSError, KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    sys.stdout.write(dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
