"""Command-line entry point: ``lanefusion run|replay|dump-graph|print-config-defaults``.

Exit codes:

====  ==========================================================
0     success
2     usage error (bad arguments, unreadable scenario file)
3     configuration error (scenario validation, bad ``--set``)
4     I/O error (missing frame log, unwritable output directory)
5     frame log schema error
====  ==========================================================
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import ConfigError, PipelineConfig, apply_override, flatten
from .evaluation import run_pipeline, write_report
from .graph import dump_graph
from .io import (
    LogSchemaError,
    bundled_scenario_path,
    bundled_scenarios,
    iter_frame_log,
    load_scenario,
    load_truth,
    save_truth,
    scenario_to_dict,
    truth_path_for,
    write_frame_log,
)
from .pipeline import LanePipeline
from .simulator import ScenarioConfig, ScenarioError, generate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_SCHEMA = 5

OUT_ENV = "LANEFUSION_OUT"
DEFAULT_SCENARIO = "reference"
GRAPH_DUMP_EVERY = 50     # frames between graph dumps at -vv
DUMP_FRAMES = 20          # frames processed by dump-graph unless --frames is given

log = logging.getLogger("lanefusion")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./lanefusion-out)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a pipeline parameter, or a scenario field with a 'scenario.' prefix")
    common.add_argument("--frames", type=int, help="process only the first N frames")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging; twice also writes periodic graph dumps")

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--scenario", default=DEFAULT_SCENARIO,
                      help="scenario YAML path or bundled scenario name (default: %(default)s)")
    scen.add_argument("--seed", type=int, help="override the scenario seed")

    p = argparse.ArgumentParser(prog="lanefusion", description="Multi-lane estimation by graph-based sensor fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common, scen], help="simulate a scenario and evaluate the pipeline")
    r.add_argument("--log", action="store_true", help="also write the frame log and ground truth")

    rp = sub.add_parser("replay", parents=[common], help="run the pipeline on a recorded frame log")
    rp.add_argument("log_path", metavar="LOG", help="frame log (JSON Lines)")
    rp.add_argument("--truth", help="ground truth file (default: <log stem>.truth.npz if present)")

    # no set_defaults here: parent parsers share their action objects
    sub.add_parser("dump-graph", parents=[common, scen], help="print the fusion graph after N frames (default 20)")

    pc = sub.add_parser("print-config-defaults", help="print every tunable default")
    pc.add_argument("--format", choices=("yaml", "json"), default="yaml")
    sub.add_parser("list-scenarios", help="list bundled scenarios")
    return p


def _resolve_scenario(spec: str) -> Path:
    p = Path(spec)
    if p.is_file():
        return p
    if p.suffix == "" and os.sep not in spec and spec in bundled_scenarios():
        return bundled_scenario_path(spec)
    raise UsageError(f"cannot read scenario file: {p}")


def _split_overrides(items) -> tuple[list, list]:
    pipe, scen = [], []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key = key.strip()
        if key.startswith("scenario."):
            scen.append((key[len("scenario."):], value))
        else:
            pipe.append((key, value))
    return pipe, scen


def _pipeline_config(overrides) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, value in overrides:
        apply_override(cfg, key, value)
    if cfg.fused_covariance not in ("marginal", "diagonal"):
        raise ConfigError("fused_covariance must be 'marginal' or 'diagonal'")
    if cfg.graph.object_association not in ("all", "objects", "none"):
        raise ConfigError("graph.object_association must be 'all', 'objects' or 'none'")
    return cfg


def _scenario(args, overrides) -> ScenarioConfig:
    path = _resolve_scenario(args.scenario)
    try:
        cfg = load_scenario(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read scenario file {path}: {exc}") from None
    for key, value in overrides:
        try:
            apply_override(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"scenario: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "lanefusion-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    return out


def _truncate(frames, n):
    if n is None:
        return frames
    if n < 1:
        raise UsageError("--frames must be positive")
    return frames[:n] if isinstance(frames, list) else (f for k, f in zip(range(n), frames))


def _graph_dumper(out: Path, verbose: int):
    if verbose < 2:
        return None
    gdir = out / "graphs"
    gdir.mkdir(exist_ok=True)

    def on_frame(k, res, pipeline):
        if k % GRAPH_DUMP_EVERY == 0:
            (gdir / f"frame_{res.index:05d}.txt").write_text(dump_graph(pipeline.graph))
    return on_frame


def _evaluate(frames, pipe_cfg, truth, out: Path, verbose: int, extra: dict) -> dict:
    pipeline = LanePipeline(pipe_cfg)
    dumper = _graph_dumper(out, verbose)
    hook = None if dumper is None else (lambda k, res: dumper(k, res, pipeline))
    result = run_pipeline(frames, pipeline, truth, on_frame=hook)
    if dumper is not None:
        (out / "graph_final.txt").write_text(dump_graph(pipeline.graph))
    (out / "config.json").write_text(json.dumps({"pipeline": flatten(pipe_cfg), **extra}, indent=2) + "\n")
    paths = write_report(out, result, {k: v for k, v in extra.items() if k != "scenario_config"})
    rt = result.runtime.summary()
    log.info("processed %d frames, median %.1f ms per frame", len(result.snapshots), rt.get("median_ms", 0.0))
    if result.table is not None:
        t = result.table.summary().get("table", {})
        log.info("ego RMSE by distance: %s", t.get("ego"))
    for name, p in paths.items():
        log.info("wrote %s: %s", name, p)
    return paths


def cmd_run(args) -> int:
    pipe_o, scen_o = _split_overrides(args.overrides)
    scenario = _scenario(args, scen_o)
    pipe_cfg = _pipeline_config(pipe_o)
    out = _out_dir(args)
    log.info("scenario %s, seed %d, %.1f s", scenario.name, scenario.seed, scenario.duration)
    truth, frames = generate(scenario)
    frames = _truncate(frames, args.frames)
    if args.log:
        write_frame_log(out / "frames.jsonl", frames, scenario.name)
        save_truth(out / "frames.truth.npz", truth)
    extra = {"scenario": scenario.name, "seed": scenario.seed, "scenario_config": scenario_to_dict(scenario)}
    _evaluate(frames, pipe_cfg, truth, out, args.verbose, extra)
    return EXIT_OK


def cmd_replay(args) -> int:
    pipe_o, scen_o = _split_overrides(args.overrides)
    if scen_o:
        raise UsageError("scenario overrides do not apply to replay")
    pipe_cfg = _pipeline_config(pipe_o)
    log_path = Path(args.log_path)
    if not log_path.is_file():
        raise FileNotFoundError(f"frame log not found: {log_path}")
    truth_path = Path(args.truth) if args.truth else truth_path_for(log_path)
    truth = None
    if truth_path.is_file():
        truth = load_truth(truth_path)
    elif args.truth:
        raise FileNotFoundError(f"truth file not found: {truth_path}")
    else:
        print(f"notice: no ground truth at {truth_path}; deviation report skipped", file=sys.stderr)
    out = _out_dir(args)
    frames = list(_truncate(iter_frame_log(log_path), args.frames))
    _evaluate(frames, pipe_cfg, truth, out, args.verbose, {"log": log_path.name})
    return EXIT_OK


def cmd_dump_graph(args) -> int:
    pipe_o, scen_o = _split_overrides(args.overrides)
    scenario = _scenario(args, scen_o)
    pipe_cfg = _pipeline_config(pipe_o)
    _, frames = generate(scenario)
    pipeline = LanePipeline(pipe_cfg)
    for f in _truncate(frames, args.frames or DUMP_FRAMES):
        pipeline.process(f)
    text = dump_graph(pipeline.graph)
    if args.out:
        out = _out_dir(args)
        (out / "graph.txt").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_print_defaults(args) -> int:
    doc = {"pipeline": flatten(PipelineConfig()), "scenario": scenario_to_dict(ScenarioConfig())}
    if args.format == "json":
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        sys.stdout.write(yaml.safe_dump(doc, sort_keys=False))
    return EXIT_OK


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "replay": cmd_replay,
    "dump-graph": cmd_dump_graph,
    "print-config-defaults": cmd_print_defaults,
    "list-scenarios": cmd_list,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lanefusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ScenarioError) as exc:
        print(f"lanefusion: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LogSchemaError as exc:
        print(f"lanefusion: frame log error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"lanefusion: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
