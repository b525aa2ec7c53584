"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 a compare-modes check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional

from . import harness
from .netsim.topology import ConfigError
from .scenario import FULL_DIMS, ModelSpec, ScenarioConfig, load_config, preset_path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_COMPARE = 4

DEFAULT_PRESETS = {
    "run": "training",
    "sweep": "inference_sweep",
    "congestion": "congestion_training",
    "compare-modes": "compare_modes",
    "dump-flows": "compare_modes",
    "validate-config": "training",
}


def _resolve(ref: Optional[str], verb: str) -> str:
    if ref is None:
        return preset_path(DEFAULT_PRESETS[verb])
    if os.path.exists(ref):
        return ref
    preset = preset_path(ref)
    if os.path.exists(preset):
        return preset
    raise ConfigError(f"no config file or preset named {ref!r}")


def _apply_overrides(cfg: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.mode is not None:
        kw["mode"] = args.mode
    if args.chaining is not None:
        kw["chaining"] = args.chaining
    if args.paper_dims:
        if len(cfg.chain) != len(FULL_DIMS) - 3:
            raise ConfigError("--paper-dims needs a chain of two NSFs")
        kw["model"] = ModelSpec(FULL_DIMS, cfg.model.layers_per_sub, cfg.model.precision)
    if args.out is not None:
        kw["out"] = args.out
    cfg = cfg.with_(**kw)
    cfg.validate()
    return cfg


def _out_dir(cfg: ScenarioConfig) -> str:
    return cfg.out or os.path.join("out", cfg.name)


def _print(obj) -> None:
    sys.stdout.write(harness.dump_json(obj))


def cmd_run(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg)
    if cfg.mode == "training":
        res = harness.run_training(cfg)
        os.makedirs(out, exist_ok=True)
        for nid, blob in harness.checkpoints(res).items():
            with open(os.path.join(out, f"checkpoint_{nid}.bin"), "wb") as fh:
                fh.write(blob)
    else:
        res = harness.run_scenario(cfg)
    res.write(out, "run")
    _print(res.summary)
    return EXIT_OK


def cmd_sweep(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    res = harness.run_inference_sweep(cfg)
    res.write(_out_dir(cfg))
    _print(res.aggregate)
    return EXIT_OK


def cmd_congestion(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    res = harness.run_congestion_scenario(cfg)
    res.write(_out_dir(cfg))
    _print(res.analysis)
    return EXIT_OK


def cmd_compare(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    res = harness.compare_chaining_modes(cfg)
    res.write(_out_dir(cfg))
    _print(res.report)
    return EXIT_OK if res.ok else EXIT_COMPARE


def cmd_dump_flows(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    cfg = cfg.with_(rounds=args.rounds, epochs=1, duration_ns=None, congestion=None)
    if cfg.chaining != "sfc":
        logging.getLogger(__name__).warning("flow tables are only populated in sfc chaining")
    res = harness.run_scenario(cfg)
    _print(res.scenario.net.flow_tables())
    return EXIT_OK


def cmd_validate(cfg: ScenarioConfig, args: argparse.Namespace) -> int:
    topo = cfg.validate()
    _print({"valid": True, "name": cfg.name, "nodes": len(topo.nodes),
            "links": len(topo.links), "layers": cfg.model.layer_dims()[0]})
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "congestion": cmd_congestion,
    "compare-modes": cmd_compare,
    "dump-flows": cmd_dump_flows,
    "validate-config": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsfchain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="scenario JSON file or preset name "
                                        f"(default: {DEFAULT_PRESETS[verb]})")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--mode", choices=["inference", "training"])
        s.add_argument("--chaining", choices=["sfc", "traditional", "transparent-no-srv6"])
        s.add_argument("--paper-dims", action="store_true",
                       help="use the full-size sub-model dimensions")
        s.add_argument("-v", "--verbose", action="store_true")
        if verb == "dump-flows":
            s.add_argument("--rounds", type=int, default=3)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(_resolve(args.config, args.verb)), args)
        return COMMANDS[args.verb](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.Divergence as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
