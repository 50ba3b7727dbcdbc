"""Command line entry point: ``spatialsynth <command> [flags]``.

Failures print one JSON object on stderr (``{"error": ..., "message": ...}``)
and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .config import load_config

COMMANDS = ("gen-data", "decompose", "render-motion", "pretrain-vae", "encode", "train", "synthesize",
            "evaluate", "swap", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialsynth", description="Layered character video synthesis pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file (section.key = value)")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--serial", action="store_true", help="single-threaded deterministic mode")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--workflow", choices=pl.WORKFLOWS, help="swap: which code to replace")
    p.add_argument("--target", help="swap: clip whose bundle is edited")
    p.add_argument("--donor", help="swap: clip providing the replacement code")
    p.add_argument("--no-probes", action="store_true", help="evaluate: skip the swap probes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _dispatch(args, cfg, run: Path):
    cmd = args.command
    if cmd == "gen-data":
        entries = pl.gen_data(cfg, run)
        print(f"generated {len(entries)} clips in {run / 'data'}")
    elif cmd == "decompose":
        pl.decompose(cfg, run)
        print(f"decomposed clips into {run / 'decomp'}")
    elif cmd == "render-motion":
        pl.render_motion_stage(cfg, run)
        print(f"rendered motion maps into {run / 'motion'}")
    elif cmd == "pretrain-vae":
        rep = pl.pretrain_vae_stage(cfg, run)
        print(f"vae heldout_psnr {rep['heldout_psnr']:.3f} zero_mean_abs {rep['zero_mean_abs']:.4f} "
              f"passed {rep['passed']}")
    elif cmd == "encode":
        pl.encode_stage(cfg, run)
        print(f"encoded codes into {run / 'codes'}")
    elif cmd == "train":
        print(f"checkpoint {pl.train_stage(cfg, run)}")
    elif cmd == "synthesize":
        pl.synthesize_stage(cfg, run)
        print(f"samples in {run / 'samples'}")
    elif cmd == "evaluate":
        sys.stdout.write(pl.evaluate_stage(cfg, run, probes=not args.no_probes).to_text())
    elif cmd == "swap":
        if not (args.workflow and args.target and args.donor):
            raise pl.PipelineError("swap needs --workflow, --target and --donor")
        res = pl.swap_stage(cfg, run, args.workflow, args.target, args.donor)
        sys.stdout.write("".join(f"{k} {v:.6f}\n" for k, v in sorted(res.stats.items())))
    elif cmd == "run":
        sys.stdout.write(pl.run_all(cfg, run).to_text())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        overrides = dict(kv.split("=", 1) for kv in args.set)
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        cfg = load_config(args.config, overrides)
        cfg.command, cfg.serial, cfg.out = args.command, args.serial, Path(args.out)
        # one BLAS thread keeps float reductions in a fixed order
        with threadpool_limits(1) if args.serial else nullcontext():
            _dispatch(args, cfg, Path(args.out))
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
