"""``sacc`` command line: synth, fit, sweep, verify, count-ops."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .exceptions import FitDivergedError
from .harness import (
    LOSSES,
    cmd_count_ops,
    cmd_fit,
    cmd_sweep,
    cmd_synth,
    cmd_verify,
    load_config,
    read_manifest,
    trace_rows,
    write_csv,
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", type=Path, default=Path("."),
                        help="directory for CSV outputs (default: current)")
    common.add_argument("--loss", choices=LOSSES, help="override the config loss")

    parser = argparse.ArgumentParser(prog="sacc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write seeded synthetic scenes")
    fit = sub.add_parser("fit", parents=[common], help="fit density maps and report counts")
    fit.add_argument("--scenes", type=Path,
                     help="directory written by 'synth' (default: generate from config)")
    sweep = sub.add_parser("sweep", parents=[common], help="MAE over the alpha/beta1 grid")
    sweep.add_argument("--scenes", type=Path,
                       help="directory written by 'synth' (default: generate from config)")
    sub.add_parser("verify", parents=[common], help="run the oracle checks")
    ops = sub.add_parser("count-ops", parents=[common], help="parameter and MAC counts")
    ops.add_argument("--graph", type=Path, help="layer table (default: bundled network)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed=args.seed, loss=args.loss)
        out = args.out_dir
        if args.command == "synth":
            paths = cmd_synth(config, out)
            print(f"wrote {len(paths)} scenes to {out}")
        elif args.command == "fit":
            scenes = read_manifest(args.scenes) if args.scenes else None
            report = cmd_fit(config, out, scenes)
            print(f"loss={config.loss} scenes={len(report.true_counts)} "
                  f"mae={report.mae:.6g} mse={report.mse:.6g}")
        elif args.command == "sweep":
            scenes = read_manifest(args.scenes) if args.scenes else None
            rows = cmd_sweep(config, out, scenes)
            print(f"wrote {len(rows)} grid points to {out / 'sweep.csv'}")
        elif args.command == "verify":
            return cmd_verify(config, out)
        else:
            result = cmd_count_ops(config, out, args.graph)
            print(f"params={result.params} macs={result.macs}")
    except FitDivergedError as exc:
        write_csv(args.out_dir / "diverged_trace.csv", ("step", "scale", "nll", "reg", "total"),
                  trace_rows(exc.trace))
        print(f"error: {exc} (trace in {args.out_dir / 'diverged_trace.csv'})", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
