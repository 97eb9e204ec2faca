"""Command line entry point: ``optsel run|bench|ablate``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a runtime failure.
``OPTSEL_OUTPUT_DIR`` overrides the output directory and ``OPTSEL_THREADS``
caps BLAS threads (and is the default worker count).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _threads() -> int | None:
    raw = os.environ.get("OPTSEL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"OPTSEL_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optsel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run every strategy x seed in a config")
    run.add_argument("config")
    run.add_argument("-o", "--output")
    run.add_argument("-j", "--workers", type=int)

    ab = sub.add_parser("ablate", help="run the ablation variants and write a comparison table")
    ab.add_argument("config")
    ab.add_argument("-o", "--output")
    ab.add_argument("-j", "--workers", type=int)

    b = sub.add_parser("bench", help="time the scoring kernels against the cost model")
    b.add_argument("--grid", help='points "L,T,B_tr,B_val,d1,d2" separated by ";"')
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output", help="CSV path (default: stdout)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = _threads()

    from .errors import ConfigError
    from .harness import bench, config as cfgmod, runner

    try:
        if args.cmd == "bench":
            grid = bench.parse_grid(args.grid) if args.grid else None
            res = bench.bench_kernels(grid, seed=args.seed)
            if args.output:
                Path(args.output).write_text(res.csv())
            else:
                sys.stdout.write(res.csv())
            print(json.dumps({"spearman": res.spearman, "exponents": res.exponents}), file=sys.stderr)
            return EXIT_OK

        cfg = cfgmod.load(args.config)
        workers = args.workers or threads or 1
        if args.cmd == "run":
            doc = runner.write_outputs(cfg, *runner.run_sweep(cfg, workers=workers),
                                       runner.output_dir(cfg, args.output))
            print(json.dumps({"order": doc["order"], "complete": doc["complete"]}))
            return EXIT_OK if doc["complete"] else EXIT_RUNTIME
        rows = runner.ablation_suite(cfg, args.output, workers)
        sys.stdout.write(runner.ablation_markdown(rows))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
