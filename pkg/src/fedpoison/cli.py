"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (including an incomplete wire run),
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from fedpoison.config import ExperimentConfig, bundled_configs, load_config
from fedpoison.errors import ConfigError, DataError

log = logging.getLogger("fedpoison")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _setup_logging() -> None:
    level = os.environ.get("FEDPOISON_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "data", None):
        src = "cache" if str(args.data).endswith(".fpds") else "csv"
        cfg = cfg.with_updates(**{"data.path": args.data, "data.source": src})
    return cfg


def cmd_run_sim(args) -> int:
    from fedpoison.orchestrator import run_experiment
    from fedpoison.report import write_outputs

    cfg = _load(args)
    report = run_experiment(cfg, workers=args.workers)
    for p in write_outputs(report, args.out):
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_serve(args) -> int:
    from fedpoison.report import write_outputs
    from fedpoison.transport.server import Server

    cfg = _load(args)
    server = Server(cfg, args.listen)
    host, port = server.address
    log.info("listening on %s:%d for %d clients", host, port, cfg.n_clients)
    report = server.run()
    write_outputs(report, args.out, flip_log=False)
    if not report.complete:
        print(f"experiment incomplete at round {report.incomplete_round}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_client(args) -> int:
    from fedpoison.transport.client import client_loop

    data_path = args.data
    if data_path is None and args.config:
        data_path = load_config(args.config).data.path
    return client_loop(args.connect, args.client_id, data_path=data_path)


def cmd_gen_data(args) -> int:
    from fedpoison.data import make_synthetic, save_cache
    from fedpoison.seeds import derive_seeds

    if args.config:
        cfg = load_config(args.config)
        s = cfg.data.synthetic
        n, d, c, sep, seed = s.n, s.d, s.c, s.separation, derive_seeds(cfg.master_seed).data
    else:
        n, d, c, sep, seed = args.n, args.d, args.c, args.separation, args.seed
    try:
        ds = make_synthetic(n, d, c, sep, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_cache(ds, args.out)
    log.info("wrote %d x %d dataset with %d classes to %s", ds.n, ds.d, ds.c, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    from fedpoison.report import final_round_table, long_format, write_long_csv

    rows = long_format(args.run_dirs)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_long_csv(rows, fh)
        print(final_round_table(rows))
    else:
        write_long_csv(rows, sys.stdout)
        print(final_round_table(rows), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpoison", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = f"config file, or a bundled name: {', '.join(bundled_configs())}"

    s = sub.add_parser("run-sim", help="run an experiment in-process")
    s.add_argument("--config", required=True, help=cfg_help)
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--data", help="override the data source with a CSV or .fpds cache")
    s.add_argument("--workers", type=int, default=1, help="threads for client training")
    s.set_defaults(func=cmd_run_sim)

    s = sub.add_parser("serve", help="coordinate a distributed experiment")
    s.add_argument("--config", required=True, help=cfg_help)
    s.add_argument("--listen", default="127.0.0.1:9099", help="host:port (default %(default)s)")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--data", help="override the data source with a CSV or .fpds cache")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("client", help="join a distributed experiment")
    s.add_argument("--connect", default="127.0.0.1:9099", help="server host:port")
    s.add_argument("--client-id", type=int, required=True)
    s.add_argument("--config", help="local config; only its data.path is used")
    s.add_argument("--data", help="local copy of the dataset (CSV or .fpds cache)")
    s.set_defaults(func=cmd_client)

    s = sub.add_parser("gen-data", help="write a synthetic dataset cache")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", help="take synthetic parameters and seed from this config")
    s.add_argument("--n", type=int, default=7326)
    s.add_argument("--d", type=int, default=76)
    s.add_argument("--c", type=int, default=11)
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("report", help="merge run directories into one long-format CSV")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", help="CSV destination (default stdout)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
