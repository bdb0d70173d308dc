"""Command-line entry points: coordinator, server, bench, sim, check.

Every subcommand prints JSON to stdout. Exit codes: 0 ok, 1 a violation was
found, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys

from .harness.history import History, check_serializable
from .harness.metrics import latency_cdf
from .harness.search import SCENARIOS, interleaving_search
from .harness.workload import TPCC_SCHEMAS, ClusterParams, micro, mixed, run_workload, tpcc_lite
from .server import ServerOptions

OK, VIOLATION, CONFIG_ERROR = 0, 1, 2

WORKLOADS = ("mixed", "micro", "tpcc-lite")


class ConfigError(Exception):
    pass


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _servers_arg(text):
    """'0=host:port,1=host:port' -> {0: 'host:port', 1: 'host:port'}."""
    out = {}
    for part in filter(None, text.split(",")):
        sid, sep, addr = part.partition("=")
        if not sep or not sid.strip().isdigit():
            raise argparse.ArgumentTypeError(f"bad server entry {part!r}; expected id=host:port")
        out[int(sid)] = addr.strip()
    if not out:
        raise argparse.ArgumentTypeError("empty server list")
    return out


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of option defaults; flags on the command line win")
    p.add_argument("--coordinator", default="127.0.0.1:7000", help="coordinator host:port")
    p.add_argument("--seed", type=int)
    p.add_argument("--fault-tolerance", "-f", type=int, default=1, dest="fault_tolerance")
    p.add_argument("--data-dir")
    p.add_argument("--txns", type=int, default=200)
    p.add_argument("--workload", choices=WORKLOADS, default="mixed")
    p.add_argument("--txn-size", type=int, default=8)
    p.add_argument("--write-fraction", type=float, default=1.0)
    p.add_argument("--partitions", type=int, default=None, help="partitions per schema")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--log-level", default="WARNING")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainkv", description="Chain-committed transactional key-value store.")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    p = parser.commands["coordinator"] = sub.add_parser("coordinator", help="serve the partition mapping")
    _shared(p)
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--servers", type=_servers_arg, required=True, help="initial members as id=host:port,...")
    p.add_argument("--run-for", type=float, help="exit after this many seconds")

    p = parser.commands["server"] = sub.add_parser("server", help="run one storage server")
    _shared(p)
    p.add_argument("--id", type=int, required=True, dest="server_id")
    p.add_argument("--listen", required=True)
    p.add_argument("--run-for", type=float, help="exit after this many seconds")

    p = parser.commands["bench"] = sub.add_parser("bench", help="drive a workload against a live cluster")
    _shared(p)
    p.add_argument("--cdf-points", type=int, default=20)

    p = parser.commands["sim"] = sub.add_parser("sim", help="run a workload or an interleaving search in the simulator")
    _shared(p)
    p.add_argument("--servers", type=int, default=6, dest="n_servers")
    p.add_argument("--protocol", choices=("acyclic", "minitxn"), default="acyclic")
    p.add_argument("--service-us", type=int, default=0)
    p.add_argument("--search", choices=sorted(SCENARIOS))
    p.add_argument("--bound", type=int, help="stop the search after this many schedules")
    p.add_argument("--no-order-check", action="store_true")
    p.add_argument("--history-out", help="also write the history JSON here")

    p = parser.commands["check"] = sub.add_parser("check", help="check a recorded history for serializability")
    _shared(p)
    p.add_argument("history", help="history JSON file, or - for stdin")
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                defaults = json.load(fh)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        if not isinstance(defaults, dict):
            raise ConfigError("config file must hold a JSON object")
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        # re-parse with the file as defaults so explicit flags still win
        sub = parser.commands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.fault_tolerance < 0:
        raise ConfigError("--fault-tolerance must be non-negative")
    if args.command == "sim" and args.seed is None:
        raise ConfigError("sim needs --seed so that runs are reproducible")
    return args


def _spec(args, partitions):
    seed = args.seed or 0
    if args.workload == "micro":
        return micro(args.txn_size, args.write_fraction, seed, args.txns, args.clients, partitions)
    if args.workload == "tpcc-lite":
        return tpcc_lite(seed, duration=args.txns, clients=args.clients, partitions=partitions)
    spec = mixed(seed, args.txns, write_fraction=args.write_fraction, clients=args.clients)
    spec.partitions = partitions
    return spec


def _default_partitions(args):
    if args.partitions is not None:
        return args.partitions
    return 8 if args.workload == "tpcc-lite" else 64


def _schemas(args):
    return TPCC_SCHEMAS if args.workload == "tpcc-lite" else ("default",)


def cmd_sim(args) -> int:
    if args.search:
        sc = SCENARIOS[args.search](f=args.fault_tolerance)
        if args.no_order_check:
            sc.options = ServerOptions(order_check=False)
        res = interleaving_search(sc, bound=args.bound, keep_going=True)
        if res:
            _emit({"scenario": sc.name, "ok": True, "schedules": res.schedules, "states": res.states,
                   "exhaustive": res.exhaustive, "all_committed_schedules": res.committed_all})
            return OK
        _emit({"scenario": sc.name, "ok": False, "reason": res.reason, "cycle": res.cycle,
               "failing_schedules": res.found, "trace": [list(link) for link in res.trace]})
        return VIOLATION
    parts = _default_partitions(args)
    spec = _spec(args, parts)
    params = ClusterParams(servers=args.n_servers, f=args.fault_tolerance, seed=args.seed,
                           service_us=args.service_us, protocol=args.protocol,
                           options=ServerOptions(order_check=not args.no_order_check))
    hist, m, cluster = run_workload(spec, params)
    verdict = check_serializable(hist)
    problems = cluster.check_invariants()
    text = hist.to_json()
    if args.history_out:
        with open(args.history_out, "w") as fh:
            fh.write(text)
    out = {"metrics": m.summary(), "history": json.loads(text), "serializable": bool(verdict),
           "invariant_violations": problems}
    if not verdict:
        out["cycle"] = [f"{t:032x}" for t in verdict.txns]
    _emit(out)
    return OK if verdict and not problems else VIOLATION


def cmd_check(args) -> int:
    try:
        text = sys.stdin.read() if args.history == "-" else open(args.history).read()
        hist = History.from_json(text)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load history: {e}") from e
    verdict = check_serializable(hist)
    if verdict:
        _emit({"serializable": True, "transactions": len(hist)})
        return OK
    _emit({"serializable": False, "cycle": [f"{t:032x}" for t in verdict.txns]})
    return VIOLATION


async def _until_stopped(run_for):
    if run_for is None:
        await asyncio.Event().wait()
    else:
        await asyncio.sleep(run_for)


async def _coordinator(args):
    from .harness.live import start_coordinator

    def announce(cfg):
        _emit({"event": "config", "version": cfg.version, "live": list(cfg.live_servers)})

    net, node = await start_coordinator(args.listen, args.servers, args.fault_tolerance,
                                        _default_partitions(args), _schemas(args), announce)
    announce(node.coordinator.current)
    try:
        await _until_stopped(args.run_for)
    finally:
        await net.close()


async def _server(args):
    from .harness.live import start_server
    proc = await start_server(args.server_id, args.listen, args.coordinator, args.data_dir)
    _emit({"event": "serving", "server": args.server_id, "address": proc.net.address,
           "config_version": proc.server.config.version})
    try:
        await _until_stopped(args.run_for)
    finally:
        await proc.close()


async def _bench(args):
    from .harness.live import run_bench
    spec = _spec(args, _default_partitions(args))
    m = await run_bench(spec, args.coordinator)
    clean = sorted(set(m.clean_hops))
    _emit({"metrics": m.summary(), "clean_hops_per_txn": clean,
           "latency_cdf": latency_cdf(m.latency_us, args.cdf_points),
           "commit_latency_cdf": latency_cdf(m.commit_latency_us, args.cdf_points)})


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as e:
        print(f"chainkv: {e}", file=sys.stderr)
        return CONFIG_ERROR
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "sim":
            return cmd_sim(args)
        if args.command == "check":
            return cmd_check(args)
        runner = {"coordinator": _coordinator, "server": _server, "bench": _bench}[args.command]
        asyncio.run(runner(args))
        return OK
    except ConfigError as e:
        print(f"chainkv: {e}", file=sys.stderr)
        return CONFIG_ERROR
    except (ValueError, OSError, TimeoutError, asyncio.TimeoutError, RuntimeError) as e:
        print(f"chainkv: {e}", file=sys.stderr)
        return CONFIG_ERROR
    except KeyboardInterrupt:
        return OK


if __name__ == "__main__":
    sys.exit(main())
