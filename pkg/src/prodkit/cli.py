"""Text client: dataset submission, control, and grid management.

Every command maps to exactly one RPC method (the `commands` subcommand
prints the mapping, which the web UI's parity check consumes). Output is
a human table by default or JSON with --format json.

Exit codes: 0 success, 1 remote fault, 2 usage, 3 authentication.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import shlex
import sys

from prodkit.rpc import RpcClient, RpcFault, TransportError

#: command -> RPC method (parity surface for the web UI)
COMMAND_METHODS = {
    "submit": "submit_dataset",
    "submit --unmonitored": "enqueue_unmonitored",
    "download": "get_steering",
    "status": "job_status",
    "stats": "job_stats",
    "suspend dataset": "control_dataset",
    "suspend job": "control_job",
    "resume dataset": "control_dataset",
    "resume job": "control_job",
    "reset dataset": "control_dataset",
    "reset job": "control_job",
    "site add": "server_admin",
    "site remove": "server_admin",
    "site start": "server_admin",
    "site stop": "server_admin",
    "grow": "server_admin",
}


class Usage(Exception):
    pass


class _SubParser(argparse.ArgumentParser):
    """Subcommand parser that also accepts the shared client flags."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        _common_options(self, suppress=True)


def parse_target(text):
    """'<dataset>' or '<dataset>.<job>[.<task>]'."""
    parts = text.split(".")
    try:
        if len(parts) == 1:
            return (int(parts[0]),)
        if len(parts) == 2:
            return (int(parts[0]), int(parts[1]))
        return (int(parts[0]), int(parts[1]), ".".join(parts[2:]))
    except ValueError:
        raise Usage("target must be <dataset> or <dataset>.<job>[.<task>], got %r" % text)


def _common_options(parser, suppress=False):
    # present on the main parser and every subcommand, so flags work in
    # either position; SUPPRESS keeps subcommand defaults from clobbering
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--server", default=default, help="server URL (env PRODKIT_SERVER)")
    parser.add_argument("--user", default=default, help="username (env PRODKIT_USER)")
    parser.add_argument("--secret", default=default, help="secret (env PRODKIT_SECRET)")
    parser.add_argument("--format", choices=("table", "json"), default=default)
    parser.add_argument("--config", default=default, help="INI file with a [client] section")
    if suppress:
        parser.add_argument("--insecure", action="store_true", default=argparse.SUPPRESS)
    else:
        parser.add_argument("--insecure", action="store_true", help="skip TLS verification")


def build_parser():
    parser = argparse.ArgumentParser(prog="prodkit-client", description="production client")
    _common_options(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_SubParser)

    p = sub.add_parser("submit", help="submit a steering file")
    p.add_argument("steering_file")
    p.add_argument("--unmonitored", action="store_true")

    p = sub.add_parser("download", help="fetch a dataset's steering for editing")
    p.add_argument("dataset_id", type=int)
    p.add_argument("--output", default=None)

    p = sub.add_parser("status", help="dataset or job status")
    p.add_argument("target", nargs="?", default=None)

    p = sub.add_parser("stats", help="aggregated dataset statistics")
    p.add_argument("dataset_id", type=int)

    for action in ("suspend", "resume", "reset"):
        p = sub.add_parser(action, help="%s a dataset or job" % action)
        p.add_argument("target")

    p = sub.add_parser("site", help="grid management")
    p.add_argument("action", choices=("add", "remove", "start", "stop"))
    p.add_argument("args", nargs="*")

    p = sub.add_parser("grow", help="map input files onto an off-line dataset")
    p.add_argument("dataset_id", type=int)
    p.add_argument("manifest", help="JSON file: list of {path,size,run_number,date,md5}")
    p.add_argument("--group-size", type=int, default=1)

    sub.add_parser("commands", help="print the command-to-method map")
    sub.add_parser("shell", help="interactive shell")
    return parser


def load_client_config(path):
    parser = configparser.ConfigParser()
    parser.read([path])
    return dict(parser["client"]) if parser.has_section("client") else {}


class Session:
    def __init__(self, args):
        file_cfg = load_client_config(args.config) if args.config else {}
        self.server = args.server or os.environ.get("PRODKIT_SERVER") or file_cfg.get("server")
        self.user = args.user or os.environ.get("PRODKIT_USER") or file_cfg.get("user")
        self.secret = (
            args.secret if args.secret is not None else os.environ.get("PRODKIT_SECRET", file_cfg.get("secret"))
        )
        self.format = args.format or file_cfg.get("format", "table")
        self.insecure = args.insecure
        self._client = None

    def client(self):
        if self.server is None:
            raise Usage("no server: use --server, PRODKIT_SERVER, or a config file")
        if self._client is None:
            self._client = RpcClient(
                self.server, user=self.user, secret=self.secret, insecure=self.insecure
            )
        return self._client


def _emit(session, payload, table_lines=None):
    if session.format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    elif table_lines is not None:
        for line in table_lines:
            print(line)
    else:
        print(payload)


def _table(rows, columns):
    if not rows:
        return ["(no rows)"]
    widths = [max(len(str(r.get(c, ""))) for r in rows + [{c: c}]) for c in columns]
    header = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(w) for c, w in zip(columns, widths)))
    return lines


def run_command(session: Session, args) -> int:
    client = None if args.command in ("commands",) else session.client()

    if args.command == "commands":
        payload = {
            "commands": COMMAND_METHODS,
            "rpc_methods": sorted(set(COMMAND_METHODS.values())),
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0

    if args.command == "submit":
        with open(args.steering_file, encoding="utf-8") as fh:
            xml = fh.read()
        if args.unmonitored:
            handles = client.call("enqueue_unmonitored", xml)
            _emit(session, {"handles": handles}, ["submitted %d unmonitored job(s)" % len(handles)])
        else:
            dataset_id = client.call("submit_dataset", xml)
            _emit(session, {"dataset_id": dataset_id}, ["dataset %s" % dataset_id])
        return 0

    if args.command == "download":
        xml = client.call("get_steering", args.dataset_id)
        if args.output:
            with open(args.output, "w", encoding="utf-8") as fh:
                fh.write(xml)
            _emit(session, {"written": args.output}, ["wrote %s" % args.output])
        else:
            print(xml, end="")
        return 0

    if args.command == "status":
        if args.target is None:
            rows = client.call("job_status", "general", {})
            flat = [
                dict(r, states=" ".join("%s:%d" % kv for kv in sorted(r["states"].items())))
                for r in rows
            ]
            _emit(session, rows, _table(flat, ["dataset_id", "category", "total_jobs", "states"]))
            return 0
        key = parse_target(args.target)
        if len(key) == 1:
            rows = client.call("job_status", "dataset", {"dataset_id": key[0]})
            _emit(session, rows, _table(rows, ["job_index", "state", "retries", "site", "host", "error"]))
        else:
            rows = client.call("job_status", "job", {"dataset_id": key[0], "job_index": key[1]})
            _emit(session, rows, _table(rows, ["dataset_id", "job_index", "state", "retries", "site", "host", "error"]))
        return 0

    if args.command == "stats":
        doc = client.call("job_stats", args.dataset_id)
        rows = [dict(name=k, **v) for k, v in sorted(doc.items())]
        _emit(session, doc, _table(rows, ["name", "count", "sum", "average", "stddev"]))
        return 0

    if args.command in ("suspend", "resume", "reset"):
        key = parse_target(args.target)
        if len(key) == 1:
            result = client.call("control_dataset", key[0], args.command)
            _emit(session, result, ["%s dataset %d: %s" % (args.command, key[0], result)])
        else:
            task = key[2] if len(key) == 3 else None
            result = client.call("control_job", key[0], key[1], args.command, task)
            _emit(session, {"state": result}, ["%s %s: %s" % (args.command, args.target, result)])
        return 0

    if args.command == "site":
        if args.action in ("add", "remove"):
            if len(args.args) != 2:
                raise Usage("site %s <dataset_id> <site_id>" % args.action)
            result = client.call("server_admin", "site_%s" % args.action, int(args.args[0]), args.args[1])
        else:
            if len(args.args) != 1:
                raise Usage("site %s <site_id>" % args.action)
            result = client.call("server_admin", "site_%s" % args.action, args.args[0])
        _emit(session, {"result": result}, ["site %s: ok" % args.action])
        return 0

    if args.command == "grow":
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
        keys = client.call("server_admin", "grow_dataset", args.dataset_id, manifest, args.group_size)
        _emit(session, {"new_jobs": keys}, ["added %d job(s)" % len(keys)])
        return 0

    raise Usage("no command given (try --help)")


def repl(session: Session, parser) -> int:
    print("prodkit shell; 'exit' leaves, '--help' lists commands")
    while True:
        try:
            line = input("prodkit> ").strip()
        except EOFError:
            print()
            return 0
        if not line:
            continue
        if line in ("exit", "quit"):
            return 0
        try:
            args = parser.parse_args(shlex.split(line))
        except SystemExit:
            continue  # argparse printed usage; stay in the shell
        if args.command in (None, "shell"):
            continue
        try:
            run_command(session, args)
        except (Usage, RpcFault, TransportError, OSError) as exc:
            print("error: %s" % exc, file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    session = Session(args)
    try:
        if args.command == "shell":
            return repl(session, parser)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        return run_command(session, args)
    except Usage as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 2
    except RpcFault as exc:
        print("remote fault: %s" % exc, file=sys.stderr)
        return 3 if exc.code == 401 else 1
    except (TransportError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
