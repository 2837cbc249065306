"""``reco`` command line: run, validate, rules, bench, mock.

Option values resolve as: command-line flag, then ``RECO_<OPTION>`` environment
variable, then the JSON ``--config`` file, then the built-in default.
Exit codes: 0 success, 1 domain failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Callable

from .bench import BenchConfigError, BenchReport, BenchSpec, check_scaling, generate_graph, run_bench
from .engine import Engine, GraphInvalid
from .events import EventLog
from .measurements import MeasurementGateway, MockSensorServer
from .model import validate_graph
from .rules import default_registry
from .store import GraphFormatError, load_graph, save_graph

log = logging.getLogger("reco")

DEFAULTS: dict[str, Any] = {
    "graph": "graph.json",
    "tick": 10.0,
    "listen": "127.0.0.1:8765",
    "api": "127.0.0.1:8080",
    "log": "events.ndjson",
    "deadline": None,
    "mock_port": 0,
    "mock_mode": "request",
    "mock_step": 1.0,
    "failure_rate": 0.0,
    "seed": 0,
    "iterations": 100,
    "branching": 3,
    "rules_per_area": 5,
    "factor": 2.5,
}


class Failure(Exception):
    """Domain failure: message goes to stderr, exit status 1."""


def _host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise Failure(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class Settings:
    """Resolves options by precedence: flag > env > config file > default."""

    def __init__(self, args: argparse.Namespace, environ=os.environ):
        self.args = args
        self.environ = environ
        self.file: dict[str, Any] = {}
        cfg = getattr(args, "config", None) or environ.get("RECO_CONFIG")
        if cfg:
            try:
                self.file = json.loads(Path(cfg).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise Failure(f"cannot read config file {cfg}: {exc}") from exc
            if not isinstance(self.file, dict):
                raise Failure(f"config file {cfg} must hold a JSON object")

    def get(self, name: str, convert: Callable[[Any], Any] = lambda x: x) -> Any:
        flag = getattr(self.args, name, None)
        if flag is not None:
            return flag
        env = self.environ.get("RECO_" + name.upper())
        try:
            if env is not None:
                return convert(env)
            if name in self.file:
                return convert(self.file[name])
        except ValueError as exc:
            raise Failure(f"bad value for {name}: {exc}") from exc
        return DEFAULTS.get(name)


def _load_checked(path: str):
    registry = default_registry()
    try:
        graph = load_graph(path, registry.schemas)
    except FileNotFoundError as exc:
        raise Failure(f"{path}: no such file") from exc
    except (GraphFormatError, OSError) as exc:
        raise Failure(str(exc)) from exc
    return registry, graph


# -- validate ----------------------------------------------------------------

def cmd_validate(s: Settings) -> int:
    path = s.get("graph")
    registry, graph = _load_checked(path)
    problems = [f"schema: {v}" for d in graph.diagnostics for v in d.violations]
    problems += [f"graph: {v}" for v in validate_graph(graph)]
    if not problems:
        from .engine import build_tree
        _, discarded = build_tree(graph, registry)
        problems += [f"rule: {r.rule_rid}: {'; '.join(r.detail['reasons'])}" for r in discarded]
    if problems:
        for p in problems:
            print(p)
        print(f"{path}: {len(problems)} problem(s)", file=sys.stderr)
        return 1
    print(f"{path}: ok ({len(graph.vertices)} vertices, {len(graph.rules)} rule records)")
    return 0


# -- run ---------------------------------------------------------------------

def cmd_run(s: Settings) -> int:
    import uvicorn

    from .api import GraphStore, create_app
    from .notify import NotificationHub

    path = s.get("graph")
    tick = s.get("tick", float)
    if tick <= 0:
        raise Failure("--tick must be > 0")
    try:
        events = EventLog(s.get("log"))
    except OSError as exc:
        raise Failure(f"cannot open event log {s.get('log')}: {exc}") from exc

    mock = None
    mock_script = s.get("mock")
    if mock_script:
        mock = MockSensorServer.from_file(mock_script, port=s.get("mock_port", int),
                                          mode=s.get("mock_mode"), step=s.get("mock_step", float)).start()
        log.info("mock sensors on %s", mock.base_url)
    deadline = s.get("deadline", float) or min(tick, 5.0)
    gateway = MeasurementGateway(deadline=deadline, base_url=mock.base_url if mock else None)
    host, port = _host_port(s.get("listen"))
    hub = NotificationHub(host, port)
    engine = Engine(default_registry(), gateway=gateway, notifier=hub, events=events, tick=tick,
                    fetch_deadline=deadline)
    api_server = None
    try:
        try:
            stats = engine.load(path)
        except (GraphInvalid, GraphFormatError, OSError) as exc:
            raise Failure(f"cannot load {path}: {exc}") from exc
        log.info("loaded %d rules (%d discarded) in %.1f ms", stats.rule_count,
                 stats.discarded_count, stats.total_time * 1000)
        hub.start()
        log.info("notifications on %s", hub.url)
        api = s.get("api")
        if api and api != "none":
            ahost, aport = _host_port(api)
            app = create_app(GraphStore(path, engine.registry.schemas), engine, s.get("log"))
            api_server = uvicorn.Server(uvicorn.Config(app, host=ahost, port=aport, log_level="warning"))
            threading.Thread(target=api_server.run, name="api", daemon=True).start()
            log.info("management API on http://%s:%d/v1", ahost, aport)

        stop = threading.Event()

        def on_signal(signum, frame):
            log.info("signal %d: finishing current tick", signum)
            stop.set()

        signal.signal(signal.SIGINT, on_signal)
        signal.signal(signal.SIGTERM, on_signal)
        engine.run(stop, s.get("max_ticks"))
    finally:
        if api_server is not None:
            api_server.should_exit = True
        hub.stop()
        gateway.close()
        events.flush()
        events.close()
        if mock is not None:
            mock.stop()
    return 0


# -- rules -------------------------------------------------------------------

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_rules(s: Settings) -> int:
    from .api import ApiError, GraphStore

    path = s.get("graph")
    registry = default_registry()
    store = GraphStore(path, registry.schemas)
    a = s.args
    try:
        if a.action == "list":
            registry, graph = _load_checked(path)
            from .model import area_path
            for r in graph.rules:
                where = " / ".join(area_path(graph, r.rid)) or "-"
                print(f"{r.rid}\t{r.class_name}\t{r.name}\t{where}")
            for d in graph.diagnostics:
                print(f"{d.rid}\t{d.class_name}\t(excluded: {'; '.join(map(str, d.violations))})")
        elif a.action == "show":
            print(json.dumps(store.get("rules", a.rid), indent=2, ensure_ascii=False))
        elif a.action == "set":
            current = store.get("rules", a.rid)
            body = {k: v for k, v in current.items() if k != "@parent"}
            for item in a.assignments:
                key, sep, value = item.partition("=")
                if not sep:
                    raise Failure(f"expected key=value, got {item!r}")
                body[key] = _parse_value(value)
            print(json.dumps(store.update("rules", a.rid, body), indent=2, ensure_ascii=False))
        elif a.action == "add":
            body = json.loads(Path(a.file).read_text(encoding="utf-8")) if a.file != "-" else json.load(sys.stdin)
            print(json.dumps(store.create("rules", body), indent=2, ensure_ascii=False))
        elif a.action == "delete":
            for rid in store.delete("rules", a.rid, a.cascade):
                print(f"deleted {rid}")
    except ApiError as exc:
        for v in exc.violations or ():
            print(v)
        raise Failure(exc.message) from exc
    return 0


# -- bench -------------------------------------------------------------------

def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {text!r}") from exc


def cmd_bench(s: Settings) -> int:
    a = s.args
    try:
        if a.action == "generate":
            graph = generate_graph(a.rules, s.get("branching", int), s.get("rules_per_area", int),
                                   s.get("seed", int))
            out = a.out or f"bench-{a.rules}-seed{s.get('seed', int)}.json"
            save_graph(graph, out)
            print(f"wrote {out}: {len(graph.rules)} rule records, {len(graph.areas)} areas")
        elif a.action == "run":
            spec = BenchSpec(a.sizes, s.get("iterations", int), s.get("branching", int),
                             s.get("rules_per_area", int), s.get("seed", int))

            def progress(row):
                print(f"size {row.size:>6}: total {row.mean_total_ms:9.3f} ms  "
                      f"inst {row.mean_inst_ms:9.3f} ms", file=sys.stderr)

            report = run_bench(spec, a.workdir, progress=progress)
            text = report.to_csv(long=a.long)
            if a.out:
                Path(a.out).write_text(text, encoding="utf-8")
                print(f"wrote {a.out} ({report.environment})", file=sys.stderr)
            else:
                sys.stdout.write(text)
        elif a.action == "check":
            report = BenchReport.from_csv(Path(a.csv).read_text(encoding="utf-8"))
            factor = s.get("factor", float)
            steps = check_scaling(report, factor)
            for st in steps:
                verdict = "PASS" if st.passed else "FAIL"
                print(f"{verdict} {st.metric} {st.size}->{st.next_size}: ratio {st.ratio:.3f} (limit {factor:g})")
            bad_rows = [r.size for r in report.rows if r.mean_inst_ms > r.mean_total_ms]
            for size in bad_rows:
                print(f"FAIL size {size}: mean instantiation time exceeds mean total time")
            return 0 if all(st.passed for st in steps) and not bad_rows else 1
    except (BenchConfigError, OSError) as exc:
        raise Failure(str(exc)) from exc
    return 0


# -- mock --------------------------------------------------------------------

def cmd_mock(s: Settings) -> int:
    script = s.get("script")
    if not script:
        raise Failure("--script is required")
    try:
        server = MockSensorServer.from_file(
            script, port=s.get("mock_port", int), mode=s.get("mock_mode"),
            step=s.get("mock_step", float), failure_rate=s.get("failure_rate", float),
            seed=s.get("seed", int))
    except (OSError, json.JSONDecodeError) as exc:
        raise Failure(f"cannot start mock server: {exc}") from exc
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    with server:
        print(f"mock sensors on {server.base_url} serving {', '.join(sorted(server.script))}", flush=True)
        stop.wait()
    print(json.dumps(server.counts()))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reco", description="Resource-graph rule engine for energy-saving recommendations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    p.add_argument("--config", help="JSON file with option defaults (env: RECO_CONFIG)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    run = sub.add_parser("run", help="run the engine loop")
    run.add_argument("--graph", help="graph file (env RECO_GRAPH; default graph.json)")
    run.add_argument("--tick", type=float, help="base tick in seconds (default 10)")
    run.add_argument("--listen", help="WebSocket host:port for /notifications (default 127.0.0.1:8765)")
    run.add_argument("--api", help="management API host:port, or 'none' (default 127.0.0.1:8080)")
    run.add_argument("--log", help="NDJSON event log path (default events.ndjson)")
    run.add_argument("--deadline", type=float, help="per-tick fetch deadline in seconds (default min(tick, 5))")
    run.add_argument("--mock", metavar="SCRIPT", help="serve SCRIPT from an in-process mock and fetch from it")
    run.add_argument("--mock-port", dest="mock_port", type=int, help="port for --mock (default: any free port)")
    run.add_argument("--mock-mode", dest="mock_mode", choices=("request", "clock"), help="timeline advance mode")
    run.add_argument("--mock-step", dest="mock_step", type=float, help="seconds per timeline step in clock mode")
    run.add_argument("--max-ticks", dest="max_ticks", type=int, help="stop after this many ticks")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a graph file")
    val.add_argument("--graph", help="graph file")
    val.set_defaults(func=cmd_validate)

    rules = sub.add_parser("rules", help="inspect and edit rules in a graph file")
    rules.add_argument("--graph", help="graph file")
    ra = rules.add_subparsers(dest="action", required=True, metavar="ACTION")
    ra.add_parser("list", help="list rule records")
    show = ra.add_parser("show", help="print one rule record")
    show.add_argument("rid")
    st = ra.add_parser("set", help="change fields: key=value (values parsed as JSON when possible)")
    st.add_argument("rid")
    st.add_argument("assignments", nargs="+", metavar="KEY=VALUE")
    add = ra.add_parser("add", help="add a rule from a JSON document (needs @class and @parent)")
    add.add_argument("file", help="JSON file, or - for stdin")
    dl = ra.add_parser("delete", help="delete a rule")
    dl.add_argument("rid")
    dl.add_argument("--cascade", action="store_true", help="also delete its child rules")
    rules.set_defaults(func=cmd_rules)

    bench = sub.add_parser("bench", help="scaling benchmark")
    ba = bench.add_subparsers(dest="action", required=True, metavar="ACTION")
    gen = ba.add_parser("generate", help="write a random benchmark graph")
    gen.add_argument("--rules", type=int, required=True, help="exact number of rules")
    brun = ba.add_parser("run", help="time load and instantiation over a size ladder")
    brun.add_argument("--sizes", type=_sizes, default=(100, 200, 400, 800, 1600, 3200, 6400, 12800),
                      help="comma-separated rule counts (default 100..12800 doubling)")
    brun.add_argument("--iterations", type=int, help="timed runs per size (default 100)")
    brun.add_argument("--out", help="CSV output path (default stdout)")
    brun.add_argument("--long", action="store_true", help="long format: size,metric,mean_ms,std_ms")
    brun.add_argument("--workdir", help="keep generated graphs here")
    for sp in (gen, brun):
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--branching", type=int, help="child Areas per Area (default 3)")
        sp.add_argument("--rules-per-area", dest="rules_per_area", type=int, help="rules per Area (default 5)")
    gen.add_argument("--out", help="output graph file")
    chk = ba.add_parser("check", help="check that each doubling grows times by at most FACTOR")
    chk.add_argument("--csv", required=True, help="CSV written by bench run")
    chk.add_argument("--factor", type=float, help="allowed growth per doubling (default 2.5)")
    bench.set_defaults(func=cmd_bench)

    mock = sub.add_parser("mock", help="serve scripted sensor measurements")
    mock.add_argument("--script", help="JSON {path: [values...]}")
    mock.add_argument("--mock-port", "--port", dest="mock_port", type=int, help="listen port (default: any)")
    mock.add_argument("--mock-mode", dest="mock_mode", choices=("request", "clock"), help="timeline advance mode")
    mock.add_argument("--mock-step", dest="mock_step", type=float, help="seconds per step in clock mode")
    mock.add_argument("--failure-rate", dest="failure_rate", type=float, help="fraction of requests answered 500")
    mock.add_argument("--seed", type=int, help="seed for injected failures")
    mock.set_defaults(func=cmd_mock)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(Settings(args))
    except Failure as exc:
        print(f"reco: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
