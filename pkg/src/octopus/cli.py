"""Command line: ``octopus up|daemon|status|call|down``.

Exit codes: 0 success, 1 stage failure (or an error result from ``call``),
2 configuration error, 3 endpoint unreachable.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from octopus import __version__

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG = 2
EXIT_UNREACHABLE = 3


class ConfigError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--state-dir", default=os.environ.get("OCTOPUS_STATE_DIR", "state"), help="directory for inventory, manifest and records")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8300)


def _pipeline(p: argparse.ArgumentParser) -> None:
    p.add_argument("--simulate", action="store_true", help="use the simulated bus instead of host enumerators")
    p.add_argument("--rig", type=Path, default=None, help="simulated rig description (default: packaged rig)")
    p.add_argument("--specs-dir", type=Path, default=None, help="stage spec directory (default: packaged specs)")
    p.add_argument("--devices-db", type=Path, default=None, help="local device database (default: packaged db)")
    p.add_argument("--cap", type=int, default=30)
    p.add_argument("--confidence-threshold", type=float, default=0.5)
    p.add_argument("--agent", choices=("stub", "remote"), default=None)
    p.add_argument("--agent-script", type=Path, default=None, help="stub agent script (default: packaged script)")
    p.add_argument("--skip-deps", action="store_true", help="launch even if plan dependencies are missing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octopus", description="Turn a hardware bus into a live MCP tool endpoint.")
    parser.add_argument("--version", action="version", version=f"octopus {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    up = sub.add_parser("up", help="run probe, identify, interface, serve and deploy")
    _common(up)
    _pipeline(up)
    up.add_argument("--foreground", action="store_true", help="serve from this process until interrupted")

    d = sub.add_parser("daemon", help="watch, heal and perceive the running deployment")
    _common(d)
    _pipeline(d)
    d.add_argument("--perceive-interval", type=float, default=30.0, help="seconds between perceive cycles (0 disables)")
    d.add_argument("--duration", type=float, default=None, help="exit after this many seconds")

    st = sub.add_parser("status", help="show deployment and daemon state from the state files")
    _common(st)
    st.add_argument("--json", action="store_true")

    c = sub.add_parser("call", help="initialize and call one tool on the endpoint")
    _common(c)
    c.add_argument("tool")
    c.add_argument("arguments", nargs="?", default="{}", help="JSON object of tool arguments")
    c.add_argument("--url", default=None, help="endpoint base URL (default: from deployment.json)")
    c.add_argument("--save-images", type=Path, default=None, help="write image blocks into this directory")

    dn = sub.add_parser("down", help="stop a server started by up")
    _common(dn)

    sv = sub.add_parser("serve", help=argparse.SUPPRESS)
    _common(sv)
    sv.add_argument("--simulate", action="store_true")
    sv.add_argument("--rig", type=Path, default=None)
    return parser


# -- wiring ---------------------------------------------------------------------


def _make_bus(args):
    if args.simulate:
        from octopus.simbus import SimBus, load_rig

        try:
            return SimBus.from_rig(load_rig(args.rig))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load rig {args.rig}: {exc}") from exc
    from octopus.bus import HostBus

    return HostBus()


def _make_orchestrator(args, deployer=None):
    from octopus.agentport import StubAgent, agent_from_env, load_script
    from octopus.identify import DeviceDatabase
    from octopus.pipeline import Orchestrator
    from octopus.specs import IoFailure, SpecSetIncomplete, default_spec_dir, load_spec_set

    specs_dir = args.specs_dir or default_spec_dir()
    try:
        specs = load_spec_set(specs_dir)
    except (SpecSetIncomplete, IoFailure) as exc:
        raise ConfigError(f"spec set at {specs_dir}: {exc}") from exc
    if args.cap < 1:
        raise ConfigError("--cap must be >= 1")
    if not 0.0 <= args.confidence_threshold <= 1.0:
        raise ConfigError("--confidence-threshold must lie in [0, 1]")
    try:
        if (args.agent or os.environ.get("OCTOPUS_AGENT", "stub")) == "stub" and args.agent_script is not None:
            agent = StubAgent(load_script(args.agent_script))
        else:
            agent = agent_from_env(args.agent)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"agent: {exc}") from exc
    try:
        db = DeviceDatabase.load(args.devices_db)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"device database: {exc}") from exc
    return Orchestrator(
        state_dir=Path(args.state_dir),
        specs=specs,
        bus=_make_bus(args),
        agent=agent,
        db=db,
        cap=args.cap,
        threshold=args.confidence_threshold,
        host=args.host,
        port=args.port,
        skip_deps=args.skip_deps,
        simulate=args.simulate,
        deployer=deployer,
    )


def _serve_args(args) -> list[str]:
    out = []
    if args.simulate:
        out.append("--simulate")
    if args.rig is not None:
        out += ["--rig", str(Path(args.rig).resolve())]
    return out


def _deployment_url(state_dir: Path) -> str | None:
    path = Path(state_dir) / "deployment.json"
    if not path.exists():
        return None
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        return f"http://{d['endpoint']['host']}:{d['endpoint']['port']}"
    except (ValueError, KeyError):
        return None


def _wait_for_signal() -> None:
    done = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: done.set())
    done.wait()


# -- commands -------------------------------------------------------------------


def cmd_up(args) -> int:
    from octopus.deploy import ProcessDeployer

    deployer = None
    if not args.foreground:
        deployer = ProcessDeployer(Path(args.state_dir), args.host, args.port, _serve_args(args))
    orch = _make_orchestrator(args, deployer)
    report = orch.up()
    print("octopus up:")
    print(report.render())
    if not report.ok:
        print(f"stage {report.failed_stage} failed", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    if args.foreground:
        print("serving; press Ctrl-C to stop")
        _wait_for_signal()
        orch.deployer.stop()
    return EXIT_OK


def cmd_serve(args) -> int:
    from octopus.events import EventLog
    from octopus.mcpserve import PortInUse, start_server
    from octopus.toolgen import ManifestTampered, load_manifest

    state = Path(args.state_dir)
    try:
        manifest = load_manifest(state / "manifest.json")
    except ManifestTampered as exc:
        print(f"octopus serve: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    bus = _make_bus(args)
    events = EventLog(state / "server.log", logger_name="octopus.server")
    try:
        endpoint = start_server(manifest, bus, args.host, args.port, manifest_path=state / "manifest.json", events=events)
    except PortInUse as exc:
        print(f"octopus serve: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    print(f"serving {len(manifest.tools)} tools at {endpoint.url}/mcp", flush=True)
    _wait_for_signal()
    endpoint.stop()
    if hasattr(bus, "dump_log"):
        bus.dump_log(state / "buslog.jsonl")
    return EXIT_OK


def cmd_down(args) -> int:
    from octopus.deploy import ProcessDeployer

    deployer = ProcessDeployer(Path(args.state_dir), args.host, args.port)
    if not deployer.record_path.exists():
        print("nothing deployed")
        return EXIT_OK
    if json.loads(deployer.record_path.read_text(encoding="utf-8")).get("health") == "down":
        print("already stopped")
        return EXIT_OK
    deployer.stop()
    print("stopped")
    return EXIT_OK


def cmd_status(args) -> int:
    state = Path(args.state_dir)
    snapshot = {}
    for name in ("deployment", "report", "daemon"):
        path = state / f"{name}.json"
        if path.exists():
            try:
                snapshot[name] = json.loads(path.read_text(encoding="utf-8"))
            except ValueError:
                snapshot[name] = {"error": f"{path} is not valid JSON"}
    if "deployment" not in snapshot:
        print(f"no deployment recorded under {state}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    if args.json:
        print(json.dumps(snapshot, indent=2, sort_keys=True))
        return EXIT_OK
    dep = snapshot["deployment"]
    rep = snapshot.get("report") or {}
    print(f"endpoint   http://{dep['endpoint']['host']}:{dep['endpoint']['port']}/mcp")
    print(f"health     {dep.get('health')}")
    print(f"manifest   {dep.get('manifest_hash')}")
    print(f"tools      {rep.get('tool_count', '?')}")
    dmn = snapshot.get("daemon")
    if dmn:
        print(f"daemon     {dmn.get('mode')}  heals {dmn.get('heal_counters')}")
        if dmn.get("last_percept"):
            print(f"percept    {dmn['last_percept']['state_note']}")
    return EXIT_OK


def cmd_call(args) -> int:
    from octopus.client import EndpointUnreachable, McpClient, McpError

    try:
        arguments = json.loads(args.arguments)
    except json.JSONDecodeError as exc:
        print(f"arguments are not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(arguments, dict):
        print("arguments must be a JSON object", file=sys.stderr)
        return EXIT_CONFIG
    url = args.url or _deployment_url(Path(args.state_dir)) or f"http://{args.host}:{args.port}"
    client = McpClient(url, timeout_s=30.0, client_name="octopus-cli")
    try:
        client.initialize()
        result = client.call_tool(args.tool, arguments)
    except EndpointUnreachable as exc:
        print(f"endpoint unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except McpError as exc:
        print(f"error {exc.code}: {exc.message}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    for block in result.get("content", []):
        if block.get("type") == "text":
            print(block["text"])
        elif block.get("type") == "image":
            blob = base64.b64decode(block["data"])
            digest = hashlib.sha256(blob).hexdigest()
            print(f"<{block.get('mimeType')} {len(blob)} bytes sha256={digest}>")
            if args.save_images is not None:
                args.save_images.mkdir(parents=True, exist_ok=True)
                (args.save_images / f"{digest}.png").write_bytes(blob)
    return EXIT_STAGE_FAILURE if result.get("isError") else EXIT_OK


def cmd_daemon(args) -> int:
    from octopus.daemon import Daemon
    from octopus.deploy import ProcessDeployer

    state = Path(args.state_dir)
    url = _deployment_url(state)
    if url is None:
        print(f"no deployment recorded under {state}; run `octopus up` first", file=sys.stderr)
        return EXIT_UNREACHABLE
    from octopus.client import probe_health

    if probe_health(url) is None:
        print(f"endpoint unreachable: {url}", file=sys.stderr)
        return EXIT_UNREACHABLE
    port = int(url.rsplit(":", 1)[1])
    deployer = ProcessDeployer(state, args.host, port, _serve_args(args))
    orch = _make_orchestrator(args, deployer)
    daemon = Daemon(orch, perceive_interval_s=args.perceive_interval or None)
    stopper = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stopper.set())
    if args.duration is not None:
        threading.Timer(args.duration, stopper.set).start()
    print(f"daemon watching {url}", flush=True)
    daemon.run(until=stopper.is_set)
    print(json.dumps(daemon.status(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "up": cmd_up,
    "daemon": cmd_daemon,
    "status": cmd_status,
    "call": cmd_call,
    "down": cmd_down,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
