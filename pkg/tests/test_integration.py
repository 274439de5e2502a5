"""End-to-end runs of the orchestrator across stage boundaries and the CLI."""

from __future__ import annotations

import io
import json
import socket
import subprocess

import numpy as np
import pytest
from PIL import Image

from conftest import CAMERA, SERVO, free_port, make_orchestrator, octopus_cmd, pump
from octopus.agentport import StubAgent
from octopus.client import McpClient, McpError, probe_health
from octopus.deploy import DeploymentRecord
from octopus.platform import HardwareInventory
from octopus.plan import validate_plan
from octopus.simbus import SimBus
from octopus.toolgen import load_manifest, manifest_from_dict

EXPECTED_TOOLS = 18
LANE_ROW_JOINT_1 = 5


def connect(orch) -> McpClient:
    c = McpClient(orch.deployer.endpoint.url, timeout_s=10)
    c.initialize()
    return c


def marker_centroid_x(png: bytes, row: int) -> float:
    """Mean column of saturated pixels in a 3-row band, computed from the decoded image."""
    img = np.asarray(Image.open(io.BytesIO(png)).convert("L"), dtype=np.int32)
    band = img[row - 1 : row + 2]
    cols = [x for y in range(band.shape[0]) for x in range(band.shape[1]) if band[y, x] == 255]
    return sum(cols) / len(cols)


def image_of(result: dict) -> bytes:
    import base64

    (block,) = [b for b in result["content"] if b["type"] == "image"]
    return base64.b64decode(block["data"])


# -- failure triggers shared with the acceptance suite ------------------------


def trigger_missing_dependency(orch) -> str:
    orch.bus.inject_fault("remove_dependency", "cam_backend")
    assert connect(orch).call_tool("capture_image")["isError"]
    return "capture_image"


def trigger_device_lost(orch) -> str:
    orch.bus.inject_fault("unplug", SERVO)
    assert connect(orch).call_tool("set_servo_angle", {"joint": 1, "angle": 10})["isError"]
    orch.bus.inject_fault("replug", SERVO)
    return "set_servo_angle"


def trigger_manifest_corrupt(orch) -> str:
    orch.bus.inject_fault("corrupt_manifest", str(orch.manifest_path))
    return "ping_servo_bus"


TRIAD = {
    "missing_dependency": (trigger_missing_dependency, "reinstall_dependency", {}),
    "device_lost": (trigger_device_lost, "reprobe_and_regenerate", {"joint": 1, "angle": 10}),
    "manifest_corrupt": (trigger_manifest_corrupt, "rewrite_manifest_from_specs", {}),
}


def run_triad_case(orch, daemon, failure_class):
    """Trigger, heal, then hold the daemon through the quiet window while using the tool."""
    trigger, action_kind, args = TRIAD[failure_class]
    tool = trigger(orch)
    action = pump(daemon)
    assert action is not None and action.outcome == "healed", action
    assert daemon.diagnoses[-1].failure_class == failure_class
    assert action.kind == action_kind
    settled = len(daemon.history), len(daemon.diagnoses)
    start = daemon.clock.now()
    while daemon.clock.now() - start < daemon.quiet_window_s:
        assert connect(orch).call_tool(tool, args)["isError"] is False
        daemon.step()
        daemon.clock.sleep(0.5)
    assert (len(daemon.history), len(daemon.diagnoses)) == settled and daemon.mode == "watching"
    return action


# -- stage boundaries ---------------------------------------------------------


def test_default_rig_bootstraps_every_stage(deployed):
    report = json.loads(deployed.report_path.read_text())
    assert report["ok"] and all(s["status"] == "ok" for s in report["stages"].values())
    assert report["tool_count"] == EXPECTED_TOOLS == len(connect(deployed).list_tools())


def test_probe_to_identify_boundary(deployed):
    inv = HardwareInventory.load(deployed.inventory_path)
    assert [r.stable_key for r in inv.devices] == sorted([SERVO, CAMERA, "usb:1a2b:4e5f:0"])
    identified = json.loads(deployed.identified_path.read_text())
    assert [d["record"]["stable_key"] for d in identified] == [r.stable_key for r in inv.devices]


def test_identify_to_interface_boundary(deployed):
    inv = HardwareInventory.load(deployed.inventory_path).by_key()
    m = load_manifest(deployed.manifest_path)
    assert all(s.device_key in inv for s, _ in m.tools)
    assert len({s.name for s, _ in m.tools}) == len(m.tools)


def test_serve_boundary_plans_validate(deployed):
    m = load_manifest(deployed.manifest_path)
    assert all(validate_plan(p, s) == [] and p.tool_name == s.name for s, p in m.tools)


def test_deploy_boundary_provenance_chain(deployed):
    rec = DeploymentRecord.load(deployed.deployer.record_path)
    m = load_manifest(deployed.manifest_path)
    assert rec.manifest_hash == m.manifest_hash == manifest_from_dict(json.loads(deployed.manifest_path.read_bytes())).compute_hash()
    assert probe_health(rec.url)["manifest_hash"] == rec.manifest_hash


def test_every_prompt_traces_to_a_loaded_spec(tmp_path, bus, specs):
    agent = StubAgent()
    orch = make_orchestrator(tmp_path / "s", bus, specs, agent=agent)
    try:
        assert orch.up().ok
    finally:
        orch.deployer.stop()
    assert agent.calls
    assert {c.prompt.spec_hash for c in agent.calls} <= set(specs.hashes().values())


def test_rerun_serves_the_same_tools(deployed):
    first = load_manifest(deployed.manifest_path)
    report = deployed.up()
    second = load_manifest(deployed.manifest_path)
    assert report.ok and second.tool_names == first.tool_names
    assert second.provenance.inventory_hash == first.provenance.inventory_hash
    # the manifest hash covers its creation time, so the server is relaunched on the new file
    assert DeploymentRecord.load(deployed.deployer.record_path).manifest_hash == second.manifest_hash


def test_cap_five(tmp_path, bus, specs):
    orch = make_orchestrator(tmp_path / "s", bus, specs, cap=5)
    try:
        report = orch.up()
        assert report.ok and report.tool_count == 5 == len(connect(orch).list_tools())
    finally:
        orch.deployer.stop()


def test_empty_rig_serves_no_tools(tmp_path, specs):
    orch = make_orchestrator(tmp_path / "s", SimBus(), specs)
    try:
        report = orch.up()
        assert report.ok and report.tool_count == 0 and connect(orch).list_tools() == []
    finally:
        orch.deployer.stop()


def test_deploy_failure_keeps_a_partial_report(tmp_path, bus, specs):
    bus.inject_fault("remove_dependency", "cam_backend")
    orch = make_orchestrator(tmp_path / "s", bus, specs)
    report = orch.up()
    assert not report.ok and report.failed_stage == "deploy"
    assert [report.stages[s].status for s in ("probe", "identify", "interface", "serve")] == ["ok"] * 4
    assert "cam_backend" in report.stages["deploy"].error
    assert json.loads(orch.report_path.read_text())["stages"]["deploy"]["status"] == "failed"


def test_skip_deps_deploys_anyway(tmp_path, bus, specs):
    bus.inject_fault("remove_dependency", "cam_backend")
    orch = make_orchestrator(tmp_path / "s", bus, specs, skip_deps=True)
    try:
        assert orch.up().ok
        assert connect(orch).call_tool("capture_image")["isError"]
    finally:
        orch.deployer.stop()


# -- CLI exit codes -----------------------------------------------------------


@pytest.fixture(scope="module")
def cli_state(tmp_path_factory):
    state = tmp_path_factory.mktemp("int") / "state"
    res = subprocess.run(octopus_cmd("up", "--simulate", "--agent", "stub", "--state-dir", str(state), "--port", str(free_port())),
                         capture_output=True, text=True, timeout=120)
    yield state, res
    subprocess.run(octopus_cmd("down", "--state-dir", str(state)), capture_output=True, timeout=60)


def test_cli_exit_0(cli_state):
    state, res = cli_state
    assert res.returncode == 0, res.stderr
    status = subprocess.run(octopus_cmd("status", "--state-dir", str(state), "--json"), capture_output=True, text=True, timeout=60)
    snap = json.loads(status.stdout)
    assert snap["deployment"]["health"] == "healthy" and snap["report"]["tool_count"] == EXPECTED_TOOLS


def test_cli_exit_1_names_the_tool(cli_state):
    state, _ = cli_state
    res = subprocess.run(octopus_cmd("call", "--state-dir", str(state), "unknown_tool"), capture_output=True, text=True, timeout=60)
    assert res.returncode == 1 and "unknown_tool" in res.stderr


def test_cli_exit_2_before_probe(tmp_path):
    state = tmp_path / "s"
    res = subprocess.run(octopus_cmd("up", "--simulate", "--state-dir", str(state), "--specs-dir", str(tmp_path / "missing")),
                         capture_output=True, text=True, timeout=60)
    assert res.returncode == 2 and not (state / "inventory.json").exists()


def test_cli_exit_3(tmp_path):
    res = subprocess.run(octopus_cmd("call", "--url", f"http://127.0.0.1:{free_port()}", "ping_servo_bus"),
                         capture_output=True, text=True, timeout=60)
    assert res.returncode == 3


# -- criteria, end to end -----------------------------------------------------


def test_mcp_round_trip_and_errors(deployed):
    url = deployed.deployer.endpoint.url
    raw = McpClient(url)
    assert raw.request("tools/list")["error"]["code"] == -32002
    status, body = raw.post_raw(b"{not json")
    assert body["error"]["code"] == -32700
    c = connect(deployed)
    with pytest.raises(McpError) as err:
        c.call_tool("teleport", {})
    assert err.value.code == -32602
    assert c.call_tool("ping_servo_bus")["isError"] is False


def test_closed_loop_visual_motor(deployed):
    c = connect(deployed)
    before = image_of(c.call_tool("capture_image"))
    assert c.call_tool("read_servo_angle", {"joint": 1})["content"][0]["text"] == "0"
    c.call_tool("set_servo_angle", {"joint": 1, "angle": 45})
    after = image_of(c.call_tool("capture_image"))
    assert before != after
    # 45 deg on a 24 px per 180 deg lane is a 6 px shift
    shift = marker_centroid_x(after, LANE_ROW_JOINT_1) - marker_centroid_x(before, LANE_ROW_JOINT_1)
    assert abs(shift - 6.0) <= 1.0
    assert float(c.call_tool("read_servo_angle", {"joint": 1})["content"][0]["text"]) == 45.0


@pytest.mark.parametrize("failure_class", list(TRIAD))
def test_triad_heals(deployed, daemon_factory, failure_class):
    names_before = load_manifest(deployed.manifest_path).tool_names
    daemon = daemon_factory(deployed)
    action = run_triad_case(deployed, daemon, failure_class)
    assert action.duration_s <= 10.0
    health = probe_health(deployed.deployer.endpoint.url)
    assert health["status"] == "ok" and health["manifest_hash"] == load_manifest(deployed.manifest_path).manifest_hash
    assert load_manifest(deployed.manifest_path).tool_names == names_before


def test_replayed_host_listings(tmp_path, specs):
    """Non-simulated probe against recorded enumerator output."""
    from octopus.platform import PlatformDescriptor

    text = SimBus.default().snapshot_listing()
    plat = PlatformDescriptor("linux", "x86_64", frozenset({"usb_list"}))
    orch = make_orchestrator(tmp_path / "s", SimBus.default(), specs, simulate=False, platform=plat, replay={"usb_list": text})
    try:
        report = orch.up()
        assert report.ok and report.tool_count == EXPECTED_TOOLS
    finally:
        orch.deployer.stop()


def test_port_conflict_is_a_deploy_failure(tmp_path, bus, specs):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        from octopus.pipeline import Orchestrator

        orch = Orchestrator(tmp_path / "s", specs, bus, StubAgent(), port=s.getsockname()[1])
        report = orch.up()
    assert report.failed_stage == "deploy" and "PortInUse" in report.stages["deploy"].error
