from __future__ import annotations

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conftest import free_port
from octopus.agentport import (
    AgentRequest,
    AgentUnavailable,
    RemoteAgent,
    ScriptEntry,
    StubAgent,
    agent_from_env,
    parse_and_validate,
)
from octopus.identify import (
    KINDS,
    Capability,
    DeviceDatabase,
    IdentifiedDevice,
    ParamHint,
    identify_all,
    identify_with_agent,
    lookup_local,
    ranked_capabilities,
    score_and_cap,
)
from octopus.platform import DeviceRecord, parse_gpio_listing, parse_usb_listing
from octopus.specs import SpecDocument, render_prompt

SERVO_REC = parse_usb_listing("Bus 001 Device 002: ID 1a2b:3c4d Octo Labs 6-axis servo controller")[0]
UNO_REC = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno")[0]
UNKNOWN_REC = parse_usb_listing("Bus 001 Device 009: ID ffff:ffff Mystery")[0]
CHIP_REC = parse_gpio_listing("gpiochip0 [pinctrl-bcm2711] (58 lines)")[0]

UNO_DB = DeviceDatabase.from_dict(
    {
        "version": "t",
        "2341:0043": {
            "name": "Arduino Uno",
            "capabilities": [
                {"verb": "reset_board", "kind": "actuator", "params": []},
                {"verb": "read_serial", "kind": "comm", "params": []},
            ],
        },
    }
)


def prompt(text="x"):
    return render_prompt(SpecDocument("identify", text), {})


# -- agent port ---------------------------------------------------------------


def test_stub_first_matching_entry_wins():
    script = [
        ScriptEntry("caption_percept", "alpha", {"note": "first"}),
        ScriptEntry("caption_percept", "", {"note": "fallback"}),
    ]
    agent = StubAgent(script, handlers={})
    assert agent.call(AgentRequest("caption_percept", prompt("alpha beta"))).parsed == {"note": "first"}
    assert agent.call(AgentRequest("caption_percept", prompt("gamma"))).parsed == {"note": "fallback"}


def test_stub_without_match_reports_it():
    resp = StubAgent([], handlers={}).call(AgentRequest("classify_log", prompt()))
    assert not resp.ok and resp.diagnostics == ["no script match"]


def test_unknown_purpose_rejected():
    with pytest.raises(ValueError):
        AgentRequest("write_poetry", prompt())


def test_fenced_json_accepted():
    value, diags = parse_and_validate('```json\n{"note": "fine"}\n```', "percept_caption")
    assert diags == [] and value == {"note": "fine"}


def test_non_json_rejected_with_schema_note():
    value, diags = parse_and_validate("sure! here you go", "percept_caption")
    assert value is None and diags[0].startswith("schema:")


class _ChatHandler(BaseHTTPRequestHandler):
    replies: list = []
    bodies: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).bodies.append((self.headers.get("Authorization"), body))
        status, payload = type(self).replies.pop(0) if type(self).replies else (200, {})
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


@pytest.fixture
def chat_server():
    handler = type("H", (_ChatHandler,), {"replies": [], "bodies": []})
    srv = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    yield handler, f"http://127.0.0.1:{srv.server_address[1]}/v1/chat"
    srv.shutdown()
    srv.server_close()


def test_remote_agent_round_trip(chat_server):
    handler, url = chat_server
    handler.replies.append((200, {"choices": [{"message": {"content": '{"note": "arm at rest"}'}}]}))
    agent = RemoteAgent(url, key="k", model="m")
    req = AgentRequest("caption_percept", prompt("look"), attachments=(("f.png", "image/png", b"\x89PNG"),))
    resp = agent.call(req)
    assert resp.ok and resp.parsed == {"note": "arm at rest"}
    auth, body = handler.bodies[0]
    assert auth == "Bearer k" and body["model"] == "m"
    assert body["messages"][1]["content"][1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_remote_agent_retries_server_errors(chat_server):
    handler, url = chat_server
    handler.replies += [(503, {}), (200, {"choices": [{"message": {"content": '{"note": "ok"}'}}]})]
    agent = RemoteAgent(url, backoff_s=0.01)
    assert agent.call(AgentRequest("caption_percept", prompt())).parsed == {"note": "ok"}
    assert agent.attempts == 2


def test_remote_agent_unreachable_after_three_tries():
    agent = RemoteAgent(f"http://127.0.0.1:{free_port()}/v1/chat", backoff_s=0.01, timeout_s=2)
    with pytest.raises(AgentUnavailable):
        agent.call(AgentRequest("caption_percept", prompt()))
    assert agent.attempts == 3


def test_agent_from_env():
    assert isinstance(agent_from_env(env={}), StubAgent)
    with pytest.raises(ValueError):
        agent_from_env("remote", env={})
    assert agent_from_env("remote", env={"OCTOPUS_AGENT_URL": "http://127.0.0.1:1/"}).agent_id == "remote:default"


# -- identify -----------------------------------------------------------------


def test_lookup_local_hit():
    dev = lookup_local(UNO_DB, UNO_REC)
    assert [c.verb for c in dev.capabilities] == ["reset_board", "read_serial"]
    assert dev.device_confidence == 0.95
    assert all(c.source == "local_db" for c in dev.capabilities)


def test_lookup_local_misses():
    assert lookup_local(UNO_DB, CHIP_REC) is None
    assert lookup_local(UNO_DB, UNKNOWN_REC) is None


def test_shipped_db_stores_only_the_local_prior():
    db = DeviceDatabase.load()
    assert db.entries
    assert {c.confidence for _, caps in db.entries.values() for c in caps} == {0.95}


def test_stub_identifies_servo_controller(specs):
    dev = identify_with_agent(SERVO_REC, specs["identify"], StubAgent())
    by_verb = {c.verb: c for c in dev.capabilities}
    assert by_verb["set_servo_angle"].confidence == 0.8
    assert by_verb["set_servo_angle"].source == "agent"
    hints = {p.name: p for p in by_verb["set_servo_angle"].param_hints}
    assert (hints["joint"].type, hints["joint"].min, hints["joint"].max) == ("integer", 1, 6)
    assert (hints["angle"].min, hints["angle"].max, hints["angle"].units) == (-180, 180, "deg")
    assert "read_servo_angle" in by_verb


def test_malformed_agent_response_yields_no_capabilities(specs):
    agent = StubAgent([ScriptEntry("identify_device", "", {"capabilities": "lots"})], handlers={})
    dev = identify_with_agent(SERVO_REC, specs["identify"], agent)
    assert dev.capabilities == () and dev.device_confidence == 0
    assert "schema" in dev.identity_note


def test_bad_verb_in_agent_response_is_rejected(specs):
    bad = {"capabilities": [{"verb": "Set-Angle", "kind": "actuator", "params": []}]}
    dev = identify_with_agent(SERVO_REC, specs["identify"], StubAgent([ScriptEntry("identify_device", "", bad)], {}))
    assert dev.capabilities == () and "schema" in dev.identity_note


def test_local_before_agent(specs):
    agent = StubAgent()
    out = identify_all([UNO_REC, SERVO_REC], UNO_DB, specs["identify"], agent)
    assert [d.record.stable_key for d in out] == [UNO_REC.stable_key, SERVO_REC.stable_key]
    assert len(agent.calls) == 1
    assert SERVO_REC.stable_key in agent.calls[0].prompt.text


def test_unavailable_agent_leaves_device_empty(specs):
    class Down:
        agent_id = "down"

        def call(self, request):
            raise AgentUnavailable("offline")

    (dev,) = identify_all([SERVO_REC], UNO_DB, specs["identify"], Down())
    assert dev.capabilities == () and "unavailable" in dev.identity_note


def test_capability_validation():
    with pytest.raises(ValueError):
        Capability("BadVerb", "actuator")
    with pytest.raises(ValueError):
        Capability("ok", "weapon")
    with pytest.raises(ValueError):
        Capability("ok", "sensor", confidence=1.5)


# -- score_and_cap ------------------------------------------------------------


def device(key_suffix: int, caps: list[Capability]) -> IdentifiedDevice:
    rec = DeviceRecord("usb", 0x1111, key_suffix, "d", f"line {key_suffix}")
    return IdentifiedDevice(rec, tuple(caps))


def oracle_order(pairs):
    """Independent comparator: sort by each criterion in turn, least significant first."""
    rank = {k: i for i, k in enumerate(KINDS)}
    out = sorted(pairs, key=lambda p: p[0])  # stable key
    out = sorted(out, key=lambda p: p[1].verb)
    out = sorted(out, key=lambda p: rank[p[1].kind])
    return sorted(out, key=lambda p: p[1].confidence, reverse=True)


def test_forty_candidates_capped_at_thirty():
    caps = [Capability(f"verb_{i:02d}", "sensor", confidence=0.95) for i in range(40)]
    out = score_and_cap([device(1, caps)])
    assert sum(len(d.capabilities) for d in out) == 30


def test_empty_input():
    assert score_and_cap([]) == []


def test_actuator_wins_a_tie_with_sensor():
    cam = device(1, [Capability("capture_image", "sensor", confidence=0.8)])
    arm = device(2, [Capability("set_servo_angle", "actuator", confidence=0.8)])
    ranked = ranked_capabilities(score_and_cap([cam, arm]))
    assert [c.verb for _, c in ranked] == ["set_servo_angle", "capture_image"]


def test_threshold_drops_low_confidence_and_empty_devices():
    a = device(1, [Capability("keep_me", "sensor", confidence=0.5), Capability("drop_me", "sensor", confidence=0.49)])
    b = device(2, [Capability("gone", "meta", confidence=0.1)])
    out = score_and_cap([a, b])
    assert len(out) == 1 and [c.verb for c in out[0].capabilities] == ["keep_me"]


def test_cap_must_be_positive():
    with pytest.raises(ValueError):
        score_and_cap([], cap=0)


def test_random_pools_match_the_oracle():
    rng = random.Random(7)
    for _ in range(50):
        devices = []
        for k in range(rng.randint(1, 6)):
            caps = [
                Capability(f"v{rng.randint(0, 9)}", rng.choice(KINDS), confidence=rng.choice([0.3, 0.5, 0.8, 0.95]))
                for _ in range(rng.randint(0, 8))
            ]
            # verbs are unique per device
            devices.append(device(k, list({c.verb: c for c in caps}.values())))
        cap = rng.randint(1, 12)
        got = [(d.record.stable_key, c.verb) for d, c in ranked_capabilities(score_and_cap(devices, cap))]
        pool = [(d.record.stable_key, c) for d in devices for c in d.capabilities if c.confidence >= 0.5]
        want = [(k, c.verb) for k, c in oracle_order(pool)[:cap]]
        assert got == want


def test_param_hint_round_trip():
    p = ParamHint("angle", "number", "deg", -180, 180)
    assert ParamHint.from_dict(p.to_dict()) == p
