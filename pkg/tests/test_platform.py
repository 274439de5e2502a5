from __future__ import annotations

import stat
import sys

import pytest

from conftest import PKG_FIXTURES
from octopus.events import EventLog
from octopus.platform import (
    COMMANDS,
    HardwareInventory,
    PlatformDescriptor,
    compute_inventory_hash,
    detect_platform,
    diff_inventory,
    merge_inventory,
    parse_gpio_listing,
    parse_profiler_listing,
    parse_usb_listing,
    probe,
    run_enumerators,
)

CORPUS = PKG_FIXTURES / "enumerators"
SIM = PlatformDescriptor("simulated", "x86_64", frozenset({"simulated_bus"}))


def test_usb_line_hand_parse():
    recs = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno")
    assert len(recs) == 1 and recs.skipped == 0
    r = recs[0]
    assert (r.bus, r.vendor_id, r.product_id, r.description) == ("usb", 0x2341, 0x0043, "Arduino Uno")
    assert r.stable_key == "usb:2341:0043:0"


def test_usb_empty():
    recs = parse_usb_listing("")
    assert recs == [] and recs.skipped == 0


def test_usb_garbage_line_counted():
    recs = parse_usb_listing("garbage\nBus 001 Device 002: ID 0403:6001 FTDI")
    assert len(recs) == 1 and recs.skipped == 1
    assert recs[0].vendor_id == 0x0403


def test_usb_malformed_hex_is_skipped():
    recs = parse_usb_listing("Bus 001 Device 002: ID 04g3:6001 FTDI")
    assert recs == [] and recs.skipped == 1


def test_usb_duplicates_get_distinct_indices():
    text = "Bus 001 Device 002: ID 1a2b:3c4d A\nBus 001 Device 003: ID 1a2b:3c4d B\n"
    assert [r.stable_key for r in parse_usb_listing(text)] == ["usb:1a2b:3c4d:0", "usb:1a2b:3c4d:1"]


def test_profiler_block_hand_parse():
    recs = parse_profiler_listing((CORPUS / "macos" / "system_profile.txt").read_text())
    assert [(r.vendor_id, r.product_id) for r in recs] == [(0x2341, 0x0043), (0x0403, 0x6001)]
    assert recs[0].description == "Arduino Uno"
    assert recs[0].serial == "8503631383735151F0A1"
    assert recs[0].stable_key == "usb:2341:0043:8503631383735151F0A1"
    assert "Product ID: 0x0043" in recs[0].source_line


def test_profiler_minimal_block():
    text = "Widget:\n  Product ID: 0x0043\n  Vendor ID: 0x2341\n"
    recs = parse_profiler_listing(text)
    assert len(recs) == 1 and recs[0].vid_pid == "2341:0043"


def test_profiler_empty():
    assert parse_profiler_listing("") == []


def test_gpio_line_hand_parse():
    recs = parse_gpio_listing("gpiochip0 [pinctrl-bcm2711] (58 lines)")
    assert len(recs) == 1
    r = recs[0]
    assert r.bus == "gpio" and r.vendor_id is None and r.product_id is None
    assert r.description == "pinctrl-bcm2711"
    assert r.meta["lines"] == "58"
    assert r.stable_key == "gpio:-:-:gpiochip0"


def test_gpio_empty():
    assert parse_gpio_listing("") == []


@pytest.mark.parametrize("parser", [parse_usb_listing, parse_profiler_listing, parse_gpio_listing])
@pytest.mark.parametrize("blob", [b"\xff\xfe\x00", "\x00\n\n::", "Bus 001 Device", "  Product ID:\n"])
def test_parsers_are_total(parser, blob):
    parser(blob)


@pytest.mark.parametrize(
    "path,parser",
    [
        ("raspberry_pi/usb_list.txt", parse_usb_listing),
        ("raspberry_pi/gpio_detect.txt", parse_gpio_listing),
        ("wsl/usb_list.txt", parse_usb_listing),
    ],
)
def test_round_trip_audit_on_line_formats(path, parser):
    text = (CORPUS / path).read_text()
    recs = parser(text)
    matched = [line for line in text.splitlines() if line.strip()][: len(recs) + recs.skipped]
    assert recs.skipped == 0
    assert sorted(r.source_line for r in recs) == sorted(matched)


def test_round_trip_audit_on_profiler_blocks():
    text = (CORPUS / "macos" / "system_profile.txt").read_text()
    lines = text.splitlines()
    for r in parse_profiler_listing(text):
        block = r.source_line.splitlines()
        start = lines.index(block[0])
        body = [ln for ln in lines[start:] if ln.strip()][: len(block)]
        assert body == block


def test_corpus_counts():
    pi_usb = parse_usb_listing((CORPUS / "raspberry_pi" / "usb_list.txt").read_text())
    pi_gpio = parse_gpio_listing((CORPUS / "raspberry_pi" / "gpio_detect.txt").read_text())
    wsl = parse_usb_listing((CORPUS / "wsl" / "usb_list.txt").read_text())
    assert (len(pi_usb), len(pi_gpio), len(wsl)) == (5, 2, 4)


# -- platform and enumerators -------------------------------------------------


def test_forced_simulate():
    p = detect_platform(simulate=True)
    assert p.os_family == "simulated" and p.available_enumerators == frozenset({"simulated_bus"})


def test_simulated_invariant():
    with pytest.raises(ValueError):
        PlatformDescriptor("simulated", "x86_64", frozenset({"usb_list"}))
    with pytest.raises(ValueError):
        PlatformDescriptor("linux", "x86_64", frozenset({"simulated_bus"}))


@pytest.mark.skipif(not sys.platform.startswith("linux"), reason="linux host detection")
def test_linux_detection_reflects_tool_presence(monkeypatch):
    present = {"lsusb", "gpiodetect"}
    monkeypatch.setattr("octopus.platform.shutil.which", lambda name: f"/usr/bin/{name}" if name in present else None)
    monkeypatch.setattr("octopus.platform._is_wsl", lambda: False)
    p = detect_platform()
    assert p.os_family == "linux"
    assert p.available_enumerators == frozenset({"usb_list", "gpio_detect"})


@pytest.mark.skipif(not sys.platform.startswith("linux"), reason="linux host detection")
def test_host_without_tools_yields_empty_inventory(monkeypatch, tmp_path):
    monkeypatch.setattr("octopus.platform.shutil.which", lambda name: None)
    p = detect_platform()
    assert p.available_enumerators == frozenset()
    inv = probe(p)
    assert inv.devices == () and inv.inventory_hash == compute_inventory_hash([])


def test_simulated_bus_snapshot(bus):
    raw = run_enumerators(SIM, bus=bus)
    assert set(raw) == {"simulated_bus"}
    assert raw["simulated_bus"] == bus.snapshot_listing()


def test_replay_passthrough_runs_nothing(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("replay must not execute commands")

    monkeypatch.setattr("octopus.platform.subprocess.run", boom)
    path = CORPUS / "wsl" / "usb_list.txt"
    linux = PlatformDescriptor("linux", "x86_64", frozenset({"usb_list"}))
    assert run_enumerators(linux, replay={"usb_list": path}) == {"usb_list": path.read_text()}


@pytest.mark.skipif(sys.platform == "win32", reason="needs a posix shell script")
def test_failing_enumerator_degrades(monkeypatch, tmp_path):
    fake = tmp_path / "lsusb"
    fake.write_text("#!/bin/sh\necho nope >&2\nexit 3\n")
    fake.chmod(fake.stat().st_mode | stat.S_IEXEC)
    monkeypatch.setitem(COMMANDS, "usb_list", [str(fake)])
    events = EventLog(tmp_path / "p.log")
    seen = []
    events.subscribe(seen.append)
    linux = PlatformDescriptor("linux", "x86_64", frozenset({"usb_list"}))
    raw = run_enumerators(linux, events=events)
    assert raw == {"usb_list": ""}
    assert any(e.severity == "warn" and "exited 3" in e.text for e in seen)


# -- merge and diff -----------------------------------------------------------


def test_same_device_from_two_parsers_dedups():
    a = parse_usb_listing("Bus 001 Device 004: ID 2341:0043 Arduino Uno")
    b = parse_usb_listing("Bus 003 Device 009: ID 2341:0043 Arduino Uno (again)")
    inv = merge_inventory(SIM, [a, b])
    assert len(inv.devices) == 1
    assert inv.devices[0].source_line.startswith("Bus 001")


def test_empty_merge_is_valid_and_stable():
    a, b = merge_inventory(SIM, []), merge_inventory(SIM, [[]])
    assert a.devices == () and a.inventory_hash == b.inventory_hash


def test_inventory_sorted_and_saved(tmp_path):
    recs = parse_usb_listing((CORPUS / "raspberry_pi" / "usb_list.txt").read_text())
    inv = merge_inventory(SIM, [recs])
    keys = [d.stable_key for d in inv.devices]
    assert keys == sorted(keys)
    inv.save(tmp_path / "inventory.json")
    raw = (tmp_path / "inventory.json").read_bytes()
    assert raw.endswith(b"\n")
    assert HardwareInventory.load(tmp_path / "inventory.json") == inv


def test_tampered_inventory_hash_rejected(tmp_path):
    inv = merge_inventory(SIM, [parse_usb_listing("Bus 001 Device 004: ID 2341:0043 X")])
    d = inv.to_dict()
    d["inventory_hash"] = "0" * 64
    with pytest.raises(ValueError):
        HardwareInventory.from_dict(d)


def test_reprobe_of_unchanged_bus_is_stable(bus):
    a, b = probe(SIM, bus=bus), probe(SIM, bus=bus)
    assert a.inventory_hash == b.inventory_hash
    assert diff_inventory(a, b).empty


def test_unplug_and_replug_diff(bus):
    servo = "usb:1a2b:3c4d:0"
    before = probe(SIM, bus=bus)
    bus.inject_fault("unplug", servo)
    gone = probe(SIM, bus=bus)
    assert diff_inventory(before, gone).removed == (servo,)
    bus.inject_fault("replug", servo)
    back = probe(SIM, bus=bus)
    d = diff_inventory(before, back)
    assert d.changed == (servo,) and not d.added and not d.removed
    assert back.inventory_hash == before.inventory_hash
