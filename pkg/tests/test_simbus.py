from __future__ import annotations

import hashlib
import logging

import pytest

from conftest import CAMERA, GPIO, SERVO
from octopus.bus import DeviceNotFound, StepTimeout
from octopus.simbus import (
    SimBus,
    VirtualCamera,
    VirtualServoController,
    checksum,
    corrupt_file,
    encode_angle,
    encode_png,
    estimate_pose,
    marker_x,
    render,
)


def frame(*body: int) -> bytes:
    return bytes(body) + bytes([checksum(bytes(body))])


def move(bus, joint, angle):
    raw = encode_angle(angle)
    bus.io(SERVO, {"op": "open"})
    bus.io(SERVO, {"op": "write", "data": frame(0xFA, 0xAF, joint, 0x01, raw & 0xFF, raw >> 8)})
    return bus.io(SERVO, {"op": "read", "length": 6, "timeout_ms": 50})


def read_angle(bus, joint):
    bus.io(SERVO, {"op": "write", "data": frame(0xFA, 0xAF, joint, 0x02)})
    reply = bus.io(SERVO, {"op": "read", "length": 6, "timeout_ms": 50})
    return (int.from_bytes(reply[4:6], "little") - 1800) / 10


def test_default_rig_listing_has_three_lines(bus):
    lines = bus.snapshot_listing().splitlines()
    assert len(lines) == 3
    assert lines[0] == "Bus 001 Device 002: ID 1a2b:3c4d Octo Servo Bus Controller (6-axis)"


def test_unplug_removes_one_line(bus):
    bus.inject_fault("unplug", SERVO)
    listing = bus.snapshot_listing()
    assert len(listing.splitlines()) == 2 and "1a2b:3c4d" not in listing


def test_empty_bus_listing():
    assert SimBus().snapshot_listing() == ""


def test_write_45_then_read_45(bus):
    ack = move(bus, 1, 45)
    # hand encoding: 45 * 10 + 1800 = 2250 = 0x08CA
    assert ack == bytes([0xFA, 0xAF, 0x01, 0x00, 0xCA, 0x08])
    assert read_angle(bus, 1) == 45.0


def test_angles_clamp_to_range():
    servo = VirtualServoController(1, 2, "s")
    raw = encode_angle(200)
    servo.write(frame(0xFA, 0xAF, 3, 0x01, raw & 0xFF, raw >> 8))
    assert servo.joints[2] == 180.0


def test_bad_checksum_naks(bus):
    bus.io(SERVO, {"op": "write", "data": bytes([0xFA, 0xAF, 0x01, 0x02, 0x00])})
    assert bus.io(SERVO, {"op": "read", "length": 6, "timeout_ms": 50}) == bytes([0xFA, 0xAF, 0x01, 0xFF, 0, 0])


def test_capture_changes_after_move(bus):
    before = bus.io(CAMERA, {"op": "capture_frame"})
    move(bus, 1, 45)
    after = bus.io(CAMERA, {"op": "capture_frame"})
    assert hashlib.sha256(before).digest() != hashlib.sha256(after).digest()
    assert before[:8] == b"\x89PNG\r\n\x1a\n"


def test_renderer_is_pure():
    joints = [10.0, -20.0, 0.0, 45.0, 90.0, -180.0]
    assert encode_png(render(joints)) == encode_png(render(list(joints)))


def test_pose_estimate_inverts_renderer():
    joints = [0.0, 45.0, -45.0, 90.0, -90.0, 180.0]
    got = estimate_pose(encode_png(render(joints)))
    # marker centres are rounded to whole pixels: 7.5 deg per pixel
    assert all(abs(g - j) <= 180 / 24 / 2 + 1e-9 for g, j in zip(got, joints))


def test_marker_is_monotone():
    xs = [marker_x(a) for a in range(-180, 181, 15)]
    assert xs == sorted(xs) and len(set(xs)) == len(xs)


def test_unplugged_io_raises(bus):
    bus.inject_fault("unplug", SERVO)
    with pytest.raises(DeviceNotFound):
        bus.io(SERVO, {"op": "open"})
    with pytest.raises(DeviceNotFound):
        bus.io("usb:ffff:ffff:0", {"op": "open"})


def test_timeout_mode_times_out_after_the_step_timeout():
    slept = []
    bus = SimBus.default(sleep=slept.append)
    bus.inject_fault("timeout_mode", SERVO)
    bus.io(SERVO, {"op": "write", "data": frame(0xFA, 0xAF, 1, 0x02)})
    with pytest.raises(StepTimeout):
        bus.io(SERVO, {"op": "read", "length": 6, "timeout_ms": 200})
    assert slept == [0.2]
    bus.inject_fault("clear_timeout", SERVO)
    bus.io(SERVO, {"op": "write", "data": frame(0xFA, 0xAF, 1, 0x02)})
    assert len(bus.io(SERVO, {"op": "read", "length": 6, "timeout_ms": 200})) == 6


def test_replug_resets_joints_and_renumbers(bus):
    move(bus, 2, 30)
    line_before = bus.snapshot_listing().splitlines()[0]
    bus.inject_fault("unplug", SERVO)
    bus.inject_fault("replug", SERVO)
    assert read_angle(bus, 2) == 0.0
    assert bus.snapshot_listing().splitlines()[0] != line_before


def test_unknown_key_is_a_warning_not_an_error(bus, caplog):
    with caplog.at_level(logging.WARNING):
        bus.inject_fault("unplug", "usb:dead:beef:0")
    assert bus.warnings and "unknown device key" in bus.warnings[0]
    assert len(bus.snapshot_listing().splitlines()) == 3


def test_corrupt_file_flips_one_bit(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"abcdef")
    corrupt_file(p)
    diff = [a ^ b for a, b in zip(p.read_bytes(), b"abcdef")]
    assert sorted(diff) == [0, 0, 0, 0, 0, 1]


def test_remove_dependency_flag(bus):
    assert bus.dependency_present("cam_backend", "runtime_library")
    bus.inject_fault("remove_dependency", "cam_backend")
    assert not bus.dependency_present("cam_backend", "runtime_library")


def test_step_log_records_each_step(bus):
    bus.io(GPIO, {"op": "open"}, "c1")
    bus.io(GPIO, {"op": "gpio_set", "line": 3, "value": 1}, "c1")
    bus.note(GPIO, "expect", "c1")
    log = [(e.device_key, e.op, e.call_id) for e in bus.step_log]
    assert log == [(GPIO, "open", "c1"), (GPIO, "gpio_set", "c1"), (GPIO, "expect", "c1")]
    assert [e.seq for e in bus.step_log] == [0, 1, 2]


def test_gpio_bank_frames(bus):
    bus.io(GPIO, {"op": "gpio_set", "line": 3, "value": 1})
    bus.io(GPIO, {"op": "write", "data": frame(0x6A, 0x03)})
    assert bus.io(GPIO, {"op": "read", "length": 4, "timeout_ms": 10}) == bytes([0x6A, 0x03, 0x08, 0x00])


def test_camera_registers():
    cam = VirtualCamera(1, 2, "c")
    cam.write(frame(0xCA, 0x01, 0x11, 77))
    cam.write(frame(0xCA, 0x02, 0x11))
    assert cam.read(4) == bytes([0xCA, 0x01, 0x11, 77])
    assert cam.read(4) == bytes([0xCA, 0x02, 0x11, 77])


def test_dump_log(tmp_path, bus):
    bus.io(SERVO, {"op": "open"}, "x")
    bus.dump_log(tmp_path / "buslog.jsonl")
    assert '"op": "open"' in (tmp_path / "buslog.jsonl").read_text()
