import json
import socket
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from dexloop.kinematics import Pose, default_hand, rot6d_encode, so3_exp
from dexloop.netproto import (
    HEADER_SIZE,
    MAX_COUNT,
    BadMagic,
    CountMismatch,
    DataPlaneFrame,
    Direction,
    StreamIngestor,
    TruncatedFrame,
    decode_frame,
    encode_frame,
)
from dexloop.retarget import GateState
from dexloop.server import TeleopSession, UdpDataPlane, build_app
from dexloop.simenv import Task, TaskSpec, expert_action, make_env
from dexloop.uncertainty import UncertaintyTrace, select_segments


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------

def test_empty_payload_is_23_bytes():
    frame = DataPlaneFrame(Direction.CLIENT_TO_SERVER, 1, 2, np.zeros(0))
    wire = encode_frame(frame)
    assert len(wire) == 23 == HEADER_SIZE
    assert decode_frame(wire) == frame


@settings(max_examples=200, deadline=None)
@given(
    direction=st.sampled_from([Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT]),
    frame_id=st.integers(min_value=0, max_value=2**64 - 1),
    timestamp=st.integers(min_value=0, max_value=2**64 - 1),
    payload=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32),
                     max_size=MAX_COUNT),
)
def test_codec_roundtrip_property(direction, frame_id, timestamp, payload):
    frame = DataPlaneFrame(direction, frame_id, timestamp, np.array(payload, dtype="<f4"))
    assert decode_frame(encode_frame(frame)) == frame


def test_corrupted_magic_rejected_and_counted():
    frame = DataPlaneFrame(Direction.CLIENT_TO_SERVER, 5, 6, np.ones(3))
    wire = bytearray(encode_frame(frame))
    wire[0] = ord(b"X")
    with pytest.raises(BadMagic):
        decode_frame(bytes(wire))
    ingestor = StreamIngestor()
    assert ingestor.push_datagram(bytes(wire)) is None
    assert ingestor.decode_errors == 1


def test_truncated_and_trailing_bytes_rejected():
    wire = encode_frame(DataPlaneFrame(Direction.CLIENT_TO_SERVER, 1, 1, np.ones(4)))
    with pytest.raises(TruncatedFrame):
        decode_frame(wire[:10])
    with pytest.raises(TruncatedFrame):
        decode_frame(wire[:-4])
    with pytest.raises(CountMismatch):
        decode_frame(wire + b"\x00\x00\x00\x00")


def test_payload_size_limit():
    with pytest.raises(CountMismatch):
        DataPlaneFrame(Direction.CLIENT_TO_SERVER, 1, 1, np.zeros(MAX_COUNT + 1))


# ---------------------------------------------------------------------------
# ingest ordering
# ---------------------------------------------------------------------------

def frame_with_id(i):
    return DataPlaneFrame(Direction.CLIENT_TO_SERVER, i, i * 10, np.zeros(2))


def test_in_order_delivery():
    ingestor = StreamIngestor()
    delivered = [ingestor.push(frame_with_id(i)) for i in range(1, 11)]
    assert all(f is not None for f in delivered)
    assert ingestor.delivered == 10 and ingestor.stale_drops == 0


def test_reordered_frame_dropped():
    ingestor = StreamIngestor()
    out = [ingestor.push(frame_with_id(i)) for i in (1, 3, 2, 4)]
    assert [f.frame_id for f in out if f is not None] == [1, 3, 4]
    assert ingestor.stale_drops == 1


def test_duplicate_frame_dropped():
    ingestor = StreamIngestor()
    ingestor.push(frame_with_id(7))
    assert ingestor.push(frame_with_id(7)) is None
    assert ingestor.stale_drops == 1


def test_loopback_soak_with_loss_and_reorder():
    # 10k frames over real localhost UDP, 5% loss and 5% adjacent swaps
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.setblocking(False)
    rx.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
    addr = rx.getsockname()
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    rng = np.random.default_rng(0)
    wire = [encode_frame(DataPlaneFrame(Direction.CLIENT_TO_SERVER, i, i,
                                        rng.normal(size=4).astype("<f4")))
            for i in range(1, 10_001)]
    kept = [w for w in wire if rng.random() >= 0.05]  # 5% loss
    i = 0
    while i + 1 < len(kept):  # 5% reorder via adjacent swap
        if rng.random() < 0.05:
            kept[i], kept[i + 1] = kept[i + 1], kept[i]
            i += 2
        else:
            i += 1

    ingestor = StreamIngestor()
    delivered_ids = []

    def drain():
        while True:
            try:
                data = rx.recv(2048)
            except BlockingIOError:
                return
            frame = ingestor.push_datagram(data)
            if frame is not None:
                delivered_ids.append(frame.frame_id)

    for start in range(0, len(kept), 64):
        for w in kept[start:start + 64]:
            tx.sendto(w, addr)
        time.sleep(0.001)
        drain()
    time.sleep(0.05)
    drain()
    rx.close()
    tx.close()

    assert len(delivered_ids) > 8000
    assert all(b > a for a, b in zip(delivered_ids, delivered_ids[1:]))
    assert len(set(delivered_ids)) == len(delivered_ids)


# ---------------------------------------------------------------------------
# control plane e2e
# ---------------------------------------------------------------------------

@pytest.fixture()
def client(tmp_path):
    session = TeleopSession(tmp_path / "run")
    return TestClient(build_app(session)), session


def drive_to_completion(client, session, max_steps=200):
    for _ in range(max_steps):
        action = expert_action(session.env)
        reply = client.post("/teleop/command", json={"action": action.tolist()}).json()
        if reply["done"]:
            return reply
    raise AssertionError("episode did not finish")


def test_record_teleop_episode_end_to_end(client):
    http, session = client
    assert http.post("/sim/reset", json={"task": "pan", "seed": 3}).status_code == 200
    assert http.post("/record/start").json()["recording"]
    reply = drive_to_completion(http, session)
    assert reply["success"]
    stop = http.post("/record/stop").json()
    assert stop["task_success"] and stop["steps"] > 0
    episodes = http.get("/episodes").json()
    assert len(episodes) == 1 and episodes[0]["mode"] == "teleop_demo"
    detail = http.get(f"/episodes/{episodes[0]['episode_id']}").json()
    assert len(detail["states"]) == stop["steps"]


def test_mode_and_sim_lifecycle(client):
    http, _ = client
    assert http.post("/session/mode", json={"mode": "intervention"}).json()["mode"] == "intervention"
    assert http.post("/session/mode", json={"mode": "nope"}).status_code == 422
    http.post("/sim/reset", json={"task": "valve", "seed": 1})
    assert http.post("/sim/pause").json()["sim_paused"]
    assert http.post("/teleop/command", json={"action": [0, 0, 0, 0]}).status_code == 409
    assert not http.post("/sim/resume").json()["sim_paused"]
    assert http.post("/teleop/command", json={"action": [0, 0, 0, 0]}).status_code == 200


def test_review_select_and_corrective_takeover(client):
    http, session = client
    # build a failed rollout on the server, then queue it for review
    http.post("/sim/reset", json={"task": "pan", "seed": 5})
    http.post("/record/start")
    done = False
    while not done:
        done = http.post("/teleop/command",
                         json={"action": [0.0, 0.1, 0.0, -1.0]}).json()["done"]
    stop = http.post("/record/stop").json()
    assert not stop["task_success"]
    record = session.store.load(stop["episode_id"])

    u = np.zeros(record.steps)
    u[50], u[100], u[140] = 3.0, 2.0, 1.0  # rank-1 peak mid-episode
    trace = UncertaintyTrace(u, stop["episode_id"])
    segments = select_segments(trace, k=3)
    session.post_review({
        "episode_id": stop["episode_id"],
        "task": "pan", "difficulty": "default",
        "segments": [{"rank": s.rank, "peak_t": s.peak_t,
                      "start_t": s.start_t, "end_t": s.end_t} for s in segments],
        "trace": trace.u.tolist(),
        "states": record.states.tolist(),
    })
    pending = http.get("/review/pending").json()
    assert len(pending) == 1 and len(pending[0]["segments"]) == 3

    http.post("/session/mode", json={"mode": "active_label"})
    select = http.post(f"/review/{stop['episode_id']}/select",
                       json={"segment_rank": 1}).json()
    assert select["segment_rank"] == 1
    reply = drive_to_completion(http, session)
    assert reply["success"]
    corr = http.post("/record/stop").json()
    assert corr["task_success"]
    assert http.get("/review/pending").json() == []
    corr_record = session.store.load(corr["episode_id"])
    assert corr_record.header["mode"] == "corrective"
    assert corr_record.header["parent_episode"] == stop["episode_id"]
    # second selection on the same task is rejected
    assert http.post(f"/review/{stop['episode_id']}/select",
                     json={"segment_rank": 2}).status_code == 409


def test_training_status_defaults_and_file(client, tmp_path):
    http, session = client
    assert http.get("/training/status").json()["state"] == "idle"
    (session.run_dir / "training_status.json").write_text(
        json.dumps({"round": 2, "dataset_samples": 100, "loss_curve": [0.5], "state": "done"}))
    assert http.get("/training/status").json()["round"] == 2


# ---------------------------------------------------------------------------
# data plane through the session (WS mirror and gate behavior)
# ---------------------------------------------------------------------------

def observation_payload(session, anchor_shift=0.0):
    """Client payload consistent with the session's current solved state."""
    chain = session.chain
    prev = session.prev_frame
    _, V, A = chain.forward_kinematics(prev.q)
    R, t = prev.wrist_pose.rotation, prev.wrist_pose.translation
    anchors = A @ R.T + t + anchor_shift
    keyvectors = V @ R.T
    return np.concatenate([anchors.ravel(), keyvectors.ravel()]).astype("<f4")


def test_ws_dataplane_mirror_roundtrip(client):
    http, session = client
    with http.websocket_connect("/ws/dataplane") as ws:
        frame = DataPlaneFrame(Direction.CLIENT_TO_SERVER, 1, 1000,
                               observation_payload(session))
        ws.send_bytes(encode_frame(frame))
        reply = decode_frame(ws.receive_bytes())
    assert reply.direction is Direction.SERVER_TO_CLIENT
    assert reply.payload[0] == 0.0  # gate recording
    nq = session.chain.num_joints
    assert np.allclose(reply.payload[1:1 + nq], session.prev_frame.q, atol=1e-5)


def test_gate_pauses_and_resumes_over_dataplane(client):
    # scripted error trace: aligned, jumped far (pause), inside the
    # hysteresis band (still paused), aligned again (resume)
    http, session = client
    tau = session.retarget_cfg.alignment_threshold_tau
    shifts = [0.0, 2.0 * tau, 0.9 * tau, 0.0]
    expected = [GateState.RECORDING, GateState.PAUSED, GateState.PAUSED,
                GateState.RECORDING]
    states = []
    for i, shift in enumerate(shifts):
        payload = observation_payload(session, anchor_shift=shift / np.sqrt(3.0))
        data = encode_frame(DataPlaneFrame(Direction.CLIENT_TO_SERVER, i + 1, i, payload))
        reply = session.handle_client_datagram(data)
        assert reply is not None
        states.append(session.gate.state)
    assert states == expected


def test_udp_dataplane_loop(tmp_path):
    session = TeleopSession(tmp_path / "run")
    plane = UdpDataPlane(session, port=0).start()
    try:
        client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        client.settimeout(2.0)
        payload = observation_payload(session)
        client.sendto(encode_frame(DataPlaneFrame(Direction.CLIENT_TO_SERVER, 1, 0, payload)),
                      ("127.0.0.1", plane.port))
        data, _ = client.recvfrom(2048)
        reply = decode_frame(data)
        assert reply.direction is Direction.SERVER_TO_CLIENT
        client.close()
    finally:
        plane.stop()
