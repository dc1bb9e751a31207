"""Client-server split for the teleop console.

The control plane is HTTP/JSON: session mode, simulator lifecycle,
episode recording and summaries, review tasks for active relabeling, and
discrete-rate teleop commands. The data plane is binary frames (the
netproto codec) over UDP, with an identical WebSocket mirror for browsers
at /ws/dataplane. Incoming client frames carry tracked anchors and
keyvectors; they drive the retargeting solver and the alignment gate, and
the reply carries the solved joints, wrist pose, scene state, and gate
flag for visualization.

All session mutations are serialized through one lock; transport loops
and HTTP handlers may run on any thread.
"""

from __future__ import annotations

import enum
import json
import socket
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .kinematics import Pose, default_hand, rot6d_encode
from .netproto import DataPlaneFrame, Direction, StreamIngestor, decode_frame, encode_frame
from .retarget import (
    AlignmentGate,
    GateState,
    HumanObservation,
    RetargetConfig,
    RetargetFrame,
    SolverDiverged,
    solve_frame,
)
from .simenv import ACTION_DIM, Difficulty, Task, TaskSpec, evaluate_episode, make_env, state_dim
from .store import LABEL_CORRECTED, LABEL_NONE, EpisodeRecord, EpisodeStore


class SessionMode(enum.Enum):
    TELEOP = "teleop"
    INTERVENTION = "intervention"
    ACTIVE_LABEL = "active_label"


class TeleopSession:
    """Server-side state: simulator, retarget stream, recorder, reviews."""

    def __init__(self, run_dir, chain=None, retarget_cfg: RetargetConfig | None = None):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.store = EpisodeStore(self.run_dir / "episodes")
        self.reviews_dir = self.run_dir / "reviews"
        self.reviews_dir.mkdir(exist_ok=True)

        self.lock = threading.RLock()
        self.mode = SessionMode.TELEOP
        self.recording = False
        self.sim_paused = False
        self.chain = chain or default_hand()
        self.retarget_cfg = retarget_cfg or RetargetConfig()
        self.gate = AlignmentGate(self.retarget_cfg)
        self.prev_frame = RetargetFrame(
            q=self.chain.clamp(np.zeros(self.chain.num_joints)),
            wrist_pose=Pose.identity())
        self.ingestor = StreamIngestor()

        self.env = None
        self.spec: TaskSpec | None = None
        self._episode_rows: list[dict] | None = None
        self._episode_header: dict | None = None
        self._out_frame_id = 0
        self._correction: dict | None = None  # parent episode + peak for takeover
        self._correction_pending_id: str | None = None

    # ------------------------------------------------------------------
    # control plane operations
    # ------------------------------------------------------------------

    def set_mode(self, mode: str) -> dict:
        with self.lock:
            self.mode = SessionMode(mode)
            return self.status()

    def status(self) -> dict:
        with self.lock:
            return {
                "mode": self.mode.value,
                "recording": self.recording,
                "sim_paused": self.sim_paused,
                "gate": self.gate.state.value,
                "active_episode": self._episode_header["episode"]
                if self._episode_header else None,
                "task": self.spec.task.value if self.spec else None,
            }

    def sim_reset(self, task: str, difficulty: str = "default", seed: int = 0) -> dict:
        with self.lock:
            self.spec = TaskSpec(Task(task), Difficulty(difficulty))
            self.env = make_env(self.spec)
            self.env.reset(seed)
            self._correction = None
            if self.recording:
                self._abort_recording()
            return {"state": self.env.state.as_vector().tolist(),
                    "step_budget": self.spec.step_budget}

    def sim_pause(self) -> dict:
        with self.lock:
            self.sim_paused = True
            return self.status()

    def sim_resume(self) -> dict:
        with self.lock:
            self.sim_paused = False
            return self.status()

    def _abort_recording(self) -> None:
        self.recording = False
        self._episode_rows = None
        self._episode_header = None

    def record_start(self) -> dict:
        with self.lock:
            if self.env is None:
                raise HTTPException(409, "no simulation loaded; POST /sim/reset first")
            if self.recording:
                raise HTTPException(409, "already recording")
            self._begin_recording()
            return self.status()

    def _begin_recording(self) -> None:
        with self.lock:
            header = {
                "task": self.spec.task.value,
                "difficulty": self.spec.difficulty.value,
                "seed": self.env.state.rng_stream,
                "mode": "corrective" if self._correction else "teleop_demo",
                "round": 0,
                "created_us": time.time_ns() // 1000,
                "episode": f"live-{time.time_ns()}",
            }
            if self._correction:
                header["parent_episode"] = self._correction["parent_episode"]
                header["peak_t"] = self._correction["peak_t"]
            self._episode_header = header
            self._episode_rows = []
            self.recording = True

    def record_stop(self) -> dict:
        with self.lock:
            if not self.recording:
                raise HTTPException(409, "not recording")
            rows = self._episode_rows
            header = dict(self._episode_header)
            self._abort_recording()
            if not rows:
                return {"episode_id": None, "steps": 0}
            header.pop("episode", None)
            record = EpisodeRecord(
                header=header,
                observations=np.array([r["obs"] for r in rows]),
                actions=np.array([r["action"] for r in rows]),
                chunk_ids=np.full(len(rows), -1.0),
                mode_flags=np.full(len(rows), float(list(SessionMode).index(self.mode))),
                gate_states=np.array([r["gate"] for r in rows]),
                label_states=np.array([r["label"] for r in rows]),
                states=np.array([r["state"] for r in rows]),
            )
            episode_id = self.store.append(record)
            outcome = evaluate_episode(Task(header["task"]), record.states)
            if self._correction_pending_id:
                self._finish_review(self._correction_pending_id, episode_id)
            return {
                "episode_id": episode_id,
                "steps": record.steps,
                "task_success": outcome.task_success,
                "subtask_success": outcome.subtask_success,
            }

    def teleop_command(self, action) -> dict:
        with self.lock:
            if self.env is None:
                raise HTTPException(409, "no simulation loaded")
            if self.sim_paused:
                raise HTTPException(409, "simulation paused")
            if self.mode is SessionMode.TELEOP and self._correction:
                raise HTTPException(409, "switch to intervention/active_label to correct")
            action = np.asarray(action, dtype=float).reshape(-1)
            if action.shape != (ACTION_DIM,):
                raise HTTPException(422, f"action must have {ACTION_DIM} entries")
            obs_before = self.env.observe()
            self.env.step(action)
            done = self.env.done
            if self.recording and self.gate.recording:
                self._episode_rows.append({
                    "obs": obs_before,
                    "action": action,
                    "gate": 0.0,
                    "label": LABEL_CORRECTED if self._correction else LABEL_NONE,
                    "state": self.env.state.as_vector(),
                })
            return {
                "state": self.env.state.as_vector().tolist(),
                "step_index": self.env.state.step_index,
                "done": bool(done),
                "success": bool(self.env.success()),
                "gate": self.gate.state.value,
            }

    def episodes(self) -> list[dict]:
        out = []
        for eid in self.store.ids():
            record = self.store.load(eid)
            outcome = evaluate_episode(Task(record.header["task"]), record.states)
            out.append({
                "episode_id": eid,
                "task": record.header["task"],
                "difficulty": record.header["difficulty"],
                "mode": record.header["mode"],
                "steps": record.steps,
                "task_success": outcome.task_success,
                "subtask_success": outcome.subtask_success,
            })
        return out

    def episode(self, episode_id: str) -> dict:
        try:
            record = self.store.load(episode_id)
        except FileNotFoundError:
            raise HTTPException(404, f"unknown episode {episode_id}") from None
        summary = {
            "episode_id": episode_id,
            "header": record.header,
            "states": record.states.tolist(),
        }
        if record.trace is not None:
            summary["trace"] = record.trace.tolist()
        return summary

    # -- review tasks ---------------------------------------------------

    def post_review(self, task: dict) -> None:
        """Queue a review task (used by the supervision loop's human path)."""
        with self.lock:
            path = self.reviews_dir / f"{task['episode_id']}.json"
            path.write_text(json.dumps({"task": task, "decision": None,
                                        "corrective_episode": None}))

    def review_pending(self) -> list[dict]:
        with self.lock:
            pending = []
            for path in sorted(self.reviews_dir.glob("*.json")):
                entry = json.loads(path.read_text())
                if entry["decision"] is None:
                    pending.append(entry["task"])
            return pending

    def review_select(self, episode_id: str, segment_rank: int) -> dict:
        with self.lock:
            path = self.reviews_dir / f"{episode_id}.json"
            if not path.exists():
                raise HTTPException(404, f"no review task for {episode_id}")
            entry = json.loads(path.read_text())
            if entry["decision"] is not None:
                raise HTTPException(409, "review already decided")
            task = entry["task"]
            segment = next((s for s in task["segments"] if s["rank"] == segment_rank), None)
            if segment is None:
                raise HTTPException(422, f"no segment with rank {segment_rank}")
            entry["decision"] = segment_rank
            path.write_text(json.dumps(entry))

            # arm the correction: restore the simulator at the selected peak
            self.spec = TaskSpec(Task(task["task"]), Difficulty(task["difficulty"]))
            self.env = make_env(self.spec)
            self.env.restore_vector(np.asarray(task["states"][segment["peak_t"]]))
            self._correction = {"parent_episode": episode_id,
                                "peak_t": segment["peak_t"]}
            self._correction_pending_id = episode_id
            if self.recording:
                self._abort_recording()
            self._begin_recording()  # review-first: correction recording is armed
            return {"episode_id": episode_id, "segment_rank": segment_rank,
                    "resume_step": self.env.state.step_index}

    def _finish_review(self, review_id: str, corrective_episode_id: str) -> None:
        path = self.reviews_dir / f"{review_id}.json"
        if path.exists():
            entry = json.loads(path.read_text())
            entry["corrective_episode"] = corrective_episode_id
            path.write_text(json.dumps(entry))
        self._correction = None
        self._correction_pending_id = None

    def training_status(self) -> dict:
        status_path = self.run_dir / "training_status.json"
        if status_path.exists():
            return json.loads(status_path.read_text())
        return {"round": 0, "dataset_samples": 0, "loss_curve": [],
                "state": "idle"}

    # ------------------------------------------------------------------
    # data plane
    # ------------------------------------------------------------------

    def handle_client_datagram(self, data: bytes) -> bytes | None:
        """Retarget a tracked-pose frame and build the reply frame."""
        frame = self.ingestor.push_datagram(data)
        if frame is None or frame.direction is not Direction.CLIENT_TO_SERVER:
            return None
        with self.lock:
            n_anchor = len(self.chain.anchors)
            n_kv = len(self.chain.keyvector_pairs)
            expected = 3 * (n_anchor + n_kv)
            if frame.payload.shape[0] != expected:
                self.ingestor.decode_errors += 1
                return None
            payload = frame.payload.astype(float)
            anchors = payload[:3 * n_anchor].reshape(n_anchor, 3)
            keyvectors = payload[3 * n_anchor:].reshape(n_kv, 3)
            obs = HumanObservation(keyvectors, anchors,
                                   timestamp=frame.timestamp_us / 1e6)
            try:
                solved = solve_frame(self.chain, self.prev_frame, obs, self.retarget_cfg)
            except SolverDiverged:
                self.ingestor.decode_errors += 1
                return None
            self.prev_frame = solved
            self.gate.update(solved.alignment_error)

            a, b = rot6d_encode(solved.wrist_pose.rotation)
            scene = (self.env.state.as_vector()
                     if self.env is not None else np.zeros(0))
            reply_payload = np.concatenate([
                [1.0 if self.gate.state is GateState.PAUSED else 0.0],
                solved.q,
                solved.wrist_pose.translation, a, b,
                scene,
            ])
            self._out_frame_id += 1
            reply = DataPlaneFrame(Direction.SERVER_TO_CLIENT, self._out_frame_id,
                                   time.time_ns() // 1000, reply_payload)
            return encode_frame(reply)


# ---------------------------------------------------------------------------
# HTTP app
# ---------------------------------------------------------------------------

def build_app(session: TeleopSession) -> FastAPI:
    app = FastAPI(title="dexloop control plane")

    @app.post("/session/mode")
    def session_mode(body: dict):
        try:
            return session.set_mode(body["mode"])
        except (KeyError, ValueError):
            raise HTTPException(422, "body must be {'mode': teleop|intervention|active_label}")

    @app.post("/sim/reset")
    def sim_reset(body: dict):
        try:
            return session.sim_reset(body["task"], body.get("difficulty", "default"),
                                     int(body.get("seed", 0)))
        except (KeyError, ValueError):
            raise HTTPException(422, "body must be {'task', 'difficulty', 'seed'}")

    @app.post("/sim/pause")
    def sim_pause():
        return session.sim_pause()

    @app.post("/sim/resume")
    def sim_resume():
        return session.sim_resume()

    @app.post("/record/start")
    def record_start():
        return session.record_start()

    @app.post("/record/stop")
    def record_stop():
        return session.record_stop()

    @app.get("/episodes")
    def episodes():
        return session.episodes()

    @app.get("/episodes/{episode_id}")
    def episode(episode_id: str):
        return session.episode(episode_id)

    @app.get("/review/pending")
    def review_pending():
        return session.review_pending()

    @app.post("/review/{episode_id}/select")
    def review_select(episode_id: str, body: dict):
        try:
            rank = int(body["segment_rank"])
        except (KeyError, TypeError, ValueError):
            raise HTTPException(422, "body must be {'segment_rank': int}")
        return session.review_select(episode_id, rank)

    @app.post("/teleop/command")
    def teleop_command(body: dict):
        try:
            action = body["action"]
        except KeyError:
            raise HTTPException(422, "body must be {'action': [4 floats]}")
        return session.teleop_command(action)

    @app.get("/training/status")
    def training_status():
        return session.training_status()

    @app.websocket("/ws/dataplane")
    async def ws_dataplane(ws: WebSocket):
        await ws.accept()
        try:
            while True:
                data = await ws.receive_bytes()
                reply = session.handle_client_datagram(data)
                if reply is not None:
                    await ws.send_bytes(reply)
        except WebSocketDisconnect:
            pass

    return app


# ---------------------------------------------------------------------------
# UDP transport
# ---------------------------------------------------------------------------

class UdpDataPlane:
    """One receive loop feeding the session; replies go to the sender."""

    def __init__(self, session: TeleopSession, host: str = "127.0.0.1", port: int = 8742):
        self.session = session
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self.port = self.sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self) -> "UdpDataPlane":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            reply = self.session.handle_client_datagram(data)
            if reply is not None:
                self.sock.sendto(reply, addr)

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)
        self.sock.close()


def serve(run_dir, http_port: int = 8741, udp_port: int = 8742,
          host: str = "127.0.0.1") -> None:
    """Run control and data planes until interrupted."""
    import uvicorn

    session = TeleopSession(run_dir)
    udp = UdpDataPlane(session, host, udp_port).start()
    try:
        uvicorn.run(build_app(session), host=host, port=http_port, log_level="warning")
    finally:
        udp.stop()
