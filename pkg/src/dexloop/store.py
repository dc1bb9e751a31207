"""Episode persistence and dataset assembly.

One file per episode: a fixed magic and version, a canonical JSON header,
then fixed-width little-endian f32 row blocks (observation, executed
action, commanded chunk id, mode flag, gate state, labeling state, full
simulator state) and an optional uncertainty-trace block. Episode ids are
content hashes of header plus rows, so duplicate writes are idempotent and
a record round-trips bit-exactly. Review decisions live in separate JSON
sidecars; episode files stay immutable.

Training samples are windows over rows: an n_obs_steps observation history
(front-filled at episode start) and a horizon-length action chunk,
zero-padded past the episode tail with a padding mask so late-phase steps
still supervise training.
"""

from __future__ import annotations

import errno
import hashlib
import json
import os
import struct
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .policy import TrainingSet

MAGIC = b"VDGE"
FORMAT_VERSION = 1

LABEL_NONE = 0.0
LABEL_REVIEW_WINDOW = 1.0
LABEL_CORRECTED = 2.0


class InvariantViolation(ValueError):
    """Record fields are inconsistent with each other."""


class StorageFull(OSError):
    """Underlying filesystem has no space left."""


class MissingEpisode(FileNotFoundError):
    """Manifest references an episode that is not in the store."""


@dataclass
class EpisodeRecord:
    """Time-aligned log of one episode; all row blocks are f32."""

    header: dict
    observations: np.ndarray
    actions: np.ndarray
    chunk_ids: np.ndarray
    mode_flags: np.ndarray
    gate_states: np.ndarray
    label_states: np.ndarray
    states: np.ndarray
    trace: np.ndarray | None = None

    def __post_init__(self):
        for name in ("observations", "actions", "states"):
            arr = np.asarray(getattr(self, name), dtype="<f4")
            if arr.ndim != 2:
                raise InvariantViolation(f"{name} must be 2-D")
            setattr(self, name, arr)
        for name in ("chunk_ids", "mode_flags", "gate_states", "label_states"):
            setattr(self, name, np.asarray(getattr(self, name), dtype="<f4").reshape(-1))
        if self.trace is not None:
            self.trace = np.asarray(self.trace, dtype="<f4").reshape(-1)
        n = self.observations.shape[0]
        blocks = [self.actions, self.chunk_ids, self.mode_flags,
                  self.gate_states, self.label_states, self.states]
        if any(b.shape[0] != n for b in blocks):
            raise InvariantViolation("row blocks disagree on step count")
        if self.trace is not None and self.trace.shape[0] != n:
            raise InvariantViolation("uncertainty trace length must equal step count")
        declared = self.header.get("steps")
        if declared is not None and declared != n:
            raise InvariantViolation(
                f"header declares {declared} steps, rows have {n}")
        self.header = dict(self.header)
        self.header["steps"] = n
        self.header["obs_dim"] = self.observations.shape[1]
        self.header["action_dim"] = self.actions.shape[1]
        self.header["state_dim"] = self.states.shape[1]
        self.header["has_trace"] = self.trace is not None
        if self.header.get("mode") == "corrective":
            if not self.header.get("parent_episode") or self.header.get("peak_t") is None:
                raise InvariantViolation(
                    "corrective records must reference a parent episode and peak_t")

    @property
    def steps(self) -> int:
        return self.observations.shape[0]

    def _row_bytes(self) -> bytes:
        cols = np.concatenate([
            self.observations,
            self.actions,
            self.chunk_ids[:, None],
            self.mode_flags[:, None],
            self.gate_states[:, None],
            self.label_states[:, None],
            self.states,
        ], axis=1).astype("<f4")
        return np.ascontiguousarray(cols).tobytes()

    def _header_bytes(self) -> bytes:
        return json.dumps(self.header, sort_keys=True).encode("utf-8")

    def episode_id(self) -> str:
        h = hashlib.sha256()
        h.update(self._header_bytes())
        h.update(self._row_bytes())
        if self.trace is not None:
            h.update(np.ascontiguousarray(self.trace).tobytes())
        return h.hexdigest()[:32]

    def to_bytes(self) -> bytes:
        header = self._header_bytes()
        parts = [MAGIC, struct.pack("<H", FORMAT_VERSION),
                 struct.pack("<I", len(header)), header, b"\n", self._row_bytes()]
        if self.trace is not None:
            parts.append(np.ascontiguousarray(self.trace).tobytes())
        return b"".join(parts)

    @staticmethod
    def from_bytes(raw: bytes) -> "EpisodeRecord":
        if raw[:4] != MAGIC:
            raise InvariantViolation("not an episode file (bad magic)")
        version, = struct.unpack_from("<H", raw, 4)
        if version != FORMAT_VERSION:
            raise InvariantViolation(f"unsupported episode version {version}")
        hlen, = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
        body = raw[10 + hlen + 1:]
        n = header["steps"]
        od, ad, sd = header["obs_dim"], header["action_dim"], header["state_dim"]
        row_width = od + ad + 4 + sd
        rows = np.frombuffer(body[:n * row_width * 4], dtype="<f4").reshape(n, row_width)
        trace = None
        if header.get("has_trace"):
            trace = np.frombuffer(
                body[n * row_width * 4:n * row_width * 4 + n * 4], dtype="<f4")
        return EpisodeRecord(
            header=header,
            observations=rows[:, :od],
            actions=rows[:, od:od + ad],
            chunk_ids=rows[:, od + ad],
            mode_flags=rows[:, od + ad + 1],
            gate_states=rows[:, od + ad + 2],
            label_states=rows[:, od + ad + 3],
            states=rows[:, od + ad + 4:],
            trace=trace,
        )


@dataclass
class ManifestEntry:
    episode_id: str
    start: int
    end: int            # exclusive step range contributing samples
    mode: str
    round_index: int

    @property
    def samples(self) -> int:
        return self.end - self.start


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    normalizer_fingerprint: str = ""

    @property
    def total_samples(self) -> int:
        return sum(e.samples for e in self.entries)

    def add(self, episode_id: str, steps: int, mode: str, round_index: int,
            start: int = 0, end: int | None = None) -> None:
        end = steps if end is None else end
        if not 0 <= start <= end <= steps:
            raise InvariantViolation("sample range outside episode bounds")
        self.entries.append(ManifestEntry(episode_id, start, end, mode, round_index))

    def to_dict(self) -> dict:
        return {
            "normalizer_fingerprint": self.normalizer_fingerprint,
            "total_samples": self.total_samples,
            "entries": [[e.episode_id, e.start, e.end, e.mode, e.round_index]
                        for e in self.entries],
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        m = DatasetManifest(normalizer_fingerprint=d.get("normalizer_fingerprint", ""))
        for eid, start, end, mode, rnd in d["entries"]:
            m.entries.append(ManifestEntry(eid, start, end, mode, rnd))
        if d.get("total_samples") not in (None, m.total_samples):
            raise InvariantViolation("manifest sample count does not match entries")
        return m


class EpisodeStore:
    """Directory of immutable episode files plus a JSON manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, episode_id: str) -> Path:
        return self.root / f"ep_{episode_id}.vdge"

    def append(self, record: EpisodeRecord) -> str:
        episode_id = record.episode_id()
        payload = record.to_bytes()
        path = self._path(episode_id)
        if path.exists():
            if path.read_bytes() != payload:
                # content hash collided with different bytes; do not clobber
                raise InvariantViolation(f"episode id collision at {episode_id}")
            return episode_id
        tmp = path.with_suffix(".tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(payload)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise
        return episode_id

    def load(self, episode_id: str) -> EpisodeRecord:
        path = self._path(episode_id)
        if not path.exists():
            raise MissingEpisode(episode_id)
        return EpisodeRecord.from_bytes(path.read_bytes())

    def ids(self) -> list[str]:
        return sorted(p.stem[3:] for p in self.root.glob("ep_*.vdge"))

    def save_manifest(self, manifest: DatasetManifest, name: str = "manifest.json") -> Path:
        path = self.root / name
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
        os.replace(tmp, path)
        return path

    def load_manifest(self, name: str = "manifest.json") -> DatasetManifest:
        return DatasetManifest.from_dict(json.loads((self.root / name).read_text()))


# ---------------------------------------------------------------------------
# training-sample assembly
# ---------------------------------------------------------------------------

def windows_from_record(record: EpisodeRecord, horizon: int = 16,
                        n_obs_steps: int = 2, start: int = 0,
                        end: int | None = None):
    """One training sample per step in [start, end).

    The observation window repeats the first observation before episode
    start; the action chunk is zero-padded past the tail with a matching
    mask so placement-phase supervision survives windowing.
    """
    obs = record.observations.astype(float)
    acts = record.actions.astype(float)
    n = record.steps
    end = n if end is None else end
    windows, chunks, masks = [], [], []
    for t in range(start, end):
        idx = [max(0, t - (n_obs_steps - 1) + i) for i in range(n_obs_steps)]
        windows.append(obs[idx])
        chunk = np.zeros((horizon, acts.shape[1]))
        mask = np.zeros(horizon)
        avail = min(horizon, n - t)
        chunk[:avail] = acts[t:t + avail]
        mask[:avail] = 1.0
        chunks.append(chunk)
        masks.append(mask)
    return windows, chunks, masks


def load_dataset(store: EpisodeStore, manifest: DatasetManifest,
                 horizon: int = 16, n_obs_steps: int = 2) -> TrainingSet:
    """Deterministic sample assembly in manifest order."""
    from .policy import EmptyDataset

    windows, chunks, masks = [], [], []
    for entry in manifest.entries:
        record = store.load(entry.episode_id)
        w, c, m = windows_from_record(record, horizon, n_obs_steps,
                                      entry.start, entry.end)
        windows.extend(w)
        chunks.extend(c)
        masks.extend(m)
    if not windows:
        raise EmptyDataset("manifest contributes no samples")
    return TrainingSet(np.array(windows), np.array(chunks), np.array(masks))


def export_bundle(run_dir, out_path) -> Path:
    """Pack a whole run directory into one shareable tar archive."""
    run_dir = Path(run_dir)
    out_path = Path(out_path)
    with tarfile.open(out_path, "w") as tar:
        tar.add(run_dir, arcname=run_dir.name)
    return out_path
