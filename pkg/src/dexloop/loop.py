"""Supervision-loop orchestration across the three collection regimes.

Behavioral cloning collects scripted-expert demonstrations through the
full retargeting path (synthetic tracked keypoints are solved frame by
frame before logging, so the teleop pipeline is exercised end to end).
The corrective regime rolls the current policy out, scores failures with
MC dropout, surfaces the top-uncertainty segments to a review source, and
lets the expert take over from the chosen peak. The HIL regime has the
supervisor watch entire failed rollouts and intervene where the policy
diverges from the expert for a sustained dwell.

Attention accounting is in frames (converted to seconds via dt), the
desk-scale proxy for operator wall-clock: demos charge their own length,
corrective review charges the three snippet windows plus the correction,
HIL charges the whole watched rollout plus the correction.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .kinematics import Pose, default_hand, so3_exp
from .policy import TrainConfig, make_policy
from .retarget import GateState, HumanObservation, RetargetConfig, RetargetFrame, solve_frame
from .simenv import (
    ACTION_DIM,
    OBS_DIM,
    Difficulty,
    Task,
    TaskSpec,
    evaluate_episode,
    expert_action,
    make_env,
)
from .store import (
    LABEL_CORRECTED,
    LABEL_NONE,
    LABEL_REVIEW_WINDOW,
    DatasetManifest,
    EpisodeRecord,
    EpisodeStore,
    load_dataset,
)
from .uncertainty import Segment, UncertaintyTrace, mc_dropout_samples, select_segments

MODE_FLAGS = {"demo": 0.0, "rollout": 1.0, "corrective": 2.0, "hil_correction": 3.0}


class NoFailures(RuntimeError):
    """The policy succeeded on every probe rollout; nothing to relabel."""


@dataclass(frozen=True)
class LoopConfig:
    """Knobs for rounds and rollouts; training knobs ride along."""

    initial_demos: int = 50
    corrective_per_round: int = 50
    rounds: int = 2
    retrain_trigger: int = 50
    eval_envs: int = 256
    demo_noise: float = 0.15
    execute_steps: int = 8          # receding horizon: steps executed per replan
    mc_passes: int = 10
    shared_noise: bool = True
    hil_deviation_threshold: float = 0.3
    hil_dwell: int = 5
    review_window_seconds: float = 2.0
    segment_count: int = 3
    backend: str = "bc"
    epochs: int = 300
    hidden: tuple[int, ...] = (256, 256)
    dropout_rate: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 64
    fine_tune: bool = False
    max_rollout_attempts_factor: int = 40

    def __post_init__(self):
        if self.retrain_trigger <= 0:
            raise ValueError("retrain_trigger must be positive")
        if self.execute_steps < 1:
            raise ValueError("execute_steps must be >= 1")


@dataclass
class EffortLedger:
    """Attention-frame bookkeeping for one collection regime."""

    demo_frames: int = 0
    review_frames: int = 0
    watched_frames: int = 0
    correction_frames: int = 0
    samples: int = 0

    @property
    def attention_frames(self) -> int:
        return (self.demo_frames + self.review_frames + self.watched_frames
                + self.correction_frames)

    def per_sample(self) -> float:
        return self.attention_frames / self.samples if self.samples else float("nan")

    def merged(self, other: "EffortLedger") -> "EffortLedger":
        return EffortLedger(
            self.demo_frames + other.demo_frames,
            self.review_frames + other.review_frames,
            self.watched_frames + other.watched_frames,
            self.correction_frames + other.correction_frames,
            self.samples + other.samples)


@dataclass
class RoundReport:
    mode: str
    round_index: int
    task: str
    samples_added: int
    dataset_samples: int
    retrain_events: int
    effort: EffortLedger
    task_sr: dict = field(default_factory=dict)      # difficulty -> rate
    subtask_sr: dict = field(default_factory=dict)
    seconds_per_sample: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


# ---------------------------------------------------------------------------
# demonstration collection through the retarget path
# ---------------------------------------------------------------------------

class SyntheticHandStream:
    """Maps the planar effector trajectory to tracked-hand observations.

    The 'human hand' is the same kinematic chain posed at a grip-dependent
    flexion with the wrist following the planar pose at table height; the
    retargeting solver then has an exactly reachable target every frame,
    so demos exercise the full solve without gating.
    """

    TABLE_Z = 0.15

    def __init__(self, chain=None, cfg: RetargetConfig | None = None):
        self.chain = chain or default_hand()
        self.cfg = cfg or RetargetConfig()
        self.open_q = self.chain.clamp(np.zeros(self.chain.num_joints))
        self.closed_q = self.chain.clamp(np.full(self.chain.num_joints, 1.2))
        self.prev = RetargetFrame(q=self.open_q.copy(), wrist_pose=Pose.identity())

    def observation(self, x: float, y: float, heading: float, grip: float,
                    timestamp: float) -> HumanObservation:
        q_h = self.open_q + grip * (self.closed_q - self.open_q)
        T_h = Pose(so3_exp(np.array([0.0, 0.0, heading])),
                   np.array([x, y, self.TABLE_Z]))
        _, V, A = self.chain.forward_kinematics(q_h)
        return HumanObservation(V @ T_h.rotation.T,
                                A @ T_h.rotation.T + T_h.translation,
                                timestamp=timestamp)

    def solve(self, obs: HumanObservation) -> RetargetFrame:
        frame = solve_frame(self.chain, self.prev, obs, self.cfg)
        self.prev = frame
        return frame

    def prime(self, x: float, y: float, heading: float, grip: float) -> None:
        """Align the solver with the stream's starting pose before any
        frame is recorded, the way an operator aligns before un-pausing."""
        obs = self.observation(x, y, heading, grip, timestamp=0.0)
        for _ in range(3):
            self.solve(obs)


def collect_demo(spec: TaskSpec, seed: int, noise: float, store: EpisodeStore,
                 round_index: int = 0, noise_seed: int | None = None,
                 hand_stream: SyntheticHandStream | None = None) -> tuple[str, EpisodeRecord]:
    """One scripted-expert demonstration routed through retargeting."""
    env = make_env(spec)
    env.reset(seed)
    stream = hand_stream or SyntheticHandStream()
    stream.prime(*env.state.effector)
    noise_rng = (np.random.default_rng(seed if noise_seed is None else noise_seed)
                 if noise > 0 else None)
    rows = {k: [] for k in ("obs", "act", "gate", "state")}
    while not env.done:
        obs_before = env.observe()  # the observation the action answers
        action = expert_action(env, noise_rng, noise)
        env.step(action)
        x, y, heading, grip = env.state.effector
        obs_h = stream.observation(x, y, heading, grip,
                                   env.state.step_index * spec.dt)
        frame = stream.solve(obs_h)
        rows["obs"].append(obs_before)
        rows["act"].append(action)
        rows["gate"].append(1.0 if frame.gated else 0.0)
        rows["state"].append(env.state.as_vector())
    n = len(rows["obs"])
    record = EpisodeRecord(
        header={"task": spec.task.value, "difficulty": spec.difficulty.value,
                "seed": seed, "mode": "demo", "round": round_index,
                "created_us": 0, "noise": noise},
        observations=np.array(rows["obs"]),
        actions=np.array(rows["act"]),
        chunk_ids=np.full(n, -1.0),
        mode_flags=np.full(n, MODE_FLAGS["demo"]),
        gate_states=np.array(rows["gate"]),
        label_states=np.full(n, LABEL_NONE),
        states=np.array(rows["state"]),
    )
    return store.append(record), record


def collect_demos(spec: TaskSpec, n: int, noise: float, store: EpisodeStore,
                  manifest: DatasetManifest, seed_base: int = 0,
                  round_index: int = 0) -> EffortLedger:
    """Append n demos to the manifest; attention charges each demo's length."""
    ledger = EffortLedger()
    stream = SyntheticHandStream()
    for i in range(n):
        eid, record = collect_demo(spec, seed_base + i, noise, store,
                                   round_index, hand_stream=stream)
        manifest.add(eid, record.steps, "demo", round_index)
        ledger.demo_frames += record.steps
        ledger.samples += 1
    return ledger


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def _window_from_history(history: list[np.ndarray], n_obs_steps: int) -> np.ndarray:
    idx = [max(0, len(history) - n_obs_steps + i) for i in range(n_obs_steps)]
    window = np.stack([history[j] for j in idx])
    # quantize to the store's row precision so live windows are bit-equal
    # to what the policy saw in training
    return window.astype("<f4").astype(float)


def run_rollout(policy, spec: TaskSpec, seed: int, cfg: LoopConfig,
                score: bool = False, store: EpisodeStore | None = None,
                round_index: int = 0):
    """Receding-horizon rollout; optionally MC-dropout scored per replan.

    Returns (record, trace, episode_id). Each executed step inherits the
    uncertainty of the chunk it came from, so the trace has one value per
    step of the episode.
    """
    env = make_env(spec)
    env.reset(seed)
    history = [env.observe()]
    rows = {k: [] for k in ("obs", "act", "chunk", "state", "u")}
    replan = 0
    while not env.done:
        window = _window_from_history(history, policy.n_obs_steps)
        chunk = policy.sample_chunk(window, noise_seed=seed * 100003 + replan)
        if score:
            samples = mc_dropout_samples(policy, window, cfg.mc_passes,
                                         base_seed=seed * 100003 + replan,
                                         shared_noise=cfg.shared_noise)
            from .uncertainty import uncertainty_score
            u_value = uncertainty_score(samples)
        else:
            u_value = 0.0
        env_actions = policy.to_env_actions(chunk)
        for step in range(min(cfg.execute_steps, len(env_actions))):
            action = np.clip(env_actions[step], -1.0, 1.0)
            obs_before = env.observe()
            env.step(action)
            rows["obs"].append(obs_before)
            rows["act"].append(action)
            rows["chunk"].append(replan)
            rows["state"].append(env.state.as_vector())
            rows["u"].append(u_value)
            history.append(env.observe())
            if env.done:
                break
        replan += 1
    n = len(rows["obs"])
    record = EpisodeRecord(
        header={"task": spec.task.value, "difficulty": spec.difficulty.value,
                "seed": seed, "mode": "rollout", "round": round_index,
                "created_us": 0, "scored": bool(score)},
        observations=np.array(rows["obs"]),
        actions=np.array(rows["act"]),
        chunk_ids=np.array(rows["chunk"], dtype=float),
        mode_flags=np.full(n, MODE_FLAGS["rollout"]),
        gate_states=np.zeros(n),
        label_states=np.full(n, LABEL_NONE),
        states=np.array(rows["state"]),
        trace=np.array(rows["u"]) if score else None,
    )
    episode_id = store.append(record) if store is not None else record.episode_id()
    trace = UncertaintyTrace(record.trace, episode_id, cfg.mc_passes) if score else None
    return record, trace, episode_id


def evaluate_policy(policy, task: Task, difficulty: Difficulty, n_envs: int,
                    cfg: LoopConfig, seed_base: int = 10_000):
    """Batched success rates over n_envs parallel episodes."""
    spec = TaskSpec(task, difficulty)
    envs = [make_env(spec) for _ in range(n_envs)]
    histories = []
    for i, env in enumerate(envs):
        env.reset(seed_base + i)
        histories.append([env.observe()])
    alive = np.ones(n_envs, dtype=bool)
    state_logs: list[list[np.ndarray]] = [[] for _ in range(n_envs)]
    while alive.any():
        idx = np.flatnonzero(alive)
        windows = np.stack([_window_from_history(histories[i], policy.n_obs_steps)
                            for i in idx])
        chunks = policy.predict_batch(windows, noise_seed=int(idx[0]))
        for row, i in enumerate(idx):
            env = envs[i]
            env_actions = policy.to_env_actions(chunks[row])
            for step in range(cfg.execute_steps):
                env.step(np.clip(env_actions[step], -1.0, 1.0))
                state_logs[i].append(env.state.as_vector())
                histories[i].append(env.observe())
                if env.done:
                    alive[i] = False
                    break
    outcomes = [evaluate_episode(task, np.array(log)) for log in state_logs]
    task_sr = float(np.mean([o.task_success for o in outcomes]))
    subtask_sr = float(np.mean([o.subtask_success for o in outcomes]))
    return task_sr, subtask_sr


# ---------------------------------------------------------------------------
# expert takeover
# ---------------------------------------------------------------------------

def expert_takeover(parent_record: EpisodeRecord, resume_row: int, mode: str,
                    store: EpisodeStore, round_index: int) -> tuple[str, EpisodeRecord]:
    """Restore the simulator at a logged row and let the expert finish.

    The environment state restore is exact (deterministic toy dynamics),
    mirroring a supervisor taking over control at the selected timestep
    for the remainder of the episode.
    """
    spec = TaskSpec(Task(parent_record.header["task"]),
                    Difficulty(parent_record.header["difficulty"]))
    env = make_env(spec)
    env.restore_vector(parent_record.states[resume_row].astype(float))
    rows = {k: [] for k in ("obs", "act", "state")}
    while not env.done:
        obs_before = env.observe()
        action = expert_action(env)
        env.step(action)
        rows["obs"].append(obs_before)
        rows["act"].append(action)
        rows["state"].append(env.state.as_vector())
    n = len(rows["obs"])
    if n == 0:
        return "", None
    record = EpisodeRecord(
        header={"task": spec.task.value, "difficulty": spec.difficulty.value,
                "seed": parent_record.header["seed"], "mode": mode,
                "round": round_index, "created_us": 0,
                "parent_episode": parent_record.episode_id(),
                "peak_t": resume_row},
        observations=np.array(rows["obs"]),
        actions=np.array(rows["act"]),
        chunk_ids=np.full(n, -1.0),
        mode_flags=np.full(n, MODE_FLAGS[mode]),
        gate_states=np.zeros(n),
        label_states=np.full(n, LABEL_CORRECTED),
        states=np.array(rows["state"]),
    )
    return store.append(record), record


# ---------------------------------------------------------------------------
# review sources
# ---------------------------------------------------------------------------

class OracleReview:
    """Always picks the rank-1 (highest-uncertainty) segment."""

    def choose(self, record: EpisodeRecord, trace: UncertaintyTrace,
               segments: list[Segment]) -> Segment:
        return segments[0]


class HumanReview:
    """Routes the choice through a live teleop session's review queue."""

    def __init__(self, session, poll_interval: float = 0.05, timeout: float = 300.0):
        self.session = session
        self.poll_interval = poll_interval
        self.timeout = timeout

    def choose(self, record: EpisodeRecord, trace: UncertaintyTrace,
               segments: list[Segment]) -> Segment:
        episode_id = trace.episode_id
        self.session.post_review({
            "episode_id": episode_id,
            "task": record.header["task"],
            "difficulty": record.header["difficulty"],
            "segments": [{"rank": s.rank, "peak_t": s.peak_t,
                          "start_t": s.start_t, "end_t": s.end_t}
                         for s in segments],
            "trace": trace.u.tolist(),
            "states": record.states.tolist(),
        })
        deadline = time.monotonic() + self.timeout
        path = self.session.reviews_dir / f"{episode_id}.json"
        while time.monotonic() < deadline:
            entry = json.loads(path.read_text())
            if entry["decision"] is not None:
                rank = entry["decision"]
                return next(s for s in segments if s.rank == rank)
            time.sleep(self.poll_interval)
        raise TimeoutError(f"no review decision for {episode_id}")


def make_review_source(name: str, session=None):
    if name == "oracle":
        return OracleReview()
    if name == "human":
        if session is None:
            raise ValueError("human review needs a live teleop session")
        return HumanReview(session)
    raise ValueError(f"unknown review source {name!r}")


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------

def _retrain(manifest: DatasetManifest, store: EpisodeStore, cfg: LoopConfig,
             seed: int, policy=None):
    """Fresh policy on the aggregated dataset (or fine-tune when asked)."""
    data = load_dataset(store, manifest)
    if cfg.fine_tune and policy is not None:
        new_policy = policy
    else:
        new_policy = make_policy(cfg.backend, OBS_DIM, ACTION_DIM, seed=seed,
                                 hidden=cfg.hidden, dropout_rate=cfg.dropout_rate)
    new_policy.fit(data, TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                     learning_rate=cfg.learning_rate, seed=seed))
    manifest.normalizer_fingerprint = new_policy.obs_normalizer.fingerprint()
    return new_policy


def corrective_round(policy, store: EpisodeStore, manifest: DatasetManifest,
                     task: Task, cfg: LoopConfig, round_index: int,
                     review=None, train_seed: int = 0, rollout_seed_base: int = 0):
    """One uncertainty-guided relabeling round at Default difficulty.

    Scored rollouts run until corrective_per_round failed episodes are
    processed; each failure contributes one corrective segment chosen from
    the top-k uncertainty peaks by the review source. The policy retrains
    whenever retrain_trigger new segments have accumulated.
    """
    review = review or OracleReview()
    spec = TaskSpec(task, Difficulty.DEFAULT)
    ledger = EffortLedger()
    added = 0
    pending_since_retrain = 0
    retrain_events = 0
    failures_seen = 0
    attempts = 0
    max_attempts = cfg.corrective_per_round * cfg.max_rollout_attempts_factor
    seed = rollout_seed_base
    while added < cfg.corrective_per_round:
        if attempts >= max_attempts:
            if added == 0:
                raise NoFailures(
                    f"no failed rollouts in {attempts} attempts; policy saturated")
            break
        attempts += 1
        record, trace, episode_id = run_rollout(
            policy, spec, seed, cfg, score=True, store=store,
            round_index=round_index)
        seed += 1
        outcome = evaluate_episode(task, record.states)
        if outcome.task_success:
            continue  # relabeling is invoked only for failed episodes
        failures_seen += 1
        segments = select_segments(trace, k=cfg.segment_count,
                                   window_seconds=cfg.review_window_seconds,
                                   dt=spec.dt)
        chosen = review.choose(record, trace, segments)
        ledger.review_frames += sum(s.frames for s in segments)
        corr_id, corr_record = expert_takeover(record, chosen.peak_t, "corrective",
                                               store, round_index)
        if corr_record is None:
            continue  # peak at the budget boundary leaves nothing to correct
        manifest.add(corr_id, corr_record.steps, "corrective", round_index)
        ledger.correction_frames += corr_record.steps
        ledger.samples += 1
        added += 1
        pending_since_retrain += 1
        if pending_since_retrain >= cfg.retrain_trigger:
            policy = _retrain(manifest, store, cfg, train_seed, policy)
            retrain_events += 1
            pending_since_retrain = 0
    if pending_since_retrain > 0:
        policy = _retrain(manifest, store, cfg, train_seed, policy)
        retrain_events += 1
    report = RoundReport(
        mode="corrective", round_index=round_index, task=task.value,
        samples_added=added, dataset_samples=manifest.total_samples,
        retrain_events=retrain_events, effort=ledger,
        seconds_per_sample=ledger.per_sample() * spec.dt)
    return policy, report


def hil_round(policy, store: EpisodeStore, manifest: DatasetManifest,
              task: Task, cfg: LoopConfig, round_index: int,
              train_seed: int = 0, rollout_seed_base: int = 0):
    """One unguided human-in-the-loop inspection round.

    The supervisor stand-in watches every rollout in full; on failed
    episodes the intervention point is the first time the policy action
    deviates from the oracle action by more than the threshold for a
    sustained dwell, and the expert finishes the episode from there.
    Attention charges the whole watched rollout plus the correction.
    """
    spec = TaskSpec(task, Difficulty.DEFAULT)
    ledger = EffortLedger()
    added = 0
    pending_since_retrain = 0
    retrain_events = 0
    attempts = 0
    max_attempts = cfg.corrective_per_round * cfg.max_rollout_attempts_factor
    seed = rollout_seed_base
    while added < cfg.corrective_per_round:
        if attempts >= max_attempts:
            break
        attempts += 1
        record, _, episode_id = run_rollout(policy, spec, seed, cfg, score=False,
                                            store=store, round_index=round_index)
        seed += 1
        ledger.watched_frames += record.steps  # supervisor watches everything
        outcome = evaluate_episode(task, record.states)
        if outcome.task_success:
            continue
        trigger = _hil_intervention_row(record, spec, cfg)
        if trigger is None:
            continue  # watched, but no mechanical reason to intervene
        corr_id, corr_record = expert_takeover(record, trigger, "hil_correction",
                                               store, round_index)
        if corr_record is None:
            continue
        manifest.add(corr_id, corr_record.steps, "hil_correction", round_index)
        ledger.correction_frames += corr_record.steps
        ledger.samples += 1
        added += 1
        pending_since_retrain += 1
        if pending_since_retrain >= cfg.retrain_trigger:
            policy = _retrain(manifest, store, cfg, train_seed, policy)
            retrain_events += 1
            pending_since_retrain = 0
    if pending_since_retrain > 0:
        policy = _retrain(manifest, store, cfg, train_seed, policy)
        retrain_events += 1
    report = RoundReport(
        mode="hil", round_index=round_index, task=task.value,
        samples_added=added, dataset_samples=manifest.total_samples,
        retrain_events=retrain_events, effort=ledger,
        seconds_per_sample=ledger.per_sample() * spec.dt)
    return policy, report


def compute_effort(ledgers: dict[str, EffortLedger], dt: float = 0.05) -> dict:
    """Per-mode mean attention per collected sample, in frames and seconds.

    BC charges the demonstration itself; corrective charges the reviewed
    snippet windows plus the correction; HIL charges the watched rollouts
    plus the correction.
    """
    out = {}
    for mode, ledger in ledgers.items():
        frames = ledger.per_sample()
        out[mode] = {
            "attention_frames": ledger.attention_frames,
            "samples": ledger.samples,
            "frames_per_sample": frames,
            "seconds_per_sample": frames * dt,
        }
    return out


def _hil_intervention_row(record: EpisodeRecord, spec: TaskSpec,
                          cfg: LoopConfig) -> int | None:
    """First row where policy-vs-oracle deviation persisted for the dwell."""
    if not np.isfinite(cfg.hil_deviation_threshold):
        return None
    env = make_env(spec)
    run = 0
    for row in range(record.steps):
        if row == 0:
            env.reset(record.header["seed"])
        else:
            env.restore_vector(record.states[row - 1].astype(float))
        oracle = expert_action(env)
        deviation = float(np.max(np.abs(record.actions[row].astype(float) - oracle)))
        run = run + 1 if deviation > cfg.hil_deviation_threshold else 0
        if run >= cfg.hil_dwell:
            return row
    return None
