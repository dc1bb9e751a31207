"""Deterministic planar toy manipulation tasks with scripted experts.

Three tasks stand in for the dexterous originals: carrying a pan to a
burner (pick-and-place with grasp latching), pulling a drawer open along
its axis (contact-gated prismatic motion), and turning a wall valve by
tracing its rim (tangential integration while in contact). Dynamics are
kinematic and fully deterministic given the reset seed and the action
sequence, which keeps episodes exactly replayable and mid-episode state
restores exact.

Actions are 4-vectors in [-1, 1]: planar velocity, heading rate, and a
grip command (> 0 closes). Observations are 10-dim state vectors with the
heading encoded as cos/sin so the representation stays continuous.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np


class Task(enum.Enum):
    PLACE_PAN = "pan"
    PULL_DRAWER = "drawer"
    TURN_VALVE = "valve"


class Difficulty(enum.Enum):
    DEFAULT = "default"
    HARD = "hard"


class FailurePhase(enum.Enum):
    APPROACH = "approach"
    GRASP = "grasp_contact"
    TRANSPORT = "transport_manipulate"
    PLACE = "place"
    NONE = "none"


class IncompleteEpisode(ValueError):
    """Episode has no recorded steps to evaluate."""


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    difficulty: Difficulty = Difficulty.DEFAULT
    dt: float = 0.05
    max_duration: float = 8.0

    def __post_init__(self):
        budget = self.max_duration / self.dt
        if abs(budget - round(budget)) > 1e-9:
            raise ValueError("max_duration must be an integer number of steps")

    @property
    def step_budget(self) -> int:
        return int(round(self.max_duration / self.dt))


@dataclass(frozen=True)
class Outcome:
    task_success: bool
    subtask_success: bool
    steps_used: int
    failure_phase: FailurePhase

    def __post_init__(self):
        if self.task_success and not self.subtask_success:
            raise ValueError("task success implies subtask success")


# per-step magnitudes at action = +-1
MAX_POS_STEP = 0.025   # meters
MAX_HEAD_STEP = 0.15   # radians
WORKSPACE = 0.45       # half-extent of the square workspace

GRASP_RADIUS = 0.03
PLACE_TOL = 0.02
ATTACH_RADIUS = 0.03
DRAWER_MAX_EXT = 0.15
VALVE_RADIUS = 0.06
VALVE_ANNULUS = (0.045, 0.078)
VALVE_SUBTASK_ANGLE = np.deg2rad(15.0)
VALVE_TASK_ANGLE = np.deg2rad(90.0)

OBS_DIM = 10
ACTION_DIM = 4


def _wrap(angle: float) -> float:
    return float(np.arctan2(np.sin(angle), np.cos(angle)))


def _sample_box(rng, center, half_extent, scale):
    center = np.asarray(center, dtype=float)
    half = np.asarray(half_extent, dtype=float) * scale
    return rng.uniform(center - half, center + half)


@dataclass
class EnvState:
    """Full restorable simulator state for one environment instance."""

    effector: np.ndarray   # x, y, heading, grip
    objects: np.ndarray    # task block, see each env's state layout
    goal: np.ndarray       # task goal parameters
    step_index: int
    rng_stream: int        # reset seed that produced this episode

    def copy(self) -> "EnvState":
        return EnvState(self.effector.copy(), self.objects.copy(),
                        self.goal.copy(), self.step_index, self.rng_stream)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.effector, self.objects, self.goal,
                               [float(self.step_index)], [float(self.rng_stream)]])


class PlanarEnv:
    """Shared stepping/bookkeeping; subclasses provide task dynamics."""

    task: Task
    objects_dim: int
    goal_dim: int

    def __init__(self, spec: TaskSpec):
        if spec.task is not self.task:
            raise ValueError(f"spec task {spec.task} does not match env {self.task}")
        self.spec = spec
        self.state: EnvState | None = None

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        hard = self.spec.difficulty is Difficulty.HARD
        scale = 2.0 if hard else 1.0
        eff_xy = _sample_box(rng, self.EFFECTOR_CENTER, self.EFFECTOR_HALF, scale)
        heading = float(rng.uniform(-np.pi, np.pi)) if hard else 0.0
        effector = np.array([eff_xy[0], eff_xy[1], heading, 0.0])
        objects, goal = self._sample_task(rng, scale)
        self.state = EnvState(effector, objects, goal, 0, seed)
        return self.state.copy()

    def restore(self, state: EnvState) -> None:
        self.state = state.copy()

    def restore_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        eff = vec[:4].copy()
        objects = vec[4:4 + self.objects_dim].copy()
        goal = vec[4 + self.objects_dim:4 + self.objects_dim + self.goal_dim].copy()
        step_index = int(round(vec[-2]))
        seed = int(round(vec[-1]))
        self.state = EnvState(eff, objects, goal, step_index, seed)

    def step(self, action: np.ndarray) -> EnvState:
        action = np.clip(np.asarray(action, dtype=float).reshape(ACTION_DIM), -1.0, 1.0)
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        s = self.state
        prev_xy = s.effector[:2].copy()
        prev_grip = s.effector[3]
        new_xy = np.clip(prev_xy + action[:2] * MAX_POS_STEP, -WORKSPACE, WORKSPACE)
        heading = _wrap(s.effector[2] + action[2] * MAX_HEAD_STEP)
        grip = 1.0 if action[3] > 0.0 else 0.0
        s.effector = np.array([new_xy[0], new_xy[1], heading, grip])
        self._update_task(prev_xy, new_xy, grip, prev_grip)
        s.step_index += 1
        return s.copy()

    @property
    def done(self) -> bool:
        return self.success() or self.state.step_index >= self.spec.step_budget

    # -- task hooks ----------------------------------------------------------

    def _sample_task(self, rng, scale):
        raise NotImplementedError

    def _update_task(self, prev_xy, new_xy, grip, prev_grip):
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def success(self) -> bool:
        raise NotImplementedError


class PanEnv(PlanarEnv):
    """Grasp the pan and place it on the burner.

    objects = [pan_x, pan_y, latched]; goal = [burner_x, burner_y].
    """

    task = Task.PLACE_PAN
    objects_dim = 3
    goal_dim = 2
    EFFECTOR_CENTER = (-0.25, -0.25)
    EFFECTOR_HALF = (0.04, 0.04)
    PAN_CENTER = (0.18, -0.05)
    PAN_HALF = (0.12, 0.18)
    BURNER_CENTER = (-0.25, 0.25)
    BURNER_HALF = (0.02, 0.02)

    def _sample_task(self, rng, scale):
        pan = _sample_box(rng, self.PAN_CENTER, self.PAN_HALF, scale)
        burner = _sample_box(rng, self.BURNER_CENTER, self.BURNER_HALF, scale)
        return np.array([pan[0], pan[1], 0.0]), burner

    def _update_task(self, prev_xy, new_xy, grip, prev_grip):
        s = self.state
        pan = s.objects[:2]
        latched = s.objects[2] > 0.5
        if grip > 0.5:
            # latching needs the close transition to happen inside the
            # grasp radius; holding the grip closed while approaching
            # does not grab the pan
            if not latched and prev_grip < 0.5 and \
                    np.linalg.norm(new_xy - pan) <= GRASP_RADIUS:
                latched = True
        else:
            latched = False
        if latched:
            s.objects[:2] = new_xy
        s.objects[2] = 1.0 if latched else 0.0

    def observe(self) -> np.ndarray:
        s = self.state
        x, y, th, grip = s.effector
        return np.array([x, y, np.cos(th), np.sin(th), grip,
                         s.objects[0], s.objects[1], s.objects[2],
                         s.goal[0], s.goal[1]])

    def success(self) -> bool:
        s = self.state
        placed = np.linalg.norm(s.objects[:2] - s.goal) <= PLACE_TOL
        return bool(placed and s.objects[2] < 0.5)


class DrawerEnv(PlanarEnv):
    """Pull the drawer open along its axis while gripping the handle.

    objects = [ext, handle0_x, handle0_y, axis_angle]; goal = [max_ext].
    """

    task = Task.PULL_DRAWER
    objects_dim = 4
    goal_dim = 1
    EFFECTOR_CENTER = (-0.25, -0.20)
    EFFECTOR_HALF = (0.04, 0.04)
    HANDLE_CENTER = (0.25, 0.10)
    HANDLE_HALF = (0.08, 0.14)
    AXIS_CENTER = np.pi          # pull toward -x
    AXIS_HALF = 0.3

    def _sample_task(self, rng, scale):
        h0 = _sample_box(rng, self.HANDLE_CENTER, self.HANDLE_HALF, scale)
        alpha = _wrap(self.AXIS_CENTER + rng.uniform(-1.0, 1.0) * self.AXIS_HALF * scale)
        return np.array([0.0, h0[0], h0[1], alpha]), np.array([DRAWER_MAX_EXT])

    def handle_position(self) -> np.ndarray:
        s = self.state
        ext, hx, hy, alpha = s.objects
        return np.array([hx + ext * np.cos(alpha), hy + ext * np.sin(alpha)])

    def _update_task(self, prev_xy, new_xy, grip, prev_grip):
        s = self.state
        ext, hx, hy, alpha = s.objects
        handle = self.handle_position()
        if grip > 0.5 and np.linalg.norm(prev_xy - handle) <= ATTACH_RADIUS:
            axis = np.array([np.cos(alpha), np.sin(alpha)])
            ext = float(np.clip(ext + (new_xy - prev_xy) @ axis, 0.0, DRAWER_MAX_EXT))
            s.objects[0] = ext

    def observe(self) -> np.ndarray:
        s = self.state
        x, y, th, grip = s.effector
        ext, hx, hy, alpha = s.objects
        return np.array([x, y, np.cos(th), np.sin(th), grip,
                         ext / DRAWER_MAX_EXT, hx, hy, np.cos(alpha), np.sin(alpha)])

    def success(self) -> bool:
        return bool(self.state.objects[0] >= 0.9 * DRAWER_MAX_EXT)


class ValveEnv(PlanarEnv):
    """Rotate the valve by tracing its rim inside the contact annulus.

    objects = [angle, initial_angle]; goal = [center_x, center_y].
    """

    task = Task.TURN_VALVE
    objects_dim = 2
    goal_dim = 2
    EFFECTOR_CENTER = (-0.25, -0.15)
    EFFECTOR_HALF = (0.04, 0.04)
    VALVE_CENTER = (0.05, 0.15)
    VALVE_HALF = (0.10, 0.10)
    V0_HALF = 0.5

    def _sample_task(self, rng, scale):
        center = _sample_box(rng, self.VALVE_CENTER, self.VALVE_HALF, scale)
        v0 = _wrap(rng.uniform(-1.0, 1.0) * self.V0_HALF * scale)
        return np.array([v0, v0]), center

    def _in_annulus(self, xy) -> bool:
        d = np.linalg.norm(xy - self.state.goal)
        return VALVE_ANNULUS[0] <= d <= VALVE_ANNULUS[1]

    def _update_task(self, prev_xy, new_xy, grip, prev_grip):
        s = self.state
        if self._in_annulus(prev_xy) and self._in_annulus(new_xy):
            c = s.goal
            b0 = np.arctan2(prev_xy[1] - c[1], prev_xy[0] - c[0])
            b1 = np.arctan2(new_xy[1] - c[1], new_xy[0] - c[0])
            s.objects[0] = s.objects[0] + _wrap(b1 - b0)

    def rotation(self) -> float:
        return float(self.state.objects[0] - self.state.objects[1])

    def observe(self) -> np.ndarray:
        s = self.state
        x, y, th, grip = s.effector
        v = s.objects[0]
        return np.array([x, y, np.cos(th), np.sin(th), grip,
                         s.goal[0], s.goal[1], np.cos(v), np.sin(v),
                         self.rotation() / np.pi])

    def success(self) -> bool:
        return bool(abs(self.rotation()) >= VALVE_TASK_ANGLE)


_ENVS = {Task.PLACE_PAN: PanEnv, Task.PULL_DRAWER: DrawerEnv, Task.TURN_VALVE: ValveEnv}


def make_env(spec: TaskSpec) -> PlanarEnv:
    return _ENVS[spec.task](spec)


def state_dim(task: Task) -> int:
    env_cls = _ENVS[task]
    return 4 + env_cls.objects_dim + env_cls.goal_dim + 2


# ---------------------------------------------------------------------------
# episode evaluation
# ---------------------------------------------------------------------------

def evaluate_episode(task: Task, state_vectors: np.ndarray) -> Outcome:
    """Outcome of a finished episode from its per-step state log.

    The log contains the state after every executed step (row i is the
    state at step index i+1 relative to reset).
    """
    states = np.asarray(state_vectors, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise IncompleteEpisode("episode has no recorded steps")
    steps_used = states.shape[0]

    if task is Task.PLACE_PAN:
        pan = states[:, 4:6]
        latched = states[:, 6] > 0.5
        burner = states[-1, 7:9]
        ever_latched = bool(latched.any())
        placed = np.linalg.norm(pan[-1] - burner) <= PLACE_TOL
        task_ok = bool(placed and not latched[-1])
        if task_ok:
            phase = FailurePhase.NONE
        elif not ever_latched:
            phase = FailurePhase.APPROACH
        elif np.linalg.norm(pan[-1] - pan[0]) < 0.03:
            phase = FailurePhase.GRASP
        elif not latched[-1] and np.linalg.norm(pan[-1] - burner) <= 0.1:
            phase = FailurePhase.PLACE
        else:
            phase = FailurePhase.TRANSPORT
        return Outcome(task_ok, ever_latched, steps_used, phase)

    if task is Task.PULL_DRAWER:
        ext = states[:, 4]
        task_ok = bool(ext[-1] >= 0.9 * DRAWER_MAX_EXT)
        # contact leaves a trace only through extension motion, so check
        # proximity with a closed grip directly
        handle_x = states[:, 5] + ext * np.cos(states[:, 7])
        handle_y = states[:, 6] + ext * np.sin(states[:, 7])
        near = np.hypot(states[:, 0] - handle_x, states[:, 1] - handle_y) <= ATTACH_RADIUS
        contact = bool(np.any(near & (states[:, 3] > 0.5)))
        if task_ok:
            phase = FailurePhase.NONE
        elif not contact:
            phase = FailurePhase.APPROACH
        elif ext[-1] < 0.2 * DRAWER_MAX_EXT:
            phase = FailurePhase.GRASP
        else:
            phase = FailurePhase.TRANSPORT
        return Outcome(task_ok, contact, steps_used, phase)

    if task is Task.TURN_VALVE:
        rotation = abs(states[-1, 4] - states[-1, 5])
        dist = np.hypot(states[:, 0] - states[:, 6], states[:, 1] - states[:, 7])
        contact = bool(np.any((dist >= VALVE_ANNULUS[0]) & (dist <= VALVE_ANNULUS[1])))
        subtask = bool(rotation >= VALVE_SUBTASK_ANGLE)
        task_ok = bool(rotation >= VALVE_TASK_ANGLE)
        if task_ok:
            phase = FailurePhase.NONE
        elif not contact:
            phase = FailurePhase.APPROACH
        elif not subtask:
            phase = FailurePhase.GRASP
        else:
            phase = FailurePhase.TRANSPORT
        return Outcome(task_ok, subtask, steps_used, phase)

    raise ValueError(f"unknown task {task}")


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

def _move_toward(eff_xy, target, speed=1.0):
    delta = (np.asarray(target) - eff_xy) / MAX_POS_STEP
    return np.clip(delta * speed, -1.0, 1.0)


def expert_action(env: PlanarEnv, noise_rng: np.random.Generator | None = None,
                  noise_level: float = 0.0) -> np.ndarray:
    """State-feedback waypoint controller; completes the task from any
    reachable state, which is what makes mid-episode takeovers possible.

    Heading is slewed toward the direction of motion, so demonstrations
    cover the heading dimensions and a policy can learn to correct an
    arbitrary initial heading instead of facing out-of-support inputs.
    """
    s = env.state
    eff = s.effector[:2]
    action = np.zeros(ACTION_DIM)

    if env.task is Task.PLACE_PAN:
        pan = s.objects[:2]
        latched = s.objects[2] > 0.5
        if latched:
            if np.linalg.norm(pan - s.goal) <= 0.5 * PLACE_TOL:
                action[3] = -1.0  # release on the burner
            else:
                action[:2] = _move_toward(eff, s.goal)
                action[3] = 1.0
        elif np.linalg.norm(pan - s.goal) <= PLACE_TOL:
            action[:2] = _move_toward(eff, pan - np.array([0.1, 0.0]))
            action[3] = -1.0  # done; keep clear
        else:
            dist = np.linalg.norm(pan - eff)
            action[:2] = _move_toward(eff, pan)
            action[3] = 1.0 if dist <= 0.6 * GRASP_RADIUS else -1.0

    elif env.task is Task.PULL_DRAWER:
        handle = env.handle_position()
        alpha = s.objects[3]
        axis = np.array([np.cos(alpha), np.sin(alpha)])
        dist = np.linalg.norm(handle - eff)
        if s.objects[0] >= 0.96 * DRAWER_MAX_EXT:
            action[3] = -1.0  # open enough; let go
        elif dist <= 0.5 * ATTACH_RADIUS:
            action[:2] = np.clip(axis * 0.8, -1.0, 1.0)
            action[3] = 1.0
        else:
            action[:2] = _move_toward(eff, handle)
            action[3] = 1.0 if dist <= 0.8 * ATTACH_RADIUS else -1.0

    elif env.task is Task.TURN_VALVE:
        c = s.goal
        radial = eff - c
        dist = np.linalg.norm(radial)
        r_mid = VALVE_RADIUS
        if abs(env.rotation()) >= VALVE_TASK_ANGLE + 0.15:
            pass  # done; hold position
        elif dist < VALVE_ANNULUS[0] or dist > VALVE_ANNULUS[1]:
            bearing = np.arctan2(radial[1], radial[0]) if dist > 1e-9 else 0.0
            rim = c + r_mid * np.array([np.cos(bearing), np.sin(bearing)])
            action[:2] = _move_toward(eff, rim)
        else:
            bearing = np.arctan2(radial[1], radial[0])
            target = c + r_mid * np.array([np.cos(bearing + 0.15),
                                           np.sin(bearing + 0.15)])
            action[:2] = _move_toward(eff, target)

    if np.linalg.norm(action[:2]) > 0.1:
        desired = np.arctan2(action[1], action[0])
        action[2] = np.clip(_wrap(desired - s.effector[2]) / MAX_HEAD_STEP, -1.0, 1.0)

    if noise_rng is not None and noise_level > 0.0:
        action = action + noise_rng.normal(scale=noise_level, size=ACTION_DIM)
    return np.clip(action, -1.0, 1.0)


def run_expert_episode(spec: TaskSpec, seed: int, noise_level: float = 0.0,
                       noise_seed: int = 0):
    """Roll the scripted expert to termination; returns (env, states, obs,
    actions) with one state/obs/action row per executed step."""
    env = make_env(spec)
    env.reset(seed)
    noise_rng = np.random.default_rng(noise_seed) if noise_level > 0 else None
    states, observations, actions = [], [], []
    while not env.done:
        a = expert_action(env, noise_rng, noise_level)
        env.step(a)
        actions.append(a)
        observations.append(env.observe())
        states.append(env.state.as_vector())
    return env, np.array(states), np.array(observations), np.array(actions)
