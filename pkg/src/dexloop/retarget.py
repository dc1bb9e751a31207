"""Per-frame hand retargeting.

Maps tracked human keypoints to robot joint positions and a global wrist
pose by jointly minimizing keyvector alignment in the wrist frame, anchor
alignment in the shared frame, and joint/pose increment smoothness, subject
to box joint limits. The wrist rotation is optimized through the raw 6D
rotation parameters, the pose increment is penalized through the SE(3)
logarithm with separate translation/rotation scales, and the solve is a
projected damped Gauss-Newton with a fixed iteration budget warm-started
from the previous frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .kinematics import (
    cross3,
    DimensionMismatch,
    KinematicChain,
    Pose,
    Twist,
    rot6d_decode,
    rot6d_decode_jacobian,
    rot6d_encode,
    se3_left_jacobian_inv,
    se3_log,
    vee,
)


class SolverDiverged(RuntimeError):
    """No damping retry reduced a pathologically large warm-start residual."""


class GateState(Enum):
    RECORDING = "recording"
    PAUSED = "paused"


@dataclass(frozen=True)
class RetargetConfig:
    """Weights and solver knobs for the per-frame objective."""

    keyvector_weights: np.ndarray | None = None  # None -> all ones
    lambda_anchor: float = 1.0
    lambda_joint: float = 0.01
    lambda_pose: float = 0.01
    twist_scale_translation: float = 1.0
    twist_scale_rotation: float = 0.3
    max_iterations: int = 10
    damping: float = 1e-3
    alignment_threshold_tau: float = 0.15  # meters; pause when mean error exceeds
    resume_fraction: float = 0.8           # resume only below resume_fraction * tau

    def __post_init__(self):
        if self.keyvector_weights is not None:
            w = np.asarray(self.keyvector_weights, dtype=float)
            if np.any(w < 0):
                raise ValueError("keyvector weights must be nonnegative")
            object.__setattr__(self, "keyvector_weights", w)
        for name in ("lambda_anchor", "lambda_joint", "lambda_pose"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.alignment_threshold_tau <= 0:
            raise ValueError("alignment_threshold_tau must be positive")

    def weights_for(self, chain: KinematicChain) -> np.ndarray:
        if self.keyvector_weights is None:
            return np.ones(len(chain.keyvector_pairs))
        w = self.keyvector_weights
        if w.shape != (len(chain.keyvector_pairs),):
            raise DimensionMismatch("keyvector weight count does not match chain")
        return w

    def twist_scale(self) -> np.ndarray:
        return np.concatenate([
            np.full(3, self.twist_scale_translation),
            np.full(3, self.twist_scale_rotation),
        ])


@dataclass(frozen=True)
class HumanObservation:
    """Tracked keyvectors and anchor keypoints in the shared frame (meters)."""

    keyvectors: np.ndarray
    anchor_keypoints: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        kv = np.asarray(self.keyvectors, dtype=float).reshape(-1, 3)
        an = np.asarray(self.anchor_keypoints, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "keyvectors", kv)
        object.__setattr__(self, "anchor_keypoints", an)

    def check_against(self, chain: KinematicChain) -> None:
        if self.keyvectors.shape[0] != len(chain.keyvector_pairs):
            raise DimensionMismatch(
                f"observation has {self.keyvectors.shape[0]} keyvectors, "
                f"chain expects {len(chain.keyvector_pairs)}")
        if self.anchor_keypoints.shape[0] != len(chain.anchors):
            raise DimensionMismatch(
                f"observation has {self.anchor_keypoints.shape[0]} anchors, "
                f"chain expects {len(chain.anchors)}")


@dataclass(frozen=True)
class RetargetFrame:
    """One solved frame; q always satisfies the chain's joint limits."""

    q: np.ndarray
    wrist_pose: Pose
    objective_value: float = 0.0
    alignment_error: float = 0.0
    gated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(-1))


# ---------------------------------------------------------------------------
# objective and residuals
# ---------------------------------------------------------------------------
#
# Decision vector layout: x = [q (n), a (3), b (3), t (3)] where (a, b) are
# the raw 6D rotation parameters of the wrist rotation.

def _unpack(x: np.ndarray, n: int):
    return x[:n], x[n:n + 3], x[n + 3:n + 6], x[n + 6:n + 9]


def _residuals_and_jacobian(chain: KinematicChain, x: np.ndarray,
                            prev_q: np.ndarray, prev_T: Pose,
                            obs: HumanObservation, cfg: RetargetConfig,
                            with_jacobian: bool = True):
    n = chain.num_joints
    q, a, b, t = _unpack(x, n)
    R = rot6d_decode(a, b)
    if with_jacobian:
        _, V, A, _, JV, JA = chain.fk_full(q)
    else:
        _, V, A = chain.forward_kinematics(q)

    w = cfg.weights_for(chain)
    sw = np.sqrt(w)
    sa = np.sqrt(cfg.lambda_anchor)
    sq = np.sqrt(cfg.lambda_joint)
    sT = np.sqrt(cfg.lambda_pose)
    S = cfg.twist_scale()

    n_kv = V.shape[0]
    n_an = A.shape[0]
    m = 3 * n_kv + 3 * n_an + n + 6
    r = np.zeros(m)

    r_kv = obs.keyvectors - V @ R.T          # rows: v^H_i - R v^R_i
    r[:3 * n_kv] = (r_kv * sw[:, None]).ravel()
    r_an = obs.anchor_keypoints - A @ R.T - t
    r[3 * n_kv:3 * n_kv + 3 * n_an] = (sa * r_an).ravel()
    r[3 * n_kv + 3 * n_an:3 * n_kv + 3 * n_an + n] = sq * (q - prev_q)

    delta_T = prev_T.inverse().compose(Pose(R, t))
    xi = se3_log(delta_T)
    xi_vec = xi.as_vector()
    r[-6:] = sT * S * xi_vec

    if not with_jacobian:
        return r, None

    J = np.zeros((m, n + 9))
    dR = rot6d_decode_jacobian(a, b)  # (3, 3, 6)

    for i in range(n_kv):
        rows = slice(3 * i, 3 * i + 3)
        J[rows, :n] = -sw[i] * (R @ JV[i])
        for k in range(6):
            J[rows, n + k] = -sw[i] * (dR[:, :, k] @ V[i])
    base = 3 * n_kv
    for j in range(n_an):
        rows = slice(base + 3 * j, base + 3 * j + 3)
        J[rows, :n] = -sa * (R @ JA[j])
        for k in range(6):
            J[rows, n + k] = -sa * (dR[:, :, k] @ A[j])
        J[rows, n + 6:n + 9] = -sa * np.eye(3)
    base += 3 * n_an
    J[base:base + n, :n] = sq * np.eye(n)

    # twist rows: chain rule through the SE(3) log via the left-perturbation
    # identity d log(exp(eps d^) D) = Jinv(xi) d
    Jinv = se3_left_jacobian_inv(xi)
    Rp = prev_T.rotation
    tp = prev_T.translation
    D = np.zeros((6, 9))  # columns: 6 rotation params then 3 translation params
    for k in range(6):
        Wk = dR[:, :, k] @ R.T          # exactly skew: R(a, b) is orthogonal
        wk = vee(Wk)
        D[:3, k] = Rp.T @ cross3(wk, tp - t)
        D[3:, k] = Rp.T @ wk
    D[:3, 6:9] = Rp.T
    J[-6:, n:] = (sT * S)[:, None] * (Jinv @ D)
    return r, J


def objective(chain: KinematicChain, q: np.ndarray, T: Pose,
              prev_q: np.ndarray, prev_T: Pose,
              obs: HumanObservation, cfg: RetargetConfig):
    """Objective value and its gradient over [q; 6D rotation params; t].

    The gradient is analytic (2 J^T r over the residual stack) and matches
    central finite differences of the value.
    """
    obs.check_against(chain)
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (chain.num_joints,):
        raise DimensionMismatch("q length does not match chain")
    a, b = rot6d_encode(T.rotation)
    x = np.concatenate([q, a, b, T.translation])
    r, J = _residuals_and_jacobian(chain, x, prev_q, prev_T, obs, cfg)
    return float(r @ r), 2.0 * (J.T @ r)


def alignment_error(chain: KinematicChain, q: np.ndarray, T: Pose,
                    obs: HumanObservation) -> float:
    """Mean Euclidean distance between observed and posed robot anchors."""
    _, _, A = chain.forward_kinematics(q)
    posed = A @ T.rotation.T + T.translation
    return float(np.mean(np.linalg.norm(obs.anchor_keypoints - posed, axis=1)))


def solve_frame(chain: KinematicChain, prev: RetargetFrame,
                obs: HumanObservation, cfg: RetargetConfig,
                history: list | None = None) -> RetargetFrame:
    """One projected damped Gauss-Newton solve, warm-started from prev.

    Runs at most cfg.max_iterations accepted steps; each candidate step is
    projected onto the joint limits before evaluation, so every returned q
    is feasible. Levenberg damping doubles on rejection (up to 8 retries
    per iteration) and halves on acceptance. Raises SolverDiverged only
    when no retry reduces the objective and the warm-start residual itself
    is pathological (> 1e3), which signals corrupt input.

    The reported alignment_error is measured at the warm start, i.e.
    between the incoming observation and where the robot currently is;
    that is the quantity the recording gate must react to, since the
    solver would otherwise absorb a tracking glitch into the wrist pose
    before the gate ever saw it.
    """
    obs.check_against(chain)
    n = chain.num_joints
    q0 = chain.clamp(prev.q)
    err = alignment_error(chain, q0, prev.wrist_pose, obs)
    a0, b0 = rot6d_encode(prev.wrist_pose.rotation)
    x = np.concatenate([q0, a0, b0, prev.wrist_pose.translation])

    r, J = _residuals_and_jacobian(chain, x, q0, prev.wrist_pose, obs, cfg)
    F = float(r @ r)
    F_warm = F
    if history is not None:
        history.append(F)
    mu = cfg.damping
    eye = np.eye(n + 9)
    any_accepted = False

    for _ in range(cfg.max_iterations):
        if F < 1e-24:
            break
        g = J.T @ r
        H = J.T @ J
        accepted = False
        for _retry in range(9):  # first attempt plus 8 damping doublings
            try:
                delta = np.linalg.solve(H + mu * eye, -g)
            except np.linalg.LinAlgError:
                mu *= 2.0
                continue
            x_new = x.copy() + delta
            x_new[:n] = chain.clamp(x_new[:n])
            try:
                r_new, J_new = _residuals_and_jacobian(
                    chain, x_new, q0, prev.wrist_pose, obs, cfg)
            except Exception:
                mu *= 2.0
                continue
            F_new = float(r_new @ r_new)
            if F_new < F:
                x, r, J, F = x_new, r_new, J_new, F_new
                mu = max(mu * 0.5, 1e-12)
                accepted = True
                any_accepted = True
                if history is not None:
                    history.append(F)
                break
            if F_new <= F * (1.0 + 1e-9):
                break  # at a machine-precision plateau; damping cannot help
            mu *= 2.0
        if not accepted:
            if not any_accepted and F_warm > 1e3:
                raise SolverDiverged(
                    f"warm-start residual {F_warm:.3e} and no damping retry helped")
            break

    if not any_accepted:
        # keep the warm start bit-exact instead of re-encoding the rotation
        return RetargetFrame(
            q=q0, wrist_pose=prev.wrist_pose, objective_value=F_warm,
            alignment_error=err, gated=err > cfg.alignment_threshold_tau)

    q, a, b, t = _unpack(x, n)
    T = Pose(rot6d_decode(a, b), t)
    return RetargetFrame(
        q=q, wrist_pose=T, objective_value=F, alignment_error=err,
        gated=err > cfg.alignment_threshold_tau)


# ---------------------------------------------------------------------------
# alignment gate
# ---------------------------------------------------------------------------

def gate_step(previous: GateState, error: float, cfg: RetargetConfig) -> GateState:
    """Advance the recording gate by one error sample, with hysteresis.

    Recording pauses when the error exceeds tau and resumes only once it
    drops below resume_fraction * tau, so the gate cannot flap at the
    threshold.
    """
    tau = cfg.alignment_threshold_tau
    if previous is GateState.RECORDING:
        return GateState.PAUSED if error > tau else GateState.RECORDING
    return GateState.RECORDING if error < cfg.resume_fraction * tau else GateState.PAUSED


class AlignmentGate:
    """Stateful wrapper around gate_step for one teleop stream."""

    def __init__(self, cfg: RetargetConfig, initial: GateState = GateState.RECORDING):
        self.cfg = cfg
        self.state = initial
        self.pause_events = 0
        self.resume_events = 0

    def update(self, error: float) -> GateState:
        new = gate_step(self.state, error, self.cfg)
        if new is not self.state:
            if new is GateState.PAUSED:
                self.pause_events += 1
            else:
                self.resume_events += 1
        self.state = new
        return new

    @property
    def recording(self) -> bool:
        return self.state is GateState.RECORDING
