"""Rigid-body math for the simulated hand.

SO(3)/SE(3) exponential and logarithm maps, the continuous 6D rotation
parametrization (Gram-Schmidt over the first two matrix columns), and
forward kinematics over a revolute-joint tree with attached keypoint,
keyvector, and anchor frames. Everything here is pure numpy over
immutable inputs and safe to call from multiple threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateInput(ValueError):
    """6D rotation input cannot be orthonormalized (zero or parallel columns)."""


class NearPiRotation(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


class DimensionMismatch(ValueError):
    """Vector length does not match the kinematic chain."""


# Angle below which series expansions replace the closed-form trig ratios.
_SMALL_ANGLE = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product for single 3-vectors; avoids np.cross overhead."""
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def vee(W: np.ndarray) -> np.ndarray:
    """Inverse of hat, antisymmetrized for numerical safety."""
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


# ---------------------------------------------------------------------------
# 6D rotation parametrization
# ---------------------------------------------------------------------------

def rot6d_decode(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two raw 3-vectors into a proper rotation matrix.

    Columns are (normalize(a), normalize(b - proj_a b), c1 x c2). Raises
    DegenerateInput when ``a`` is near zero or ``a`` and ``b`` are parallel
    within ~1e-6 rad; silent perturbation would hide upstream bugs.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    if na <= 1e-9:
        raise DegenerateInput("first 6D column has near-zero norm")
    c1 = a / na
    nb = np.linalg.norm(b)
    if nb <= 1e-9 or np.linalg.norm(np.cross(c1, b)) / nb < _SMALL_ANGLE:
        raise DegenerateInput("6D columns are parallel within tolerance")
    u = b - (c1 @ b) * c1
    c2 = u / np.linalg.norm(u)
    c3 = np.cross(c1, c2)
    return np.column_stack([c1, c2, c3])


def rot6d_encode(R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First two columns of a rotation matrix; inverse of rot6d_decode on SO(3)."""
    R = np.asarray(R, dtype=float)
    return R[:, 0].copy(), R[:, 1].copy()


def rot6d_decode_jacobian(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d(rot6d_decode)/d[a; b] as a (3, 3, 6) tensor.

    Entry [:, :, k] is the derivative of the rotation matrix with respect
    to the k-th raw parameter (a1..a3, b1..b3), chained through the
    Gram-Schmidt construction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    if na <= 1e-9:
        raise DegenerateInput("first 6D column has near-zero norm")
    c1 = a / na
    s = c1 @ b
    u = b - s * c1
    nu = np.linalg.norm(u)
    if nu <= 1e-9:
        raise DegenerateInput("6D columns are parallel within tolerance")
    c2 = u / nu

    I = np.eye(3)
    P1 = (I - np.outer(c1, c1)) / na      # dc1/da
    P2 = (I - np.outer(c2, c2)) / nu      # dc2/du

    dR = np.zeros((3, 3, 6))
    for k in range(6):
        da = I[:, k] if k < 3 else np.zeros(3)
        db = I[:, k - 3] if k >= 3 else np.zeros(3)
        dc1 = P1 @ da
        ds = b @ dc1 + c1 @ db
        du = db - ds * c1 - s * dc1
        dc2 = P2 @ du
        dc3 = cross3(dc1, c2) + cross3(c1, dc2)
        dR[:, 0, k] = dc1
        dR[:, 1, k] = dc2
        dR[:, 2, k] = dc3
    return dR


# ---------------------------------------------------------------------------
# SO(3) / SE(3) maps
# ---------------------------------------------------------------------------

def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series fallback below the small-angle cutoff."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R; requires the rotation angle < pi - 1e-6."""
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(c)
    if theta > np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {theta:.6f} too close to pi")
    w = 0.5 * vee(R - R.T)  # = sin(theta) * axis for exact rotations
    if theta < _SMALL_ANGLE:
        return w
    return w * (theta / np.sin(theta))


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * W + B * (W @ W)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + coef * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform (R, t); R must be a proper rotation within 1e-9."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise DegenerateInput("rotation block is not a proper rotation")

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class Twist:
    """SE(3) logarithm split into translational rho and rotational phi."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Twist(xi[:3], xi[3:])


def se3_exp(xi: Twist) -> Pose:
    R = so3_exp(xi.phi)
    t = so3_left_jacobian(xi.phi) @ xi.rho
    return Pose(R, t)


def se3_log(T: Pose) -> Twist:
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return Twist(rho, phi)


def _se3_Q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot-style closed form)."""
    theta = np.linalg.norm(phi)
    P = hat(phi)
    Rh = hat(rho)
    if theta < _SMALL_ANGLE:
        m2 = 1.0 / 6.0 - theta**2 / 120.0
        m3 = 1.0 / 24.0 - theta**2 / 720.0
        m4 = -0.5 * (m3 - 3.0 * (-1.0 / 120.0 + theta**2 / 5040.0))
    else:
        t2 = theta * theta
        m2 = (theta - np.sin(theta)) / (t2 * theta)
        m3 = (1.0 - 0.5 * t2 - np.cos(theta)) / (t2 * t2)
        m4 = -0.5 * (m3 - 3.0 * (theta - np.sin(theta) - t2 * theta / 6.0) / (t2 * t2 * theta))
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (0.5 * Rh
            + m2 * (PR + RP + P @ Rh @ P)
            - m3 * (P @ PR + RP @ P - 3.0 * PRP)
            + m4 * (PRP @ P + P @ PRP))


def se3_left_jacobian_inv(xi: Twist) -> np.ndarray:
    """Inverse left Jacobian of SE(3) in (rho, phi) block ordering.

    Satisfies log(exp(eps * delta^) * exp(xi^)) ~= xi + Jinv(xi) @ delta * eps,
    which is the identity the retargeting gradient relies on.
    """
    Jinv = so3_left_jacobian_inv(xi.phi)
    Q = _se3_Q(xi.rho, xi.phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


# ---------------------------------------------------------------------------
# Kinematic chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RevoluteJoint:
    name: str
    parent: int           # index of the parent joint, -1 for the chain base
    axis: np.ndarray      # unit rotation axis in the joint's local frame
    origin: Pose          # fixed parent-frame -> joint-frame transform

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(ax)
        if n <= 1e-9:
            raise DegenerateInput(f"joint {self.name}: zero axis")
        object.__setattr__(self, "axis", ax / n)


@dataclass(frozen=True)
class PointFrame:
    """A point rigidly attached to a joint frame (-1 attaches to the base)."""

    name: str
    joint: int
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))


@dataclass(frozen=True)
class KinematicChain:
    """Revolute-joint tree with keypoints, keyvector pairs, and anchors.

    Keyvectors are differences of keypoint positions in the base (wrist)
    frame; a pair entry of -1 refers to the wrist origin. Anchors are the
    absolute-frame points matched by the retargeting anchor term.
    """

    joints: tuple[RevoluteJoint, ...]
    keypoints: tuple[PointFrame, ...]
    keyvector_pairs: tuple[tuple[int, int], ...]
    anchors: tuple[PointFrame, ...]
    limits_lower: np.ndarray
    limits_upper: np.ndarray
    name: str = "chain"

    def __post_init__(self):
        lower = np.asarray(self.limits_lower, dtype=float).reshape(-1)
        upper = np.asarray(self.limits_upper, dtype=float).reshape(-1)
        object.__setattr__(self, "limits_lower", lower)
        object.__setattr__(self, "limits_upper", upper)
        n = len(self.joints)
        if lower.shape != (n,) or upper.shape != (n,):
            raise DimensionMismatch("joint limit arrays must match joint count")
        if np.any(lower > upper):
            raise ValueError("limits_lower must be <= limits_upper")
        for i, j in enumerate(self.joints):
            if not -1 <= j.parent < i:
                raise ValueError(f"joint {i} has invalid parent {j.parent}")
        for pf in self.keypoints + self.anchors:
            if not -1 <= pf.joint < n:
                raise ValueError(f"frame {pf.name} references invalid joint {pf.joint}")
        if not self.anchors:
            raise ValueError("chain needs at least one anchor frame")
        nk = len(self.keypoints)
        for a, b in self.keyvector_pairs:
            if not (-1 <= a < nk and -1 <= b < nk):
                raise ValueError(f"keyvector pair ({a}, {b}) out of range")
        # ancestor sets let the Jacobian skip joints that cannot move a point
        ancestors = []
        for i, j in enumerate(self.joints):
            chain = set()
            p = i
            while p != -1:
                chain.add(p)
                p = self.joints[p].parent
            ancestors.append(frozenset(chain))
        object.__setattr__(self, "_ancestors", tuple(ancestors))
        # cached per-joint tables for the hot forward-kinematics path
        n = len(self.joints)
        origin_R = np.stack([j.origin.rotation for j in self.joints]) if n else np.zeros((0, 3, 3))
        origin_t = np.stack([j.origin.translation for j in self.joints]) if n else np.zeros((0, 3))
        axis_hat = np.stack([hat(j.axis) for j in self.joints]) if n else np.zeros((0, 3, 3))
        object.__setattr__(self, "_origin_R", origin_R)
        object.__setattr__(self, "_origin_t", origin_t)
        object.__setattr__(self, "_axis_hat", axis_hat)
        object.__setattr__(self, "_axis_hat2", np.einsum("nij,njk->nik", axis_hat, axis_hat))
        object.__setattr__(self, "_parents", np.array([j.parent for j in self.joints], dtype=int))

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.limits_lower, self.limits_upper)

    def _check_q(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape != (self.num_joints,):
            raise DimensionMismatch(
                f"expected {self.num_joints} joint values, got {q.shape[0]}")
        return q

    def _frames_raw(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Base-frame rotation/translation per joint, as raw arrays."""
        q = self._check_q(q)
        n = self.num_joints
        R = np.empty((n, 3, 3))
        t = np.empty((n, 3))
        eye = np.eye(3)
        sin_q = np.sin(q)
        cos1_q = 1.0 - np.cos(q)
        for i in range(n):
            spin = eye + sin_q[i] * self._axis_hat[i] + cos1_q[i] * self._axis_hat2[i]
            p = self._parents[i]
            if p == -1:
                R[i] = self._origin_R[i] @ spin
                t[i] = self._origin_t[i]
            else:
                R[i] = R[p] @ (self._origin_R[i] @ spin)
                t[i] = R[p] @ self._origin_t[i] + t[p]
        return R, t

    def joint_frames(self, q: np.ndarray) -> list[Pose]:
        """Base-frame pose of every joint frame after applying its rotation."""
        R, t = self._frames_raw(q)
        return [Pose(R[i], t[i]) for i in range(self.num_joints)]

    def _point_positions(self, R, t, points: tuple[PointFrame, ...]) -> np.ndarray:
        out = np.zeros((len(points), 3))
        for i, pf in enumerate(points):
            if pf.joint == -1:
                out[i] = pf.offset
            else:
                out[i] = R[pf.joint] @ pf.offset + t[pf.joint]
        return out

    def forward_kinematics(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Keypoints, keyvectors, and anchors in the wrist frame.

        Returns (K, V, A) with shapes (n_keypoints, 3), (n_keyvectors, 3),
        (n_anchors, 3). Deterministic in q; joint limits are not enforced
        here (clamping is the caller's job).
        """
        R, t = self._frames_raw(q)
        K = self._point_positions(R, t, self.keypoints)
        A = self._point_positions(R, t, self.anchors)
        V = self._keyvectors_of(K)
        return K, V, A

    def _keyvectors_of(self, K: np.ndarray) -> np.ndarray:
        V = np.zeros((len(self.keyvector_pairs), 3))
        for i, (src, dst) in enumerate(self.keyvector_pairs):
            p_src = np.zeros(3) if src == -1 else K[src]
            p_dst = np.zeros(3) if dst == -1 else K[dst]
            V[i] = p_dst - p_src
        return V

    def fk_full(self, q: np.ndarray):
        """Positions and Jacobians in one pass: (K, V, A, JK, JV, JA).

        One joint-frame sweep serves both, which matters in the per-frame
        solver loop.
        """
        R, t = self._frames_raw(q)
        n = self.num_joints
        axes = np.einsum("nij,nj->ni", R, np.stack([j.axis for j in self.joints])) \
            if n else np.zeros((0, 3))

        def point_jac(pf: PointFrame):
            if pf.joint == -1:
                return pf.offset.copy(), np.zeros((3, n))
            p = R[pf.joint] @ pf.offset + t[pf.joint]
            J = np.zeros((3, n))
            for j in self._ancestors[pf.joint]:
                J[:, j] = cross3(axes[j], p - t[j])
            return p, J

        K = np.zeros((len(self.keypoints), 3))
        JK = np.zeros((len(self.keypoints), 3, n))
        for i, pf in enumerate(self.keypoints):
            K[i], JK[i] = point_jac(pf)
        A = np.zeros((len(self.anchors), 3))
        JA = np.zeros((len(self.anchors), 3, n))
        for i, pf in enumerate(self.anchors):
            A[i], JA[i] = point_jac(pf)
        V = self._keyvectors_of(K)
        JV = np.zeros((len(self.keyvector_pairs), 3, n))
        for i, (src, dst) in enumerate(self.keyvector_pairs):
            Js = 0.0 if src == -1 else JK[src]
            Jd = 0.0 if dst == -1 else JK[dst]
            JV[i] = Jd - Js
        return K, V, A, JK, JV, JA

    def point_jacobians(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position Jacobians d(point)/dq for keypoints, keyvectors, anchors.

        Shapes (n_keypoints, 3, n_q), (n_keyvectors, 3, n_q),
        (n_anchors, 3, n_q). Column j of a point on link k is
        axis_j x (p - origin_j) when j is an ancestor of k, else zero.
        """
        _, _, _, JK, JV, JA = self.fk_full(q)
        return JK, JV, JA


# ---------------------------------------------------------------------------
# JSON chain schema
# ---------------------------------------------------------------------------
#
# {
#   "name": str,
#   "joints": [{"name": str, "parent": int, "axis": [x,y,z],
#               "origin": {"xyz": [x,y,z], "rpy": [r,p,y]}}, ...],
#   "keypoints": [{"name": str, "joint": int, "offset": [x,y,z]}, ...],
#   "keyvectors": [[src_keypoint, dst_keypoint], ...],   # -1 = wrist origin
#   "anchors":   [{"name": str, "joint": int, "offset": [x,y,z]}, ...],
#   "limits": {"lower": [...], "upper": [...]}
# }
#
# Joint indices are chain order; "parent"/"joint" of -1 means the wrist
# (base) frame. rpy is applied as Rz(yaw) @ Ry(pitch) @ Rx(roll).

def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    return so3_exp(np.array([0.0, 0.0, y])) @ so3_exp(np.array([0.0, p, 0.0])) \
        @ so3_exp(np.array([r, 0.0, 0.0]))


def chain_from_dict(spec: dict) -> KinematicChain:
    joints = []
    for js in spec["joints"]:
        origin = js.get("origin", {})
        pose = Pose(_rpy_matrix(origin.get("rpy", (0.0, 0.0, 0.0))),
                    np.asarray(origin.get("xyz", (0.0, 0.0, 0.0)), dtype=float))
        joints.append(RevoluteJoint(js["name"], int(js["parent"]),
                                    np.asarray(js["axis"], dtype=float), pose))
    keypoints = tuple(PointFrame(k["name"], int(k["joint"]), np.asarray(k["offset"], dtype=float))
                      for k in spec.get("keypoints", ()))
    anchors = tuple(PointFrame(a["name"], int(a["joint"]), np.asarray(a["offset"], dtype=float))
                    for a in spec.get("anchors", ()))
    pairs = tuple((int(a), int(b)) for a, b in spec.get("keyvectors", ()))
    limits = spec["limits"]
    return KinematicChain(
        joints=tuple(joints), keypoints=keypoints, keyvector_pairs=pairs,
        anchors=anchors, limits_lower=np.asarray(limits["lower"], dtype=float),
        limits_upper=np.asarray(limits["upper"], dtype=float),
        name=spec.get("name", "chain"))


def load_chain(path) -> KinematicChain:
    with open(path, "r", encoding="utf-8") as f:
        return chain_from_dict(json.load(f))


def default_hand() -> KinematicChain:
    """Three splayed planar fingers, 3 revolute joints each, 9 DoF total.

    Keypoints are the three fingertips; keyvectors are wrist->tip (x3) and
    tip->tip (x3); anchors are the palm center and the index fingertip.
    The smallest model that exercises every retargeting objective term.
    """
    fingers = [("index", -0.030, -0.25), ("middle", 0.0, 0.0), ("ring", 0.030, 0.25)]
    joints = []
    keypoints = []
    for f, (name, y, yaw) in enumerate(fingers):
        base = 3 * f
        joints.append({"name": f"{name}_base", "parent": -1, "axis": [0, 1, 0],
                       "origin": {"xyz": [0.090, y, 0.0], "rpy": [0.0, 0.0, yaw]}})
        joints.append({"name": f"{name}_mid", "parent": base, "axis": [0, 1, 0],
                       "origin": {"xyz": [0.045, 0.0, 0.0]}})
        joints.append({"name": f"{name}_tip", "parent": base + 1, "axis": [0, 1, 0],
                       "origin": {"xyz": [0.030, 0.0, 0.0]}})
        keypoints.append({"name": f"{name}_fingertip", "joint": base + 2,
                          "offset": [0.025, 0.0, 0.0]})
    spec = {
        "name": "three_finger_planar_hand",
        "joints": joints,
        "keypoints": keypoints,
        "keyvectors": [[-1, 0], [-1, 1], [-1, 2], [0, 1], [1, 2], [0, 2]],
        "anchors": [
            {"name": "palm_center", "joint": -1, "offset": [0.050, 0.0, 0.0]},
            {"name": "index_fingertip", "joint": 2, "offset": [0.025, 0.0, 0.0]},
        ],
        "limits": {"lower": [-0.15] * 9, "upper": [1.60] * 9},
    }
    return chain_from_dict(spec)
