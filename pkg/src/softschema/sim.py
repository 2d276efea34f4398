"""Planar physics of a passive compliant finger on a commanded base.

The finger is a chain of point masses joined by stretch springs and angular
bending springs. Node 0 is welded to the base, whose pose follows the commanded
pose through a first-order lag. Finger nodes carry a round skin and touch
static obstacles (discs and boxes) and pushable discs through penalty contact
with regularised Coulomb friction. Pushable discs are overdamped: their
velocity is the applied force divided by a ground drag coefficient, so they
stay put exactly when nothing touches them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np


class SceneError(ValueError):
    """Raised when a scene description is inconsistent with the rest pose."""

    def __init__(self, message: str, shape_index: int | None = None):
        super().__init__(message)
        self.shape_index = shape_index


class DivergenceError(FloatingPointError):
    """Raised when the integrator leaves the finite / physically sane region."""

    def __init__(self, message: str, node_index: int):
        super().__init__(message)
        self.node_index = node_index


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Box:
    min: tuple[float, float]
    max: tuple[float, float]


Obstacle = Union[Disc, Box]


@dataclass(frozen=True)
class MovableDisc:
    center: tuple[float, float]
    radius: float
    mass: float
    color_id: int


@dataclass(frozen=True)
class Workspace:
    """Bounds on the commanded base pose (x, y in metres, theta in radians)."""

    x: tuple[float, float] = (-0.07, 0.07)
    y: tuple[float, float] = (0.05, 0.11)
    theta: tuple[float, float] = (-math.pi / 2 - 0.35, -math.pi / 2 + 0.35)

    @property
    def low(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.theta[0]])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.theta[1]])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def contains(self, pose) -> bool:
        pose = np.asarray(pose, dtype=float)
        return bool(np.all(pose >= self.low) and np.all(pose <= self.high))


@dataclass(frozen=True)
class SceneSpec:
    static_obstacles: tuple[Obstacle, ...] = ()
    movable_objects: tuple[MovableDisc, ...] = ()
    workspace: Workspace = field(default_factory=Workspace)
    seed: int = 0
    # explicit initial base pose; drawn from the workspace when None
    base_pose: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class SimParams:
    n_nodes: int = 8
    rest_length: float = 0.02
    k_stretch: float = 400.0  # N per unit axial strain
    k_bend: float = 2.0  # N m per radian of joint turn
    damping: float = 0.8  # strain-rate damping, N s per unit strain or N m s / rad
    k_contact: float = 1000.0
    friction: float = 0.4
    tau: float = 0.3
    dt_frame: float = 1.0 / 33.0
    substeps: int = 10
    node_mass: float = 0.05
    skin_radius: float = 0.01
    bend_strain_weight: float = 2.0  # sensor strain per radian of joint turn
    ground_drag: float = 400.0  # per kg of object mass, N s / (m kg)
    friction_smoothing: float = 1e-3  # m/s, regularises the Coulomb sign

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError("finger needs at least 3 nodes")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        for name in ("rest_length", "node_mass", "tau", "dt_frame"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ActionCommand:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)


@dataclass
class FingerState:
    node_positions: np.ndarray  # (N, 2)
    node_velocities: np.ndarray  # (N, 2)


@dataclass
class SimState:
    finger: FingerState
    object_positions: np.ndarray  # (M, 2)
    object_velocities: np.ndarray  # (M, 2)
    base_pose: np.ndarray  # (3,)
    time: float = 0.0
    # contact diagnostics of the most recent step
    contact_force: float = 0.0
    object_contact: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def copy(self) -> "SimState":
        return SimState(
            finger=FingerState(
                self.finger.node_positions.copy(), self.finger.node_velocities.copy()
            ),
            object_positions=self.object_positions.copy(),
            object_velocities=self.object_velocities.copy(),
            base_pose=self.base_pose.copy(),
            time=self.time,
            contact_force=self.contact_force,
            object_contact=self.object_contact.copy(),
        )

    @property
    def in_contact(self) -> bool:
        return self.contact_force > 0.0


def _as_pose(cmd) -> np.ndarray:
    if isinstance(cmd, ActionCommand):
        return cmd.as_array()
    return np.asarray(cmd, dtype=float).reshape(3)


def rest_chain(base_pose, params: SimParams) -> np.ndarray:
    """Node positions of the straight, unstrained finger at `base_pose`."""
    x, y, theta = base_pose
    s = params.rest_length * np.arange(params.n_nodes)
    return np.stack([x + s * math.cos(theta), y + s * math.sin(theta)], axis=1)


def _disc_penetration(points, center, radius):
    """Return (depth, outward normal) of skin discs at `points` vs a disc."""
    d = points - np.asarray(center)
    dist = np.sqrt(np.sum(d * d, axis=1))
    safe = np.where(dist > 1e-15, dist, 1.0)
    normal = np.where(dist[:, None] > 1e-15, d / safe[:, None], np.array([1.0, 0.0]))
    return radius - dist, normal


def _box_penetration(points, bmin, bmax):
    """Signed distance from `points` to a box, negated, and outward normal."""
    bmin = np.asarray(bmin)
    bmax = np.asarray(bmax)
    closest = np.clip(points, bmin, bmax)
    d = points - closest
    dist = np.sqrt(np.sum(d * d, axis=1))
    inside = dist == 0.0
    depth = -dist
    safe = np.where(dist > 0, dist, 1.0)
    normal = d / safe[:, None]
    if np.any(inside):
        p = points[inside]
        gaps = np.stack([p[:, 0] - bmin[0], bmax[0] - p[:, 0], p[:, 1] - bmin[1], bmax[1] - p[:, 1]], axis=1)
        face = np.argmin(gaps, axis=1)
        dirs = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        normal[inside] = dirs[face]
        depth[inside] = gaps[np.arange(len(p)), face]
    return depth, normal


def penalty_force(depth, k_contact: float):
    """Normal penalty force magnitude for a penetration depth (zero if separated)."""
    return k_contact * np.maximum(depth, 0.0)


def _contact_forces(pos, vel, obj_pos, obj_vel, scene: SceneSpec, params: SimParams, h: float | None = None):
    """Penalty normal force plus friction; with a substep `h` the friction impulse
    is capped so it can stop, but never reverse, the tangential slip."""
    f_nodes = np.zeros_like(pos)
    f_objs = np.zeros_like(obj_pos)
    max_normal = 0.0
    touched = np.zeros(len(obj_pos), dtype=bool)

    def apply(depth, normal, other_vel):
        nonlocal max_normal
        hit = depth > 0.0
        if not np.any(hit):
            return None
        fn = params.k_contact * np.where(hit, depth, 0.0)
        rel = vel - other_vel
        vt = rel - np.sum(rel * normal, axis=1)[:, None] * normal
        speed = np.sqrt(np.sum(vt * vt, axis=1) + params.friction_smoothing**2)
        coef = params.friction * fn / speed
        if h is not None:
            coef = np.minimum(coef, params.node_mass / h)
        ft = -coef[:, None] * vt
        f = fn[:, None] * normal + ft
        max_normal = max(max_normal, float(fn.max()))
        return f

    r = params.skin_radius
    for shape in scene.static_obstacles:
        if isinstance(shape, Disc):
            depth, normal = _disc_penetration(pos, shape.center, shape.radius + r)
        else:
            depth, normal = _box_penetration(pos, shape.min, shape.max)
            depth = depth + r
        f = apply(depth, normal, np.zeros(2))
        if f is not None:
            f_nodes += f
    for k, obj in enumerate(scene.movable_objects):
        depth, normal = _disc_penetration(pos, obj_pos[k], obj.radius + r)
        f = apply(depth, normal, obj_vel[k])
        if f is not None:
            f_nodes += f
            f_objs[k] -= f.sum(axis=0)
            touched[k] = True
    f_nodes[0] = 0.0  # node 0 is kinematic
    return f_nodes, f_objs, max_normal, touched


def joint_angles(pos, base_theta: float) -> np.ndarray:
    """Turning angle at each joint; joint 0 is measured against the base heading."""
    d = np.diff(pos, axis=0)
    alpha = np.arctan2(d[:, 1], d[:, 0])
    prev = np.concatenate([[base_theta], alpha[:-1]])
    turn = alpha - prev
    return (turn + np.pi) % (2.0 * np.pi) - np.pi


def _strain_jacobian(pos, base_theta, params: SimParams):
    """Generalised strains q = [axial strain, joint turn] and dq/d(node positions).

    Returns q (2(N-1),), J (2(N-1), 2N) over flattened node coordinates, and
    dq/d(base heading), which only touches joint 0.
    """
    n = len(pos)
    s = n - 1
    d = np.diff(pos, axis=0)
    length = np.sqrt(np.sum(d * d, axis=1))
    unit = d / length[:, None]
    perp = np.stack([-d[:, 1], d[:, 0]], axis=1) / (length * length)[:, None]
    q = np.concatenate([(length - params.rest_length) / params.rest_length, joint_angles(pos, base_theta)])
    jac = np.zeros((2 * s, n, 2))
    rows = np.arange(s)
    # axial strain of segment i depends on nodes i and i+1
    jac[rows, rows + 1] = unit / params.rest_length
    jac[rows, rows] = -unit / params.rest_length
    # turn at joint j: alpha_j - alpha_{j-1}, alpha_j = heading of segment j
    jac[s + rows, rows + 1] += perp
    jac[s + rows, rows] -= perp
    jac[s + rows[1:], rows[1:]] -= perp[:-1]
    jac[s + rows[1:], rows[:-1]] += perp[:-1]
    dq_dtheta = np.zeros(2 * s)
    dq_dtheta[s] = -1.0
    return q, jac.reshape(2 * s, 2 * n), dq_dtheta


def _strain_weights(params: SimParams, s: int):
    """Stiffness and damping weights so that E = 0.5 q.Wk.q and R = 0.5 qdot.Wc.qdot.

    Each segment is a Kelvin-Voigt element: axial tension k_s e + c de/dt and
    joint torque k_b phi + c dphi/dt.
    """
    L = params.rest_length
    wk = np.concatenate([np.full(s, params.k_stretch * L), np.full(s, params.k_bend)])
    wc = np.concatenate([np.full(s, params.damping * L), np.full(s, params.damping)])
    return wk, wc


def _internal_forces(pos, vel, base_theta, params: SimParams, base_rate: float = 0.0):
    """Elastic plus viscous forces on every node (node 0 zeroed; it is kinematic)."""
    q, jac, dq_dtheta = _strain_jacobian(pos, base_theta, params)
    wk, wc = _strain_weights(params, len(pos) - 1)
    qdot = jac @ vel.reshape(-1) + dq_dtheta * base_rate
    f = -(jac.T @ (wk * q + wc * qdot)).reshape(pos.shape)
    f[0] = 0.0
    return f


def build_scene(spec: SceneSpec, rng_seed: int, params: SimParams | None = None) -> SimState:
    """Place the finger at rest and the movable objects at their initial centres.

    The base pose comes from `spec.base_pose` when set, otherwise it is drawn
    from the workspace with `rng_seed` (rejecting poses that overlap a shape).
    """
    params = params or SimParams()
    rng = np.random.default_rng(rng_seed)
    shapes = list(spec.static_obstacles) + list(spec.movable_objects)
    colors = [o.color_id for o in spec.movable_objects]
    if len(set(colors)) != len(colors):
        raise SceneError("movable object colours must be distinct")

    def overlap(base_pose):
        nodes = rest_chain(base_pose, params)
        for i, shape in enumerate(shapes):
            if isinstance(shape, Box):
                depth, _ = _box_penetration(nodes, shape.min, shape.max)
                depth = depth + params.skin_radius
            else:
                depth, _ = _disc_penetration(nodes, shape.center, shape.radius + params.skin_radius)
            if np.any(depth > 0.0):
                return i
        return None

    if spec.base_pose is not None:
        base = np.asarray(spec.base_pose, dtype=float)
        hit = overlap(base)
        if hit is not None:
            raise SceneError(f"rest finger overlaps shape {hit}", shape_index=hit)
    else:
        ws = spec.workspace
        for _ in range(200):
            base = rng.uniform(ws.low, ws.high)
            hit = overlap(base)
            if hit is None:
                break
        else:
            raise SceneError(f"no overlap-free base pose found; last overlap with shape {hit}", shape_index=hit)

    nodes = rest_chain(base, params)
    m = len(spec.movable_objects)
    obj_pos = np.array([o.center for o in spec.movable_objects], dtype=float).reshape(m, 2)
    return SimState(
        finger=FingerState(nodes, np.zeros_like(nodes)),
        object_positions=obj_pos,
        object_velocities=np.zeros((m, 2)),
        base_pose=base.copy(),
        time=0.0,
        object_contact=np.zeros(m, dtype=bool),
    )


def step(state: SimState, cmd, dt: float, scene: SceneSpec, params: SimParams | None = None) -> SimState:
    """Advance by `dt` with `params.substeps` semi-implicit Euler sub-intervals."""
    params = params or SimParams()
    if not dt > 0:
        raise ValueError("dt must be positive")
    target = _as_pose(cmd)
    if not np.all(np.isfinite(target)):
        raise ValueError("command must be finite")

    h = dt / params.substeps
    blend = -math.expm1(-h / params.tau)
    obj_drag = np.array([params.ground_drag * o.mass for o in scene.movable_objects]).reshape(-1, 1)

    pos = state.finger.node_positions.copy()
    vel = state.finger.node_velocities.copy()
    obj_pos = state.object_positions.copy()
    obj_vel = state.object_velocities.copy()
    base = state.base_pose.copy()
    max_force = 0.0
    touched = np.zeros(len(obj_pos), dtype=bool)

    n = len(pos)
    wk, wc = _strain_weights(params, n - 1)
    for _ in range(params.substeps):
        old_theta = base[2]
        base = base + (target - base) * blend
        q, jac, dq_dtheta = _strain_jacobian(pos, base[2], params)
        fc, fo, fmax, hit = _contact_forces(pos, vel, obj_pos, obj_vel, scene, params, h)
        max_force = max(max_force, fmax)
        touched |= hit
        # elastic and contact forces explicit, strain-rate damping implicit
        v0 = (base[:2] - pos[0]) / h
        jf, j0 = jac[:, 2:], jac[:, :2]
        rate_base = j0 @ v0 + dq_dtheta * (base[2] - old_theta) / h
        force = -(jf.T @ (wk * q)) + fc[1:].reshape(-1) - jf.T @ (wc * rate_base)
        lhs = params.node_mass * np.eye(2 * (n - 1)) + h * (jf.T * wc) @ jf
        rhs = params.node_mass * vel[1:].reshape(-1) + h * force
        vf = np.linalg.solve(lhs, rhs)
        vel = np.vstack([v0, vf.reshape(n - 1, 2)])
        pos = pos + h * vel
        pos[0] = base[:2]
        if len(obj_pos):
            obj_vel = fo / obj_drag
            obj_pos = obj_pos + h * obj_vel

    bad = ~np.all(np.isfinite(pos), axis=1) | ~np.all(np.isfinite(vel), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"non-finite state at node {idx}", node_index=idx)
    seg = np.sqrt(np.sum(np.diff(pos, axis=0) ** 2, axis=1))
    over = seg > 3.0 * params.rest_length
    if np.any(over):
        idx = int(np.flatnonzero(over)[0]) + 1
        raise DivergenceError(f"segment ending at node {idx} exceeds 3x rest length", node_index=idx)

    return SimState(
        finger=FingerState(pos, vel),
        object_positions=obj_pos,
        object_velocities=obj_vel,
        base_pose=base,
        time=state.time + dt,
        contact_force=max_force,
        object_contact=touched,
    )


def strain_profile(state: SimState, params: SimParams | None = None) -> np.ndarray:
    """Per-segment strain: relative stretch plus weighted |bend| at the proximal joint."""
    params = params or SimParams()
    pos = state.finger.node_positions
    length = np.sqrt(np.sum(np.diff(pos, axis=0) ** 2, axis=1))
    stretch = np.abs(length - params.rest_length) / params.rest_length
    bend = np.abs(joint_angles(pos, state.base_pose[2]))
    return stretch + params.bend_strain_weight * bend


def kinetic_energy(state: SimState, params: SimParams | None = None) -> float:
    params = params or SimParams()
    v = state.finger.node_velocities
    return 0.5 * params.node_mass * float(np.sum(v * v))


def potential_energy(state: SimState, params: SimParams | None = None) -> float:
    """Elastic energy stored in the stretch and bending springs."""
    params = params or SimParams()
    pos = state.finger.node_positions
    length = np.sqrt(np.sum(np.diff(pos, axis=0) ** 2, axis=1))
    phi = joint_angles(pos, state.base_pose[2])
    return float(
        0.5 * params.k_stretch / params.rest_length * np.sum((length - params.rest_length) ** 2)
        + 0.5 * params.k_bend * np.sum(phi**2)
    )


def with_params(params: SimParams, **overrides) -> SimParams:
    return replace(params, **overrides)
