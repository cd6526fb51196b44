"""Deterministic planar environments: a kinematic crawler and a kinematic lifter.

Both are actuated with relative joint targets: each step adds
``clip(action, -1, 1) * action_scale`` to the joint angles, then clamps to
the joint limits. Locomotion is "anchor and pull": feet that stay on the
ground through a step drag the body by the negative of their mean backward
sweep.
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError
from .morphology import (
    ARM_LINK_LENGTH,
    FINGER_LINK_LENGTH,
    SEGMENT_LENGTH,
    SHIN_LENGTH,
    THIGH_LENGTH,
    EnvKind,
    JointKind,
    MorphologyGraph,
    ModulePartition,
    ObsLayout,
    build_morphology,
    observation_layout,
)


class Terrain(str, enum.Enum):
    FLAT = "flat"
    RIDGED = "ridged"


class ObjectKind(str, enum.Enum):
    DISK = "disk"
    WIDE_DISK = "wide_disk"


JOINT_LIMITS = {
    JointKind.BODY: 0.6,
    JointKind.HIP: 1.2,
    JointKind.KNEE: 1.2,
    JointKind.ARM: 1.2,
    JointKind.FINGER_BASE: 1.2,
    JointKind.FINGER_TIP: 1.2,
}
DEFAULT_EPISODE_LEN = {EnvKind.CRAWLER: 128, EnvKind.LIFTER: 50}

ROOT_HEIGHT = THIGH_LENGTH + SHIN_LENGTH - 0.05
VELOCITY_SCALE = 10.0
RIDGE_CLEARANCE = 0.08
RIDGE_FACTOR = 0.25

DISK_RADIUS = {ObjectKind.DISK: 0.10, ObjectKind.WIDE_DISK: 0.14}
CONTACT_EPS = 0.02
SHOULDER_HEIGHT = 0.40
PALM_HALF_WIDTH = 0.08
FINGER_OPEN_ANGLE = -0.5


@dataclass(frozen=True)
class EnvConfig:
    env_kind: EnvKind = EnvKind.CRAWLER
    counts: tuple[int, int] = (3, 3)
    terrain: Terrain = Terrain.FLAT
    object: ObjectKind = ObjectKind.DISK
    action_scale: float = 0.1
    episode_len: int | None = None
    broken_joints: frozenset[int] = frozenset()
    broken_noise_scale: float = 0.02
    # half-width of the uniform joint-angle perturbation applied at reset
    init_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "env_kind", EnvKind(self.env_kind))
        object.__setattr__(self, "terrain", Terrain(self.terrain))
        object.__setattr__(self, "object", ObjectKind(self.object))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "broken_joints", frozenset(int(j) for j in self.broken_joints))
        if self.episode_len is None:
            object.__setattr__(self, "episode_len", DEFAULT_EPISODE_LEN[self.env_kind])
        if not self.action_scale > 0:
            raise ValueError("action_scale must be positive")
        if self.episode_len < 1:
            raise ValueError("episode_len must be positive")

    def with_seed(self, seed: int) -> "EnvConfig":
        return replace(self, seed=int(seed))


@dataclass
class EnvState:
    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    root_x: float
    step_index: int
    rng: np.random.Generator
    # crawler extras
    foot_tips: np.ndarray | None = None  # (legs, 2) body-frame (x, world height)
    contact: np.ndarray | None = None
    root_height: float = 0.0
    pitch: float = 0.0
    root_vx: float = 0.0
    root_vy: float = 0.0
    pitch_rate: float = 0.0
    # lifter extras
    disk_center: np.ndarray | None = None  # (x, z)
    attached: bool = False

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)


def _down(theta):
    """Unit vector pointing down, rotated counter-clockwise by ``theta``."""
    return np.stack([np.sin(theta), -np.cos(theta)], axis=-1)


def _along(theta):
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


class _Kinematics:
    """Per-morphology index bookkeeping and forward kinematics."""

    def __init__(self, graph: MorphologyGraph):
        self.graph = graph
        self.kind = graph.env_kind
        kinds = graph.kinds()
        self.limits = np.array([JOINT_LIMITS[k] for k in kinds])
        if self.kind is EnvKind.CRAWLER:
            self.hip = np.array(graph.joint_ids_of(JointKind.HIP))
            self.knee = np.array(graph.joint_ids_of(JointKind.KNEE))
            self.body = np.array(graph.joint_ids_of(JointKind.BODY))
        else:
            self.arm = np.array(graph.joint_ids_of(JointKind.ARM))
            self.fbase = np.array(graph.joint_ids_of(JointKind.FINGER_BASE))
            self.ftip = np.array(graph.joint_ids_of(JointKind.FINGER_TIP))
            n = len(self.fbase)
            self.offsets = np.linspace(-PALM_HALF_WIDTH, PALM_HALF_WIDTH, n)
            # each finger curls toward the palm centre; module x axis points inward
            self.inward = np.where(self.offsets > 1e-12, -1.0, 1.0)
            self.shoulder = np.array([-len(self.arm) * ARM_LINK_LENGTH, SHOULDER_HEIGHT])

    # crawler -------------------------------------------------------------
    def crawler_frames(self, q):
        """Segment orientations, centres, hinge points and leg points in the root-segment frame."""
        body = q[self.body]
        phi = np.concatenate([[0.0], np.cumsum(body)])
        u = _along(phi)
        steps = -0.5 * SEGMENT_LENGTH * (u[:-1] + u[1:])
        centers = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        hinges = centers[:-1] - 0.5 * SEGMENT_LENGTH * u[:-1]
        a1 = phi + q[self.hip]
        a2 = a1 + q[self.knee]
        knees = centers + THIGH_LENGTH * _down(a1)
        feet = knees + SHIN_LENGTH * _down(a2)
        return phi, centers, hinges, knees, feet

    def crawler_feet(self, q):
        feet = self.crawler_frames(q)[4]
        return feet[:, 0], ROOT_HEIGHT + feet[:, 1]

    def crawler_local_tips(self, q):
        tips = np.zeros((len(q), 2))
        h, k = q[self.hip], q[self.knee]
        thigh = THIGH_LENGTH * _down(h)
        tips[self.hip] = thigh
        tips[self.knee] = thigh + SHIN_LENGTH * _down(h + k)
        if len(self.body):
            tips[self.body] = -SEGMENT_LENGTH * _along(q[self.body])
        return tips

    # lifter --------------------------------------------------------------
    def arm_points(self, q):
        psi = np.cumsum(q[self.arm])
        pts = self.shoulder + np.concatenate([np.zeros((1, 2)), np.cumsum(ARM_LINK_LENGTH * _along(psi), axis=0)])
        return pts  # shoulder, ..., palm

    def finger_points(self, q, palm):
        base = palm + np.stack([self.offsets, np.zeros_like(self.offsets)], axis=-1)
        a1 = self.inward * q[self.fbase]
        a2 = self.inward * (q[self.fbase] + q[self.ftip])
        mid = base + FINGER_LINK_LENGTH * _down(a1)
        tip = mid + FINGER_LINK_LENGTH * _down(a2)
        return base, mid, tip

    def lifter_local_tips(self, q):
        tips = np.zeros((len(q), 2))
        pts = self.arm_points(q)
        tips[self.arm] = pts[1:] - self.shoulder
        base, mid, tip = self.finger_points(q, pts[-1])
        flip = np.stack([self.inward, np.ones_like(self.inward)], axis=-1)
        tips[self.fbase] = (mid - base) * flip
        tips[self.ftip] = (tip - base) * flip
        return tips


_KIN_CACHE: dict[tuple, _Kinematics] = {}


def _kinematics(config: EnvConfig) -> _Kinematics:
    key = (config.env_kind, config.counts)
    kin = _KIN_CACHE.get(key)
    if kin is None:
        graph, _ = build_morphology(config.env_kind, config.counts)
        kin = _KIN_CACHE[key] = _Kinematics(graph)
    return kin


def _disk_radius(config: EnvConfig) -> float:
    return DISK_RADIUS[config.object]


def _surface_dists(kin, q, center, radius):
    palm = kin.arm_points(q)[-1]
    tips = kin.finger_points(q, palm)[2]
    d = np.abs(np.linalg.norm(tips - center, axis=-1) - radius)
    return palm, d


def _crawler_globals(kin, state):
    _, centers, _, _, _ = kin.crawler_frames(state.joint_angles)
    phi = np.concatenate([[0.0], np.cumsum(state.joint_angles[kin.body])])
    return ROOT_HEIGHT + float(centers[:, 1].mean()), float(phi.mean())


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    kin = _kinematics(config)
    q = state.joint_angles
    n = len(q)
    if kin.kind is EnvKind.CRAWLER:
        glob = [state.root_height, state.root_vx, state.root_vy, state.pitch, state.pitch_rate]
        tips = kin.crawler_local_tips(q)
    else:
        palm = kin.arm_points(q)[-1]
        c = state.disk_center
        glob = [c[0] - palm[0], c[1] - palm[1], c[1]]
        tips = kin.lifter_local_tips(q)
    local = np.column_stack([q, state.joint_velocities, tips]).reshape(4 * n)
    return np.concatenate([np.asarray(glob, dtype=np.float64), local])


def reset(config: EnvConfig) -> tuple[EnvState, np.ndarray]:
    kin = _kinematics(config)
    rng = np.random.default_rng(config.seed)
    n = kin.graph.num_joints
    q = np.zeros(n)
    if kin.kind is EnvKind.LIFTER:
        q[kin.fbase] = FINGER_OPEN_ANGLE
    if config.init_noise > 0:
        q = np.clip(q + config.init_noise * rng.uniform(-1.0, 1.0, n), -kin.limits, kin.limits)
    state = EnvState(q, np.zeros(n), 0.0, 0, rng)
    if kin.kind is EnvKind.CRAWLER:
        fx, fh = kin.crawler_feet(q)
        state.foot_tips = np.column_stack([fx, fh])
        state.contact = fh <= 0.0
        state.root_height, state.pitch = _crawler_globals(kin, state)
    else:
        r = _disk_radius(config)
        state.disk_center = np.array([0.0, r])
        state.attached = False
    return state, observe(state, config)


def reward_locomotion(v_x: float, orientation_term: float, action: np.ndarray) -> float:
    """Per-step crawler reward; ``v_x`` in m/step."""
    a = np.asarray(action, dtype=np.float64)
    return VELOCITY_SCALE * v_x + 0.1 * orientation_term - 0.7 * float(a @ a) / a.size


def reward_grasp(disk_z: float, avg_fingertip_dist: float, all_contact: bool) -> float:
    if all_contact:
        return 10.0 * disk_z - 0.1 * avg_fingertip_dist
    return -0.1 * avg_fingertip_dist


def _apply_action(state: EnvState, action, config: EnvConfig, kin) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != state.joint_angles.shape:
        raise DimensionError(f"action has shape {a.shape}, expected {state.joint_angles.shape}")
    a = np.clip(a, -1.0, 1.0)
    delta = a * config.action_scale
    if config.broken_joints:
        broken = np.array(sorted(config.broken_joints))
        delta[broken] = config.broken_noise_scale * state.rng.uniform(-1.0, 1.0, len(broken))
    q_old = state.joint_angles
    q_new = np.clip(q_old + delta, -kin.limits, kin.limits)
    state.joint_velocities = q_new - q_old
    state.joint_angles = q_new
    return a


def _step_inplace(state: EnvState, action, config: EnvConfig):
    kin = _kinematics(config)
    q_old = state.joint_angles
    a = _apply_action(state, action, config, kin)
    q_new = state.joint_angles
    info = {}
    if kin.kind is EnvKind.CRAWLER:
        x0, h0 = kin.crawler_feet(q_old)
        x1, h1 = kin.crawler_feet(q_new)
        stance = (h0 <= 0.0) & (h1 <= 0.0)
        dx = -float(np.mean(x1[stance] - x0[stance])) if stance.any() else 0.0
        if config.terrain is Terrain.RIDGED and dx > 0.0:
            swing = h1 > 0.0
            if swing.any() and not np.all(h1[swing] > RIDGE_CLEARANCE):
                dx *= RIDGE_FACTOR
        height_prev, pitch_prev = state.root_height, state.pitch
        state.root_x += dx
        state.foot_tips = np.column_stack([x1, h1])
        state.contact = h1 <= 0.0
        state.root_height, state.pitch = _crawler_globals(kin, state)
        state.root_vx = dx
        state.root_vy = state.root_height - height_prev
        state.pitch_rate = state.pitch - pitch_prev
        body = q_new[kin.body]
        orientation = float(np.mean(np.cos(body))) if len(body) else 1.0
        reward = reward_locomotion(dx, orientation, a)
        info["reported_reward"] = VELOCITY_SCALE * dx + 0.1 * orientation
        info["dx"] = dx
        info["stance"] = stance
    else:
        r = _disk_radius(config)
        palm_old = kin.arm_points(q_old)[-1]
        palm_new = kin.arm_points(q_new)[-1]
        center = state.disk_center
        if state.attached:
            center = center + (palm_new - palm_old)
            center[1] = max(center[1], r)
        _, dists = _surface_dists(kin, q_new, center, r)
        all_contact = bool(np.all(dists <= CONTACT_EPS))
        if state.attached and not all_contact:
            state.attached = False
            center = np.array([center[0], r])
            _, dists = _surface_dists(kin, q_new, center, r)
            all_contact = bool(np.all(dists <= CONTACT_EPS))
        if not state.attached and all_contact:
            state.attached = True
        state.disk_center = center
        avg = float(np.mean(dists))
        reward = reward_grasp(float(center[1]), avg, all_contact)
        info["reported_reward"] = reward
        info["all_contact"] = all_contact
    state.step_index += 1
    done = state.step_index >= config.episode_len
    return observe(state, config), float(reward), done, info


def step(state: EnvState, action, config: EnvConfig):
    """Pure step: returns (new_state, raw_obs, reward, done); ``state`` is not modified."""
    new = state.copy()
    obs, reward, done, _ = _step_inplace(new, action, config)
    return new, obs, reward, done


class Env:
    """Stateful wrapper used by the trainers; one instance per rollout worker."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.graph, self.partition = build_morphology(config.env_kind, config.counts)
        self.layout: ObsLayout = observation_layout(self.graph, self.partition)
        self.state: EnvState | None = None
        self._episode = 0

    @property
    def num_joints(self) -> int:
        return self.graph.num_joints

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start an episode; without ``seed`` successive episodes get distinct derived seeds."""
        if seed is None:
            seed = self.config.seed * 1_000_003 + self._episode
        self._episode += 1
        self.state, obs = reset(self.config.with_seed(seed))
        return obs

    def step(self, action):
        obs, reward, done, info = _step_inplace(self.state, action, self.config)
        return obs, reward, done, info


@dataclass
class RunningNormalizer:
    """Streaming per-dimension mean/variance (Welford, with Chan's batch merge)."""

    dim: int
    count: float = 0.0
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    m2: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / max(self.count, 1.0)

    def update(self, obs) -> "RunningNormalizer":
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise DimensionError(f"observation width {x.shape[1]} != normalizer width {self.dim}")
        n = x.shape[0]
        if n == 0:
            return self
        batch_mean = x.mean(axis=0)
        batch_m2 = ((x - batch_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + batch_m2 + delta * delta * (self.count * n / total)
        self.count = total
        return self

    def normalize(self, obs) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"observation width {x.shape[-1]} != normalizer width {self.dim}")
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -10.0, 10.0)

    def copy(self) -> "RunningNormalizer":
        return RunningNormalizer(self.dim, self.count, self.mean.copy(), self.m2.copy())


def normalizer_update(norm: RunningNormalizer, obs) -> RunningNormalizer:
    return norm.update(obs)


def normalize(norm: RunningNormalizer, obs) -> np.ndarray:
    return norm.normalize(obs)


def env_layout(config: EnvConfig) -> tuple[MorphologyGraph, ModulePartition, ObsLayout]:
    graph, partition = build_morphology(config.env_kind, config.counts)
    return graph, partition, observation_layout(graph, partition)
