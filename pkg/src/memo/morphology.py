"""Joint/link graphs for the planar robots, their module partitions, and observation layouts."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ArityError, CoverageError, MorphologyError, OverlapError


class JointKind(str, enum.Enum):
    BODY = "body"
    HIP = "hip"
    KNEE = "knee"
    ARM = "arm"
    FINGER_BASE = "finger_base"
    FINGER_TIP = "finger_tip"


class EnvKind(str, enum.Enum):
    CRAWLER = "crawler"
    LIFTER = "lifter"


# module type ids; legs are type 0 as in the usual centipede labelling
LEG, BODY = 0, 1
FINGER, ARM = 0, 1
TYPE_NAMES = {
    EnvKind.CRAWLER: {LEG: "leg", BODY: "body"},
    EnvKind.LIFTER: {FINGER: "finger", ARM: "arm"},
}

# link lengths in meters
SEGMENT_LENGTH = 0.30
THIGH_LENGTH = 0.25
SHIN_LENGTH = 0.25
ARM_LINK_LENGTH = 0.25
FINGER_LINK_LENGTH = 0.08


@dataclass(frozen=True)
class Joint:
    joint_id: int
    parent_link: int
    child_link: int
    kind: JointKind


@dataclass(frozen=True)
class Link:
    link_id: int
    length: float


@dataclass(frozen=True)
class MorphologyGraph:
    env_kind: EnvKind
    joints: tuple[Joint, ...]
    links: tuple[Link, ...]
    root_link: int
    counts: tuple[int, int]

    def __post_init__(self):
        ids = [j.joint_id for j in self.joints]
        if ids != list(range(len(ids))):
            raise MorphologyError("joint ids must be contiguous from 0")
        link_ids = {l.link_id for l in self.links}
        if self.root_link not in link_ids:
            raise MorphologyError("root link missing")
        parent_of = {}
        for j in self.joints:
            if j.parent_link not in link_ids or j.child_link not in link_ids:
                raise MorphologyError(f"joint {j.joint_id} references an unknown link")
            if j.child_link in parent_of or j.child_link == self.root_link:
                raise MorphologyError(f"link {j.child_link} has two parents")
            parent_of[j.child_link] = j.parent_link
        if len(parent_of) != len(link_ids) - 1:
            raise MorphologyError("link graph is not a spanning tree")
        for link in link_ids:
            seen = set()
            while link != self.root_link:
                if link in seen:
                    raise MorphologyError("cycle in link graph")
                seen.add(link)
                link = parent_of[link]

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def kinds(self) -> list[JointKind]:
        return [j.kind for j in self.joints]

    def joint_ids_of(self, *kinds: JointKind) -> list[int]:
        return [j.joint_id for j in self.joints if j.kind in kinds]


@dataclass(frozen=True)
class ModuleInstance:
    instance_id: int
    type_id: int
    joint_ids: tuple[int, ...]


@dataclass(frozen=True)
class ModulePartition:
    instances: tuple[ModuleInstance, ...]
    type_arity: dict[int, int]

    def __len__(self):
        return len(self.instances)

    @property
    def type_ids(self) -> list[int]:
        return sorted(self.type_arity)

    def instances_of(self, type_id: int) -> list[ModuleInstance]:
        return [inst for inst in self.instances if inst.type_id == type_id]

    def instance_of_joint(self) -> dict[int, int]:
        return {j: inst.instance_id for inst in self.instances for j in inst.joint_ids}


def build_crawler(num_body_segments: int, num_legs: int) -> tuple[MorphologyGraph, ModulePartition]:
    """Side-view centipede: a chain of segments, one two-joint leg per segment.

    Joints are numbered segment by segment: hip_i, knee_i, then the body
    joint linking segment i to segment i+1.
    """
    if num_legs != num_body_segments or num_body_segments < 2:
        raise MorphologyError(
            f"crawler needs num_legs == num_body_segments >= 2, got {num_body_segments}, {num_legs}"
        )
    links: list[Link] = []
    joints: list[Joint] = []
    segment_links = []
    for s in range(num_body_segments):
        segment_links.append(len(links))
        links.append(Link(len(links), SEGMENT_LENGTH))
    instances: list[ModuleInstance] = []
    for s in range(num_body_segments):
        thigh = len(links)
        links.append(Link(thigh, THIGH_LENGTH))
        shin = len(links)
        links.append(Link(shin, SHIN_LENGTH))
        hip = len(joints)
        joints.append(Joint(hip, segment_links[s], thigh, JointKind.HIP))
        joints.append(Joint(hip + 1, thigh, shin, JointKind.KNEE))
        instances.append(ModuleInstance(len(instances), LEG, (hip, hip + 1)))
        if s + 1 < num_body_segments:
            body = len(joints)
            joints.append(Joint(body, segment_links[s], segment_links[s + 1], JointKind.BODY))
            instances.append(ModuleInstance(len(instances), BODY, (body,)))
    graph = MorphologyGraph(EnvKind.CRAWLER, tuple(joints), tuple(links), segment_links[0],
                            (num_body_segments, num_legs))
    return graph, ModulePartition(tuple(instances), {LEG: 2, BODY: 1})


def build_lifter(num_arm_joints: int, num_fingers: int) -> tuple[MorphologyGraph, ModulePartition]:
    """Planar claw: an arm chain ending in a palm, fingers of two joints each."""
    if num_arm_joints < 1 or num_fingers < 2:
        raise MorphologyError(f"lifter needs >=1 arm joint and >=2 fingers, got {num_arm_joints}, {num_fingers}")
    links = [Link(0, 0.0)]  # fixed shoulder mount
    joints: list[Joint] = []
    parent = 0
    for _ in range(num_arm_joints):
        child = len(links)
        links.append(Link(child, ARM_LINK_LENGTH))
        joints.append(Joint(len(joints), parent, child, JointKind.ARM))
        parent = child
    palm = parent
    instances = [ModuleInstance(0, ARM, tuple(range(num_arm_joints)))]
    for _ in range(num_fingers):
        prox = len(links)
        links.append(Link(prox, FINGER_LINK_LENGTH))
        dist = len(links)
        links.append(Link(dist, FINGER_LINK_LENGTH))
        base = len(joints)
        joints.append(Joint(base, palm, prox, JointKind.FINGER_BASE))
        joints.append(Joint(base + 1, prox, dist, JointKind.FINGER_TIP))
        instances.append(ModuleInstance(len(instances), FINGER, (base, base + 1)))
    graph = MorphologyGraph(EnvKind.LIFTER, tuple(joints), tuple(links), 0, (num_arm_joints, num_fingers))
    return graph, ModulePartition(tuple(instances), {FINGER: 2, ARM: num_arm_joints})


def build_morphology(env_kind, counts) -> tuple[MorphologyGraph, ModulePartition]:
    kind = EnvKind(env_kind)
    if kind is EnvKind.CRAWLER:
        return build_crawler(*counts)
    return build_lifter(*counts)


def validate_partition(graph: MorphologyGraph, partition: ModulePartition) -> None:
    """Raise if ``partition`` does not exactly tile the graph's joints with role-aligned instances."""
    owner: dict[int, int] = {}
    for inst in partition.instances:
        if inst.type_id not in partition.type_arity:
            raise ArityError(f"instance {inst.instance_id} has undeclared type {inst.type_id}")
        for j in inst.joint_ids:
            if j in owner:
                raise OverlapError(f"joint {j} is in instances {owner[j]} and {inst.instance_id}")
            owner[j] = inst.instance_id
    for inst in partition.instances:
        if len(inst.joint_ids) != partition.type_arity[inst.type_id]:
            raise ArityError(
                f"instance {inst.instance_id} has {len(inst.joint_ids)} joints, type arity is "
                f"{partition.type_arity[inst.type_id]}"
            )
    all_ids = set(range(graph.num_joints))
    unknown = set(owner) - all_ids
    if unknown:
        raise CoverageError(f"partition references joints {sorted(unknown)} not in the graph")
    missing = all_ids - set(owner)
    if missing:
        raise CoverageError(f"joints {sorted(missing)} are not assigned to any module")
    kinds = graph.kinds()
    for type_id in partition.type_arity:
        roles = {tuple(kinds[j] for j in inst.joint_ids) for inst in partition.instances_of(type_id)}
        if len(roles) > 1:
            raise ArityError(f"instances of type {type_id} are not role-aligned: {sorted(roles)}")


GLOBAL_DIMS = {EnvKind.CRAWLER: 5, EnvKind.LIFTER: 3}
PER_JOINT_DIM = 4
_VALID_KINDS = {
    EnvKind.CRAWLER: {JointKind.BODY, JointKind.HIP, JointKind.KNEE},
    EnvKind.LIFTER: {JointKind.ARM, JointKind.FINGER_BASE, JointKind.FINGER_TIP},
}


@dataclass(frozen=True)
class ObsLayout:
    global_dim: int
    per_joint_dim: int
    num_joints: int
    joint_slices: dict[int, slice]
    module_slices: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def total_dim(self) -> int:
        return self.global_dim + self.per_joint_dim * self.num_joints

    def local_indices(self, joint_id: int) -> np.ndarray:
        s = self.joint_slices[joint_id]
        return np.arange(s.start, s.stop)

    def same_as(self, other: "ObsLayout") -> bool:
        return (self.global_dim, self.per_joint_dim, self.num_joints) == (
            other.global_dim, other.per_joint_dim, other.num_joints)


def observation_layout(graph: MorphologyGraph, partition: ModulePartition | None = None,
                       env_kind=None) -> ObsLayout:
    """Flat observation = global features followed by per-joint blocks in joint-id order."""
    try:
        kind = EnvKind(env_kind if env_kind is not None else graph.env_kind)
    except ValueError as exc:
        raise MorphologyError(f"unknown env kind {env_kind!r}") from exc
    if not set(graph.kinds()) <= _VALID_KINDS[kind]:
        raise MorphologyError(f"graph joint kinds are inconsistent with env kind {kind.value}")
    g = GLOBAL_DIMS[kind]
    joint_slices = {
        j: slice(g + PER_JOINT_DIM * j, g + PER_JOINT_DIM * (j + 1)) for j in range(graph.num_joints)
    }
    module_slices = {}
    if partition is not None:
        for inst in partition.instances:
            module_slices[inst.instance_id] = np.concatenate(
                [np.arange(joint_slices[j].start, joint_slices[j].stop) for j in inst.joint_ids]
            )
    return ObsLayout(g, PER_JOINT_DIM, graph.num_joints, joint_slices, module_slices)
