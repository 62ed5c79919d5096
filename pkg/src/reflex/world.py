"""Deterministic kinematic multi-arm workspace.

Objects ride rigidly on the end effector that holds them. There are no dynamics:
validated trajectories are applied as teleports along their waypoints.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any, Union

from reflex.collision import Capsule, box_capsules, sphere
from reflex.errors import InvalidTransition, SchemaError, UnknownAgent, UnknownTask
from reflex.geometry import Pose, Vec3, add, dist, norm, rotate_z, scale, sub, wrap_angle
from reflex.kinematics import ArmModel, JointConfig, Waypoint, forward_kinematics
from reflex.plan import Action, Close, Move, Open, Pick, Place, Twist, Wait

TASK_IDS = ("move_rope", "arrange_cabinet", "make_sandwich", "install_drywall")
OBJECT_KINDS = ("rope", "panel", "door", "cup", "food_item", "wall", "stud", "groove", "table")
# kinds that are support surfaces or painted regions, never collision bodies
NON_COLLIDING_KINDS = frozenset({"table", "groove"})

DEFAULT_MAX_ENV_STEPS = 10
DEFAULT_MAX_REPLANS = 5
JITTER = 0.01
# how far a secondary holder may drift from its grasp point on a shared object
HOLD_TOL = 0.05
OBSERVATION_SCALE = 1.5


# ---------------------------------------------------------------------- geometry


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class CapsuleShape:
    p0: Vec3
    p1: Vec3
    radius: float

    @property
    def axial_length(self) -> float:
        return dist(self.p0, self.p1)


@dataclass(frozen=True)
class Box:
    half_extents: Vec3


Shape = Union[Sphere, CapsuleShape, Box]


@dataclass(frozen=True)
class SceneObject:
    id: str
    kind: str
    pose: Pose
    geometry: Shape
    handles: tuple[tuple[str, Vec3], ...] = ()
    graspable: bool = False
    hinge: Vec3 | None = None
    max_length: float | None = None

    def handle(self, handle_id: str) -> Vec3 | None:
        for hid, off in self.handles:
            if hid == handle_id:
                return off
        return None

    def axial_length(self) -> float:
        g = self.geometry
        if isinstance(g, CapsuleShape):
            return g.axial_length
        if isinstance(g, Box):
            return 2.0 * max(g.half_extents)
        return 2.0 * g.radius

    def capsules(self) -> tuple[Capsule, ...]:
        g = self.geometry
        if isinstance(g, Sphere):
            return (sphere(self.pose.position, g.radius),)
        if isinstance(g, CapsuleShape):
            return (Capsule(self.pose.transform(g.p0), self.pose.transform(g.p1), g.radius),)
        return box_capsules(self.pose, g.half_extents)


def _inside_shape(shape: Shape, p: Vec3, tol: float = 1e-6) -> bool:
    if isinstance(shape, Sphere):
        return norm(p) <= shape.radius + tol
    if isinstance(shape, CapsuleShape):
        from reflex.collision import closest_points

        q, _ = closest_points(shape.p0, shape.p1, p, p)
        return dist(q, p) <= shape.radius + tol
    return all(abs(p[i]) <= shape.half_extents[i] + tol for i in range(3))


# ---------------------------------------------------------------- success predicates


@dataclass(frozen=True)
class Region:
    center: Vec3
    half_extents: Vec3

    def contains(self, p: Vec3) -> bool:
        return all(abs(p[i] - self.center[i]) <= self.half_extents[i] for i in range(3))


@dataclass(frozen=True)
class RopeInGroove:
    object_id: str
    region: Region
    wall_id: str


@dataclass(frozen=True)
class PanelInstalled:
    object_id: str
    target: Pose
    pos_tol: float
    ang_tol: float


@dataclass(frozen=True)
class DoorOpenAndPlaced:
    door_id: str
    hinge_threshold: float
    placements: dict[str, Region]


@dataclass(frozen=True)
class StackOrder:
    items: tuple[str, ...]
    xy_tol: float


SuccessPredicate = Union[RopeInGroove, PanelInstalled, DoorOpenAndPlaced, StackOrder]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    agent_goals: dict[str, str]
    initial_scene: tuple[SceneObject, ...]
    arms: tuple[ArmModel, ...]
    success: SuccessPredicate
    max_env_steps: int = DEFAULT_MAX_ENV_STEPS
    max_replans: int = DEFAULT_MAX_REPLANS
    seed: int = 0
    summary: str = ""

    def arm(self, agent_id: str) -> ArmModel:
        for a in self.arms:
            if a.agent_id == agent_id:
                return a
        raise UnknownAgent(agent_id)

    @property
    def agents(self) -> list[str]:
        return sorted(a.agent_id for a in self.arms)

    def initial_object(self, object_id: str) -> SceneObject | None:
        for o in self.initial_scene:
            if o.id == object_id:
                return o
        return None

    def with_seed(self, seed: int) -> TaskSpec:
        return replace(self, seed=seed)


# ------------------------------------------------------------------------- state


@dataclass(frozen=True)
class Grasp:
    object_id: str
    grasp_offset: float  # arclength of the grasp point along the object's axis
    local: Vec3  # object origin in the end-effector frame
    dyaw: float  # object yaw minus tool yaw
    point: Vec3  # grasp point in the object frame at pick time


@dataclass(frozen=True)
class ArmState:
    joints: JointConfig
    gripper: str = "open"
    held: Grasp | None = None
    tool_yaw: float = 0.0

    def __post_init__(self) -> None:
        if self.held is not None and self.gripper != "closed":
            raise ValueError("an arm holding an object must have its gripper closed")


@dataclass
class WorldState:
    step_count: int
    arm_states: dict[str, ArmState]
    objects: dict[str, SceneObject]
    done: bool = False

    def copy(self) -> WorldState:
        return WorldState(self.step_count, dict(self.arm_states), dict(self.objects), self.done)

    def holders(self, object_id: str) -> list[str]:
        return sorted(
            a for a, s in self.arm_states.items() if s.held is not None and s.held.object_id == object_id
        )


@dataclass(frozen=True)
class Observation:
    agent_id: str
    visible_objects: tuple[tuple[str, Pose, str], ...]
    own_arm: ArmState
    reachable_radius: float
    step_count: int


@dataclass(frozen=True)
class StepOutcome:
    step_count: int
    done: bool
    events: tuple[str, ...] = field(default=())


# -------------------------------------------------------------------- task loading


def _req(d: dict, key: str, path: str) -> Any:
    if not isinstance(d, dict):
        raise SchemaError(path, "expected an object")
    if key not in d:
        raise SchemaError(f"{path}.{key}" if path else key, "missing field")
    return d[key]


def _num(v: Any, path: str, positive: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(path, "expected a finite number")
    if positive and v <= 0:
        raise SchemaError(path, "must be > 0")
    return float(v)


def _vec(v: Any, path: str, n: int = 3, positive: bool = False) -> tuple[float, ...]:
    if not isinstance(v, list) or len(v) != n:
        raise SchemaError(path, f"expected a list of {n} numbers")
    return tuple(_num(x, f"{path}[{i}]", positive) for i, x in enumerate(v))


def _str(v: Any, path: str) -> str:
    if not isinstance(v, str) or not v:
        raise SchemaError(path, "expected a non-empty string")
    return v


def _count(v: Any, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise SchemaError(path, "expected an integer >= 1")
    return v


def _pose(v: Any, path: str) -> Pose:
    if not isinstance(v, list) or len(v) not in (3, 4):
        raise SchemaError(path, "expected [x, y, z] or [x, y, z, yaw]")
    return Pose(*(_num(x, f"{path}[{i}]") for i, x in enumerate(v)))


def _region(v: Any, path: str) -> Region:
    return Region(
        _vec(_req(v, "center", path), f"{path}.center"),  # type: ignore[arg-type]
        _vec(_req(v, "half_extents", path), f"{path}.half_extents", positive=True),  # type: ignore[arg-type]
    )


def _arm(agent_id: str, d: Any, path: str) -> ArmModel:
    base = _pose(_req(d, "base", path), f"{path}.base")
    links = _vec(_req(d, "link_lengths", path), f"{path}.link_lengths", n=2)
    if min(links) <= 0:
        raise SchemaError(f"{path}.link_lengths", "link lengths must be > 0")
    lim_raw = _req(d, "joint_limits", path)
    if not isinstance(lim_raw, list) or len(lim_raw) != 3:
        raise SchemaError(f"{path}.joint_limits", "expected three [lo, hi] pairs")
    limits = []
    for i, pair in enumerate(lim_raw):
        lo, hi = _vec(pair, f"{path}.joint_limits[{i}]", n=2)
        if not lo < hi:
            raise SchemaError(f"{path}.joint_limits[{i}]", "min must be < max")
        limits.append((lo, hi))
    return ArmModel(
        agent_id=agent_id,
        base=base,
        link_lengths=links,  # type: ignore[arg-type]
        joint_limits=tuple(limits),  # type: ignore[arg-type]
        capsule_radius=_num(_req(d, "capsule_radius", path), f"{path}.capsule_radius", positive=True),
        reachable_radius=_num(
            d.get("reachable_radius", links[0] + links[1]), f"{path}.reachable_radius", positive=True
        ),
    )


def _shape(d: Any, path: str) -> Shape:
    kind = _req(d, "type", path)
    if kind == "sphere":
        return Sphere(_num(_req(d, "r", path), f"{path}.r", positive=True))
    if kind == "capsule":
        p0 = _vec(_req(d, "p0", path), f"{path}.p0")
        p1 = _vec(_req(d, "p1", path), f"{path}.p1")
        if p0 == p1:
            raise SchemaError(f"{path}.p1", "capsule needs distinct endpoints")
        return CapsuleShape(p0, p1, _num(_req(d, "r", path), f"{path}.r", positive=True))  # type: ignore[arg-type]
    if kind == "box":
        return Box(_vec(_req(d, "half_extents", path), f"{path}.half_extents", positive=True))  # type: ignore[arg-type]
    raise SchemaError(f"{path}.type", f"unknown geometry {kind!r}")


def parse_object(d: Any, path: str) -> SceneObject:
    oid = _str(_req(d, "id", path), f"{path}.id")
    kind = _req(d, "kind", path)
    if kind not in OBJECT_KINDS:
        raise SchemaError(f"{path}.kind", f"unknown kind {kind!r}")
    shape = _shape(_req(d, "geometry", path), f"{path}.geometry")
    graspable = bool(d.get("graspable", False))
    handles = []
    for i, h in enumerate(d.get("handles", [])):
        hp = f"{path}.handles[{i}]"
        off = _vec(_req(h, "offset", hp), f"{hp}.offset")
        if not _inside_shape(shape, off):  # type: ignore[arg-type]
            raise SchemaError(f"{hp}.offset", "handle does not lie on the object geometry")
        handles.append((_str(_req(h, "id", hp), f"{hp}.id"), off))
    if handles and not graspable:
        raise SchemaError(f"{path}.handles", "non-graspable objects cannot have handles")
    hinge = d.get("hinge")
    max_length = d.get("max_length")
    return SceneObject(
        id=oid,
        kind=kind,
        pose=_pose(_req(d, "pose", path), f"{path}.pose"),
        geometry=shape,
        handles=tuple(handles),  # type: ignore[arg-type]
        graspable=graspable,
        hinge=_vec(hinge, f"{path}.hinge") if hinge is not None else None,  # type: ignore[arg-type]
        max_length=_num(max_length, f"{path}.max_length", positive=True) if max_length is not None else None,
    )


def _success(d: Any, path: str) -> SuccessPredicate:
    variant = _req(d, "variant", path)
    if variant == "rope_in_groove":
        return RopeInGroove(
            _str(_req(d, "object", path), f"{path}.object"),
            _region(_req(d, "region", path), f"{path}.region"),
            _str(_req(d, "wall", path), f"{path}.wall"),
        )
    if variant == "panel_installed":
        return PanelInstalled(
            _str(_req(d, "object", path), f"{path}.object"),
            _pose(_req(d, "target", path), f"{path}.target"),
            _num(_req(d, "pos_tol", path), f"{path}.pos_tol", positive=True),
            _num(_req(d, "ang_tol", path), f"{path}.ang_tol", positive=True),
        )
    if variant == "door_open_and_placed":
        raw = _req(d, "placements", path)
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}.placements", "expected an object")
        return DoorOpenAndPlaced(
            _str(_req(d, "door", path), f"{path}.door"),
            _num(_req(d, "hinge_threshold", path), f"{path}.hinge_threshold", positive=True),
            {k: _region(v, f"{path}.placements.{k}") for k, v in sorted(raw.items())},
        )
    if variant == "stack_order":
        items = _req(d, "items", path)
        if not isinstance(items, list) or len(items) < 2:
            raise SchemaError(f"{path}.items", "expected at least two object ids")
        return StackOrder(
            tuple(_str(x, f"{path}.items[{i}]") for i, x in enumerate(items)),
            _num(_req(d, "xy_tol", path), f"{path}.xy_tol", positive=True),
        )
    raise SchemaError(f"{path}.variant", f"unknown success variant {variant!r}")


def task_from_dict(doc: Any) -> TaskSpec:
    if not isinstance(doc, dict):
        raise SchemaError("$", "task document must be a JSON object")
    task_id = _req(doc, "task_id", "")
    if task_id not in TASK_IDS:
        raise UnknownTask(f"unknown task_id {task_id!r}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SchemaError("seed", "expected an unsigned integer")
    agents = _req(doc, "agents", "")
    if not isinstance(agents, list) or len(agents) < 2:
        raise SchemaError("agents", "expected at least two agents")
    goals: dict[str, str] = {}
    arms: list[ArmModel] = []
    for i, a in enumerate(agents):
        aid = _str(_req(a, "id", f"agents[{i}]"), f"agents[{i}].id")
        if aid in goals:
            raise SchemaError(f"agents[{i}].id", f"duplicate agent {aid!r}")
        goals[aid] = _str(_req(a, "goal", f"agents[{i}]"), f"agents[{i}].goal")
        # error paths name the arm by its agent index, matching the user-facing layout
        arms.append(_arm(aid, _req(a, "arm", f"agents[{i}]"), f"arms[{i}]"))
    objs_raw = _req(doc, "objects", "")
    if not isinstance(objs_raw, list):
        raise SchemaError("objects", "expected a list")
    objects = [parse_object(o, f"objects[{i}]") for i, o in enumerate(objs_raw)]
    ids = [o.id for o in objects]
    if len(set(ids)) != len(ids):
        raise SchemaError("objects", "duplicate object ids")
    success = _success(_req(doc, "success", ""), "success")
    return TaskSpec(
        task_id=task_id,
        agent_goals=goals,
        initial_scene=tuple(objects),
        arms=tuple(arms),
        success=success,
        max_env_steps=_count(doc.get("max_env_steps", DEFAULT_MAX_ENV_STEPS), "max_env_steps"),
        max_replans=_count(doc.get("max_replans", DEFAULT_MAX_REPLANS), "max_replans"),
        seed=seed,
        summary=str(doc.get("summary", "")),
    )


def load_task(document: str) -> TaskSpec:
    """Parse and validate a task JSON document."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    return task_from_dict(doc)


def shape_to_dict(g: Shape) -> dict:
    if isinstance(g, Sphere):
        return {"type": "sphere", "r": g.radius}
    if isinstance(g, CapsuleShape):
        return {"type": "capsule", "p0": list(g.p0), "p1": list(g.p1), "r": g.radius}
    return {"type": "box", "half_extents": list(g.half_extents)}


def object_to_dict(o: SceneObject) -> dict:
    d: dict[str, Any] = {
        "id": o.id,
        "kind": o.kind,
        "pose": o.pose.to_list(),
        "geometry": shape_to_dict(o.geometry),
        "handles": [{"id": h, "offset": list(off)} for h, off in o.handles],
        "graspable": o.graspable,
    }
    if o.hinge is not None:
        d["hinge"] = list(o.hinge)
    if o.max_length is not None:
        d["max_length"] = o.max_length
    return d


def _region_to_dict(r: Region) -> dict:
    return {"center": list(r.center), "half_extents": list(r.half_extents)}


def _success_to_dict(p: SuccessPredicate) -> dict:
    if isinstance(p, RopeInGroove):
        return {"variant": "rope_in_groove", "object": p.object_id, "wall": p.wall_id, "region": _region_to_dict(p.region)}
    if isinstance(p, PanelInstalled):
        return {
            "variant": "panel_installed",
            "object": p.object_id,
            "target": p.target.to_list(),
            "pos_tol": p.pos_tol,
            "ang_tol": p.ang_tol,
        }
    if isinstance(p, DoorOpenAndPlaced):
        return {
            "variant": "door_open_and_placed",
            "door": p.door_id,
            "hinge_threshold": p.hinge_threshold,
            "placements": {k: _region_to_dict(v) for k, v in sorted(p.placements.items())},
        }
    return {"variant": "stack_order", "items": list(p.items), "xy_tol": p.xy_tol}


def task_to_dict(task: TaskSpec) -> dict:
    """Inverse of ``task_from_dict``."""
    agents = []
    for arm in task.arms:
        agents.append(
            {
                "id": arm.agent_id,
                "goal": task.agent_goals[arm.agent_id],
                "arm": {
                    "base": arm.base.to_list(),
                    "link_lengths": list(arm.link_lengths),
                    "joint_limits": [list(p) for p in arm.joint_limits],
                    "capsule_radius": arm.capsule_radius,
                    "reachable_radius": arm.reachable_radius,
                },
            }
        )
    return {
        "task_id": task.task_id,
        "summary": task.summary,
        "seed": task.seed,
        "agents": agents,
        "objects": [object_to_dict(o) for o in task.initial_scene],
        "success": _success_to_dict(task.success),
        "max_env_steps": task.max_env_steps,
        "max_replans": task.max_replans,
    }


# ---------------------------------------------------------------- state transitions


def home_state(arm: ArmModel) -> ArmState:
    return ArmState(joints=arm.clamp((0.0, 0.0, 0.0)))


def reset(task: TaskSpec) -> WorldState:
    """Fresh world: arms at home, graspable objects jittered by the task seed."""
    rng = random.Random(task.seed)
    objects: dict[str, SceneObject] = {}
    for o in sorted(task.initial_scene, key=lambda o: o.id):
        if o.graspable:
            dx = rng.uniform(-JITTER, JITTER)
            dy = rng.uniform(-JITTER, JITTER)
            o = replace(o, pose=Pose(o.pose.x + dx, o.pose.y + dy, o.pose.z, o.pose.yaw))
        objects[o.id] = o
    arms = {a.agent_id: home_state(a) for a in sorted(task.arms, key=lambda a: a.agent_id)}
    return WorldState(step_count=0, arm_states=arms, objects=objects)


def end_effector(arm: ArmModel, state: ArmState) -> Pose:
    p = forward_kinematics(arm, state.joints)
    return Pose(p.x, p.y, p.z, state.tool_yaw)


def observe(world: WorldState, task: TaskSpec, agent: str) -> Observation:
    """Objects within 1.5 x reachable radius of the agent's arm base."""
    if agent not in world.arm_states:
        raise UnknownAgent(agent)
    arm = task.arm(agent)
    limit = arm.reachable_radius * OBSERVATION_SCALE
    base = arm.base.position
    visible = tuple(
        (oid, o.pose, o.kind)
        for oid, o in sorted(world.objects.items())
        if dist(o.pose.position, base) <= limit
    )
    return Observation(agent, visible, world.arm_states[agent], arm.reachable_radius, world.step_count)


def full_observation(world: WorldState, task: TaskSpec, agent: str) -> Observation:
    """Observation with every object visible, for the central full-state planner."""
    arm = task.arm(agent)
    visible = tuple((oid, o.pose, o.kind) for oid, o in sorted(world.objects.items()))
    return Observation(agent, visible, world.arm_states[agent], arm.reachable_radius, world.step_count)


# ----------------------------------------------------------------- grasp mechanics


def rope_rest(task: TaskSpec, obj: SceneObject) -> CapsuleShape:
    init = task.initial_object(obj.id)
    g = init.geometry if init is not None else obj.geometry
    assert isinstance(g, CapsuleShape)
    return g


def grasp_point_local(obj: SceneObject, action: Pick) -> tuple[Vec3, float] | str:
    """Grasp point in the object frame and its axial coordinate, or an error reason."""
    g = obj.geometry
    if action.handle is not None:
        off = obj.handle(action.handle)
        if off is None:
            return f"unknown handle {action.handle!r}"
        if isinstance(g, CapsuleShape):
            axis = sub(g.p1, g.p0)
            s = sum(a * b for a, b in zip(sub(off, g.p0), axis)) / g.axial_length
            return off, s
        return off, 0.0
    if action.offset is not None:
        if not isinstance(g, CapsuleShape):
            return "offset grasps need an elongated (capsule) object"
        if action.offset > g.axial_length + 1e-12:
            return f"offset {action.offset} exceeds object length {g.axial_length:.3f}"
        t = action.offset / g.axial_length
        return tuple(g.p0[i] + (g.p1[i] - g.p0[i]) * t for i in range(3)), action.offset  # type: ignore[return-value]
    if isinstance(g, CapsuleShape):
        return scale(add(g.p0, g.p1), 0.5), g.axial_length / 2.0
    return (0.0, 0.0, 0.0), 0.0


def _door_pose(obj: SceneObject, ee: Vec3, grasp: Grasp) -> Pose:
    assert obj.hinge is not None
    hinge_world = obj.pose.transform(obj.hinge)
    rel = sub(grasp.point, obj.hinge)
    yaw = math.atan2(ee[1] - hinge_world[1], ee[0] - hinge_world[0]) - math.atan2(rel[1], rel[0])
    pos = sub(hinge_world, rotate_z(obj.hinge, yaw))
    return Pose(pos[0], pos[1], obj.pose.z, yaw)


def _rope_between(task: TaskSpec, obj: SceneObject, ga: Vec3, sa: float, gb: Vec3, sb: float) -> SceneObject:
    rest = rope_rest(task, obj)
    if sa > sb:
        ga, gb, sa, sb = gb, ga, sb, sa
    span = sub(gb, ga)
    d = norm(span)
    u = scale(span, 1.0 / d) if d > 1e-12 else sub(rest.p1, rest.p0)
    if d <= 1e-12:
        u = scale(u, 1.0 / norm(u))
    p0 = sub(ga, scale(u, sa))
    p1 = add(gb, scale(u, rest.axial_length - sb))
    center = scale(add(p0, p1), 0.5)
    yaw = math.atan2(u[1], u[0]) if math.hypot(u[0], u[1]) > 1e-12 else obj.pose.yaw
    pose = Pose(center[0], center[1], center[2], yaw)
    shape = CapsuleShape(pose.inverse_transform(p0), pose.inverse_transform(p1), rest.radius)
    return replace(obj, pose=pose, geometry=shape)


def rope_span(task: TaskSpec, world: WorldState, object_id: str) -> tuple[float, float] | None:
    """(distance between grasp points, maximum allowed) for a rope held at two points."""
    holders = world.holders(object_id)
    if len(holders) < 2:
        return None
    obj = world.objects[object_id]
    rest = rope_rest(task, obj)
    limit_len = obj.max_length or rest.axial_length
    (a, b) = holders[:2]
    ga = end_effector(task.arm(a), world.arm_states[a]).position
    gb = end_effector(task.arm(b), world.arm_states[b]).position
    sa = world.arm_states[a].held.grasp_offset  # type: ignore[union-attr]
    sb = world.arm_states[b].held.grasp_offset  # type: ignore[union-attr]
    allowed = abs(sb - sa) * limit_len / rest.axial_length
    return dist(ga, gb), allowed


def settle_held(world: WorldState, task: TaskSpec) -> None:
    """Recompute the pose of every held object from its holders' end effectors (in place)."""
    by_object: dict[str, list[str]] = {}
    for agent in sorted(world.arm_states):
        held = world.arm_states[agent].held
        if held is not None:
            by_object.setdefault(held.object_id, []).append(agent)
    for oid, holders in by_object.items():
        obj = world.objects[oid]
        primary = holders[0]
        grasp = world.arm_states[primary].held
        ee = end_effector(task.arm(primary), world.arm_states[primary])
        if obj.kind == "rope" and len(holders) >= 2:
            second = world.arm_states[holders[1]]
            ee2 = end_effector(task.arm(holders[1]), second)
            world.objects[oid] = _rope_between(
                task, obj, ee.position, grasp.grasp_offset, ee2.position, second.held.grasp_offset  # type: ignore[union-attr]
            )
        elif obj.hinge is not None:
            world.objects[oid] = replace(obj, pose=_door_pose(obj, ee.position, grasp))  # type: ignore[arg-type]
        else:
            pos = ee.transform(grasp.local)  # type: ignore[union-attr]
            world.objects[oid] = replace(obj, pose=Pose(pos[0], pos[1], pos[2], ee.yaw + grasp.dyaw))  # type: ignore[union-attr]


def holder_deviation(world: WorldState, task: TaskSpec, object_id: str) -> tuple[str, float] | None:
    """Largest gap between a holder's end effector and its grasp point on the object.

    Ropes are flexible and exempt; rigid objects and doors must agree with every holder.
    """
    obj = world.objects[object_id]
    if obj.kind == "rope":
        return None
    worst: tuple[str, float] | None = None
    for agent in world.holders(object_id):
        st = world.arm_states[agent]
        ee = end_effector(task.arm(agent), st).position
        gap = dist(ee, obj.pose.transform(st.held.point))  # type: ignore[union-attr]
        if worst is None or gap > worst[1]:
            worst = (agent, gap)
    return worst


def make_grasp(world: WorldState, task: TaskSpec, agent: str, action: Pick) -> Grasp:
    obj = world.objects[action.object_id]
    res = grasp_point_local(obj, action)
    if isinstance(res, str):
        raise InvalidTransition(f"{agent}: {res}")
    point, s = res
    st = world.arm_states[agent]
    ee = end_effector(task.arm(agent), st)
    local = rotate_z(sub(obj.pose.position, ee.position), -ee.yaw)
    return Grasp(action.object_id, s, local, wrap_angle(obj.pose.yaw - ee.yaw), point)


def grasp_problem(world: WorldState, agent: str, action: Action) -> str | None:
    """Why ``action`` cannot start from the current state, or None if it can."""
    st = world.arm_states[agent]
    if isinstance(action, Pick):
        obj = world.objects.get(action.object_id)
        if obj is None:
            return f"unknown object {action.object_id!r}"
        if st.held is not None:
            return f"already holding {st.held.object_id}"
        if not obj.graspable:
            return f"{obj.id} is not graspable"
        if obj.hinge is None and obj.kind != "rope" and world.holders(obj.id):
            if action.handle is None:
                return f"{obj.id} is already held; pick a free handle"
        res = grasp_point_local(obj, action)
        if isinstance(res, str):
            return res
    elif isinstance(action, Place):
        if st.held is None or st.held.object_id != action.object_id:
            return f"not holding {action.object_id}"
        if world.objects[action.object_id].hinge is not None:
            return f"{action.object_id} is hinged and cannot be placed"
    return None


def resolve_target(world: WorldState, task: TaskSpec, agent: str, action: Action) -> tuple[Pose, float] | None:
    """End-effector target position and tool yaw for a motion action; None when stationary."""
    st = world.arm_states[agent]
    arm = task.arm(agent)
    if isinstance(action, Pick):
        obj = world.objects[action.object_id]
        res = grasp_point_local(obj, action)
        assert not isinstance(res, str)
        return Pose.from_position(obj.pose.transform(res[0]), st.tool_yaw), st.tool_yaw
    if isinstance(action, Move):
        return action.to, action.to.yaw
    if isinstance(action, Twist):
        ee = end_effector(arm, st)
        yaw = wrap_angle(st.tool_yaw + math.radians(action.degrees))
        return Pose(ee.x, ee.y, ee.z, yaw), yaw
    if isinstance(action, Place):
        grasp = st.held
        assert grasp is not None
        obj = world.objects[action.object_id]
        at = action.at
        if obj.kind == "rope" and len(world.holders(obj.id)) >= 2:
            rest = rope_rest(task, obj)
            t = grasp.grasp_offset / rest.axial_length
            local = tuple(rest.p0[i] + (rest.p1[i] - rest.p0[i]) * t for i in range(3))
            return Pose.from_position(at.transform(local), st.tool_yaw), st.tool_yaw  # type: ignore[arg-type]
        yaw = wrap_angle(at.yaw - grasp.dyaw)
        pos = sub(at.position, rotate_z(grasp.local, yaw))
        return Pose.from_position(pos, yaw), yaw
    return None


def apply_effects(world: WorldState, task: TaskSpec, actions: dict[str, Action]) -> list[str]:
    """Gripper and attachment changes after motion has completed (in place)."""
    events: list[str] = []
    placed: dict[str, Pose] = {}
    for agent in sorted(actions):
        action = actions[agent]
        problem = grasp_problem(world, agent, action)
        if problem is not None:
            raise InvalidTransition(f"{agent}: {problem}")
        st = world.arm_states[agent]
        if isinstance(action, Pick):
            world.arm_states[agent] = replace(st, gripper="closed", held=make_grasp(world, task, agent, action))
            events.append(f"{agent} picked {action.object_id}")
        elif isinstance(action, Place):
            world.arm_states[agent] = replace(st, gripper="open", held=None)
            placed[action.object_id] = action.at
            events.append(f"{agent} placed {action.object_id}")
        elif isinstance(action, Open):
            if st.held is not None:
                events.append(f"{agent} released {st.held.object_id}")
            world.arm_states[agent] = replace(st, gripper="open", held=None)
        elif isinstance(action, Close):
            world.arm_states[agent] = replace(st, gripper="closed")
    for oid, at in placed.items():
        if world.holders(oid):
            raise InvalidTransition(f"{oid} placed while still held by {world.holders(oid)}")
        obj = world.objects[oid]
        if obj.kind == "rope":
            obj = replace(obj, geometry=rope_rest(task, obj))
        world.objects[oid] = replace(obj, pose=at)
    return events


def set_arm(world: WorldState, agent: str, q: JointConfig, tool_yaw: float) -> None:
    world.arm_states[agent] = replace(world.arm_states[agent], joints=q, tool_yaw=tool_yaw)


def apply_joint_step(
    world: WorldState,
    task: TaskSpec,
    actions: dict[str, Action],
    trajectories: dict[str, list[Waypoint]] | None = None,
) -> tuple[WorldState, StepOutcome]:
    """Execute one synchronized, already-validated step and return the new world."""
    if world.step_count >= task.max_env_steps:
        raise InvalidTransition(f"step cap {task.max_env_steps} reached")
    if set(actions) != set(world.arm_states):
        raise InvalidTransition(f"actions cover {sorted(actions)}, world has {sorted(world.arm_states)}")
    new = world.copy()
    trajectories = trajectories or {}
    for agent in sorted(actions):
        wps = trajectories.get(agent)
        if wps:
            q, pose = wps[-1]
            set_arm(new, agent, q, pose.yaw)
        elif not isinstance(actions[agent], (Wait, Open, Close)):
            raise InvalidTransition(f"{agent}: motion action without a trajectory")
    settle_held(new, task)
    events = apply_effects(new, task, actions)
    settle_held(new, task)
    new.step_count = world.step_count + 1
    new.done = check_success(new, task)
    return new, StepOutcome(new.step_count, new.done, tuple(events))


# ------------------------------------------------------------------------- success


def _endpoints(obj: SceneObject) -> list[Vec3]:
    g = obj.geometry
    if isinstance(g, CapsuleShape):
        return [obj.pose.transform(g.p0), obj.pose.transform(g.p1)]
    return [obj.pose.position]


def check_success(world: WorldState, task: TaskSpec) -> bool:
    """Pure evaluation of the task's success predicate on ``world``."""
    pred = task.success
    if isinstance(pred, PanelInstalled):
        panel = world.objects.get(pred.object_id)
        if panel is None:
            return False
        return (
            dist(panel.pose.position, pred.target.position) <= pred.pos_tol
            and abs(wrap_angle(panel.pose.yaw - pred.target.yaw)) <= pred.ang_tol
        )
    if isinstance(pred, RopeInGroove):
        rope = world.objects.get(pred.object_id)
        wall = world.objects.get(pred.wall_id)
        if rope is None or world.holders(rope.id):
            return False
        if not all(pred.region.contains(p) for p in _endpoints(rope)):
            return False
        if wall is not None:
            from reflex.collision import Entity, entity_contact

            if entity_contact(Entity(rope.id, rope.capsules()), Entity(wall.id, wall.capsules())) is not None:
                return False
        return True
    if isinstance(pred, DoorOpenAndPlaced):
        door = world.objects.get(pred.door_id)
        init = task.initial_object(pred.door_id)
        if door is None or init is None:
            return False
        if abs(wrap_angle(door.pose.yaw - init.pose.yaw)) < pred.hinge_threshold:
            return False
        for oid, region in pred.placements.items():
            o = world.objects.get(oid)
            if o is None or world.holders(oid) or not region.contains(o.pose.position):
                return False
        return True
    if isinstance(pred, StackOrder):
        items = [world.objects.get(i) for i in pred.items]
        if any(o is None or world.holders(o.id) for o in items):
            return False
        base = items[0].pose  # type: ignore[union-attr]
        prev_z = -math.inf
        for o in items:
            p = o.pose  # type: ignore[union-attr]
            if math.hypot(p.x - base.x, p.y - base.y) > pred.xy_tol or p.z <= prev_z:
                return False
            prev_z = p.z
        return True
    raise TypeError(f"unsupported success predicate {pred!r}")
